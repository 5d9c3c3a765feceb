"""Pipeline drivers behind the CLI: log generation, fusion, mapping,
pseudo-label export, evaluation, and benchmarks.

All functions are importable so tests exercise the same code paths as the
command line.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import fileio, labelprop
from .evaluation import (CameraFrustum, ConfigurationError, IoUResult,
                         iou_map_vs_map, iou_scan_vs_map)
from .fusion import (CameraView, SegmentationFrame, SemanticCloud, class_alphas,
                     fuse_cloud, smooth_and_fuse_image)
from .geometry import (Pose, SphericalModel, Trajectory, apply, invert,
                       render_range_image)
from .labelprop import (ScanRecord, ScanWindowPolicy, export_training_pair,
                        generate_pseudolabels, ground_plane_correction)
from .labels import LabelSet, softmax
from .synth import (NoiseSpec, forward_camera_extrinsic, load_scene,
                    scene_from_spec, simulate_detections, simulate_scan,
                    simulate_segmentation)
from .voxelmap import VoxelMap


@dataclass
class RunConfig:
    """Paths and knobs shared by the pipeline commands."""

    calibration: str = ""
    trajectory: str = ""
    scans_dir: str = ""
    frames_dir: str = ""
    detections: str = ""
    labelset: str = ""
    output_dir: str = "out"
    camera_only: bool = False
    voxel_size: float = 0.25
    n_horizon: int = 10
    merge_policy: str = "drop"
    horizon: str = "infinite"
    threshold: float = 0.80
    window: int = 2
    alpha_dyn: float = 0.80
    alpha_stat: float = 0.25
    s_factor: float = 1.5
    provenance: str = "camonly_map"
    ground_correction: bool = False
    include_intensity: bool = False

    @classmethod
    def load(cls, path: str, **overrides) -> "RunConfig":
        with open(path) as f:
            cfg = json.load(f)
        base = os.path.dirname(os.path.abspath(path))
        fields = {f for f in cls.__dataclass_fields__}
        known = {k: v for k, v in cfg.items() if k in fields}
        known.update({k: v for k, v in overrides.items() if v is not None})
        rc = cls(**known)
        # relative paths resolve against the config file
        for name in ("calibration", "trajectory", "scans_dir", "frames_dir",
                     "detections", "labelset", "output_dir"):
            val = getattr(rc, name)
            if val and not os.path.isabs(val):
                setattr(rc, name, os.path.join(base, val))
        return rc

    def load_labelset(self) -> LabelSet:
        return LabelSet.load(self.labelset) if self.labelset else LabelSet.default()


# ---------------------------------------------------------------------------
# synthetic log generation


def generate_log(scene_path: str, out_dir: str, seed: int = 0,
                 n_scans: int | None = None,
                 lidar_noise: NoiseSpec | None = None,
                 camera_noise: NoiseSpec | None = None,
                 labelset: LabelSet | None = None) -> dict:
    """Generate a complete file-based sensor log plus ground truth from a
    scene description. Deterministic given the seed."""
    labelset = labelset or LabelSet.default()
    scene, spec = load_scene(scene_path, labelset)
    noise_cfg = NoiseSpec(**spec.get("noise", {}))
    lidar_noise = lidar_noise or noise_cfg
    camera_noise = camera_noise or noise_cfg
    rng = np.random.default_rng(seed)

    sensors = spec["sensors"]
    lid = sensors["lidar"]
    model = SphericalModel(width=lid["w"], height=lid["h"],
                           f_up=np.deg2rad(lid["f_up_deg"]),
                           f_down=np.deg2rad(lid["f_down_deg"]),
                           r_max=lid["r_max_m"])
    camc = sensors["camera"]
    from .geometry import CameraModel
    cam = CameraModel(fx=camc["fx"], fy=camc["fy"], cx=camc["cx"], cy=camc["cy"],
                      width=camc["width"], height=camc["height"],
                      T_cam_base=forward_camera_extrinsic())
    T_base_lidar = np.eye(4)

    tspec = spec["trajectory"]
    n = n_scans or tspec["n_scans"]
    dt = tspec["dt"]
    start = np.array(tspec["start"], dtype=np.float64)
    vel = np.array(tspec.get("velocity", [0, 0, 0]), dtype=np.float64)
    yaw_rate = np.deg2rad(tspec.get("yaw_rate_deg", 0.0))

    def _quat(t):
        half = 0.5 * yaw_rate * t
        return np.array([np.cos(half), 0.0, 0.0, np.sin(half)])

    poses = [Pose(i * dt, start + vel * (i * dt), _quat(i * dt))
             for i in range(max(n, 2))]
    traj = Trajectory(poses)

    os.makedirs(out_dir, exist_ok=True)
    scans_dir = os.path.join(out_dir, "scans")
    frames_dir = os.path.join(out_dir, "frames")
    os.makedirs(scans_dir, exist_ok=True)
    os.makedirs(frames_dir, exist_ok=True)
    ls_hash = labelset.config_hash()
    labelset.save(os.path.join(out_dir, "labelset.json"))
    fileio.save_calibration(
        fileio.Calibration(cam, model, T_base_lidar),
        os.path.join(out_dir, "calibration.json"))
    fileio.save_trajectory(traj, os.path.join(out_dir, "trajectory.csv"))

    gt_map = VoxelMap(voxel_size=0.25, num_classes=labelset.num_classes,
                      labelset_hash=ls_hash)
    detections = []
    C = labelset.num_classes
    for i in range(n):
        t = i * dt
        pose = traj.interpolate(t)
        img, gt_grid = simulate_scan(scene, pose, model, lidar_noise, t, rng)
        valid = img.valid
        # quantize like the scan files so the ground-truth map sees exactly
        # the coordinates the pipeline will reload
        xyz = img.xyz[valid].astype(np.float32).astype(np.float64)
        gt_cls = gt_grid[valid]
        intensity = img.intensity[valid]
        # observed LiDAR CNN stand-in: flips + sharp softmax over one-hot
        observed = gt_cls.copy()
        if lidar_noise.label_flip_rate > 0:
            flip = rng.random(len(observed)) < lidar_noise.label_flip_rate
            shift = rng.integers(1, C, size=len(observed))
            observed = np.where(flip, (observed + shift) % C, observed)
        scores = np.zeros((len(observed), C))
        scores[np.arange(len(observed)), observed] = lidar_noise.score_temperature
        lidar_probs = softmax(scores)
        fileio.save_scan(os.path.join(scans_dir, f"scan_{i:04d}.npz"),
                         xyz, intensity, t, i, lidar_probs=lidar_probs,
                         gt_class=gt_cls, labelset_hash=ls_hash)

        world_xyz = apply(pose.matrix() @ T_base_lidar, xyz
                          ).astype(np.float32).astype(np.float64)
        one_hot = np.zeros((len(gt_cls), C))
        one_hot[np.arange(len(gt_cls)), gt_cls] = 1.0
        gt_map.integrate_scan(SemanticCloud(world_xyz, one_hot, timestamp=t), i)

        pose_cam = Pose.from_matrix(
            pose.matrix() @ invert(cam.T_cam_base), t)
        frame, _ = simulate_segmentation(scene, pose_cam, cam, camera_noise, t, rng)
        fileio.save_frame(os.path.join(frames_dir, f"frame_{i:04d}.npz"),
                          frame, labelset_hash=ls_hash)
        for det in simulate_detections(scene, pose_cam, cam, camera_noise, t, rng):
            detections.append((t, det))

    fileio.save_detections(detections, labelset,
                           os.path.join(out_dir, "detections.jsonl"))
    gt_map.save(os.path.join(out_dir, "gt_map.svx"))
    config = {
        "calibration": "calibration.json",
        "trajectory": "trajectory.csv",
        "scans_dir": "scans",
        "frames_dir": "frames",
        "detections": "detections.jsonl",
        "labelset": "labelset.json",
        "output_dir": "out",
    }
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(config, f, indent=2)
    meta = {"scene": spec.get("name", os.path.basename(scene_path)),
            "seed": seed, "n_scans": n, "dt": dt, "labelset_hash": ls_hash}
    with open(os.path.join(out_dir, "meta.json"), "w") as f:
        json.dump(meta, f, indent=2)
    return meta


# ---------------------------------------------------------------------------
# fusion


def _load_log(cfg: RunConfig):
    labelset = cfg.load_labelset()
    calib = fileio.load_calibration(cfg.calibration)
    traj = fileio.load_trajectory(cfg.trajectory)
    return labelset, calib, traj


def run_fuse(cfg: RunConfig) -> dict:
    """Fuse every scan with its matching camera frame and detections; write
    world-frame semantic clouds and temporally smoothed fused frames."""
    labelset, calib, traj = _load_log(cfg)
    ls_hash = labelset.config_hash()
    dets = fileio.load_detections(cfg.detections, labelset) if cfg.detections \
        and os.path.exists(cfg.detections) else []
    frame_paths = fileio.list_sorted(cfg.frames_dir, ".npz")
    frames = []
    for p in frame_paths:
        frame, h = fileio.load_frame(p)
        fileio.check_hash(ls_hash, h, p)
        frames.append(frame)
    frame_times = np.array([f.timestamp for f in frames])

    clouds_dir = os.path.join(cfg.output_dir, "clouds")
    fused_frames_dir = os.path.join(cfg.output_dir, "fused_frames")
    os.makedirs(clouds_dir, exist_ok=True)
    os.makedirs(fused_frames_dir, exist_ok=True)

    alphas = class_alphas(labelset, cfg.alpha_dyn, cfg.alpha_stat)
    prev_fused = None
    prev_cam_pose = None
    n_clouds = 0
    for i, frame in enumerate(frames):
        frame_dets = [d for t, d in dets if abs(t - frame.timestamp) < 1e-9]
        cam_pose = traj.interpolate(frame.timestamp).matrix() @ invert(
            calib.camera.T_cam_base)
        T_cur_prev = invert(cam_pose) @ prev_cam_pose \
            if prev_cam_pose is not None else None
        fused = smooth_and_fuse_image(frame, prev_fused, T_cur_prev,
                                      calib.camera, frame_dets, alphas)
        fileio.save_frame(os.path.join(fused_frames_dir, f"frame_{i:04d}.npz"),
                          fused, labelset_hash=ls_hash)
        prev_fused, prev_cam_pose = fused, cam_pose

    for path in fileio.list_sorted(cfg.scans_dir, ".npz"):
        scan = fileio.load_scan(path)
        fileio.check_hash(ls_hash, scan["labelset_hash"], path)
        t = scan["t"]
        j = int(np.argmin(np.abs(frame_times - t))) if len(frames) else -1
        views = []
        if j >= 0:
            frame = frames[j]
            frame_dets = [d for td, d in dets if abs(td - frame.timestamp) < 1e-9]
            views.append(CameraView(calib.camera, frame, frame_dets))
        lidar_probs = None if cfg.camera_only else scan.get("lidar_probs")
        cloud = fuse_cloud(scan["xyz"], t, lidar_probs, views, traj,
                           calib.T_base_lidar, calib.lidar_model,
                           labelset.num_classes, s=cfg.s_factor,
                           intensity=scan.get("intensity"))
        world = apply(traj.interpolate(t).matrix() @ calib.T_base_lidar, cloud.xyz)
        out = SemanticCloud(world, cloud.probs, intensity=cloud.intensity,
                            frame_id="map", timestamp=t)
        name = os.path.splitext(os.path.basename(path))[0]
        fileio.save_semantic_cloud(os.path.join(clouds_dir, f"{name}.npz"),
                                   out, labelset_hash=ls_hash)
        n_clouds += 1
    return {"clouds": n_clouds, "frames": len(frames),
            "clouds_dir": clouds_dir, "fused_frames_dir": fused_frames_dir}


# ---------------------------------------------------------------------------
# mapping


def run_map(cfg: RunConfig, clouds_dir: str | None = None,
            map_path: str | None = None) -> dict:
    labelset = cfg.load_labelset()
    ls_hash = labelset.config_hash()
    clouds_dir = clouds_dir or os.path.join(cfg.output_dir, "clouds")
    vmap = VoxelMap(voxel_size=cfg.voxel_size, num_classes=labelset.num_classes,
                    n_horizon=cfg.n_horizon, merge_policy=cfg.merge_policy,
                    labelset_hash=ls_hash)
    entries = []
    for path in fileio.list_sorted(clouds_dir, ".npz"):
        cloud, h = fileio.load_semantic_cloud(path)
        fileio.check_hash(ls_hash, h, path)
        entries.append((cloud.timestamp, path, cloud))
    entries.sort(key=lambda e: e[0])
    for scan_id, (_, _, cloud) in enumerate(entries):
        vmap.integrate_scan(cloud, scan_id)
    os.makedirs(cfg.output_dir, exist_ok=True)
    map_path = map_path or os.path.join(cfg.output_dir, "map.svx")
    vmap.save(map_path, horizon=cfg.horizon)
    hist = vmap.per_class_voxel_counts(cfg.horizon)
    return {
        "map": map_path,
        "voxels": len(vmap),
        "per_class": {labelset.names[i]: int(c)
                      for i, c in enumerate(hist) if c > 0},
    }


# ---------------------------------------------------------------------------
# pseudo-labels


def load_scan_records(cfg: RunConfig, calib, traj) -> list[ScanRecord]:
    records = []
    for path in fileio.list_sorted(cfg.scans_dir, ".npz"):
        scan = fileio.load_scan(path)
        pose = Pose.from_matrix(
            traj.interpolate(scan["t"]).matrix() @ calib.T_base_lidar, scan["t"])
        records.append(ScanRecord(scan["xyz"], pose, scan["scan_id"],
                                  intensity=scan.get("intensity"),
                                  timestamp=scan["t"]))
    return records


def run_pseudolabel(cfg: RunConfig, map_path: str | None = None) -> dict:
    labelset, calib, traj = _load_log(cfg)
    map_path = map_path or os.path.join(cfg.output_dir, "map.svx")
    vmap = VoxelMap.load(map_path)
    if vmap.labelset_hash and vmap.labelset_hash != labelset.config_hash():
        raise ConfigurationError(
            f"{map_path}: label-set hash mismatch with {cfg.labelset or 'default'}")
    records = load_scan_records(cfg, calib, traj)
    images = generate_pseudolabels(
        vmap, records, labelset, calib.lidar_model,
        policy=ScanWindowPolicy(cfg.window), threshold=cfg.threshold,
        provenance=cfg.provenance, horizon=cfg.horizon)
    out_root = os.path.join(cfg.output_dir, "pseudolabels")
    n_labeled = 0
    for rec, img in zip(records, images):
        if cfg.ground_correction:
            img = ground_plane_correction(img, labelset)
        scan_img = render_range_image(rec.xyz, calib.lidar_model)
        if rec.intensity is not None:
            intens = np.zeros_like(scan_img.range)
            hit = scan_img.cell_index >= 0
            intens[hit] = rec.intensity[scan_img.cell_index[hit]]
            scan_img.intensity = intens
        export_training_pair(scan_img, img,
                             os.path.join(out_root, f"sample_{rec.scan_id:04d}"),
                             labelset, include_intensity=cfg.include_intensity)
        n_labeled += int(img.labeled.sum())
    return {"samples": len(images), "labeled_cells": n_labeled,
            "out_dir": out_root}


# ---------------------------------------------------------------------------
# evaluation


def run_eval(cfg: RunConfig, pred: str, reference: str,
             camera_fov: bool = False) -> IoUResult:
    """Evaluate a prediction (map snapshot or clouds directory) against a
    reference map snapshot."""
    labelset = cfg.load_labelset()
    ref_map = VoxelMap.load(reference)
    if ref_map.labelset_hash and ref_map.labelset_hash != labelset.config_hash():
        raise ConfigurationError(f"{reference}: label-set hash mismatch")
    if os.path.isdir(pred):
        clouds = []
        for path in fileio.list_sorted(pred, ".npz"):
            cloud, h = fileio.load_semantic_cloud(path)
            fileio.check_hash(labelset.config_hash(), h, path)
            clouds.append(cloud)
        if camera_fov:
            calib = fileio.load_calibration(cfg.calibration)
            traj = fileio.load_trajectory(cfg.trajectory)
            from .evaluation import ConfusionAccumulator, accumulate_scan_vs_map
            acc = ConfusionAccumulator(ref_map.num_classes)
            for cloud in clouds:
                pose_cam = Pose.from_matrix(
                    traj.interpolate(cloud.timestamp).matrix()
                    @ invert(calib.camera.T_cam_base), cloud.timestamp)
                frustum = CameraFrustum(calib.camera, pose_cam)
                accumulate_scan_vs_map(acc, cloud, ref_map, labelset, frustum)
            return IoUResult(acc.iou(), labelset, restricted_fov=True)
        return iou_scan_vs_map(clouds, ref_map, labelset)
    pred_map = VoxelMap.load(pred)
    if camera_fov:
        raise ConfigurationError("--camera-fov applies to cloud predictions only")
    return iou_map_vs_map(pred_map, ref_map, labelset)


# ---------------------------------------------------------------------------
# benchmark


def run_bench(seed: int = 0, repeats: int = 5,
              scan_shape=(128, 1024), frame_shape=(480, 848)) -> dict:
    """Throughput of the hot paths on a standard synthetic workload."""
    from .geometry import CameraModel
    rng = np.random.default_rng(seed)
    labelset = LabelSet.default()
    C = labelset.num_classes
    model = SphericalModel(width=scan_shape[1], height=scan_shape[0])
    cam = CameraModel(fx=500, fy=500, cx=frame_shape[1] / 2, cy=frame_shape[0] / 2,
                      width=frame_shape[1], height=frame_shape[0],
                      T_cam_base=forward_camera_extrinsic())
    traj = Trajectory([Pose(0.0, np.zeros(3), np.array([1.0, 0, 0, 0])),
                       Pose(10.0, np.array([1.0, 0, 0]), np.array([1.0, 0, 0, 0]))])
    n = scan_shape[0] * scan_shape[1]
    xyz = rng.uniform(-30, 30, size=(n, 3))
    scores = rng.normal(0, 1, size=(n, C))
    scores[np.arange(n), rng.integers(0, C, n)] += 6.0
    lidar_probs = softmax(scores)
    frame = SegmentationFrame(softmax(rng.normal(0, 1, size=frame_shape + (C,))),
                              depth=np.full(frame_shape, 10.0), timestamp=0.0)
    view = CameraView(cam, frame)
    alphas = class_alphas(labelset)

    # steady-state map: voxels allocated once, then re-integrated per scan
    vmap = VoxelMap(num_classes=C)
    vmap.integrate_scan(SemanticCloud(xyz, lidar_probs), 0)
    fuse_times, map_times, frame_times = [], [], []
    for rep in range(repeats):
        t0 = time.perf_counter()
        cloud = fuse_cloud(xyz, 0.0, lidar_probs, [view], traj, np.eye(4),
                           model, C)
        t1 = time.perf_counter()
        vmap.integrate_scan(cloud, rep + 1)
        t2 = time.perf_counter()
        smooth_and_fuse_image(frame, frame, np.eye(4), cam, [], alphas)
        t3 = time.perf_counter()
        fuse_times.append(t1 - t0)
        map_times.append(t2 - t1)
        frame_times.append(t3 - t2)

    def stats(ts):
        ts = np.array(ts)
        return {"p50_ms": float(np.percentile(ts, 50) * 1e3),
                "p99_ms": float(np.percentile(ts, 99) * 1e3)}

    per_scan = np.array(fuse_times) + np.array(map_times)
    return {
        "points_per_scan": n,
        "fuse_cloud": {**stats(fuse_times),
                       "points_per_s": n / float(np.median(fuse_times))},
        "integrate_scan": {**stats(map_times),
                           "points_per_s": n / float(np.median(map_times))},
        "scan_pipeline": stats(per_scan),
        "smooth_and_fuse_image": {**stats(frame_times),
                                  "frames_per_s": 1.0 / float(np.median(frame_times))},
    }
