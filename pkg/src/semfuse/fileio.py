"""File formats for sensor logs: calibration, trajectories, detections,
scans, and segmentation frames."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .fusion import Detection, SegmentationFrame
from .geometry import CameraModel, Pose, SphericalModel, Trajectory
from .labels import InvalidInputError


class ParseError(ValueError):
    """Input file failed to parse or validate; message carries file context."""


@dataclass
class Calibration:
    camera: CameraModel
    lidar_model: SphericalModel
    T_base_lidar: np.ndarray


def load_calibration(path) -> Calibration:
    try:
        with open(path) as f:
            cfg = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ParseError(f"{path}: {e}") from e
    try:
        c = cfg["camera"]
        dist = c.get("distortion")
        if dist is not None and any(abs(d) > 0 for d in dist):
            raise ParseError(
                f"{path}: nonzero distortion is not supported; rectify inputs first")
        cam = CameraModel(
            fx=c["fx"], fy=c["fy"], cx=c["cx"], cy=c["cy"],
            width=int(c["width"]), height=int(c["height"]),
            T_cam_base=np.array(c["T_cam_base"], dtype=np.float64).reshape(4, 4),
        )
        l = cfg["lidar"]
        model = SphericalModel(
            width=int(l["w"]), height=int(l["h"]),
            f_up=np.deg2rad(l["f_up_deg"]), f_down=np.deg2rad(l["f_down_deg"]),
            r_max=l["r_max_m"],
        )
        T_base_lidar = np.array(l["T_base_lidar"], dtype=np.float64).reshape(4, 4)
    except (KeyError, ValueError, InvalidInputError) as e:
        raise ParseError(f"{path}: invalid calibration: {e}") from e
    return Calibration(cam, model, T_base_lidar)


def save_calibration(calib: Calibration, path) -> None:
    cam, model = calib.camera, calib.lidar_model
    cfg = {
        "camera": {
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
            "T_cam_base": np.asarray(cam.T_cam_base).reshape(-1).tolist(),
        },
        "lidar": {
            "T_base_lidar": np.asarray(calib.T_base_lidar).reshape(-1).tolist(),
            "w": model.width, "h": model.height,
            "f_up_deg": float(np.rad2deg(model.f_up)),
            "f_down_deg": float(np.rad2deg(model.f_down)),
            "r_max_m": model.r_max,
        },
    }
    with open(path, "w") as f:
        json.dump(cfg, f, indent=2)


TRAJECTORY_HEADER = ["t", "tx", "ty", "tz", "qw", "qx", "qy", "qz"]


def load_trajectory(path) -> Trajectory:
    poses = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty trajectory file") from None
        if [h.strip() for h in header] != TRAJECTORY_HEADER:
            raise ParseError(f"{path}:1: expected header {','.join(TRAJECTORY_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                vals = [float(x) for x in row]
                poses.append(Pose(vals[0], np.array(vals[1:4]), np.array(vals[4:8])))
            except (ValueError, IndexError, InvalidInputError) as e:
                raise ParseError(f"{path}:{lineno}: {e}") from e
    try:
        return Trajectory(poses)
    except InvalidInputError as e:
        raise ParseError(f"{path}: {e}") from e


def save_trajectory(traj: Trajectory, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TRAJECTORY_HEADER)
        for p in traj.poses:
            writer.writerow([p.t, *p.translation, *p.rotation])


def load_detections(path, labelset) -> list[tuple[float, Detection]]:
    """JSON-lines detections: (timestamp, Detection) sorted by time."""
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                det = Detection(
                    class_index=labelset.index(obj["class"]),
                    score=obj["score"],
                    bbox=tuple(obj["bbox"]),
                    source=obj.get("source", "rgb"),
                )
                out.append((float(obj["t"]), det))
            except (json.JSONDecodeError, KeyError, ValueError,
                    InvalidInputError) as e:
                raise ParseError(f"{path}:{lineno}: {e}") from e
    out.sort(key=lambda x: x[0])
    return out


def save_detections(dets: list[tuple[float, Detection]], labelset, path) -> None:
    with open(path, "w") as f:
        for t, d in dets:
            f.write(json.dumps({
                "t": t, "source": d.source,
                "class": labelset.names[d.class_index],
                "score": d.score, "bbox": list(d.bbox),
            }) + "\n")


def save_scan(path, xyz: np.ndarray, intensity: np.ndarray | None,
              timestamp: float, scan_id: int,
              lidar_probs: np.ndarray | None = None,
              gt_class: np.ndarray | None = None,
              labelset_hash: str = "") -> None:
    data = {
        "xyz": np.asarray(xyz, dtype=np.float32),
        "t": np.float64(timestamp),
        "scan_id": np.int64(scan_id),
        "labelset_hash": np.str_(labelset_hash),
    }
    if intensity is not None:
        data["intensity"] = np.asarray(intensity, dtype=np.float32)
    if lidar_probs is not None:
        data["lidar_probs"] = np.asarray(lidar_probs, dtype=np.float32)
    if gt_class is not None:
        data["gt_class"] = np.asarray(gt_class, dtype=np.int16)
    np.savez_compressed(path, **data)


def load_scan(path) -> dict:
    try:
        with np.load(path, allow_pickle=False) as z:
            out = {
                "xyz": z["xyz"].astype(np.float64),
                "t": float(z["t"]),
                "scan_id": int(z["scan_id"]),
                "labelset_hash": str(z["labelset_hash"]),
            }
            if "intensity" in z:
                out["intensity"] = z["intensity"].astype(np.float64)
            if "lidar_probs" in z:
                out["lidar_probs"] = z["lidar_probs"].astype(np.float64)
            if "gt_class" in z:
                out["gt_class"] = z["gt_class"].astype(np.int64)
    except (OSError, KeyError, ValueError) as e:
        raise ParseError(f"{path}: {e}") from e
    return out


def save_frame(path, frame: SegmentationFrame, labelset_hash: str = "") -> None:
    data = {
        "probs": frame.probs.astype(np.float32),
        "t": np.float64(frame.timestamp),
        "labelset_hash": np.str_(labelset_hash),
    }
    if frame.depth is not None:
        data["depth"] = frame.depth.astype(np.float32)
    np.savez_compressed(path, **data)


def load_frame(path) -> tuple[SegmentationFrame, str]:
    try:
        with np.load(path, allow_pickle=False) as z:
            depth = z["depth"].astype(np.float64) if "depth" in z else None
            frame = SegmentationFrame(z["probs"].astype(np.float64), depth=depth,
                                      timestamp=float(z["t"]))
            h = str(z["labelset_hash"])
    except (OSError, KeyError, ValueError) as e:
        raise ParseError(f"{path}: {e}") from e
    return frame, h


def save_semantic_cloud(path, cloud, labelset_hash: str = "") -> None:
    data = {
        "xyz": cloud.xyz.astype(np.float32),
        "probs": cloud.probs.astype(np.float32),
        "t": np.float64(cloud.timestamp),
        "frame_id": np.str_(cloud.frame_id),
        "labelset_hash": np.str_(labelset_hash),
    }
    if cloud.intensity is not None:
        data["intensity"] = cloud.intensity.astype(np.float32)
    np.savez_compressed(path, **data)


def load_semantic_cloud(path):
    from .fusion import SemanticCloud
    try:
        with np.load(path, allow_pickle=False) as z:
            cloud = SemanticCloud(
                xyz=z["xyz"].astype(np.float64),
                probs=z["probs"].astype(np.float64),
                intensity=z["intensity"].astype(np.float64) if "intensity" in z else None,
                frame_id=str(z["frame_id"]),
                timestamp=float(z["t"]),
            )
            h = str(z["labelset_hash"])
    except (OSError, KeyError, ValueError) as e:
        raise ParseError(f"{path}: {e}") from e
    return cloud, h


def check_hash(expected: str, found: str, path) -> None:
    if expected and found and expected != found:
        raise ParseError(f"{path}: label-set hash {found} does not match {expected}")


def list_sorted(directory, suffix: str) -> list[str]:
    return sorted(os.path.join(directory, n) for n in os.listdir(directory)
                  if n.endswith(suffix))
