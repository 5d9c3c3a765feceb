import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semfuse.fusion import (ALPHA_DYNAMIC, ALPHA_STATIC, CameraView, Detection,
                            SegmentationFrame, SemanticCloud, class_alphas,
                            cluster_bbox_points, cluster_tolerance,
                            detection_distribution, fuse_cloud,
                            smooth_and_fuse_image, warp_previous_frame)
from semfuse.geometry import CameraModel, Pose, SphericalModel, Trajectory
from semfuse.labels import InvalidInputError, LabelSet, uniform

IDENTITY_Q = np.array([1.0, 0, 0, 0])


def static_traj():
    return Trajectory([Pose(0.0, np.zeros(3), IDENTITY_Q),
                       Pose(10.0, np.zeros(3), IDENTITY_Q)])


def simple_cam(w=100, h=80, f=100.0):
    return CameraModel(fx=f, fy=f, cx=w / 2, cy=h / 2, width=w, height=h)


# --- Detection --------------------------------------------------------------


def test_detection_rejects_degenerate_bbox():
    with pytest.raises(InvalidInputError):
        Detection(0, 0.9, (10, 10, 10, 20))


def test_detection_rejects_bad_score():
    with pytest.raises(InvalidInputError):
        Detection(0, 0.0, (0, 0, 10, 10))
    with pytest.raises(InvalidInputError):
        Detection(0, 1.5, (0, 0, 10, 10))


def test_detection_contains():
    det = Detection(0, 0.9, (10, 20, 30, 40))
    assert det.contains(10, 20) and det.contains(30, 40)
    assert not det.contains(9, 25)


# --- detection_distribution -------------------------------------------------


def test_detection_distribution_peak_clamped():
    det = Detection(0, 1.0, (0, 0, 10, 10))
    out = detection_distribution(det, 5.0, 5.0, 15)
    assert out[0] == pytest.approx(1.0 - 1e-6)
    np.testing.assert_allclose(out[1:], (1 - out[0]) / 14, atol=1e-12)
    assert out.sum() == pytest.approx(1.0)


def test_detection_distribution_corner_one_sigma():
    det = Detection(2, 0.8, (0, 0, 10, 20))
    out = detection_distribution(det, 0.0, 0.0, 5)
    # bbox corner sits one sigma out in both axes
    assert out[2] == pytest.approx(0.8 * np.exp(-1.0))


def test_detection_distribution_frozen_center():
    det = Detection(0, 0.5, (0, 0, 10, 10))
    out = detection_distribution(det, 5.0, 5.0, 3)
    np.testing.assert_allclose(out, [0.5, 0.25, 0.25], atol=1e-12)


def test_detection_distribution_outside_bbox_rejected():
    det = Detection(0, 0.5, (0, 0, 10, 10))
    with pytest.raises(InvalidInputError):
        detection_distribution(det, 11.0, 5.0, 3)


# --- cluster tolerance and growth -------------------------------------------


def test_cluster_tolerance_frozen():
    model = SphericalModel(width=1024, height=128)  # 90 degree vertical FoV
    tau = cluster_tolerance(10.0, model, s=1.5)
    assert tau == pytest.approx(1.5 * 10.0 * np.pi / 256, abs=1e-12)
    assert tau == pytest.approx(0.18408, abs=1e-5)


def test_cluster_tolerance_linear_in_depth():
    model = SphericalModel(width=1024, height=128)
    assert cluster_tolerance(20.0, model) == pytest.approx(
        2 * cluster_tolerance(10.0, model))


def test_cluster_tolerance_rejects_nonpositive():
    model = SphericalModel()
    with pytest.raises(InvalidInputError):
        cluster_tolerance(0.0, model)


def test_cluster_single_point():
    model = SphericalModel(width=1024, height=128)
    member, d_seed, _ = cluster_bbox_points(np.array([[1.0, 0, 0]]),
                                            np.array([5.0]), model)
    assert member.tolist() == [True]
    assert d_seed == 5.0


def test_cluster_two_groups_far_apart():
    model = SphericalModel(width=1024, height=128)
    near = np.stack([np.full(6, 5.0), np.linspace(0, 0.05, 6), np.zeros(6)], 1)
    far = np.stack([np.full(6, 15.0), np.linspace(0, 0.05, 6), np.zeros(6)], 1)
    xyz = np.concatenate([near, far])
    depths = xyz[:, 0]
    member, d_seed, _ = cluster_bbox_points(xyz, depths, model)
    assert d_seed == pytest.approx(5.0)
    assert member[:6].all()
    assert not member[6:].any()


def test_cluster_chain_connectivity():
    model = SphericalModel(width=1024, height=128)
    tau = cluster_tolerance(5.0, model)
    xs = 5.0 + np.arange(20) * (0.5 * tau)
    xyz = np.stack([xs, np.zeros(20), np.zeros(20)], axis=1)
    member, _, _ = cluster_bbox_points(xyz, xs, model)
    assert member.all()


def test_cluster_empty_rejected():
    model = SphericalModel()
    with pytest.raises(InvalidInputError):
        cluster_bbox_points(np.zeros((0, 3)), np.zeros(0), model)


def test_cluster_order_independent(rng):
    model = SphericalModel(width=1024, height=128)
    xyz = np.concatenate([
        rng.normal([5, 0, 0], 0.05, size=(15, 3)),
        rng.normal([12, 1, 0], 0.05, size=(10, 3)),
    ])
    depths = xyz[:, 0]
    member, _, _ = cluster_bbox_points(xyz, depths, model)
    perm = rng.permutation(len(xyz))
    member_p, _, _ = cluster_bbox_points(xyz[perm], depths[perm], model)
    original = {tuple(p) for p in xyz[member]}
    permuted = {tuple(p) for p in xyz[perm][member_p]}
    assert original == permuted


def test_cluster_seed_is_nearest_rank_quantile():
    model = SphericalModel(width=1024, height=128)
    depths = np.array([4.0, 1.0, 3.0, 2.0])  # ceil(0.25*4) = 1st smallest
    xyz = np.stack([depths, np.arange(4) * 100.0, np.zeros(4)], axis=1)
    _, d_seed, _ = cluster_bbox_points(xyz, depths, model)
    assert d_seed == 1.0


# --- fuse_cloud -------------------------------------------------------------


def frame_of(probs_grid, depth=None, t=0.0):
    return SegmentationFrame(np.asarray(probs_grid, dtype=float), depth=depth,
                             timestamp=t)


def constant_frame(h, w, C, class_index, p=0.9, t=0.0, depth=None):
    probs = np.full((h, w, C), (1 - p) / (C - 1))
    probs[..., class_index] = p
    return frame_of(probs, depth=depth, t=t)


def test_fuse_cloud_outside_fov_bit_identical():
    C = 5
    cam = simple_cam()
    model = SphericalModel(width=64, height=16)
    lidar = np.tile(np.array([[0.5, 0.2, 0.1, 0.1, 0.1]]), (2, 1))
    # one point in front of the camera, one behind
    xyz = np.array([[0.0, 0, 5.0], [0.0, 0, -5.0]])
    view = CameraView(cam, constant_frame(80, 100, C, 1))
    cloud = fuse_cloud(xyz, 0.0, lidar, [view], static_traj(), np.eye(4),
                       model, C)
    assert np.array_equal(cloud.probs[1], lidar[1])
    assert not np.array_equal(cloud.probs[0], lidar[0])


def test_fuse_cloud_camera_only_returns_image_distribution():
    C = 4
    cam = simple_cam()
    model = SphericalModel(width=64, height=16)
    frame = constant_frame(80, 100, C, 2, p=0.7)
    view = CameraView(cam, frame)
    xyz = np.array([[0.0, 0, 5.0]])
    cloud = fuse_cloud(xyz, 0.0, None, [view], static_traj(), np.eye(4),
                       model, C)
    np.testing.assert_allclose(cloud.probs[0], frame.probs[0, 0], atol=1e-9)


def test_fuse_cloud_uniform_image_is_identity():
    C = 6
    cam = simple_cam()
    model = SphericalModel(width=64, height=16)
    frame = frame_of(np.full((80, 100, C), 1.0 / C))
    lidar = np.array([[0.4, 0.3, 0.1, 0.1, 0.05, 0.05]])
    cloud = fuse_cloud(np.array([[0.0, 0, 5.0]]), 0.0, lidar,
                       [CameraView(cam, frame)], static_traj(), np.eye(4),
                       model, C)
    np.testing.assert_allclose(cloud.probs, lidar, atol=1e-12)


def test_fuse_cloud_rejects_mismatched_classes():
    cam = simple_cam()
    model = SphericalModel(width=64, height=16)
    frame = constant_frame(80, 100, 4, 0)
    with pytest.raises(InvalidInputError):
        fuse_cloud(np.array([[0.0, 0, 5.0]]), 0.0,
                   np.array([[0.5, 0.5]]), [CameraView(cam, frame)],
                   static_traj(), np.eye(4), SphericalModel(), 2)


def test_fuse_cloud_detection_cluster_and_reset():
    """Foreground points in the bbox flip to the detected class; background
    points behind them keep their pre-detection argmax."""
    C = 5
    cam = simple_cam()
    model = SphericalModel(width=1024, height=128)
    # background class 3 everywhere, weak image support for the person (0)
    lidar_bg = np.array([0.05, 0.05, 0.05, 0.8, 0.05])
    near = np.array([[0.0, 0.0, 2.0], [0.02, 0.0, 2.0], [0.0, 0.02, 2.0]])
    far = np.array([[0.0, 0.0, 12.0], [0.02, 0.0, 12.0]])
    xyz = np.concatenate([near, far])
    lidar = np.tile(lidar_bg, (len(xyz), 1))
    frame = frame_of(np.full((80, 100, C), 1.0 / C))
    det = Detection(0, 0.95, (40, 30, 60, 50))
    view = CameraView(cam, frame, [det])
    cloud = fuse_cloud(xyz, 0.0, lidar, [view], static_traj(), np.eye(4),
                       model, C)
    labels = np.argmax(cloud.probs, axis=-1)
    assert (labels[:3] == 0).all()  # near cluster becomes the detected class
    assert (labels[3:] == 3).all()  # far points keep the background argmax


def test_fuse_cloud_empty_points():
    C = 3
    cloud = fuse_cloud(np.zeros((0, 3)), 0.0, np.zeros((0, C)), [],
                       static_traj(), np.eye(4), SphericalModel(), C)
    assert len(cloud) == 0


def test_fuse_cloud_distributions_normalized(rng):
    C = 7
    cam = simple_cam()
    model = SphericalModel(width=64, height=16)
    xyz = rng.uniform(-3, 3, size=(50, 3)) + [0, 0, 6]
    lidar = rng.dirichlet(np.ones(C), size=50)
    probs_grid = rng.dirichlet(np.ones(C), size=(80, 100))
    det = Detection(1, 0.9, (20, 20, 80, 60))
    view = CameraView(cam, frame_of(probs_grid), [det])
    cloud = fuse_cloud(xyz, 0.0, lidar, [view], static_traj(), np.eye(4),
                       model, C)
    np.testing.assert_allclose(cloud.probs.sum(axis=-1), 1.0, atol=1e-6)


# --- temporal smoothing -----------------------------------------------------


def test_smooth_no_previous_no_detections_identity():
    C = 4
    cam = simple_cam(w=10, h=8)
    cur = constant_frame(8, 10, C, 1)
    out = smooth_and_fuse_image(cur, None, None, cam, [], np.full(C, 0.5))
    np.testing.assert_array_equal(out.probs, cur.probs)


def test_smooth_static_identical_frames_fixed_point():
    C = 4
    cam = simple_cam(w=10, h=8)
    depth = np.full((8, 10), 5.0)
    cur = constant_frame(8, 10, C, 2, depth=depth)
    prev = constant_frame(8, 10, C, 2, depth=depth)
    out = smooth_and_fuse_image(cur, prev, np.eye(4), cam, [],
                                np.full(C, 0.25))
    np.testing.assert_allclose(out.probs, cur.probs, atol=1e-12)


def test_smooth_blend_frozen_arithmetic():
    """Previous one-hot class A, current one-hot class B, alpha 0.25:
    smoothed mass is 0.25 B vs 0.75 A."""
    C = 2
    cam = simple_cam(w=6, h=6)
    depth = np.full((6, 6), 5.0)
    prev = frame_of(np.stack([np.ones((6, 6)), np.zeros((6, 6))], axis=-1),
                    depth=depth)
    cur = frame_of(np.stack([np.zeros((6, 6)), np.ones((6, 6))], axis=-1),
                   depth=depth)
    out = smooth_and_fuse_image(cur, prev, np.eye(4), cam, [],
                                np.full(C, 0.25))
    np.testing.assert_allclose(out.probs[3, 3], [0.75, 0.25], atol=1e-12)


def test_smooth_missing_depth_rejected():
    C = 2
    cam = simple_cam(w=6, h=6)
    prev = constant_frame(6, 6, C, 0)  # no depth channel
    cur = constant_frame(6, 6, C, 1)
    with pytest.raises(InvalidInputError):
        smooth_and_fuse_image(cur, prev, np.eye(4), cam, [], np.full(C, 0.5))


def test_smooth_alpha_one_reduces_to_detection_fusion():
    C = 3
    cam = simple_cam(w=20, h=20)
    depth = np.full((20, 20), 5.0)
    prev = constant_frame(20, 20, C, 0, depth=depth)
    cur = constant_frame(20, 20, C, 1, depth=depth)
    det = Detection(2, 0.9, (5, 5, 15, 15))
    out = smooth_and_fuse_image(cur, prev, np.eye(4), cam, [det],
                                np.ones(C))
    ref = smooth_and_fuse_image(cur, None, None, cam, [det], np.ones(C))
    np.testing.assert_allclose(out.probs, ref.probs, atol=1e-12)


def test_smooth_rejects_bad_alphas():
    C = 2
    cam = simple_cam(w=6, h=6)
    cur = constant_frame(6, 6, C, 0)
    with pytest.raises(InvalidInputError):
        smooth_and_fuse_image(cur, None, None, cam, [], np.array([0.0, 1.0]))


def test_warp_identity_recovers_previous():
    C = 3
    cam = simple_cam(w=16, h=12, f=50.0)
    depth = np.full((12, 16), 4.0)
    probs = np.random.default_rng(0).dirichlet(np.ones(C), size=(12, 16))
    prev = frame_of(probs, depth=depth)
    warped, mask = warp_previous_frame(prev, np.eye(4), cam)
    assert mask.all()
    np.testing.assert_allclose(warped, probs, atol=1e-12)


def test_class_alphas_defaults():
    ls = LabelSet.default()
    alphas = class_alphas(ls)
    assert (alphas[:3] == ALPHA_DYNAMIC).all()
    assert (alphas[3:] == ALPHA_STATIC).all()
    assert ALPHA_DYNAMIC == 0.80 and ALPHA_STATIC == 0.25
