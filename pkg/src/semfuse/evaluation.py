"""Per-class and mean IoU of semantic clouds and maps against a reference map."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraModel, Pose, apply, invert, project_pinhole
from .labels import InvalidInputError, LabelSet
from .voxelmap import VoxelMap


class ConfigurationError(ValueError):
    """Mismatched label sets, voxel sizes, or hashes between inputs."""


@dataclass
class ConfusionAccumulator:
    """Per-class TP/FP/FN counters; a mergeable monoid so evaluation can be
    sharded and combined."""

    num_classes: int
    tp: np.ndarray = field(default=None)
    fp: np.ndarray = field(default=None)
    fn: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.tp is None:
            self.tp = np.zeros(self.num_classes, dtype=np.int64)
            self.fp = np.zeros(self.num_classes, dtype=np.int64)
            self.fn = np.zeros(self.num_classes, dtype=np.int64)

    def add(self, predicted: np.ndarray, reference: np.ndarray) -> None:
        predicted = np.asarray(predicted)
        reference = np.asarray(reference)
        match = predicted == reference
        self.tp += np.bincount(reference[match], minlength=self.num_classes)
        self.fp += np.bincount(predicted[~match], minlength=self.num_classes)
        self.fn += np.bincount(reference[~match], minlength=self.num_classes)

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.num_classes != self.num_classes:
            raise ConfigurationError("cannot merge accumulators of different sizes")
        out = ConfusionAccumulator(self.num_classes)
        out.tp = self.tp + other.tp
        out.fp = self.fp + other.fp
        out.fn = self.fn + other.fn
        return out

    def iou(self) -> np.ndarray:
        """IoU = TP / (TP + FP + FN); NaN for classes never observed."""
        denom = self.tp + self.fp + self.fn
        with np.errstate(invalid="ignore"):
            return np.where(denom > 0, self.tp / np.maximum(denom, 1), np.nan)


@dataclass
class IoUResult:
    per_class: np.ndarray  # NaN for unobserved classes
    labelset: LabelSet
    restricted_fov: bool = False

    def mean(self, include_empty: bool = False) -> float:
        vals = self.per_class
        if include_empty:
            vals = np.nan_to_num(vals, nan=0.0)
            return float(vals.mean())
        obs = vals[~np.isnan(vals)]
        return float(obs.mean()) if len(obs) else float("nan")

    def as_dict(self) -> dict:
        per_class = {name: float(v) for name, v in
                     zip(self.labelset.names, self.per_class) if not np.isnan(v)}
        return {"per_class": per_class, "mean": self.mean(),
                "restricted_fov": self.restricted_fov}


@dataclass
class CameraFrustum:
    """Viewing volume of a camera at a given pose (world_T_cam)."""

    cam: CameraModel
    pose: Pose

    def contains(self, world_xyz: np.ndarray) -> np.ndarray:
        local = apply(invert(self.pose.matrix()), world_xyz)
        _, _, inside = project_pinhole(local, self.cam)
        return inside


def _check_labelset(a_classes: int, b_classes: int):
    if a_classes != b_classes:
        raise ConfigurationError(
            f"label-set mismatch: {a_classes} vs {b_classes} classes")


def accumulate_scan_vs_map(acc: ConfusionAccumulator, cloud, reference: VoxelMap,
                           labelset: LabelSet,
                           restrict: CameraFrustum | None = None) -> None:
    """Compare each point's argmax class against its reference voxel label.

    Points outside the frustum (when given) or in never-observed reference
    voxels are excluded; unknown-class reference voxels are skipped.
    """
    _check_labelset(cloud.probs.shape[-1], reference.num_classes)
    _check_labelset(acc.num_classes, reference.num_classes)
    xyz = np.asarray(cloud.xyz, dtype=np.float64)
    pred = np.argmax(cloud.probs, axis=-1)
    keep = np.ones(len(xyz), dtype=bool)
    if restrict is not None:
        keep &= restrict.contains(xyz)
    ref_probs, found = reference.lookup_points(xyz)
    keep &= found
    ref = np.argmax(ref_probs, axis=-1)
    unknown = labelset.unknown_index
    if unknown is not None:
        keep &= ref != unknown
    acc.add(pred[keep], ref[keep])


def iou_scan_vs_map(clouds, reference: VoxelMap, labelset: LabelSet,
                    restrict: CameraFrustum | None = None) -> IoUResult:
    if not isinstance(clouds, (list, tuple)):
        clouds = [clouds]
    acc = ConfusionAccumulator(reference.num_classes)
    for cloud in clouds:
        accumulate_scan_vs_map(acc, cloud, reference, labelset, restrict)
    return IoUResult(acc.iou(), labelset, restricted_fov=restrict is not None)


def iou_map_vs_map(pred: VoxelMap, reference: VoxelMap,
                   labelset: LabelSet) -> IoUResult:
    """Voxelwise argmax comparison over the union of occupied keys."""
    if abs(pred.voxel_size - reference.voxel_size) > 1e-12:
        raise ConfigurationError(
            f"voxel size mismatch: {pred.voxel_size} vs {reference.voxel_size}")
    _check_labelset(pred.num_classes, reference.num_classes)
    acc = ConfusionAccumulator(reference.num_classes)
    unknown = labelset.unknown_index

    pred_keys = {tuple(k) for k in pred.keys_array}
    ref_keys = {tuple(k) for k in reference.keys_array}
    both = sorted(pred_keys & ref_keys)
    pred_only = sorted(pred_keys - ref_keys)
    ref_only = sorted(ref_keys - pred_keys)

    def _argmax(vmap, keys):
        if not keys:
            return np.zeros(0, dtype=np.int64)
        rows = vmap.rows_for_keys(np.array(keys))
        return np.argmax(vmap.distributions(rows), axis=-1)

    p_both = _argmax(pred, both)
    r_both = _argmax(reference, both)
    if unknown is not None:
        keep = r_both != unknown
        p_both, r_both = p_both[keep], r_both[keep]
    acc.add(p_both, r_both)
    # voxels occupied in only one map: misses resp. phantom structure
    r_only = _argmax(reference, ref_only)
    if unknown is not None:
        r_only = r_only[r_only != unknown]
    acc.fn += np.bincount(r_only, minlength=acc.num_classes)
    p_only = _argmax(pred, pred_only)
    acc.fp += np.bincount(p_only, minlength=acc.num_classes)
    return IoUResult(acc.iou(), labelset)


def format_report(result: IoUResult) -> str:
    """Aligned per-class IoU table plus the mean, in label-set order."""
    lines = []
    width = max((len(n) for n in result.labelset.names), default=5)
    for name, v in zip(result.labelset.names, result.per_class):
        if np.isnan(v):
            continue
        lines.append(f"{name:<{width}}  {100 * v:6.2f} %")
    if lines:
        lines.append(f"{'mean':<{width}}  {100 * result.mean():6.2f} %")
    return "\n".join(lines)


def write_json_report(result: IoUResult, path: str) -> None:
    with open(path, "w") as f:
        json.dump(result.as_dict(), f, indent=2)
