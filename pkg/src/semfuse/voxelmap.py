"""Sparse allocentric semantic voxel map with log-space Bayesian fusion.

Voxels accumulate per-scan log class states; probability-space products of
many near-one-hot distributions underflow, so all fusion happens in log space
with factorized log-sum-exp normalization. A per-voxel ring buffer keeps the
last n per-scan states for finite-horizon queries.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import labels as lb
from .labels import InvalidInputError

MERGE_POLICIES = ("drop", "fuse_to_infinite")
SNAPSHOT_MAGIC = b"SFVX"

# voxel indices are packed into one int64 (21 bits per axis) so hashing and
# grouping stay on flat integer arrays
_KEY_BITS = 21
_KEY_OFFSET = 1 << (_KEY_BITS - 1)
_KEY_MASK = (1 << _KEY_BITS) - 1


def voxel_keys(xyz: np.ndarray, voxel_size: float) -> np.ndarray:
    """Integer voxel index per point, floor division (not truncation) so
    negative coordinates bin consistently."""
    return np.floor(np.asarray(xyz, dtype=np.float64) / voxel_size).astype(np.int64)


def pack_keys(keys: np.ndarray) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64)
    shifted = k + _KEY_OFFSET
    if np.any(shifted < 0) or np.any(shifted > _KEY_MASK):
        raise InvalidInputError("voxel index exceeds the 21-bit packing range")
    flat = shifted.reshape(-1, 3)
    return (flat[:, 0] << (2 * _KEY_BITS)) | (flat[:, 1] << _KEY_BITS) | flat[:, 2]


def unpack_keys(packed: np.ndarray) -> np.ndarray:
    p = np.asarray(packed, dtype=np.int64)
    out = np.stack([(p >> (2 * _KEY_BITS)) & _KEY_MASK,
                    (p >> _KEY_BITS) & _KEY_MASK,
                    p & _KEY_MASK], axis=-1)
    return out - _KEY_OFFSET


@dataclass
class VoxelQuery:
    probs: np.ndarray
    mean_pos: np.ndarray
    n_points: int


class VoxelMap:
    """Sparse hash from integer voxel index to fused semantic state.

    Storage is columnar (one row per voxel) so scan integration and queries
    stay vectorized; the key index is a sorted packed-int64 array queried by
    binary search. `merge_policy` controls what happens to per-scan states
    evicted from the finite-horizon ring:

    - "drop": evicted scans vanish; the infinite-horizon state accumulates
      every scan at integration time.
    - "fuse_to_infinite": the infinite-horizon state holds only evicted
      scans; infinite queries fold the ring back in.

    Either way an infinite-horizon query equals Bayesian fusion of all scans
    that ever touched the voxel. The accumulated log state is kept
    unnormalized internally; every query normalizes via log-sum-exp.
    """

    def __init__(self, voxel_size: float = 0.25, num_classes: int = 15,
                 n_horizon: int = 10, merge_policy: str = "drop",
                 labelset_hash: str = "", max_voxels: int | None = None):
        if voxel_size <= 0:
            raise InvalidInputError("voxel_size must be positive")
        if merge_policy not in MERGE_POLICIES:
            raise InvalidInputError(f"merge_policy must be one of {MERGE_POLICIES}")
        if n_horizon < 1:
            raise InvalidInputError("n_horizon must be >= 1")
        self.voxel_size = float(voxel_size)
        self.num_classes = int(num_classes)
        self.n_horizon = int(n_horizon)
        self.merge_policy = merge_policy
        self.labelset_hash = labelset_hash
        self.max_voxels = max_voxels
        self.last_scan_id: int | None = None

        # sorted packed keys with their row numbers, for binary-search lookup
        self._sorted_packed = np.zeros(0, dtype=np.int64)
        self._sorted_rows = np.zeros(0, dtype=np.int64)

        cap = 1024
        C, H = self.num_classes, self.n_horizon
        self._row_packed = np.zeros(cap, dtype=np.int64)
        self._L_inf = np.zeros((cap, C))
        self._pos_sum = np.zeros((cap, 3))
        self._n_points = np.zeros(cap, dtype=np.int64)
        # ring is (horizon, voxel, class) so same-head writes are dense
        self._ring = np.zeros((H, cap, C))
        self._ring_scan = np.full((H, cap), -1, dtype=np.int64)
        self._ring_head = np.zeros(cap, dtype=np.int64)
        self._last_update = np.zeros(cap, dtype=np.int64)
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def __contains__(self, key) -> bool:
        return self.rows_for_keys(np.atleast_2d(np.asarray(key)))[0] >= 0

    @property
    def keys_array(self) -> np.ndarray:
        return unpack_keys(self._row_packed[: self._size])

    def rows_for_keys(self, keys: np.ndarray) -> np.ndarray:
        """Row index per (N, 3) voxel key; -1 where the voxel is absent."""
        return self._lookup_packed(pack_keys(keys))

    def _lookup_packed(self, packed: np.ndarray) -> np.ndarray:
        pos = np.searchsorted(self._sorted_packed, packed)
        rows = np.full(len(packed), -1, dtype=np.int64)
        inb = pos < len(self._sorted_packed)
        if np.any(inb):
            cand = pos[inb]
            match = self._sorted_packed[cand] == packed[inb]
            hit = np.nonzero(inb)[0][match]
            rows[hit] = self._sorted_rows[cand[match]]
        return rows

    def _grow(self, need: int):
        cap = len(self._n_points)
        if self._size + need <= cap:
            return
        new_cap = max(cap * 2, self._size + need)
        for name in ("_row_packed", "_L_inf", "_pos_sum", "_n_points", "_ring",
                     "_ring_scan", "_ring_head", "_last_update"):
            old = getattr(self, name)
            if name in ("_ring", "_ring_scan"):  # voxel axis is axis 1
                shape = old.shape[:1] + (new_cap,) + old.shape[2:]
                fresh = np.full(shape, -1, dtype=old.dtype) \
                    if name == "_ring_scan" else np.zeros(shape, dtype=old.dtype)
                fresh[:, : old.shape[1]] = old
            else:
                shape = (new_cap,) + old.shape[1:]
                fresh = np.zeros(shape, dtype=old.dtype)
                fresh[: len(old)] = old
            setattr(self, name, fresh)

    def _rows_for(self, unique_packed: np.ndarray) -> np.ndarray:
        """Rows for sorted unique packed keys, allocating missing voxels."""
        rows = self._lookup_packed(unique_packed)
        missing = rows < 0
        n_new = int(missing.sum())
        if n_new:
            self._grow(n_new)
            new_rows = np.arange(self._size, self._size + n_new)
            rows[missing] = new_rows
            new_packed = unique_packed[missing]
            self._row_packed[new_rows] = new_packed
            at = np.searchsorted(self._sorted_packed, new_packed)
            self._sorted_packed = np.insert(self._sorted_packed, at, new_packed)
            self._sorted_rows = np.insert(self._sorted_rows, at, new_rows)
            self._size += n_new
        return rows

    def integrate_scan(self, cloud, scan_id: int) -> None:
        """Fuse one semantic cloud (map frame) into the voxel grid.

        All of a scan's points falling in one voxel are first merged into a
        single per-scan log state (sum of clamped logs, renormalized), which
        is then pushed onto the voxel's ring buffer.
        """
        if self.last_scan_id is not None and scan_id <= self.last_scan_id:
            raise InvalidInputError(
                f"scan_id {scan_id} not increasing (last {self.last_scan_id})")
        self.last_scan_id = scan_id
        xyz = np.asarray(cloud.xyz, dtype=np.float64)
        probs = np.asarray(cloud.probs, dtype=np.float64)
        if len(xyz) == 0:
            return
        packed = pack_keys(voxel_keys(xyz, self.voxel_size))
        # group co-voxel points by sorting the packed keys; reduceat sums per
        # group without scatter-add overhead
        order = np.argsort(packed, kind="stable")
        sp = packed[order]
        boundary = np.empty(len(sp), dtype=bool)
        boundary[0] = True
        np.not_equal(sp[1:], sp[:-1], out=boundary[1:])
        starts = np.nonzero(boundary)[0]
        unique_packed = sp[starts]

        counts = np.diff(np.append(starts, len(sp)))
        logp_sorted = lb.log_from_prob(probs)[order]
        xyz_sorted = xyz[order]
        multi = counts > 1
        if not np.any(multi):
            # single-point groups: clamped logs of unit-sum rows are already
            # normalized up to float rounding
            scan_L = logp_sorted
            pos = xyz_sorted
        else:
            scan_L = logp_sorted[starts].copy()
            pos = xyz_sorted[starts].copy()
            extra = np.ones(len(sp), dtype=bool)
            extra[starts] = False
            group = np.repeat(np.arange(len(starts)), counts)[extra]
            np.add.at(scan_L, group, logp_sorted[extra])
            np.add.at(pos, group, xyz_sorted[extra])
            scan_L[multi] = lb.log_normalize(scan_L[multi], axis=-1)

        rows = self._rows_for(unique_packed)
        self._pos_sum[rows] += pos
        self._n_points[rows] += counts
        self._last_update[rows] = scan_id

        head = self._ring_head[rows]
        evict = self._ring_scan[head, rows] != -1
        if self.merge_policy == "fuse_to_infinite":
            if np.any(evict):
                er = rows[evict]
                self._L_inf[er] += self._ring[head[evict], er]
        else:
            self._L_inf[rows] += scan_L
        self._ring[head, rows] = scan_L
        self._ring_scan[head, rows] = scan_id
        self._ring_head[rows] = (head + 1) % self.n_horizon

        if self.max_voxels is not None and self._size > self.max_voxels:
            self._evict_to_cap()

    def _evict_to_cap(self):
        # keep the most recently updated voxels
        order = np.argsort(-self._last_update[: self._size], kind="stable")
        keep = np.sort(order[: self.max_voxels])
        for name in ("_row_packed", "_L_inf", "_pos_sum", "_n_points",
                     "_ring_head", "_last_update"):
            arr = getattr(self, name)
            arr[: len(keep)] = arr[keep]
        self._ring[:, : len(keep)] = self._ring[:, keep]
        self._ring_scan[:, : len(keep)] = self._ring_scan[:, keep]
        self._size = len(keep)
        kept_packed = self._row_packed[: self._size].copy()
        sort = np.argsort(kept_packed)
        self._sorted_packed = kept_packed[sort]
        self._sorted_rows = np.arange(self._size)[sort]

    def _log_state(self, rows: np.ndarray, horizon: str) -> np.ndarray:
        if horizon not in ("infinite", "finite"):
            raise InvalidInputError(f"unknown horizon {horizon!r}")
        valid = self._ring_scan[:, rows] != -1
        ring_sum = (self._ring[:, rows] * valid[..., None]).sum(axis=0)
        if horizon == "finite":
            L = ring_sum
        elif self.merge_policy == "fuse_to_infinite":
            L = self._L_inf[rows] + ring_sum
        else:
            L = self._L_inf[rows]
        return lb.log_normalize(L, axis=-1)

    def distributions(self, rows: np.ndarray, horizon: str = "infinite") -> np.ndarray:
        p = np.exp(self._log_state(rows, horizon))
        return p / p.sum(axis=-1, keepdims=True)

    def query_voxel(self, key, horizon: str = "infinite") -> VoxelQuery | None:
        row = self.rows_for_keys(np.atleast_2d(np.asarray(key)))[0]
        if row < 0:
            return None
        rows = np.array([row])
        return VoxelQuery(
            probs=self.distributions(rows, horizon)[0],
            mean_pos=self._pos_sum[row] / self._n_points[row],
            n_points=int(self._n_points[row]),
        )

    def lookup_points(self, xyz: np.ndarray, horizon: str = "infinite"):
        """Per-point voxel distribution; returns (probs (N, C), found (N,)).

        Unobserved voxels yield found=False and a uniform placeholder row.
        """
        xyz = np.asarray(xyz, dtype=np.float64)
        n = len(xyz)
        probs = np.full((n, self.num_classes), 1.0 / self.num_classes)
        found = np.zeros(n, dtype=bool)
        if n == 0:
            return probs, found
        packed = pack_keys(voxel_keys(xyz, self.voxel_size))
        unique_packed, inv = np.unique(packed, return_inverse=True)
        rows = self._lookup_packed(unique_packed)
        hit = rows >= 0
        if np.any(hit):
            dists = self.distributions(rows[hit], horizon)
            lut = np.full((len(unique_packed), self.num_classes),
                          1.0 / self.num_classes)
            lut[hit] = dists
            probs = lut[inv]
            found = hit[inv]
        return probs, found

    def export_cloud(self, horizon: str = "infinite"):
        """One point per voxel at its mean position, deterministic key order."""
        from .fusion import SemanticCloud
        if self._size == 0:
            return SemanticCloud(np.zeros((0, 3)), np.zeros((0, self.num_classes)),
                                 frame_id="map")
        rows = self._ordered_rows()
        probs = self.distributions(rows, horizon)
        mean = self._pos_sum[rows] / self._n_points[rows][:, None]
        return SemanticCloud(mean, probs, frame_id="map")

    def _ordered_rows(self) -> np.ndarray:
        """Rows in lexicographic (ix, iy, iz) key order; packed order agrees
        because each axis occupies a fixed bit field."""
        return self._sorted_rows

    def per_class_voxel_counts(self, horizon: str = "infinite") -> np.ndarray:
        if self._size == 0:
            return np.zeros(self.num_classes, dtype=np.int64)
        rows = np.arange(self._size)
        cls = np.argmax(self._log_state(rows, horizon), axis=-1)
        return np.bincount(cls, minlength=self.num_classes)

    # --- snapshot format: one JSON header line, then fixed-size little-endian
    # records (int32 ix iy iz, float32 mean xyz, uint32 n_points, C float32
    # log-probabilities) ---

    def save(self, path, horizon: str = "infinite") -> None:
        header = {
            "voxel_size": self.voxel_size,
            "num_classes": self.num_classes,
            "n_horizon": self.n_horizon,
            "merge_policy": self.merge_policy,
            "labelset_hash": self.labelset_hash,
            "horizon": horizon,
            "count": int(self._size),
        }
        with open(path, "wb") as f:
            f.write(SNAPSHOT_MAGIC)
            blob = json.dumps(header).encode()
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            if self._size:
                rows = self._ordered_rows()
                L = self._log_state(rows, horizon).astype(np.float32)
                mean = (self._pos_sum[rows] / self._n_points[rows][:, None]
                        ).astype(np.float32)
                rec = np.zeros(len(rows), dtype=self._record_dtype())
                rec["key"] = unpack_keys(self._row_packed[rows]).astype(np.int32)
                rec["mean"] = mean
                rec["n_points"] = self._n_points[rows].astype(np.uint32)
                rec["logp"] = L
                f.write(rec.tobytes())

    def _record_dtype(self):
        return np.dtype([("key", "<i4", 3), ("mean", "<f4", 3),
                         ("n_points", "<u4"), ("logp", "<f4", self.num_classes)])

    @classmethod
    def load(cls, path) -> "VoxelMap":
        with open(path, "rb") as f:
            if f.read(4) != SNAPSHOT_MAGIC:
                raise InvalidInputError(f"{path}: not a voxel map snapshot")
            (hlen,) = struct.unpack("<I", f.read(4))
            header = json.loads(f.read(hlen).decode())
            vm = cls(voxel_size=header["voxel_size"],
                     num_classes=header["num_classes"],
                     n_horizon=header["n_horizon"],
                     merge_policy=header["merge_policy"],
                     labelset_hash=header.get("labelset_hash", ""))
            rec = np.frombuffer(f.read(), dtype=vm._record_dtype())
        if len(rec) != header["count"]:
            raise InvalidInputError(f"{path}: truncated snapshot")
        vm._grow(len(rec))
        n = rec["n_points"].astype(np.int64)
        vm._L_inf[: len(rec)] = lb.log_normalize(rec["logp"].astype(np.float64), axis=-1)
        vm._pos_sum[: len(rec)] = rec["mean"].astype(np.float64) * n[:, None]
        vm._n_points[: len(rec)] = n
        if len(rec):
            packed = pack_keys(rec["key"].astype(np.int64))
            vm._row_packed[: len(rec)] = packed
            sort = np.argsort(packed)
            vm._sorted_packed = packed[sort]
            vm._sorted_rows = np.arange(len(rec))[sort]
        vm._size = len(rec)
        # reloaded states live in the infinite horizon; the ring restarts empty
        vm.merge_policy = "drop"
        return vm
