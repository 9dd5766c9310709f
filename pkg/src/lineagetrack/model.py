"""Core domain types: volumes, instance masks, detection sets, and lineage forests.

Coordinates are (y, x) for 2D and (z, y, x) for 3D, 0-based. Frame indices are
0-based. All values are treated as immutable after construction; "mutation"
returns a new value.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional

import numpy as np

# Coordinate packing stride for fast voxel-set operations. Supports grids up
# to 2**21 per axis.
_PACK = 1 << 21


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Volume:
    """A single time point's intensity image (2D: (h, w), 3D: (z, y, x))."""

    data: np.ndarray
    t: int
    spacing: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim not in (2, 3):
            raise ModelError(f"volume must be 2D or 3D, got ndim={d.ndim}")
        if any(s < 1 for s in d.shape):
            raise ModelError(f"all dimensions must be >= 1, got shape={d.shape}")
        if d.dtype not in (np.uint8, np.uint16) and d.dtype.kind != "f":
            raise ModelError(f"unsupported dtype {d.dtype}")
        if self.t < 0:
            raise ModelError(f"frame index must be >= 0, got {self.t}")
        if self.spacing is not None and len(self.spacing) != d.ndim:
            raise ModelError("spacing length must match dimensionality")
        object.__setattr__(self, "data", d)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def plane(self, z: Optional[int] = None) -> np.ndarray:
        """The 2D image itself, or the given z slice of a 3D volume."""
        if self.data.ndim == 2:
            return self.data
        if z is None:
            raise ModelError("z required for 3D volumes")
        return self.data[z]


def _runs_from_voxels(voxels: np.ndarray) -> np.ndarray:
    """Encode sorted unique integer voxel coordinates as maximal runs along x."""
    vox = np.unique(voxels, axis=0)  # sorts lexicographically
    if vox.size == 0:
        raise ModelError("mask must contain at least one voxel")
    lead, x = vox[:, :-1], vox[:, -1]
    # A new run starts where the leading coords change or x is not consecutive.
    new_run = np.ones(len(vox), dtype=bool)
    if len(vox) > 1:
        same_lead = (lead[1:] == lead[:-1]).all(axis=1)
        consecutive = x[1:] == x[:-1] + 1
        new_run[1:] = ~(same_lead & consecutive)
    starts = np.flatnonzero(new_run)
    lengths = np.diff(np.append(starts, len(vox)))
    runs = np.concatenate([lead[starts], x[starts, None], lengths[:, None]], axis=1)
    return np.ascontiguousarray(runs, dtype=np.int64)


@dataclass(frozen=True)
class InstanceMask:
    """One labeled cell region, stored as sorted run-length encoding.

    ``runs`` has shape (n_runs, ndim + 1): leading coordinates, x start, run
    length, sorted lexicographically. Centroid and bbox are derived from the
    runs; ``bbox`` is the tight inclusive hull ((mins...), (maxes...)) flattened
    to (min_0, ..., min_k, max_0, ..., max_k).
    """

    label: int
    t: int
    runs: np.ndarray

    def __post_init__(self):
        if self.label <= 0:
            raise ModelError(f"label must be positive, got {self.label}")
        if self.t < 0:
            raise ModelError(f"frame index must be >= 0, got {self.t}")
        r = np.asarray(self.runs, dtype=np.int64)
        if r.ndim != 2 or r.shape[0] == 0 or r.shape[1] not in (3, 4):
            raise ModelError("runs must be a non-empty (n, ndim+1) array")
        if (r[:, -1] <= 0).any():
            raise ModelError("run lengths must be positive")
        if (r[:, :-1] < 0).any() or (r[:, -2] < 0).any():
            raise ModelError("voxel coordinates must be non-negative")
        object.__setattr__(self, "runs", r)

    @classmethod
    def from_voxels(cls, label: int, t: int, voxels: Iterable) -> "InstanceMask":
        vox = np.asarray(list(voxels) if not isinstance(voxels, np.ndarray) else voxels)
        vox = vox.reshape(-1, vox.shape[-1]).astype(np.int64)
        return cls(label, t, _runs_from_voxels(vox))

    @classmethod
    def from_dense(cls, label: int, t: int, dense: np.ndarray,
                   origin: Optional[tuple[int, ...]] = None) -> "InstanceMask":
        vox = np.argwhere(dense)
        if vox.size == 0:
            raise ModelError("mask must contain at least one voxel")
        if origin is not None:
            vox = vox + np.asarray(origin, dtype=np.int64)
        return cls(label, t, _runs_from_voxels(vox))

    @property
    def ndim(self) -> int:
        return self.runs.shape[1] - 1

    @cached_property
    def area(self) -> int:
        return int(self.runs[:, -1].sum())

    @cached_property
    def centroid(self) -> tuple[float, ...]:
        L = self.runs[:, -1].astype(np.float64)
        n = L.sum()
        lead = (self.runs[:, :-2].T * L).sum(axis=1)
        x0 = self.runs[:, -2].astype(np.float64)
        xsum = (L * x0 + L * (L - 1) / 2.0).sum()
        return tuple(np.append(lead, xsum) / n)

    @cached_property
    def bbox(self) -> tuple[int, ...]:
        lead = self.runs[:, :-2]
        x0 = self.runs[:, -2]
        x1 = x0 + self.runs[:, -1] - 1
        mins = [int(lead[:, k].min()) for k in range(lead.shape[1])] + [int(x0.min())]
        maxs = [int(lead[:, k].max()) for k in range(lead.shape[1])] + [int(x1.max())]
        return tuple(mins + maxs)

    def voxel_array(self) -> np.ndarray:
        """Decode to an (n_voxels, ndim) sorted coordinate array."""
        L = self.runs[:, -1]
        total = int(L.sum())
        out = np.empty((total, self.ndim), dtype=np.int64)
        out[:, :-1] = np.repeat(self.runs[:, :-2], L, axis=0)
        offsets = np.arange(total) - np.repeat(np.cumsum(L) - L, L)
        out[:, -1] = np.repeat(self.runs[:, -2], L) + offsets
        return out

    @cached_property
    def _keys(self) -> np.ndarray:
        vox = self.voxel_array()
        key = vox[:, 0].copy()
        for k in range(1, self.ndim):
            key = key * _PACK + vox[:, k]
        return key

    def intersection_count(self, other: "InstanceMask") -> int:
        if self.ndim != other.ndim:
            raise ModelError("masks must share dimensionality")
        return int(np.intersect1d(self._keys, other._keys, assume_unique=True).size)

    def to_dense(self, shape: tuple[int, ...],
                 origin: Optional[tuple[int, ...]] = None) -> np.ndarray:
        """Rasterize into a boolean array of ``shape`` anchored at ``origin``.

        Voxels falling outside the window are dropped.
        """
        out = np.zeros(shape, dtype=bool)
        org = np.zeros(self.ndim, dtype=np.int64) if origin is None else np.asarray(origin, dtype=np.int64)
        for run in self.runs:
            lead = run[:-2] - org[:-1]
            if (lead < 0).any() or any(lead[k] >= shape[k] for k in range(len(lead))):
                continue
            x0 = run[-2] - org[-1]
            x1 = x0 + run[-1]
            x0c, x1c = max(x0, 0), min(x1, shape[-1])
            if x0c >= x1c:
                continue
            out[tuple(lead) + (slice(x0c, x1c),)] = True
        return out

    def translate(self, offset: tuple[int, ...]) -> "InstanceMask":
        off = np.asarray(offset, dtype=np.int64)
        runs = self.runs.copy()
        runs[:, :-1] += off
        return InstanceMask(self.label, self.t, runs)

    def slice_z(self, z: int) -> Optional["InstanceMask"]:
        """The 2D plane of a 3D mask at depth z, or None if empty there."""
        if self.ndim != 3:
            raise ModelError("slice_z requires a 3D mask")
        sel = self.runs[:, 0] == z
        if not sel.any():
            return None
        return InstanceMask(self.label, self.t, self.runs[sel][:, 1:])

    def with_label(self, label: int) -> "InstanceMask":
        return InstanceMask(label, self.t, self.runs)

    def at_frame(self, t: int) -> "InstanceMask":
        return InstanceMask(self.label, t, self.runs)


@dataclass(frozen=True)
class OverlapStats:
    intersection: int
    union: int
    iou: float
    frac_of_smaller: float


def mask_overlap_stats(a: InstanceMask, b: InstanceMask) -> OverlapStats:
    """Intersection/union/IoU and intersection over the smaller mask's area.

    Disjoint masks yield zeros; all ratios lie in [0, 1].
    """
    inter = a.intersection_count(b)
    union = a.area + b.area - inter
    return OverlapStats(
        intersection=inter,
        union=union,
        iou=inter / union if union else 0.0,
        frac_of_smaller=inter / min(a.area, b.area),
    )


@dataclass(frozen=True)
class DetectionSet:
    """All instance masks of one frame, keyed by label."""

    t: int
    masks: dict[int, InstanceMask] = field(default_factory=dict)

    def __post_init__(self):
        for label, m in self.masks.items():
            if m.label != label:
                raise ModelError(f"mask keyed {label} carries label {m.label}")
            if m.t != self.t:
                raise ModelError(f"mask {label} has t={m.t}, set has t={self.t}")

    @property
    def next_label(self) -> int:
        return max(self.masks, default=0) + 1

    def with_mask(self, mask: InstanceMask) -> "DetectionSet":
        if mask.label in self.masks:
            raise ModelError(f"label {mask.label} already present in frame {self.t}")
        masks = dict(self.masks)
        masks[mask.label] = mask
        return DetectionSet(self.t, masks)

    def without(self, labels: Iterable[int]) -> "DetectionSet":
        drop = set(labels)
        return DetectionSet(self.t, {l: m for l, m in self.masks.items() if l not in drop})

    def validate_disjoint(self) -> list[str]:
        """Pairwise voxel-disjointness check (O(n^2), bbox-prefiltered)."""
        issues = []
        items = sorted(self.masks.items())
        for i, (la, ma) in enumerate(items):
            for lb, mb in items[i + 1:]:
                if not _bbox_overlap(ma.bbox, mb.bbox):
                    continue
                if ma.intersection_count(mb):
                    issues.append(f"overlapping masks: t={self.t}, labels=({la},{lb})")
        return issues


def _bbox_overlap(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    k = len(a) // 2
    return all(a[i] <= b[k + i] and b[i] <= a[k + i] for i in range(k))


@dataclass(frozen=True)
class Tracklet:
    """A temporally contiguous mask sequence of one cell.

    ``mask_refs`` holds one (t, label) per frame in [t_start, t_end]. ``parent``
    points at the tracklet this one divided from, if any.
    """

    id: int
    t_start: int
    t_end: int
    mask_refs: tuple[tuple[int, int], ...]
    parent: Optional[int] = None

    def __post_init__(self):
        if self.id <= 0:
            raise ModelError(f"tracklet id must be positive, got {self.id}")
        object.__setattr__(self, "mask_refs", tuple((int(t), int(l)) for t, l in self.mask_refs))

    def label_at(self, t: int) -> int:
        for ft, label in self.mask_refs:
            if ft == t:
                return label
        raise KeyError(f"tracklet {self.id} has no mask at t={t}")


@dataclass(frozen=True)
class LineageForest:
    """All tracklets of a run plus parent edges encoding mitosis."""

    tracklets: dict[int, Tracklet] = field(default_factory=dict)

    def __post_init__(self):
        for tid, tr in self.tracklets.items():
            if tr.id != tid:
                raise ModelError(f"tracklet keyed {tid} carries id {tr.id}")

    def children_of(self, tid: int) -> list[Tracklet]:
        return [tr for tr in self.tracklets.values() if tr.parent == tid]

    def sorted_ids(self) -> list[int]:
        return sorted(self.tracklets)


def forest_validate(forest: LineageForest,
                    detections: Optional[list[DetectionSet]] = None) -> list[str]:
    """All violated LineageForest invariants, empty iff the forest is valid.

    Each violation names the offending tracklet id and rule. When per-frame
    detections are supplied, mask references are also resolved against them.
    """
    issues: list[str] = []
    seen_refs: dict[tuple[int, int], int] = {}
    children: dict[int, int] = {}

    for tid in sorted(forest.tracklets):
        tr = forest.tracklets[tid]
        if tr.t_start > tr.t_end:
            issues.append(f"bad span: id={tid}")
            continue
        expected = list(range(tr.t_start, tr.t_end + 1))
        got = [t for t, _ in tr.mask_refs]
        if got != expected:
            for t in expected:
                if t not in got:
                    issues.append(f"temporal gap: id={tid}, t={t}")
            for t in got:
                if t not in expected or got.count(t) > 1:
                    issues.append(f"duplicate or stray frame: id={tid}, t={t}")
                    break
        for ref in tr.mask_refs:
            if ref in seen_refs:
                issues.append(f"mask referenced twice: (t={ref[0]}, label={ref[1]}) "
                              f"by id={seen_refs[ref]} and id={tid}")
            else:
                seen_refs[ref] = tid
            if detections is not None:
                t, label = ref
                if not (0 <= t < len(detections)) or label not in detections[t].masks:
                    issues.append(f"missing mask: id={tid}, (t={t}, label={label})")
        if tr.parent is not None:
            if tr.parent == tid:
                issues.append(f"self parent: id={tid}")
            elif tr.parent not in forest.tracklets:
                issues.append(f"unknown parent: id={tid}, parent={tr.parent}")
            else:
                children[tr.parent] = children.get(tr.parent, 0) + 1
                if forest.tracklets[tr.parent].t_end != tr.t_start - 1:
                    issues.append(f"parent not temporally adjacent: id={tid}, parent={tr.parent}")

    for pid, n in sorted(children.items()):
        if n > 2:
            issues.append(f"non-binary division: id={pid}")

    # Parent pointers with strictly decreasing t_start cannot cycle; detect
    # malformed chains anyway.
    for tid in sorted(forest.tracklets):
        seen = set()
        cur: Optional[int] = tid
        while cur is not None and cur in forest.tracklets:
            if cur in seen:
                issues.append(f"cycle: id={tid}")
                break
            seen.add(cur)
            cur = forest.tracklets[cur].parent

    return issues
