"""Dataset ingestion and emission.

Covers the CTC-style directory layout (per-frame TIFFs ``t{NNN}.tif`` /
``mask{NNN}.tif`` plus a ``res_track.txt`` table of "label begin end parent"
lines), a seeds/centers text table, and a chunked volume store for data too
large to load whole. The store uses the Zarr v2 on-disk layout (a ``.zarray``
JSON metadata file pinning the format version, uncompressed C-order chunk
files named ``i.j.k``); chunks that were never written read back as zeros, so
multi-gigabyte virtual volumes cost nothing until filled.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import tifffile

from .model import (DetectionSet, InstanceMask, LineageForest, Tracklet,
                    Volume, forest_validate)


class DataIOError(RuntimeError):
    pass


@dataclass(frozen=True)
class DatasetLayout:
    root: Path
    image_pattern: str = "t{:03d}.tif"
    mask_pattern: str = "mask{:03d}.tif"
    track_name: str = "res_track.txt"

    def image_path(self, t: int) -> Path:
        return Path(self.root) / self.image_pattern.format(t)

    def mask_path(self, t: int) -> Path:
        return Path(self.root) / self.mask_pattern.format(t)

    @property
    def track_path(self) -> Path:
        return Path(self.root) / self.track_name

    def frame_count(self, pattern: Optional[str] = None) -> int:
        pat = pattern or self.image_pattern
        t = 0
        while (Path(self.root) / pat.format(t)).exists():
            t += 1
        return t


def read_volume_sequence(layout: DatasetLayout) -> list[Volume]:
    n = layout.frame_count()
    if n == 0:
        raise DataIOError(f"no frames matching {layout.image_pattern} under {layout.root}")
    volumes = []
    shape = dtype = None
    for t in range(n):
        arr = tifffile.imread(layout.image_path(t))
        if shape is None:
            shape, dtype = arr.shape, arr.dtype
        elif arr.shape != shape or arr.dtype != dtype:
            raise DataIOError(f"frame {t}: shape/dtype mismatch "
                              f"({arr.shape}/{arr.dtype} vs {shape}/{dtype})")
        volumes.append(Volume(arr, t))
    return volumes


def write_volume_sequence(root: Union[str, Path], volumes: Sequence[Volume],
                          pattern: str = "t{:03d}.tif") -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for v in volumes:
        tifffile.imwrite(root / pattern.format(v.t), np.asarray(v.data))


def detection_set_from_labels(t: int, labels: np.ndarray) -> DetectionSet:
    masks = {}
    for label in np.unique(labels):
        if label == 0:
            continue
        masks[int(label)] = InstanceMask.from_dense(int(label), t, labels == label)
    return DetectionSet(t, masks)


def labels_from_detection_set(dset: DetectionSet, shape: tuple[int, ...],
                              dtype=np.uint16,
                              relabel: Optional[dict[int, int]] = None) -> np.ndarray:
    out = np.zeros(shape, dtype=dtype)
    for label in sorted(dset.masks):
        value = relabel.get(label, 0) if relabel is not None else label
        if value == 0 and relabel is not None:
            continue
        if value > np.iinfo(dtype).max:
            raise DataIOError(f"label {value} exceeds {dtype} range")
        dense = dset.masks[label].to_dense(shape)
        out[dense] = value
    return out


def read_label_sequence(layout: DatasetLayout) -> list[DetectionSet]:
    n = layout.frame_count(layout.mask_pattern)
    if n == 0:
        raise DataIOError(f"no masks matching {layout.mask_pattern} under {layout.root}")
    dsets = []
    shape = dtype = None
    for t in range(n):
        arr = tifffile.imread(layout.mask_path(t))
        if arr.dtype.kind not in "ui":
            raise DataIOError(f"frame {t}: label image must be integer, got {arr.dtype}")
        if shape is None:
            shape, dtype = arr.shape, arr.dtype
        elif arr.shape != shape or arr.dtype != dtype:
            raise DataIOError(f"frame {t}: shape/dtype mismatch "
                              f"({arr.shape}/{arr.dtype} vs {shape}/{dtype})")
        dsets.append(detection_set_from_labels(t, arr))
    return dsets


def write_label_sequence(root: Union[str, Path], dsets: Sequence[DetectionSet],
                         shape: tuple[int, ...], pattern: str = "mask{:03d}.tif",
                         relabel: Optional[list[dict[int, int]]] = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i, dset in enumerate(dsets):
        arr = labels_from_detection_set(
            dset, shape, relabel=relabel[i] if relabel is not None else None)
        tifffile.imwrite(root / pattern.format(dset.t), arr)


@dataclass(frozen=True)
class TrackRecord:
    label: int
    begin: int
    end: int
    parent: int  # 0 = none


def read_track_table(path: Union[str, Path]) -> list[TrackRecord]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise DataIOError(f"{path}:{lineno}: expected 'L B E P', got {line!r}")
            try:
                label, begin, end, parent = (int(p) for p in parts)
            except ValueError:
                raise DataIOError(f"{path}:{lineno}: non-integer field in {line!r}") from None
            records.append(TrackRecord(label, begin, end, parent))
    known = {r.label for r in records}
    for r in records:
        if r.parent and r.parent not in known:
            raise DataIOError(f"{path}: track {r.label} references unknown parent {r.parent}")
    return records


def write_track_table(path: Union[str, Path], forest: LineageForest) -> None:
    lines = []
    for tid in forest.sorted_ids():
        tr = forest.tracklets[tid]
        lines.append(f"{tid} {tr.t_start} {tr.t_end} {tr.parent or 0}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def forest_from_table(records: Sequence[TrackRecord]) -> LineageForest:
    """Rebuild a forest from table records; mask labels equal tracklet ids."""
    tracklets = {}
    for r in records:
        refs = tuple((t, r.label) for t in range(r.begin, r.end + 1))
        tracklets[r.label] = Tracklet(r.label, r.begin, r.end, refs,
                                      parent=r.parent or None)
    forest = LineageForest(tracklets)
    issues = forest_validate(forest)
    if issues:
        raise DataIOError(f"invalid track table: {issues[:3]}")
    return forest


def export_result(root: Union[str, Path], forest: LineageForest,
                  dsets: Sequence[DetectionSet], shape: tuple[int, ...]) -> None:
    """Write a tracking result in CTC convention: every tracklet keeps one
    label (its id) across its whole span; unreferenced masks are dropped."""
    relabel: list[dict[int, int]] = [dict() for _ in dsets]
    for tid, tr in forest.tracklets.items():
        for t, label in tr.mask_refs:
            relabel[t][label] = tid
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_label_sequence(root, dsets, shape, relabel=relabel)
    write_track_table(root / "res_track.txt", forest)


def read_result(root: Union[str, Path]) -> tuple[list[DetectionSet], LineageForest]:
    layout = DatasetLayout(Path(root))
    dsets = read_label_sequence(layout)
    forest = forest_from_table(read_track_table(layout.track_path))
    return dsets, forest


def read_centers(path: Union[str, Path], n_frames: int) -> list[list[tuple[float, ...]]]:
    """Parse "t z y x" (or "t y x") lines into per-frame center lists."""
    out: list[list[tuple[float, ...]]] = [[] for _ in range(n_frames)]
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) not in (3, 4):
                raise DataIOError(f"{path}:{lineno}: expected 't z y x' or 't y x'")
            t = int(parts[0])
            if not 0 <= t < n_frames:
                raise DataIOError(f"{path}:{lineno}: frame {t} out of range")
            out[t].append(tuple(float(p) for p in parts[1:]))
    return out


def write_centers(path: Union[str, Path], centers: Sequence[Sequence[tuple[float, ...]]]) -> None:
    lines = []
    for t, pts in enumerate(centers):
        for p in pts:
            lines.append(" ".join([str(t)] + [f"{c:.2f}" for c in p]))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


# ---------------------------------------------------------------------------
# Chunked volume store (Zarr v2 compatible layout)
# ---------------------------------------------------------------------------

_ZARR_DTYPES = {"|u1": np.dtype("uint8"), "<u2": np.dtype("uint16"), "<f4": np.dtype("float32")}
_ZARR_NAMES = {v: k for k, v in _ZARR_DTYPES.items()}

DEFAULT_CHUNKS_2D = (1, 64, 64)
DEFAULT_CHUNKS_3D = (1, 32, 64, 64)


class ChunkedVolume:
    """Read/write handle for a chunked (T, [Z,] Y, X) array on disk.

    Reads touch only chunk files intersecting the requested box; missing chunk
    files are treated as zero-filled, which makes huge virtual stores cheap.
    """

    def __init__(self, path: Path, shape: tuple[int, ...], chunks: tuple[int, ...],
                 dtype: np.dtype):
        self.path = Path(path)
        self.shape = shape
        self.chunks = chunks
        self.dtype = dtype

    @property
    def nbytes_virtual(self) -> int:
        return int(np.prod(self.shape)) * self.dtype.itemsize

    def _chunk_file(self, idx: tuple[int, ...]) -> Path:
        return self.path / ".".join(str(i) for i in idx)

    def write_frame(self, t: int, arr: np.ndarray) -> None:
        arr = np.asarray(arr, dtype=self.dtype)
        if arr.shape != self.shape[1:]:
            raise DataIOError(f"frame shape {arr.shape} != store frame shape {self.shape[1:]}")
        if self.chunks[0] != 1:
            raise DataIOError("write_frame requires time-axis chunk size 1")
        spatial_chunks = self.chunks[1:]
        grid = [math.ceil(s / c) for s, c in zip(arr.shape, spatial_chunks)]
        for idx in np.ndindex(*grid):
            sl = tuple(slice(i * c, min((i + 1) * c, s))
                       for i, c, s in zip(idx, spatial_chunks, arr.shape))
            block = arr[sl]
            if not block.any():
                continue  # sparse: unwritten chunks read back as zeros
            full = np.zeros(spatial_chunks, dtype=self.dtype)
            full[tuple(slice(0, b) for b in block.shape)] = block
            fname = self._chunk_file((t,) + idx)
            full.astype(self.dtype.newbyteorder("<")).tofile(fname)

    def read_patch(self, t: int, box: Sequence[tuple[int, int]]) -> np.ndarray:
        """Read the half-open spatial box at frame t; outside regions are zero."""
        spatial = self.shape[1:]
        if len(box) != len(spatial):
            raise DataIOError(f"box rank {len(box)} != spatial rank {len(spatial)}")
        sizes = [hi - lo for lo, hi in box]
        if any(s <= 0 for s in sizes):
            raise DataIOError(f"empty box {box}")
        out = np.zeros(sizes, dtype=self.dtype)
        if not 0 <= t < self.shape[0]:
            return out
        # Clip the request to the stored extent.
        clip = [(max(lo, 0), min(hi, s)) for (lo, hi), s in zip(box, spatial)]
        if any(lo >= hi for lo, hi in clip):
            return out
        spatial_chunks = self.chunks[1:]
        lo_chunk = [lo // c for (lo, _), c in zip(clip, spatial_chunks)]
        hi_chunk = [(hi - 1) // c for (_, hi), c in zip(clip, spatial_chunks)]
        for idx in np.ndindex(*[h - l + 1 for l, h in zip(lo_chunk, hi_chunk)]):
            cidx = tuple(l + i for l, i in zip(lo_chunk, idx))
            fname = self._chunk_file((t,) + cidx)
            if not fname.exists():
                continue
            chunk = np.fromfile(fname, dtype=self.dtype.newbyteorder("<"))
            chunk = chunk.reshape(spatial_chunks).astype(self.dtype, copy=False)
            # Overlap of this chunk with the clipped request, in both frames.
            src, dst = [], []
            for ax, (ci, c) in enumerate(zip(cidx, spatial_chunks)):
                a0, a1 = ci * c, min((ci + 1) * c, spatial[ax])
                lo, hi = clip[ax]
                o0, o1 = max(a0, lo), min(a1, hi)
                src.append(slice(o0 - a0, o1 - a0))
                dst.append(slice(o0 - box[ax][0], o1 - box[ax][0]))
            out[tuple(dst)] = chunk[tuple(src)]
        return out


def create_chunked_store(path: Union[str, Path], shape: tuple[int, ...],
                         dtype, chunks: Optional[tuple[int, ...]] = None) -> ChunkedVolume:
    dtype = np.dtype(dtype)
    if dtype not in _ZARR_NAMES:
        raise DataIOError(f"unsupported store dtype {dtype}")
    if len(shape) not in (3, 4):
        raise DataIOError("store shape must be (T, Y, X) or (T, Z, Y, X)")
    if chunks is None:
        chunks = DEFAULT_CHUNKS_2D if len(shape) == 3 else DEFAULT_CHUNKS_3D
    if len(chunks) != len(shape):
        raise DataIOError("chunks rank must match shape rank")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "zarr_format": 2,
        "shape": list(shape),
        "chunks": list(chunks),
        "dtype": _ZARR_NAMES[dtype],
        "compressor": None,
        "fill_value": 0,
        "order": "C",
        "filters": None,
        "dimension_separator": ".",
    }
    (path / ".zarray").write_text(json.dumps(meta, indent=2))
    return ChunkedVolume(path, tuple(shape), tuple(chunks), dtype)


def open_chunked_volume(path: Union[str, Path]) -> ChunkedVolume:
    path = Path(path)
    meta_path = path / ".zarray"
    if not meta_path.exists():
        raise DataIOError(f"no chunked store at {path} (missing .zarray)")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataIOError(f"corrupt store metadata at {meta_path}: {exc}") from None
    if meta.get("zarr_format") != 2:
        raise DataIOError(f"unsupported store version {meta.get('zarr_format')}")
    if meta.get("dtype") not in _ZARR_DTYPES:
        raise DataIOError(f"unsupported store dtype {meta.get('dtype')}")
    return ChunkedVolume(path, tuple(meta["shape"]), tuple(meta["chunks"]),
                         _ZARR_DTYPES[meta["dtype"]])


def read_patch(handle: ChunkedVolume, t: int, box: Sequence[tuple[int, int]]) -> np.ndarray:
    return handle.read_patch(t, box)
