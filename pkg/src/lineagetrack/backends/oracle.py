"""Deterministic classical-vision backend used for tests and desk-scale runs.

No network, no model weights: propagation thresholds the target patch at the
Otsu level and picks the connected component that best overlaps the prompt
box; embeddings are hand-built appearance statistics; 3D segmentation is a
thresholded flood fill from the click with a watershed split against touching
neighbors.
"""

from __future__ import annotations

from typing import TYPE_CHECKING, Optional

import numpy as np
from scipy import ndimage
from skimage.feature import peak_local_max
from skimage.filters import threshold_otsu
from skimage.measure import regionprops
from skimage.segmentation import watershed

from . import BackendError, Capabilities, MemoryFeature

if TYPE_CHECKING:
    from ..linking import PromptSet

_HIST_BINS = 16


def _to_unit(patch: np.ndarray) -> np.ndarray:
    """Map intensities to float64 in [0, 1] regardless of storage dtype."""
    p = np.asarray(patch)
    if p.dtype == np.uint8:
        return p.astype(np.float64) / 255.0
    if p.dtype == np.uint16:
        return p.astype(np.float64) / 65535.0
    return np.clip(p.astype(np.float64), 0.0, 1.0)


def _box_region(shape: tuple[int, ...], box: tuple[int, ...]) -> tuple[slice, ...]:
    k = len(box) // 2
    if k != len(shape):
        raise BackendError("bad_prompt", f"box rank {k} does not match patch rank {len(shape)}")
    sl = []
    for ax in range(k):
        lo, hi = int(box[ax]), int(box[k + ax])
        if hi < lo:
            raise BackendError("bad_prompt", f"degenerate box {box}")
        sl.append(slice(max(lo, 0), min(hi + 1, shape[ax])))
    if any(s.start >= s.stop for s in sl):
        raise BackendError("bad_prompt", f"box {box} lies outside the patch")
    return tuple(sl)


def _otsu_components(patch: np.ndarray) -> Optional[np.ndarray]:
    """Label map of foreground components under the Otsu threshold, or None."""
    if patch.min() == patch.max():
        return None
    fg = patch >= threshold_otsu(patch)
    if not fg.any():
        return None
    labels, n = ndimage.label(fg)
    return labels if n else None


def _best_component(labels: np.ndarray, region: tuple[slice, ...]) -> Optional[np.ndarray]:
    """The component with the largest pixel count inside ``region``."""
    inside = labels[region]
    counts = np.bincount(inside[inside > 0].ravel())
    if counts.size == 0 or counts.max() == 0:
        return None
    return labels == int(counts.argmax())


class OracleBackend:
    capabilities = Capabilities(propagate=True, embed=True, segment3d=True)

    def propagate(self, patch_ref: np.ndarray, patch_target: np.ndarray,
                  prompts: "PromptSet") -> np.ndarray:
        if patch_ref.shape != patch_target.shape:
            raise BackendError("bad_patch", "patch pair must share shape")
        target = _to_unit(patch_target)
        labels = _otsu_components(target)
        if labels is None:
            return np.zeros(target.shape, dtype=bool)
        region = _box_region(target.shape, prompts.box)
        comp = _best_component(labels, region)
        if comp is None:
            return np.zeros(target.shape, dtype=bool)
        return comp

    def embed(self, patch: np.ndarray, box: tuple[int, int, int, int]
              ) -> tuple[np.ndarray, MemoryFeature]:
        if np.asarray(patch).ndim != 2:
            raise BackendError("bad_patch", "embed expects a 2D patch")
        unit = _to_unit(patch)
        region = _box_region(unit.shape, box)
        labels = _otsu_components(unit)
        mask = _best_component(labels, region) if labels is not None else None
        if mask is None:
            # Nothing segmentable: describe the box interior so background
            # candidates still embed (and score low against real cells).
            mask = np.zeros(unit.shape, dtype=bool)
            mask[region] = True
        return mask, MemoryFeature(_appearance_features(unit, mask))

    def segment3d(self, volume_patch: np.ndarray, click: tuple[int, int, int]
                  ) -> np.ndarray:
        patch = np.asarray(volume_patch)
        if patch.ndim != 3:
            raise BackendError("bad_patch", "segment3d expects a 3D patch")
        click = tuple(int(c) for c in click)
        if any(c < 0 or c >= s for c, s in zip(click, patch.shape)):
            raise BackendError("bad_prompt", f"click {click} outside patch {patch.shape}")
        unit = _to_unit(patch)
        smooth = ndimage.gaussian_filter(unit, sigma=(0.4, 0.7, 0.7))
        empty = np.zeros(patch.shape, dtype=bool)
        if smooth.min() == smooth.max():
            return empty
        if smooth[click] < threshold_otsu(smooth):
            return empty  # background click
        # Half-maximum above the local background level (the patch median is a
        # robust background estimate because cells are sparse).
        background = float(np.median(smooth))
        fg = smooth >= background + 0.5 * (smooth[click] - background)
        labels, n = ndimage.label(fg)
        comp = labels == labels[click]
        markers_xyz = peak_local_max(smooth, min_distance=3, labels=comp.astype(np.int32),
                                     exclude_border=False)
        if len(markers_xyz) <= 1:
            return comp
        markers = np.zeros(patch.shape, dtype=np.int32)
        for i, pos in enumerate(markers_xyz, start=1):
            markers[tuple(pos)] = i
        basins = watershed(-smooth, markers, mask=comp)
        if basins[click] == 0:
            return comp
        return basins == basins[click]


def _appearance_features(unit: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Histogram + shape + contrast statistics of a masked 2D patch, L2-normed.

    Inside-vs-outside statistics enter as contrasts (differences), not raw
    values: the shared background level would otherwise inflate the cosine
    similarity between unrelated cells.
    """
    inside = unit[mask]
    outside = unit[~mask]
    hist, _ = np.histogram(inside, bins=_HIST_BINS, range=(0.0, 1.0))
    hist = hist / max(hist.sum(), 1)
    props = regionprops(mask.astype(np.uint8))
    ecc = props[0].eccentricity if props else 0.0
    mean_in = inside.mean() if inside.size else 0.0
    std_in = inside.std() if inside.size else 0.0
    mean_out = outside.mean() if outside.size else 0.0
    std_out = outside.std() if outside.size else 0.0
    feat = np.concatenate([
        hist,
        [mask.sum() / mask.size, ecc, mean_in - mean_out, std_in - std_out],
    ])
    norm = np.linalg.norm(feat)
    return feat / norm if norm else feat
