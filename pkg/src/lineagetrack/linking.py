"""Backward-in-time linking of pre-segmented masks into a lineage forest.

Starting from a curated detection set at the final frame, each active tracklet
is propagated one frame back by cropping a patch pair at the mask center,
prompting the segmentation backend with the known mask's box and points, and
matching the predicted mask against the previous frame's detections. Valid
predictions missing from the detections are added as recovered detections;
two tracklets landing on the same mask record a mitosis.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .model import (DetectionSet, InstanceMask, LineageForest, Tracklet,
                    Volume, forest_validate, mask_overlap_stats)


class LinkingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PatchSpec:
    """Geometry of one square patch cut from a full frame.

    The window covers [center - d/2, center + d/2) per axis; parts outside the
    image are zero-padded so the requested center stays at the patch center.
    ``origin`` is the clamped top-left corner in global coordinates and ``pad``
    the per-side padding, so global = patch - pad_before + origin exactly.
    """

    center: tuple[int, int]
    d: int
    origin: tuple[int, int]
    pad: tuple[tuple[int, int], tuple[int, int]]

    def to_global(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
        off = np.array([self.origin[0] - self.pad[0][0], self.origin[1] - self.pad[1][0]])
        return pts + off

    def to_patch(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
        off = np.array([self.origin[0] - self.pad[0][0], self.origin[1] - self.pad[1][0]])
        return pts - off

    @property
    def window_origin(self) -> tuple[int, int]:
        """Top-left of the unclamped window in global coordinates (may be < 0)."""
        return (self.origin[0] - self.pad[0][0], self.origin[1] - self.pad[1][0])


@dataclass(frozen=True)
class PromptSet:
    """Box plus positive/negative point prompts, in patch coordinates."""

    box: tuple[int, ...]
    positive: tuple[tuple[int, ...], ...]
    negative: tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class LinkConfig:
    d: Optional[int] = None          # patch side; None = derive from seed masks
    theta_link: float = 0.5          # min intersection/min-area to accept a link
    theta_small: float = 0.2         # min predicted/source area ratio
    theta_conflict: float = 0.2      # max IoU of a recovered mask vs existing ones
    n_pos: int = 3
    n_neg: int = 4

    def __post_init__(self):
        for name in ("theta_link", "theta_small", "theta_conflict"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise LinkingError(f"{name} must be in (0, 1), got {v}")
        if self.d is not None and (self.d < 4 or self.d % 2):
            raise LinkingError(f"patch side must be even and >= 4, got {self.d}")
        if self.n_pos < 1 or self.n_neg < 0:
            raise LinkingError("n_pos must be >= 1 and n_neg >= 0")


@dataclass(frozen=True)
class Decision:
    kind: str  # "linked" | "recovered" | "terminated"
    label: Optional[int] = None
    reason: Optional[str] = None

    @classmethod
    def linked(cls, label: int) -> "Decision":
        return cls("linked", label=label)

    @classmethod
    def recovered(cls) -> "Decision":
        return cls("recovered")

    @classmethod
    def terminated(cls, reason: str) -> "Decision":
        return cls("terminated", reason=reason)


def extract_patch_pair(v_t: Volume, v_prev: Volume, center: tuple[int, int], d: int,
                       z: Optional[int] = None
                       ) -> tuple[np.ndarray, np.ndarray, PatchSpec]:
    """Cut d x d patches at identical global coordinates from both frames.

    For 3D volumes the plane at depth ``z`` is used. Out-of-bounds regions are
    zero-filled so the requested center maps to the patch center.
    """
    if v_t.shape != v_prev.shape:
        raise LinkingError("volumes must share shape")
    if d < 4 or d % 2:
        raise LinkingError(f"patch side must be even and >= 4, got {d}")
    plane_t = v_t.plane(z)
    plane_prev = v_prev.plane(z)
    h, w = plane_t.shape
    cy, cx = int(center[0]), int(center[1])
    if not (0 <= cy < h and 0 <= cx < w):
        raise LinkingError(f"center out of bounds: {center} in {plane_t.shape}")

    half = d // 2
    lo = (cy - half, cx - half)
    origin = (max(lo[0], 0), max(lo[1], 0))
    hi = (lo[0] + d, lo[1] + d)
    pad = ((max(-lo[0], 0), max(hi[0] - h, 0)), (max(-lo[1], 0), max(hi[1] - w, 0)))
    spec = PatchSpec(center=(cy, cx), d=d, origin=origin, pad=pad)

    def cut(plane: np.ndarray) -> np.ndarray:
        out = np.zeros((d, d), dtype=plane.dtype)
        ys = slice(origin[0], min(hi[0], h))
        xs = slice(origin[1], min(hi[1], w))
        out[pad[0][0]:pad[0][0] + (ys.stop - ys.start),
            pad[1][0]:pad[1][0] + (xs.stop - xs.start)] = plane[ys, xs]
        return out

    return cut(plane_t), cut(plane_prev), spec


def extract_patch(v: Volume, center: tuple[int, int], d: int,
                  z: Optional[int] = None) -> tuple[np.ndarray, PatchSpec]:
    """Single-frame variant of extract_patch_pair."""
    patch, _, spec = extract_patch_pair(v, v, center, d, z=z)
    return patch, spec


def select_reference_slice(mask3d: InstanceMask) -> int:
    """The depth index holding the mask's largest per-slice area (ties: lowest z)."""
    if mask3d.ndim != 3:
        raise LinkingError("reference slice requires a 3D mask")
    zs = mask3d.runs[:, 0]
    lengths = mask3d.runs[:, -1]
    uniq, inv = np.unique(zs, return_inverse=True)
    areas = np.zeros(len(uniq), dtype=np.int64)
    np.add.at(areas, inv, lengths)
    return int(uniq[int(np.argmax(areas))])


def derive_prompt_seed(seed: int, tracklet_id: int, t: int) -> int:
    ss = np.random.SeedSequence([seed & 0xFFFFFFFF, tracklet_id, t])
    return int(ss.generate_state(1)[0])


def build_prompts(mask: InstanceMask, spec: PatchSpec, cfg: LinkConfig,
                  rng_seed: int) -> PromptSet:
    """Box + point prompts for a 2D mask inside a patch window.

    Positives are the centroid (snapped into the mask) plus the most interior
    pixels; negatives are background samples at least 2 px away from the mask,
    drawn from a seeded generator for reproducibility.
    """
    if mask.ndim != 2:
        raise LinkingError("prompts are built from 2D masks")
    d = spec.d
    dense = mask.to_dense((d, d), origin=spec.window_origin)
    if not dense.any():
        raise LinkingError("mask lies entirely outside the patch")

    y0, x0, y1, x1 = mask.bbox
    (by0, bx0), (by1, bx1) = spec.to_patch([(y0, x0)])[0], spec.to_patch([(y1, x1)])[0]
    box = (int(max(by0, 0)), int(max(bx0, 0)), int(min(by1, d - 1)), int(min(bx1, d - 1)))

    cy, cx = spec.to_patch([np.round(mask.centroid).astype(int)])[0]
    in_mask = np.argwhere(dense)
    if 0 <= cy < d and 0 <= cx < d and dense[cy, cx]:
        center_pt = (int(cy), int(cx))
    else:
        dist = np.linalg.norm(in_mask - np.array([cy, cx]), axis=1)
        center_pt = tuple(int(v) for v in in_mask[int(np.argmin(dist))])

    positives = [center_pt]
    if cfg.n_pos > 1:
        interior = ndimage.distance_transform_edt(dense)
        order = np.lexsort((in_mask[:, 1], in_mask[:, 0], -interior[tuple(in_mask.T)]))
        for idx in order:
            pt = tuple(int(v) for v in in_mask[idx])
            if pt not in positives:
                positives.append(pt)
            if len(positives) >= cfg.n_pos:
                break

    dist_to_mask = ndimage.distance_transform_edt(~dense)
    eligible = np.argwhere(dist_to_mask >= 2.0)
    ring = eligible[(dist_to_mask[tuple(eligible.T)] <= 6.0)]
    pool = ring if len(ring) >= cfg.n_neg else eligible
    negatives: list[tuple[int, int]] = []
    if len(pool) and cfg.n_neg:
        pool = pool[np.lexsort((pool[:, 1], pool[:, 0]))]
        rng = np.random.default_rng(rng_seed)
        take = min(cfg.n_neg, len(pool))
        idx = rng.choice(len(pool), size=take, replace=False)
        negatives = [tuple(int(v) for v in pool[i]) for i in sorted(idx)]

    return PromptSet(box=box, positive=tuple(positives), negative=tuple(negatives))


def classify_prediction(pred: Optional[InstanceMask], source: InstanceMask,
                        detections: DetectionSet, image_shape: tuple[int, int],
                        cfg: LinkConfig) -> Decision:
    """Sort one backend prediction into linked / recovered / terminated.

    Too-small or boundary-touching predictions terminate the track. Otherwise
    the detection with the highest intersection-over-smaller-area wins if it
    clears theta_link (ties: higher IoU, then lower label). A prediction that
    conflicts with nothing becomes a recovered detection.
    """
    if pred is None or pred.area < cfg.theta_small * source.area:
        return Decision.terminated("too small")
    y0, x0, y1, x1 = pred.bbox
    h, w = image_shape
    if y0 == 0 or x0 == 0 or y1 == h - 1 or x1 == w - 1:
        return Decision.terminated("image boundary")

    best: Optional[tuple[float, float, int]] = None
    max_iou = 0.0
    for label in sorted(detections.masks):
        stats = mask_overlap_stats(pred, detections.masks[label])
        max_iou = max(max_iou, stats.iou)
        if stats.intersection == 0:
            continue
        key = (stats.frac_of_smaller, stats.iou, -label)
        if best is None or key > (best[0], best[1], -best[2]):
            best = (stats.frac_of_smaller, stats.iou, label)
    if best is not None and best[0] >= cfg.theta_link:
        return Decision.linked(best[2])
    if max_iou < cfg.theta_conflict:
        return Decision.recovered()
    return Decision.terminated("ambiguous")


def resolve_mitosis(parent: InstanceMask,
                    children: Sequence[tuple[int, InstanceMask]]
                    ) -> tuple[list[int], list[int]]:
    """Keep at most the two children whose centroids are nearest the parent.

    Returns (retained ids, severed ids); severed children lose their link and
    their tracklets keep starting at the later frame.
    """
    if not children:
        raise LinkingError("mitosis resolution needs at least one child")
    if len(children) <= 2:
        return [cid for cid, _ in children], []
    pc = np.asarray(parent.centroid)
    ranked = sorted(children,
                    key=lambda cm: (float(np.linalg.norm(np.asarray(cm[1].centroid) - pc)), cm[0]))
    retained = [cid for cid, _ in ranked[:2]]
    severed = [cid for cid, _ in ranked[2:]]
    return retained, severed


def default_patch_side(seeds: DetectionSet, image_shape: tuple[int, ...]) -> int:
    """4x the median equivalent diameter of the seed masks, rounded up to even."""
    diameters = []
    for mask in seeds.masks.values():
        m2 = mask if mask.ndim == 2 else mask.slice_z(select_reference_slice(mask))
        diameters.append(2.0 * math.sqrt(m2.area / math.pi))
    d = int(math.ceil(4.0 * float(np.median(diameters))))
    d += d % 2
    plane_max = max(image_shape[-2:])
    cap = plane_max - plane_max % 2
    return max(8, min(d, cap))


@dataclass
class _Track:
    id: int
    t_start: int
    t_end: int
    refs: list[tuple[int, int]]
    parent: Optional[int] = None
    open: bool = True


@dataclass
class _Proposal:
    decision: Decision
    pred: Optional[InstanceMask] = None
    z_ref: Optional[int] = None


def _touches_border(patch_mask: np.ndarray) -> bool:
    return bool(patch_mask[0, :].any() or patch_mask[-1, :].any()
                or patch_mask[:, 0].any() or patch_mask[:, -1].any())


def _prediction_to_global(patch_mask: np.ndarray, spec: PatchSpec, t: int,
                          plane_shape: tuple[int, int]) -> Optional[InstanceMask]:
    if not patch_mask.any():
        return None
    vox = spec.to_global(np.argwhere(patch_mask))
    keep = ((vox[:, 0] >= 0) & (vox[:, 0] < plane_shape[0])
            & (vox[:, 1] >= 0) & (vox[:, 1] < plane_shape[1]))
    vox = vox[keep]
    if len(vox) == 0:
        return None
    return InstanceMask.from_voxels(1, t, vox)


def slice_detections(dset: DetectionSet, z: Optional[int]) -> DetectionSet:
    if z is None:
        return dset
    masks = {}
    for label, m in dset.masks.items():
        m2 = m.slice_z(z)
        if m2 is not None:
            masks[label] = m2
    return DetectionSet(dset.t, masks)


def backward_link_pass(volumes: Sequence[Volume], detections: Sequence[DetectionSet],
                       seeds: DetectionSet, backend, cfg: LinkConfig, *,
                       workers: int = 1, seed: int = 0,
                       progress: Optional[Callable[[int, int], None]] = None
                       ) -> tuple[LineageForest, list[DetectionSet]]:
    """Propagate the seed masks backward frame by frame into a lineage forest.

    Per frame pair, every active tracklet proposes a decision independently
    (parallelizable); links, recoveries, mitoses, and new tracklets are then
    committed in a single serial phase ordered by tracklet id, so results do
    not depend on the worker count. Returns the forest and the detections
    augmented with recovered masks.
    """
    T = len(volumes)
    if T != len(detections):
        raise LinkingError("one DetectionSet per volume required")
    if T == 0:
        return LineageForest({}), []
    last = T - 1
    if seeds.t != last:
        raise LinkingError(f"seeds must sit at the final frame {last}, got {seeds.t}")
    is_3d = volumes[0].ndim == 3
    plane_shape = volumes[0].shape[-2:]

    dsets = list(detections)
    dsets[last] = seeds
    d_side = cfg.d if cfg.d is not None else default_patch_side(seeds, volumes[0].shape)
    cfg = replace(cfg, d=d_side)

    tracks: dict[int, _Track] = {}
    used_refs: set[tuple[int, int]] = set()
    next_id = 1
    for label in sorted(seeds.masks):
        tracks[next_id] = _Track(next_id, last, last, [(last, label)])
        used_refs.add((last, label))
        next_id += 1

    def propose(tid: int, t: int) -> _Proposal:
        tr = tracks[tid]
        mask = dsets[t].masks[tr.refs[0][1]]
        z_ref = select_reference_slice(mask) if is_3d else None
        m2 = mask if not is_3d else mask.slice_z(z_ref)
        try:
            pred = propagate_step(volumes[t], volumes[t - 1], m2, cfg, backend,
                                  derive_prompt_seed(seed, tid, t), z=z_ref)
        except LinkingError:
            raise
        except Exception as exc:
            raise LinkingError(f"backend failed for tracklet {tid} at t={t}: {exc}") from exc
        cand = slice_detections(dsets[t - 1], z_ref)
        decision = classify_prediction(pred, m2, cand, plane_shape, cfg)
        return _Proposal(decision, pred, z_ref)

    for t in range(last, 0, -1):
        active = sorted(tid for tid, tr in tracks.items() if tr.open and tr.t_start == t)
        if workers > 1 and len(active) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(lambda tid: propose(tid, t), active))
            proposals = dict(zip(active, results))
        else:
            proposals = {tid: propose(tid, t) for tid in active}

        # Serial commit: recoveries first need conflict re-checks against masks
        # added earlier in this very phase.
        link_claims: dict[int, list[int]] = {}
        for tid in active:
            prop = proposals[tid]
            dec = prop.decision
            if dec.kind == "terminated":
                tracks[tid].open = False
                continue
            if dec.kind == "linked":
                link_claims.setdefault(dec.label, []).append(tid)
                continue
            # Recovered: re-verify against the current (possibly augmented) frame.
            cand = slice_detections(dsets[t - 1], prop.z_ref)
            redecided = classify_prediction(prop.pred, prop.pred, cand,
                                            plane_shape, cfg)
            if redecided.kind == "linked":
                link_claims.setdefault(redecided.label, []).append(tid)
            elif redecided.kind == "recovered":
                new_label = dsets[t - 1].next_label
                full = prop.pred.with_label(new_label)
                if prop.z_ref is not None:
                    vox2 = full.voxel_array()
                    vox3 = np.concatenate([np.full((len(vox2), 1), prop.z_ref, dtype=np.int64),
                                           vox2], axis=1)
                    full = InstanceMask.from_voxels(new_label, t - 1, vox3)
                dsets[t - 1] = dsets[t - 1].with_mask(full)
                link_claims.setdefault(new_label, []).append(tid)
            else:
                tracks[tid].open = False

        for label in sorted(link_claims):
            claimants = link_claims[label]
            target = dsets[t - 1].masks[label]
            if len(claimants) == 1:
                tid = claimants[0]
                tracks[tid].t_start = t - 1
                tracks[tid].refs.insert(0, (t - 1, label))
                used_refs.add((t - 1, label))
                continue
            kids = [(tid, dsets[t].masks[tracks[tid].refs[0][1]]) for tid in claimants]
            retained, severed = resolve_mitosis(target, kids)
            for tid in severed:
                tracks[tid].open = False
            parent = _Track(next_id, t - 1, t - 1, [(t - 1, label)])
            tracks[next_id] = parent
            used_refs.add((t - 1, label))
            next_id += 1
            for tid in retained:
                tracks[tid].parent = parent.id
                tracks[tid].open = False

        for label in sorted(dsets[t - 1].masks):
            if (t - 1, label) not in used_refs:
                tracks[next_id] = _Track(next_id, t - 1, t - 1, [(t - 1, label)])
                used_refs.add((t - 1, label))
                next_id += 1

        if progress is not None:
            progress(t - 1, sum(1 for tr in tracks.values() if tr.open))

    forest = LineageForest({tid: Tracklet(tid, tr.t_start, tr.t_end, tuple(tr.refs), tr.parent)
                            for tid, tr in tracks.items()})
    issues = forest_validate(forest, dsets)
    if issues:
        raise LinkingError(f"internal invariant violation: {issues[:3]}")
    return forest, dsets


def propagate_step(v_ref: Volume, v_target: Volume, mask2d: InstanceMask,
                   cfg: LinkConfig, backend, rng_seed: int,
                   z: Optional[int] = None) -> Optional[InstanceMask]:
    """Predict one mask's continuation on the target frame, in global coordinates.

    Performs a single doubled-patch retry when the prediction runs into the
    patch border without touching the image border. Returns None when the
    backend finds nothing inside the image.
    """
    plane_shape = v_ref.shape[-2:]
    center = tuple(int(round(c)) for c in mask2d.centroid)
    d = cfg.d
    patch_ref, patch_target, spec = extract_patch_pair(v_ref, v_target, center, d, z=z)
    prompts = build_prompts(mask2d, spec, cfg, rng_seed)
    pred = backend.propagate(patch_ref, patch_target, prompts)

    if _touches_border(pred):
        gmin = spec.to_global(np.array([[0, 0]]))[0]
        gmax = spec.to_global(np.array([[d - 1, d - 1]]))[0]
        at_image_edge = (gmin[0] <= 0 or gmin[1] <= 0
                         or gmax[0] >= plane_shape[0] - 1 or gmax[1] >= plane_shape[1] - 1)
        if not at_image_edge:
            d2 = min(2 * d, max(plane_shape) + max(plane_shape) % 2)
            patch_ref, patch_target, spec = extract_patch_pair(v_ref, v_target, center, d2, z=z)
            prompts = build_prompts(mask2d, spec, cfg, rng_seed)
            pred = backend.propagate(patch_ref, patch_target, prompts)
    return _prediction_to_global(pred, spec, v_target.t, plane_shape)
