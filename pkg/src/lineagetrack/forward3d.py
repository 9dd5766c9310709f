"""Forward-in-time seed-based tracking for large 3D+t data.

Each tracked cell searches detector centers of the next frame within a radius,
scores the candidates by cosine similarity of backend memory features, and
links the best one when it clears the similarity threshold. When no candidate
clears it but the top two scores are close, the cell divides; when nothing
fits, the cell's position is recovered by patch propagation. Every linked
center is turned into a 3D mask by a single-click 3D segmentation. Candidate
claims are resolved globally so each center is used by at most one lineage and
the result does not depend on processing order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from skimage.feature import blob_log

from .backends import MemoryFeature
from .linking import (LinkConfig, classify_prediction, default_patch_side,
                      extract_patch, propagate_step, select_reference_slice,
                      derive_prompt_seed, slice_detections)
from .model import (DetectionSet, InstanceMask, LineageForest, Tracklet,
                    Volume, forest_validate)


class TrackingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrackerConfig:
    tau: Optional[float] = None       # candidate search radius; None = 2x median diameter
    s_link: float = 0.8               # similarity threshold for a direct link
    delta_mitosis: float = 0.1        # max top-2 similarity gap for a division
    d: Optional[int] = None           # patch side; None = derive from seed masks
    z_weight: Optional[float] = None  # None = derive from spacing, else 1.0
    theta_small: float = 0.2
    theta_conflict: float = 0.2

    def __post_init__(self):
        if self.tau is not None and self.tau <= 0:
            raise TrackingError(f"tau must be positive, got {self.tau}")
        if not 0.0 < self.s_link <= 1.0:
            raise TrackingError(f"s_link must be in (0, 1], got {self.s_link}")
        if not 0.0 <= self.delta_mitosis < 1.0:
            raise TrackingError(f"delta_mitosis must be in [0, 1), got {self.delta_mitosis}")


@dataclass(frozen=True)
class LinkDecision:
    kind: str  # "link" | "divide" | "missing"
    i: Optional[int] = None
    j: Optional[int] = None

    @classmethod
    def link(cls, i: int) -> "LinkDecision":
        return cls("link", i=i)

    @classmethod
    def divide(cls, i: int, j: int) -> "LinkDecision":
        if i == j:
            raise TrackingError("division indices must be distinct")
        return cls("divide", i=i, j=j)

    @classmethod
    def missing(cls) -> "LinkDecision":
        return cls("missing")


def find_candidates(center: Sequence[float], centers_next: Sequence[Sequence[float]],
                    tau: float, z_weight: float = 1.0) -> list[int]:
    """Indices of next-frame centers within radius tau of a tracked center.

    Sorted by ascending distance, ties by (z, y, x) lexicographic order. For
    3D points the z axis is scaled by z_weight, so anisotropic data can lean
    on the more reliable x-y plane.
    """
    if tau <= 0:
        raise TrackingError(f"tau must be positive, got {tau}")
    c = np.asarray(center, dtype=float)
    hits: list[tuple[float, tuple[float, ...], int]] = []
    for idx, other in enumerate(centers_next):
        o = np.asarray(other, dtype=float)
        if o.shape != c.shape:
            raise TrackingError("center dimensionality mismatch")
        delta = o - c
        if len(delta) == 3:
            delta = delta * np.array([z_weight, 1.0, 1.0])
        dist = float(np.linalg.norm(delta))
        if dist <= tau:
            hits.append((dist, tuple(float(v) for v in o), idx))
    hits.sort(key=lambda h: (h[0], h[1]))
    return [idx for _, _, idx in hits]


def cosine_similarity(u: MemoryFeature, v: MemoryFeature) -> float:
    if u.dim != v.dim:
        raise ValueError(f"feature dimensions differ: {u.dim} vs {v.dim}")
    nu = float(np.linalg.norm(u.values))
    nv = float(np.linalg.norm(v.values))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity undefined for zero vectors")
    return float(np.dot(u.values, v.values) / (nu * nv))


def score_candidates(backend, tracked_patch: np.ndarray,
                     tracked_box: tuple[int, int, int, int],
                     candidate_patches: Sequence[np.ndarray]) -> list[float]:
    """Cosine similarity of the tracked cell's embedding against each candidate.

    The tracked patch is embedded under its own mask's box; every candidate is
    embedded under a box of the same size centered in its patch, mirroring the
    assumption that the tracked cell keeps its size.
    """
    for p in candidate_patches:
        if p.shape != tracked_patch.shape:
            raise TrackingError("candidate patches must match the tracked patch shape")
    if not candidate_patches:
        return []
    _, tracked_feat = backend.embed(tracked_patch, tracked_box)
    h = tracked_box[2] - tracked_box[0]
    w = tracked_box[3] - tracked_box[1]
    ph, pw = tracked_patch.shape
    cy, cx = ph // 2, pw // 2
    centered = (max(cy - h // 2, 0), max(cx - w // 2, 0),
                min(cy - h // 2 + h, ph - 1), min(cx - w // 2 + w, pw - 1))
    scores = []
    for patch in candidate_patches:
        _, feat = backend.embed(patch, centered)
        scores.append(cosine_similarity(tracked_feat, feat))
    return scores


def decide_link(scores: Sequence[float], cfg: TrackerConfig) -> LinkDecision:
    """Threshold-then-gap rule: link on a confident match, divide when the two
    best scores are close, otherwise report the cell missing."""
    if not scores:
        return LinkDecision.missing()
    arr = np.asarray(scores, dtype=float)
    best = int(np.argmax(arr))  # ties resolve to the lower index
    if arr[best] >= cfg.s_link:
        return LinkDecision.link(best)
    if len(arr) >= 2:
        order = sorted(range(len(arr)), key=lambda k: (-arr[k], k))
        top1, top2 = order[0], order[1]
        if arr[top1] - arr[top2] < cfg.delta_mitosis:
            return LinkDecision.divide(top1, top2)
    return LinkDecision.missing()


@dataclass(frozen=True)
class ClaimProposal:
    lineage: int
    candidates: tuple[int, ...]   # global candidate ids (indices into the frame's centers)
    scores: tuple[float, ...]


def resolve_claims(proposals: Sequence[ClaimProposal], cfg: TrackerConfig
                   ) -> dict[int, LinkDecision]:
    """Assign each candidate to at most one lineage.

    Synchronous rounds: every lineage re-decides over its still-available
    candidates; on a contested candidate the higher similarity wins (ties to
    the lower lineage id) and losers drop that candidate. Rounds repeat until
    stable, so the outcome is independent of proposal order. Returned decision
    indices address each proposal's original candidate tuple.
    """
    by_lineage = {p.lineage: p for p in proposals}
    if len(by_lineage) != len(proposals):
        raise TrackingError("duplicate lineage in proposals")
    available: dict[int, list[int]] = {p.lineage: list(range(len(p.candidates)))
                                       for p in proposals}
    max_rounds = sum(len(p.candidates) for p in proposals) + 1
    decisions: dict[int, LinkDecision] = {}
    for _ in range(max_rounds):
        decisions = {}
        claims: dict[int, list[tuple[float, int]]] = {}
        for lid in sorted(by_lineage):
            p = by_lineage[lid]
            avail = available[lid]
            local = decide_link([p.scores[i] for i in avail], cfg)
            if local.kind == "link":
                i = avail[local.i]
                decisions[lid] = LinkDecision.link(i)
                claims.setdefault(p.candidates[i], []).append((p.scores[i], lid))
            elif local.kind == "divide":
                i, j = avail[local.i], avail[local.j]
                decisions[lid] = LinkDecision.divide(i, j)
                for k in (i, j):
                    claims.setdefault(p.candidates[k], []).append((p.scores[k], lid))
            else:
                decisions[lid] = LinkDecision.missing()
        conflicts = {c: lst for c, lst in claims.items() if len(lst) > 1}
        if not conflicts:
            return decisions
        for cand in sorted(conflicts):
            lst = conflicts[cand]
            win_score, win_lid = max(lst, key=lambda sl: (sl[0], -sl[1]))
            for _, lid in lst:
                if lid == win_lid:
                    continue
                p = by_lineage[lid]
                available[lid] = [i for i in available[lid] if p.candidates[i] != cand]
    return decisions


def recover_missing(v_t: Volume, v_next: Volume, tracked: InstanceMask,
                    backend, link_cfg: LinkConfig, existing_next: DetectionSet,
                    rng_seed: int) -> Optional[tuple[tuple[float, ...], InstanceMask]]:
    """Predict a missed cell's next position by forward patch propagation.

    Returns (new 3D center, predicted plane mask) when the prediction is valid
    and unclaimed, otherwise None (the lineage then terminates).
    """
    z_ref = select_reference_slice(tracked) if tracked.ndim == 3 else None
    m2 = tracked if z_ref is None else tracked.slice_z(z_ref)
    pred = propagate_step(v_t, v_next, m2, link_cfg, backend, rng_seed, z=z_ref)
    plane_shape = v_t.shape[-2:]
    cand = slice_detections(existing_next, z_ref)
    decision = classify_prediction(pred, m2, cand, plane_shape, link_cfg)
    if decision.kind != "recovered":
        return None
    cy, cx = pred.centroid
    center = (float(z_ref), cy, cx) if z_ref is not None else (cy, cx)
    return center, pred


def detect_centers(volume: Volume, min_sigma: float, max_sigma: float,
                   threshold: float) -> list[tuple[float, ...]]:
    """Laplacian-of-Gaussian blob maxima, deduplicated within min_sigma."""
    if min_sigma <= 0 or max_sigma <= 0 or min_sigma >= max_sigma:
        raise TrackingError("need 0 < min_sigma < max_sigma")
    data = np.asarray(volume.data, dtype=np.float64)
    if data.dtype != np.float64 or data.max() > 1.0:
        peak = float(data.max())
        if peak > 0:
            data = data / peak
    blobs = blob_log(data, min_sigma=min_sigma, max_sigma=max_sigma, threshold=threshold)
    if len(blobs) == 0:
        return []
    coords = blobs[:, :-1]
    values = data[tuple(np.round(coords).astype(int).T)]
    order = np.lexsort(tuple(coords[:, k] for k in reversed(range(coords.shape[1])))
                       + (-values,))
    kept: list[np.ndarray] = []
    for idx in order:
        c = coords[idx]
        if all(np.linalg.norm(c - k) > min_sigma for k in kept):
            kept.append(c)
    kept.sort(key=lambda c: tuple(c))
    return [tuple(float(v) for v in c) for c in kept]


@dataclass
class _Lane:
    id: int
    t_start: int
    t_end: int
    refs: list[tuple[int, int]]
    parent: Optional[int] = None
    open: bool = True


def _crop_cube(volume: Volume, center: Sequence[float], half: int
               ) -> tuple[np.ndarray, tuple[int, ...]]:
    shape = volume.shape
    lo = [max(int(round(c)) - half, 0) for c in center]
    hi = [min(int(round(c)) + half, s) for c, s in zip(center, shape)]
    lo = [min(l, h - 1) for l, h in zip(lo, hi)]
    sl = tuple(slice(l, h) for l, h in zip(lo, hi))
    return volume.data[sl], tuple(lo)


def _default_tau(seed_masks: dict[int, InstanceMask]) -> float:
    diams = []
    for m in seed_masks.values():
        m2 = m.slice_z(select_reference_slice(m)) if m.ndim == 3 else m
        diams.append(2.0 * np.sqrt(m2.area / np.pi))
    return 2.0 * float(np.median(diams))


def forward_track_pass(volumes: Sequence[Volume], centers: Sequence[Sequence[tuple[float, ...]]],
                       seeds: Sequence[tuple[tuple[float, ...], Optional[InstanceMask]]],
                       backend, cfg: TrackerConfig, *, workers: int = 1, seed: int = 0,
                       progress: Optional[Callable[[int, int], None]] = None
                       ) -> tuple[LineageForest, list[DetectionSet]]:
    """Track the seeded cells forward through every frame pair.

    Mask labels equal lineage ids in every frame. Detector centers that no
    lineage claims are discarded. Raises TrackingError naming (lineage, t) on
    backend failure.
    """
    T = len(volumes)
    if T == 0:
        return LineageForest({}), []
    if len(centers) != T:
        raise TrackingError("one center list per frame required")
    if volumes[0].ndim != 3:
        raise TrackingError("forward tracking expects 3D volumes")
    if not seeds:
        raise TrackingError("at least one seed required")
    plane_shape = volumes[0].shape[1:]

    d = cfg.d
    bootstrap_half = (d or 16)
    lanes: dict[int, _Lane] = {}
    frame_masks: dict[int, InstanceMask] = {}
    occupied: list[np.ndarray] = []
    for lid, (center, mask) in enumerate(seeds, start=1):
        if mask is None:
            mask = _segment_at(volumes[0], center, bootstrap_half, backend, occupied,
                               lid, t=0)
            if mask is None:
                raise TrackingError(f"seed {lid} produced an empty mask at t=0")
        else:
            mask = mask.with_label(lid).at_frame(0)
        frame_masks[lid] = mask
        occupied.append(mask._keys)
        lanes[lid] = _Lane(lid, 0, 0, [(0, lid)])
    dsets: list[DetectionSet] = [DetectionSet(0, frame_masks)]
    next_id = len(seeds) + 1

    if d is None:
        d = default_patch_side(dsets[0], volumes[0].shape)
    tau = cfg.tau if cfg.tau is not None else _default_tau(dsets[0].masks)
    if cfg.z_weight is not None:
        z_weight = cfg.z_weight
    else:
        sp = volumes[0].spacing
        z_weight = min(1.0, sp[1] / sp[0]) if sp and sp[0] else 1.0
    link_cfg = LinkConfig(d=d, theta_small=cfg.theta_small,
                          theta_conflict=cfg.theta_conflict)

    for t in range(T - 1):
        active = sorted(lid for lid, lane in lanes.items() if lane.open and lane.t_end == t)

        def propose(lid: int) -> ClaimProposal:
            mask = dsets[t].masks[lid]
            z_ref = select_reference_slice(mask)
            m2 = mask.slice_z(z_ref)
            cand_ids = find_candidates(mask.centroid, centers[t + 1], tau, z_weight)
            if not cand_ids:
                return ClaimProposal(lid, (), ())
            cy, cx = (int(round(v)) for v in m2.centroid)
            try:
                tracked_patch, spec = extract_patch(volumes[t], (cy, cx), d, z=z_ref)
                y0, x0, y1, x1 = m2.bbox
                (by0, bx0), (by1, bx1) = spec.to_patch([(y0, x0)])[0], spec.to_patch([(y1, x1)])[0]
                box = (int(max(by0, 0)), int(max(bx0, 0)),
                       int(min(by1, d - 1)), int(min(bx1, d - 1)))
                patches = []
                for ci in cand_ids:
                    cz, cyy, cxx = centers[t + 1][ci]
                    zi = int(np.clip(round(cz), 0, volumes[t + 1].shape[0] - 1))
                    patch, _ = extract_patch(volumes[t + 1], (int(round(cyy)), int(round(cxx))),
                                             d, z=zi)
                    patches.append(patch)
                scores = score_candidates(backend, tracked_patch, box, patches)
            except Exception as exc:
                raise TrackingError(f"backend failed for lineage {lid} at t={t}: {exc}") from exc
            return ClaimProposal(lid, tuple(cand_ids), tuple(scores))

        if workers > 1 and len(active) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                props = list(pool.map(propose, active))
        else:
            props = [propose(lid) for lid in active]
        proposals = {p.lineage: p for p in props}
        resolved = resolve_claims(props, cfg)

        committed: dict[int, InstanceMask] = {}
        occupied = []

        def commit_mask(lid: int, center: Sequence[float]) -> Optional[InstanceMask]:
            mask = _segment_at(volumes[t + 1], center, d, backend, occupied, lid, t + 1)
            if mask is None:
                return None
            committed[lid] = mask
            occupied.append(mask._keys)
            return mask

        for lid in active:
            decision = resolved[lid]
            p = proposals[lid]
            lane = lanes[lid]
            if decision.kind == "link":
                center = centers[t + 1][p.candidates[decision.i]]
                if commit_mask(lid, center) is not None:
                    lane.t_end = t + 1
                    lane.refs.append((t + 1, lid))
                else:
                    lane.open = False
            elif decision.kind == "divide":
                lane.open = False
                order = sorted((decision.i, decision.j),
                               key=lambda k: (-p.scores[k], k))
                for k in order:
                    center = centers[t + 1][p.candidates[k]]
                    child_id = next_id
                    next_id += 1
                    child_mask = _segment_at(volumes[t + 1], center, d, backend,
                                             occupied, child_id, t + 1)
                    if child_mask is None:
                        next_id -= 1
                        continue
                    committed[child_id] = child_mask
                    occupied.append(child_mask._keys)
                    lanes[child_id] = _Lane(child_id, t + 1, t + 1, [(t + 1, child_id)],
                                            parent=lid)
            else:
                tracked = dsets[t].masks[lid]
                existing = DetectionSet(t + 1, dict(committed))
                try:
                    rec = recover_missing(volumes[t], volumes[t + 1], tracked, backend,
                                          link_cfg, existing, derive_prompt_seed(seed, lid, t))
                except TrackingError:
                    raise
                except Exception as exc:
                    raise TrackingError(f"backend failed for lineage {lid} at t={t}: {exc}") from exc
                if rec is None:
                    lane.open = False
                    continue
                center, _ = rec
                if commit_mask(lid, center) is not None:
                    lane.t_end = t + 1
                    lane.refs.append((t + 1, lid))
                else:
                    lane.open = False

        dsets.append(DetectionSet(t + 1, committed))
        if progress is not None:
            progress(t + 1, sum(1 for lane in lanes.values() if lane.open))

    forest = LineageForest({lid: Tracklet(lid, lane.t_start, lane.t_end,
                                          tuple(lane.refs), lane.parent)
                            for lid, lane in lanes.items()})
    issues = forest_validate(forest, dsets)
    if issues:
        raise TrackingError(f"internal invariant violation: {issues[:3]}")
    return forest, dsets


def _segment_at(volume: Volume, center: Sequence[float], d: int, backend,
                occupied: list[np.ndarray], label: int, t: int
                ) -> Optional[InstanceMask]:
    """Click-segment a 3D mask at a center; voxels already claimed this frame
    are stripped so per-frame masks stay disjoint."""
    cube, origin = _crop_cube(volume, center, d)
    click = tuple(int(np.clip(round(c) - o, 0, s - 1))
                  for c, o, s in zip(center, origin, cube.shape))
    local = backend.segment3d(cube, click)
    if not local.any():
        return None
    vox = np.argwhere(local) + np.asarray(origin, dtype=np.int64)
    mask = InstanceMask.from_voxels(label, t, vox)
    if occupied:
        used = np.concatenate(occupied)
        keep = ~np.isin(mask._keys, used)
        if not keep.any():
            return None
        if not keep.all():
            mask = InstanceMask.from_voxels(label, t, mask.voxel_array()[keep])
    return mask
