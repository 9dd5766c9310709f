"""Synthetic time-lapse generator with exact ground truth.

Cells are Gaussian blobs (2D) or ellipsoids (3D) with per-cell intensity and
size, random-walk motion, and scheduled divisions that replace a parent with
two half-intensity children. Ground-truth masks follow the half-maximum
convention (a voxel belongs to a cell where its noiseless contribution is at
least half the cell's peak); contested voxels go to the stronger cell. The
same seed always reproduces bit-identical volumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import DetectionSet, InstanceMask, LineageForest, Tracklet, Volume

HALF_MAX_RADIUS = math.sqrt(2.0 * math.log(2.0))  # in units of sigma


class SynthError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthScenario:
    shape: tuple[int, ...]            # (h, w) or (z, y, x)
    n_frames: int
    n_cells: int
    divisions: tuple[tuple[int, int], ...] = ()   # (cell id, frame of first child)
    motion_sigma: float = 0.3
    sigma_range: tuple[float, float] = (2.0, 2.5)  # xy Gaussian sigma
    z_sigma_ratio: float = 0.55
    intensity_range: tuple[float, float] = (0.8, 0.95)
    background: float = 0.08
    noise_sigma: float = 0.01
    min_separation: float = 15.0
    child_offset: float = 3.2
    child_sigma_factor: float = 0.75
    center_dropout: float = 0.0       # detector misses, never at frame 0
    center_spurious: float = 0.0      # fake detector centers, never at frame 0
    mask_dropout: float = 0.0         # detection masks deleted, never at the last frame
    seed: int = 0

    def __post_init__(self):
        if len(self.shape) not in (2, 3):
            raise SynthError("shape must be 2D or 3D")
        if self.n_frames < 1 or self.n_cells < 1:
            raise SynthError("need at least one frame and one cell")
        for cell, t in self.divisions:
            if not 1 <= t <= self.n_frames - 1:
                raise SynthError(f"division of cell {cell} at t={t} outside [1, {self.n_frames - 1}]")

    @property
    def ndim(self) -> int:
        return len(self.shape)


@dataclass
class _Cell:
    id: int
    birth: int
    sigma: np.ndarray          # per-axis
    amplitude: float
    parent: Optional[int] = None
    death: Optional[int] = None          # last frame + 1
    positions: dict[int, np.ndarray] = field(default_factory=dict)

    def alive_at(self, t: int) -> bool:
        return self.birth <= t and (self.death is None or t < self.death)


@dataclass(frozen=True)
class SynthResult:
    volumes: list[Volume]
    gt_dsets: list[DetectionSet]
    gt_forest: LineageForest
    centers: list[list[tuple[float, ...]]]        # exact per-frame cell centers
    det_dsets: list[DetectionSet]                 # detections after mask dropout
    det_centers: list[list[tuple[float, ...]]]    # centers after dropout + spurious


def _margins(s: SynthScenario) -> np.ndarray:
    r_xy = HALF_MAX_RADIUS * s.sigma_range[1] + 3.0
    if s.ndim == 2:
        return np.array([r_xy, r_xy])
    r_z = HALF_MAX_RADIUS * s.sigma_range[1] * s.z_sigma_ratio + 2.0
    return np.array([r_z, r_xy, r_xy])


def _place_initial(s: SynthScenario, rng: np.random.Generator,
                   margins: np.ndarray) -> list[np.ndarray]:
    lo = margins
    hi = np.asarray(s.shape, dtype=float) - 1.0 - margins
    if (hi <= lo).any():
        raise SynthError(f"shape {s.shape} too small for margins {margins}")
    placed: list[np.ndarray] = []
    for _ in range(s.n_cells):
        for _ in range(1000):
            pos = lo + rng.random(s.ndim) * (hi - lo)
            if all(np.linalg.norm(pos - p) >= s.min_separation for p in placed):
                placed.append(pos)
                break
        else:
            raise SynthError("could not place cells without overlap after 1000 samples")
    return placed


def _clamp(pos: np.ndarray, s: SynthScenario, margins: np.ndarray) -> np.ndarray:
    hi = np.asarray(s.shape, dtype=float) - 1.0 - margins
    return np.minimum(np.maximum(pos, margins), hi)


def _simulate(s: SynthScenario, rng: np.random.Generator,
              margins: np.ndarray) -> list[_Cell]:
    initial = _place_initial(s, rng, margins)
    cells: list[_Cell] = []
    for i, pos in enumerate(initial, start=1):
        sigma_xy = rng.uniform(*s.sigma_range)
        sig = np.array([sigma_xy] * 2 if s.ndim == 2
                       else [sigma_xy * s.z_sigma_ratio, sigma_xy, sigma_xy])
        amp = rng.uniform(*s.intensity_range)
        cell = _Cell(id=i, birth=0, sigma=sig, amplitude=amp)
        cell.positions[0] = pos
        cells.append(cell)

    by_frame: dict[int, list[int]] = {}
    for cell_id, t in s.divisions:
        by_frame.setdefault(t, []).append(cell_id)

    next_id = s.n_cells + 1
    for t in range(1, s.n_frames):
        dividing = sorted(by_frame.get(t, []))
        for cell in cells:
            if not cell.alive_at(t - 1) or (cell.death is not None and cell.death <= t):
                continue
            step = rng.normal(0.0, s.motion_sigma, size=s.ndim)
            new_pos = _clamp(cell.positions[t - 1] + step, s, margins)
            if cell.id in dividing:
                cell.death = t
                # Pick a direction whose offsets stay in bounds, so clamping
                # cannot squash the siblings together near a wall.
                direction = None
                for _ in range(36):
                    theta = rng.uniform(0.0, 2.0 * math.pi)
                    cand = np.array([math.sin(theta), math.cos(theta)])
                    if s.ndim == 3:
                        cand = np.array([0.0, cand[0], cand[1]])
                    ok = all((_clamp(new_pos + sign * s.child_offset * cand, s, margins)
                              == new_pos + sign * s.child_offset * cand).all()
                             for sign in (1.0, -1.0))
                    direction = cand
                    if ok:
                        break
                for sign in (1.0, -1.0):
                    child = _Cell(id=next_id, birth=t,
                                  sigma=cell.sigma * s.child_sigma_factor,
                                  amplitude=cell.amplitude / 2.0,
                                  parent=cell.id)
                    child.positions[t] = _clamp(new_pos + sign * s.child_offset * direction,
                                                s, margins)
                    cells.append(child)
                    next_id += 1
            else:
                cell.positions[t] = new_pos
        for cell_id in dividing:
            if not any(c.id == cell_id and c.death == t for c in cells):
                raise SynthError(f"division schedule references cell {cell_id} "
                                 f"which is not alive at t={t}")
    return cells


def _render_frame(s: SynthScenario, cells: list[_Cell], t: int,
                  rng: np.random.Generator) -> tuple[np.ndarray, DetectionSet]:
    shape = s.shape
    img = np.full(shape, s.background, dtype=np.float64)
    claim = np.zeros(shape, dtype=np.float64)
    owner = np.zeros(shape, dtype=np.int32)
    axes = [np.arange(n, dtype=np.float64) for n in shape]
    for cell in cells:
        if not cell.alive_at(t):
            continue
        pos = cell.positions[t]
        sl = tuple(slice(max(int(math.floor(p - 4 * sg)), 0),
                         min(int(math.ceil(p + 4 * sg)) + 1, n))
                   for p, sg, n in zip(pos, cell.sigma, shape))
        grids = np.meshgrid(*[axes[k][sl[k]] for k in range(s.ndim)], indexing="ij")
        q = sum(((g - p) / sg) ** 2 for g, p, sg in zip(grids, pos, cell.sigma))
        contrib = cell.amplitude * np.exp(-0.5 * q)
        img[sl] += contrib
        inside = contrib >= 0.5 * cell.amplitude
        better = inside & (contrib > claim[sl])
        owner_region = owner[sl]
        claim_region = claim[sl]
        owner_region[better] = cell.id
        claim_region[better] = contrib[better]
    noisy = img + rng.normal(0.0, s.noise_sigma, size=shape)
    arr = (np.clip(noisy, 0.0, 1.0) * 65535.0).round().astype(np.uint16)

    masks = {}
    for cell in cells:
        if not cell.alive_at(t):
            continue
        vox = np.argwhere(owner == cell.id)
        if len(vox) == 0:
            raise SynthError(f"cell {cell.id} fully occluded at t={t}; "
                             f"increase separation or reduce motion")
        masks[cell.id] = InstanceMask.from_voxels(cell.id, t, vox)
    return arr, DetectionSet(t, masks)


def synth_generate(s: SynthScenario) -> SynthResult:
    """Render a scenario into volumes, ground truth, and detector-style inputs."""
    rng = np.random.default_rng(s.seed)
    margins = _margins(s)
    cells = _simulate(s, rng, margins)

    volumes: list[Volume] = []
    gt_dsets: list[DetectionSet] = []
    centers: list[list[tuple[float, ...]]] = []
    for t in range(s.n_frames):
        arr, dset = _render_frame(s, cells, t, rng)
        volumes.append(Volume(arr, t))
        gt_dsets.append(dset)
        centers.append([tuple(float(v) for v in c.positions[t])
                        for c in cells if c.alive_at(t)])

    tracklets = {}
    for c in cells:
        t_end = (c.death - 1) if c.death is not None else s.n_frames - 1
        refs = tuple((t, c.id) for t in range(c.birth, t_end + 1))
        tracklets[c.id] = Tracklet(c.id, c.birth, t_end, refs, parent=c.parent)
    forest = LineageForest(tracklets)

    det_dsets = delete_masks(gt_dsets, s.mask_dropout,
                             rng) if s.mask_dropout > 0 else list(gt_dsets)
    det_centers = _perturb_centers(s, centers, rng, margins)
    return SynthResult(volumes, gt_dsets, forest, centers, det_dsets, det_centers)


def delete_masks(dsets: Sequence[DetectionSet], fraction: float,
                 rng: np.random.Generator,
                 protect: Optional[set[int]] = None) -> list[DetectionSet]:
    """Drop a random fraction of masks; the last frame stays intact (it seeds
    backward linking and stands in for the curated set)."""
    protect = protect if protect is not None else {len(dsets) - 1}
    candidates = [(d.t, label) for d in dsets for label in sorted(d.masks)
                  if d.t not in protect]
    k = int(round(fraction * len(candidates)))
    if k == 0:
        return list(dsets)
    drop_idx = rng.choice(len(candidates), size=k, replace=False)
    dropped = {candidates[i] for i in drop_idx}
    return [d.without([l for tt, l in dropped if tt == d.t]) for d in dsets]


def _perturb_centers(s: SynthScenario, centers: list[list[tuple[float, ...]]],
                     rng: np.random.Generator, margins: np.ndarray
                     ) -> list[list[tuple[float, ...]]]:
    """Detector-style center corruption: dropout plus spurious background points.
    Frame 0 is left intact (it stands in for the user-curated seed set)."""
    if s.center_dropout == 0 and s.center_spurious == 0:
        return [list(c) for c in centers]
    lo = margins
    hi = np.asarray(s.shape, dtype=float) - 1.0 - margins
    out: list[list[tuple[float, ...]]] = []
    for t, pts in enumerate(centers):
        if t == 0:
            out.append(list(pts))
            continue
        kept = [p for p in pts if rng.random() >= s.center_dropout]
        n_spur = int(round(s.center_spurious * len(pts)))
        for _ in range(n_spur):
            for _ in range(200):
                cand = lo + rng.random(s.ndim) * (hi - lo)
                if all(np.linalg.norm(cand - np.asarray(p)) >= s.min_separation / 2
                       for p in pts):
                    kept.append(tuple(float(v) for v in cand))
                    break
        out.append(kept)
    return out


PRESETS: dict[str, SynthScenario] = {
    "easy2d": SynthScenario(
        shape=(64, 64), n_frames=20, n_cells=3, divisions=((1, 10),),
        min_separation=18.0, seed=11),
    "accept2d": SynthScenario(
        shape=(64, 64), n_frames=30, n_cells=5, divisions=((1, 12), (3, 20)),
        sigma_range=(2.2, 2.6), motion_sigma=0.22, min_separation=17.0,
        child_offset=4.3, child_sigma_factor=0.66, mask_dropout=0.10, seed=2),
    "accept3d": SynthScenario(
        shape=(16, 128, 128), n_frames=20, n_cells=30,
        divisions=((1, 6), (2, 10), (3, 14)),
        sigma_range=(2.4, 3.2), intensity_range=(0.45, 1.0), min_separation=16.0,
        motion_sigma=0.2, child_offset=5.0, child_sigma_factor=0.62,
        center_dropout=0.05, center_spurious=0.05, seed=21),
    "tiny3d": SynthScenario(
        shape=(12, 48, 48), n_frames=6, n_cells=3, sigma_range=(2.2, 2.8),
        min_separation=14.0, seed=5),
}


def preset_scenario(name: str) -> SynthScenario:
    try:
        return PRESETS[name]
    except KeyError:
        raise SynthError(f"unknown preset {name!r}; available: {sorted(PRESETS)}") from None
