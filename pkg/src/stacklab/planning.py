"""Placement planning on a single-layer structure.

Find the top-most horizontal boundary of the mask, lay out 9 horizontal and
5 vertical slots on it, ask a classifier which composites look stable, and
score the choice against simulated ground truth with a noisy executor.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imaging
from .geometry import Cuboid, Pose, boxes_interpenetrate, quat_from_axis_angle, world_aabb
from .physics import SimConfig, simulate
from .scenegen import CANONICAL_FULL_EXTENTS, Scene, SceneConfig, derive_seed, orient
from .stability import TAU, label_stability

HORIZONTAL, VERTICAL = "Horizontal", "Vertical"
SLOTS = {HORIZONTAL: 9, VERTICAL: 5}
MIN_RUN_FRACTION = 0.1
NOISE_XY = 0.1
NOISE_YAW_DEG = 2.0
DEFAULT_ATTEMPTS = 3


class NoSurface(ValueError):
    pass


class SurfaceTooNarrow(ValueError):
    pass


@dataclass(frozen=True)
class Surface:
    """A horizontal foreground boundary run: columns [col_start, col_end) of `row`."""
    row: int
    col_start: int
    col_end: int

    @property
    def width(self) -> int:
        return self.col_end - self.col_start


def _runs(flags):
    """Maximal runs of True as (start, end) half-open pairs."""
    padded = np.concatenate([[False], flags, [False]]).astype(np.int8)
    d = np.diff(padded)
    return list(zip(np.nonzero(d == 1)[0], np.nonzero(d == -1)[0]))


def detect_stacking_surface(mask, min_run_fraction: float = MIN_RUN_FRACTION) -> Surface:
    """Highest row whose upper-boundary pixels form a run of at least the minimum width.

    A boundary pixel is foreground with background (or the image edge)
    directly above.  The widest qualifying run of that row is returned,
    the leftmost on ties.
    """
    bits = np.asarray(getattr(mask, "bits", mask)).astype(bool)
    if bits.ndim != 2:
        raise ValueError("mask must be 2-D")
    min_run = max(1, math.ceil(min_run_fraction * bits.shape[1]))
    above = np.vstack([np.zeros((1, bits.shape[1]), bool), bits[:-1]])
    boundary = bits & ~above
    for row in range(bits.shape[0]):
        runs = [(s, e) for s, e in _runs(boundary[row]) if e - s >= min_run]
        if runs:
            s, e = max(runs, key=lambda r: (r[1] - r[0], -r[0]))
            return Surface(int(row), int(s), int(e))
    raise NoSurface(f"no horizontal boundary run of at least {min_run} pixels")


@dataclass(frozen=True)
class WorldSurface:
    z: float
    x_min: float
    x_max: float

    @property
    def width(self) -> float:
        return self.x_max - self.x_min


def surface_in_world(surface: Surface, camera: imaging.Camera, scene: Scene | None = None) -> WorldSurface:
    """World plane of a pixel run; with a scene, snapped to the top faces underneath it."""
    x0, z = camera.pixel_to_world(surface.col_start, surface.row)
    x1, _ = camera.pixel_to_world(surface.col_end, surface.row)
    if scene is None:
        return WorldSurface(float(z), float(x0), float(x1))
    sx, sz = camera.pixel_size
    tops = []
    for c, p in scene.blocks:
        box = world_aabb(c, p)
        if abs(box.hi[2] - z) <= 1.5 * sz and box.hi[0] > x0 and box.lo[0] < x1:
            tops.append(box)
    if not tops:
        return WorldSurface(float(z), float(x0), float(x1))
    z_top = max(b.hi[2] for b in tops)
    tops = [b for b in tops if abs(b.hi[2] - z_top) <= 1e-6]
    lo = max(min(b.lo[0] for b in tops), x0 - sx)
    hi = min(max(b.hi[0] for b in tops), x1 + sx)
    return WorldSurface(float(z_top), float(lo), float(hi))


def canonical_block(orientation: str) -> Cuboid:
    base = Cuboid.from_full_extents(*CANONICAL_FULL_EXTENTS)
    return orient(base, "lying-x" if orientation == HORIZONTAL else "upright")


@dataclass
class Candidate:
    orientation: str
    slot_index: int
    shape: Cuboid
    pose: Pose
    scene: Scene  # composite: given structure plus the placed block
    mask: imaging.Mask = None  # composite at training resolution
    collides: bool = False

    @property
    def key(self) -> tuple:
        return self.orientation, self.slot_index


@dataclass
class CandidateSet:
    candidates: list
    surface: WorldSurface
    deficient: dict = field(default_factory=dict)  # orientation -> reason, for orientations with no slots

    def __len__(self):
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    def __getitem__(self, k):
        return self.candidates[k]


def slot_centers(surface: WorldSurface, half_width: float, count: int) -> np.ndarray:
    lo, hi = surface.x_min + half_width, surface.x_max - half_width
    if hi < lo - 1e-9:
        raise SurfaceTooNarrow(f"surface {surface.width:.3f} wide cannot host a block {2 * half_width:.3f} wide")
    if hi < lo:
        hi = lo
    return np.linspace(lo, hi, count)


def generate_candidates(scene: Scene, surface: Surface | None = None, camera: imaging.Camera | None = None,
                        resolution: int = imaging.TRAIN_RES) -> CandidateSet:
    """9 horizontal then 5 vertical placements on the stacking surface of a scene.

    An orientation whose block does not fit contributes no candidates and is
    listed in `deficient`; the count is never silently different otherwise.
    """
    if camera is None:
        camera = imaging.frame_camera(scene, (imaging.ARCHIVE_RES, imaging.ARCHIVE_RES))
    if surface is None:
        surface = detect_stacking_surface(imaging.render_mask(scene, camera))
    ws = surface_in_world(surface, camera, scene)
    out, deficient = [], {}
    for orientation in (HORIZONTAL, VERTICAL):
        shape = canonical_block(orientation)
        hx, hz = shape.half_extents[0], shape.half_extents[2]
        try:
            xs = slot_centers(ws, hx, SLOTS[orientation])
        except SurfaceTooNarrow as exc:
            deficient[orientation] = str(exc)
            continue
        for k, x in enumerate(xs):
            pose = Pose([float(x), 0.0, ws.z + hz])
            composite = scene.with_blocks(list(scene.blocks) + [(shape, pose)])
            collides = any(boxes_interpenetrate(shape, pose, c, p) for c, p in scene.blocks)
            out.append(Candidate(orientation, k, shape, pose, composite,
                                 imaging.training_mask(composite, resolution), collides))
    return CandidateSet(out, ws, deficient)


def predict_candidates(model, candidates) -> list:
    """True where the classifier calls the composite stable."""
    from .learning import STABLE, predict

    if len(candidates) == 0:
        return []
    masks = np.stack([c.mask.bits for c in candidates]).astype(float)
    _, cls = predict(model, masks)
    return [bool(c == STABLE) for c in np.atleast_1d(cls)]


def ground_truth_candidates(scene: Scene, candidates, sim: SimConfig = SimConfig(), tau: float = TAU) -> list:
    """Simulated stability of every composite (all blocks, placed one included)."""
    out = []
    for c in candidates:
        if c.collides:
            out.append(False)
            continue
        out.append(not label_stability(simulate(c.scene, sim, record=False), tau).unstable)
    return out


class SimExecutor:
    """Places the candidate block with uniform pose noise and simulates the outcome.

    Call as executor(k, attempt) for candidate k; an attempt succeeds when the
    perturbed composite does not interpenetrate and stays stable.
    """

    def __init__(self, scene: Scene, candidates, noise_xy: float = NOISE_XY, noise_yaw_deg: float = NOISE_YAW_DEG,
                 sim: SimConfig = SimConfig(), tau: float = TAU, seed: int = 0):
        self.scene = scene
        self.candidates = list(candidates)
        self.noise_xy = float(noise_xy)
        self.noise_yaw = math.radians(noise_yaw_deg)
        self.sim = sim
        self.tau = tau
        self.seed = int(seed)

    def perturbed_pose(self, k: int, attempt: int) -> Pose:
        c = self.candidates[k]
        rng = np.random.default_rng(derive_seed(self.seed, c.orientation, c.slot_index, attempt))
        dx, dy = rng.uniform(-self.noise_xy, self.noise_xy, 2) if self.noise_xy > 0 else (0.0, 0.0)
        yaw = rng.uniform(-self.noise_yaw, self.noise_yaw) if self.noise_yaw > 0 else 0.0
        return Pose(c.pose.position + np.array([dx, dy, 0.0]), quat_from_axis_angle([0.0, 0.0, 1.0], yaw))

    def __call__(self, k: int, attempt: int) -> bool:
        shape = self.candidates[k].shape
        pose = self.perturbed_pose(k, attempt)
        if any(boxes_interpenetrate(shape, pose, c, p) for c, p in self.scene.blocks):
            return False
        composite = self.scene.with_blocks(list(self.scene.blocks) + [(shape, pose)])
        return not label_stability(simulate(composite, self.sim, record=False), self.tau).unstable


@dataclass
class PlacementReport:
    predicted: list
    ground_truth: list
    attempted: list
    attempts_used: list
    success: list
    orientations: list = field(default_factory=list)

    def _sel(self, orientation):
        return [i for i in range(len(self.predicted))
                if orientation is None or self.orientations[i] == orientation]

    def prediction_accuracy(self, orientation: str | None = None) -> float:
        idx = self._sel(orientation)
        if not idx:
            return float("nan")
        return round(100.0 * sum(self.predicted[i] == self.ground_truth[i] for i in idx) / len(idx), 1)

    def counts(self, orientation: str | None = None) -> tuple:
        """(successful placements among ground-truth-stable candidates, ground-truth-stable candidates)."""
        idx = self._sel(orientation)
        stable = [i for i in idx if self.ground_truth[i]]
        return sum(self.success[i] for i in stable), len(stable)

    def success_rate(self, orientation: str | None = None) -> float:
        ok, total = self.counts(orientation)
        return round(100.0 * ok / total, 1) if total else 0.0

    def all_rejected(self, orientation: str | None = None) -> bool:
        return not any(self.predicted[i] for i in self._sel(orientation))

    def false_positive_attempts(self, orientation: str | None = None) -> int:
        return sum(self.attempts_used[i] for i in self._sel(orientation)
                   if self.predicted[i] and not self.ground_truth[i])

    def total_attempts(self, orientation: str | None = None) -> int:
        return sum(self.attempts_used[i] for i in self._sel(orientation))

    def manipulation_cell(self, orientation: str | None = None) -> str:
        ok, total = self.counts(orientation)
        return f"{self.success_rate(orientation):.1f}({ok}/{total})"


def manipulation_report(predicted, ground_truth, executor, attempts: int = DEFAULT_ATTEMPTS,
                        orientations=None) -> PlacementReport:
    """Try each predicted-stable candidate up to `attempts` times; stop at the first success."""
    predicted = [bool(p) for p in predicted]
    ground_truth = [bool(g) for g in ground_truth]
    if len(predicted) != len(ground_truth):
        raise ValueError("predicted and ground truth lists differ in length")
    if attempts < 1:
        raise ValueError("attempts must be >= 1")
    attempted, used, success = [], [], []
    for k, p in enumerate(predicted):
        n, ok = 0, False
        if p:
            while n < attempts and not ok:
                ok = bool(executor(k, n))
                n += 1
        attempted.append(p)
        used.append(n)
        success.append(ok)
    if orientations is None:
        orientations = [""] * len(predicted)
    return PlacementReport(predicted, ground_truth, attempted, used, success, list(orientations))


# -- scripted single-layer test structures -------------------------------------

def _block(orientation: str, x: float, z_bottom: float):
    shape = orient(Cuboid.from_full_extents(*CANONICAL_FULL_EXTENTS), orientation)
    return shape, Pose([x, 0.0, z_bottom + shape.half_extents[2]])


_SCRIPTS = (
    # (orientation, x, bottom z) per block, bottom-up
    (("lying-x", 0.0, 0.0), ("lying-x", 0.0, 1.0), ("upright", 0.0, 2.0), ("lying-x", 0.35, 5.0)),
    (("lying-x", -1.5, 0.0), ("lying-x", 1.5, 0.0), ("upright", 0.0, 1.0), ("lying-x", 0.0, 4.0)),
    (("lying-x", 0.0, 0.0), ("lying-x", 0.5, 1.0), ("lying-x", 1.0, 2.0), ("lying-x", 1.5, 3.0)),
    (("lying-x", 0.0, 0.0), ("upright", -1.0, 1.0), ("upright", 1.0, 1.0), ("lying-x", 0.0, 4.0),
     ("upright", 0.0, 5.0), ("lying-x", -0.4, 8.0)),
    (("lying-x", -1.5, 0.0), ("lying-x", 1.5, 0.0), ("upright", -1.5, 1.0), ("upright", 1.5, 1.0),
     ("lying-x", -1.5, 4.0), ("lying-x", 1.5, 4.0)),
    (("lying-x", 0.0, 0.0), ("upright", -1.0, 1.0), ("upright", 1.0, 1.0), ("lying-x", 0.5, 4.0)),
)


def scripted_scenes() -> list:
    """Six hand-built single-layer structures, each topped by a surface at least 3 wide."""
    scenes = []
    for i, script in enumerate(_SCRIPTS):
        blocks = [_block(*b) for b in script]
        scenes.append(Scene(blocks, SceneConfig(len(blocks), "2D", "Uni"), scene_index=i))
    return scenes


# -- mask-only input --------------------------------------------------------------

def mask_candidates(mask, units_per_pixel: float, resolution: int = imaging.TRAIN_RES,
                    min_run_fraction: float = MIN_RUN_FRACTION) -> list:
    """Composite training masks for a structure known only as a mask.

    The placed block is painted in pixel space on top of the detected surface
    and the composite is re-framed like a rendered scene.  Returns
    (orientation, slot_index, Mask) triples.
    """
    bits = np.asarray(getattr(mask, "bits", mask)).astype(bool)
    surface = detect_stacking_surface(bits, min_run_fraction)
    out = []
    for orientation in (HORIZONTAL, VERTICAL):
        shape = canonical_block(orientation)
        w = 2 * shape.half_extents[0] / units_per_pixel
        h = 2 * shape.half_extents[2] / units_per_pixel
        ws = WorldSurface(0.0, float(surface.col_start), float(surface.col_end))
        try:
            xs = slot_centers(ws, w / 2, SLOTS[orientation])
        except SurfaceTooNarrow:
            continue
        pad = int(math.ceil(h)) + 1
        for k, xc in enumerate(xs):
            canvas = np.vstack([np.zeros((pad, bits.shape[1]), bool), bits])
            # pixel-center test against the painted rectangle
            cols = np.arange(bits.shape[1]) + 0.5
            rows = np.arange(canvas.shape[0]) + 0.5
            top = pad + surface.row - h
            painted = ((rows >= top) & (rows <= pad + surface.row))[:, None] & \
                      ((cols >= xc - w / 2) & (cols <= xc + w / 2))[None, :]
            out.append((orientation, k, _reframe(canvas | painted, resolution)))
    return out


def _reframe(bits, resolution: int) -> imaging.Mask:
    """Crop to the foreground box plus margin, square it, resample like the renderer."""
    rows = np.nonzero(bits.any(axis=1))[0]
    cols = np.nonzero(bits.any(axis=0))[0]
    r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
    extent = max(r1 - r0, c1 - c0) * (1 + 2 * imaging.FRAME_MARGIN)
    cr, cc = (r0 + r1) / 2, (c0 + c1) / 2
    n = imaging.ARCHIVE_RES
    centers = (np.arange(n) + 0.5) / n * extent - extent / 2
    ri = np.floor(cr + centers).astype(int)
    ci = np.floor(cc + centers).astype(int)
    valid_r = (ri >= 0) & (ri < bits.shape[0])
    valid_c = (ci >= 0) & (ci < bits.shape[1])
    big = np.zeros((n, n), bool)
    big[np.ix_(valid_r, valid_c)] = bits[np.ix_(ri[valid_r], ci[valid_c])]
    return imaging.downsample_majority(imaging.Mask(big.astype(np.uint8)), n // resolution)


# -- reporting -------------------------------------------------------------------

CANDIDATE_FIELDS = ("scene", "orientation", "slot", "x", "z", "predicted_stable", "ground_truth_stable",
                    "attempts", "success")
SUMMARY_FIELDS = ("scene", "orientation", "candidates", "pred_accuracy", "manipulation", "all_rejected",
                  "false_positive_attempts")


def candidate_rows(scene_name, candidates, report: PlacementReport) -> list:
    rows = []
    for i, c in enumerate(candidates):
        rows.append({"scene": scene_name, "orientation": c.orientation, "slot": c.slot_index,
                     "x": f"{c.pose.position[0]:.6f}", "z": f"{c.pose.position[2]:.6f}",
                     "predicted_stable": int(report.predicted[i]),
                     "ground_truth_stable": int(report.ground_truth[i]),
                     "attempts": report.attempts_used[i], "success": int(report.success[i])})
    return rows


def summary_rows(scene_name, report: PlacementReport) -> list:
    rows = []
    for o in (HORIZONTAL, VERTICAL, None):
        idx = report._sel(o)
        rows.append({"scene": scene_name, "orientation": o or "All", "candidates": len(idx),
                     "pred_accuracy": f"{report.prediction_accuracy(o):.1f}" if idx else "",
                     "manipulation": report.manipulation_cell(o),
                     "all_rejected": int(report.all_rejected(o)),
                     "false_positive_attempts": report.false_positive_attempts(o)})
    return rows


def write_csv(path, rows, fields) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
