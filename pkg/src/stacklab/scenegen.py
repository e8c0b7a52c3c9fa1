"""Procedural tower scenes, built bottom-up without interpenetration.

Every block is axis-aligned at t=0: orientations are encoded by permuting
the half extents and keeping an identity quaternion, so world footprints
are exact.
"""
from __future__ import annotations

import itertools
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Cuboid, Pose, Rect2, footprint, rect_overlap, world_aabb

NUM_BLOCKS = (4, 6, 10, 14)
DEPTH_MODES = ("2D", "3D")
SIZE_MODES = ("Uni", "NonUni")

CANONICAL_FULL_EXTENTS = (1.0, 1.0, 3.0)
CONTACT_TOL = 1e-4

_MASK64 = (1 << 64) - 1


class GenerationFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class GenerationParams:
    """Declared constants of the generator (all recorded in the manifest)."""
    sigma: float = 0.1
    delta: float = 0.2
    min_overlap: float = 0.1
    max_attempts: int = 200
    # Expected number of unrestricted ("wide") placements per scene; the rest
    # keep the new block's center above its support face.
    wide_placements: float = 1.0
    # Non-wide placements keep the new center within this fraction of the
    # support's top-face half extents.
    safe_fraction: float = 0.25
    max_retries: int = 20

    def wide_probability(self, num_blocks: int) -> float:
        if num_blocks <= 1:
            return 0.0
        return min(1.0, self.wide_placements / (num_blocks - 1))

    def as_dict(self) -> dict:
        return {"sigma": self.sigma, "delta": self.delta, "min_overlap": self.min_overlap,
                "max_attempts": self.max_attempts, "wide_placements": self.wide_placements,
                "safe_fraction": self.safe_fraction,
                "max_retries": self.max_retries}


DEFAULT_PARAMS = GenerationParams()


@dataclass(frozen=True)
class SceneConfig:
    num_blocks: int
    depth_mode: str
    size_mode: str
    seed: int = 0

    def __post_init__(self):
        if self.num_blocks not in NUM_BLOCKS:
            raise ValueError(f"num_blocks must be one of {NUM_BLOCKS}")
        if self.depth_mode not in DEPTH_MODES:
            raise ValueError(f"depth_mode must be one of {DEPTH_MODES}")
        if self.size_mode not in SIZE_MODES:
            raise ValueError(f"size_mode must be one of {SIZE_MODES}")

    @property
    def group_id(self) -> str:
        return f"{self.num_blocks}B-{self.depth_mode}-{self.size_mode}"

    @classmethod
    def from_group_id(cls, group_id: str, seed: int = 0) -> "SceneConfig":
        try:
            nb, depth, size = group_id.split("-")
            return cls(int(nb.rstrip("B")), depth, size, seed)
        except ValueError as exc:
            raise ValueError(f"unknown group {group_id!r}") from exc


@dataclass
class Scene:
    blocks: list  # [(Cuboid, Pose), ...] in placement order
    config: SceneConfig
    scene_index: int = 0
    supports: list = field(default_factory=list)  # supports[i] = index of the support, -1 for ground
    retries: int = 0

    def __len__(self):
        return len(self.blocks)

    @property
    def group_id(self) -> str:
        return self.config.group_id

    def to_dict(self) -> dict:
        return {
            "group_id": self.group_id,
            "scene_index": self.scene_index,
            "seed": self.config.seed,
            "retries": self.retries,
            "blocks": [
                {"half_extents": c.half_extents.tolist(),
                 "position": p.position.tolist(),
                 "orientation": p.orientation.tolist()}
                for c, p in self.blocks
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        cfg = SceneConfig.from_group_id(d["group_id"], int(d.get("seed", 0)))
        blocks = [(Cuboid(b["half_extents"]), Pose(b["position"], b["orientation"]))
                  for b in d["blocks"]]
        return cls(blocks, cfg, int(d.get("scene_index", 0)), retries=int(d.get("retries", 0)))

    def with_blocks(self, blocks) -> "Scene":
        return replace(self, blocks=list(blocks), supports=[])


def enumerate_groups() -> list:
    return [SceneConfig(n, d, s) for n, d, s in itertools.product(NUM_BLOCKS, DEPTH_MODES, SIZE_MODES)]


def group_ids() -> list:
    return [cfg.group_id for cfg in enumerate_groups()]


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(*parts) -> int:
    """Order-sensitive 64-bit hash of ints and strings."""
    h = 0
    for part in parts:
        if isinstance(part, str):
            part = zlib.crc32(part.encode("utf-8"))
        h = splitmix64(h ^ (int(part) & _MASK64))
    return h


def scene_seed(base_seed: int, group_id: str, scene_index: int) -> int:
    return derive_seed(base_seed, group_id, scene_index)


def _truncated_normal(rng: np.random.Generator, sigma: float, delta: float) -> float:
    while True:
        v = rng.normal(1.0, sigma)
        if 1.0 - delta <= v <= 1.0 + delta:
            return float(v)


def sample_block_size(mode: str, rng: np.random.Generator, params: GenerationParams = DEFAULT_PARAMS) -> Cuboid:
    """Block in canonical upright orientation (long axis along body z)."""
    sx, sy, sz = CANONICAL_FULL_EXTENTS
    if mode == "NonUni":
        sx *= _truncated_normal(rng, params.sigma, params.delta)
        sy *= _truncated_normal(rng, params.sigma, params.delta)
    elif mode != "Uni":
        raise ValueError(f"unknown size mode {mode!r}")
    return Cuboid.from_full_extents(sx, sy, sz)


def orient(c: Cuboid, orientation: str) -> Cuboid:
    """Permute half extents: 'upright' keeps the long axis on z."""
    a, b, long = c.half_extents
    if orientation == "upright":
        return Cuboid([a, b, long])
    if orientation == "lying-x":
        return Cuboid([long, b, a])
    if orientation == "lying-y":
        return Cuboid([a, long, b])
    raise ValueError(orientation)


def _orientations(depth_mode: str) -> tuple:
    return ("upright", "lying-x") if depth_mode == "2D" else ("upright", "lying-x", "lying-y")


def _overlap_1d(a: float, b: float, d: float) -> float:
    return max(0.0, min(a + b - abs(d), 2.0 * min(a, b)))


def _sample_offset(rng, sup_h, new_h, depth_mode, wide, min_overlap, safe_fraction=1.0):
    """Horizontal offset of the new center relative to the support's top-face center."""
    min_area = min_overlap * min(4 * sup_h[0] * sup_h[1], 4 * new_h[0] * new_h[1])
    if wide:
        lim = (sup_h[0] + new_h[0], sup_h[1] + new_h[1])
    else:
        lim = (safe_fraction * sup_h[0], safe_fraction * sup_h[1])
    if depth_mode == "2D":
        oy = _overlap_1d(sup_h[1], new_h[1], 0.0)
        need = min_area / oy
        # |dx| <= a + b - need keeps the overlap area above the minimum
        reach = min(lim[0], sup_h[0] + new_h[0] - need)
        if reach < 0:
            return None
        return float(rng.uniform(-reach, reach)), 0.0
    for _ in range(1000):
        dx = float(rng.uniform(-lim[0], lim[0]))
        dy = float(rng.uniform(-lim[1], lim[1]))
        if _overlap_1d(sup_h[0], new_h[0], dx) * _overlap_1d(sup_h[1], new_h[1], dy) >= min_area:
            return dx, dy
    return None


def _aabbs_interpenetrate(lo1, hi1, lo2, hi2, tol=CONTACT_TOL) -> bool:
    return bool(np.all(np.minimum(hi1, hi2) - np.maximum(lo1, lo2) > tol))


def _top_exposed(j: int, blocks) -> bool:
    cj, pj = blocks[j]
    box = world_aabb(cj, pj)
    fj = footprint(cj, pj)
    for ci, pi in blocks:
        bi = world_aabb(ci, pi)
        if abs(bi.lo[2] - box.hi[2]) > CONTACT_TOL:
            continue
        if rect_overlap(fj, footprint(ci, pi)).area >= fj.area - 1e-12:
            return False
    return True


def generate_scene(cfg: SceneConfig, rng: np.random.Generator | None = None,
                   params: GenerationParams = DEFAULT_PARAMS, scene_index: int = 0) -> Scene:
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    orientations = _orientations(cfg.depth_mode)
    p_wide = params.wide_probability(cfg.num_blocks)

    first = orient(sample_block_size(cfg.size_mode, rng, params), orientations[rng.integers(len(orientations))])
    blocks = [(first, Pose([0.0, 0.0, first.half_extents[2]]))]
    supports = [-1]
    boxes = [world_aabb(*blocks[0])]

    for _ in range(1, cfg.num_blocks):
        shape = sample_block_size(cfg.size_mode, rng, params)
        wide = bool(rng.random() < p_wide)
        for _attempt in range(params.max_attempts):
            exposed = [j for j in range(len(blocks)) if _top_exposed(j, blocks)]
            j = exposed[rng.integers(len(exposed))]
            new = orient(shape, orientations[rng.integers(len(orientations))])
            sup_c, sup_p = blocks[j]
            offset = _sample_offset(rng, sup_c.half_extents, new.half_extents, cfg.depth_mode,
                                    wide, params.min_overlap, params.safe_fraction)
            if offset is None:
                continue
            dx, dy = offset
            top = boxes[j].hi[2]
            pos = np.array([sup_p.position[0] + dx, sup_p.position[1] + dy, top + new.half_extents[2]])
            if cfg.depth_mode == "2D":
                pos[1] = 0.0
            lo, hi = pos - new.half_extents, pos + new.half_extents
            if any(_aabbs_interpenetrate(lo, hi, b.lo, b.hi) for b in boxes):
                continue
            blocks.append((new, Pose(pos)))
            boxes.append(world_aabb(*blocks[-1]))
            supports.append(j)
            break
        else:
            raise GenerationFailed(
                f"{cfg.group_id}: no admissible placement for block {len(blocks)} "
                f"after {params.max_attempts} attempts")
    return Scene(blocks, cfg, scene_index, supports)


def generate_group(template: SceneConfig, count: int, base_seed: int,
                   params: GenerationParams = DEFAULT_PARAMS, start: int = 0) -> list:
    if count < 1:
        raise ValueError("count must be >= 1")
    return [generate_indexed(template, i, base_seed, params) for i in range(start, start + count)]


def generate_indexed(template: SceneConfig, scene_index: int, base_seed: int,
                     params: GenerationParams = DEFAULT_PARAMS) -> Scene:
    """One scene of a group; failed attempts retry on derived sub-seeds."""
    seed = scene_seed(base_seed, template.group_id, scene_index)
    last = None
    for retry in range(params.max_retries + 1):
        sub = seed if retry == 0 else derive_seed(seed, retry)
        cfg = replace(template, seed=sub)
        try:
            scene = generate_scene(cfg, np.random.default_rng(sub), params, scene_index)
        except GenerationFailed as exc:
            last = exc
            continue
        scene.retries = retry
        return scene
    raise GenerationFailed(f"{template.group_id}#{scene_index}: retries exhausted ({last})")


def support_graph(scene: Scene, tol: float = CONTACT_TOL) -> dict:
    """Edges j -> i where block i rests on block j's top face (j = -1 is the ground)."""
    boxes = [world_aabb(c, p) for c, p in scene.blocks]
    edges = {}
    for i, bi in enumerate(boxes):
        fi = Rect2(bi.lo[:2], bi.hi[:2])
        if abs(bi.lo[2]) <= tol:
            edges.setdefault(-1, []).append(i)
        for j, bj in enumerate(boxes):
            if i == j or abs(bi.lo[2] - bj.hi[2]) > tol:
                continue
            if rect_overlap(fi, Rect2(bj.lo[:2], bj.hi[:2])).area > 0:
                edges.setdefault(j, []).append(i)
    return edges


def supported_blocks(scene: Scene) -> set:
    """Blocks reachable from the ground through support edges."""
    edges = support_graph(scene)
    seen, frontier = set(), [-1]
    while frontier:
        nxt = []
        for j in frontier:
            for i in edges.get(j, []):
                if i not in seen:
                    seen.add(i)
                    nxt.append(i)
        frontier = nxt
    return seen
