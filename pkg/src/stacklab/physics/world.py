from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import Cuboid, Pose
from . import kernels

DIVERGENCE_LIMIT = 1e3


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.001
    duration: float = 2.0
    gravity: tuple = (0.0, 0.0, -9.81)
    friction_mu: float = 0.5
    solver_iterations: int = 10
    restitution: float = 0.0
    baumgarte: float = 0.2
    slop: float = 1e-3
    contact_tol: float = 1e-4
    record_every: int = 10

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.solver_iterations < 1:
            raise ValueError("solver_iterations must be >= 1")
        if abs(self.steps * self.dt - self.duration) > 1e-9 * max(1.0, self.duration):
            raise ValueError("duration must be an integral number of steps")
        if self.restitution != 0.0:
            raise ValueError("only restitution 0 is supported")

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.dt))

    def as_dict(self) -> dict:
        return {"dt": self.dt, "duration": self.duration, "gravity": list(self.gravity),
                "friction_mu": self.friction_mu, "solver_iterations": self.solver_iterations,
                "restitution": self.restitution, "baumgarte": self.baumgarte, "slop": self.slop,
                "contact_tol": self.contact_tol, "record_every": self.record_every}


@dataclass
class RigidBody:
    shape: Cuboid
    pose: Pose
    linear_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    density: float = 1.0

    @property
    def mass(self) -> float:
        return self.density * self.shape.volume

    @property
    def inertia_body(self) -> np.ndarray:
        h2 = self.shape.half_extents ** 2
        return self.mass / 3.0 * np.array([h2[1] + h2[2], h2[0] + h2[2], h2[0] + h2[1]])

    @property
    def inverse_inertia(self) -> np.ndarray:
        return np.diag(1.0 / self.inertia_body)


@dataclass
class ContactManifold:
    body_a: int  # -1 for the ground
    body_b: int
    normal: np.ndarray  # unit, from a toward b
    points: np.ndarray  # (k, 3)
    penetration: np.ndarray  # (k,)
    feature_ids: np.ndarray  # (k,)


class World:
    """Struct-of-arrays body state plus the warm-start cache."""

    def __init__(self, bodies):
        bodies = list(bodies)
        n = len(bodies)
        self.n = n
        self.half = np.array([b.shape.half_extents for b in bodies], dtype=float).reshape(n, 3)
        self.pos = np.array([b.pose.position for b in bodies], dtype=float).reshape(n, 3)
        self.quat = np.array([b.pose.orientation for b in bodies], dtype=float).reshape(n, 4)
        self.vel = np.array([b.linear_velocity for b in bodies], dtype=float).reshape(n, 3)
        self.omega = np.array([b.angular_velocity for b in bodies], dtype=float).reshape(n, 3)
        mass = np.array([b.mass for b in bodies], dtype=float)
        self.inv_mass = 1.0 / mass
        self.inertia = np.array([b.inertia_body for b in bodies], dtype=float).reshape(n, 3)
        self.inv_inertia = 1.0 / self.inertia
        cap = 8 * (n * (n + 1) // 2) + 8
        self._warm_key = np.empty(cap, np.int64)
        self._warm_lam = np.zeros((cap, 3))
        self._warm_count = 0
        self.time = 0.0

    @classmethod
    def from_scene(cls, scene) -> "World":
        return cls(RigidBody(c, p) for c, p in scene.blocks)

    @property
    def mass(self) -> np.ndarray:
        return 1.0 / self.inv_mass

    def poses(self) -> list:
        return [Pose(self.pos[i].copy(), self.quat[i].copy()) for i in range(self.n)]

    def copy(self) -> "World":
        other = object.__new__(World)
        for k, v in self.__dict__.items():
            setattr(other, k, v.copy() if isinstance(v, np.ndarray) else v)
        return other

    def state_bytes(self) -> bytes:
        return b"".join(a.tobytes() for a in (self.pos, self.quat, self.vel, self.omega))

    def energy(self, gravity=(0.0, 0.0, -9.81)) -> float:
        m = self.mass
        kin = 0.5 * np.sum(m * np.sum(self.vel ** 2, axis=1))
        for i in range(self.n):
            r = kernels.quat_to_mat(self.quat[i])
            wb = r.T @ self.omega[i]
            kin += 0.5 * np.sum(self.inertia[i] * wb ** 2)
        pot = -np.sum(m * (self.pos @ np.asarray(gravity, dtype=float)))
        return float(kin + pot)

    def momentum(self) -> tuple:
        m = self.mass
        lin = (m[:, None] * self.vel).sum(axis=0)
        ang = np.zeros(3)
        for i in range(self.n):
            r = kernels.quat_to_mat(self.quat[i])
            lw = r @ (self.inertia[i] * (r.T @ self.omega[i]))
            ang += lw + m[i] * np.cross(self.pos[i], self.vel[i])
        return lin, ang


def _contact_buffers(n):
    cap = 8 * (n * (n + 1) // 2) + 8
    return (np.empty(cap, np.int64), np.empty(cap, np.int64), np.empty(cap, np.int64),
            np.empty((cap, 3)), np.empty((cap, 3)), np.empty(cap))


def _raw_contacts(world: World, tol: float):
    c_a, c_b, c_id, c_p, c_n, c_pen = _contact_buffers(world.n)
    count = kernels.detect(world.pos, world.quat, world.half, tol, c_a, c_b, c_id, c_p, c_n, c_pen)
    return count, c_a, c_b, c_id, c_p, c_n, c_pen


def detect_contacts(world: World, tol: float = 1e-4) -> list:
    """Contact manifolds (1-4 points each) for every pair closer than `tol`, ground first."""
    count, c_a, c_b, c_id, c_p, c_n, c_pen = _raw_contacts(world, tol)
    out = []
    k = 0
    while k < count:
        j = k
        while j < count and c_a[j] == c_a[k] and c_b[j] == c_b[k]:
            j += 1
        out.append(ContactManifold(int(c_a[k]), int(c_b[k]), c_n[k].copy(), c_p[k:j].copy(),
                                   c_pen[k:j].copy(), c_id[k:j].copy()))
        k = j
    return out


def solve_contacts(world: World, manifolds: list, cfg: SimConfig = SimConfig(), warm=None) -> np.ndarray:
    """Apply contact impulses to the world's velocities in place.

    Returns accumulated impulses per contact point, shape (k, 3) as
    (normal, tangent1, tangent2), in manifold order.
    """
    rows = [(m.body_a, m.body_b, m.normal, p, d) for m in manifolds
            for p, d in zip(m.points, m.penetration)]
    count = len(rows)
    lam = np.zeros((max(count, 1), 3)) if warm is None else np.array(warm, dtype=float)
    if count == 0:
        return lam[:0]
    c_a = np.array([r[0] for r in rows], np.int64)
    c_b = np.array([r[1] for r in rows], np.int64)
    c_n = np.array([r[2] for r in rows], float)
    c_p = np.array([r[3] for r in rows], float)
    c_pen = np.array([r[4] for r in rows], float)
    iw = kernels.world_inertia(world.quat, world.inv_inertia)
    kernels.solve(world.pos, world.vel, world.omega, world.inv_mass, iw, count, c_a, c_b, c_p, c_n,
                  c_pen, lam, cfg.dt, cfg.friction_mu, cfg.solver_iterations, cfg.baumgarte, cfg.slop)
    return lam[:count]


def step(world: World, cfg: SimConfig = SimConfig()) -> World:
    """Advance one dt in place (gravity, contacts, pose integration) and return the world."""
    c_a, c_b, c_id, c_p, c_n, c_pen = _contact_buffers(world.n)
    lam = np.zeros((c_a.shape[0], 3))
    world._warm_count = kernels.step_kernel(
        world.pos, world.quat, world.vel, world.omega, world.half, world.inv_mass, world.inertia,
        world.inv_inertia, np.asarray(cfg.gravity, dtype=float), cfg.dt, cfg.friction_mu,
        cfg.solver_iterations, cfg.baumgarte, cfg.slop, cfg.contact_tol,
        c_a, c_b, c_id, c_p, c_n, c_pen, lam, world._warm_key, world._warm_lam, world._warm_count)
    world.time += cfg.dt
    return world


def run(world: World, cfg: SimConfig, steps: int, record_every: int = 0):
    """Compiled multi-step rollout; returns (steps_done, diverged, recorded positions)."""
    done, diverged, rec = kernels.rollout(
        world.pos, world.quat, world.vel, world.omega, world.half, world.inv_mass, world.inertia,
        world.inv_inertia, np.asarray(cfg.gravity, dtype=float), cfg.dt, cfg.friction_mu,
        cfg.solver_iterations, cfg.baumgarte, cfg.slop, cfg.contact_tol, steps, record_every,
        DIVERGENCE_LIMIT)
    world.time += done * cfg.dt
    return int(done), bool(diverged), rec


@dataclass
class SimTrace:
    initial_poses: list
    final_poses: list
    per_step_positions: np.ndarray | None = None  # (records, n, 3), every `record_every` steps
    record_every: int = 0
    diverged: bool = False
    steps: int = 0
    final_time: float = 0.0

    def __len__(self):
        return len(self.initial_poses)

    @property
    def initial_positions(self) -> np.ndarray:
        return np.array([p.position for p in self.initial_poses]).reshape(-1, 3)

    @property
    def final_positions(self) -> np.ndarray:
        return np.array([p.position for p in self.final_poses]).reshape(-1, 3)

    def to_bytes(self) -> bytes:
        parts = [np.array([self.diverged, self.steps], dtype=np.int64).tobytes()]
        for p in self.initial_poses + self.final_poses:
            parts += [p.position.tobytes(), p.orientation.tobytes()]
        if self.per_step_positions is not None:
            parts.append(self.per_step_positions.tobytes())
        return b"".join(parts)


def simulate(scene, cfg: SimConfig = SimConfig(), record: bool = True) -> SimTrace:
    """Full-duration rollout of a scene; divergence truncates and is flagged."""
    world = World.from_scene(scene)
    initial = world.poses()
    every = cfg.record_every if record else 0
    done, diverged, rec = run(world, cfg, cfg.steps, every)
    final = world.poses()
    return SimTrace(initial, final, rec if record else None, every, diverged, done, done * cfg.dt)
