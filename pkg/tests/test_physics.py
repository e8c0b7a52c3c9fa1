import numpy as np
import pytest

from stacklab.geometry import Cuboid, Pose, quat_from_axis_angle
from stacklab.physics import RigidBody, SimConfig, World, detect_contacts, simulate, solve_contacts, step
from stacklab.scenegen import Scene, SceneConfig, generate_group
from stacklab.stability import quasi_static_check

CUBE = Cuboid([0.5, 0.5, 0.5])
BLOCK = Cuboid.from_full_extents(1, 1, 3)


def scene_of(blocks, n=4):
    return Scene(list(blocks), SceneConfig(n, "2D", "Uni"))


def world_of(*bodies):
    return World(bodies)


def test_sim_config_defaults_and_validation():
    cfg = SimConfig()
    assert cfg.steps == 2000 and cfg.dt == 0.001
    with pytest.raises(ValueError):
        SimConfig(restitution=0.5)
    with pytest.raises(ValueError):
        SimConfig(solver_iterations=0)
    with pytest.raises(ValueError):
        SimConfig(duration=0.0015)


def test_mass_and_inertia_of_canonical_block():
    b = RigidBody(BLOCK, Pose())
    assert b.mass == pytest.approx(3.0)
    assert np.allclose(b.inertia_body, 3.0 / 12 * np.array([1 + 9, 1 + 9, 1 + 1]))


def test_cube_on_ground_has_four_contacts():
    w = world_of(RigidBody(CUBE, Pose([0, 0, 0.5])))
    (m,) = detect_contacts(w)
    assert m.body_a == -1 and m.body_b == 0
    assert len(m.points) == 4
    assert np.allclose(m.normal, [0, 0, 1])
    assert abs(np.linalg.norm(m.normal) - 1) < 1e-9


def test_separated_cubes_have_no_manifold():
    w = world_of(RigidBody(CUBE, Pose([0, 0, 5.0])), RigidBody(CUBE, Pose([2.0, 0, 5.0])))
    assert detect_contacts(w) == []


def test_tilted_cube_touches_ground_at_one_corner():
    # rotate so a body diagonal points down: lowest corner sits sqrt(3)/2 below the center
    q = quat_from_axis_angle(np.cross([1, 1, 1], [0, 0, 1]), np.arccos(1 / np.sqrt(3)))
    z = np.sqrt(3) / 2
    w = world_of(RigidBody(CUBE, Pose([0, 0, z], q)))
    (m,) = detect_contacts(w)
    assert len(m.points) == 1
    assert np.allclose(m.points[0], [0, 0, 0], atol=1e-9)


def test_stacked_cubes_face_contact():
    w = world_of(RigidBody(CUBE, Pose([0, 0, 0.5])), RigidBody(CUBE, Pose([0.2, 0, 1.5])))
    ms = detect_contacts(w)
    pair = [m for m in ms if m.body_a == 0 and m.body_b == 1]
    assert len(pair) == 1 and len(pair[0].points) == 4
    assert np.allclose(pair[0].normal, [0, 0, 1])
    assert np.allclose(sorted(pair[0].points[:, 0]), [-0.3, -0.3, 0.5, 0.5])


def test_falling_cube_stops_on_contact():
    w = world_of(RigidBody(CUBE, Pose([0, 0, 0.5]), linear_velocity=np.array([0, 0, -1.0])))
    lam = solve_contacts(w, detect_contacts(w))
    assert abs(w.vel[0, 2]) < 1e-3
    assert np.all(lam[:, 0] >= 0)


def test_zero_manifolds_is_identity():
    w = world_of(RigidBody(CUBE, Pose([0, 0, 3.0]), linear_velocity=np.array([1.0, 2, 3])))
    before = w.vel.copy()
    assert solve_contacts(w, []).shape == (0, 3)
    assert np.array_equal(w.vel, before)


def test_friction_within_cone():
    w = world_of(RigidBody(CUBE, Pose([0, 0, 0.5]), linear_velocity=np.array([3.0, 0, -1.0])))
    cfg = SimConfig()
    lam = solve_contacts(w, detect_contacts(w), cfg)
    assert np.all(np.hypot(lam[:, 1], lam[:, 2]) <= cfg.friction_mu * lam[:, 0] + 1e-12)


def test_resting_stack_impulse_supports_weight():
    cfg = SimConfig()
    w = world_of(RigidBody(CUBE, Pose([0, 0, 0.5])), RigidBody(CUBE, Pose([0, 0, 1.5])))
    for _ in range(200):  # settle into the warm-started steady state
        step(w, cfg)
    w.vel[:] += np.asarray(cfg.gravity) * cfg.dt
    ms = detect_contacts(w)
    lam = solve_contacts(w, ms, cfg)
    rows = [m.body_a for m in ms for _ in m.points]
    ground = sum(lam[k, 0] for k, a in enumerate(rows) if a == -1)
    assert ground == pytest.approx(2 * 1.0 * 9.81 * cfg.dt, rel=0.02)


def test_free_fall_matches_analytic_drop():
    cfg = SimConfig(duration=1.0)
    w = world_of(RigidBody(CUBE, Pose([0, 0, 100.0])))
    for _ in range(1000):
        step(w, cfg)
    assert 100.0 - w.pos[0, 2] == pytest.approx(0.5 * 9.81, rel=0.01)


@pytest.mark.parametrize("orientation", ["upright", "lying-x", "lying-y"])
def test_single_block_rests(orientation):
    from stacklab.scenegen import orient

    c = orient(BLOCK, orientation)
    trace = simulate(scene_of([(c, Pose([0, 0, c.half_extents[2]]))]))
    assert not trace.diverged
    assert np.linalg.norm(trace.final_positions - trace.initial_positions) < 1e-3
    assert trace.final_time == pytest.approx(2.0)


def test_overhanging_top_block_topples():
    # upright on upright, top shifted by 90% of the support's length along x
    base = (BLOCK, Pose([0, 0, 1.5]))
    top = (BLOCK, Pose([0.9, 0, 4.5]))
    scene = scene_of([base, top])
    assert quasi_static_check(scene).verdict.value == "Unstable"
    trace = simulate(scene)
    assert np.linalg.norm(trace.final_positions[1] - trace.initial_positions[1]) > 1.0
    assert np.linalg.norm(trace.final_positions[0] - trace.initial_positions[0]) < 0.25


def test_determinism_is_byte_exact():
    scene = generate_group(SceneConfig(6, "2D", "Uni"), 1, 4)[0]
    assert simulate(scene).to_bytes() == simulate(scene).to_bytes()


def test_step_api_matches_compiled_rollout():
    scene = generate_group(SceneConfig(4, "2D", "Uni"), 1, 8)[0]
    cfg = SimConfig(duration=0.2)
    w = World.from_scene(scene)
    for _ in range(cfg.steps):
        step(w, cfg)
    trace = simulate(scene, cfg)
    assert np.array_equal(w.pos, trace.final_positions)


def test_momentum_conserved_without_gravity():
    cfg = SimConfig(gravity=(0.0, 0.0, 0.0))
    w = world_of(RigidBody(BLOCK, Pose([0, 0, 10.0], quat_from_axis_angle([1, 2, 3], 0.7)),
                           linear_velocity=np.array([0.3, -0.2, 0.1]), angular_velocity=np.array([1.0, 2.0, -0.5])))
    p0, l0 = w.momentum()
    for _ in range(100):
        step(w, cfg)
        p1, l1 = w.momentum()
        assert np.allclose(p1, p0, atol=1e-9) and np.allclose(l1, l0, atol=1e-9)
        p0, l0 = p1, l1
    assert abs(np.linalg.norm(w.quat[0]) - 1.0) < 1e-9


def _stack_scene():
    return generate_group(SceneConfig(6, "2D", "Uni"), 1, 21)[0]


def test_energy_non_increasing_over_windows():
    scene = _stack_scene()
    cfg = SimConfig()
    w = World.from_scene(scene)
    energies = [w.energy()]
    for k in range(cfg.steps):
        step(w, cfg)
        if (k + 1) % 100 == 0:
            energies.append(w.energy())
    scale = abs(energies[0])
    for a, b in zip(energies, energies[1:]):
        assert b <= a + 0.01 * scale


def test_no_tunneling_through_ground():
    for scene in generate_group(SceneConfig(10, "2D", "Uni"), 4, 2):
        w = World.from_scene(scene)
        cfg = SimConfig()
        for _ in range(cfg.steps):
            step(w, cfg)
        from stacklab.physics import kernels

        lowest = min(
            (w.pos[i] + kernels.quat_to_mat(w.quat[i]) @ (np.array(s) * w.half[i]))[2]
            for i in range(w.n) for s in np.array(np.meshgrid([-1, 1], [-1, 1], [-1, 1])).T.reshape(-1, 3))
        # resting contacts sink up to the stabilization slop before correction acts
        assert lowest >= -(cfg.slop + cfg.contact_tol)


def test_small_batch_never_diverges():
    for scene in generate_group(SceneConfig(4, "2D", "Uni"), 20, 0):
        assert not simulate(scene, record=False).diverged
