import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from secure_dmpc.closed_loop import run_closed_loop
from secure_dmpc.coordinator import (
    NegotiationConfig, in_allocation_set, negotiate, project_onto_allocation_set, solve_centralized, warm_start,
)
from secure_dmpc.local_agent import solve_local_qp
from secure_dmpc.scenario import build_setup, load_config
from factories import make_problem, random_spd
from oracles import generic_projection


def test_point_inside_set_is_fixed():
    v = np.array([[0.5, 1.0], [1.0, 0.0]])
    np.testing.assert_array_equal(project_onto_allocation_set(v, [4.0, 4.0]), v)


def test_symmetric_water_filling():
    np.testing.assert_allclose(project_onto_allocation_set([[3.0], [3.0]], [4.0]), [[2.0], [2.0]])


def test_negative_entries_clamped_with_slack_budget():
    np.testing.assert_array_equal(project_onto_allocation_set([[-1.0], [2.0]], [4.0]), [[0.0], [2.0]])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_projection_is_nearest_point(seed):
    rng = np.random.default_rng(seed)
    m, c = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    cap = rng.uniform(0.5, 4.0, c)
    v = rng.normal(0.5, 2.0, (m, c))
    proj = project_onto_allocation_set(v, cap)
    assert in_allocation_set(proj, cap)
    dist = np.linalg.norm(v - proj)
    for _ in range(100):
        s = project_onto_allocation_set(rng.uniform(0, 3, (m, c)), cap)  # random member of S
        assert dist <= np.linalg.norm(v - s) + 1e-9
    np.testing.assert_allclose(proj, generic_projection(v, cap), atol=1e-8)


def test_zero_prices_keep_initial_allocation():
    probs = [make_problem(np.eye(2), np.ones(2), u_max=[4.0]) for _ in range(3)]
    theta0 = np.full((3, 2), 0.5)
    res = negotiate(probs, theta0, NegotiationConfig(rho0=1.0))
    assert res.converged and res.iterations == 1
    np.testing.assert_array_equal(res.thetas, theta0)


def test_single_agent_saturates_budget():
    prob = make_problem([[1.0]], [-2.0], u_max=[1.0])
    res = negotiate([prob], np.zeros((1, 1)), NegotiationConfig(rho0=0.5))
    assert res.converged
    assert res.thetas[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert res.solutions[0].lam[0] == pytest.approx(1.0, abs=1e-12)


def test_non_convergence_is_reported():
    probs = [make_problem(np.eye(2), -5 * np.ones(2), u_max=[1.0]), make_problem(np.eye(2), -np.ones(2), u_max=[1.0])]
    res = negotiate(probs, np.full((2, 2), 0.5), NegotiationConfig(rho0=1e-3, max_iters=3))
    assert not res.converged and res.iterations == 3 and res.residual > 0


def _objective(probs, us):
    return sum(0.5 * u @ p.h @ u + p.f @ u for p, u in zip(probs, us))


@pytest.mark.parametrize("seed", range(15))
def test_negotiation_matches_centralized_qp(seed):
    rng = np.random.default_rng(seed)
    m, c = int(rng.integers(1, 4)), int(rng.integers(1, 5))
    cap = rng.uniform(0.5, 2.0)
    probs = [make_problem(random_spd(rng, c, 0.5, 2.0), rng.normal(-2.0, 1.0, c), u_max=[cap]) for _ in range(m)]
    res = negotiate(probs, np.full((m, c), cap / m), NegotiationConfig(rho0=0.5), keep_history=True)
    assert res.converged
    for th in res.history:
        assert in_allocation_set(th, np.full(c, cap))
    j_dist = _objective(probs, [s.u_star for s in res.solutions])
    j_cent = _objective(probs, solve_centralized(probs))
    assert j_dist == pytest.approx(j_cent, rel=1e-4, abs=1e-10)


def test_warm_start_shifts_and_repeats_last_block():
    prev = np.array([[1.0, 2.0, 3.0], [0.5, 0.5, 0.5]])
    np.testing.assert_array_equal(warm_start(prev, np.full(3, 10.0), 2, 1), [[2, 3, 3], [0.5, 0.5, 0.5]])
    np.testing.assert_array_equal(warm_start(None, np.full(3, 4.0), 4, 1), np.ones((4, 3)))


def test_zero_reference_equilibrium():
    cfg = load_config()
    for room in cfg.rooms:
        room.reference = 0.0
    setup = build_setup(cfg, "nominal")
    setup.n_steps = 3
    trace = run_closed_loop(setup)
    assert not trace.u.any()
    assert not trace.duals.any()
    assert np.nanmax(trace.e_val) < 1e-12
    assert not trace.flag.any()


def test_closed_loop_deterministic_and_receding():
    cfg = load_config(n_steps=4)
    a = run_closed_loop(build_setup(cfg, "corrected"))
    b = run_closed_loop(build_setup(cfg, "corrected"))
    for field in ("x", "u", "y", "theta", "duals", "e_val"):
        np.testing.assert_array_equal(getattr(a, field), getattr(b, field))
    np.testing.assert_array_equal(a.u[:, :, 0], a.u_plan[:, :, 0])


def test_closed_loop_without_supervision_records_nan_detection():
    setup = build_setup(load_config(n_steps=2, supervision={"enabled": False}), "nominal")
    assert setup.supervision is None
    trace = run_closed_loop(setup)
    assert np.isnan(trace.e_val).all() and not trace.flag.any()
    # first input block equals the local solution at the converged allocation
    for i, agent in enumerate(setup.agents):
        sol = solve_local_qp(agent.problem(trace.x[0, i]), trace.theta[0, i])
        np.testing.assert_allclose(sol.u_star, trace.u_plan[0, i], atol=1e-12)
