import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from secure_dmpc.coordinator import NegotiationConfig, negotiate, truthful_source
from secure_dmpc.em_defense.mixture import (
    MixtureParams, e_step, expected_complete_loglik, m_step, m_step_wls, match_one_zone,
    regression_design, run_em,
)
from secure_dmpc.em_defense.supervision import (
    NominalRecord, ReconstructionError, SupervisionConfig, collect_probe_responses, detect,
    estimate_t_inv, generate_probes, nominal_record, reconstruct_lambda, secure_round, supervise_agent,
)
from secure_dmpc.local_agent import explicit_dual_piece, solve_local_qp
from factories import benchmark_agents, two_zone_data, zone_recovery_error

T_I = np.diag([14.43288267, 13.4590903, 6.93065061, 3.4447393])


def _params(p, s, pis, sig):
    return MixtureParams(np.asarray(p, float), np.asarray(s, float), np.asarray(pis, float), np.asarray(sig, float))


def _responder(prob, t_mat=None):
    def respond(theta):
        sol = solve_local_qp(prob, theta)
        lam = sol.lam if t_mat is None else t_mat @ sol.lam
        return lam, sol
    return respond


@pytest.fixture(scope="module")
def bench():
    return benchmark_agents()


# --- E-step ----------------------------------------------------------------

def test_single_zone_responsibility_is_one():
    rng = np.random.default_rng(0)
    th, lam = rng.normal(size=(2, 7)), rng.normal(size=(2, 7))
    r = e_step(_params([np.eye(2)], [np.zeros(2)], [1.0], [0.3]), th, lam)
    np.testing.assert_array_equal(r.zeta, np.ones((1, 7)))


def test_identical_zones_split_evenly():
    th, lam = np.ones((1, 3)), np.zeros((1, 3))
    r = e_step(_params([[[1.0]], [[1.0]]], [[0.0], [0.0]], [0.5, 0.5], [1.0, 1.0]), th, lam)
    np.testing.assert_allclose(r.zeta, 0.5, atol=1e-15)


def test_one_unit_log_density_gap():
    # zone 0 predicts the observation exactly; zone 1 is off by sqrt(2) at unit variance
    th, lam = np.zeros((1, 1)), np.zeros((1, 1))
    r = e_step(_params([[[0.0]], [[0.0]]], [[0.0], [np.sqrt(2.0)]], [0.5, 0.5], [1.0, 1.0]), th, lam)
    assert r.zeta[0, 0] == pytest.approx(1 / (1 + np.exp(-1.0)), abs=1e-12)


def test_far_observation_does_not_underflow_to_nan():
    th, lam = np.zeros((1, 1)), np.array([[1e6]])
    r = e_step(_params([[[0.0]], [[0.0]]], [[0.0], [1.0]], [0.5, 0.5], [1e-12, 1e-12]), th, lam)
    assert np.all(np.isfinite(r.zeta))
    assert r.zeta.sum() == pytest.approx(1.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 3))
def test_responsibility_columns_sum_to_one(seed, n_zones, c):
    rng = np.random.default_rng(seed)
    params = _params(rng.normal(size=(n_zones, c, c)), rng.normal(size=(n_zones, c)),
                     rng.dirichlet(np.ones(n_zones)), rng.uniform(1e-6, 2.0, n_zones))
    r = e_step(params, rng.normal(size=(c, 9)), 5 * rng.normal(size=(c, 9)))
    assert np.all(r.zeta >= 0)
    np.testing.assert_allclose(r.zeta.sum(axis=0), 1.0, atol=1e-12)


# --- M-step ----------------------------------------------------------------

def test_scalar_line_fit():
    th = np.array([[0.0, 1.0, 2.0]])
    lam = np.array([[-1.0, -3.0, -5.0]])
    p, s, pis, degen = m_step(np.ones((1, 3)), th, lam)
    assert p[0, 0, 0] == pytest.approx(2.0, abs=1e-12)
    assert s[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert pis[0] == pytest.approx(1.0)
    assert not degen.any()


def test_single_zone_exact_recovery():
    rng = np.random.default_rng(3)
    p, s = rng.normal(size=(3, 3)), rng.normal(size=3)
    th = rng.normal(size=(3, 20))
    lam = -p @ th - s[:, None]
    p_hat, s_hat, _, _ = m_step(np.ones((1, 20)), th, lam)
    assert np.abs(p_hat[0] - p).max() <= 1e-10
    assert np.abs(s_hat[0] - s).max() <= 1e-10


def test_hard_weights_equal_subset_least_squares():
    rng = np.random.default_rng(4)
    th, lam = rng.normal(size=(2, 30)), rng.normal(size=(2, 30))
    zeta = np.zeros((2, 30))
    zeta[0, :12] = 1.0
    zeta[1, 12:] = 1.0
    p_hat, s_hat, _, _ = m_step(zeta, th, lam)
    x = np.vstack([th[:, :12], np.ones((1, 12))]).T
    coef, *_ = np.linalg.lstsq(x, lam[:, :12].T, rcond=None)
    np.testing.assert_allclose(p_hat[0], -coef[:2].T, atol=1e-10)
    np.testing.assert_allclose(s_hat[0], -coef[2], atol=1e-10)


def test_rank_deficient_zone_is_reported():
    th = np.array([[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]])
    _, _, _, degen = m_step(np.ones((1, 3)), th, np.zeros((2, 3)))
    assert degen[0]


@pytest.mark.parametrize("seed", range(10))
def test_stacked_and_per_zone_fits_agree(seed):
    rng = np.random.default_rng(seed)
    c, o = int(rng.integers(1, 4)), 25
    th, lam = rng.normal(size=(c, o)), rng.normal(size=(c, o))
    zeta = rng.dirichlet(np.ones(3), size=o).T
    a = m_step(zeta, th, lam, design=regression_design(th))
    b = m_step_wls(zeta, th, lam)
    for x, y in zip(a[:3], b[:3]):
        np.testing.assert_allclose(x, y, atol=1e-9)


def test_design_reproduces_affine_map():
    rng = np.random.default_rng(5)
    c, o = 3, 4
    th = rng.normal(size=(c, o))
    a, b = rng.normal(size=(c, c)), rng.normal(size=c)
    phi = np.concatenate([a.ravel(), b])
    np.testing.assert_allclose(regression_design(th) @ phi, (a @ th + b[:, None]).T.ravel(), atol=1e-12)


# --- full EM ---------------------------------------------------------------

def test_single_zone_converges_immediately():
    rng = np.random.default_rng(6)
    p, s = rng.normal(size=(2, 2)), rng.normal(size=2)
    th = rng.normal(size=(2, 15))
    res = run_em(th, -p @ th - s[:, None], n_zones=1)
    assert res.converged and res.iterations <= 2
    assert np.abs(res.params.p_mats[0] - p).max() <= 1e-10


@pytest.mark.parametrize("seed", range(20))
def test_two_zone_recovery(seed):
    th, lam, p, s = two_zone_data(seed)
    res = run_em(th, lam, 2, seed=seed)
    assert zone_recovery_error(res.params, p, s) <= 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_expected_loglik_never_decreases(seed):
    th, lam, _, _ = two_zone_data(seed)
    res = run_em(th, lam, 2, seed=seed)
    for q_old, q_new, _ in res.history:
        assert q_new - q_old >= -1e-9 * max(1.0, abs(q_old))


def test_em_is_deterministic():
    th, lam, _, _ = two_zone_data(1)
    a, b = run_em(th, lam, 2, seed=7), run_em(th, lam, 2, seed=7)
    np.testing.assert_array_equal(a.params.p_mats, b.params.p_mats)
    np.testing.assert_array_equal(a.resp.zeta, b.resp.zeta)


def test_fixed_variance_monotone_in_expected_loglik():
    th, lam, _, _ = two_zone_data(2)
    res = run_em(th, lam, 2, seed=2, anneal=1.0, max_iter=30)
    for q_old, q_new, _ in res.history:
        assert q_new >= q_old - 1e-9 * max(1.0, abs(q_old))


def test_surplus_zone_is_dropped_or_harmless():
    rng = np.random.default_rng(8)
    p, s = rng.normal(size=(2, 2)), rng.normal(size=2)
    th = rng.normal(size=(2, 40))
    res = run_em(th, -p @ th - s[:, None], n_zones=3, seed=0)
    z = int(np.argmax(res.params.pis))
    assert np.abs(res.params.p_mats[z] - p).max() <= 1e-6


def test_too_few_observations():
    with pytest.raises(ValueError):
        run_em(np.zeros((3, 3)), np.zeros((3, 3)))


def test_expected_loglik_skips_zero_weights():
    params = _params([[[0.0]], [[0.0]]], [[0.0], [0.0]], [1.0, 0.0], [1.0, 1.0])
    q = expected_complete_loglik(params, np.array([[1.0], [0.0]]), np.zeros((1, 1)), np.zeros((1, 1)))
    assert q == pytest.approx(-0.5 * np.log(2 * np.pi))


@pytest.mark.parametrize("zeta, zero, expected", [
    ([[0.9, 0.1], [0.1, 0.9]], 0, 0),
    ([[0.2, 0.1], [0.8, 0.9]], 0, 1),
    ([[0.5], [0.5]], 0, 0),
])
def test_match_zero_allocation_zone(zeta, zero, expected):
    assert match_one_zone(np.array(zeta), zero) == expected


# --- detection and repair --------------------------------------------------

def test_nominal_record_rejects_non_spd():
    with pytest.raises(ValueError):
        NominalRecord(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        NominalRecord(-np.eye(2))


@pytest.mark.parametrize("p_hat, eps, e_val, flag", [
    (np.eye(2), 1e-4, 0.0, False),
    (np.eye(2), 0.0, 0.0, True),
    (np.diag([1.0, 1.0 + 1e-3]), 1e-4, 1e-3, True),
    (np.diag([1.0, 1.0 + 1e-5]), 1e-4, 1e-5, False),
])
def test_detect_threshold(p_hat, eps, e_val, flag):
    res = detect(p_hat, NominalRecord(np.eye(2)), eps)
    assert res.e_val == pytest.approx(e_val, abs=1e-15)
    assert res.flag is flag


def test_detect_shape_mismatch():
    with pytest.raises(ValueError):
        detect(np.eye(3), NominalRecord(np.eye(2)), 1e-4)


def test_benchmark_attack_is_flagged(bench):
    _, probs = bench
    nom = nominal_record(probs[0])
    res = detect(T_I @ nom.p1_bar, nom, 1e-4)
    assert res.flag and res.e_val > 1e-4


@pytest.mark.parametrize("scale", [1.0, 0.5])
def test_inverse_estimate_of_scaled_identity(scale):
    nom = NominalRecord(2 * np.eye(3))
    t_inv = estimate_t_inv(nom, nom.p1_bar / scale)
    np.testing.assert_allclose(t_inv, scale * np.eye(3), atol=1e-14)


def test_inverse_estimate_undoes_benchmark_attack(bench):
    _, probs = bench
    nom = nominal_record(probs[0])
    t_inv = estimate_t_inv(nom, T_I @ nom.p1_bar)
    np.testing.assert_allclose(t_inv @ T_I, np.eye(4), atol=1e-9)


def test_singular_estimate_rejected():
    with pytest.raises(ReconstructionError):
        estimate_t_inv(NominalRecord(np.eye(2)), np.array([[1.0, 1.0], [1.0, 1.0]]))


def test_reconstruct_round_trip_and_clip():
    lam = np.array([0.2, 0.0, 1.5])
    t = np.diag([3.0, 2.0, 0.5])
    rec, bad = reconstruct_lambda(np.linalg.inv(t), t @ lam)
    np.testing.assert_allclose(rec, lam, atol=1e-15)
    assert not bad
    rec, bad = reconstruct_lambda(np.eye(2), np.array([-1e-3, 0.5]))
    np.testing.assert_array_equal(rec, [0.0, 0.5])
    assert bad
    _, bad = reconstruct_lambda(np.eye(1), np.array([-1e-12]))
    assert not bad


# --- probing ----------------------------------------------------------------

def test_probe_set_shape_and_zero_column():
    pts = generate_probes(4, 20, 1e-3, seed=0)
    assert pts.shape == (4, 20)
    assert not np.any(pts[:, 0])
    assert np.all((pts >= 0) & (pts <= 1e-3))
    assert np.linalg.matrix_rank(pts[:, 1:] - pts[:, [0]]) == 4


def test_probes_deterministic():
    np.testing.assert_array_equal(generate_probes(3, 8, 0.1, 11), generate_probes(3, 8, 0.1, 11))


@pytest.mark.parametrize("c, o, delta", [(3, 3, 0.1), (2, 5, 0.0)])
def test_probe_arguments_validated(c, o, delta):
    with pytest.raises(ValueError):
        generate_probes(c, o, delta, 0)


def test_benchmark_probes_stay_all_active(bench):
    setup, probs = bench
    pts = generate_probes(4, 20, 1e-3 * np.linalg.norm(setup.u_max), seed=0)
    for prob in probs:
        data = collect_probe_responses(_responder(prob), pts)
        assert all(set(range(4)) <= set(a) for a in data.active_sets)


def test_truthful_probe_responses_follow_active_piece(bench):
    _, probs = bench
    prob = probs[0]
    piece = explicit_dual_piece(prob, range(4))
    data = collect_probe_responses(_responder(prob), generate_probes(4, 20, 4e-3, seed=1))
    expected = -piece.p_mat @ data.thetas - piece.s_vec[:, None]
    np.testing.assert_allclose(data.lambdas, expected, rtol=1e-9, atol=1e-12)
    assert np.all(data.lambdas[:, data.zero_index] > 0)


def test_attacked_probe_responses_are_mapped(bench):
    _, probs = bench
    pts = generate_probes(4, 20, 4e-3, seed=1)
    honest = collect_probe_responses(_responder(probs[0]), pts)
    lied = collect_probe_responses(_responder(probs[0], T_I), pts)
    np.testing.assert_allclose(lied.lambdas, T_I @ honest.lambdas, rtol=1e-12)


def test_failed_probe_is_dropped():
    calls = []

    def respond(theta):
        calls.append(theta)
        if len(calls) == 2:
            from secure_dmpc.qp import QPError
            raise QPError("boom")
        return np.ones(2), type("S", (), {"active_set": frozenset({0, 1})})()

    data = collect_probe_responses(respond, generate_probes(2, 6, 0.1, 0))
    assert data.thetas.shape == (2, 5)


# --- end to end identification -----------------------------------------------

def test_identified_slope_matches_active_piece(bench):
    _, probs = bench
    for i, prob in enumerate(probs):
        nom = nominal_record(prob)
        res = supervise_agent(_responder(prob), prob, nom, SupervisionConfig(), seed=i)
        assert np.linalg.norm(res.p1_hat - nom.p1_bar) <= 1e-7 * np.linalg.norm(nom.p1_bar)
        assert not res.flag


@pytest.mark.parametrize("seed", range(5))
def test_identification_is_attack_equivariant(bench, seed):
    _, probs = bench
    prob = probs[0]
    nom = nominal_record(prob)
    t = np.diag(np.random.default_rng(seed).uniform(0.5, 20, 4))
    res = supervise_agent(_responder(prob, t), prob, nom, SupervisionConfig(), seed=seed)
    assert np.linalg.norm(res.p1_hat - t @ nom.p1_bar) <= 1e-7 * np.linalg.norm(t @ nom.p1_bar)
    assert res.flag
    np.testing.assert_allclose(res.t_inv_hat @ t, np.eye(4), atol=1e-6)


def test_zero_duals_skip_identification():
    from factories import make_problem
    prob = make_problem(np.eye(2), np.ones(2), u_max=np.ones(1) * 2)
    res = supervise_agent(_responder(prob), prob, NominalRecord(np.eye(2)), SupervisionConfig(), seed=0)
    assert res.e_val == 0.0 and not res.flag
    assert "skipped" in res.warning


def test_secure_round_is_transparent_for_truthful_agents(bench):
    _, probs = bench
    theta0 = np.full((4, 4), 1.0)
    responders = [_responder(p) for p in probs]
    nominals = [nominal_record(p) for p in probs]
    neg = NegotiationConfig(rho0=30.0)
    dets, res = secure_round(probs, responders, nominals, theta0, neg, SupervisionConfig(), seed=0)
    plain = negotiate(probs, theta0, neg, truthful_source(probs))
    assert not any(d.flag for d in dets)
    np.testing.assert_array_equal(res.thetas, plain.thetas)


def test_secure_round_repairs_attacked_agent(bench):
    _, probs = bench
    theta0 = np.full((4, 4), 1.0)
    neg = NegotiationConfig(rho0=30.0)
    honest = negotiate(probs, theta0, neg, truthful_source(probs))
    responders = [_responder(p, T_I if i == 0 else None) for i, p in enumerate(probs)]
    dets, res = secure_round(probs, responders, [nominal_record(p) for p in probs], theta0, neg,
                             SupervisionConfig(), seed=0)
    assert [d.flag for d in dets] == [True, False, False, False]
    np.testing.assert_allclose(res.thetas, honest.thetas, atol=1e-8)
