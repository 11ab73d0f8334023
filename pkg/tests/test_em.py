import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import small_instance
from oracles import energy_only_stats, smoothed_stats
import himm.em as em
from himm.em import (
    SufficientStats,
    compute_stats,
    em_fit,
    init_ranges,
    m_step,
    multi_start_fit,
    start_seeds,
)
from himm.errors import DegenerateEvidenceError, HimmError, ShapeError
from himm.filter import run_filter
from himm.model import ModelShape, random_params, validate_params
from himm.simgen import ObservationSequence, emit_parametric, generate_hidden


def instance(seed, L, T, n_low=0):
    params, U, Y = small_instance(seed, L=L, T=T, n_low=n_low)
    return params, ObservationSequence(U, Y)


def synthetic(seed, T, L=3, n_low=1):
    shape = ModelShape(L, base=1, L0=tuple(range(1, 1 + n_low)))
    truth = random_params(shape, seed, mu_range=(0, 6), sigma2_range=(0.3, 1.0), ordered_means=True)
    return truth, emit_parametric(truth, generate_hidden(truth, T, seed), seed + 1)


# -- E-step -------------------------------------------------------------------


def test_single_level_gamma_u_is_one():
    params, obs = instance(0, L=1, T=6)
    stats = compute_stats(params, obs)
    np.testing.assert_allclose(stats.gamma_U, 1.0, atol=1e-15)


@pytest.mark.parametrize("T", [2, 3, 4])
def test_stats_match_unscaled_definitions(T):
    for seed in range(20):
        L = 2 if T == 4 else 3 - seed % 2
        params, obs = instance(seed, L=L, T=T, n_low=seed % 2)
        stats = compute_stats(params, obs)
        g, e, ll = smoothed_stats(params, obs.U, obs.Y)
        np.testing.assert_allclose(stats.gamma_UY, g, atol=1e-12, rtol=0)
        np.testing.assert_allclose(stats.eps_UY, e, atol=1e-12, rtol=0)
        assert abs(stats.log_likelihood - ll) < 1e-10
        g, e, ll = smoothed_stats(params, obs.U, obs.Y, use_u=False)
        np.testing.assert_allclose(stats.gamma_Y, g, atol=1e-12, rtol=0)
        np.testing.assert_allclose(stats.eps_Y, e, atol=1e-12, rtol=0)
        assert abs(stats.stream_logliks["Y"] - ll) < 1e-10
        g, e, ll = energy_only_stats(params, obs.U)
        np.testing.assert_allclose(stats.gamma_U, g, atol=1e-12, rtol=0)
        np.testing.assert_allclose(stats.eps_U, e, atol=1e-12, rtol=0)
        assert abs(stats.stream_logliks["U"] - ll) < 1e-10


def test_loglik_equals_filter_evidence():
    for seed in range(30):
        truth, obs = synthetic(seed, T=50 + 97 * seed, L=1 + seed % 4, n_low=seed % 2 if seed % 4 else 0)
        stats = compute_stats(truth, obs)
        assert abs(stats.log_likelihood - run_filter(truth, obs.U, obs.Y)[1].sum()) < 1e-10
        assert abs(stats.stream_logliks["Y"] - run_filter(truth, None, obs.Y)[1].sum()) < 1e-10


def test_stats_normalized_and_marginally_consistent():
    truth, obs = synthetic(4, T=400)
    s = compute_stats(truth, obs)
    for g, eps in ((s.gamma_UY, s.eps_UY), (s.gamma_Y, s.eps_Y)):
        assert np.all(g >= 0) and np.all(eps >= 0)
        np.testing.assert_allclose(g.sum(axis=(1, 2)), 1.0, atol=1e-10)
        np.testing.assert_allclose(eps.sum(axis=(3, 4)), g[:-1], atol=1e-10)
        np.testing.assert_allclose(eps.sum(axis=(1, 2)), g[1:], atol=1e-10)
    np.testing.assert_allclose(s.gamma_U.sum(axis=1), 1.0, atol=1e-10)
    np.testing.assert_allclose(s.eps_U.sum(axis=2), s.gamma_U[:-1], atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), k=st.floats(1e-3, 1e3))
def test_stats_invariant_to_rescaling_y(seed, k):
    truth, obs = synthetic(seed, T=120)
    a = compute_stats(truth, obs)
    b = compute_stats(truth.replace(mu=truth.mu * k, sigma2=truth.sigma2 * k * k),
                      ObservationSequence(obs.U, obs.Y * k))
    for name in ("gamma_U", "eps_U", "gamma_Y", "eps_Y", "gamma_UY", "eps_UY"):
        np.testing.assert_allclose(getattr(a, name), getattr(b, name), atol=1e-10, rtol=0)


def test_stats_errors():
    params, obs = instance(1, L=2, T=1)
    with pytest.raises(ShapeError):
        compute_stats(params, obs)
    p = params.replace(D=np.eye(2), A=np.eye(2), pi_E=[1.0, 0.0])
    with pytest.raises(DegenerateEvidenceError) as info:
        compute_stats(p, ObservationSequence([0, 0, 1, 0], [0.0] * 4))
    assert info.value.t == 3


# -- M-step -------------------------------------------------------------------


def hard_stats(E, C, L):
    T = len(E)
    g = np.zeros((T, 2, L))
    g[np.arange(T), C, E] = 1.0
    eps = np.zeros((T - 1, 2, L, 2, L))
    eps[np.arange(T - 1), C[:-1], E[:-1], C[1:], E[1:]] = 1.0
    return SufficientStats(g.sum(axis=1), eps.sum(axis=(1, 3)), g, eps, g, eps, 0.0)


def test_hard_assignment_gives_empirical_frequencies():
    truth, _ = synthetic(5, T=10)
    traj = generate_hidden(truth, 3000, 6)
    obs = emit_parametric(truth, traj, 7)
    new = m_step(hard_stats(traj.E, traj.C, 3), obs, truth.shape, prev=truth)
    for i in range(3):
        for j in range(3):
            sel = traj.E == i
            assert new.D[i, j] == pytest.approx(np.mean(obs.U[sel] == j), abs=1e-12)
            assert new.A[i, j] == pytest.approx(np.mean(traj.E[1:][traj.E[:-1] == i] == j), abs=1e-12)
    busy = (traj.C == 1) & (traj.E == 2)
    assert new.mu[1, 2] == pytest.approx(obs.Y[busy].mean(), rel=1e-12)
    assert new.sigma2[1, 2] == pytest.approx(obs.Y[busy].var(), rel=1e-10)
    assert np.all(new.mu[0] == new.mu[0, 0])
    assert new.mu[0, 0] == pytest.approx(obs.Y[traj.C == 0].mean(), rel=1e-12)


@pytest.mark.parametrize("mode", ["split", "joint"])
def test_m_step_output_valid_with_tied_idle_row(mode):
    truth, obs = synthetic(8, T=800)
    new = m_step(compute_stats(truth, obs), obs, truth.shape, prev=truth, mode=mode)
    assert validate_params(new).ok
    assert np.all(new.mu[0] == new.mu[0, 0]) and np.all(new.sigma2[0] == new.sigma2[0, 0])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), n_low=st.integers(0, 3), mode=st.sampled_from(["split", "joint"]))
def test_structural_zeros_survive_every_iteration(seed, n_low, mode):
    shape = ModelShape(4, L0=tuple(range(n_low)))
    truth = random_params(shape, seed, mu_range=(0, 5))
    obs = emit_parametric(truth, generate_hidden(truth, 150, seed), seed)
    params = random_params(shape, seed + 1, **init_ranges(obs.Y))
    for _ in range(4):
        params = m_step(compute_stats(params, obs), obs, shape, prev=params, mode=mode)
        assert np.all(params.B[:n_low, :, 1] == 0) and np.all(params.pi_C[:n_low, 1] == 0)
        assert validate_params(params).ok


def test_unvisited_row_keeps_previous_value():
    truth, obs = synthetic(9, T=300)
    stats = compute_stats(truth, obs)
    # a level that the posteriors never visit: zero its mass everywhere
    gU = stats.gamma_U.copy()
    gU[:, 2] = 0.0
    events = []
    new = m_step(SufficientStats(gU, stats.eps_U, stats.gamma_Y, stats.eps_Y, stats.gamma_UY, stats.eps_UY, 0.0),
                 obs, truth.shape, prev=truth, events=events)
    np.testing.assert_array_equal(new.D[2], truth.D[2])
    assert any("D row (2,)" in msg for msg in events)


def grid_argmax_binary(w0, w1, step=1e-3):
    p = np.linspace(0, 1, int(round(1 / step)) + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        obj = np.where(w0 > 0, w0 * np.log(1 - p), 0) + np.where(w1 > 0, w1 * np.log(p), 0)
    return p[np.nanargmax(obj)]


def grid_gauss(weights, Y):
    """Maximize sum_t w_t log N(Y_t; m, v) by zooming grid search."""
    lo_m, hi_m = Y.min() - 1, Y.max() + 1
    lo_v, hi_v = 1e-6, 4 * (np.ptp(Y) + 1) ** 2
    for _ in range(12):
        m = np.linspace(lo_m, hi_m, 61)[:, None]
        v = np.linspace(lo_v, hi_v, 61)[None, :]
        obj = sum(w * (-0.5 * np.log(v) - 0.5 * (y - m) ** 2 / v) for w, y in zip(weights, Y))
        i, j = np.unravel_index(np.argmax(obj), obj.shape)
        dm, dv = (hi_m - lo_m) / 20, (hi_v - lo_v) / 20
        lo_m, hi_m = m[i, 0] - dm, m[i, 0] + dm
        lo_v, hi_v = max(v[0, j] - dv, 1e-9), v[0, j] + dv
    return m[i, 0], v[0, j]


@pytest.mark.parametrize("mode", ["split", "joint"])
def test_m_step_maximizes_decomposed_objective(mode):
    for seed in range(5):
        params, obs = instance(seed, L=2, T=3, n_low=seed % 2)
        s = compute_stats(params, obs)
        gU, gY, eY = (s.gamma_U, s.gamma_Y, s.eps_Y) if mode == "split" else (
            s.gamma_UY.sum(axis=1), s.gamma_UY, s.eps_UY)
        new = m_step(s, obs, params.shape, prev=params, mode=mode)
        for i in range(2):
            w = [gU[obs.U == j, i].sum() for j in range(2)]
            assert abs(new.D[i, 1] - grid_argmax_binary(*w)) <= 2e-3
            w = s.eps_UY[:, :, i, :, :].sum(axis=(0, 1, 2))
            assert abs(new.A[i, 1] - grid_argmax_binary(*w)) <= 2e-3
        w = s.gamma_UY[0].sum(axis=0)
        assert abs(new.pi_E[1] - grid_argmax_binary(*w)) <= 2e-3
        for q in range(2):
            if params.shape.low_mask[q]:
                continue
            w = gY[0, :, q]
            assert abs(new.pi_C[q, 1] - grid_argmax_binary(*w)) <= 2e-3
            for m in range(2):
                w = eY[:, m, :, :, q].sum(axis=(0, 1))
                assert abs(new.B[q, m, 1] - grid_argmax_binary(*w)) <= 2e-3
            mu, v = grid_gauss(gY[:, 1, q], obs.Y)
            assert new.mu[1, q] == pytest.approx(mu, abs=2e-3)
            assert new.sigma2[1, q] == pytest.approx(v, rel=2e-3, abs=1e-6)
        mu, v = grid_gauss(gY[:, 0, :].sum(axis=1), obs.Y)
        assert new.mu[0, 0] == pytest.approx(mu, abs=2e-3)
        assert new.sigma2[0, 0] == pytest.approx(v, rel=2e-3, abs=1e-6)


# -- fitting ------------------------------------------------------------------


def test_single_pass_is_recorded():
    truth, obs = synthetic(10, T=200)
    rep = em_fit(obs, random_params(truth.shape, 1, **init_ranges(obs.Y)), max_iter=1)
    assert rep.iterations == 1 and len(rep.loglik_history) == 2
    assert not rep.converged
    assert rep.loglik_table().splitlines() == [
        "iteration,loglik", f"0,{rep.loglik_history[0]:.12g}", f"1,{rep.loglik_history[1]:.12g}"]


@pytest.mark.parametrize("mode", ["split", "joint"])
def test_refit_from_converged_params_stops_immediately(mode):
    truth, obs = synthetic(11, T=1000)
    rep = em_fit(obs, truth, mode=mode, max_iter=5000)
    assert rep.converged
    again = em_fit(obs, rep.params, mode=mode)
    assert again.iterations <= 1 and again.converged
    assert again.loglik_history[-1] - again.loglik_history[0] <= rep.tolerance_used


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_joint_mode_is_monotone(seed):
    truth, obs = synthetic(seed, T=300)
    rep = em_fit(obs, random_params(truth.shape, seed, **init_ranges(obs.Y)), max_iter=60, mode="joint")
    assert rep.decreases(1e-8) == []


def test_em_fit_argument_checks():
    truth, obs = synthetic(12, T=50)
    with pytest.raises(ValueError):
        em_fit(obs, truth, tol=0.0)
    with pytest.raises(ValueError):
        em_fit(obs, truth, mode="viterbi")


def test_single_start_equals_direct_fit():
    truth, obs = synthetic(13, T=300)
    best = multi_start_fit(obs, truth.shape, n_starts=1, seed=5, max_iter=30)
    init = random_params(truth.shape, start_seeds(5, 1)[0], **init_ranges(obs.Y))
    direct = em_fit(obs, init, max_iter=30)
    assert best.params.array_equal(direct.params)
    assert best.loglik_history == direct.loglik_history


def test_best_start_dominates_and_is_deterministic():
    truth, obs = synthetic(14, T=300)
    a = multi_start_fit(obs, truth.shape, n_starts=4, seed=3, max_iter=40, mode="joint")
    b = multi_start_fit(obs, truth.shape, n_starts=4, seed=3, max_iter=40, mode="joint")
    assert len(a.starts) == 4
    assert all(a.final_loglik >= r.final_loglik for r in a.starts)
    assert a.params.array_equal(b.params) and a.start_index == b.start_index


def test_all_degenerate_starts_raise(monkeypatch):
    truth, obs = synthetic(15, T=50)

    def boom(*args, **kwargs):
        raise DegenerateEvidenceError(1)

    monkeypatch.setattr(em, "em_fit", boom)
    with pytest.raises(HimmError, match="all 3 starts"):
        multi_start_fit(obs, truth.shape, n_starts=3, seed=0)


def test_init_ranges_scale_with_data():
    r = init_ranges(np.array([-2.0, 10.0, 4.0]))
    assert r["mu_range"] == (0.0, 10.0)
    assert r["sigma2_range"][1] == 100.0 and r["ordered_means"]
