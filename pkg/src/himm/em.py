"""Offline EM estimation of the HIMM parameters.

Three observation streams get their own forward/backward passes: the SU
energy stream ``U`` alone (states: energy level), the channel stream ``Y``
alone and the joint stream ``(U, Y)`` (states: channel x energy).  By default
the M-step weights each parameter group by the stream it is associated with:

* ``D`` from the U-only posteriors,
* ``pi_E`` and ``A`` from the joint posteriors,
* ``pi_C``, ``B``, ``mu`` and ``sigma2`` from the Y-only posteriors.

``mode="joint"`` instead uses the joint posteriors for every group, which is
textbook Baum-Welch on the product chain.

All passes are rescaled per slot; stored gammas and epsilons are posterior
probabilities (they sum to one at each slot), which differ from the unscaled
joint probabilities only by the constant factor P(observations).
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import DegenerateEvidenceError, HimmError, ShapeError
from .filter import initial_prior
from .model import BUSY, IDLE, M, HimmParams, ModelShape, random_params, validate_params
from .rng import seed_sequence
from .simgen import ObservationSequence

log = logging.getLogger(__name__)

MODES = ("split", "joint")
DEFAULT_TOL = 1e-6
VARIANCE_FLOOR_FRACTION = 1e-9


@numba.njit(cache=True)
def _forward(pi0, K, w):
    T, S = w.shape
    alpha = np.empty((T, S))
    scale = np.empty(T)
    s = 0.0
    for j in range(S):
        alpha[0, j] = pi0[j] * w[0, j]
        s += alpha[0, j]
    if not s > 0.0:
        return alpha, scale, 0
    for j in range(S):
        alpha[0, j] /= s
    scale[0] = s
    for t in range(1, T):
        s = 0.0
        for j in range(S):
            acc = 0.0
            for i in range(S):
                acc += alpha[t - 1, i] * K[i, j]
            acc *= w[t, j]
            alpha[t, j] = acc
            s += acc
        if not s > 0.0:
            return alpha, scale, t
        for j in range(S):
            alpha[t, j] /= s
        scale[t] = s
    return alpha, scale, -1


@numba.njit(cache=True)
def _backward(K, w, scale):
    T, S = w.shape
    beta = np.empty((T, S))
    tmp = np.empty(S)
    for j in range(S):
        beta[T - 1, j] = 1.0
    for t in range(T - 2, -1, -1):
        for j in range(S):
            tmp[j] = w[t + 1, j] * beta[t + 1, j]
        for i in range(S):
            acc = 0.0
            for j in range(S):
                acc += K[i, j] * tmp[j]
            beta[t, i] = acc / scale[t + 1]
    return beta


@dataclass(frozen=True, eq=False)
class StreamPass:
    """Posterior marginals of one scaled forward/backward pass."""

    gamma: np.ndarray  # (T, S)
    eps: np.ndarray  # (T-1, S, S)
    log_likelihood: float


def forward_backward(pi0: np.ndarray, K: np.ndarray, logw: np.ndarray) -> StreamPass:
    """Scaled forward/backward on a chain with initial ``pi0``, transition ``K``
    and per-slot log emission weights ``logw`` of shape (T, S)."""
    logw = np.asarray(logw, dtype=float)
    finite_max = np.where(np.isfinite(logw), logw, -np.inf).max(axis=1)
    bad = np.flatnonzero(~np.isfinite(finite_max))
    if bad.size:
        raise DegenerateEvidenceError(int(bad[0]) + 1)
    w = np.exp(logw - finite_max[:, None])
    pi0 = np.ascontiguousarray(pi0, dtype=float)
    K = np.ascontiguousarray(K, dtype=float)
    alpha, scale, bad_t = _forward(pi0, K, w)
    if bad_t >= 0:
        raise DegenerateEvidenceError(bad_t + 1)
    beta = _backward(K, w, scale)
    gamma = alpha * beta
    tail = (w[1:] * beta[1:]) / scale[1:, None]
    eps = alpha[:-1, :, None] * K[None] * tail[:, None, :]
    return StreamPass(gamma, eps, float(np.log(scale).sum() + finite_max.sum()))


def product_chain(params: HimmParams) -> tuple[np.ndarray, np.ndarray]:
    """Initial vector and transition matrix of the (channel, energy) chain.

    State ``(c, e)`` is flattened to ``c * L + e``.
    """
    L = params.L
    K = np.einsum("lj,jmi->mlij", params.A, params.B).reshape(M * L, M * L)
    return initial_prior(params).ravel(), K


def _log_gauss(Y, params):
    s2 = params.sigma2
    return -0.5 * (np.log(2 * np.pi * s2)[None] + (Y[:, None, None] - params.mu[None]) ** 2 / s2[None])


def _log_d(params, U):
    with np.errstate(divide="ignore"):
        return np.log(params.D.T[U])  # (T, L): log d[e, U_t]


@dataclass(frozen=True, eq=False)
class SufficientStats:
    """Per-slot posterior marginals for the three observation streams.

    ``gamma_Y[t, c, e]``; ``eps_Y[t, c, e, c', e']`` pairs slot t with t+1.
    U-only arrays are None when that stream was not computed.
    """

    gamma_U: np.ndarray | None
    eps_U: np.ndarray | None
    gamma_Y: np.ndarray | None
    eps_Y: np.ndarray | None
    gamma_UY: np.ndarray
    eps_UY: np.ndarray
    log_likelihood: float
    stream_logliks: dict = field(default_factory=dict)


def _check_obs(params: HimmParams, obs: ObservationSequence):
    if len(obs) < 2:
        raise ShapeError("EM statistics need at least two slots")
    if np.any((obs.U < 0) | (obs.U >= params.L)):
        raise ShapeError("U contains values outside the energy alphabet")


def compute_stats(params: HimmParams, obs: ObservationSequence, streams=("U", "Y", "UY")) -> SufficientStats:
    """E-step quantities for the requested streams (the joint one is always computed)."""
    _check_obs(params, obs)
    T, L = len(obs), params.L
    pi0, K = product_chain(params)
    lg = _log_gauss(obs.Y, params).reshape(T, M * L)
    ld = _log_d(params, obs.U)

    joint = forward_backward(pi0, K, lg + np.tile(ld, (1, M)))
    out = {
        "gamma_UY": joint.gamma.reshape(T, M, L),
        "eps_UY": joint.eps.reshape(T - 1, M, L, M, L),
        "gamma_U": None, "eps_U": None, "gamma_Y": None, "eps_Y": None,
    }
    logliks = {"UY": joint.log_likelihood}
    if "U" in streams:
        u = forward_backward(params.pi_E, params.A, ld)
        out["gamma_U"], out["eps_U"] = u.gamma, u.eps
        logliks["U"] = u.log_likelihood
    if "Y" in streams:
        y = forward_backward(pi0, K, lg)
        out["gamma_Y"] = y.gamma.reshape(T, M, L)
        out["eps_Y"] = y.eps.reshape(T - 1, M, L, M, L)
        logliks["Y"] = y.log_likelihood
    return SufficientStats(log_likelihood=joint.log_likelihood, stream_logliks=logliks, **out)


def _normalize_rows(num: np.ndarray, prev: np.ndarray, name: str, events: list) -> np.ndarray:
    """Row-normalize ``num``; rows with zero mass keep ``prev``."""
    den = num.sum(axis=-1, keepdims=True)
    empty = (den <= 0.0)[..., 0]
    out = np.where(empty[..., None], prev, num / np.where(den > 0, den, 1.0))
    for idx in np.argwhere(np.atleast_1d(empty)):
        msg = f"{name} row {tuple(int(i) for i in idx)} has no posterior mass; previous value kept"
        events.append(msg)
        log.debug(msg)
    return out


def m_step(
    stats: SufficientStats,
    obs: ObservationSequence,
    shape: ModelShape,
    prev: HimmParams | None = None,
    mode: str = "split",
    events: list | None = None,
) -> HimmParams:
    """Closed-form parameter update from E-step statistics.

    Rows whose denominator is zero (states never visited) keep their value in
    ``prev`` (uniform over allowed entries when ``prev`` is None) and a message
    is appended to ``events``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    events = [] if events is None else events
    L = shape.L
    low = shape.low_mask
    U = obs.U
    Y = obs.Y
    if prev is None:
        prev = _uniform_params(shape, Y)

    gUY, eUY = stats.gamma_UY, stats.eps_UY
    if mode == "split":
        if stats.gamma_U is None or stats.gamma_Y is None:
            raise ValueError("split-mode M-step needs the U-only and Y-only statistics")
        gU, gY, eY = stats.gamma_U, stats.gamma_Y, stats.eps_Y
    else:
        gU, gY, eY = gUY.sum(axis=1), gUY, eUY

    # D: expected emission counts
    onehot = np.zeros((len(obs), L))
    onehot[np.arange(len(obs)), U] = 1.0
    D = _normalize_rows(gU.T @ onehot, prev.D, "D", events)

    # pi_E, A: joint stream
    pi_E = _normalize_rows(gUY[0].sum(axis=0), prev.pi_E, "pi_E", events)
    A = _normalize_rows(eUY.sum(axis=(0, 1, 3)), prev.A, "A", events)

    # pi_C[e, c] and B[q, c_prev, c]
    pi_C = _normalize_rows(gY[0].T.copy(), prev.pi_C, "pi_C", events)
    B = _normalize_rows(eY.sum(axis=(0, 2)).transpose(2, 0, 1), prev.B, "B", events)
    pi_C[low, BUSY] = 0.0
    B[low, :, BUSY] = 0.0
    pi_C /= pi_C.sum(axis=1, keepdims=True)
    B /= B.sum(axis=2, keepdims=True)

    # Gaussian emissions: busy row per level, idle row pooled over levels
    floor = VARIANCE_FLOOR_FRACTION * max(float(np.var(Y)), np.finfo(float).tiny)
    mu = np.array(prev.mu, dtype=float)
    sigma2 = np.array(prev.sigma2, dtype=float)
    w_idle = gY[:, IDLE, :].sum(axis=1)
    if w_idle.sum() > 0:
        m0 = w_idle @ Y / w_idle.sum()
        mu[IDLE] = m0
        sigma2[IDLE] = max(w_idle @ (Y - m0) ** 2 / w_idle.sum(), floor)
    else:
        events.append("idle emission has no posterior mass; previous value kept")
    w_busy = gY[:, BUSY, :]
    mass = w_busy.sum(axis=0)
    for j in range(L):
        if mass[j] > 0:
            m1 = w_busy[:, j] @ Y / mass[j]
            mu[BUSY, j] = m1
            sigma2[BUSY, j] = max(w_busy[:, j] @ (Y - m1) ** 2 / mass[j], floor)
        elif not low[j]:
            events.append(f"busy emission at level index {j} has no posterior mass; previous value kept")

    return HimmParams(shape, pi_E, pi_C, A, B, D, mu, sigma2)


def _uniform_params(shape: ModelShape, Y: np.ndarray) -> HimmParams:
    L = shape.L
    low = shape.low_mask
    pi_C = np.full((L, M), 0.5)
    pi_C[low] = [1.0, 0.0]
    B = np.full((L, M, M), 0.5)
    B[low] = [[1.0, 0.0], [1.0, 0.0]]
    var = max(float(np.var(Y)), 1.0)
    return HimmParams(
        shape, np.full(L, 1.0 / L), pi_C, np.full((L, L), 1.0 / L), B, np.full((L, L), 1.0 / L),
        np.full((M, L), float(np.mean(Y))), np.full((M, L), var),
    )


@dataclass(frozen=True, eq=False)
class FitReport:
    """Outcome of one EM run (or the best of several).

    ``loglik_history[k]`` is the joint log-likelihood of the k-th iterate,
    starting with the initial parameters, so it has ``iterations + 1`` entries.
    """

    params: HimmParams
    loglik_history: tuple[float, ...]
    iterations: int
    converged: bool
    tolerance_used: float
    mode: str = "split"
    events: tuple[str, ...] = ()
    start_index: int | None = None
    starts: tuple["FitReport", ...] = ()

    @property
    def final_loglik(self) -> float:
        return self.loglik_history[-1]

    def decreases(self, slack: float = 1e-8) -> list[tuple[int, float]]:
        """Iterations whose log-likelihood fell by more than ``slack``."""
        h = np.asarray(self.loglik_history)
        d = np.diff(h)
        return [(int(k) + 1, float(d[k])) for k in np.flatnonzero(d < -slack)]

    def loglik_table(self) -> str:
        buf = io.StringIO()
        buf.write("iteration,loglik\n")
        for k, v in enumerate(self.loglik_history):
            buf.write(f"{k},{v:.12g}\n")
        return buf.getvalue()


def em_fit(
    obs: ObservationSequence,
    init: HimmParams,
    tol: float = DEFAULT_TOL,
    max_iter: int = 500,
    mode: str = "split",
) -> FitReport:
    """Alternate E- and M-steps from ``init``.

    Stops once the joint log-likelihood improves by at most ``tol`` (a
    decrease also stops the run) or after ``max_iter`` M-steps.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    validate_params(init).raise_if_invalid()
    streams = ("U", "Y", "UY") if mode == "split" else ("UY",)
    params = init
    history: list[float] = []
    events: list[str] = []
    converged = False
    for k in range(max_iter + 1):
        stats = compute_stats(params, obs, streams)
        history.append(stats.log_likelihood)
        if k > 0 and history[-1] - history[-2] <= tol:
            converged = True
            break
        if k == max_iter:
            break
        params = m_step(stats, obs, init.shape, prev=params, mode=mode, events=events)
    return FitReport(params, tuple(history), len(history) - 1, converged, tol, mode, tuple(events))


def init_ranges(Y: np.ndarray) -> dict:
    """Random-start ranges: uniform(0, 1) draws on the unit scale of the data.

    With ``s = max |Y|``, means are uniform on ``(0, s)`` and variances on
    ``(0, s^2]`` (floored just above zero); busy means are drawn at or above
    the idle mean.
    """
    s = float(np.max(np.abs(np.asarray(Y, dtype=float))))
    s = s if s > 0 else 1.0
    return {"mu_range": (0.0, s), "sigma2_range": (1e-6 * s * s, s * s), "ordered_means": True}


def start_seeds(seed, n_starts: int) -> list[np.random.SeedSequence]:
    return seed_sequence(seed).spawn(n_starts)


def multi_start_fit(
    obs: ObservationSequence,
    shape: ModelShape,
    n_starts: int = 15,
    tol: float = DEFAULT_TOL,
    max_iter: int = 500,
    seed=None,
    mode: str = "split",
    init_kwargs: dict | None = None,
) -> FitReport:
    """Run :func:`em_fit` from ``n_starts`` random initializations; keep the best.

    Start ``i`` is initialized with ``random_params(shape, start_seeds(seed, n)[i])``
    using ranges from :func:`init_ranges` unless ``init_kwargs`` overrides them.
    Ties in final log-likelihood go to the lowest start index.
    """
    if n_starts < 1:
        raise ValueError("n_starts must be at least 1")
    kwargs = init_ranges(obs.Y) if init_kwargs is None else init_kwargs
    reports: list[FitReport] = []
    failures = []
    for i, ss in enumerate(start_seeds(seed, n_starts)):
        init = random_params(shape, ss, **kwargs)
        try:
            rep = em_fit(obs, init, tol=tol, max_iter=max_iter, mode=mode)
        except DegenerateEvidenceError as exc:
            failures.append((i, exc))
            log.warning("start %d degenerate: %s", i, exc)
            continue
        reports.append(
            FitReport(rep.params, rep.loglik_history, rep.iterations, rep.converged, tol, mode, rep.events, i)
        )
    if not reports:
        raise HimmError(f"all {n_starts} starts were degenerate: " + "; ".join(f"#{i}: {e}" for i, e in failures))
    best = max(reports, key=lambda r: (r.final_loglik, -r.start_index))
    return FitReport(
        best.params, best.loglik_history, best.iterations, best.converged, tol, mode, best.events,
        best.start_index, tuple(reports),
    )
