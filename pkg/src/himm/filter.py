"""Recursive posterior P(C_t, E_t | U^t, Y^t) and MAP sensing decisions.

Each slot runs a predictor (Markov propagation through A and B) and a
corrector (the emission weight of the new observation), then divides by the
total mass.  That normalizer is the one-step evidence P(U_t, Y_t | past), so
its log is accumulated for the sequence likelihood.  The corrector is formed
in log space and shifted by its maximum before exponentiating, so distant
observations never underflow the whole grid.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateEvidenceError, ShapeError
from .model import BUSY, IDLE, M, HimmParams

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class PosteriorGrid:
    """``p[c, e] = P(C_t = c, E_t = e | observations up to t)``."""

    p: np.ndarray
    log_evidence_increment: float

    @property
    def busy_posterior(self) -> float:
        return float(self.p[BUSY].sum())

    @property
    def energy_marginal(self) -> np.ndarray:
        return self.p.sum(axis=0)


@dataclass(frozen=True, eq=False)
class SenseDecision:
    c_hat: int
    e_hat: int
    busy_posterior: float
    grid: PosteriorGrid


def _log_normal_pdf(y, mu, sigma2):
    return -0.5 * (_LOG_2PI + np.log(sigma2) + (y - mu) ** 2 / sigma2)


def emission_weight(params: HimmParams, c: int, e: int, u: int, y: float) -> float:
    """``d[e, u] * N(y; mu[c, e], sigma2[c, e])``."""
    s2 = params.sigma2[c, e]
    dens = math.exp(-((y - params.mu[c, e]) ** 2) / (2.0 * s2)) / math.sqrt(2.0 * math.pi * s2)
    return float(params.D[e, u]) * dens


def log_corrector(params: HimmParams, u: int | None, y: float) -> np.ndarray:
    """Log emission weights over the (channel, energy) grid.

    ``u=None`` drops the SU energy factor (channel observation only).
    """
    out = _log_normal_pdf(y, params.mu, params.sigma2)
    if u is not None:
        with np.errstate(divide="ignore"):
            out = out + np.log(params.D[:, u])[None, :]
    return out


def _correct(prior: np.ndarray, logw: np.ndarray, t: int) -> PosteriorGrid:
    finite = np.isfinite(logw)
    if not finite.any():
        raise DegenerateEvidenceError(t)
    shift = logw[finite].max()
    unnorm = prior * np.exp(logw - shift)
    total = unnorm.sum()
    if not total > 0.0:
        raise DegenerateEvidenceError(t)
    p = unnorm / total
    p.setflags(write=False)
    return PosteriorGrid(p, float(shift + math.log(total)))


def initial_prior(params: HimmParams) -> np.ndarray:
    """``P(C_1 = c, E_1 = e) = pi_C[e, c] * pi_E[e]`` as a (2, L) grid."""
    return params.pi_C.T * params.pi_E[None, :]


def predict(params: HimmParams, p: np.ndarray) -> np.ndarray:
    """One-step prediction ``sum_{m,l} B[j, m, i] A[l, j] p[m, l]`` for each (i, j)."""
    through_energy = p @ params.A  # [m, j] = sum_l p[m, l] A[l, j]
    return np.einsum("jmi,mj->ij", params.B, through_energy)


def posterior_init(params: HimmParams, u1: int | None, y1: float) -> PosteriorGrid:
    """Posterior at the first slot.  Pass ``u1=None`` for the 1-D variant."""
    return _correct(initial_prior(params), log_corrector(params, u1, y1), 1)


def posterior_step(prev: PosteriorGrid, params: HimmParams, u_t: int | None, y_t: float, t: int = -1) -> PosteriorGrid:
    """Advance the posterior by one slot.  Pass ``u_t=None`` for the 1-D variant.

    ``t`` is only used to label a degenerate-evidence error.
    """
    return _correct(predict(params, prev.p), log_corrector(params, u_t, y_t), t)


def run_filter(params: HimmParams, U: Sequence[int] | None, Y: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Filtering posteriors for a whole sequence.

    Returns ``(posteriors, log_increments)`` with shapes ``(T, 2, L)`` and
    ``(T,)``.  ``U=None`` runs the channel-only (1-D) filter.
    """
    Y = np.asarray(Y, dtype=float)
    T = Y.size
    if T == 0:
        raise ShapeError("observation sequence is empty")
    if U is not None:
        U = np.asarray(U, dtype=np.int64)
        if U.shape != Y.shape:
            raise ShapeError("U and Y must have equal length")
        if np.any((U < 0) | (U >= params.L)):
            raise ShapeError("U contains values outside the energy alphabet")

    # precompute log correctors for all slots at once
    logw = _log_normal_pdf(Y[:, None, None], params.mu[None], params.sigma2[None])
    if U is not None:
        with np.errstate(divide="ignore"):
            logw = logw + np.log(params.D.T[U])[:, None, :]

    posts = np.empty((T,) + params.mu.shape)
    incs = np.empty(T)
    grid = _correct(initial_prior(params), logw[0], 1)
    posts[0], incs[0] = grid.p, grid.log_evidence_increment
    B, A = params.B, params.A
    for t in range(1, T):
        prior = np.einsum("jmi,mj->ij", B, grid.p @ A)
        grid = _correct(prior, logw[t], t + 1)
        posts[t], incs[t] = grid.p, grid.log_evidence_increment
    return posts, incs


def map_cell(p: np.ndarray, low_mask: np.ndarray) -> tuple[int, int]:
    """Argmax over allowed cells; ties go to the lowest (channel, energy) pair."""
    masked = np.where(np.vstack([np.zeros_like(low_mask), low_mask]), -np.inf, p)
    flat = int(np.argmax(masked))
    return divmod(flat, p.shape[1])


def map_cells(posts: np.ndarray, low_mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`map_cell` over a (T, 2, L) stack."""
    T, _, L = posts.shape
    forbidden = np.vstack([np.zeros_like(low_mask), low_mask])
    masked = np.where(forbidden[None], -np.inf, posts).reshape(T, M * L)
    flat = np.argmax(masked, axis=1)
    return flat // L, flat % L


def _decisions(params: HimmParams, posts: np.ndarray, incs: np.ndarray) -> list[SenseDecision]:
    c_hat, e_hat = map_cells(posts, params.shape.low_mask)
    busy = posts[:, BUSY, :].sum(axis=1)
    out = []
    for t in range(posts.shape[0]):
        p = posts[t]
        p.setflags(write=False)
        out.append(SenseDecision(int(c_hat[t]), int(e_hat[t]), float(busy[t]), PosteriorGrid(p, float(incs[t]))))
    return out


def sense_2d(params: HimmParams, U: Sequence[int], Y: Sequence[float]) -> list[SenseDecision]:
    """Joint MAP of (C_t, E_t) from SU energy and channel observations."""
    posts, incs = run_filter(params, U, Y)
    return _decisions(params, posts, incs)


def sense_1d(params: HimmParams, Y: Sequence[float]) -> list[SenseDecision]:
    """Joint MAP of (C_t, E_t) from channel observations alone."""
    posts, incs = run_filter(params, None, Y)
    return _decisions(params, posts, incs)


def busy_posteriors(decisions: Sequence[SenseDecision]) -> np.ndarray:
    return np.array([d.busy_posterior for d in decisions])


def detect_with_threshold(decisions, tau: float) -> np.ndarray:
    """Declare busy wherever ``P(C_t = 1 | obs) >= tau``.

    ``decisions`` may be a sequence of :class:`SenseDecision` or an array of
    busy posteriors.
    """
    if not (0.0 <= tau <= 1.0):
        raise ValueError(f"tau must lie in [0, 1], got {tau!r}")
    if len(decisions) and isinstance(decisions[0], SenseDecision):
        post = busy_posteriors(decisions)
    else:
        post = np.asarray(decisions, dtype=float)
    return (post >= tau).astype(np.int64)


def filter_final_batch(params: HimmParams, U: np.ndarray | None, Y: np.ndarray) -> np.ndarray:
    """Final-slot posteriors for a batch of equal-length sequences.

    ``Y`` has shape ``(n, T)``; returns ``(n, 2, L)``.  Same recursion as
    :func:`run_filter`, vectorized across sequences.
    """
    Y = np.asarray(Y, dtype=float)
    n, T = Y.shape
    logw = _log_normal_pdf(Y[:, :, None, None], params.mu, params.sigma2)  # (n, T, 2, L)
    if U is not None:
        with np.errstate(divide="ignore"):
            logw = logw + np.log(params.D.T[np.asarray(U)])[:, :, None, :]

    def correct(prior, lw, t):
        shift = lw.max(axis=(1, 2), keepdims=True)
        if not np.all(np.isfinite(shift)):
            raise DegenerateEvidenceError(t)
        un = prior * np.exp(lw - shift)
        tot = un.sum(axis=(1, 2), keepdims=True)
        if not np.all(tot > 0):
            raise DegenerateEvidenceError(t)
        return un / tot

    p = correct(initial_prior(params)[None], logw[:, 0], 1)
    for t in range(1, T):
        prior = np.einsum("jmi,nmj->nij", params.B, p @ params.A)
        p = correct(prior, logw[:, t], t + 1)
    return p


SENSE_COLUMNS = ("t", "c_hat", "e_hat", "busy_posterior", "log_evidence_increment")


def dump_decisions(decisions: Sequence[SenseDecision], base: int = 0) -> str:
    """Comma-separated sensing table; ``e_hat`` is written as a level value."""
    buf = io.StringIO()
    buf.write(",".join(SENSE_COLUMNS) + "\n")
    for t, d in enumerate(decisions, start=1):
        buf.write(f"{t},{d.c_hat},{d.e_hat + base},{d.busy_posterior:.12g},{d.grid.log_evidence_increment:.12g}\n")
    return buf.getvalue()
