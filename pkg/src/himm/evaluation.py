"""Detection and tracking metrics, the memoryless baseline and the MI-gain estimator."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .filter import filter_final_batch
from .model import HimmParams
from .rng import seed_sequence
from .simgen import generate_hidden_batch


@dataclass(frozen=True, eq=False)
class RocCurve:
    """Empirical operating points of a thresholded statistic, sorted by threshold."""

    taus: np.ndarray
    p_fa: np.ndarray
    p_d: np.ndarray
    slots_evaluated: int

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.taus.tolist(), self.p_fa.tolist(), self.p_d.tolist()))

    def pd_at(self, pfa: float) -> float | None:
        """``p_d`` linearly interpolated at false-alarm rate ``pfa``.

        Points sharing a false-alarm rate contribute their best ``p_d``.
        Returns None outside the curve's false-alarm range.
        """
        fa, idx = np.unique(self.p_fa, return_inverse=True)
        best = np.full(fa.size, -np.inf)
        np.maximum.at(best, idx, self.p_d)
        if not (fa[0] <= pfa <= fa[-1]):
            return None
        return float(np.interp(pfa, fa, best))


def roc_points(statistic: Sequence[float], truth: Sequence[int], tau_grid: Sequence[float] | None = None) -> RocCurve:
    """False-alarm and detection rates of ``statistic >= tau`` for each threshold.

    ``tau_grid=None`` uses every distinct value of the statistic plus ``+inf``,
    which traces the full empirical curve.
    """
    stat = np.asarray(statistic, dtype=float)
    truth = np.asarray(truth)
    if stat.shape != truth.shape:
        raise ValueError("statistic and truth must have equal length")
    busy = truth == 1
    n1 = int(busy.sum())
    n0 = truth.size - n1
    if n0 == 0 or n1 == 0:
        raise ValueError("truth must contain both idle and busy slots")
    taus = np.unique(np.append(stat, np.inf)) if tau_grid is None else np.sort(np.asarray(tau_grid, dtype=float))
    s0 = np.sort(stat[~busy])
    s1 = np.sort(stat[busy])
    p_fa = (n0 - np.searchsorted(s0, taus, side="left")) / n0
    p_d = (n1 - np.searchsorted(s1, taus, side="left")) / n1
    return RocCurve(taus, p_fa, p_d, truth.size)


@dataclass(frozen=True)
class MatchedRow:
    pfa: float
    pd_a: float | None
    pd_b: float | None

    @property
    def gap(self) -> float | None:
        if self.pd_a is None or self.pd_b is None:
            return None
        return self.pd_a - self.pd_b


def compare_at_matched_pfa(curve_a: RocCurve, curve_b: RocCurve, pfa_targets: Sequence[float]) -> list[MatchedRow]:
    """Detection rates of two detectors at equal false-alarm rates.

    ``gap`` is ``pd_a - pd_b``; a missing value means the target lies outside
    that curve's false-alarm range.
    """
    if curve_a.taus.size == 0 or curve_b.taus.size == 0:
        raise ValueError("curves must be non-empty")
    return [MatchedRow(float(f), curve_a.pd_at(f), curve_b.pd_at(f)) for f in pfa_targets]


def memoryless_energy_detector(Y: Sequence[float], threshold: float) -> np.ndarray:
    """Busy wherever ``Y_t >= threshold``, slot by slot."""
    return (np.asarray(Y, dtype=float) >= threshold).astype(np.int64)


@dataclass(frozen=True, eq=False)
class TrackingReport:
    accuracy: float
    mae: float
    per_level_confusion: np.ndarray  # [true, estimated]

    def summary(self, base: int = 0) -> str:
        buf = io.StringIO()
        buf.write(f"accuracy,{self.accuracy:.12g}\nmae,{self.mae:.12g}\n")
        L = self.per_level_confusion.shape[0]
        buf.write("confusion(true\\est)," + ",".join(str(base + j) for j in range(L)) + "\n")
        for i in range(L):
            buf.write(f"{base + i}," + ",".join(str(int(x)) for x in self.per_level_confusion[i]) + "\n")
        return buf.getvalue()


def tracking_report(e_hat: Sequence[int], truth: Sequence[int], L: int | None = None) -> TrackingReport:
    """Accuracy, mean absolute level error and confusion counts of energy estimates."""
    e_hat = np.asarray(e_hat, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if e_hat.shape != truth.shape:
        raise ValueError("e_hat and truth must have equal length")
    if L is None:
        L = int(max(e_hat.max(initial=0), truth.max(initial=0))) + 1
    conf = np.zeros((L, L), dtype=np.int64)
    np.add.at(conf, (truth, e_hat), 1)
    return TrackingReport(float(np.mean(e_hat == truth)), float(np.mean(np.abs(e_hat - truth))), conf)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """KL(p || q) over the trailing two axes; cells with ``p = 0`` contribute nothing."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=(-2, -1))


def mi_gain_mc(params: HimmParams, T: int, n_trials: int, seed=None) -> tuple[float, float]:
    """Monte-Carlo estimate of I(C_T, E_T; U^T | Y^T) with its standard error.

    Uses ``I(X; U | Y) = E[KL(P(X | U, Y) || P(X | Y))]``: each trial draws a
    fresh trajectory and observations, runs the 2-D and the channel-only
    filters, and scores the final-slot divergence between their posteriors.
    """
    if T < 1 or n_trials < 2:
        raise ValueError("need T >= 1 and n_trials >= 2")
    ss_hidden, ss_obs = seed_sequence(seed).spawn(2)
    E, C = generate_hidden_batch(params, n_trials, T, ss_hidden)
    rng = np.random.default_rng(ss_obs)
    cdf_D = np.cumsum(params.D, axis=1)
    cdf_D[:, -1] = 1.0
    u = rng.random(E.shape)
    U = np.minimum((u[..., None] >= cdf_D[E]).sum(axis=-1), params.L - 1)
    Y = params.mu[C, E] + np.sqrt(params.sigma2[C, E]) * rng.standard_normal(E.shape)

    p2 = filter_final_batch(params, U, Y)
    p1 = filter_final_batch(params, None, Y)
    kl = kl_divergence(p2, p1)
    return float(kl.mean()), float(kl.std(ddof=1) / math.sqrt(n_trials))


def dump_roc(curve: RocCurve) -> str:
    buf = io.StringIO()
    buf.write("tau,p_fa,p_d\n")
    for tau, fa, d in curve.points:
        buf.write(f"{tau:.12g},{fa:.12g},{d:.12g}\n")
    return buf.getvalue()
