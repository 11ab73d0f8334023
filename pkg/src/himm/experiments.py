"""End-to-end experiments: data generation, training, detection benchmark,
energy tracking and the mutual-information gain."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import config as cfgmod
from .config import RunConfig
from .em import FitReport, multi_start_fit
from .evaluation import RocCurve, TrackingReport, compare_at_matched_pfa, mi_gain_mc, roc_points, tracking_report
from .filter import map_cells, run_filter
from .model import BUSY, HimmParams
from .simgen import (
    HiddenTrajectory,
    ObservationSequence,
    emit_parametric,
    emit_physical,
    generate_hidden,
)


def simulate(cfg: RunConfig, params: HimmParams, T: int, seed: np.random.SeedSequence,
             snr_db: float | None = None) -> tuple[HiddenTrajectory, ObservationSequence]:
    """Hidden trajectory plus observations under ``cfg.emission``."""
    s_hidden, s_obs = seed.spawn(2)
    traj = generate_hidden(params, T, s_hidden)
    if cfg.emission == "physical":
        obs = emit_physical(cfg.physical(snr_db), params.D, traj, s_obs)
    else:
        obs = emit_parametric(params, traj, s_obs)
    return traj, obs


def generate(cfg: RunConfig, params: HimmParams | None = None, T: int | None = None):
    """Training-style data set at the configured operating SNR."""
    params = cfg.true_params() if params is None else params
    traj, obs = simulate(cfg, params, cfg.T_train if T is None else T, cfg.seed_for(cfgmod.SEED_GENERATE))
    return params, traj, obs


def fit(cfg: RunConfig, obs: ObservationSequence) -> FitReport:
    return multi_start_fit(
        obs, cfg.shape(), n_starts=cfg.n_starts, tol=cfg.tol, max_iter=cfg.max_iter,
        seed=cfg.seed_for(cfgmod.SEED_INIT), mode=cfg.em_mode,
    )


def forbidden_count(posts: np.ndarray, params: HimmParams) -> int:
    """Number of slots whose MAP cell is (busy, insufficient energy)."""
    low = params.shape.low_mask
    c_hat, e_hat = map_cells(posts, low)
    return int(np.sum((c_hat == BUSY) & low[e_hat]))


@dataclass
class SnrPoint:
    snr_db: float
    roc_2d: RocCurve
    roc_1d: RocCurve
    roc_memoryless: RocCurve
    forbidden: int
    slots: int


@dataclass
class BenchmarkResult:
    points: list[SnrPoint]
    pfa_targets: list[float]

    def rows(self) -> list[tuple[float, float, float | None, float | None, float | None]]:
        out = []
        for pt in self.points:
            for f in self.pfa_targets:
                out.append((pt.snr_db, f, pt.roc_2d.pd_at(f), pt.roc_1d.pd_at(f), pt.roc_memoryless.pd_at(f)))
        return out

    def table(self) -> str:
        buf = io.StringIO()
        buf.write("snr_db,pfa_target,pd_2d,pd_1d,pd_memoryless\n")
        for row in self.rows():
            buf.write(",".join("" if v is None else f"{v:.12g}" for v in row) + "\n")
        return buf.getvalue()


def benchmark_point(cfg: RunConfig, index: int, snr_db: float) -> SnrPoint:
    """Run the three detectors on fresh test data at one SNR."""
    truth_params = cfg.true_params(snr_db)
    traj, obs = simulate(cfg, truth_params, cfg.T_test, cfg.seed_for(cfgmod.SEED_TEST, index), snr_db)
    params = truth_params
    if cfg.benchmark_learn:
        _, train = simulate(cfg, truth_params, cfg.T_train, cfg.seed_for(cfgmod.SEED_TEST, index, 1), snr_db)
        params = multi_start_fit(
            train, cfg.shape(), n_starts=cfg.n_starts, tol=cfg.tol, max_iter=cfg.max_iter,
            seed=cfg.seed_for(cfgmod.SEED_INIT, index), mode=cfg.em_mode,
        ).params
    posts2, _ = run_filter(params, obs.U, obs.Y)
    posts1, _ = run_filter(params, None, obs.Y)
    C = traj.C
    return SnrPoint(
        snr_db,
        roc_points(posts2[:, BUSY].sum(axis=1), C, cfg.tau_grid),
        roc_points(posts1[:, BUSY].sum(axis=1), C, cfg.tau_grid),
        roc_points(obs.Y, C),
        forbidden_count(posts2, params) + forbidden_count(posts1, params),
        len(obs),
    )


def benchmark(cfg: RunConfig, progress=None) -> BenchmarkResult:
    """Matched-false-alarm comparison over ``cfg.snr_grid_db``; rows follow grid order."""
    points = []
    for i, snr in enumerate(cfg.snr_grid_db):
        points.append(benchmark_point(cfg, i, snr))
        if progress is not None:
            progress(points[-1])
    return BenchmarkResult(points, list(cfg.pfa_targets))


def track(cfg: RunConfig, params: HimmParams) -> tuple[HiddenTrajectory, np.ndarray, TrackingReport]:
    """Sense a fresh trajectory with the 2-D detector and score the energy estimates.

    Data come from the configured model at ``cfg.snr_db``; ``params`` is what
    the detector believes.
    """
    truth_params = cfg.true_params()
    traj, obs = simulate(cfg, truth_params, cfg.T_track, cfg.seed_for(cfgmod.SEED_TRACK))
    posts, _ = run_filter(params, obs.U, obs.Y)
    _, e_hat = map_cells(posts, params.shape.low_mask)
    return traj, e_hat, tracking_report(e_hat, traj.E, params.L)


def tracking_table(traj: HiddenTrajectory, e_hat: np.ndarray, base: int) -> str:
    buf = io.StringIO()
    buf.write("t,E_true,e_hat\n")
    for t in range(len(traj)):
        buf.write(f"{t + 1},{int(traj.E[t]) + base},{int(e_hat[t]) + base}\n")
    return buf.getvalue()


def mutual_information(cfg: RunConfig, params: HimmParams, horizon: int | None = None,
                       trials: int | None = None) -> tuple[float, float]:
    return mi_gain_mc(params, horizon or cfg.mi_horizon, trials or cfg.mi_trials, cfg.seed_for(cfgmod.SEED_TRIALS))
