"""Run configuration for the command-line experiments.

Config files are JSON.  Decibel quantities (``noise_dbw``, ``path_loss_db``,
``snr_db``) are converted to linear units here and nowhere else.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .model import HimmParams, ModelShape, PhysicalConfig, db_to_linear, params_from_physical

# named sub-seed slots derived from the master seed
SEED_GENERATE, SEED_INIT, SEED_TEST, SEED_TRIALS, SEED_TRACK = range(5)


def banded_transition(L: int, stay: float) -> list[list[float]]:
    """Energy chain that stays put with prob ``stay`` and otherwise moves one level."""
    A = np.zeros((L, L))
    for i in range(L):
        nbrs = [j for j in (i - 1, i + 1) if 0 <= j < L]
        A[i, i] = stay if nbrs else 1.0
        for j in nbrs:
            A[i, j] = (1.0 - stay) / len(nbrs)
    return A.tolist()


def diagonal_emission(L: int, diag: float) -> list[list[float]]:
    """SU observation matrix with ``diag`` on the diagonal, the rest spread evenly."""
    if L == 1:
        return [[1.0]]
    off = (1.0 - diag) / (L - 1)
    return (np.full((L, L), off) + np.eye(L) * (diag - off)).tolist()


@dataclass
class RunConfig:
    """Everything needed to reproduce one experiment from a master seed."""

    levels: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    E_h: int = 2
    P_0: float = 0.2
    N: int = 100
    noise_dbw: float = 3.0
    path_loss_db: float = -4.0
    power_profile: list[float] = field(default_factory=lambda: [1.0, 2.0, 3.0, 4.0])
    data_persistence: list[list[float]] | None = None
    A: list[list[float]] = field(default_factory=lambda: banded_transition(4, 0.8))
    D: list[list[float]] = field(default_factory=lambda: diagonal_emission(4, 0.7))
    pi_E: list[float] | None = None
    snr_db: float = 0.0
    snr_grid_db: list[float] = field(default_factory=lambda: [-10.0 + 2.5 * k for k in range(9)])
    emission: str = "physical"
    T_train: int = 5000
    T_test: int = 20000
    T_track: int = 10000
    n_starts: int = 15
    tol: float = 1e-6
    max_iter: int = 500
    em_mode: str = "split"
    benchmark_learn: bool = False
    tau_grid: list[float] | None = None
    pfa_targets: list[float] = field(default_factory=lambda: [0.05, 0.1, 0.2])
    mi_horizon: int = 10
    mi_trials: int = 2000
    seed: int = 2015
    output_dir: str = "out"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("N", "T_train", "T_test", "T_track", "n_starts", "max_iter", "mi_horizon", "mi_trials"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        for name in ("noise_dbw", "path_loss_db", "snr_db", "P_0", "tol"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")
        if not all(math.isfinite(s) for s in self.snr_grid_db) or not self.snr_grid_db:
            raise ConfigError("snr_grid_db must be a non-empty list of finite values")
        if self.tol <= 0:
            raise ConfigError("tol must be positive")
        if self.em_mode not in ("split", "joint"):
            raise ConfigError("em_mode must be 'split' or 'joint'")
        if self.emission not in ("physical", "parametric"):
            raise ConfigError("emission must be 'physical' or 'parametric'")
        if list(self.levels) != list(range(self.levels[0], self.levels[0] + len(self.levels))) or self.levels[0] < 0:
            raise ConfigError("levels must be consecutive non-negative integers")
        if len(self.power_profile) != len(self.levels):
            raise ConfigError("power_profile needs one entry per level")
        if not any(v >= self.E_h for v in self.levels):
            raise ConfigError("E_h leaves no level able to transmit")
        if not all(0.0 <= f <= 1.0 for f in self.pfa_targets):
            raise ConfigError("pfa_targets must lie in [0, 1]")
        self.shape()  # alphabet checks

    # ------------------------------------------------------------------
    def shape(self) -> ModelShape:
        return ModelShape.from_threshold(len(self.levels), self.E_h, base=self.levels[0])

    @property
    def noise_var(self) -> float:
        return db_to_linear(self.noise_dbw)

    @property
    def channel_gain(self) -> float:
        return math.sqrt(db_to_linear(self.path_loss_db))

    def physical(self, snr_db: float | None = None) -> PhysicalConfig:
        """Physical link with transmit powers scaled to the requested SNR.

        SNR is received PU power over noise power, averaged uniformly over the
        levels that can transmit.
        """
        snr = db_to_linear(self.snr_db if snr_db is None else snr_db)
        shape = self.shape()
        profile = np.asarray(self.power_profile, dtype=float)
        active = profile[shape.n_low:]
        if active.mean() <= 0:
            raise ConfigError("power_profile is zero on every transmitting level")
        scale = snr * self.noise_var / (self.channel_gain**2 * active.mean())
        phys = PhysicalConfig(
            E_h=self.E_h, P_0=self.P_0, N=self.N, noise_var=self.noise_var, channel_gain=self.channel_gain,
            power_of_level=tuple(scale * profile), data_persistence=self.data_persistence,
        )
        phys.check(shape)
        return phys

    def true_params(self, snr_db: float | None = None) -> HimmParams:
        pi_E = None if self.pi_E is None else np.asarray(self.pi_E, dtype=float)
        try:
            return params_from_physical(self.shape(), self.physical(snr_db), np.asarray(self.A, float),
                                        np.asarray(self.D, float), pi_E)
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"config does not define valid parameters: {exc}") from exc

    def seed_for(self, slot: int, *sub: int) -> np.random.SeedSequence:
        return np.random.SeedSequence(self.seed, spawn_key=(slot,) + tuple(sub))

    # ------------------------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"malformed config {path}: {exc}") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(doc)

    def with_overrides(self, **changes) -> "RunConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        return dataclasses.replace(self, **changes)
