"""HIMM parameter set, state spaces, physical configuration and serialization.

Energy levels are stored internally as indices ``0..L-1``; ``ModelShape.base``
maps an index back to the level value (``level = base + index``).  Channel
states are ``0`` (idle) and ``1`` (busy).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, FormatError, ParamValidationError, ShapeError

M = 2
ROW_SUM_TOL = 1e-9
VARIANCE_FLOOR = 1e-12
IDLE, BUSY = 0, 1


@dataclass(frozen=True)
class ModelShape:
    """Energy/channel alphabets.

    ``L0`` holds the level *values* that cannot support a PU transmission; it
    must be a prefix of the ordered alphabet.
    """

    L: int
    base: int = 0
    L0: tuple[int, ...] = ()

    def __post_init__(self):
        if int(self.L) != self.L or self.L < 1:
            raise ConfigError(f"L must be a positive integer, got {self.L!r}")
        if int(self.base) != self.base or self.base < 0:
            raise ConfigError(f"base offset must be a non-negative integer, got {self.base!r}")
        low = tuple(sorted(int(v) for v in self.L0))
        object.__setattr__(self, "L", int(self.L))
        object.__setattr__(self, "base", int(self.base))
        object.__setattr__(self, "L0", low)
        if low != tuple(range(self.base, self.base + len(low))):
            raise ConfigError(f"L0={low} is not a downward-closed prefix of the alphabet {self.levels}")
        if len(low) > self.L:
            raise ConfigError("L0 is larger than the alphabet")

    @classmethod
    def from_threshold(cls, L: int, E_h: int, base: int = 0) -> "ModelShape":
        """Shape whose insufficient set is every level strictly below ``E_h``."""
        return cls(L=L, base=base, L0=tuple(v for v in range(base, base + L) if v < E_h))

    @property
    def M(self) -> int:
        return M

    @property
    def levels(self) -> tuple[int, ...]:
        return tuple(range(self.base, self.base + self.L))

    @property
    def L1(self) -> tuple[int, ...]:
        return self.levels[len(self.L0):]

    @property
    def n_low(self) -> int:
        return len(self.L0)

    @property
    def low_mask(self) -> np.ndarray:
        """Boolean mask over level indices, True on L0."""
        mask = np.zeros(self.L, dtype=bool)
        mask[: self.n_low] = True
        return mask

    def index(self, level) -> np.ndarray | int:
        """Level value(s) to index; raises on values outside the alphabet."""
        idx = np.asarray(level) - self.base
        if np.any(idx < 0) or np.any(idx >= self.L):
            raise ShapeError(f"energy level outside alphabet {self.levels}")
        return int(idx) if np.ndim(idx) == 0 else idx.astype(np.int64)

    def level(self, index) -> np.ndarray | int:
        out = np.asarray(index) + self.base
        return int(out) if np.ndim(out) == 0 else out


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class HimmParams:
    """The parameter set {pi_E, pi_C, A, B, D, mu, sigma2} of the HIMM.

    Array layouts::

        pi_E   (L,)        P(E_1 = i)
        pi_C   (L, 2)      P(C_1 = j | E_1 = i)
        A      (L, L)      P(E_t = j | E_{t-1} = i)
        B      (L, 2, 2)   B[q, i, j] = P(C_t = j | C_{t-1} = i, E_t = q)
        D      (L, L)      P(U_t = j | E_t = i)
        mu     (2, L)      mean of Y_t given (C_t, E_t)
        sigma2 (2, L)      variance of Y_t given (C_t, E_t)

    Arrays are copied and made read-only on construction.
    """

    shape: ModelShape
    pi_E: np.ndarray
    pi_C: np.ndarray
    A: np.ndarray
    B: np.ndarray
    D: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        for name in _ARRAY_FIELDS:
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    @property
    def L(self) -> int:
        return self.shape.L

    def replace(self, **changes) -> "HimmParams":
        kwargs = {name: getattr(self, name) for name in ("shape",) + _ARRAY_FIELDS}
        kwargs.update(changes)
        return HimmParams(**kwargs)

    def allclose(self, other: "HimmParams", atol=0.0, rtol=0.0) -> bool:
        return self.shape == other.shape and all(
            np.allclose(getattr(self, n), getattr(other, n), atol=atol, rtol=rtol) for n in _ARRAY_FIELDS
        )

    def array_equal(self, other: "HimmParams") -> bool:
        return self.shape == other.shape and all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in _ARRAY_FIELDS
        )


_ARRAY_FIELDS = ("pi_E", "pi_C", "A", "B", "D", "mu", "sigma2")


def expected_dims(shape: ModelShape) -> dict[str, tuple[int, ...]]:
    L = shape.L
    return {
        "pi_E": (L,),
        "pi_C": (L, M),
        "A": (L, L),
        "B": (L, M, M),
        "D": (L, L),
        "mu": (M, L),
        "sigma2": (M, L),
    }


@dataclass(frozen=True)
class Violation:
    matrix: str
    row: tuple[int, ...] | int | None
    col: int | None
    message: str

    def __str__(self):
        where = self.matrix
        if self.row is not None:
            where += f"[{self.row}]"
        if self.col is not None:
            where += f"[{self.col}]"
        return f"{where}: {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def raise_if_invalid(self):
        if self.violations:
            raise ParamValidationError(self.violations)


def validate_params(params: HimmParams, shape: ModelShape | None = None) -> ValidationReport:
    """Check every invariant of ``params``.

    Dimension mismatches raise :class:`ShapeError`; invariant violations are
    collected into the returned report.
    """
    shape = params.shape if shape is None else shape
    for name, dims in expected_dims(shape).items():
        got = getattr(params, name).shape
        if got != dims:
            raise ShapeError(f"{name} has shape {got}, expected {dims}")

    out: list[Violation] = []

    def check_simplex(name, arr, row):
        if not np.all(np.isfinite(arr)):
            out.append(Violation(name, row, None, "non-finite entry"))
            return
        for col in np.flatnonzero((arr < 0) | (arr > 1)):
            out.append(Violation(name, row, int(col), f"entry {arr[col]!r} outside [0, 1]"))
        total = float(np.sum(arr))
        if abs(total - 1.0) > ROW_SUM_TOL:
            out.append(Violation(name, row, None, f"row sums to {total!r}, expected 1"))

    check_simplex("pi_E", params.pi_E, None)
    for i in range(shape.L):
        check_simplex("pi_C", params.pi_C[i], i)
        check_simplex("A", params.A[i], i)
        check_simplex("D", params.D[i], i)
        for c in range(M):
            check_simplex("B", params.B[i, c], (i, c))

    for q in range(shape.n_low):
        if params.pi_C[q, BUSY] != 0.0:
            out.append(Violation("pi_C", q, BUSY, "structural zero violated (busy with insufficient energy)"))
        for c in range(M):
            if params.B[q, c, BUSY] != 0.0:
                out.append(Violation("B", (q, c), BUSY, "structural zero violated (busy with insufficient energy)"))

    for c in range(M):
        for j in range(shape.L):
            s2 = params.sigma2[c, j]
            if not (np.isfinite(s2) and s2 > 0):
                out.append(Violation("sigma2", c, j, f"variance {s2!r} is not positive"))
            if not np.isfinite(params.mu[c, j]):
                out.append(Violation("mu", c, j, "non-finite mean"))

    for name in ("mu", "sigma2"):
        row = getattr(params, name)[IDLE]
        for j in np.flatnonzero(row != row[0]):
            out.append(Violation(name, IDLE, int(j), "idle row is not tied across energy levels"))

    return ValidationReport(tuple(out))


# --------------------------------------------------------------------------
# physical configuration


@dataclass(frozen=True)
class PhysicalConfig:
    """Signal-level description of the PU/SU link.

    ``power_of_level`` lists the per-sample PU transmit variance for each level
    of the alphabet, in alphabet order.  ``data_persistence``, when given, is
    the 2x2 transition matrix of the data-availability process.
    """

    E_h: int
    P_0: float
    N: int
    noise_var: float
    channel_gain: float
    power_of_level: tuple[float, ...]
    data_persistence: tuple[tuple[float, float], tuple[float, float]] | None = None

    def __post_init__(self):
        object.__setattr__(self, "power_of_level", tuple(float(p) for p in self.power_of_level))
        if self.data_persistence is not None:
            dp = tuple(tuple(float(x) for x in row) for row in self.data_persistence)
            object.__setattr__(self, "data_persistence", dp)

    def check(self, shape: ModelShape) -> None:
        """Raise :class:`ConfigError` unless consistent with ``shape``."""
        if int(self.N) != self.N or self.N < 1:
            raise ConfigError(f"N must be a positive integer, got {self.N!r}")
        if not (self.noise_var > 0 and math.isfinite(self.noise_var)):
            raise ConfigError(f"noise_var must be positive, got {self.noise_var!r}")
        if not (0.0 <= self.P_0 <= 1.0):
            raise ConfigError(f"P_0 must lie in [0, 1], got {self.P_0!r}")
        if not math.isfinite(self.channel_gain):
            raise ConfigError("channel_gain must be finite")
        p = np.asarray(self.power_of_level)
        if p.shape != (shape.L,):
            raise ConfigError(f"power_of_level needs {shape.L} entries, got {p.size}")
        if np.any(p < 0) or np.any(np.diff(p) < 0) or not np.all(np.isfinite(p)):
            raise ConfigError("power_of_level must be finite, non-negative and nondecreasing")
        low = tuple(v for v in shape.levels if v < self.E_h)
        if low != shape.L0:
            raise ConfigError(f"E_h={self.E_h} implies L0={low}, but shape has L0={shape.L0}")
        if self.data_persistence is not None:
            dp = np.asarray(self.data_persistence)
            if dp.shape != (2, 2) or np.any(dp < 0) or np.any(np.abs(dp.sum(axis=1) - 1) > ROW_SUM_TOL):
                raise ConfigError("data_persistence must be a 2x2 row-stochastic matrix")

    def received_power(self) -> np.ndarray:
        """Per-sample received PU signal power for each level index."""
        return self.channel_gain**2 * np.asarray(self.power_of_level)


def stationary_distribution(P: np.ndarray) -> np.ndarray:
    """Stationary distribution of a row-stochastic matrix (left eigenvector for 1)."""
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    lhs = np.vstack([P.T - np.eye(n), np.ones(n)])
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def build_b_from_scheme(shape: ModelShape, phys: PhysicalConfig) -> tuple[np.ndarray, np.ndarray]:
    """Channel transition family B and initial channel matrix pi_C.

    Levels in L0 force the channel idle.  Elsewhere the channel is busy when
    data is available: independently per slot with probability ``1 - P_0``, or
    following ``phys.data_persistence`` when it is set.
    """
    if not (0.0 <= phys.P_0 <= 1.0):
        raise ConfigError(f"P_0 must lie in [0, 1], got {phys.P_0!r}")
    if phys.data_persistence is None:
        row = np.array([phys.P_0, 1.0 - phys.P_0])
        active = np.array([row, row])
        init_row = row
    else:
        active = np.asarray(phys.data_persistence, dtype=float)
        init_row = stationary_distribution(active)

    B = np.empty((shape.L, M, M))
    pi_C = np.empty((shape.L, M))
    low = shape.low_mask
    B[low] = [[1.0, 0.0], [1.0, 0.0]]
    pi_C[low] = [1.0, 0.0]
    B[~low] = active
    pi_C[~low] = init_row
    return B, pi_C


def emission_moments_from_physical(phys: PhysicalConfig, shape: ModelShape) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance of ``Y_t = sum_n x_t(n)^2`` for each (channel, level).

    With per-sample variance ``v``, ``Y_t / v`` is chi-square with ``N``
    degrees of freedom, so ``E[Y] = N v`` and ``Var[Y] = 2 N v^2``.  The
    Gaussian emission model is only a good fit when ``N`` is reasonably large.
    """
    N, s2 = phys.N, phys.noise_var
    v_busy = s2 + phys.received_power()
    mu = np.empty((M, shape.L))
    sigma2 = np.empty((M, shape.L))
    mu[IDLE] = N * s2
    sigma2[IDLE] = 2.0 * N * s2**2
    mu[BUSY] = N * v_busy
    sigma2[BUSY] = 2.0 * N * v_busy**2
    return mu, sigma2


def params_from_physical(
    shape: ModelShape,
    phys: PhysicalConfig,
    A: np.ndarray,
    D: np.ndarray,
    pi_E: np.ndarray | None = None,
) -> HimmParams:
    """Assemble a full parameter set from energy dynamics and the physical link.

    ``pi_E`` defaults to the stationary distribution of ``A``.
    """
    phys.check(shape)
    B, pi_C = build_b_from_scheme(shape, phys)
    mu, sigma2 = emission_moments_from_physical(phys, shape)
    if pi_E is None:
        pi_E = stationary_distribution(A)
    params = HimmParams(shape, pi_E, pi_C, A, B, D, mu, sigma2)
    validate_params(params).raise_if_invalid()
    return params


# --------------------------------------------------------------------------
# random construction


def _random_rows(rng: np.random.Generator, shape, zero_mask=None) -> np.ndarray:
    x = rng.uniform(0.0, 1.0, size=shape)
    # uniform(0, 1) can return exactly 0; keep rows strictly positive
    x = np.where(x == 0.0, np.finfo(float).tiny, x)
    if zero_mask is not None:
        x = np.where(zero_mask, 0.0, x)
    return x / x.sum(axis=-1, keepdims=True)


def random_params(
    shape: ModelShape,
    seed=None,
    mu_range: tuple[float, float] = (0.0, 1.0),
    sigma2_range: tuple[float, float] = (0.1, 1.0),
    ordered_means: bool = False,
) -> HimmParams:
    """Random valid parameters: uniform(0, 1) entries with row normalization.

    Structural zeros are applied before normalizing.  With ``ordered_means``
    every busy mean is drawn at or above the (tied) idle mean, which pins the
    idle/busy labelling to the physical fact that a transmitting PU adds
    energy to the channel.
    """
    lo, hi = mu_range
    s_lo, s_hi = sigma2_range
    if not (hi >= lo and s_hi >= s_lo > 0):
        raise ConfigError("invalid mu_range or sigma2_range")
    rng = np.random.default_rng(seed)
    L = shape.L
    low = shape.low_mask

    pi_E = _random_rows(rng, (L,))
    busy_zero = np.zeros((L, M), dtype=bool)
    busy_zero[low, BUSY] = True
    pi_C = _random_rows(rng, (L, M), busy_zero)
    A = _random_rows(rng, (L, L))
    B = _random_rows(rng, (L, M, M), np.broadcast_to(busy_zero[:, None, :], (L, M, M)))
    D = _random_rows(rng, (L, L))

    mu = np.empty((M, L))
    sigma2 = np.empty((M, L))
    mu[IDLE] = rng.uniform(lo, hi)
    mu[BUSY] = rng.uniform(mu[IDLE, 0] if ordered_means else lo, hi, size=L)
    sigma2[IDLE] = rng.uniform(s_lo, s_hi)
    sigma2[BUSY] = rng.uniform(s_lo, s_hi, size=L)
    return HimmParams(shape, pi_E, pi_C, A, B, D, mu, sigma2)


# --------------------------------------------------------------------------
# serialization


def _fmt(x) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise FormatError(f"cannot serialize non-finite value {x!r}")
    return "%.17g" % x


def _emit(value, indent=0) -> str:
    pad = "  " * indent
    if isinstance(value, Mapping):
        items = [f'{pad}  {json.dumps(k)}: {_emit(v, indent + 1).lstrip()}' for k, v in value.items()]
        return pad + "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(value, np.ndarray):
        value = value.tolist()
    if isinstance(value, (list, tuple)):
        if value and isinstance(value[0], (list, tuple)):
            inner = ",\n".join(_emit(v, indent + 1) for v in value)
            return pad + "[\n" + inner + "\n" + pad + "]"
        return pad + "[" + ", ".join(_emit(v).strip() for v in value) + "]"
    if isinstance(value, bool) or value is None or isinstance(value, (int, np.integer, str)):
        return pad + json.dumps(value if not isinstance(value, np.integer) else int(value))
    return pad + _fmt(value)


def dump_params(params: HimmParams) -> bytes:
    """Serialize to a JSON document with 17 significant digits per number."""
    s = params.shape
    doc = {
        "shape": {"L": s.L, "M": M, "base": s.base, "L0": list(s.L0)},
        **{name: getattr(params, name) for name in _ARRAY_FIELDS},
    }
    return (_emit(doc) + "\n").encode("utf-8")


def load_params(data: bytes | str) -> HimmParams:
    """Parse and validate a parameter document produced by :func:`dump_params`."""
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed parameter document: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError("parameter document must be a JSON object")
    missing = [k for k in ("shape",) + _ARRAY_FIELDS if k not in doc]
    if missing:
        raise FormatError(f"parameter document missing fields: {missing}")
    sh = doc["shape"]
    try:
        if int(sh.get("M", M)) != M:
            raise ShapeError(f"only M={M} channel states are supported")
        shape = ModelShape(L=sh["L"], base=sh.get("base", 0), L0=tuple(sh.get("L0", ())))
        arrays = {name: np.array(doc[name], dtype=np.float64) for name in _ARRAY_FIELDS}
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ShapeError):
            raise
        raise FormatError(f"bad parameter document: {exc}") from exc
    arrays["sigma2"] = np.maximum(arrays["sigma2"], VARIANCE_FLOOR)
    params = HimmParams(shape, **arrays)
    validate_params(params).raise_if_invalid()
    return params


def write_params(params: HimmParams, path) -> None:
    Path(path).write_bytes(dump_params(params))


def read_params(path) -> HimmParams:
    return load_params(Path(path).read_bytes())


def physical_to_dict(phys: PhysicalConfig, shape: ModelShape) -> dict:
    return {
        "E_h": phys.E_h,
        "P_0": phys.P_0,
        "N": phys.N,
        "noise_var": phys.noise_var,
        "channel_gain": phys.channel_gain,
        "power_of_level": {str(v): p for v, p in zip(shape.levels, phys.power_of_level)},
        "data_persistence": None if phys.data_persistence is None else [list(r) for r in phys.data_persistence],
    }


def physical_from_dict(doc: Mapping, shape: ModelShape) -> PhysicalConfig:
    """Build a :class:`PhysicalConfig`; ``power_of_level`` may be a list or a level->power map."""
    try:
        pol = doc["power_of_level"]
        if isinstance(pol, Mapping):
            keyed = {int(k): float(v) for k, v in pol.items()}
            if set(keyed) != set(shape.levels):
                raise ConfigError(f"power_of_level keys {sorted(keyed)} do not match levels {shape.levels}")
            pol = [keyed[v] for v in shape.levels]
        phys = PhysicalConfig(
            E_h=int(doc["E_h"]),
            P_0=float(doc["P_0"]),
            N=int(doc["N"]),
            noise_var=float(doc["noise_var"]),
            channel_gain=float(doc["channel_gain"]),
            power_of_level=tuple(pol),
            data_persistence=doc.get("data_persistence"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad physical config: {exc}") from exc
    phys.check(shape)
    return phys


def dump_physical(phys: PhysicalConfig, shape: ModelShape) -> bytes:
    return (_emit(physical_to_dict(phys, shape)) + "\n").encode("utf-8")


def load_physical(data: bytes | str, shape: ModelShape) -> PhysicalConfig:
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed physical config: {exc}") from exc
    return physical_from_dict(doc, shape)


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)
