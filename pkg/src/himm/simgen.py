"""Hidden PU trajectories and SU observations.

Two observation generators are provided: :func:`emit_parametric` samples the
fitted Gaussian emission model directly, :func:`emit_physical` simulates the
raw received samples and sums their energy.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError
from .model import BUSY, HimmParams, ModelShape, PhysicalConfig

# samples drawn per chunk in emit_physical; bounds memory at ~2**22 floats
_CHUNK = 1 << 22


@dataclass(frozen=True, eq=False)
class HiddenTrajectory:
    """Latent energy level indices ``E`` and channel states ``C``."""

    E: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        E = np.array(self.E, dtype=np.int64)
        C = np.array(self.C, dtype=np.int64)
        if E.ndim != 1 or E.shape != C.shape:
            raise ShapeError("E and C must be 1-D sequences of equal length")
        E.setflags(write=False)
        C.setflags(write=False)
        object.__setattr__(self, "E", E)
        object.__setattr__(self, "C", C)

    def __len__(self):
        return self.E.size

    def check(self, shape: ModelShape) -> None:
        if np.any((self.E < 0) | (self.E >= shape.L)) or np.any((self.C < 0) | (self.C > 1)):
            raise ShapeError("trajectory values outside the model alphabets")
        if np.any(self.C[shape.low_mask[self.E]] == BUSY):
            raise ShapeError("trajectory contains a busy slot with insufficient energy")


@dataclass(frozen=True, eq=False)
class ObservationSequence:
    """SU energy level indices ``U`` and received-energy statistics ``Y``."""

    U: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        U = np.array(self.U, dtype=np.int64)
        Y = np.array(self.Y, dtype=np.float64)
        if U.ndim != 1 or U.shape != Y.shape:
            raise ShapeError("U and Y must be 1-D sequences of equal length")
        if not np.all(np.isfinite(Y)):
            raise ShapeError("Y contains non-finite values")
        U.setflags(write=False)
        Y.setflags(write=False)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "Y", Y)

    def __len__(self):
        return self.U.size


def _categorical_rows(rng, cdf_rows: np.ndarray) -> np.ndarray:
    """One categorical draw per row of cumulative probabilities."""
    u = rng.random(cdf_rows.shape[0])
    idx = (u[:, None] >= cdf_rows).sum(axis=1)
    return np.minimum(idx, cdf_rows.shape[1] - 1)


def _cdf(P: np.ndarray) -> np.ndarray:
    c = np.cumsum(P, axis=-1)
    # last entry exactly 1 so rounding never pushes a draw past the final state
    c[..., -1] = 1.0
    return c


def generate_hidden(params: HimmParams, T: int, seed=None) -> HiddenTrajectory:
    """Sample ``(E_t, C_t)`` for ``t = 1..T`` from the HIMM dynamics."""
    if T < 1:
        raise ValueError("T must be at least 1")
    rng = np.random.default_rng(seed)
    cdf_E0, cdf_C0 = _cdf(params.pi_E), _cdf(params.pi_C)
    cdf_A, cdf_B = _cdf(params.A), _cdf(params.B)
    draws = rng.random((T, 2))

    E = np.empty(T, dtype=np.int64)
    C = np.empty(T, dtype=np.int64)
    e = int(np.searchsorted(cdf_E0, draws[0, 0], side="right"))
    c = int(np.searchsorted(cdf_C0[e], draws[0, 1], side="right"))
    E[0], C[0] = e, c
    for t in range(1, T):
        e = int(np.searchsorted(cdf_A[e], draws[t, 0], side="right"))
        c = int(np.searchsorted(cdf_B[e, c], draws[t, 1], side="right"))
        E[t], C[t] = e, c
    return HiddenTrajectory(E, C)


def generate_hidden_batch(params: HimmParams, n: int, T: int, seed=None) -> tuple[np.ndarray, np.ndarray]:
    """``n`` independent trajectories at once; returns ``(E, C)`` of shape (n, T)."""
    if T < 1 or n < 1:
        raise ValueError("n and T must be at least 1")
    rng = np.random.default_rng(seed)
    cdf_A, cdf_B = _cdf(params.A), _cdf(params.B)
    E = np.empty((n, T), dtype=np.int64)
    C = np.empty((n, T), dtype=np.int64)
    E[:, 0] = _categorical_rows(rng, np.broadcast_to(_cdf(params.pi_E), (n, params.L)))
    C[:, 0] = _categorical_rows(rng, _cdf(params.pi_C)[E[:, 0]])
    for t in range(1, T):
        E[:, t] = _categorical_rows(rng, cdf_A[E[:, t - 1]])
        C[:, t] = _categorical_rows(rng, cdf_B[E[:, t], C[:, t - 1]])
    return E, C


def emit_u(D: np.ndarray, E: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """SU energy observations, ``U_t ~ D[E_t]`` independently per slot."""
    return _categorical_rows(rng, _cdf(np.asarray(D))[E])


def emit_parametric(params: HimmParams, traj: HiddenTrajectory, seed=None) -> ObservationSequence:
    """Sample U from ``D`` and Y from the Gaussian emission model."""
    traj.check(params.shape)
    rng = np.random.default_rng(seed)
    U = emit_u(params.D, traj.E, rng)
    mean = params.mu[traj.C, traj.E]
    std = np.sqrt(params.sigma2[traj.C, traj.E])
    Y = mean + std * rng.standard_normal(len(traj))
    return ObservationSequence(U, Y)


def emit_physical(phys: PhysicalConfig, D: np.ndarray, traj: HiddenTrajectory, seed=None) -> ObservationSequence:
    """Simulate ``x_t(n) = h s_t(n) + u_t(n)`` and sum its squares over each slot.

    Signal samples are zero-mean Gaussian with variance ``power_of_level[E_t]``
    and are only present in busy slots.
    """
    rng = np.random.default_rng(seed)
    T, N = len(traj), int(phys.N)
    U = emit_u(D, traj.E, rng)
    sig_std = np.sqrt(np.asarray(phys.power_of_level))[traj.E] * (traj.C == BUSY)
    noise_std = np.sqrt(phys.noise_var)
    h = phys.channel_gain

    Y = np.empty(T)
    step = max(1, _CHUNK // N)
    for start in range(0, T, step):
        stop = min(T, start + step)
        n = stop - start
        noise = noise_std * rng.standard_normal((n, N))
        signal = sig_std[start:stop, None] * rng.standard_normal((n, N))
        x = h * signal + noise
        Y[start:stop] = np.einsum("ij,ij->i", x, x)
    return ObservationSequence(U, Y)


# --------------------------------------------------------------------------
# table dump

TABLE_COLUMNS = ("t", "E", "C", "U", "Y")


def dump_table(shape: ModelShape, traj: HiddenTrajectory | None, obs: ObservationSequence) -> str:
    """Comma-separated table ``t,E,C,U,Y`` with level values (not indices).

    ``E`` and ``C`` are left empty when no trajectory is given.
    """
    buf = io.StringIO()
    buf.write(",".join(TABLE_COLUMNS) + "\n")
    for t in range(len(obs)):
        e = "" if traj is None else str(shape.level(int(traj.E[t])))
        c = "" if traj is None else str(int(traj.C[t]))
        buf.write(f"{t + 1},{e},{c},{shape.level(int(obs.U[t]))},{obs.Y[t]:.12g}\n")
    return buf.getvalue()


def load_table(text: str, shape: ModelShape) -> tuple[HiddenTrajectory | None, ObservationSequence]:
    """Inverse of :func:`dump_table`; the trajectory is None if E/C are blank."""
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise FormatError("observation table is empty")
    missing = {"U", "Y"} - set(rows[0])
    if missing:
        raise FormatError(f"observation table missing columns {sorted(missing)}")
    try:
        U = shape.index(np.array([int(r["U"]) for r in rows]))
        Y = np.array([float(r["Y"]) for r in rows])
        have_truth = all(r.get("E") not in (None, "") and r.get("C") not in (None, "") for r in rows)
        traj = None
        if have_truth:
            traj = HiddenTrajectory(shape.index(np.array([int(r["E"]) for r in rows])),
                                    np.array([int(r["C"]) for r in rows]))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ShapeError):
            raise
        raise FormatError(f"bad observation table: {exc}") from exc
    return traj, ObservationSequence(U, Y)
