"""Linear time-periodic models and their harmonic transfer functions."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg as sla

from hybrid_hpf.harmonic import HarmonicSet, frequency_shift, toeplitz_from_series


class ResonanceError(np.linalg.LinAlgError):
    """``N - A~`` is singular: the system resonates at a lifted frequency."""

    def __init__(self, order: int, variable: int):
        self.order = order
        self.variable = variable
        super().__init__(f"resonance at lifted frequency: harmonic order {order} (state {variable})")


class AlgebraicLoopError(np.linalg.LinAlgError):
    pass


def _normalize_series(series, shape=None) -> dict[int, np.ndarray]:
    if not isinstance(series, Mapping):
        series = {0: series}
    out = {int(k): np.atleast_2d(np.asarray(v, dtype=complex)) for k, v in series.items()}
    shapes = {v.shape for v in out.values()}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent dimensions across Fourier orders: {sorted(shapes)}")
    if shape is not None and shapes.pop() != shape:
        raise ValueError(f"expected blocks of shape {shape}")
    if 0 not in out:
        out[0] = np.zeros(next(iter(out.values())).shape, dtype=complex)
    return out


@dataclass(frozen=True, eq=False)
class LtpStateSpace:
    """``x' = A(t) x + B(t) u``, ``y = C(t) x + D(t) u`` with Fourier-series matrices."""

    harmonic_set: HarmonicSet
    A: Mapping[int, np.ndarray]
    B: Mapping[int, np.ndarray]
    C: Mapping[int, np.ndarray]
    D: Mapping[int, np.ndarray] | None = None
    state_dim: int = field(init=False)
    in_dim: int = field(init=False)
    out_dim: int = field(init=False)

    def __post_init__(self):
        A = _normalize_series(self.A)
        n = A[0].shape[0]
        if A[0].shape != (n, n):
            raise ValueError("A must be square")
        B = _normalize_series(self.B)
        m = B[0].shape[1]
        C = _normalize_series(self.C)
        p = C[0].shape[0]
        D = _normalize_series(self.D if self.D is not None else np.zeros((p, m)))
        _normalize_series(B, (n, m))
        _normalize_series(C, (p, n))
        _normalize_series(D, (p, m))
        for name, val in (("A", A), ("B", B), ("C", C), ("D", D)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "state_dim", n)
        object.__setattr__(self, "in_dim", m)
        object.__setattr__(self, "out_dim", p)

    def is_lti(self) -> bool:
        return all(not np.any(v) for s in (self.A, self.B, self.C, self.D)
                   for k, v in s.items() if k != 0)

    def is_real(self, atol: float = 1e-12) -> bool:
        for s in (self.A, self.B, self.C, self.D):
            for k, v in s.items():
                other = s.get(-k, np.zeros_like(v))
                if not np.allclose(other, np.conj(v), atol=atol, rtol=0):
                    return False
        return True

    def lifted(self):
        hs = self.harmonic_set
        return tuple(toeplitz_from_series(s, hs).matrix() for s in (self.A, self.B, self.C, self.D))

    def real_series(self, which: str, kmax: int | None = None):
        """Cosine/sine coefficient stacks ``(Ac, As)`` of a real periodic matrix."""
        s = getattr(self, which)
        kmax = max(abs(k) for k in s) if kmax is None else kmax
        shape = s[0].shape
        Ac = np.zeros((kmax + 1,) + shape)
        As = np.zeros((kmax + 1,) + shape)
        Ac[0] = s[0].real
        for k in range(1, kmax + 1):
            mk = s.get(k, np.zeros(shape))
            Ac[k] = 2.0 * mk.real
            As[k] = -2.0 * mk.imag
        return Ac, As

    def evaluate(self, which: str, t: float) -> np.ndarray:
        s = getattr(self, which)
        w0 = self.harmonic_set.omega0
        return np.real(sum(v * np.exp(1j * k * w0 * t) for k, v in s.items()))


@dataclass(frozen=True, eq=False)
class HarmonicTransferFunction:
    """Maps input Fourier vectors ``(in_dim, n)`` to output vectors ``(out_dim, n)``."""

    harmonic_set: HarmonicSet
    matrix: np.ndarray
    in_dim: int
    out_dim: int

    def __post_init__(self):
        n = self.harmonic_set.n
        if self.matrix.shape != (self.out_dim * n, self.in_dim * n):
            raise ValueError("matrix shape does not match dimensions and harmonic set")

    def apply(self, U) -> np.ndarray:
        n = self.harmonic_set.n
        u = np.asarray(U, dtype=complex).reshape(self.in_dim * n)
        return (self.matrix @ u).reshape(self.out_dim, n)

    def block(self, h_out: int, h_in: int) -> np.ndarray:
        """``(out_dim, in_dim)`` coupling from input order ``h_in`` to output order ``h_out``."""
        n = self.harmonic_set.n
        a, b = self.harmonic_set.index(h_out), self.harmonic_set.index(h_in)
        return self.matrix[a::n, b::n]

    def is_block_diagonal(self) -> bool:
        h = self.harmonic_set.array
        rows = np.tile(h, self.out_dim)
        cols = np.tile(h, self.in_dim)
        mask = rows[:, None] != cols[None, :]
        return not np.any(self.matrix[mask])

    def diagonal(self, h: int) -> np.ndarray:
        return self.block(h, h)


def shifted_factor(sys: LtpStateSpace, At: np.ndarray):
    hs = sys.harmonic_set
    M = frequency_shift(hs, sys.state_dim).toarray() - At
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(M, check_finite=False)
    d = np.abs(np.diag(lu))
    scale = max(np.abs(M).max(), 1e-300)
    worst = int(np.argmin(d))
    if not np.isfinite(d).all() or d[worst] <= 1e-13 * scale:
        raise ResonanceError(int(hs.orders[worst % hs.n]), worst // hs.n)
    return lu, piv


def htf_from_ltp(sys: LtpStateSpace) -> HarmonicTransferFunction:
    """``C~ (N - A~)^{-1} B~ + D~`` on the system's harmonic set."""
    At, Bt, Ct, Dt = sys.lifted()
    lu_piv = shifted_factor(sys, At)
    G = Ct @ sla.lu_solve(lu_piv, Bt, check_finite=False) + Dt
    return HarmonicTransferFunction(sys.harmonic_set, G, sys.in_dim, sys.out_dim)


def steady_state(sys: LtpStateSpace, U) -> tuple[np.ndarray, np.ndarray]:
    """Periodic steady-state state and output spectra for input spectra ``U``."""
    At, Bt, Ct, Dt = sys.lifted()
    lu_piv = shifted_factor(sys, At)
    n = sys.harmonic_set.n
    u = np.asarray(U, dtype=complex).reshape(sys.in_dim * n)
    x = sla.lu_solve(lu_piv, Bt @ u, check_finite=False)
    y = Ct @ x + Dt @ u
    return x.reshape(sys.state_dim, n), y.reshape(sys.out_dim, n)


@dataclass(frozen=True)
class NicHardwareParams:
    """LCL filter and DC-link of a converter (SI units unless scaled)."""

    L_conv: float = 1.0e-3
    L_grid: float = 0.5e-3
    C_filter: float = 10e-6
    R_conv: float = 0.05
    R_grid: float = 0.05
    R_filter: float = 1.0
    C_dc: float = 2.0e-3

    def __post_init__(self):
        for name in ("L_conv", "L_grid", "C_filter", "C_dc"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        for name in ("R_conv", "R_grid", "R_filter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def scaled(self, z_ac: float, z_dc: float) -> "NicHardwareParams":
        """Per-unit copy (time stays in seconds: L/Z, C*Z)."""
        return NicHardwareParams(
            L_conv=self.L_conv / z_ac, L_grid=self.L_grid / z_ac, C_filter=self.C_filter * z_ac,
            R_conv=self.R_conv / z_ac, R_grid=self.R_grid / z_ac, R_filter=self.R_filter / z_ac,
            C_dc=self.C_dc * z_dc,
        )


def lcl_matrices(params: NicHardwareParams, phases: int = 3):
    """Real ``(A, B, C)`` of the LCL filter; states ``(i_conv, v_cap, i_grid)``.

    Inputs ``(v_conv, v_grid)``; outputs ``(i_grid, i_conv)``.  The filter
    capacitor carries the series damping resistor ``R_filter``.
    """
    p = phases
    I = np.eye(p)
    L1, L2, Cf = params.L_conv, params.L_grid, params.C_filter
    R1, R2, Rc = params.R_conv, params.R_grid, params.R_filter
    A = np.block([
        [-(R1 + Rc) / L1 * I, -I / L1, Rc / L1 * I],
        [I / Cf, 0 * I, -I / Cf],
        [Rc / L2 * I, I / L2, -(R2 + Rc) / L2 * I],
    ])
    Z = np.zeros((p, p))
    B = np.block([[I / L1, Z], [Z, Z], [Z, -I / L2]])
    C = np.block([[Z, Z, I], [I, Z, Z]])
    return A, B, C


def build_lcl_state_space(params: NicHardwareParams, hset: HarmonicSet, phases: int = 3) -> LtpStateSpace:
    A, B, C = lcl_matrices(params, phases)
    return LtpStateSpace(hset, {0: A}, {0: B}, {0: C})


def build_dclink_state_space(C_dc: float, hset: HarmonicSet) -> LtpStateSpace:
    """``C_dc dv/dt = i_net``; single state and output ``v``."""
    if not C_dc > 0:
        raise ValueError("C_dc must be strictly positive")
    return LtpStateSpace(hset, {0: [[0.0]]}, {0: [[1.0 / C_dc]]}, {0: [[1.0]]})


@dataclass(frozen=True)
class Feedback:
    """Controller reads ``plant_outputs`` and adds ``sign * K y`` to ``plant_inputs``.

    ``None`` selects all channels.
    """

    sign: float = -1.0
    plant_inputs: Sequence[int] | None = None
    plant_outputs: Sequence[int] | None = None
    name: str = "feedback"


def _selector(channels, dim, n):
    idx = range(dim) if channels is None else channels
    S = np.zeros((len(idx) * n, dim * n))
    for a, c in enumerate(idx):
        S[a * n:(a + 1) * n, c * n:(c + 1) * n] = np.eye(n)
    return S


def interconnect(plant: HarmonicTransferFunction, controller: HarmonicTransferFunction,
                 feedback: Feedback = Feedback()) -> HarmonicTransferFunction:
    """Closed loop ``y = (I - s G E K F)^{-1} G w`` from plant inputs to plant outputs."""
    hs = plant.harmonic_set
    n = hs.n
    F = _selector(feedback.plant_outputs, plant.out_dim, n)
    E = _selector(feedback.plant_inputs, plant.in_dim, n).T
    if controller.matrix.shape != (E.shape[1], F.shape[0]):
        raise ValueError(f"controller dimensions incompatible with {feedback.name!r}")
    G = plant.matrix
    M = np.eye(G.shape[0]) - feedback.sign * G @ E @ controller.matrix @ F
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu, piv = sla.lu_factor(M, check_finite=False)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise AlgebraicLoopError(f"algebraic loop in {feedback.name!r} is singular") from exc
    if np.min(np.abs(np.diag(lu))) <= 1e-13 * max(1.0, np.abs(M).max()):
        raise AlgebraicLoopError(f"algebraic loop in {feedback.name!r} is singular")
    closed = sla.lu_solve((lu, piv), G, check_finite=False)
    return HarmonicTransferFunction(hs, closed, plant.in_dim, plant.out_dim)
