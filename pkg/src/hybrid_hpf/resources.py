"""Single-port resource responses.

A response maps its terminal input spectrum to its output spectrum, both of
shape ``(phases, n_orders)``: grid-forming devices map injected current to
voltage, grid-following devices map voltage to injected current.  Jacobians
are real-stacked (re/im interleaved) over the ``(phase, order)`` layout with
the order running fastest, see :func:`hybrid_hpf.harmonic.real_stack_matrix`.

Injected current is positive; a load draws negative current.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from hybrid_hpf.harmonic import HarmonicSet, real_stack_matrix

FORMING, FOLLOWING = "forming", "following"
MIN_OPERATING_VOLTAGE = 0.1


class LinearizationError(ValueError):
    pass


def phase_rotation(hset: HarmonicSet, phases: int) -> np.ndarray:
    """``exp(-j h 2 pi p / 3)`` for a balanced positive-sequence set, shape ``(phases, n)``."""
    if phases == 1:
        return np.ones((1, hset.n), complex)
    p = np.arange(phases)[:, None]
    return np.exp(-1j * hset.array[None, :] * 2 * np.pi * p / 3)


def balanced_spectrum(hset: HarmonicSet, phases: int, lines) -> np.ndarray:
    """Double-sided coefficients from ``{h: (single-sided magnitude, angle)}`` (h >= 0)."""
    X = np.zeros((phases, hset.n), complex)
    rot = phase_rotation(hset, phases)
    for h, (mag, ang) in lines.items():
        if h not in hset.orders:
            continue
        if h == 0:
            X[:, hset.index(0)] = mag * np.cos(ang)
            continue
        c = 0.5 * mag * np.exp(1j * ang)
        X[:, hset.index(h)] = c * rot[:, hset.index(h)]
        X[:, hset.index(-h)] = np.conj(c) * rot[:, hset.index(-h)]
    return X


def fundamental_magnitude(X: np.ndarray, hset: HarmonicSet) -> np.ndarray:
    """Single-sided fundamental magnitude per phase."""
    return 2.0 * np.abs(X[:, hset.index(1)])


@dataclass
class OperatingPoint:
    V: np.ndarray
    I: np.ndarray

    def distance(self, other: "OperatingPoint") -> float:
        return float(max(np.abs(self.V - other.V).max(initial=0.0),
                         np.abs(self.I - other.I).max(initial=0.0)))


class SinglePortResponse:
    """Base class; subclasses set ``kind`` and implement ``evaluate``/``_jacobian``."""

    kind: str = FOLLOWING
    linear: bool = True

    def __init__(self, hset: HarmonicSet, phases: int):
        self.harmonic_set = hset
        self.phases = phases
        self.operating_point: OperatingPoint | None = None

    @property
    def size(self) -> int:
        return self.phases * self.harmonic_set.n

    def _check(self, x):
        x = np.asarray(x, dtype=complex)
        if x.shape != (self.phases, self.harmonic_set.n):
            raise ValueError(f"expected spectrum of shape {(self.phases, self.harmonic_set.n)}")
        return x

    def evaluate(self, x) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x) -> sp.csr_matrix:
        return self._jacobian(self._check(x))

    def _jacobian(self, x) -> sp.csr_matrix:
        raise NotImplementedError

    def initial_current(self, dc_voltage: float = 1.0):
        """Forming-port current for a flat start (``None`` = take it from the grid)."""
        return None

    def refresh(self, V, I) -> float:
        """Replace the operating point; return its change (inf on first call)."""
        new = OperatingPoint(np.array(V, complex), np.array(I, complex))
        old, self.operating_point = self.operating_point, new
        self._relinearize()
        return np.inf if old is None else new.distance(old)

    def _relinearize(self):
        pass


def _diag_jacobian(d: np.ndarray) -> sp.csr_matrix:
    return real_stack_matrix(sp.diags(np.ravel(d)))


class TheveninResponse(SinglePortResponse):
    """Grid-forming source ``V = V_TE - Z_sc(h) I`` with ``Z_sc(h) = R + j h X``."""

    kind = FORMING

    def __init__(self, hset, phases, V_te, R_pu, X_pu):
        super().__init__(hset, phases)
        if not np.hypot(R_pu, X_pu) > 0:
            raise ValueError("short-circuit impedance must be nonzero")
        self.V_te = np.asarray(V_te, complex).reshape(phases, hset.n)
        self.Z = np.broadcast_to(R_pu + 1j * hset.array * X_pu, (phases, hset.n)).copy()

    @classmethod
    def from_short_circuit(cls, hset, phases, lines, z_sc_ohm, r_over_x, z_base):
        X = z_sc_ohm / np.sqrt(1.0 + r_over_x ** 2) / z_base
        return cls(hset, phases, balanced_spectrum(hset, phases, lines), r_over_x * X, X)

    def evaluate(self, I):
        return self.V_te - self.Z * self._check(I)

    def _jacobian(self, I):
        return _diag_jacobian(-self.Z)


class ImpedanceLoadResponse(SinglePortResponse):
    """``I = -V / Z(h)`` with ``Z(h) = R + j h X`` sized to absorb ``S_abs`` at 1 p.u."""

    def __init__(self, hset, phases, P_abs, Q_abs=0.0):
        super().__init__(hset, phases)
        if P_abs == 0 and Q_abs == 0:
            raise ValueError("impedance load needs nonzero power")
        # |V| = 1 p.u.: S = conj(Y), so Z = 1 / conj(S)
        Z1 = 1.0 / np.conj(complex(P_abs, Q_abs))
        self.Y = np.broadcast_to(1.0 / (Z1.real + 1j * hset.array * Z1.imag), (phases, hset.n)).copy()

    def evaluate(self, V):
        return -self.Y * self._check(V)

    def _jacobian(self, V):
        return _diag_jacobian(-self.Y)


class CurrentSourceResponse(SinglePortResponse):
    def __init__(self, hset, phases, I_ref):
        super().__init__(hset, phases)
        self.I_ref = np.asarray(I_ref, complex).reshape(phases, hset.n)

    def evaluate(self, V):
        self._check(V)
        return self.I_ref.copy()

    def _jacobian(self, V):
        return sp.csr_matrix((2 * self.size, 2 * self.size))


class ZeroInjectionResponse(CurrentSourceResponse):
    """Transit node."""

    def __init__(self, hset, phases):
        super().__init__(hset, phases, np.zeros((phases, hset.n)))


class ConstantPowerResponse(SinglePortResponse):
    """Grid-following P/Q device.

    Fundamental: ``I_1 = conj(S) / (4 conj(V_1))`` per phase (total power
    ``S`` in p.u., double-sided coefficients) and ``I_-1 = S / (4 conj(V_-1))``.
    Other orders: ``I = -Y_harm V``.  ``harmonic_admittance`` is a scalar, an
    array over orders, a ``(phases*n, phases*n)`` matrix (e.g. a closed-loop
    harmonic transfer function), or a callable taking the operating point
    and returning one of those.
    """

    linear = False

    def __init__(self, hset, phases, S, harmonic_admittance=0.0):
        super().__init__(hset, phases)
        if phases != 3:
            raise ValueError("constant-power devices are three-phase")
        self.S = complex(S)
        self._yh_source = harmonic_admittance
        # a callable needs an operating point; zero until the first refresh
        self._set_harmonic_admittance(0.0 if callable(harmonic_admittance) else harmonic_admittance)

    def _set_harmonic_admittance(self, y):
        hs, n, ph = self.harmonic_set, self.harmonic_set.n, self.phases
        mask = np.ones(ph * n, bool)
        for h in (-1, 1):
            mask[np.arange(ph) * n + hs.index(h)] = False
        if np.ndim(y) == 2:
            M = np.asarray(y, complex)
            if M.shape != (ph * n, ph * n):
                raise ValueError("harmonic admittance matrix has the wrong shape")
        else:
            M = np.diag(np.tile(np.broadcast_to(np.asarray(y, complex), (n,)), ph))
        M = M * mask[:, None] * mask[None, :]
        self.Y_harm = sp.csr_matrix(M)

    def _relinearize(self):
        op = self.operating_point
        if np.any(fundamental_magnitude(op.V, self.harmonic_set) < MIN_OPERATING_VOLTAGE):
            raise LinearizationError("operating voltage below 0.1 p.u.; linearization invalid")
        if callable(self._yh_source):
            self._set_harmonic_admittance(self._yh_source(op))

    def _fund(self, V):
        hs = self.harmonic_set
        v1, vm1 = V[:, hs.index(1)], V[:, hs.index(-1)]
        if np.any(np.abs(v1) == 0) or np.any(np.abs(vm1) == 0):
            raise LinearizationError("zero fundamental voltage at a constant-power device")
        return v1, vm1

    def evaluate(self, V):
        V = self._check(V)
        hs = self.harmonic_set
        I = -(self.Y_harm @ V.ravel()).reshape(V.shape)
        v1, vm1 = self._fund(V)
        I[:, hs.index(1)] = np.conj(self.S) / (4 * np.conj(v1))
        I[:, hs.index(-1)] = self.S / (4 * np.conj(vm1))
        return I

    def _jacobian(self, V):
        hs = self.harmonic_set
        n = hs.n
        v1, vm1 = self._fund(V)
        B = np.zeros(self.size, complex)
        ph = np.arange(self.phases) * n
        B[ph + hs.index(1)] = -np.conj(self.S) / (4 * np.conj(v1) ** 2)
        B[ph + hs.index(-1)] = -self.S / (4 * np.conj(vm1) ** 2)
        return real_stack_matrix(-self.Y_harm, sp.diags(B))


def refresh_operating_point(response: SinglePortResponse, V, I) -> OperatingPoint:
    response.refresh(V, I)
    return response.operating_point
