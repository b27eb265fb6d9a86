"""Network-interfacing converters (NICs): two-port grid responses.

A NIC follows the AC grid and forms the DC grid: it maps ``(V_ac, I_dc)`` to
``(I_ac, V_dc)``.  Spectra are ``(3, n)`` on the AC port and ``(1, n)`` on the
DC port.  All quantities are per-unit (AC peak bases, DC bases, time in s).

Two model tiers share the interface:

``PowerBalanceNic``
    Fundamental and DC average from exact power balance, passive LCL
    admittance at AC harmonics, DC-link capacitor at DC harmonics, and linear
    dq-frame maps coupling AC order ``h±1`` with DC order ``h``.
``AveragedNic``
    Averaged switching model (LCL filter, DC link, dq PI current control and
    either a DC-voltage PI loop or power-reference currents) linearized along
    a periodic operating trajectory.  Refreshing the trajectory performs a
    Newton step on the converter states, so at a fixed point the response is
    the exact truncated periodic steady state of the nonlinear model.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from hybrid_hpf.harmonic import (
    HarmonicSet, real_stack_matrix, series_from_samples, synthesize, toeplitz_from_series,
)
from hybrid_hpf.ltp import LtpStateSpace, NicHardwareParams, lcl_matrices, shifted_factor
from hybrid_hpf.resources import (
    MIN_OPERATING_VOLTAGE, FOLLOWING, FORMING, LinearizationError,
    SinglePortResponse, fundamental_magnitude,
)

TIERS = ("averaged", "power-balance")
_SHIFTS = np.array([0.0, -2 * np.pi / 3, 2 * np.pi / 3])


class UnsupportedConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class NicControlGains:
    kp: float
    ki: float
    kpv: float = 0.0
    kiv: float = 0.0

    @classmethod
    def default(cls, hw_pu: NicHardwareParams, f_current: float = 300.0,
                f_voltage: float = 50.0) -> "NicControlGains":
        """PI gains placing the current loop near ``f_current`` and the V_DC loop near ``f_voltage``."""
        wc = 2 * np.pi * f_current
        kp = wc * (hw_pu.L_conv + hw_pu.L_grid)
        wv = 2 * np.pi * f_voltage
        kpv = wv * hw_pu.C_dc
        return cls(kp=kp, ki=kp * 2 * np.pi * f_current / 10.0, kpv=kpv, kiv=kpv * wv / 5.0)


@dataclass(frozen=True)
class NicDevice:
    """A NIC between AC node ``ac_node`` and DC node ``dc_node``.

    ``P``/``Q`` are AC-side injections in p.u. of the power base (``P`` unused
    for ``VdcQ``); ``V_dc_ref`` is in DC p.u.  ``hardware`` is in SI.
    """

    ac_node: str
    dc_node: str
    control: str
    Q: float
    P: float | None = None
    V_dc_ref: float | None = None
    hardware: NicHardwareParams = field(default_factory=NicHardwareParams)
    tier: str | None = None
    gains: NicControlGains | None = None
    k_v: float = 0.02
    k_i: float = 0.02
    ac_port: str = FOLLOWING

    def __post_init__(self):
        if self.control not in ("VdcQ", "PQ"):
            raise ValueError(f"NIC {self.ac_node}/{self.dc_node}: control must be VdcQ or PQ")
        if self.control == "PQ" and self.P is None:
            raise ValueError(f"NIC {self.ac_node}/{self.dc_node}: PQ control needs P")
        if self.control == "VdcQ" and not (self.V_dc_ref and self.V_dc_ref > 0):
            raise ValueError(f"NIC {self.ac_node}/{self.dc_node}: VdcQ control needs V_dc_ref > 0")
        if self.tier is not None and self.tier not in TIERS:
            raise ValueError(f"unknown NIC tier {self.tier!r}")
        if self.ac_port != FOLLOWING:
            raise UnsupportedConfigurationError(
                f"NIC {self.ac_node}/{self.dc_node}: grid-forming AC port is unsupported")


@dataclass
class NicOperatingPoint:
    V_ac: np.ndarray
    I_dc: np.ndarray
    I_ac: np.ndarray
    V_dc: np.ndarray

    def distance(self, other: "NicOperatingPoint") -> float:
        return float(max(np.abs(getattr(self, k) - getattr(other, k)).max()
                         for k in ("V_ac", "I_dc", "I_ac", "V_dc")))


def _phase_angle(V_ac, hset):
    return float(np.angle(V_ac[0, hset.index(1)]))


def _check_voltage(V_ac, hset, device):
    if np.any(fundamental_magnitude(V_ac, hset) < MIN_OPERATING_VOLTAGE):
        raise LinearizationError(f"NIC {device.ac_node}/{device.dc_node}: AC operating voltage "
                                 "below 0.1 p.u.; linearization invalid")


def park_d_matrix(hset: HarmonicSet, phi: float) -> np.ndarray:
    """``(n, 3n)`` map from phase spectra to the spectrum of ``(2/3) sum_p cos(theta_p) x_p``."""
    n = hset.n
    M = np.zeros((n, 3 * n), complex)
    for p in range(3):
        a = 0.5 * np.exp(1j * (phi + _SHIFTS[p]))
        for k, h in enumerate(hset.orders):
            if h - 1 in hset.orders:
                M[k, p * n + hset.index(h - 1)] += 2 / 3 * a
            if h + 1 in hset.orders:
                M[k, p * n + hset.index(h + 1)] += 2 / 3 * np.conj(a)
    return M


def inverse_park_d_matrix(hset: HarmonicSet, phi: float) -> np.ndarray:
    """``(3n, n)`` map from a d-axis spectrum to phase spectra ``cos(theta_p) y``."""
    n = hset.n
    M = np.zeros((3 * n, n), complex)
    for p in range(3):
        a = 0.5 * np.exp(1j * (phi + _SHIFTS[p]))
        for k, h in enumerate(hset.orders):
            if h - 1 in hset.orders:
                M[p * n + k, hset.index(h - 1)] += a
            if h + 1 in hset.orders:
                M[p * n + k, hset.index(h + 1)] += np.conj(a)
    return M


class TwoPortResponse:
    """Common interface; see module docstring."""

    tier: str

    def __init__(self, device: NicDevice, hset: HarmonicSet, hw_pu: NicHardwareParams):
        self.device = device
        self.harmonic_set = hset
        self.hw = hw_pu
        self.operating_point: NicOperatingPoint | None = None

    def _shape(self, V_ac, I_dc):
        n = self.harmonic_set.n
        V_ac = np.asarray(V_ac, complex).reshape(3, n)
        I_dc = np.asarray(I_dc, complex).reshape(1, n)
        return V_ac, I_dc

    def evaluate(self, V_ac, I_dc):
        raise NotImplementedError

    def jacobian(self, V_ac, I_dc) -> dict[str, sp.csr_matrix]:
        """Real-stacked blocks ``aa = dI_ac/dV_ac``, ``ad = dI_ac/dI_dc``,
        ``da = dV_dc/dV_ac``, ``dd = dV_dc/dI_dc``."""
        raise NotImplementedError

    def refresh(self, V_ac, I_dc) -> float:
        raise NotImplementedError

    def initial_dc_current(self, V_dc0: float = 1.0):
        """DC-port current guess for a flat start (``None`` = take it from the grid)."""
        d = self.device
        if d.control == "PQ":
            return -d.P / V_dc0
        return None

    def power_balance_residual(self) -> float:
        """AC + DC injected power + losses at the operating point (p.u.)."""
        op = self.operating_point
        hs = self.harmonic_set
        k1, k0 = hs.index(1), hs.index(0)
        p_ac = 4.0 / 3.0 * np.sum(np.real(op.V_ac[:, k1] * np.conj(op.I_ac[:, k1])))
        p_dc = np.real(op.V_dc[0, k0] * op.I_dc[0, k0])
        return float(p_ac + p_dc + self.losses())

    def losses(self) -> float:
        raise NotImplementedError


# --- power-balance tier -----------------------------------------------------

class PowerBalanceNic(TwoPortResponse):
    tier = "power-balance"

    def __init__(self, device, hset, hw_pu, V_ac=None, I_dc=None, coupled=True,
                 p_decoupled=None):
        super().__init__(device, hset, hw_pu)
        if not hset.has_dc():
            raise ValueError("NIC DC port needs order 0 in the harmonic set")
        self.coupled = coupled
        self.k_v = device.k_v if coupled else 0.0
        self.k_i = device.k_i if coupled else 0.0
        if device.control == "VdcQ" and not coupled and p_decoupled is None:
            raise ValueError("a decoupled VdcQ NIC needs a fixed AC-side power p_decoupled")
        self.p_decoupled = p_decoupled
        w = hset.omega0 * hset.array
        h = hw_pu
        with np.errstate(divide="ignore", invalid="ignore"):
            Z1 = h.R_conv + 1j * w * h.L_conv
            Z2 = h.R_grid + 1j * w * h.L_grid
            Zc = h.R_filter + 1.0 / (1j * w * h.C_filter)
            par = np.where(np.isfinite(Zc), Z1 * Zc / (Z1 + Zc), Z1)
            Zt = Z2 + par
            # a lossless filter shorts order 0; the current control blocks DC injection instead
            self.Y_lcl = np.where(Zt == 0, 0.0, 1.0 / Zt)
            self.Z_dc = np.where(hset.array == 0, 0.0, 1.0 / (1j * w * h.C_dc))
        n = hset.n
        self._fund_rows = np.array([p * n + hset.index(s) for p in range(3) for s in (-1, 1)])
        V_ac = self._flat_ac() if V_ac is None else V_ac
        if I_dc is None:
            I_dc = np.zeros((1, n), complex)
            i0 = self.initial_dc_current()
            I_dc[0, hset.index(0)] = 0.0 if i0 is None else i0
        self._R_loss = (hw_pu.R_conv + hw_pu.R_grid) if coupled else 0.0
        self._v0_idle = device.V_dc_ref or 1.0
        self._set_coupling(0.0)
        self.refresh(V_ac, I_dc)

    def _flat_ac(self):
        from hybrid_hpf.resources import balanced_spectrum
        return balanced_spectrum(self.harmonic_set, 3, {1: (1.0, 0.0)})

    def _set_coupling(self, phi):
        hs = self.harmonic_set
        Pd = park_d_matrix(hs, phi)
        Pd[:, self._fund_rows] = 0.0
        Pd[hs.index(0), :] = 0.0
        Pi = inverse_park_d_matrix(hs, phi)
        Pi[:, hs.index(0)] = 0.0
        Pi[self._fund_rows, :] = 0.0
        self.C_v = sp.csr_matrix(self.k_v * Pd)
        self.C_i = sp.csr_matrix(self.k_i * Pi)

    def _loss_coeff(self, V_ac):
        """``c`` with losses ``c |S|^2``; ``c = R/12 sum_p 1/|V_p1|^2`` (``|I_p1| = |S| / (4|V_p1|)``)."""
        v1 = V_ac[:, self.harmonic_set.index(1)]
        m2 = np.real(v1 * np.conj(v1))
        c = self._R_loss / 12.0 * np.sum(1.0 / m2)
        # derivatives w.r.t. v1 and conj(v1)
        dA = -self._R_loss / 12.0 * np.conj(v1) / m2 ** 2
        dB = -self._R_loss / 12.0 * v1 / m2 ** 2
        return c, dA, dB

    def _power(self, I0, c):
        """AC power ``P`` and its partials ``(dP/dI0, dP/dc)``."""
        d = self.device
        if d.control == "PQ":
            return d.P, 0.0, 0.0
        if not self.coupled:
            return self.p_decoupled, 0.0, 0.0
        # P + c (P^2 + Q^2) + Vref I0 = 0, root continuous in c -> 0
        a = d.V_dc_ref * I0 + c * d.Q ** 2
        P = -2.0 * a / (1.0 + np.sqrt(1.0 - 4.0 * c * a))
        den = 1.0 + 2.0 * c * P
        return P, -d.V_dc_ref / den, -(P ** 2 + d.Q ** 2) / den

    def losses(self) -> float:
        op = self.operating_point
        c, _, _ = self._loss_coeff(op.V_ac)
        P, _, _ = self._power(op.I_dc[0, self.harmonic_set.index(0)], c)
        return float(np.real(c * (P ** 2 + self.device.Q ** 2)))

    def evaluate(self, V_ac, I_dc):
        V_ac, I_dc = self._shape(V_ac, I_dc)
        hs, d = self.harmonic_set, self.device
        k1, km1, k0 = hs.index(1), hs.index(-1), hs.index(0)
        v1, vm1 = V_ac[:, k1], V_ac[:, km1]
        if np.any(v1 == 0) or np.any(vm1 == 0):
            raise LinearizationError("zero fundamental voltage at a NIC")
        I_ac = -self.Y_lcl[None, :] * V_ac + (self.C_i @ I_dc[0]).reshape(3, -1)
        I0 = I_dc[0, k0]
        c, _, _ = self._loss_coeff(V_ac)
        P, _, _ = self._power(I0, c)
        # P stays analytic in I0 (no conjugate) so the Jacobian is exact
        I_ac[:, k1] = (P - 1j * d.Q) / (4 * np.conj(v1))
        I_ac[:, km1] = (P + 1j * d.Q) / (4 * np.conj(vm1))
        V_dc = (-self.Z_dc * I_dc[0] + self.C_v @ V_ac.ravel())[None, :]
        V_dc[0, k0] = self._v0(I0, c * (P ** 2 + d.Q ** 2))
        return I_ac, V_dc

    def _v0(self, I0, loss):
        d = self.device
        if d.control == "VdcQ":
            return d.V_dc_ref
        num = d.P + loss
        if abs(num) < 1e-14 or abs(I0) == 0:
            return self._v0_idle
        return -num / I0

    def jacobian(self, V_ac, I_dc):
        V_ac, I_dc = self._shape(V_ac, I_dc)
        hs, d, n = self.harmonic_set, self.device, self.harmonic_set.n
        k1, km1, k0 = hs.index(1), hs.index(-1), hs.index(0)
        I0 = I_dc[0, k0]
        c, cA, cB = self._loss_coeff(V_ac)
        P, dP_dI0, dP_dc = self._power(I0, c)
        ph = np.arange(3) * n
        r1, rm1 = ph + k1, ph + km1
        cv1, cvm1 = np.conj(V_ac[:, k1]), np.conj(V_ac[:, km1])

        A = sp.diags(np.tile(-self.Y_lcl, 3)).tolil()
        B = sp.lil_matrix((3 * n, 3 * n), dtype=complex)
        for r in np.concatenate([r1, rm1]):
            A[r, r] = 0.0
        B[r1, r1] = -(P - 1j * d.Q) / (4 * cv1 ** 2)
        B[rm1, rm1] = -(P + 1j * d.Q) / (4 * cvm1 ** 2)
        if dP_dc != 0.0:
            # P depends on every phase's |V_1| through the loss coefficient
            for p in range(3):
                A[r1, r1[p]] = A[r1, r1[p]].toarray().ravel() + dP_dc * cA[p] / (4 * cv1)
                B[r1, r1[p]] = B[r1, r1[p]].toarray().ravel() + dP_dc * cB[p] / (4 * cv1)
                A[rm1, r1[p]] = dP_dc * cA[p] / (4 * cvm1)
                B[rm1, r1[p]] = dP_dc * cB[p] / (4 * cvm1)
        aa = real_stack_matrix(A.tocsr(), B.tocsr())

        ad = self.C_i.tolil()
        if dP_dI0 != 0.0:
            ad[r1, k0] = (dP_dI0 / (4 * cv1))[:, None]
            ad[rm1, k0] = (dP_dI0 / (4 * cvm1))[:, None]

        dd = -self.Z_dc.astype(complex)
        da = self.C_v.tolil()
        da[k0, :] = 0.0
        daB = sp.lil_matrix((n, 3 * n), dtype=complex)
        if d.control == "PQ":
            S2 = d.P ** 2 + d.Q ** 2
            num = d.P + c * S2
            idle = abs(num) < 1e-14 or I0 == 0
            dd[k0] = 0.0 if idle else num / I0 ** 2
            if not idle:
                da[k0, r1] = -S2 * cA / I0
                daB[k0, r1] = -S2 * cB / I0
        else:
            dd[k0] = 0.0
        return {"aa": aa, "ad": real_stack_matrix(ad.tocsr()),
                "da": real_stack_matrix(da.tocsr(), daB.tocsr()), "dd": real_stack_matrix(sp.diags(dd))}

    def refresh(self, V_ac, I_dc) -> float:
        V_ac, I_dc = self._shape(V_ac, I_dc)
        _check_voltage(V_ac, self.harmonic_set, self.device)
        hs = self.harmonic_set
        if self.coupled:
            self._set_coupling(_phase_angle(V_ac, hs))
        I_ac, V_dc = self.evaluate(V_ac, I_dc)
        self._v0_idle = V_dc[0, hs.index(0)]
        new = NicOperatingPoint(V_ac.copy(), I_dc.copy(), I_ac, V_dc)
        old, self.operating_point = self.operating_point, new
        return np.inf if old is None else new.distance(old)

    def split_ports(self) -> tuple[SinglePortResponse, SinglePortResponse]:
        """Independent AC and DC single-port responses; valid only when decoupled."""
        if self.coupled:
            raise ValueError("split_ports requires a decoupled NIC (coupled=False)")
        return _NicAcPort(self), _NicDcPort(self)


class _NicAcPort(SinglePortResponse):
    kind = FOLLOWING
    linear = False

    def __init__(self, nic: PowerBalanceNic):
        super().__init__(nic.harmonic_set, 3)
        self.nic = nic
        self._zero = np.zeros((1, nic.harmonic_set.n), complex)

    def evaluate(self, V):
        return self.nic.evaluate(self._check(V), self._zero)[0]

    def _jacobian(self, V):
        return self.nic.jacobian(V, self._zero)["aa"]


class _NicDcPort(SinglePortResponse):
    kind = FORMING
    linear = False

    def __init__(self, nic: PowerBalanceNic):
        super().__init__(nic.harmonic_set, 1)
        self.nic = nic
        self._V = nic.operating_point.V_ac

    def evaluate(self, I):
        return self.nic.evaluate(self._V, self._check(I))[1]

    def _jacobian(self, I):
        return self.nic.jacobian(self._V, I)["dd"]

    def initial_current(self, dc_voltage: float = 1.0):
        i0 = self.nic.initial_dc_current(dc_voltage)
        if i0 is None:
            return None
        I = np.zeros((1, self.harmonic_set.n), complex)
        I[0, self.harmonic_set.index(0)] = i0
        return I


# --- averaged tier ----------------------------------------------------------

I1, VCF, I2 = slice(0, 3), slice(3, 6), slice(6, 9)
ZD, ZQ, VDC, WV = 9, 10, 11, 12


class AveragedNicModel:
    """Nonlinear averaged converter ``x' = f(t, x, u)``; inputs ``u = (v_ac[3], i_dc)``."""

    def __init__(self, device: NicDevice, hw_pu: NicHardwareParams, gains: NicControlGains,
                 omega0: float):
        self.device = device
        self.hw = hw_pu
        self.gains = gains
        self.omega0 = omega0
        self.vdcq = device.control == "VdcQ"
        self.ns = 13 if self.vdcq else 12
        A, _, _ = lcl_matrices(hw_pu, 3)
        L = np.zeros((self.ns, self.ns))
        L[:9, :9] = A
        if self.vdcq:
            L[WV, VDC] = -1.0
        self.L = L
        B = np.zeros((self.ns, 4))
        B[I2, 0:3] = -np.eye(3) / hw_pu.L_grid
        B[VDC, 3] = -1.0 / hw_pu.C_dc
        self.B = B
        C = np.zeros((4, self.ns))
        C[0:3, I2] = np.eye(3)
        C[3, VDC] = 1.0
        self.C = C
        self.phi = 0.0
        self.idref = 0.0
        self.iqref = 0.0

    @property
    def kpv(self):
        return self.gains.kpv if self.vdcq else 0.0

    @property
    def kiv(self):
        return self.gains.kiv if self.vdcq else 0.0

    def set_references(self, v_mag: float, phi: float):
        d = self.device
        self.phi = phi
        self.iqref = -d.Q / v_mag
        self.idref = -self.gains.kpv * d.V_dc_ref if self.vdcq else d.P / v_mag

    def _trig(self, t):
        ang = self.omega0 * np.asarray(t)[:, None] + self.phi + _SHIFTS[None, :]
        return np.cos(ang), np.sin(ang)

    def _control(self, x, c, s):
        g = self.gains
        i2 = x[:, I2]
        i2d = 2 / 3 * np.sum(c * i2, axis=1)
        i2q = -2 / 3 * np.sum(s * i2, axis=1)
        wv = x[:, WV] if self.vdcq else 0.0
        ed = self.idref + self.kpv * x[:, VDC] - self.kiv * wv - i2d
        eq = self.iqref - i2q
        ud = g.kp * ed + g.ki * x[:, ZD]
        uq = g.kp * eq + g.ki * x[:, ZQ]
        return ed, eq, ud[:, None] * c - uq[:, None] * s

    def rhs(self, t, x, u):
        """Vectorized over samples: ``t (N,)``, ``x (N, ns)``, ``u (N, 4)``."""
        c, s = self._trig(t)
        ed, eq, m = self._control(x, c, s)
        f = x @ self.L.T + u @ self.B.T
        vdc = x[:, VDC]
        f[:, I1] += m * vdc[:, None] / self.hw.L_conv
        f[:, ZD] += ed
        f[:, ZQ] += eq
        f[:, VDC] -= 2 / 3 * np.sum(m * x[:, I1], axis=1) / self.hw.C_dc
        if self.vdcq:
            f[:, WV] += self.device.V_dc_ref
        return f

    def jac(self, t, x):
        """``df/dx`` per sample, shape ``(N, ns, ns)``."""
        g, ns = self.gains, self.ns
        N = x.shape[0]
        c, s = self._trig(t)
        _, _, m = self._control(x, c, s)
        de_d = np.zeros((N, ns))
        de_q = np.zeros((N, ns))
        de_d[:, I2] = -2 / 3 * c
        de_q[:, I2] = 2 / 3 * s
        de_d[:, VDC] = self.kpv
        if self.vdcq:
            de_d[:, WV] = -self.kiv
        dud = g.kp * de_d
        dud[:, ZD] += g.ki
        duq = g.kp * de_q
        duq[:, ZQ] += g.ki
        dm = c[:, :, None] * dud[:, None, :] - s[:, :, None] * duq[:, None, :]
        J = np.broadcast_to(self.L, (N, ns, ns)).copy()
        vdc = x[:, VDC]
        J[:, I1, :] += vdc[:, None, None] * dm / self.hw.L_conv
        J[:, I1, VDC] += m / self.hw.L_conv
        J[:, ZD, :] += de_d
        J[:, ZQ, :] += de_q
        J[:, VDC, :] -= 2 / 3 * np.einsum("np,npk->nk", x[:, I1], dm) / self.hw.C_dc
        J[:, VDC, I1] -= 2 / 3 * m / self.hw.C_dc
        return J


class AveragedNic(TwoPortResponse):
    tier = "averaged"

    def __init__(self, device, hset, hw_pu, gains=None, V_ac=None, I_dc=None, V_dc0=None,
                 settle_iters: int = 30, settle_tol: float = 1e-11):
        super().__init__(device, hset, hw_pu)
        if not hset.has_dc():
            raise ValueError("NIC DC port needs order 0 in the harmonic set")
        self.gains = gains or NicControlGains.default(hw_pu)
        self.model = AveragedNicModel(device, hw_pu, self.gains, hset.omega0)
        self.settle_iters = settle_iters
        self.settle_tol = settle_tol
        n = hset.n
        self.N = 4 * hset.H + 8
        self.tg = np.arange(self.N) / self.N / hset.f0
        if V_ac is None:
            from hybrid_hpf.resources import balanced_spectrum
            V_ac = balanced_spectrum(hset, 3, {1: (1.0, 0.0)})
        if I_dc is None:
            I_dc = np.zeros((1, n), complex)
            i0 = self.initial_dc_current()
            I_dc[0, hset.index(0)] = 0.0 if i0 is None else i0
        V_ac, I_dc = self._shape(V_ac, I_dc)
        _check_voltage(V_ac, hset, device)
        self.U_o = np.vstack([V_ac, I_dc])
        v0 = device.V_dc_ref if device.control == "VdcQ" else (V_dc0 or 1.0)
        self._set_references(V_ac)
        self.X_o = self._phasor_state(V_ac, I_dc, v0)
        self._linearize()
        self._settle()
        self._record_op()

    # operating-trajectory management

    def _set_references(self, V_ac):
        hs = self.harmonic_set
        v_mag = float(np.mean(fundamental_magnitude(V_ac, hs)))
        self.model.set_references(v_mag, _phase_angle(V_ac, hs))

    def _phasor_state(self, V_ac, I_dc, vdc):
        """Fundamental-only state consistent with the references (single-sided phasors)."""
        hs, hw, m, d = self.harmonic_set, self.hw, self.model, self.device
        w = hs.omega0
        k1 = hs.index(1)
        V = 2 * V_ac[0, k1]
        ej = np.exp(1j * m.phi)
        if d.control == "VdcQ":
            p = -d.V_dc_ref * I_dc[0, hs.index(0)].real
            i_d = p / abs(V)
        else:
            i_d = m.idref
        I2p = (i_d + 1j * m.iqref) * ej
        # Vcf = V + Z2 I2 - Rc (I1 - I2), I1 = I2 + j w Cf Vcf
        Z2 = hw.R_grid + 1j * w * hw.L_grid
        ycf = 1j * w * hw.C_filter
        Vcf = (V + Z2 * I2p) / (1 + hw.R_filter * ycf)
        I1p = I2p + ycf * Vcf
        Vconv = (hw.R_conv + 1j * w * hw.L_conv) * I1p + Vcf + hw.R_filter * (I1p - I2p)
        u = Vconv / vdc * np.conj(ej)
        X = np.zeros((m.ns, hs.n), complex)
        for var, ph in ((I1, I1p), (VCF, Vcf), (I2, I2p)):
            rot = np.exp(-1j * 2 * np.pi * np.arange(3) / 3)
            X[var, k1] = 0.5 * ph * rot
            X[var, hs.index(-1)] = np.conj(X[var, k1])
        X[ZD, hs.index(0)] = u.real / self.gains.ki
        X[ZQ, hs.index(0)] = u.imag / self.gains.ki
        X[VDC, hs.index(0)] = vdc
        if d.control == "VdcQ":
            X[WV, hs.index(0)] = -i_d / self.gains.kiv
        return X

    def _samples(self, X):
        return synthesize(X, self.harmonic_set, self.tg).T

    def _linearize(self):
        hs, m = self.harmonic_set, self.model
        H = hs.H
        x_t = self._samples(self.X_o)
        u_t = self._samples(self.U_o)
        f_t = m.rhs(self.tg, x_t, u_t)
        spec = np.fft.fft(f_t, axis=0) / self.N
        F = spec[hs.array % self.N].T                           # (ns, n)
        jw = 1j * hs.omega0 * hs.array
        self.R = (F - jw[None, :] * self.X_o).ravel()
        A_series = series_from_samples(m.jac(self.tg, x_t), hs, min(2 * H, (self.N - 1) // 2))
        sys = LtpStateSpace(hs, A_series, {0: m.B}, {0: m.C})
        At = toeplitz_from_series(sys.A, hs).matrix()
        self._lu = shifted_factor(sys, At)
        self.Bt = toeplitz_from_series({0: m.B}, hs).matrix()
        self.Ct = toeplitz_from_series({0: m.C}, hs).matrix()
        self.G = self.Ct @ sla.lu_solve(self._lu, self.Bt, check_finite=False)

    def _delta_state(self, U):
        dU = (U - self.U_o).ravel()
        return sla.lu_solve(self._lu, self.Bt @ dU + self.R, check_finite=False).reshape(self.X_o.shape)

    def _settle(self):
        for _ in range(self.settle_iters):
            dX = self._delta_state(self.U_o)
            self.X_o = self.X_o + dX
            self._linearize()
            if np.abs(dX).max() < self.settle_tol:
                return
        raise LinearizationError(f"NIC {self.device.ac_node}/{self.device.dc_node}: operating "
                                 "trajectory did not settle")

    def _record_op(self):
        V_ac, I_dc = self.U_o[:3], self.U_o[3:]
        I_ac, V_dc = self.evaluate(V_ac, I_dc)
        new = NicOperatingPoint(V_ac.copy(), I_dc.copy(), I_ac, V_dc)
        old, self.operating_point = self.operating_point, new
        return np.inf if old is None else new.distance(old)

    def refresh(self, V_ac, I_dc) -> float:
        V_ac, I_dc = self._shape(V_ac, I_dc)
        _check_voltage(V_ac, self.harmonic_set, self.device)
        U = np.vstack([V_ac, I_dc])
        self.X_o = self.X_o + self._delta_state(U)
        self.U_o = U
        self._set_references(V_ac)
        self._linearize()
        self._settle()
        return self._record_op()

    # response

    def evaluate(self, V_ac, I_dc):
        V_ac, I_dc = self._shape(V_ac, I_dc)
        X = self.X_o + self._delta_state(np.vstack([V_ac, I_dc]))
        Y = (self.model.C @ X)
        return Y[:3], Y[3:]

    def jacobian(self, V_ac, I_dc):
        n = self.harmonic_set.n
        G = self.G
        blocks = {"aa": G[:3 * n, :3 * n], "ad": G[:3 * n, 3 * n:],
                  "da": G[3 * n:, :3 * n], "dd": G[3 * n:, 3 * n:]}
        return {k: real_stack_matrix(sp.csr_matrix(v)) for k, v in blocks.items()}

    def losses(self) -> float:
        """Average resistive losses of the LCL filter along the operating trajectory."""
        x = self._samples(self.X_o)
        hw = self.hw
        i1, i2 = x[:, I1], x[:, I2]
        p = hw.R_conv * i1 ** 2 + hw.R_grid * i2 ** 2 + hw.R_filter * (i1 - i2) ** 2
        return float(2 / 3 * np.mean(np.sum(p, axis=1)))


def build_nic_response(device: NicDevice, hset: HarmonicSet, hw_pu: NicHardwareParams,
                       tier: str = "power-balance", **kwargs) -> TwoPortResponse:
    tier = device.tier or tier
    if tier == "averaged":
        return AveragedNic(device, hset, hw_pu, gains=device.gains, **kwargs)
    if tier == "power-balance":
        return PowerBalanceNic(device, hset, hw_pu, **kwargs)
    raise ValueError(f"unknown NIC tier {tier!r}")


def nic_jacobian(response: TwoPortResponse, V_ac, I_dc) -> dict[str, sp.csr_matrix]:
    return response.jacobian(V_ac, I_dc)


def decoupled(device: NicDevice, **changes) -> NicDevice:
    return replace(device, k_v=0.0, k_i=0.0, **changes)
