"""Fixed-step time-domain oracles.

Both integrators run whole fundamental periods through the RK4 kernels
(explicit for LTP systems, integrating-factor for network co-simulation),
declare steady state once two consecutive periods differ by less than
``settle_tol`` (RMS), then extract spectra from a DFT over ``record_periods``
periods.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from hybrid_hpf import _kernels
from hybrid_hpf.harmonic import HarmonicSet, dft_coefficients, series_from_samples, synthesize
from hybrid_hpf.ltp import LtpStateSpace
from hybrid_hpf.results import Spectra


class SettlingError(RuntimeError):
    def __init__(self, trace):
        self.trace = list(trace)
        last = self.trace[-1] if self.trace else float("nan")
        super().__init__(f"no periodic steady state after {len(self.trace)} periods "
                         f"(last RMS delta {last:.3e})")


@dataclass
class SettleTrace:
    periods: int = 0
    rms_delta: list = field(default_factory=list)


def _real_series_of_spectrum(coeffs: np.ndarray, hset: HarmonicSet):
    """Cosine/sine stacks for a real vector signal given double-sided coefficients."""
    H = hset.H
    bc = np.zeros((H + 1, coeffs.shape[0]))
    bs = np.zeros_like(bc)
    bc[0] = coeffs[:, hset.index(0)].real if hset.has_dc() else 0.0
    for k in range(1, H + 1):
        if k in hset.orders:
            c = coeffs[:, hset.index(k)]
            bc[k] = 2.0 * c.real
            bs[k] = -2.0 * c.imag
    return bc, bs


def settle(step_period, x0, settle_tol, max_periods, min_periods=1):
    """Call ``step_period(x) -> (x_next, samples)`` until consecutive periods agree."""
    trace = SettleTrace()
    x, prev = x0, None
    for _ in range(max_periods):
        x, samples = step_period(x)
        trace.periods += 1
        if prev is not None:
            scale = max(np.sqrt(np.mean(samples ** 2)), 1e-12)
            delta = np.sqrt(np.mean((samples - prev) ** 2)) / scale
            trace.rms_delta.append(delta)
            if delta < settle_tol and trace.periods >= min_periods:
                return x, trace
        prev = samples
    raise SettlingError(trace.rms_delta)


def simulate_ltp(sys: LtpStateSpace, U, steps_per_period: int = 2000, record_periods: int = 5,
                 settle_tol: float = 1e-10, max_periods: int = 400, min_periods: int = 20):
    """Integrate an LTP system driven by a periodic input; return output spectra ``(out_dim, n)``."""
    hs = sys.harmonic_set
    U = np.asarray(U, dtype=complex).reshape(sys.in_dim, hs.n)
    T = 1.0 / hs.f0
    dt = T / steps_per_period
    w0 = hs.omega0
    kA = max(abs(k) for k in sys.A)
    kB = max(abs(k) for k in sys.B)
    Ac, As = sys.real_series("A", kA)

    N = 4 * (kB + hs.H) + 8
    tg = np.arange(N) * T / N
    u_t = synthesize(U, hs, tg)                                   # (in_dim, N)
    Bu = np.stack([sys.evaluate("B", t) @ u_t[:, i] for i, t in enumerate(tg)])
    big = HarmonicSet.full(kB + hs.H, hs.f0)
    ser = series_from_samples(Bu, big, kB + hs.H)
    coeffs = np.stack([ser[k] for k in big.orders], axis=1)
    bc, bs = _real_series_of_spectrum(coeffs, big)

    def period(x):
        return _kernels.rk4_periodic(Ac, As, bc, bs, w0, x, 0.0, dt, steps_per_period, 1)

    x, _ = settle(period, np.zeros(sys.state_dim), settle_tol, max_periods, min_periods)
    x, samples = _kernels.rk4_periodic(Ac, As, bc, bs, w0, x, 0.0, dt,
                                       record_periods * steps_per_period, 1)
    t = np.arange(samples.shape[0]) * dt
    u_rec = synthesize(U, hs, t)
    y = np.empty((sys.out_dim, t.size))
    for i, ti in enumerate(t):
        y[:, i] = sys.evaluate("C", ti) @ samples[i] + sys.evaluate("D", ti) @ u_rec[:, i]
    return dft_coefficients(y, hs, periods=record_periods).coeffs


# --- network co-simulation ----------------------------------------------------

class CosimUnsupportedError(ValueError):
    pass


@dataclass
class CosimResult:
    spectra: Spectra
    trace: SettleTrace
    steps_per_period: int
    reference_updates: int
    references: dict


class _Circuit:
    """Linear network + device states ``x' = A x + b(t)`` with averaged NICs on top.

    AC quantities are per phase; node voltages live on the node shunt
    capacitance (half the line charging of every incident branch), so every
    node needs line charging.  A NIC's DC node voltage is its DC-link state.
    """

    def __init__(self, study, hset: HarmonicSet):
        from hybrid_hpf.ltp import lcl_matrices
        from hybrid_hpf.nic import NicControlGains
        from hybrid_hpf.resources import balanced_spectrum
        from hybrid_hpf.study import nic_device

        b = study.bases
        self.hset = hset
        self.study = study
        w0 = hset.omega0
        self.w0 = w0
        idx = {}
        pos = 0

        def alloc(key, k):
            nonlocal pos
            idx[key] = np.arange(pos, pos + k)
            pos += k
            return idx[key]

        nic_dc = {n.dc_node: n for n in study.nics}
        self.cap, self.phases = {}, {}
        for sub in study.subsystems:
            zb = b.z(sub.kind)
            for nd in sub.nodes:
                self.cap[nd] = 0.0
                self.phases[nd] = sub.phases
            for br in sub.branches:
                lt = sub.line_type(br.line_type)
                c = lt.c * br.length_km / 2 * zb if sub.line_charging else 0.0
                self.cap[br.from_node] += c
                self.cap[br.to_node] += c
            for nd in sub.nodes:
                if nd not in nic_dc:
                    alloc(("v", nd), sub.phases)
            for k, br in enumerate(sub.branches):
                alloc(("br", sub.id, k), sub.phases)
        for nd, C in self.cap.items():
            # a NIC DC node also carries the DC-link capacitor
            if not C > 0 and nd not in nic_dc:
                raise CosimUnsupportedError(f"node {nd} has no shunt capacitance (enable line charging)")
        for r in study.resources:
            sub = study.subsystem_of(r.node)
            if r.type == "thevenin":
                alloc(("src", r.node), 3)
            elif r.type == "Z":
                S = complex(r.parameters["P_kW"], r.parameters.get("Q_kvar", 0.0)) * 1e3 / b.P_b
                if sub.kind == "AC" and S.imag != 0:
                    alloc(("zl", r.node), 3)
            elif r.type == "PQ":
                raise CosimUnsupportedError(f"constant-power device at {r.node} has no time-domain model")
        self.nics = []
        for n in study.nics:
            dev = nic_device(n, b)
            if dev.control not in ("VdcQ", "PQ"):
                raise CosimUnsupportedError(dev.control)
            hw = dev.hardware.scaled(b.z_ac, b.z_dc)
            gains = dev.gains or NicControlGains.default(hw)
            base = alloc(("nic", n.ac_node), 13)
            self.nics.append((dev, hw, gains, base))
            idx[("v", n.dc_node)] = base[11:12]
        self.idx, self.ns = idx, pos
        ns = pos
        A = np.zeros((ns, ns))
        K = hset.H + 1
        bc, bs = np.zeros((K, ns)), np.zeros((K, ns))
        inflow = {nd: [] for nd in self.cap}            # (coef, state) currents into node
        src_terms = {nd: np.zeros((self.phases[nd], hset.n), complex) for nd in self.cap}

        def v(nd):
            return idx[("v", nd)]

        for sub in study.subsystems:
            zb = b.z(sub.kind)
            for k, br in enumerate(sub.branches):
                lt = sub.line_type(br.line_type)
                R, L = lt.r * br.length_km / zb, lt.l * br.length_km / zb
                if L <= 0:
                    raise CosimUnsupportedError(f"branch {br.from_node}-{br.to_node} has no inductance")
                i = idx[("br", sub.id, k)]
                A[i, i] -= R / L
                A[i, v(br.from_node)] += 1 / L
                A[i, v(br.to_node)] -= 1 / L
                inflow[br.from_node].append((-1.0, i))
                inflow[br.to_node].append((1.0, i))
        for r in study.resources:
            sub = study.subsystem_of(r.node)
            p, ph = r.parameters, sub.phases
            if r.type == "thevenin":
                X = p["z_sc_ohm"] / np.sqrt(1 + p["r_over_x"] ** 2) / b.z_ac
                R, L = p["r_over_x"] * X, X / w0
                i = idx[("src", r.node)]
                A[i, i] -= R / L
                A[i, v(r.node)] -= 1 / L
                E = balanced_spectrum(hset, 3, {h["order"]: (h["magnitude_pu"], h["angle_rad"])
                                                for h in p["harmonics"]})
                cs, sn = _real_series_of_spectrum(E / L, hset)
                bc[:, i] += cs
                bs[:, i] += sn
                inflow[r.node].append((1.0, i))
            elif r.type == "Z":
                S_abs = -complex(p["P_kW"], p.get("Q_kvar", 0.0)) * 1e3 / b.P_b
                Z1 = 1 / np.conj(S_abs)
                if sub.kind == "DC" or Z1.imag == 0:
                    G = 1 / Z1.real
                    A[v(r.node), v(r.node)] -= G / self._node_cap(r.node, nic_dc, b)
                else:
                    if Z1.imag < 0:
                        raise CosimUnsupportedError(f"capacitive impedance load at {r.node}")
                    i = idx[("zl", r.node)]
                    L = Z1.imag / w0
                    A[i, i] -= Z1.real / L
                    A[i, v(r.node)] += 1 / L
                    inflow[r.node].append((-1.0, i))
            elif r.type == "I":
                P = p["P_kW"] * 1e3 / b.P_b
                lines = {0: (P, 0.0)} if sub.kind == "DC" else {1: (P, 0.0)}
                src_terms[r.node] += balanced_spectrum(hset, ph, lines)
        self.nic_idx, self.nic_par = [], []
        for dev, hw, gains, base in self.nics:
            Al, _, _ = lcl_matrices(hw, 3)
            A[np.ix_(base[:9], base[:9])] += Al
            A[base[6:9], v(dev.ac_node)] -= 1.0 / hw.L_grid
            inflow[dev.ac_node].append((1.0, base[6:9]))
            Ctot = hw.C_dc + self.cap[dev.dc_node]
            self.cap[dev.dc_node] = Ctot
            wv = -1
            if dev.control == "VdcQ":
                wv = base[12]
            self.nic_idx.append(np.r_[base[0:3], base[6:9], base[9], base[10], base[11], wv])
            self.nic_par.append([0.0, 0.0, 0.0, gains.kpv if wv >= 0 else 0.0,
                                 gains.kiv if wv >= 0 else 0.0, gains.kp, gains.ki,
                                 1 / hw.L_conv, 1 / Ctot, dev.V_dc_ref if wv >= 0 else 0.0])
        for nd, terms in inflow.items():
            C = self.cap[nd]
            if not C > 0:
                raise CosimUnsupportedError(f"node {nd} has no shunt capacitance (enable line charging)")
            rows = v(nd)
            for coef, states in terms:
                A[rows, states] += coef / C
            if np.any(src_terms[nd]):
                cs, sn = _real_series_of_spectrum(src_terms[nd] / C, hset)
                bc[:, rows] += cs
                bs[:, rows] += sn
        self.A, self.bc, self.bs = A, bc, bs
        self.pc, self.ps = self._particular(A, bc, bs)
        self.nic_idx = np.array(self.nic_idx, dtype=np.int64).reshape(-1, 10)
        self.nic_par = np.array(self.nic_par, dtype=float).reshape(-1, 10)

    def _particular(self, A, bc, bs):
        """Periodic solution of ``x' = A x + b(t)`` as cosine/sine stacks."""
        pc, ps = np.zeros_like(bc), np.zeros_like(bs)
        x0, *_ = np.linalg.lstsq(A, -bc[0], rcond=None)
        if np.linalg.norm(A @ x0 + bc[0]) > 1e-9 * max(1.0, np.linalg.norm(bc[0])):
            raise CosimUnsupportedError("DC sources drive an integrating mode of the network")
        pc[0] = x0
        eye = np.eye(A.shape[0])
        for k in range(1, bc.shape[0]):
            if np.any(bc[k]) or np.any(bs[k]):
                X = np.linalg.solve(1j * k * self.w0 * eye - A, bc[k] - 1j * bs[k])
                pc[k], ps[k] = X.real, -X.imag
        return pc, ps

    def _node_cap(self, nd, nic_dc, b):
        if nd in nic_dc:
            n = nic_dc[nd]
            return n.hardware.C_dc * b.z_dc + self.cap[nd]
        return self.cap[nd]

    def set_references(self, k, v_mag, phi):
        dev = self.nics[k][0]
        gains = self.nics[k][2]
        idref = -gains.kpv * dev.V_dc_ref if dev.control == "VdcQ" else dev.P / v_mag
        self.nic_par[k, :3] = [phi, idref, -dev.Q / v_mag]

    def initial_state(self):
        x = np.zeros(self.ns)
        for sub in self.study.subsystems:
            if sub.kind == "DC":
                for nd in sub.nodes:
                    x[self.idx[("v", nd)]] = 1.0
        for dev, hw, gains, base in self.nics:
            x[base[11]] = dev.V_dc_ref if dev.control == "VdcQ" else 1.0
            x[base[9]] = 1.0 / gains.ki
        return x



def timedomain_cosim(study, H: int | None = None, steps_per_period: int | None = None,
                     record_periods: int = 5, settle_tol: float = 1e-9, max_periods: int = 3000,
                     ref_tol: float = 1e-11, max_reference_updates: int = 40, stride: int = 20):
    """Fixed-step integrating-factor RK4 of the network with averaged NICs; spectra by DFT.

    NIC synchronization is ideal, as in the harmonic model: after each settled
    run the dq angle and the reference magnitude are re-read from the
    fundamental of the simulated terminal voltage, until they stop moving.
    Node currents are the injections into the grid (branch currents plus
    shunt charging).
    """
    hset = HarmonicSet.full(study.solver.H if H is None else H, study.bases.f0)
    ckt = _Circuit(study, hset)
    T = 1.0 / hset.f0
    if steps_per_period is None:
        steps_per_period = stride * max(4 * hset.H, int(np.ceil(1000 / stride)))
    if steps_per_period % stride:
        raise ValueError("steps_per_period must be a multiple of stride")
    if steps_per_period // stride <= 2 * hset.H:
        raise ValueError("too few samples per period for the harmonic set; lower stride")
    dt = T / steps_per_period
    w0 = hset.omega0

    E = expm(ckt.A * (dt / 2))

    def period(x):
        return _kernels.lawson_cosim(E, ckt.pc, ckt.ps, w0, ckt.nic_idx, ckt.nic_par,
                                     x, 0.0, dt, steps_per_period, stride)

    def fundamental(samples, rows):
        X = dft_coefficients(samples[:, rows].T, HarmonicSet.full(1, hset.f0)).coeffs[:, 2]
        return X

    refs = [(1.0, 0.0)] * len(ckt.nics)
    for k, r in enumerate(refs):
        ckt.set_references(k, *r)
    x = ckt.initial_state()
    trace = SettleTrace()
    updates = 0
    for updates in range(1, max_reference_updates + 1):
        try:
            x, tr = settle(period, x, settle_tol, max_periods, min_periods=2)
        except SettlingError as exc:
            raise SettlingError(trace.rms_delta + exc.trace) from None
        trace.periods += tr.periods
        trace.rms_delta += tr.rms_delta
        x, samples = period(x)
        change = 0.0
        for k, (dev, *_rest) in enumerate(ckt.nics):
            V1 = fundamental(samples, ckt.idx[("v", dev.ac_node)])
            new = (float(np.mean(2 * np.abs(V1))), float(np.angle(V1[0])))
            change = max(change, abs(new[0] - refs[k][0]), abs(new[1] - refs[k][1]))
            refs[k] = new
            ckt.set_references(k, *new)
        if change < ref_tol:
            break
    x, samples = _kernels.lawson_cosim(E, ckt.pc, ckt.ps, w0, ckt.nic_idx, ckt.nic_par, x, 0.0,
                                       dt, record_periods * steps_per_period, stride)
    spec = dft_coefficients(samples.T, hset, periods=record_periods).coeffs      # (ns, n)
    jw = 1j * w0 * hset.array
    V, I, sub = {}, {}, {}
    for s in study.subsystems:
        for nd in s.nodes:
            V[nd] = spec[ckt.idx[("v", nd)]].reshape(s.phases, -1)
            I[nd] = np.zeros_like(V[nd])
            sub[nd] = (s.id, s.kind)
        for k, br in enumerate(s.branches):
            ib = spec[ckt.idx[("br", s.id, k)]]
            I[br.from_node] += ib
            I[br.to_node] -= ib
    for nd in V:
        # grid shunt only (a NIC DC link is on the device side)
        cap = ckt.cap[nd]
        for dev, hw, *_ in ckt.nics:
            if dev.dc_node == nd:
                cap -= hw.C_dc
        I[nd] += cap * jw[None, :] * V[nd]
    return CosimResult(Spectra(hset, sub, V, I), trace, steps_per_period, updates,
                       {ckt.nics[k][0].ac_node: refs[k] for k in range(len(refs))})
