"""Independent cross-checks of the harmonic power flow.

* :func:`kpi` compares two sets of spectra (max-over-phases magnitude and
  wrapped angle errors).
* :func:`fundamental_powerflow_oracle` is a classic balanced power flow in
  single-sided phasors, written from the device definitions without touching
  the hybrid-parameter code.
* :func:`fixed_point_hpf` solves the harmonic power flow in nodal form
  (all node voltages plus forming-port currents) with a chord iteration and
  per-iteration operating-point refresh.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import root

from hybrid_hpf.harmonic import from_real_stacked, real_stack_matrix, to_real_stacked
from hybrid_hpf.results import Spectra

log = logging.getLogger(__name__)

ANGLE_FLOOR = 1e-9


def wrap_angle(x):
    return (np.asarray(x) + np.pi) % (2 * np.pi) - np.pi


@dataclass
class KpiReport:
    """Errors per quantity, node and order ``0..H``; ``e_arg`` is NaN where both magnitudes are floored."""

    orders: np.ndarray
    subsystem: dict
    e_abs: dict = field(default_factory=dict)    # (quantity, node) -> (H+1,)
    e_arg: dict = field(default_factory=dict)

    def per_order(self, quantity: str, subsystem: str | None = None):
        """Maxima over nodes (and phases) per order: ``(e_abs, e_arg)``."""
        keys = [k for k in self.e_abs if k[0] == quantity
                and (subsystem is None or self.subsystem[k[1]][0] == subsystem)]
        ea = np.max([self.e_abs[k] for k in keys], axis=0)
        eg = np.array([self.e_arg[k] for k in keys])
        with np.errstate(all="ignore"):
            eg = np.where(np.all(np.isnan(eg), axis=0), np.nan,
                          np.nanmax(np.where(np.isnan(eg), -np.inf, eg), axis=0))
        return ea, eg

    def maxima(self) -> dict:
        """``{(subsystem, quantity): (max e_abs, max e_arg)}``."""
        out = {}
        for sid in sorted({s for s, _ in self.subsystem.values()}):
            for q in ("V", "I"):
                ea, eg = self.per_order(q, sid)
                out[(sid, q)] = (float(ea.max()), float(np.nanmax(eg)) if np.any(~np.isnan(eg)) else math.nan)
        return out

    def is_zero(self) -> bool:
        return all(not np.any(v) for v in self.e_abs.values()) and \
            all(not np.any(np.nan_to_num(v)) for v in self.e_arg.values())


def kpi(ref: Spectra, test: Spectra, floor: float = ANGLE_FLOOR, nodes=None) -> KpiReport:
    if ref.harmonic_set.orders != test.harmonic_set.orders:
        raise ValueError("spectra use different harmonic sets")
    nodes = list(ref.subsystem) if nodes is None else list(nodes)
    if any(nd not in test.subsystem for nd in nodes) or (set(ref.subsystem) != set(test.subsystem)
                                                         and nodes == list(ref.subsystem)):
        raise ValueError("spectra cover different node sets")
    rep = KpiReport(np.arange(ref.harmonic_set.H + 1), {nd: ref.subsystem[nd] for nd in nodes})
    for nd in nodes:
        for q in ("V", "I"):
            a, b = ref.single_sided(q, nd), test.single_sided(q, nd)
            if a.shape != b.shape:
                raise ValueError(f"node {nd}: spectra shapes differ")
            rep.e_abs[(q, nd)] = np.max(np.abs(np.abs(a) - np.abs(b)), axis=0)
            d = np.abs(wrap_angle(np.angle(b) - np.angle(a)))
            valid = (np.abs(a) >= floor) | (np.abs(b) >= floor)
            d = np.where(valid, d, np.nan)
            with np.errstate(all="ignore"):
                rep.e_arg[(q, nd)] = np.where(np.all(~valid, axis=0), np.nan,
                                              np.nanmax(np.where(valid, d, -np.inf), axis=0))
    return rep


# --- classic fundamental power flow -------------------------------------------

@dataclass
class FundamentalSolution:
    V: dict          # node -> complex single-sided phasor (AC phase a) or DC voltage
    I: dict          # node -> injected current, same convention
    converged: bool
    residual: float


def _nodal(sub, omega, z_base):
    idx = {nd: i for i, nd in enumerate(sub.nodes)}
    Y = np.zeros((len(idx),) * 2, complex)
    types = {t.id: t for t in sub.line_types}
    for br in sub.branches:
        t = types[br.line_type]
        y = z_base / ((t.r + 1j * omega * t.l) * br.length_km)
        b = 1j * omega * t.c * br.length_km / 2 * z_base if sub.line_charging else 0.0
        i, j = idx[br.from_node], idx[br.to_node]
        Y[i, i] += y + b
        Y[j, j] += y + b
        Y[i, j] -= y
        Y[j, i] -= y
    return Y, idx


def fundamental_powerflow_oracle(study, tol: float = 1e-12) -> FundamentalSolution:
    """Balanced fundamental/DC power flow with power-balance NICs (losses ``R |I|^2``)."""
    b = study.bases
    w = 2 * math.pi * b.f0
    ac = [s for s in study.subsystems if s.kind == "AC"]
    dc = [s for s in study.subsystems if s.kind == "DC"]
    mats, offs, pos = {}, {}, 0
    for s in ac:
        mats[s.id] = _nodal(s, w, b.z_ac)
        offs[s.id] = pos
        pos += 2 * len(s.nodes)
    for s in dc:
        mats[s.id] = _nodal(s, 0.0, b.z_dc)
        offs[s.id] = pos
        pos += len(s.nodes)
    vdcq = [n for n in study.nics if n.control == "VdcQ"]
    extra = {n.dc_node: pos + 2 * k for k, n in enumerate(vdcq)}
    size = pos + 2 * len(vdcq)
    where = {nd: (s, mats[s.id][1][nd]) for s in study.subsystems for nd in s.nodes}

    def voltages(x):
        V = {}
        for s in ac:
            o = offs[s.id]
            m = len(s.nodes)
            V.update(zip(s.nodes, x[o:o + m] + 1j * x[o + m:o + 2 * m]))
        for s in dc:
            o = offs[s.id]
            V.update(zip(s.nodes, x[o:o + len(s.nodes)] + 0j))
        return V

    def injections(x, V):
        I = {nd: 0j for nd in V}
        eqs = []
        for r in study.resources:
            v, p = V[r.node], r.parameters
            kind = where[r.node][0].kind
            if r.type == "thevenin":
                h1 = next(h for h in p["harmonics"] if h["order"] == 1)
                E = h1["magnitude_pu"] * np.exp(1j * h1["angle_rad"])
                X = p["z_sc_ohm"] / math.sqrt(1 + p["r_over_x"] ** 2) / b.z_ac
                I[r.node] += (E - v) / complex(p["r_over_x"] * X, X)
            elif r.type == "Z":
                S_abs = -complex(p["P_kW"], p.get("Q_kvar", 0.0)) * 1e3 / b.P_b
                I[r.node] += -v * (S_abs.real if kind == "DC" else np.conj(S_abs))
            elif r.type == "I":
                I[r.node] += p["P_kW"] * 1e3 / b.P_b
            else:
                S = 0j
                for d in p["devices"]:
                    q = d["Q_kvar"] if "Q_kvar" in d else d["P_kW"] * math.tan(math.acos(d.get("pf", 1.0)))
                    S += complex(d["P_kW"], q)
                I[r.node] += np.conj(S * 1e3 / b.P_b / v)
        for n in study.nics:
            Rl = (n.hardware.R_conv + n.hardware.R_grid) / b.z_ac
            Q = n.Q_kvar * 1e3 / b.P_b
            va, vd = V[n.ac_node], V[n.dc_node]
            c = Rl / abs(va) ** 2
            if n.control == "PQ":
                P = n.P_kW * 1e3 / b.P_b
                I[n.dc_node] += -(P + c * (P * P + Q * Q)) / vd
            else:
                k = extra[n.dc_node]
                idc, P = x[k], x[k + 1]
                I[n.dc_node] += idc
                eqs += [vd.real - n.V_dc_ref_V / b.V_b_dc, P + c * (P * P + Q * Q) + n.V_dc_ref_V / b.V_b_dc * idc]
            I[n.ac_node] += np.conj(complex(P, Q) / va)
        return I, eqs

    def F(x):
        V = voltages(x)
        I, eqs = injections(x, V)
        out = np.zeros(size)
        for s in study.subsystems:
            Y, idx = mats[s.id]
            v = np.array([V[nd] for nd in s.nodes])
            mis = Y @ v - np.array([I[nd] for nd in s.nodes])
            o, m = offs[s.id], len(s.nodes)
            if s.kind == "AC":
                out[o:o + m], out[o + m:o + 2 * m] = mis.real, mis.imag
            else:
                out[o:o + m] = mis.real
        out[pos:] = eqs
        return out

    x0 = np.zeros(size)
    for s in ac:
        x0[offs[s.id]:offs[s.id] + len(s.nodes)] = 1.0
    for s in dc:
        x0[offs[s.id]:offs[s.id] + len(s.nodes)] = 1.0
    sol = root(F, x0, method="hybr", options={"xtol": 1e-15, "maxfev": 20000})
    x = sol.x
    res = float(np.abs(F(x)).max())
    V = voltages(x)
    I, _ = injections(x, V)
    return FundamentalSolution(V, I, res < tol, res)


# --- nodal fixed-point HPF ----------------------------------------------------

@dataclass
class FixedPointResult:
    converged: bool
    iterations: int
    residual_history: list
    spectra: Spectra | None
    diagnostics: str = ""


class _NodalForm:
    """Unknowns ``[V (all nodes) | I (forming ports)]`` per subsystem, complex."""

    def __init__(self, model):
        self.m = model
        hs = model.harmonic_set
        n = hs.n
        self.n = n
        self.vsl, self.isl, pos = {}, {}, 0
        self.forming = set()
        for s in model.subsystems:
            for nd in s.nodes:
                self.vsl[nd] = slice(pos, pos + s.phases * n)
                pos += s.phases * n
            for nd in model.partition[s.id].S:
                self.isl[nd] = slice(pos, pos + s.phases * n)
                self.forming.add(nd)
                pos += s.phases * n
        self.size = pos
        self.nic_of = {}
        for nic in model.nics:
            self.nic_of[nic.device.ac_node] = nic
            self.nic_of[nic.device.dc_node] = nic
        self.ph = {nd: s.phases for s in model.subsystems for nd in s.nodes}

    def _get(self, z, sl, nd):
        return z[sl].reshape(self.ph[nd], self.n)

    def V(self, z, nd):
        return self._get(z, self.vsl[nd], nd)

    def I_port(self, z, nd):
        return self._get(z, self.isl[nd], nd)

    def residual(self, z):
        m, out = self.m, np.zeros(self.size, complex)
        for s in m.subsystems:
            Vn = np.stack([self.V(z, nd) for nd in s.nodes])
            Ig = np.einsum("kij,jpk->ipk", m.Y[s.id], Vn)
            for i, nd in enumerate(s.nodes):
                if nd in self.forming:
                    inj = self.I_port(z, nd)
                    if nd in self.nic_of:
                        nic = self.nic_of[nd]
                        Vf = nic.evaluate(self.V(z, nic.device.ac_node), inj)[1]
                    else:
                        Vf = m.node_responses[nd].evaluate(inj)
                    out[self.isl[nd]] = (self.V(z, nd) - Vf).ravel()
                elif nd in self.nic_of:
                    nic = self.nic_of[nd]
                    inj = nic.evaluate(self.V(z, nd), self.I_port(z, nic.device.dc_node))[0]
                else:
                    inj = m.node_responses[nd].evaluate(self.V(z, nd))
                out[self.vsl[nd]] = (Ig[i] - inj).ravel()
        return out

    def matrix(self, z):
        m, N2 = self.m, 2 * self.size
        rows, cols, data = [], [], []

        def put(block, rsl, csl, sign=1.0):
            b = sp.coo_matrix(block)
            rows.append(b.row + 2 * rsl.start)
            cols.append(b.col + 2 * csl.start)
            data.append(sign * b.data)

        for s in m.subsystems:
            Yk = m.Y[s.id]
            for i, a in enumerate(s.nodes):
                for j, c in enumerate(s.nodes):
                    if np.any(Yk[:, i, j]):
                        put(real_stack_matrix(sp.kron(sp.eye(s.phases), sp.diags(Yk[:, i, j]))),
                            self.vsl[a], self.vsl[c])
            for nd in s.nodes:
                eye = sp.eye(2 * s.phases * self.n)
                if nd in self.forming:
                    put(eye, self.vsl[nd], self.isl[nd], -1.0)
                    put(eye, self.isl[nd], self.vsl[nd])
                    if nd in self.nic_of:
                        nic = self.nic_of[nd]
                        J = nic.jacobian(self.V(z, nic.device.ac_node), self.I_port(z, nd))
                        put(J["dd"], self.isl[nd], self.isl[nd], -1.0)
                        put(J["da"], self.isl[nd], self.vsl[nic.device.ac_node], -1.0)
                    else:
                        put(m.node_responses[nd].jacobian(self.I_port(z, nd)), self.isl[nd], self.isl[nd], -1.0)
                elif nd in self.nic_of:
                    nic = self.nic_of[nd]
                    dc = nic.device.dc_node
                    J = nic.jacobian(self.V(z, nd), self.I_port(z, dc))
                    put(J["aa"], self.vsl[nd], self.vsl[nd], -1.0)
                    put(J["ad"], self.vsl[nd], self.isl[dc], -1.0)
                else:
                    put(m.node_responses[nd].jacobian(self.V(z, nd)), self.vsl[nd], self.vsl[nd], -1.0)
        return sp.csc_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(N2, N2))

    def from_hybrid(self, x):
        V, I = self.m.terminal_spectra(x)
        z = np.zeros(self.size, complex)
        for nd, sl in self.vsl.items():
            z[sl] = V[nd].ravel()
        for nd, sl in self.isl.items():
            z[sl] = I[nd].ravel()
        return z

    def spectra(self, z) -> Spectra:
        m = self.m
        V, I = {}, {}
        sub = {}
        for s in m.subsystems:
            Vn = np.stack([self.V(z, nd) for nd in s.nodes])
            Ig = np.einsum("kij,jpk->ipk", m.Y[s.id], Vn)
            for i, nd in enumerate(s.nodes):
                V[nd], I[nd], sub[nd] = Vn[i], Ig[i], (s.id, s.kind)
        return Spectra(m.harmonic_set, sub, V, I)

    def refresh(self, z) -> float:
        sp_ = self.spectra(z)
        ch = 0.0
        for nd, r in self.m.node_responses.items():
            if not r.linear and nd in sp_.V:
                ch = max(ch, r.refresh(sp_.V[nd], sp_.I[nd]))
        for nic in self.m.nics:
            d = nic.device
            ch = max(ch, nic.refresh(sp_.V[d.ac_node], sp_.I[d.dc_node]))
        return ch


def fixed_point_hpf(model, tol: float = 1e-10, max_iter: int = 300, guard: float = 1e3,
                    x0=None) -> FixedPointResult:
    """Chord iteration ``z <- z - M^-1 F(z)`` with ``M`` frozen at the start point.

    Nonlinear devices are refreshed at every iteration, so a converged point
    is a fixed point of both the equations and the linearizations.  Divergence
    (residual growth by ``guard`` over its running minimum, or non-finite
    values) is reported, not raised.
    """
    form = _NodalForm(model)
    z = form.from_hybrid(model.initialize() if x0 is None else x0)
    try:
        lu = spla.splu(form.matrix(z))
    except RuntimeError as exc:
        return FixedPointResult(False, 0, [], None, f"singular iteration matrix: {exc}")
    hist, best = [], np.inf
    for it in range(max_iter):
        try:
            form.refresh(z)
        except (ValueError, np.linalg.LinAlgError) as exc:
            return FixedPointResult(False, it, hist, None, f"diverged: {exc}")
        r = to_real_stacked(form.residual(z))
        res = float(np.abs(r).max())
        hist.append(res)
        if not np.isfinite(res) or res > guard * best:
            return FixedPointResult(False, it, hist, None,
                                    f"diverged at iteration {it}: residual {res:.3e} (best {best:.3e})")
        best = min(best, res)
        if res < tol:
            return FixedPointResult(True, it, hist, form.spectra(z))
        z = z - from_real_stacked(lu.solve(r))
    return FixedPointResult(False, max_iter, hist, None, f"no convergence in {max_iter} iterations "
                                                          f"(residual {hist[-1]:.3e})")



# --- decoupling reference -------------------------------------------------------

def _decoupled_factory(p_decoupled):
    from hybrid_hpf.nic import PowerBalanceNic

    def make(spec, dev, hset, hw):
        P = (p_decoupled or {}).get(spec.ac_node, 0.0) if dev.control == "VdcQ" else None
        return PowerBalanceNic(dev, hset, hw, coupled=False, p_decoupled=P)
    return make


def decoupled_hybrid_model(study, config, p_decoupled=None):
    """Hybrid model whose NICs have their AC/DC cross-coupling forced to zero.

    ``p_decoupled`` maps the AC node of a V_DC-controlled NIC to the AC-side
    power it exchanges once decoupled (default 0).
    """
    from hybrid_hpf.study import build_model
    return build_model(study, config, nic_factory=_decoupled_factory(p_decoupled))


def split_subsystem_solve(study, config, p_decoupled=None):
    """Solve each subsystem on its own, every NIC replaced by its two decoupled halves.

    Returns ``(spectra, reports)`` with one :class:`SolveReport` per subsystem.
    """
    from hybrid_hpf.harmonic import HarmonicSet
    from hybrid_hpf.network import NodePartition, SubsystemPartition, classify_nodes
    from hybrid_hpf.solver import HybridModel, run
    from hybrid_hpf.study import _resource_response, nic_device

    b = study.bases
    hset = HarmonicSet.full(config.H, b.f0)
    make = _decoupled_factory(p_decoupled)
    ports = {}
    for spec in study.nics:
        dev = nic_device(spec, b)
        nic = make(spec, dev, hset, dev.hardware.scaled(b.z_ac, b.z_dc))
        ports[spec.ac_node], ports[spec.dc_node] = nic.split_ports()
    part = classify_nodes(study)
    V, I, owner, reports = {}, {}, {}, []
    for sub in study.subsystems:
        p = part[sub.id]
        # NIC endpoints become ordinary single-port nodes
        alone = NodePartition({sub.id: SubsystemPartition(S1=p.S1 + p.S2, R1=p.R1 + p.R2)})
        resp = {r.node: _resource_response(r, sub, hset, b) for r in study.resources
                if r.node in sub.nodes}
        resp.update({nd: ports[nd] for nd in sub.nodes if nd in ports})
        model = HybridModel([sub], alone, hset, {"AC": b.z_ac, "DC": b.z_dc}, resp)
        rep = run(model, config)
        reports.append(rep)
        V.update(rep.voltages)
        I.update(rep.currents)
        owner.update({nd: (sub.id, sub.kind) for nd in sub.nodes})
    return Spectra(hset, owner, V, I), reports


# --- validation suite ------------------------------------------------------------

@dataclass
class Check:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def __post_init__(self):
        self.passed, self.value = bool(self.passed), float(self.value)


def _max_spectrum_gap(a: Spectra, b: Spectra) -> float:
    return max(float(np.abs(X[nd] - Y[nd]).max()) for X, Y in ((a.V, b.V), (a.I, b.I))
               for nd in a.subsystem)


def check_fundamental(study) -> Check:
    """HPF with harmonic sources removed vs the classic fundamental power flow."""
    from hybrid_hpf.results import result_set
    from hybrid_hpf.solver import run
    from hybrid_hpf.study import build_model, without_harmonic_sources
    st0 = without_harmonic_sources(study)
    cfg = replace(st0.solver, H=1, tier="power-balance")
    model = build_model(st0, cfg)
    rep = run(model, cfg)
    ref = fundamental_powerflow_oracle(st0)
    sp_ = result_set(st0, model, rep).spectra
    err = 0.0
    for nd, (_, kind) in sp_.subsystem.items():
        v = sp_.single_sided("V", nd)[0, 1 if kind == "AC" else 0]
        err = max(err, abs(v - ref.V[nd]))
    ok = rep.converged and ref.converged and err < 1e-8
    return Check("fundamental power flow", ok, err, 1e-8, f"{len(sp_.subsystem)} nodes")


def check_fixed_point(study, H: int = 5) -> Check:
    """Newton HPF vs the nodal chord iteration at a reduced harmonic order."""
    from hybrid_hpf.results import result_set
    from hybrid_hpf.solver import run
    from hybrid_hpf.study import build_model
    cfg = replace(study.solver, H=min(H, study.solver.H), tier="power-balance")
    model = build_model(study, cfg)
    rep = run(model, cfg)
    fp = fixed_point_hpf(build_model(study, cfg))
    if not (rep.converged and fp.converged):
        return Check("fixed-point vs Newton", False, math.inf, 1e-8, fp.diagnostics or rep.diagnostics)
    err = _max_spectrum_gap(result_set(study, model, rep).spectra, fp.spectra)
    return Check("fixed-point vs Newton", err < 1e-8, err, 1e-8, f"H={cfg.H}, {fp.iterations} iterations")


def check_decoupling(study, H: int = 5, p_decoupled=None) -> Check:
    """Hybrid solve with zero NIC cross-coupling vs independent subsystem solves."""
    from hybrid_hpf.results import result_set
    from hybrid_hpf.solver import run
    # both sides converged well below the comparison tolerance
    cfg = replace(study.solver, H=min(H, study.solver.H), tier="power-balance", tol_residual=1e-12)
    model = decoupled_hybrid_model(study, cfg, p_decoupled)
    rep = run(model, cfg)
    split, reps = split_subsystem_solve(study, cfg, p_decoupled)
    ok = rep.converged and all(r.converged for r in reps)
    err = _max_spectrum_gap(result_set(study, model, rep).spectra, split) if ok else math.inf
    return Check("decoupling limit", ok and err < 1e-10, err, 1e-10, f"H={cfg.H}")


def check_kpi_identity(study, H: int = 5) -> Check:
    from hybrid_hpf.results import result_set
    from hybrid_hpf.solver import run
    from hybrid_hpf.study import build_model
    cfg = replace(study.solver, H=min(H, study.solver.H))
    model = build_model(study, cfg)
    sp_ = result_set(study, model, run(model, cfg)).spectra
    rep = kpi(sp_, sp_)
    return Check("KPI self-identity", rep.is_zero(), 0.0 if rep.is_zero() else 1.0, 0.0)


def check_cosim(H: int = 25, floor: float = 1e-3) -> Check:
    """Averaged-tier HPF vs time-domain cosimulation on the reduced benchmark."""
    from hybrid_hpf.results import result_set
    from hybrid_hpf.solver import run
    from hybrid_hpf.study import build_model, reduced_benchmark
    from hybrid_hpf.timedomain import timedomain_cosim
    st = reduced_benchmark(H)
    cfg = replace(st.solver, tier="averaged", outer_max=max(st.solver.outer_max, 10))
    model = build_model(st, cfg)
    rep = run(model, cfg)
    if not rep.converged:
        return Check("HPF vs cosimulation", False, math.inf, 1e-3, rep.diagnostics)
    k = kpi(result_set(st, model, rep).spectra, timedomain_cosim(st, H=H).spectra, floor=floor)
    m = k.maxima()
    ea = max(v[0] for v in m.values())
    eg = max((v[1] for v in m.values() if not math.isnan(v[1])), default=0.0)
    return Check("HPF vs cosimulation", ea <= 1e-3 and eg <= 0.1, ea, 1e-3,
                 f"H={H}, max angle error {eg:.2e} rad above {floor:g} p.u.")


def validation_suite(study, cosim: bool = True) -> list[Check]:
    """Cross-checks of ``study`` (plus the reduced-benchmark cosimulation)."""
    checks = [check_fundamental(study), check_fixed_point(study), check_decoupling(study),
              check_kpi_identity(study)]
    if cosim:
        checks.append(check_cosim())
    return checks
