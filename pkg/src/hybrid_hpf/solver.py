"""Hybrid AC/DC harmonic power flow by Newton-Raphson.

Unknowns per subsystem are the injected currents at grid-forming nodes
(``S = S1 + S2``) and the voltages at grid-following nodes (``R = R1 + R2``).
The stacked vector is ``[I_S | V_R]`` for every AC subsystem followed by every
DC subsystem, each entry laid out as ``(node, phase, order)`` and real-stacked.

The mismatch is ``resource - grid`` for both halves, so the Jacobian is
``J = J_RSC - J_GRD``.  Responses that linearize keep a fixed operating point
during one Newton solve; the outer loop refreshes them.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from hybrid_hpf.harmonic import HarmonicSet, from_real_stacked, real_stack_matrix, to_real_stacked
from hybrid_hpf.network import (
    HybridMatrixBlocks, NodePartition, admittance_stack, hybrid_blocks,
)
from hybrid_hpf.resources import (
    FOLLOWING, FORMING, ZeroInjectionResponse, balanced_spectrum,
)

log = logging.getLogger(__name__)


class SingularJacobianError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    tol_residual: float = 1e-8
    max_iter: int = 20
    outer_max: int = 5
    outer_tol: float = 1e-9
    damping: float = 1.0
    H: int = 25
    tier: str = "power-balance"
    linear_solver: str = "sparse"

    def __post_init__(self):
        if not (self.tol_residual > 0 and self.outer_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1 or self.outer_max < 0:
            raise ValueError("max_iter must be >= 1 and outer_max >= 0")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.linear_solver not in ("sparse", "dense"):
            raise ValueError("linear_solver must be 'sparse' or 'dense'")

    @property
    def harmonic_set(self) -> HarmonicSet:
        return HarmonicSet.full(self.H)


@dataclass(frozen=True)
class Segment:
    subsystem: str
    role: str            # "S" (current unknown) or "R" (voltage unknown)
    node: str
    phases: int
    start: int           # complex offset

    def slice(self, n):
        return slice(self.start, self.start + self.phases * n)


class IndexMap:
    """Bijection ``(subsystem, node, phase, order) <-> position`` in the unknown vector."""

    def __init__(self, subsystems, partition: NodePartition, hset: HarmonicSet):
        self.harmonic_set = hset
        n = hset.n
        segs, pos = [], 0
        ordered = [s for s in subsystems if s.kind == "AC"] + [s for s in subsystems if s.kind == "DC"]
        self.blocks = {}
        for sub in ordered:
            part = partition[sub.id]
            for role, nodes in (("S", part.S), ("R", part.R)):
                begin = pos
                for nd in nodes:
                    segs.append(Segment(sub.id, role, nd, sub.phases, pos))
                    pos += sub.phases * n
                self.blocks[(sub.id, role)] = slice(begin, pos)
        self.segments = segs
        self.size = pos
        self.by_node = {s.node: s for s in segs}

    def node_slice(self, node: str) -> slice:
        return self.by_node[node].slice(self.harmonic_set.n)

    def real_slice(self, node: str) -> slice:
        s = self.node_slice(node)
        return slice(2 * s.start, 2 * s.stop)

    def describe(self, real_index: int):
        """``(subsystem, node, phase, order, part)`` of a real-stacked position."""
        n = self.harmonic_set.n
        c = real_index // 2
        for seg in self.segments:
            if seg.start <= c < seg.start + seg.phases * n:
                off = c - seg.start
                return (seg.subsystem, seg.node, off // n, self.harmonic_set.orders[off % n],
                        "re" if real_index % 2 == 0 else "im")
        raise IndexError(real_index)


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    outer_refreshes: int
    residual_history: list
    inner_iterations: list
    final_residual: float
    voltages: dict
    currents: dict
    harmonic_set: HarmonicSet
    outer_changes: list = field(default_factory=list)
    diagnostics: str = ""
    elapsed_s: float = 0.0
    x: np.ndarray | None = None


class HybridModel:
    """Grid blocks, device responses and the index map of one hybrid study."""

    def __init__(self, subsystems, partition: NodePartition, hset: HarmonicSet, z_bases: dict,
                 node_responses: dict, nic_responses=()):
        self.subsystems = list(subsystems)
        self.partition = partition
        self.harmonic_set = hset
        self.index = IndexMap(self.subsystems, partition, hset)
        self.node_responses = dict(node_responses)
        self.nics = list(nic_responses)
        self.Y = {}
        self.blocks: dict[str, HybridMatrixBlocks] = {}
        for sub in self.subsystems:
            self.Y[sub.id] = admittance_stack(sub, hset, hset.omega0, z_bases[sub.kind])
            self.blocks[sub.id] = hybrid_blocks(sub, self.Y[sub.id], partition[sub.id], hset)
        self._nic_nodes = {}
        for k, nic in enumerate(self.nics):
            self._nic_nodes[nic.device.ac_node] = k
            self._nic_nodes[nic.device.dc_node] = k
        for sub in self.subsystems:
            part = partition[sub.id]
            for nd in part.R1:
                self.node_responses.setdefault(nd, ZeroInjectionResponse(hset, sub.phases))
            for nd, kind in [(nd, FORMING) for nd in part.S1] + [(nd, FOLLOWING) for nd in part.R1]:
                r = self.node_responses.get(nd)
                if r is None:
                    raise ValueError(f"node {nd} in S1 has no grid-forming response")
                if r.kind != kind:
                    raise TypeError(f"node {nd}: {kind} node has a {r.kind} response")
            for nd in part.S2 + part.R2:
                if nd not in self._nic_nodes:
                    raise ValueError(f"node {nd} is a NIC endpoint without a NIC")
        self._grid = self._assemble_grid()

    # --- grid side ---------------------------------------------------------

    def _assemble_grid(self) -> sp.csr_matrix:
        """Complex block-diagonal map ``[I_S | V_R] -> [V_S | I_R]`` over all subsystems."""
        N = self.index.size
        parts = []
        for sub in self.subsystems:
            b = self.blocks[sub.id]
            s_sl = self.index.blocks[(sub.id, "S")]
            r_sl = self.index.blocks[(sub.id, "R")]
            for name, rs, cs in (("H_SS", s_sl, s_sl), ("H_SR", s_sl, r_sl),
                                 ("H_RS", r_sl, s_sl), ("H_RR", r_sl, r_sl)):
                M = b.assemble(name).tocoo()
                if M.nnz:
                    parts.append((M.data, M.row + rs.start, M.col + cs.start))
        if not parts:
            return sp.csr_matrix((N, N), dtype=complex)
        data, rows, cols = (np.concatenate(p) for p in zip(*parts))
        return sp.csr_matrix((data, (rows, cols)), shape=(N, N))

    def grid_jacobian(self) -> sp.csr_matrix:
        return real_stack_matrix(self._grid)

    # --- resource side -----------------------------------------------------

    def _node(self, z, nd):
        seg = self.index.by_node[nd]
        return z[seg.slice(self.harmonic_set.n)].reshape(seg.phases, -1)

    def resource_values(self, z: np.ndarray) -> np.ndarray:
        out = np.zeros_like(z)
        for nd, r in self.node_responses.items():
            if nd in self.index.by_node:
                out[self.index.node_slice(nd)] = r.evaluate(self._node(z, nd)).ravel()
        for nic in self.nics:
            d = nic.device
            I_ac, V_dc = nic.evaluate(self._node(z, d.ac_node), self._node(z, d.dc_node))
            out[self.index.node_slice(d.ac_node)] = I_ac.ravel()
            out[self.index.node_slice(d.dc_node)] = V_dc.ravel()
        return out

    def resource_jacobian(self, z: np.ndarray) -> sp.csr_matrix:
        N2 = 2 * self.index.size
        rows, cols, data = [], [], []

        def put(block, r0, c0):
            b = sp.coo_matrix(block)
            rows.append(b.row + r0)
            cols.append(b.col + c0)
            data.append(b.data)

        for nd, r in self.node_responses.items():
            if nd in self.index.by_node:
                s = self.index.real_slice(nd)
                put(r.jacobian(self._node(z, nd)), s.start, s.start)
        for nic in self.nics:
            d = nic.device
            J = nic.jacobian(self._node(z, d.ac_node), self._node(z, d.dc_node))
            a = self.index.real_slice(d.ac_node).start
            c = self.index.real_slice(d.dc_node).start
            put(J["aa"], a, a)
            put(J["ad"], a, c)
            put(J["da"], c, a)
            put(J["dd"], c, c)
        if not rows:
            return sp.csr_matrix((N2, N2))
        return sp.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(N2, N2))

    # --- system ------------------------------------------------------------

    def mismatch(self, x: np.ndarray) -> np.ndarray:
        z = from_real_stacked(x)
        return to_real_stacked(self.resource_values(z) - self._grid @ z)

    def jacobian(self, x: np.ndarray) -> sp.csr_matrix:
        z = from_real_stacked(x)
        return (self.resource_jacobian(z) - self.grid_jacobian()).tocsr()

    def terminal_spectra(self, x: np.ndarray):
        """Per-node ``(V, I)`` from a solution vector."""
        z = from_real_stacked(x)
        other = self._grid @ z
        V, I = {}, {}
        for seg in self.index.segments:
            sl = seg.slice(self.harmonic_set.n)
            a = z[sl].reshape(seg.phases, -1)
            b = other[sl].reshape(seg.phases, -1)
            if seg.role == "S":
                I[seg.node], V[seg.node] = a, b
            else:
                V[seg.node], I[seg.node] = a, b
        return V, I

    def linearized(self) -> bool:
        return bool(self.nics) or any(not r.linear for r in self.node_responses.values())

    def refresh(self, x: np.ndarray) -> float:
        V, I = self.terminal_spectra(x)
        change = 0.0
        for nd, r in self.node_responses.items():
            if nd in V and not r.linear:
                change = max(change, r.refresh(V[nd], I[nd]))
        for nic in self.nics:
            d = nic.device
            change = max(change, nic.refresh(V[d.ac_node], I[d.dc_node]))
        return change

    def initialize(self, dc_voltage: float = 1.0) -> np.ndarray:
        """Flat start: balanced 1 p.u. fundamental on AC, ``dc_voltage`` on DC."""
        hs = self.harmonic_set
        z = np.zeros(self.index.size, complex)
        flat = {"AC": balanced_spectrum(hs, 3, {1: (1.0, 0.0)}),
                "DC": balanced_spectrum(hs, 1, {0: (dc_voltage, 0.0)})}
        for sub in self.subsystems:
            Vall = np.stack([flat[sub.kind]] * len(sub.nodes))    # (nodes, ph, n)
            idx = sub.node_index()
            Ik = np.einsum("kij,jpk->ipk", self.Y[sub.id], Vall)  # per-phase nodal currents
            part = self.partition[sub.id]
            for nd in part.S:
                hint = self.node_responses[nd].initial_current(dc_voltage) if nd in part.S1 else None
                z[self.index.node_slice(nd)] = (Ik[idx[nd]] if hint is None else hint).ravel()
            for nd in part.R:
                z[self.index.node_slice(nd)] = flat[sub.kind].ravel()
        for nic in self.nics:
            i0 = nic.initial_dc_current(dc_voltage)
            if i0 is not None:
                sl = self.index.node_slice(nic.device.dc_node)
                seg = np.zeros(hs.n, complex)
                seg[hs.index(0)] = i0
                z[sl] = seg
        return to_real_stacked(z)


def _linear_solve(J, r, kind):
    if kind == "dense":
        Jd = J.toarray()
        try:
            return np.linalg.solve(Jd, r)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobianError(f"singular Jacobian (cond ~ {np.linalg.cond(Jd):.2e})") from exc
    try:
        step = spla.splu(J.tocsc()).solve(r)
    except RuntimeError as exc:
        est = spla.onenormest(J)
        raise SingularJacobianError(f"singular Jacobian ({J.shape[0]} unknowns, |J|_1 ~ {est:.2e}, "
                                    f"{exc})") from exc
    if not np.all(np.isfinite(step)):
        raise SingularJacobianError("non-finite Newton step")
    return step


def newton(model: HybridModel, x0: np.ndarray, config: SolverConfig):
    """Inner Newton loop on a fixed linearization.  Returns ``(x, converged, history, iters)``."""
    x = x0.copy()
    history = []
    for it in range(config.max_iter + 1):
        r = model.mismatch(x)
        res = float(np.abs(r).max(initial=0.0))
        history.append(res)
        log.debug("newton iteration %d residual %.3e", it, res)
        if res < config.tol_residual:
            return x, True, history, it
        if it == config.max_iter or not np.isfinite(res):
            break
        x = x - config.damping * _linear_solve(model.jacobian(x), r, config.linear_solver)
    return x, False, history, len(history) - 1


def run(model: HybridModel, config: SolverConfig, x0: np.ndarray | None = None) -> SolveReport:
    t0 = time.perf_counter()
    x = model.initialize() if x0 is None else x0
    histories, inner, changes = [], [], []
    refreshes, converged, diag = 0, False, ""
    try:
        while True:
            x, ok, hist, its = newton(model, x, config)
            histories.extend(hist)
            inner.append(its)
            if not ok:
                break
            if not model.linearized():
                converged = True
                break
            change = model.refresh(x)
            changes.append(change)
            if change < config.outer_tol:
                x, ok, hist, its = newton(model, x, config)
                histories.extend(hist)
                inner.append(its)
                converged = ok
                break
            if refreshes == config.outer_max:
                diag = f"operating points still moving after {refreshes} refreshes (change {change:.2e})"
                break
            refreshes += 1
    except SingularJacobianError as exc:
        diag = str(exc)
    r = model.mismatch(x)
    final = float(np.abs(r).max(initial=0.0))
    if not converged and not diag:
        k = int(np.argmax(np.abs(r)))
        sub, nd, p, h, part = model.index.describe(k)
        diag = (f"no convergence: largest residual {final:.3e} at subsystem {sub}, node {nd}, "
                f"phase {p}, order {h} ({part})")
    V, I = model.terminal_spectra(x)
    return SolveReport(converged=converged and final < config.tol_residual,
                       iterations=int(sum(inner)), outer_refreshes=refreshes,
                       residual_history=histories, inner_iterations=inner, final_residual=final,
                       voltages=V, currents=I, harmonic_set=model.harmonic_set,
                       outer_changes=changes, diagnostics=diag,
                       elapsed_s=time.perf_counter() - t0, x=x)


def assemble_mismatch(x, model: HybridModel) -> np.ndarray:
    return model.mismatch(x)


def assemble_jacobian(x, model: HybridModel) -> sp.csr_matrix:
    return model.jacobian(x)


def solve(study, config: SolverConfig | None = None) -> SolveReport:
    from hybrid_hpf.study import build_model
    config = config or study.solver
    return run(build_model(study, config), config)
