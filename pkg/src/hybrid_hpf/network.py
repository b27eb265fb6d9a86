"""Grid subsystems: topology, harmonic admittance matrices and hybrid parameters.

Admittances are returned in per-unit of the subsystem's impedance base.  AC
subsystems are balanced: the positive-sequence per-phase admittance is
replicated on every phase (``kron(Y, I_3)``).  Ordering of compound vectors
is ``(node, phase, order)`` with the harmonic order running fastest.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from hybrid_hpf.harmonic import HarmonicSet

PHASES = {"AC": 3, "DC": 1}


class SingularAdmittanceWarning(UserWarning):
    pass


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class LineType:
    """Per-km line parameters (SI).  ``r, l, c`` are positive-sequence values.

    Zero-sequence data is kept for completeness; balanced studies ignore it.
    """

    id: str
    r: float
    l: float
    c: float
    r0: float | None = None
    l0: float | None = None
    c0: float | None = None

    def __post_init__(self):
        for name in ("r", "l", "c", "r0", "l0", "c0"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise NetworkError(f"line type {self.id}: {name} must be non-negative")


@dataclass(frozen=True)
class Branch:
    from_node: str
    to_node: str
    length_km: float
    line_type: str


@dataclass(frozen=True)
class Subsystem:
    id: str
    kind: str
    nodes: tuple[str, ...]
    branches: tuple[Branch, ...]
    line_types: tuple[LineType, ...]
    line_charging: bool = True

    def __post_init__(self):
        if self.kind not in PHASES:
            raise NetworkError(f"subsystem {self.id}: kind must be AC or DC")
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "line_types", tuple(self.line_types))
        if len(set(self.nodes)) != len(self.nodes):
            raise NetworkError(f"subsystem {self.id}: duplicate node labels")
        types = {lt.id for lt in self.line_types}
        for b in self.branches:
            for nd in (b.from_node, b.to_node):
                if nd not in self.nodes:
                    raise NetworkError(f"subsystem {self.id}: branch references unknown node {nd!r}")
            if b.line_type not in types:
                raise NetworkError(f"subsystem {self.id}: unknown line type {b.line_type!r}")
            if b.length_km <= 0 or b.from_node == b.to_node:
                raise NetworkError(f"subsystem {self.id}: invalid branch {b.from_node}-{b.to_node}")
        if len(self.nodes) > 1:
            idx = {nd: i for i, nd in enumerate(self.nodes)}
            r = [idx[b.from_node] for b in self.branches]
            c = [idx[b.to_node] for b in self.branches]
            g = sp.coo_matrix((np.ones(len(r)), (r, c)), shape=(len(self.nodes),) * 2)
            ncomp, _ = connected_components(g, directed=False)
            if ncomp != 1:
                raise NetworkError(f"subsystem {self.id}: network is not connected")

    @property
    def phases(self) -> int:
        return PHASES[self.kind]

    def line_type(self, lid: str) -> LineType:
        return next(lt for lt in self.line_types if lt.id == lid)

    def node_index(self) -> dict[str, int]:
        return {nd: i for i, nd in enumerate(self.nodes)}


def build_admittance(sub: Subsystem, h: int, omega0: float, z_base: float) -> np.ndarray:
    """Per-phase nodal admittance at order ``h`` (p.u.), π-model branches."""
    n = len(sub.nodes)
    idx = sub.node_index()
    Y = np.zeros((n, n), dtype=complex)
    w = h * omega0
    for b in sub.branches:
        lt = sub.line_type(b.line_type)
        z = (lt.r + 1j * w * lt.l) * b.length_km
        if z == 0:
            raise NetworkError(f"subsystem {sub.id}: zero series impedance on {b.from_node}-{b.to_node}")
        y = z_base / z
        ysh = 1j * w * lt.c * b.length_km / 2 * z_base if sub.line_charging else 0.0
        i, j = idx[b.from_node], idx[b.to_node]
        Y[i, i] += y + ysh
        Y[j, j] += y + ysh
        Y[i, j] -= y
        Y[j, i] -= y
    if h == 0 and sub.kind == "AC" and np.linalg.matrix_rank(Y) < n:
        warnings.warn(f"subsystem {sub.id}: admittance at h=0 is singular (no shunt path)",
                      SingularAdmittanceWarning, stacklevel=2)
    return Y


def compound(Y: np.ndarray, phases: int) -> np.ndarray:
    return np.kron(Y, np.eye(phases))


@dataclass(frozen=True)
class SubsystemPartition:
    S1: tuple[str, ...] = ()
    S2: tuple[str, ...] = ()
    R1: tuple[str, ...] = ()
    R2: tuple[str, ...] = ()

    @property
    def S(self) -> tuple[str, ...]:
        return self.S1 + self.S2

    @property
    def R(self) -> tuple[str, ...]:
        return self.R1 + self.R2

    def validate(self, sub: Subsystem):
        sets = [set(self.S1), set(self.S2), set(self.R1), set(self.R2)]
        if sum(len(s) for s in sets) != len(set().union(*sets)):
            raise NetworkError(f"subsystem {sub.id}: partition sets overlap")
        if set().union(*sets) != set(sub.nodes):
            raise NetworkError(f"subsystem {sub.id}: partition does not cover all nodes")


@dataclass(frozen=True)
class NodePartition:
    parts: Mapping[str, SubsystemPartition]

    def __getitem__(self, sid: str) -> SubsystemPartition:
        return self.parts[sid]


FORMING = frozenset({"thevenin"})


def classify_nodes(study) -> NodePartition:
    """Partition every subsystem's nodes from the attached devices.

    ``study`` needs ``subsystems``, ``resources`` (``.node``, ``.type``) and
    ``nics`` (``.ac_node``, ``.dc_node``).
    """
    owner: dict[str, str] = {}
    kind_of = {nd: sub for sub in study.subsystems for nd in sub.nodes}

    def attach(node, what):
        if node not in kind_of:
            raise NetworkError(f"{what} references unknown node {node!r}")
        if node in owner:
            raise NetworkError(f"node {node} has two attached devices ({owner[node]}, {what}); "
                               "aggregate them before building the study")
        owner[node] = what

    roles = {}
    for r in study.resources:
        attach(r.node, f"{r.type} resource")
        roles[r.node] = "S1" if r.type in FORMING else "R1"
    for k, nic in enumerate(study.nics):
        ac, dc = kind_of.get(nic.ac_node), kind_of.get(nic.dc_node)
        if ac is None or dc is None:
            raise NetworkError(f"NIC {k} references an unknown node")
        if ac.kind != "AC" or dc.kind != "DC":
            raise NetworkError(f"NIC {k} ({nic.ac_node}/{nic.dc_node}) must connect an AC node "
                               "to a DC node; forming-AC/following-DC NICs are unsupported")
        attach(nic.ac_node, f"NIC {k}")
        attach(nic.dc_node, f"NIC {k}")
        roles[nic.ac_node] = "R2"
        roles[nic.dc_node] = "S2"
    parts = {}
    for sub in study.subsystems:
        groups = {"S1": [], "S2": [], "R1": [], "R2": []}
        for nd in sub.nodes:
            groups[roles.get(nd, "R1")].append(nd)
        p = SubsystemPartition(**{k: tuple(v) for k, v in groups.items()})
        p.validate(sub)
        parts[sub.id] = p
    return NodePartition(parts)


@dataclass(frozen=True, eq=False)
class HybridMatrixBlocks:
    """Per-order compound hybrid blocks, each of shape ``(n_orders, rows, cols)``."""

    subsystem: str
    harmonic_set: HarmonicSet
    phases: int
    H_SS: np.ndarray
    H_SR: np.ndarray
    H_RS: np.ndarray
    H_RR: np.ndarray

    def apply(self, I_S: np.ndarray, V_R: np.ndarray):
        """``(V_S, I_R)`` from per-order compound vectors ``(n_orders, |S|*ph)``, ``(n_orders, |R|*ph)``."""
        V_S = np.einsum("kij,kj->ki", self.H_SS, I_S) + np.einsum("kij,kj->ki", self.H_SR, V_R)
        I_R = np.einsum("kij,kj->ki", self.H_RS, I_S) + np.einsum("kij,kj->ki", self.H_RR, V_R)
        return V_S, I_R

    def assemble(self, name: str) -> sp.csr_matrix:
        """Sparse block in ``(node, phase, order)`` layout, order fastest."""
        M = getattr(self, name)
        n, a, b = M.shape
        k, i, j = np.nonzero(M)
        return sp.csr_matrix((M[k, i, j], (i * n + k, j * n + k)), shape=(a * n, b * n))


def hybrid_blocks(sub: Subsystem, Y: np.ndarray, part: SubsystemPartition,
                  hset: HarmonicSet) -> HybridMatrixBlocks:
    """Hybrid blocks from per-order per-phase admittances ``Y[k]`` (shape ``(n_orders, N, N)``)."""
    idx = sub.node_index()
    s = [idx[nd] for nd in part.S]
    r = [idx[nd] for nd in part.R]
    ph = sub.phases
    nS, nR = len(s) * ph, len(r) * ph
    out = {k: np.zeros((hset.n, a, b), complex)
           for k, (a, b) in {"H_SS": (nS, nS), "H_SR": (nS, nR), "H_RS": (nR, nS), "H_RR": (nR, nR)}.items()}
    for k, h in enumerate(hset.orders):
        Yk = Y[k]
        Yss, Ysr = Yk[np.ix_(s, s)], Yk[np.ix_(s, r)]
        Yrs, Yrr = Yk[np.ix_(r, s)], Yk[np.ix_(r, r)]
        if s:
            if np.linalg.cond(Yss) > 1e14:
                raise NetworkError(f"subsystem {sub.id}: Y_SS is singular at harmonic order {h}")
            inv = np.linalg.inv(Yss)
            blocks = (inv, -inv @ Ysr, Yrs @ inv, Yrr - Yrs @ inv @ Ysr)
        else:
            blocks = (np.zeros((0, 0)), np.zeros((0, len(r))), np.zeros((len(r), 0)), Yrr)
        for name, m in zip(("H_SS", "H_SR", "H_RS", "H_RR"), blocks):
            out[name][k] = compound(m, ph)
    return HybridMatrixBlocks(sub.id, hset, ph, **out)


def admittance_stack(sub: Subsystem, hset: HarmonicSet, omega0: float, z_base: float) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SingularAdmittanceWarning)
        return np.stack([build_admittance(sub, h, omega0, z_base) for h in hset.orders])
