"""Solution spectra, CSV/JSON emission and re-parsing.

CSV rows carry single-sided values for orders ``0..H``: magnitude ``2|X_h|``
for ``h >= 1`` and ``|X_0|`` for DC, angle of ``X_h``.  SI magnitudes use
peak bases on AC.  Floats are written with ``repr`` so that output is
bitwise reproducible and re-parses exactly.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hybrid_hpf.harmonic import HarmonicSet
from hybrid_hpf.units import Bases

CSV_COLUMNS = ("subsystem", "node", "phase", "harmonic_order", "quantity",
               "magnitude_pu", "angle_rad", "magnitude_si", "angle_deg")


@dataclass(eq=False)
class Spectra:
    """Double-sided voltage and current spectra per node, shape ``(phases, n)``."""

    harmonic_set: HarmonicSet
    subsystem: dict          # node -> (subsystem id, kind)
    V: dict
    I: dict

    @property
    def nodes(self):
        return list(self.subsystem)

    def single_sided(self, quantity: str, node: str) -> np.ndarray:
        """Complex single-sided phasors for orders ``0..H``, shape ``(phases, H+1)``."""
        hs = self.harmonic_set
        X = (self.V if quantity == "V" else self.I)[node]
        out = np.stack([X[:, hs.index(h)] for h in range(hs.H + 1)], axis=1)
        out[:, 1:] *= 2.0
        return out

    def __eq__(self, other):
        if not isinstance(other, Spectra) or self.subsystem != other.subsystem:
            return False
        if self.harmonic_set.orders != other.harmonic_set.orders:
            return False
        return all(np.array_equal(a[k], b[k]) for a, b in ((self.V, other.V), (self.I, other.I))
                   for k in self.subsystem)


@dataclass(eq=False)
class ResultSet:
    spectra: Spectra
    bases: Bases
    report: dict = field(default_factory=dict)

    def __eq__(self, other):
        return (isinstance(other, ResultSet) and self.spectra == other.spectra
                and self.bases == other.bases and self.report == other.report)


def report_summary(rep) -> dict:
    """Deterministic subset of a :class:`~hybrid_hpf.solver.SolveReport` (no timings)."""
    return {"converged": bool(rep.converged), "iterations": int(rep.iterations),
            "outer_refreshes": int(rep.outer_refreshes),
            "inner_iterations": [int(k) for k in rep.inner_iterations],
            "residual_history": [float(r) for r in rep.residual_history],
            "final_residual": float(rep.final_residual), "diagnostics": rep.diagnostics}


def result_set(study, model, rep) -> ResultSet:
    sub = {}
    for s in model.subsystems:
        for nd in s.nodes:
            sub[nd] = (s.id, s.kind)
    return ResultSet(Spectra(model.harmonic_set, sub, dict(rep.voltages), dict(rep.currents)),
                     study.bases, report_summary(rep))


# --- CSV ---------------------------------------------------------------------

def csv_rows(res: ResultSet):
    sp_, b = res.spectra, res.bases
    for nd, (sid, kind) in sp_.subsystem.items():
        for q in ("V", "I"):
            X = sp_.single_sided(q, nd)
            base = b.signal_base(kind, q)
            for p in range(X.shape[0]):
                for h in range(X.shape[1]):
                    z = complex(X[p, h])
                    mag, ang = abs(z), math.atan2(z.imag, z.real)
                    yield (sid, nd, p, h, q, mag, ang, mag * float(base), math.degrees(ang))


def to_csv(res: ResultSet) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for row in csv_rows(res):
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


# --- JSON --------------------------------------------------------------------

def _enc(X):
    return [[[float(z.real), float(z.imag)] for z in row] for row in np.asarray(X)]


def _dec(rows):
    return np.array([[complex(re, im) for re, im in row] for row in rows], dtype=complex)


def to_json(res: ResultSet) -> str:
    hs, b = res.spectra.harmonic_set, res.bases
    doc = {
        "format": "hybrid-hpf-results", "version": 1,
        "bases": {"P_b_W": b.P_b, "V_b_ac_V": b.V_b_ac, "V_b_dc_V": b.V_b_dc, "f0_Hz": b.f0},
        "harmonic_orders": list(hs.orders),
        "nodes": [{"node": nd, "subsystem": sid, "kind": kind,
                   "V": _enc(res.spectra.V[nd]), "I": _enc(res.spectra.I[nd])}
                  for nd, (sid, kind) in res.spectra.subsystem.items()],
        "report": res.report,
    }
    return json.dumps(doc, indent=1)


def from_json(text: str) -> ResultSet:
    doc = json.loads(text)
    if doc.get("format") != "hybrid-hpf-results":
        raise ValueError("not a results file")
    b = doc["bases"]
    bases = Bases(b["P_b_W"], b["V_b_ac_V"], b["V_b_dc_V"], b["f0_Hz"])
    hs = HarmonicSet(bases.f0, tuple(doc["harmonic_orders"]))
    sub, V, I = {}, {}, {}
    for e in doc["nodes"]:
        sub[e["node"]] = (e["subsystem"], e["kind"])
        V[e["node"]] = _dec(e["V"])
        I[e["node"]] = _dec(e["I"])
    return ResultSet(Spectra(hs, sub, V, I), bases, doc.get("report", {}))


def write_results(res: ResultSet, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "spectra.csv", "json": out / "results.json"}
    paths["csv"].write_text(to_csv(res))
    paths["json"].write_text(to_json(res) + "\n")
    return paths


def read_results(path) -> ResultSet:
    p = Path(path)
    if p.is_dir():
        p = p / "results.json"
    return from_json(p.read_text())


def spectra_from_csv(text: str, f0: float = 50.0) -> Spectra:
    """Rebuild double-sided spectra from CSV rows (phases per node fix the subsystem kind)."""
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise ValueError("not a spectra CSV (header mismatch)")
    H = max(int(r["harmonic_order"]) for r in rows)
    hs = HarmonicSet.full(H, f0)
    sub, phases, vals = {}, {}, {}
    for r in rows:
        nd = r["node"]
        sub.setdefault(nd, r["subsystem"])
        phases[nd] = max(phases.get(nd, 0), int(r["phase"]) + 1)
        vals[(nd, r["quantity"], int(r["phase"]), int(r["harmonic_order"]))] = \
            float(r["magnitude_pu"]) * np.exp(1j * float(r["angle_rad"]))
    V, I = {}, {}
    for nd, ph in phases.items():
        for q, store in (("V", V), ("I", I)):
            X = np.zeros((ph, hs.n), complex)
            for p in range(ph):
                for h in range(H + 1):
                    z = vals[(nd, q, p, h)]
                    if h == 0:
                        X[p, hs.index(0)] = z
                    else:
                        X[p, hs.index(h)] = z / 2
                        X[p, hs.index(-h)] = np.conj(z) / 2
            store[nd] = X
    owner = {nd: (sid, "AC" if phases[nd] == 3 else "DC") for nd, sid in sub.items()}
    return Spectra(hs, owner, V, I)


def read_spectra(path) -> Spectra:
    """Spectra from a results directory, ``results.json`` or a spectra CSV."""
    p = Path(path)
    if p.suffix.lower() == ".csv":
        return spectra_from_csv(p.read_text())
    return read_results(p).spectra


# --- KPI export ----------------------------------------------------------------

def _nan_to_none(a):
    return [None if math.isnan(v) else float(v) for v in np.asarray(a, float)]


def kpi_to_dict(rep) -> dict:
    """Per-node and per-order KPI arrays plus the per-subsystem maxima."""
    return {
        "format": "hybrid-hpf-kpi", "version": 1,
        "orders": [int(h) for h in rep.orders],
        "maxima": [{"subsystem": sid, "quantity": q, "e_abs": ea,
                    "e_arg": None if math.isnan(eg) else eg}
                   for (sid, q), (ea, eg) in rep.maxima().items()],
        "nodes": [{"node": nd, "quantity": q, "e_abs": _nan_to_none(rep.e_abs[(q, nd)]),
                   "e_arg": _nan_to_none(rep.e_arg[(q, nd)])} for q, nd in rep.e_abs],
    }


def kpi_to_json(rep) -> str:
    return json.dumps(kpi_to_dict(rep), indent=1)
