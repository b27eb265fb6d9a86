"""Study cases: the JSON file format, its schema, and model construction.

Units in the file are SI as named by each field (``kW``, ``kvar``, ``V``,
``ohm_per_km``, ``H_per_km``, ``F_per_km``, ``km``).  Power signs follow the
injection convention: negative ``P_kW`` is consumption.  A positive power
factor is lagging, so ``Q = P tan(acos(pf))`` keeps the sign of ``P``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources as importlib_resources
from pathlib import Path

import jsonschema

from hybrid_hpf.harmonic import HarmonicSet
from hybrid_hpf.ltp import NicHardwareParams
from hybrid_hpf.network import Branch, LineType, NetworkError, Subsystem, classify_nodes
from hybrid_hpf.nic import NicDevice, build_nic_response
from hybrid_hpf.resources import (
    ConstantPowerResponse, CurrentSourceResponse, ImpedanceLoadResponse, TheveninResponse,
    balanced_spectrum,
)
from hybrid_hpf.solver import HybridModel, SolverConfig
from hybrid_hpf.units import Bases

SCHEMA_VERSION = 1


class StudyError(ValueError):
    """Invalid study input; ``path`` is the JSON path of the offending field."""

    def __init__(self, message, path="$"):
        super().__init__(f"{path}: {message}")
        self.path = path


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}

STUDY_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "bases", "subsystems", "resources", "nics"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "bases": {
            "type": "object", "additionalProperties": False,
            "required": ["P_b_W", "V_b_ac_V", "V_b_dc_V", "f0_Hz"],
            "properties": {"P_b_W": _pos, "V_b_ac_V": _pos, "V_b_dc_V": _pos, "f0_Hz": _pos},
        },
        "subsystems": {
            "type": "array", "minItems": 1,
            "items": {
                "type": "object", "additionalProperties": False,
                "required": ["id", "kind", "nodes", "line_types", "branches"],
                "properties": {
                    "id": {"type": "string"},
                    "kind": {"enum": ["AC", "DC"]},
                    "nodes": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                    "line_charging": {"type": "boolean"},
                    "line_types": {"type": "array", "items": {
                        "type": "object", "additionalProperties": False,
                        "required": ["id", "r_ohm_per_km", "l_H_per_km", "c_F_per_km"],
                        "properties": {"id": {"type": "string"}, "r_ohm_per_km": _nonneg,
                                       "l_H_per_km": _nonneg, "c_F_per_km": _nonneg},
                    }},
                    "branches": {"type": "array", "items": {
                        "type": "object", "additionalProperties": False,
                        "required": ["from", "to", "length_km", "line_type"],
                        "properties": {"from": {"type": "string"}, "to": {"type": "string"},
                                       "length_km": _pos, "line_type": {"type": "string"}},
                    }},
                },
            },
        },
        "resources": {
            "type": "array",
            "items": {
                "type": "object", "additionalProperties": False,
                "required": ["node", "type", "parameters"],
                "properties": {
                    "node": {"type": "string"},
                    "type": {"enum": ["thevenin", "Z", "I", "PQ"]},
                    "parameters": {"type": "object"},
                },
                "allOf": [
                    {"if": {"properties": {"type": {"const": "thevenin"}}},
                     "then": {"properties": {"parameters": {
                         "type": "object", "additionalProperties": False,
                         "required": ["z_sc_ohm", "r_over_x", "harmonics"],
                         "properties": {
                             "z_sc_ohm": _pos, "r_over_x": _nonneg,
                             "harmonics": {"type": "array", "minItems": 1, "items": {
                                 "type": "object", "additionalProperties": False,
                                 "required": ["order", "magnitude_pu", "angle_rad"],
                                 "properties": {"order": {"type": "integer", "minimum": 0},
                                                "magnitude_pu": _nonneg, "angle_rad": _num}}},
                         }}}}},
                    {"if": {"properties": {"type": {"enum": ["Z", "I"]}}},
                     "then": {"properties": {"parameters": {
                         "type": "object", "additionalProperties": False, "required": ["P_kW"],
                         "properties": {"P_kW": _num, "Q_kvar": _num}}}}},
                    {"if": {"properties": {"type": {"const": "PQ"}}},
                     "then": {"properties": {"parameters": {
                         "type": "object", "additionalProperties": False, "required": ["devices"],
                         "properties": {
                             "harmonic_admittance_pu": _nonneg,
                             "devices": {"type": "array", "minItems": 1, "items": {
                                 "type": "object", "additionalProperties": False,
                                 "required": ["P_kW"],
                                 "properties": {"P_kW": _num,
                                                "pf": {"type": "number", "exclusiveMinimum": 0,
                                                       "maximum": 1},
                                                "Q_kvar": _num},
                                 "not": {"required": ["pf", "Q_kvar"]}}},
                         }}}}},
                ],
            },
        },
        "nics": {
            "type": "array",
            "items": {
                "type": "object", "additionalProperties": False,
                "required": ["ac_node", "dc_node", "control", "Q_kvar"],
                "properties": {
                    "ac_node": {"type": "string"}, "dc_node": {"type": "string"},
                    "control": {"enum": ["VdcQ", "PQ"]},
                    "P_kW": _num, "Q_kvar": _num, "V_dc_ref_V": _pos,
                    "tier": {"enum": ["averaged", "power-balance"]},
                    "k_v": _nonneg, "k_i": _nonneg,
                    "hardware": {
                        "type": "object", "additionalProperties": False,
                        "properties": {k: _nonneg for k in (
                            "L_conv_H", "L_grid_H", "C_filter_F", "R_conv_ohm", "R_grid_ohm",
                            "R_filter_ohm", "C_dc_F")},
                    },
                },
                "allOf": [
                    {"if": {"properties": {"control": {"const": "PQ"}}},
                     "then": {"required": ["P_kW"]}},
                    {"if": {"properties": {"control": {"const": "VdcQ"}}},
                     "then": {"required": ["V_dc_ref_V"]}},
                ],
            },
        },
        "solver": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "H": {"type": "integer", "minimum": 1},
                "tol": _pos, "max_iter": {"type": "integer", "minimum": 1},
                "outer_max": {"type": "integer", "minimum": 0}, "outer_tol": _pos,
                "damping": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "tier": {"enum": ["averaged", "power-balance"]},
                "linear_solver": {"enum": ["sparse", "dense"]},
            },
        },
    },
}

_HW_KEYS = {"L_conv_H": "L_conv", "L_grid_H": "L_grid", "C_filter_F": "C_filter",
            "R_conv_ohm": "R_conv", "R_grid_ohm": "R_grid", "R_filter_ohm": "R_filter",
            "C_dc_F": "C_dc"}


@dataclass(frozen=True)
class ResourceSpec:
    node: str
    type: str
    parameters: dict

    def __eq__(self, other):
        return (isinstance(other, ResourceSpec) and (self.node, self.type) == (other.node, other.type)
                and json.dumps(self.parameters, sort_keys=True) == json.dumps(other.parameters, sort_keys=True))

    __hash__ = None


@dataclass(frozen=True)
class NicSpec:
    ac_node: str
    dc_node: str
    control: str
    Q_kvar: float
    P_kW: float | None = None
    V_dc_ref_V: float | None = None
    tier: str | None = None
    k_v: float = 0.02
    k_i: float = 0.02
    hardware: NicHardwareParams = field(default_factory=NicHardwareParams)


@dataclass(frozen=True)
class StudyCase:
    bases: Bases
    subsystems: tuple[Subsystem, ...]
    resources: tuple[ResourceSpec, ...]
    nics: tuple[NicSpec, ...]
    solver: SolverConfig = field(default_factory=SolverConfig)
    name: str = ""

    @property
    def partition(self):
        return classify_nodes(self)

    def subsystem_of(self, node: str) -> Subsystem:
        for s in self.subsystems:
            if node in s.nodes:
                return s
        raise KeyError(node)

    def with_solver(self, **changes) -> "StudyCase":
        return replace(self, solver=replace(self.solver, **changes))

    # --- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        b = self.bases
        out = {"schema_version": SCHEMA_VERSION, "name": self.name,
               "bases": {"P_b_W": b.P_b, "V_b_ac_V": b.V_b_ac, "V_b_dc_V": b.V_b_dc, "f0_Hz": b.f0},
               "subsystems": [], "resources": [], "nics": []}
        for s in self.subsystems:
            out["subsystems"].append({
                "id": s.id, "kind": s.kind, "nodes": list(s.nodes), "line_charging": s.line_charging,
                "line_types": [{"id": lt.id, "r_ohm_per_km": lt.r, "l_H_per_km": lt.l,
                                "c_F_per_km": lt.c} for lt in s.line_types],
                "branches": [{"from": br.from_node, "to": br.to_node, "length_km": br.length_km,
                              "line_type": br.line_type} for br in s.branches],
            })
        for r in self.resources:
            out["resources"].append({"node": r.node, "type": r.type,
                                     "parameters": json.loads(json.dumps(r.parameters))})
        default_hw = NicHardwareParams()
        for n in self.nics:
            d = {"ac_node": n.ac_node, "dc_node": n.dc_node, "control": n.control, "Q_kvar": n.Q_kvar}
            if n.P_kW is not None:
                d["P_kW"] = n.P_kW
            if n.V_dc_ref_V is not None:
                d["V_dc_ref_V"] = n.V_dc_ref_V
            if n.tier is not None:
                d["tier"] = n.tier
            d["k_v"], d["k_i"] = n.k_v, n.k_i
            if n.hardware != default_hw:
                d["hardware"] = {k: getattr(n.hardware, a) for k, a in _HW_KEYS.items()}
            out["nics"].append(d)
        c = self.solver
        out["solver"] = {"H": c.H, "tol": c.tol_residual, "max_iter": c.max_iter,
                         "outer_max": c.outer_max, "outer_tol": c.outer_tol, "damping": c.damping,
                         "tier": c.tier, "linear_solver": c.linear_solver}
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def save(self, path):
        Path(path).write_text(self.dumps() + "\n")


def _json_path(err: jsonschema.ValidationError) -> str:
    p = "$"
    for part in err.absolute_path:
        p += f"[{part}]" if isinstance(part, int) else f".{part}"
    return p


def validate_study_dict(doc: dict):
    validator = jsonschema.Draft202012Validator(STUDY_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (len(list(e.absolute_path)), e.message))
    if errors:
        e = max(errors, key=lambda e: len(list(e.absolute_path)))
        raise StudyError(e.message, _json_path(e))


def study_from_dict(doc: dict) -> StudyCase:
    validate_study_dict(doc)
    b = doc["bases"]
    bases = Bases(P_b=b["P_b_W"], V_b_ac=b["V_b_ac_V"], V_b_dc=b["V_b_dc_V"], f0=b["f0_Hz"])
    subs = []
    for k, s in enumerate(doc["subsystems"]):
        try:
            subs.append(Subsystem(
                id=s["id"], kind=s["kind"], nodes=tuple(s["nodes"]),
                line_charging=s.get("line_charging", True),
                line_types=tuple(LineType(t["id"], t["r_ohm_per_km"], t["l_H_per_km"], t["c_F_per_km"])
                                 for t in s["line_types"]),
                branches=tuple(Branch(br["from"], br["to"], br["length_km"], br["line_type"])
                               for br in s["branches"])))
        except NetworkError as exc:
            raise StudyError(str(exc), f"$.subsystems[{k}]") from exc
    res = tuple(ResourceSpec(r["node"], r["type"], r["parameters"]) for r in doc["resources"])
    nics = []
    for n in doc["nics"]:
        hw = n.get("hardware")
        hardware = NicHardwareParams(**{_HW_KEYS[k]: v for k, v in hw.items()}) if hw else NicHardwareParams()
        nics.append(NicSpec(ac_node=n["ac_node"], dc_node=n["dc_node"], control=n["control"],
                            Q_kvar=n["Q_kvar"], P_kW=n.get("P_kW"), V_dc_ref_V=n.get("V_dc_ref_V"),
                            tier=n.get("tier"), k_v=n.get("k_v", 0.02), k_i=n.get("k_i", 0.02),
                            hardware=hardware))
    c = doc.get("solver", {})
    solver = SolverConfig(
        tol_residual=c.get("tol", 1e-8), max_iter=c.get("max_iter", 20),
        outer_max=c.get("outer_max", 5), outer_tol=c.get("outer_tol", 1e-9),
        damping=c.get("damping", 1.0), H=c.get("H", 25), tier=c.get("tier", "power-balance"),
        linear_solver=c.get("linear_solver", "sparse"))
    study = StudyCase(bases, tuple(subs), res, tuple(nics), solver, doc.get("name", ""))
    check_references(study)
    return study


def check_references(study: StudyCase):
    """Dangling node references and NIC orientation, named by JSON path."""
    kinds = {nd: s.kind for s in study.subsystems for nd in s.nodes}
    for k, r in enumerate(study.resources):
        if r.node not in kinds:
            raise StudyError(f"unknown node {r.node!r}", f"$.resources[{k}].node")
        if r.type in ("thevenin", "PQ") and kinds[r.node] != "AC":
            raise StudyError(f"{r.type} resources need an AC node", f"$.resources[{k}].type")
    for k, n in enumerate(study.nics):
        for key in ("ac_node", "dc_node"):
            nd = getattr(n, key)
            if nd not in kinds:
                raise StudyError(f"unknown node {nd!r}", f"$.nics[{k}].{key}")
        if kinds[n.ac_node] != "AC" or kinds[n.dc_node] != "DC":
            raise StudyError(f"NIC {n.ac_node}/{n.dc_node} must connect an AC node to a DC node "
                             f"(got {kinds[n.ac_node]}/{kinds[n.dc_node]})", f"$.nics[{k}]")
    try:
        classify_nodes(study)
    except NetworkError as exc:
        raise StudyError(str(exc)) from exc


def load_study(path) -> StudyCase:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise StudyError(f"not valid JSON ({exc.msg}, line {exc.lineno})") from exc
    return study_from_dict(doc)


def loads_study(text: str) -> StudyCase:
    return study_from_dict(json.loads(text))


# --- model construction ------------------------------------------------------

def aggregate_power(devices) -> complex:
    """Sum of co-located P/Q devices in kVA (injection convention)."""
    S = 0j
    for d in devices:
        P = d["P_kW"]
        if "Q_kvar" in d:
            Q = d["Q_kvar"]
        else:
            pf = d.get("pf", 1.0)
            Q = P * math.tan(math.acos(pf))
        S += complex(P, Q)
    return S


def _resource_response(spec: ResourceSpec, sub: Subsystem, hset: HarmonicSet, bases: Bases):
    p, ph = spec.parameters, sub.phases
    if spec.type == "thevenin":
        lines = {h["order"]: (h["magnitude_pu"], h["angle_rad"]) for h in p["harmonics"]}
        return TheveninResponse.from_short_circuit(hset, ph, lines, p["z_sc_ohm"], p["r_over_x"],
                                                   bases.z(sub.kind))
    if spec.type == "Z":
        S = complex(p["P_kW"], p.get("Q_kvar", 0.0)) * 1e3 / bases.P_b
        if S == 0:
            raise StudyError(f"impedance load at {spec.node} has zero power")
        return ImpedanceLoadResponse(hset, ph, -S.real, -S.imag)
    if spec.type == "I":
        P = p["P_kW"] * 1e3 / bases.P_b
        if sub.kind == "DC":
            return CurrentSourceResponse(hset, ph, balanced_spectrum(hset, 1, {0: (P, 0.0)}))
        return CurrentSourceResponse(hset, ph, balanced_spectrum(hset, ph, {1: (P, 0.0)}))
    S = aggregate_power(p["devices"]) * 1e3 / bases.P_b
    return ConstantPowerResponse(hset, ph, S, p.get("harmonic_admittance_pu", 0.0))


def nic_device(spec: NicSpec, bases: Bases) -> NicDevice:
    P = None if spec.P_kW is None else spec.P_kW * 1e3 / bases.P_b
    Vref = None if spec.V_dc_ref_V is None else spec.V_dc_ref_V / bases.V_b_dc
    return NicDevice(ac_node=spec.ac_node, dc_node=spec.dc_node, control=spec.control,
                     Q=spec.Q_kvar * 1e3 / bases.P_b, P=P, V_dc_ref=Vref, hardware=spec.hardware,
                     tier=spec.tier, k_v=spec.k_v, k_i=spec.k_i)


def harmonic_set(study: StudyCase, H: int | None = None) -> HarmonicSet:
    return HarmonicSet.full(study.solver.H if H is None else H, study.bases.f0)


def build_model(study: StudyCase, config: SolverConfig | None = None, nic_kwargs=None,
                nic_factory=None) -> HybridModel:
    """Assemble the :class:`HybridModel` of ``study``.

    ``nic_factory(spec, device, hset, hw_pu)``, when given, replaces the
    tier-based NIC construction (``nic_kwargs`` is then ignored).
    """
    config = config or study.solver
    hset = HarmonicSet.full(config.H, study.bases.f0)
    b = study.bases
    part = classify_nodes(study)
    responses = {}
    for r in study.resources:
        responses[r.node] = _resource_response(r, study.subsystem_of(r.node), hset, b)
    nics = []
    for spec in study.nics:
        dev = nic_device(spec, b)
        hw = dev.hardware.scaled(b.z_ac, b.z_dc)
        if nic_factory is not None:
            nics.append(nic_factory(spec, dev, hset, hw))
        else:
            nics.append(build_nic_response(dev, hset, hw, tier=config.tier, **(nic_kwargs or {})))
    return HybridModel(study.subsystems, part, hset, {"AC": b.z_ac, "DC": b.z_dc}, responses, nics)


# --- shipped benchmark -----------------------------------------------------

def benchmark_path() -> Path:
    return Path(str(importlib_resources.files("hybrid_hpf") / "data" / "cigre_hybrid.json"))


def build_cigre_benchmark() -> StudyCase:
    """The hybrid AC/DC microgrid benchmark shipped as ``data/cigre_hybrid.json``."""
    return load_study(benchmark_path())


def without_harmonic_sources(study: StudyCase) -> StudyCase:
    """Copy with every Thevenin source reduced to its fundamental."""
    res = []
    for r in study.resources:
        if r.type == "thevenin":
            p = dict(r.parameters)
            p["harmonics"] = [h for h in p["harmonics"] if h["order"] == 1]
            r = ResourceSpec(r.node, r.type, p)
        res.append(r)
    return replace(study, resources=tuple(res))


def reduced_benchmark(H: int = 25) -> StudyCase:
    """Substation, one V_DC-controlled NIC, one DC current source and one DC impedance load."""
    full = build_cigre_benchmark()
    ac_full = next(s for s in full.subsystems if s.kind == "AC")
    dc_full = next(s for s in full.subsystems if s.kind == "DC")
    t5, dct1 = ac_full.line_type("AC-T5"), dc_full.line_type("DC-T1")
    ac = Subsystem("AC", "AC", ("N01", "N02", "N15"),
                   (Branch("N01", "N02", 0.07, "AC-T5"), Branch("N02", "N15", 0.03, "AC-T5")), (t5,))
    dc = Subsystem("DC", "DC", ("N19", "N23", "N24"),
                   (Branch("N19", "N23", 0.25, "DC-T1"), Branch("N23", "N24", 0.5, "DC-T1")), (dct1,))
    res = tuple(r for r in full.resources if r.node in ("N01", "N23", "N24"))
    nics = tuple(n for n in full.nics if n.ac_node == "N15")
    return StudyCase(full.bases, (ac, dc), res, nics,
                     replace(full.solver, H=H, tier="averaged"), "reduced hybrid benchmark")
