import math
from dataclasses import replace

import numpy as np
import pytest

from hybrid_hpf.harmonic import HarmonicSet, is_conjugate_symmetric
from hybrid_hpf.oracle import (
    Check, check_decoupling, check_fixed_point, check_fundamental, check_kpi_identity,
    fixed_point_hpf, fundamental_powerflow_oracle, kpi, split_subsystem_solve,
    decoupled_hybrid_model, wrap_angle,
)
from hybrid_hpf.results import Spectra, result_set
from hybrid_hpf.solver import run
from hybrid_hpf.study import build_model, study_from_dict
from hybrid_hpf.timedomain import CosimUnsupportedError, timedomain_cosim
from hybrid_hpf.units import Bases

from conftest import BASES, random_study

HS = HarmonicSet.full(3)


def feeder(resources, H=3, c=2e-7, nodes=("A1", "A2", "A3")):
    lt = {"id": "t", "r_ohm_per_km": 0.3, "l_H_per_km": 3e-4, "c_F_per_km": c}
    return study_from_dict({
        "schema_version": 1, "name": "feeder", "bases": dict(BASES),
        "subsystems": [{"id": "AC", "kind": "AC", "nodes": list(nodes), "line_charging": c > 0,
                        "line_types": [lt],
                        "branches": [{"from": a, "to": b, "length_km": 0.1, "line_type": "t"}
                                     for a, b in zip(nodes[:-1], nodes[1:])]}],
        "resources": resources, "nics": [], "solver": {"H": H},
    })


def thevenin(lines=((1, 1.0, 0.0),)):
    return {"node": "A1", "type": "thevenin", "parameters": {
        "z_sc_ohm": 0.0163, "r_over_x": 0.125,
        "harmonics": [{"order": h, "magnitude_pu": m, "angle_rad": a} for h, m, a in lines]}}


def hpf_spectra(study, **cfg):
    config = replace(study.solver, **cfg)
    model = build_model(study, config)
    rep = run(model, config)
    assert rep.converged, rep.diagnostics
    return result_set(study, model, rep).spectra


def toy_spectra(seed=0):
    rng = np.random.default_rng(seed)

    def spec(ph):
        X = rng.normal(size=(ph, HS.n)) + 1j * rng.normal(size=(ph, HS.n))
        return 0.5 * (X + np.conj(X[:, HS.mirror()]))

    sub = {"a": ("AC", "AC"), "d": ("DC", "DC")}
    return Spectra(HS, sub, {"a": spec(3), "d": spec(1)}, {"a": spec(3), "d": spec(1)})


# --- KPIs ------------------------------------------------------------------------

def test_kpi_identity_is_zero():
    s = toy_spectra()
    rep = kpi(s, s)
    assert rep.is_zero()
    assert all(v == (0.0, 0.0) for v in rep.maxima().values())


def test_kpi_magnitude_perturbation():
    ref = toy_spectra()
    V = {k: v.copy() for k, v in ref.V.items()}
    k = HS.index(2)
    V["a"][1, k] *= 1 + 0.5e-4 / abs(V["a"][1, k])      # single-sided magnitude +1e-4
    V["a"][1, HS.index(-2)] = np.conj(V["a"][1, k])
    rep = kpi(ref, Spectra(HS, ref.subsystem, V, ref.I))
    assert rep.e_abs[("V", "a")][2] == pytest.approx(1e-4, rel=1e-9)
    assert np.delete(rep.e_abs[("V", "a")], 2).max() == 0.0
    assert rep.e_arg[("V", "a")][2] < 1e-12


def test_kpi_angle_wraps_to_principal_branch():
    ref, test = toy_spectra(), toy_spectra()
    for s, ang in ((ref, 3.1), (test, -3.1)):
        s.V["d"][0, HS.index(1)] = 0.5 * np.exp(1j * ang)
        s.V["d"][0, HS.index(-1)] = 0.5 * np.exp(-1j * ang)
    rep = kpi(ref, test, nodes=["d"])
    assert rep.e_arg[("V", "d")][1] == pytest.approx(2 * np.pi - 6.2, abs=1e-12)
    assert wrap_angle(6.2) == pytest.approx(6.2 - 2 * np.pi)


def test_kpi_angle_undefined_below_floor():
    ref = toy_spectra()
    for s in (ref.V, ref.I):
        for nd in s:
            s[nd][:, HS.index(3)] = s[nd][:, HS.index(-3)] = 1e-12
    rep = kpi(ref, ref, floor=1e-9)
    assert np.isnan(rep.e_arg[("V", "a")][3]) and rep.e_abs[("V", "a")][3] == 0.0


def test_kpi_rejects_mismatched_inputs():
    a = toy_spectra()
    b = Spectra(HarmonicSet.full(2), a.subsystem, a.V, a.I)
    with pytest.raises(ValueError, match="harmonic sets"):
        kpi(a, b)
    c = Spectra(HS, {"a": a.subsystem["a"]}, a.V, a.I)
    with pytest.raises(ValueError, match="node sets"):
        kpi(a, c)


# --- fundamental power flow -----------------------------------------------------

def test_fundamental_oracle_two_node_divider():
    b = Bases()
    st = feeder([thevenin(), {"node": "A2", "type": "Z", "parameters": {"P_kW": -20.0}}], c=0.0,
                nodes=("A1", "A2"))
    sol = fundamental_powerflow_oracle(st)
    X = 0.0163 / math.sqrt(1 + 0.125 ** 2) / b.z_ac
    Z = complex(0.125 * X, X) + complex(0.3, 2 * np.pi * 50 * 3e-4) * 0.1 / b.z_ac
    R = b.P_b / 20e3
    assert sol.converged
    assert abs(sol.V["A2"] - R / (R + Z)) < 1e-12


def test_fundamental_oracle_power_balance(benchmark):
    from hybrid_hpf.study import without_harmonic_sources
    st = without_harmonic_sources(benchmark)
    sol = fundamental_powerflow_oracle(st)
    assert sol.converged
    ac = next(s for s in st.subsystems if s.kind == "AC")
    dc = next(s for s in st.subsystems if s.kind == "DC")
    b = st.bases
    # per-unit power of an AC single-sided phasor is V conj(I); network losses from branch flows
    for sub, w, zb in ((ac, 2 * np.pi * b.f0, b.z_ac), (dc, 0.0, b.z_dc)):
        inj = sum(sol.V[nd] * np.conj(sol.I[nd]) for nd in sub.nodes)
        flow = 0j
        for br in sub.branches:
            t = sub.line_type(br.line_type)
            y = zb / ((t.r + 1j * w * t.l) * br.length_km)
            dv = sol.V[br.from_node] - sol.V[br.to_node]
            flow += dv * np.conj(y * dv)
            if sub.line_charging:
                ysh = 1j * w * t.c * br.length_km / 2 * zb
                flow += sum(abs(sol.V[nd]) ** 2 * np.conj(ysh) for nd in (br.from_node, br.to_node))
        assert abs(inj - flow) < 1e-10


def test_check_fundamental_on_benchmark(benchmark):
    c = check_fundamental(benchmark)
    assert c.passed and c.value < 1e-8


# --- fixed-point solver -----------------------------------------------------------

def test_fixed_point_matches_newton_on_linear_study():
    st = feeder([thevenin(((1, 1.0, 0.0), (5, 0.06, 0.3))),
                 {"node": "A2", "type": "Z", "parameters": {"P_kW": -20.0, "Q_kvar": -4.0}},
                 {"node": "A3", "type": "I", "parameters": {"P_kW": -5.0}}], H=5)
    ref = hpf_spectra(st)
    fp = fixed_point_hpf(build_model(st))
    assert fp.converged
    for nd in ref.subsystem:
        assert np.abs(fp.spectra.V[nd] - ref.V[nd]).max() < 1e-10


def test_fixed_point_matches_newton_with_constant_power():
    st = feeder([thevenin(((1, 1.0, 0.0), (5, 0.06, 0.3))),
                 {"node": "A3", "type": "PQ", "parameters": {
                     "devices": [{"P_kW": -100.0, "pf": 0.9}], "harmonic_admittance_pu": 0.1}}], H=5)
    ref = hpf_spectra(st, tol_residual=1e-12, outer_tol=1e-12, outer_max=20)
    fp = fixed_point_hpf(build_model(st), tol=1e-12)
    assert fp.converged
    assert max(np.abs(fp.spectra.V[nd] - ref.V[nd]).max() for nd in ref.subsystem) < 1e-10


def test_fixed_point_divergence_guard():
    # a 1 MW constant-power load collapses this feeder
    st = feeder([thevenin(), {"node": "A3", "type": "PQ",
                              "parameters": {"devices": [{"P_kW": -1000.0, "pf": 0.9}]}}])
    fp = fixed_point_hpf(build_model(st))
    assert not fp.converged and fp.spectra is None
    assert "diverged" in fp.diagnostics


def test_fixed_point_iteration_budget_reported():
    st = feeder([thevenin(), {"node": "A3", "type": "PQ",
                              "parameters": {"devices": [{"P_kW": -500.0, "pf": 0.9}]}}])
    fp = fixed_point_hpf(build_model(st), max_iter=5)
    assert not fp.converged and "no convergence in 5 iterations" in fp.diagnostics
    assert len(fp.residual_history) == 5


def test_check_fixed_point_on_benchmark(benchmark):
    c = check_fixed_point(benchmark, H=3)
    assert c.passed, c.detail


# --- decoupling -------------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 3, 5])
def test_decoupled_hybrid_equals_split_solves(seed):
    st = random_study(seed, H=3)
    c = check_decoupling(st, H=3, p_decoupled={st.nics[0].ac_node: -0.05})
    assert c.passed and c.value < 1e-10


def test_decoupling_on_benchmark(benchmark):
    cfg = replace(benchmark.solver, H=3, tol_residual=1e-12)
    rep = run(decoupled_hybrid_model(benchmark, cfg), cfg)
    split, reps = split_subsystem_solve(benchmark, cfg)
    assert rep.converged and all(r.converged for r in reps)
    assert max(np.abs(rep.voltages[nd] - split.V[nd]).max() for nd in split.subsystem) < 1e-10


def test_kpi_identity_check(benchmark):
    assert check_kpi_identity(benchmark, H=2).passed


def test_check_casts_to_builtin_types():
    c = Check("x", np.bool_(True), np.float64(1.5), 2.0)
    assert type(c.passed) is bool and type(c.value) is float


# --- time-domain cosimulation ------------------------------------------------------

def static_circuit():
    return feeder([thevenin(((1, 1.0, 0.0), (5, 0.06, 0.4), (7, 0.05, 0.2))),
                   {"node": "A3", "type": "Z", "parameters": {"P_kW": -20.0, "Q_kvar": -3.0}}], H=7)


def test_cosim_static_circuit_matches_algebraic_solution():
    st = static_circuit()
    ref = hpf_spectra(st)
    sim = timedomain_cosim(st).spectra
    for nd in ref.subsystem:
        assert np.abs(sim.V[nd] - ref.V[nd]).max() < 1e-7
        assert np.abs(sim.I[nd] - ref.I[nd]).max() < 1e-7


def test_cosim_spectra_are_real_signals():
    sim = timedomain_cosim(static_circuit()).spectra
    for nd in sim.subsystem:
        assert is_conjugate_symmetric(sim.V[nd], sim.harmonic_set, atol=1e-12)


def test_cosim_requires_line_charging():
    st = feeder([thevenin(), {"node": "A3", "type": "Z", "parameters": {"P_kW": -20.0}}], c=0.0)
    with pytest.raises(CosimUnsupportedError, match="charging"):
        timedomain_cosim(st)


def test_cosim_rejects_coarse_sampling():
    with pytest.raises(ValueError, match="samples per period"):
        timedomain_cosim(static_circuit(), steps_per_period=200, stride=20)
