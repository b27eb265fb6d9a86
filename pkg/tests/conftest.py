import numpy as np
import pytest

from hybrid_hpf.study import build_cigre_benchmark, study_from_dict

BASES = {"P_b_W": 50000.0, "V_b_ac_V": 230.0, "V_b_dc_V": 900.0, "f0_Hz": 50.0}


def fd_jacobian(fun, x, step=1e-6):
    """Central differences, one column per real unknown."""
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = step
        cols.append((fun(x + e) - fun(x - e)) / (2 * step))
    return np.array(cols).T


def _chain(rng, nodes, line_type, lo, hi):
    return [{"from": a, "to": b, "length_km": float(rng.uniform(lo, hi)), "line_type": line_type}
            for a, b in zip(nodes[:-1], nodes[1:])]


def random_study_dict(seed, H=3, tier=None, n_ac=None, n_dc=None, control=None):
    """Small hybrid study: Thevenin-fed AC chain, DC chain, one NIC, mixed loads (<= 6 nodes)."""
    rng = np.random.default_rng(seed)
    n_ac = n_ac or int(rng.integers(2, 4))
    n_dc = n_dc or int(rng.integers(2, 4))
    ac = [f"A{k}" for k in range(1, n_ac + 1)]
    dc = [f"D{k}" for k in range(1, n_dc + 1)]
    lt_ac = {"id": "ac", "r_ohm_per_km": float(rng.uniform(0.2, 3.3)),
             "l_H_per_km": float(rng.uniform(2e-4, 5e-4)), "c_F_per_km": float(rng.uniform(0, 3e-7))}
    lt_dc = {"id": "dc", "r_ohm_per_km": float(rng.uniform(0.05, 0.5)),
             "l_H_per_km": float(rng.uniform(1e-4, 4e-4)), "c_F_per_km": float(rng.uniform(0, 3e-7))}
    harmonics = [{"order": 1, "magnitude_pu": 1.0, "angle_rad": 0.0}]
    for h in range(2, H + 1):
        if rng.random() < 0.6:
            harmonics.append({"order": h, "magnitude_pu": float(rng.uniform(0.005, 0.05)),
                              "angle_rad": float(rng.uniform(-np.pi, np.pi))})
    resources = [{"node": ac[0], "type": "thevenin",
                  "parameters": {"z_sc_ohm": float(rng.uniform(0.01, 0.05)), "r_over_x": 0.125,
                                 "harmonics": harmonics}}]
    for nd in ac[1:-1]:
        kind = rng.choice(["Z", "I", "PQ"])
        P = float(rng.uniform(-20, -2))
        if kind == "PQ":
            resources.append({"node": nd, "type": "PQ", "parameters": {
                "devices": [{"P_kW": P, "pf": float(rng.uniform(0.9, 1.0))}],
                "harmonic_admittance_pu": float(rng.uniform(0, 0.2))}})
        elif kind == "Z":
            resources.append({"node": nd, "type": "Z",
                              "parameters": {"P_kW": P, "Q_kvar": float(rng.uniform(-3, 0))}})
        else:
            resources.append({"node": nd, "type": "I", "parameters": {"P_kW": P}})
    control = control or str(rng.choice(["VdcQ", "PQ"]))
    for nd in dc[1:]:
        # a PQ NIC does not regulate V_DC: give the DC side passive loads only
        if control == "PQ" or rng.random() < 0.5:
            resources.append({"node": nd, "type": "Z", "parameters": {"P_kW": float(rng.uniform(-10, -2))}})
        else:
            resources.append({"node": nd, "type": "I", "parameters": {"P_kW": float(rng.uniform(-5, 5))}})
    nic = {"ac_node": ac[-1], "dc_node": dc[0], "control": control,
           "Q_kvar": float(rng.uniform(-10, 10))}
    if control == "VdcQ":
        nic["V_dc_ref_V"] = 900.0
    else:
        nic["P_kW"] = float(rng.uniform(-10, -2))
    return {
        "schema_version": 1, "name": f"random-{seed}", "bases": dict(BASES),
        "subsystems": [
            {"id": "AC", "kind": "AC", "nodes": ac, "line_charging": True, "line_types": [lt_ac],
             "branches": _chain(rng, ac, "ac", 0.02, 0.2)},
            {"id": "DC", "kind": "DC", "nodes": dc, "line_charging": True, "line_types": [lt_dc],
             "branches": _chain(rng, dc, "dc", 0.1, 1.0)},
        ],
        "resources": resources, "nics": [nic],
        "solver": {"H": H, "tier": tier or str(rng.choice(["power-balance", "averaged"]))},
    }


def random_study(seed, **kw):
    return study_from_dict(random_study_dict(seed, **kw))


@pytest.fixture(scope="session")
def benchmark():
    return build_cigre_benchmark()
