import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybrid_hpf.harmonic import (
    HarmonicSet, from_real_stacked, is_conjugate_symmetric, symmetrize, to_real_stacked,
)
from hybrid_hpf.ltp import NicHardwareParams
from hybrid_hpf.nic import (
    AveragedNic, NicDevice, PowerBalanceNic, UnsupportedConfigurationError, build_nic_response,
    decoupled, nic_jacobian,
)
from hybrid_hpf.resources import LinearizationError, balanced_spectrum
from hybrid_hpf.study import build_model, nic_device
from hybrid_hpf.units import Bases

from conftest import fd_jacobian

B = Bases()
HW = NicHardwareParams().scaled(B.z_ac, B.z_dc)
HS = HarmonicSet.full(4)


def vdcq(**kw):
    return NicDevice("A", "D", "VdcQ", Q=kw.pop("Q", 0.1), V_dc_ref=1.0, **kw)


def pq(P=-0.2, Q=0.05, **kw):
    return NicDevice("A", "D", "PQ", Q=Q, P=P, **kw)


def operating_point(rng, hs=HS, i0=None, harmonics=0.02):
    V = balanced_spectrum(hs, 3, {1: (rng.uniform(0.95, 1.05), rng.uniform(-0.5, 0.5))})
    V += harmonics * symmetrize(rng.normal(size=V.shape) + 1j * rng.normal(size=V.shape), hs)
    I = harmonics * symmetrize(rng.normal(size=(1, hs.n)) + 1j * rng.normal(size=(1, hs.n)), hs)
    # |I_0| away from zero: the PQ DC voltage goes as 1/I_0 and central differences lose accuracy
    I[0, hs.index(0)] = rng.choice([-1, 1]) * rng.uniform(0.1, 0.3) if i0 is None else i0
    return V, I


def two_port_fd(nic, V, I):
    """Analytic and finite-difference Jacobians of ``(V_ac, I_dc) -> (I_ac, V_dc)``."""
    n = nic.harmonic_set.n

    def f(r):
        z = from_real_stacked(r)
        Ia, Vd = nic.evaluate(z[:3 * n].reshape(3, n), z[3 * n:].reshape(1, n))
        return np.concatenate([to_real_stacked(Ia), to_real_stacked(Vd)])

    blk = nic_jacobian(nic, V, I)
    J = np.block([[blk["aa"].toarray(), blk["ad"].toarray()],
                  [blk["da"].toarray(), blk["dd"].toarray()]])
    Jfd = fd_jacobian(f, np.concatenate([to_real_stacked(V), to_real_stacked(I)]))
    return J, Jfd


def rel_err(J, Jfd):
    return np.abs(J - Jfd).max() / max(np.abs(Jfd).max(), 1.0)


@pytest.mark.parametrize("seed", range(8))
@pytest.mark.parametrize("make", [vdcq, pq], ids=["VdcQ", "PQ"])
def test_power_balance_tier_jacobian(seed, make):
    rng = np.random.default_rng(seed)
    V, I = operating_point(rng)
    nic = PowerBalanceNic(make(), HS, HW, V_ac=V, I_dc=I)
    # probe away from the linearization point too
    V2, I2 = V * (1 + 0.01 * rng.normal()), I + 0.01 * rng.normal(size=I.shape)
    assert rel_err(*two_port_fd(nic, V2, I2)) < 1e-6


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("make", [vdcq, pq], ids=["VdcQ", "PQ"])
def test_averaged_tier_jacobian(seed, make):
    rng = np.random.default_rng(seed)
    V, I = operating_point(rng, i0=-0.1)
    nic = AveragedNic(make(), HS, HW, V_ac=V, I_dc=I)
    assert rel_err(*two_port_fd(nic, V, I)) < 1e-6


@pytest.mark.parametrize("tier", ["averaged", "power-balance"])
@pytest.mark.parametrize("make", [vdcq, pq], ids=["VdcQ", "PQ"])
def test_cross_blocks_nonzero_by_default(tier, make):
    rng = np.random.default_rng(0)
    V, I = operating_point(rng, i0=-0.1)
    nic = build_nic_response(make(), HS, HW, tier, V_ac=V, I_dc=I)
    blk = nic.jacobian(V, I)
    assert blk["ad"].count_nonzero() + blk["da"].count_nonzero() > 0


@pytest.mark.parametrize("make", [vdcq, pq], ids=["VdcQ", "PQ"])
def test_decoupled_cross_blocks_exactly_zero(make):
    rng = np.random.default_rng(1)
    V, I = operating_point(rng)
    kw = {"p_decoupled": 0.1} if make is vdcq else {}
    nic = PowerBalanceNic(make(), HS, HW, V_ac=V, I_dc=I, coupled=False, **kw)
    blk = nic.jacobian(V, I)
    assert blk["ad"].count_nonzero() == 0 and blk["da"].count_nonzero() == 0
    ac, dc = nic.split_ports()
    Ia, Vd = nic.evaluate(V, I)
    assert np.array_equal(ac.evaluate(V), Ia) and np.array_equal(dc.evaluate(I), Vd)


def test_decoupled_device_helper_zeroes_gains():
    d = decoupled(vdcq())
    assert d.k_v == 0.0 and d.k_i == 0.0 and d.control == "VdcQ"


def test_split_ports_requires_decoupling():
    with pytest.raises(ValueError, match="decoupled"):
        PowerBalanceNic(pq(), HS, HW).split_ports()


def test_decoupled_vdcq_needs_fixed_power():
    with pytest.raises(ValueError, match="p_decoupled"):
        PowerBalanceNic(vdcq(), HS, HW, coupled=False)


def test_idle_pq_converter():
    d = NicDevice("A", "D", "PQ", Q=0.0, P=0.0, k_v=0.0, k_i=0.0)
    V = balanced_spectrum(HS, 3, {1: (1.0, 0.0)})
    I = np.zeros((1, HS.n), complex)
    lossless = NicHardwareParams(R_conv=0, R_grid=0, R_filter=0).scaled(B.z_ac, B.z_dc)
    nic = PowerBalanceNic(d, HS, lossless, V_ac=V, I_dc=I)
    Ia, Vd = nic.evaluate(V, I)
    assert np.abs(Ia).max() == 0.0
    assert Vd[0, HS.index(0)] == nic.operating_point.V_dc[0, HS.index(0)]
    assert np.abs(np.delete(Vd, HS.index(0))).max() == 0.0


def test_vdcq_regulates_dc_voltage():
    rng = np.random.default_rng(4)
    V, I = operating_point(rng)
    nic = PowerBalanceNic(vdcq(), HS, HW, V_ac=V, I_dc=I)
    for i0 in (-0.3, 0.0, 0.2):
        I[0, HS.index(0)] = i0
        assert nic.evaluate(V, I)[1][0, HS.index(0)] == 1.0
    k0 = 2 * HS.index(0)
    assert np.abs(nic.jacobian(V, I)["dd"].toarray()[k0:k0 + 2, k0:k0 + 2]).max() == 0.0


@pytest.mark.parametrize("tier", ["averaged", "power-balance"])
@pytest.mark.parametrize("make", [vdcq, pq], ids=["VdcQ", "PQ"])
def test_low_ac_voltage_rejected(tier, make):
    V = balanced_spectrum(HS, 3, {1: (0.05, 0.0)})
    with pytest.raises(LinearizationError, match="0.1 p.u."):
        build_nic_response(make(), HS, HW, tier, V_ac=V)


def test_forming_ac_port_unsupported():
    with pytest.raises(UnsupportedConfigurationError):
        NicDevice("A", "D", "PQ", Q=0.0, P=0.1, ac_port="forming")


@pytest.mark.parametrize("kw", [{"control": "PQ"}, {"control": "VdcQ"}, {"control": "droop", "P": 0.1}])
def test_invalid_device_rejected(kw):
    with pytest.raises(ValueError):
        NicDevice("A", "D", Q=0.0, **kw)


@given(st.integers(0, 10_000), st.sampled_from(["VdcQ", "PQ"]))
@settings(max_examples=30, deadline=None)
def test_power_balance_identity(seed, control):
    rng = np.random.default_rng(seed)
    V, I = operating_point(rng, harmonics=0.0)
    nic = PowerBalanceNic(vdcq() if control == "VdcQ" else pq(P=rng.uniform(-0.4, 0.4)), HS, HW,
                          V_ac=V, I_dc=I)
    assert abs(nic.power_balance_residual()) < 1e-8
    assert nic.losses() >= 0.0


@pytest.mark.parametrize("make", [vdcq, pq], ids=["VdcQ", "PQ"])
def test_averaged_tier_power_balance(make):
    V, I = operating_point(np.random.default_rng(5), i0=-0.1, harmonics=0.0)
    nic = AveragedNic(make(), HarmonicSet.full(3), HW, V_ac=V[:, 1:-1], I_dc=I[:, 1:-1])
    assert abs(nic.power_balance_residual()) < 1e-8


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_evaluate_preserves_real_signals(seed):
    rng = np.random.default_rng(seed)
    V, I = operating_point(rng)
    nic = PowerBalanceNic(vdcq() if seed % 2 else pq(), HS, HW, V_ac=V, I_dc=I)
    Ia, Vd = nic.evaluate(V, I)
    assert is_conjugate_symmetric(Ia, HS, atol=1e-12)
    assert is_conjugate_symmetric(Vd, HS, atol=1e-12)


def test_benchmark_n15_nic(benchmark):
    spec = next(s for s in benchmark.nics if s.ac_node == "N15")
    dev = nic_device(spec, benchmark.bases)
    assert spec.dc_node == "N19" and dev.control == "VdcQ"
    assert dev.V_dc_ref == pytest.approx(1.0)
    assert dev.Q * B.P_b == pytest.approx(9.9e3)
    model = build_model(benchmark.with_solver(H=2))
    assert len(model.nics) == len(benchmark.nics)
