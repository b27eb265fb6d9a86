import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybrid_hpf.harmonic import HarmonicSet, symmetrize
from hybrid_hpf.ltp import (
    AlgebraicLoopError, Feedback, HarmonicTransferFunction, LtpStateSpace, NicHardwareParams,
    ResonanceError, build_dclink_state_space, build_lcl_state_space, htf_from_ltp, interconnect,
    lcl_matrices,
)
from hybrid_hpf.timedomain import simulate_ltp


def random_ltp(seed, n=3, m=2, p=2, hset=None, coupling=30.0):
    rng = np.random.default_rng(seed)
    hset = hset or HarmonicSet.full(5)
    A0 = -np.diag(rng.uniform(200, 600, n)) + 20 * rng.normal(size=(n, n))
    A1 = coupling * (rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n)))
    B0 = 100 * rng.normal(size=(n, m))
    B1 = 20 * (rng.normal(size=(n, m)) + 1j * rng.normal(size=(n, m)))
    C0 = rng.normal(size=(p, n))
    D0 = 0.1 * rng.normal(size=(p, m))
    return LtpStateSpace(hset, {0: A0, 1: A1, -1: A1.conj()}, {0: B0, 1: B1, -1: B1.conj()},
                         {0: C0}, {0: D0})


def sine_input(hset, m, orders, seed):
    rng = np.random.default_rng(seed)
    U = np.zeros((m, hset.n), complex)
    for h in orders:
        U[:, hset.index(h)] = rng.normal(size=m) + 1j * rng.normal(size=m)
    return symmetrize(U, hset)


def test_first_order_lag():
    hs = HarmonicSet.full(4)
    a = 300.0
    G = htf_from_ltp(LtpStateSpace(hs, {0: [[-a]]}, {0: [[a]]}, {0: [[1.0]]}))
    for h in hs.orders:
        assert G.block(h, h)[0, 0] == pytest.approx(a / (1j * h * hs.omega0 + a), rel=1e-14)
    assert G.is_block_diagonal()


def test_lti_exactly_block_diagonal():
    hs = HarmonicSet.full(6)
    sys = random_ltp(2, hset=hs, coupling=0.0)
    sys = LtpStateSpace(hs, {0: sys.A[0]}, {0: sys.B[0]}, sys.C, sys.D)
    assert sys.is_lti()
    assert htf_from_ltp(sys).is_block_diagonal()


def test_first_harmonic_coupling_pattern():
    hs = HarmonicSet.full(3)
    A = {0: [[-100.0]], 1: [[10.0]], -1: [[10.0]]}
    G = htf_from_ltp(LtpStateSpace(hs, A, {0: [[1.0]]}, {0: [[1.0]]}))
    T = G.matrix
    # |h - h'| = 1 entries nonzero; the ±1 pattern propagates through the
    # inverse, so we look at the lifted A itself for the exact structure.
    At = LtpStateSpace(hs, A, {0: [[1.0]]}, {0: [[1.0]]}).lifted()[0]
    n = hs.n
    for a in range(n):
        for b in range(n):
            assert (At[a, b] != 0) == (abs(a - b) <= 1)
    assert abs(T[hs.index(1), hs.index(0)]) > 0


def test_resonance_names_order():
    hs = HarmonicSet.full(3)
    with pytest.raises(ResonanceError, match="order 0") as err:
        htf_from_ltp(build_dclink_state_space(1e-3, hs))
    assert err.value.order == 0
    w = HarmonicSet.full(3).omega0
    osc = LtpStateSpace(hs, {0: [[0.0, -2 * w], [2 * w, 0.0]]}, {0: np.eye(2)}, {0: np.eye(2)})
    with pytest.raises(ResonanceError) as err:
        htf_from_ltp(osc)
    assert abs(err.value.order) == 2


def test_dimension_consistency():
    hs = HarmonicSet.full(1)
    with pytest.raises(ValueError):
        LtpStateSpace(hs, {0: np.eye(2), 1: np.eye(3)}, {0: np.ones((2, 1))}, {0: np.ones((1, 2))})
    with pytest.raises(ValueError):
        LtpStateSpace(hs, {0: np.eye(2)}, {0: np.ones((3, 1))}, {0: np.ones((1, 2))})


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_htf_matches_time_integration(seed):
    # H=5 leaves ~1e-6 truncation error for this coupling strength; H=8 ~1e-11
    hs = HarmonicSet.full(8)
    sys = random_ltp(seed, hset=hs)
    U = sine_input(hs, sys.in_dim, [0, 1, 2], seed)
    Y = htf_from_ltp(sys).apply(U)
    Yt = simulate_ltp(sys, U)
    err = np.abs(Y - Yt).max() / np.abs(Y).max()
    assert err < 1e-6


def test_truncation_lti_interior_blocks_unchanged():
    sys_small = random_ltp(4, hset=HarmonicSet.full(3), coupling=0.0)
    sys_big = LtpStateSpace(HarmonicSet.full(6), sys_small.A, sys_small.B, sys_small.C, sys_small.D)
    Gs, Gb = htf_from_ltp(sys_small), htf_from_ltp(sys_big)
    for h in range(-3, 4):
        np.testing.assert_array_equal(Gs.block(h, h), Gb.block(h, h))


def test_lcl_dc_gain_is_resistive_divider():
    p = NicHardwareParams()
    A, B, C = lcl_matrices(p, phases=1)
    x = np.linalg.solve(-A, B @ np.array([1.0, 0.3]))
    i_grid = (C @ x)[0]
    assert i_grid == pytest.approx(0.7 / (p.R_conv + p.R_grid), rel=1e-12)


def test_lcl_is_stable():
    A, _, _ = lcl_matrices(NicHardwareParams(R_conv=0.01, R_grid=0.02, R_filter=0.0))
    assert np.linalg.eigvals(A).real.max() < 0


def test_lcl_fundamental_matches_ladder():
    p = NicHardwareParams()
    hs = HarmonicSet.full(2)
    G = htf_from_ltp(build_lcl_state_space(p, hs, phases=1))
    w = hs.omega0
    Z1 = p.R_conv + 1j * w * p.L_conv
    Z2 = p.R_grid + 1j * w * p.L_grid
    Zc = p.R_filter + 1 / (1j * w * p.C_filter)
    # converter-side drive, grid shorted
    i1 = 1 / (Z1 + Zc * Z2 / (Zc + Z2))
    i2 = i1 * Zc / (Zc + Z2)
    # grid-side drive, converter shorted; i2 is injected (flows out of the filter)
    j2 = -1 / (Z2 + Zc * Z1 / (Zc + Z1))
    j1 = j2 * Zc / (Zc + Z1)
    blk = G.block(1, 1)
    np.testing.assert_allclose(blk, [[i2, j2], [i1, j1]], rtol=1e-9)


def test_params_validation():
    with pytest.raises(ValueError):
        NicHardwareParams(C_dc=0.0)
    with pytest.raises(ValueError):
        NicHardwareParams(R_grid=-1.0)


def test_dclink_ripple():
    hs = HarmonicSet(50.0, (-6, 6))
    C = 2e-3
    sys = build_dclink_state_space(C, hs)
    I6 = 0.4 - 0.3j
    U = np.array([[np.conj(I6), I6]])
    V = htf_from_ltp(sys).apply(U)[0]
    assert abs(V[1]) == pytest.approx(abs(I6) / (6 * hs.omega0 * C), rel=1e-12)
    # pure integrator: the DC offset set by the initial state never decays, so
    # only the h=6 line is compared
    full = HarmonicSet.full(6)
    Uf = np.zeros((1, full.n), complex)
    Uf[0, full.index(6)], Uf[0, full.index(-6)] = I6, np.conj(I6)
    Vt = simulate_ltp(LtpStateSpace(full, sys.A, sys.B, sys.C), Uf, min_periods=2)
    assert abs(Vt[0, full.index(6)]) == pytest.approx(abs(I6) / (6 * hs.omega0 * C), rel=1e-8)


def test_dclink_constant_current_ramps():
    from hybrid_hpf import _kernels
    C = 2e-3
    sys = build_dclink_state_space(C, HarmonicSet.full(0))
    Ac, As = sys.real_series("A", 0)
    x, _ = _kernels.rk4_periodic(Ac, As, np.array([[1.0 / C * 0.5]]), np.zeros((1, 1)), 314.0,
                                 np.zeros(1), 0.0, 1e-4, 100, 1)
    assert x[0] == pytest.approx(0.5 / C * 1e-2, rel=1e-12)
    x, _ = _kernels.rk4_periodic(Ac, As, np.zeros((1, 1)), np.zeros((1, 1)), 314.0,
                                 np.array([0.7]), 0.0, 1e-4, 100, 1)
    assert x[0] == 0.7


def scalar_htf(hs, g):
    return HarmonicTransferFunction(hs, np.eye(hs.n, dtype=complex) * g, 1, 1)


def test_interconnect_zero_controller_and_scalar_feedback():
    hs = HarmonicSet.full(2)
    P = scalar_htf(hs, 3.0)
    assert np.allclose(interconnect(P, scalar_htf(hs, 0.0)).matrix, P.matrix)
    cl = interconnect(P, scalar_htf(hs, 0.5))
    np.testing.assert_allclose(np.diag(cl.matrix), 3.0 / (1 + 0.5 * 3.0))


def test_interconnect_algebraic_loop():
    hs = HarmonicSet.full(1)
    with pytest.raises(AlgebraicLoopError, match="inner"):
        interconnect(scalar_htf(hs, 1.0), scalar_htf(hs, -1.0), Feedback(name="inner"))


@pytest.mark.parametrize("seed", [5, 6])
def test_interconnect_matches_cointegration(seed):
    hs = HarmonicSet.full(8)
    rng = np.random.default_rng(seed)
    P = random_ltp(seed, n=3, m=1, p=1, hset=hs)
    P = LtpStateSpace(hs, P.A, P.B, P.C)  # strictly proper
    Ak = np.array([[-400.0]])
    Bk = np.array([[300.0]])
    Ck = np.array([[rng.uniform(0.5, 1.5)]])
    K = LtpStateSpace(hs, {0: Ak}, {0: Bk}, {0: Ck})
    s = -1.0
    A = {k: np.zeros((4, 4), complex) for k in P.A}
    for k in P.A:
        A[k][:3, :3] = P.A[k]
        A[k][:3, 3:] = s * P.B.get(k, np.zeros((3, 1))) @ Ck
    A[0][3:, :3] = Bk @ P.C[0]
    A[0][3:, 3:] = Ak
    Bcl = {k: np.vstack([v, np.zeros((1, 1))]) for k, v in P.B.items()}
    Ccl = {0: np.hstack([P.C[0], np.zeros((1, 1))])}
    closed = LtpStateSpace(hs, A, Bcl, Ccl)
    U = sine_input(hs, 1, [1], seed)
    Yt = simulate_ltp(closed, U)
    G = interconnect(htf_from_ltp(P), htf_from_ltp(K), Feedback(sign=s))
    Y = G.apply(U)
    assert np.abs(Y - Yt).max() / np.abs(Y).max() < 1e-6


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_real_system_preserves_conjugate_symmetry(seed):
    hs = HarmonicSet.full(3)
    sys = random_ltp(seed, hset=hs)
    assert sys.is_real()
    U = sine_input(hs, sys.in_dim, [0, 1, 3], seed)
    Y = htf_from_ltp(sys).apply(U)
    np.testing.assert_allclose(Y, np.conj(Y[:, ::-1]), atol=1e-12 * max(1.0, np.abs(Y).max()))
