import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from hybrid_hpf import _kernels
from hybrid_hpf._kernels import _fallback
from hybrid_hpf.harmonic import (
    HarmonicPhasorVector, HarmonicSet, dft_coefficients, from_real_stacked, real_stack_matrix,
    series_from_samples, symmetrize, synthesize, to_real_stacked, toeplitz_from_series,
)


def test_set_validation():
    with pytest.raises(ValueError):
        HarmonicSet(50.0, (0, 1))
    with pytest.raises(ValueError):
        HarmonicSet(50.0, (1, 0, -1))
    hs = HarmonicSet.full(3)
    assert hs.n == 7 and hs.index(-3) == 0 and hs.H == 3


def test_single_sided_magnitude():
    hs = HarmonicSet.full(2)
    v = HarmonicPhasorVector(hs, [0, 0.25j, 0.3, -0.25j, 0])
    np.testing.assert_allclose(v.single_sided(), [[0.3, 0.5, 0.0]])
    assert v.is_real_signal()


def test_dft_recovers_trig_polynomial():
    hs = HarmonicSet.full(5)
    rng = np.random.default_rng(0)
    c = symmetrize(rng.normal(size=(2, hs.n)) + 1j * rng.normal(size=(2, hs.n)), hs)
    N = 200
    t = np.arange(5 * N) / (5 * N) * 5 / hs.f0
    x = synthesize(c, hs, t)
    got = dft_coefficients(x, hs, periods=5).coeffs
    np.testing.assert_allclose(got, c, atol=1e-13)


def test_dft_rejects_partial_window():
    hs = HarmonicSet.full(3)
    with pytest.raises(ValueError, match="integer"):
        dft_coefficients(np.zeros(150), hs, dt=1.0 / hs.f0 / 100)


def test_toeplitz_block_positions():
    hs = HarmonicSet.full(3)
    op = toeplitz_from_series({0: np.eye(2), 1: np.ones((2, 2)), -1: np.ones((2, 2))}, hs)
    M = op.matrix()
    n = hs.n
    for a in range(n):
        for b in range(n):
            blk = M[a::n, b::n]
            expect = abs(a - b) <= 1
            assert bool(np.any(blk)) == expect


def test_toeplitz_inconsistent_dims():
    with pytest.raises(ValueError, match="inconsistent"):
        toeplitz_from_series({0: np.eye(2), 1: np.ones((3, 2))}, HarmonicSet.full(2))


def test_toeplitz_is_time_product():
    # M(t) x(t) computed in time matches the lifted product on orders that
    # cannot alias past the truncation.
    hs = HarmonicSet.full(6)
    rng = np.random.default_rng(1)
    Mk = {k: rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2)) for k in range(1, 3)}
    Mk.update({-k: np.conj(v) for k, v in list(Mk.items())})
    Mk[0] = rng.normal(size=(2, 2))
    X = np.zeros((2, hs.n), complex)
    for h in (-2, -1, 0, 1, 2):
        X[:, hs.index(h)] = rng.normal(size=2) + 1j * rng.normal(size=2)
    X = symmetrize(X, hs)
    Y = toeplitz_from_series(Mk, hs).apply(X)

    N = 64
    t = np.arange(N) / N / hs.f0
    x = synthesize(X, hs, t)
    Mt = np.real(sum(v[None] * np.exp(1j * k * hs.omega0 * t)[:, None, None] for k, v in Mk.items()))
    y = np.einsum("tij,jt->it", Mt, x)
    ser = series_from_samples(y.T, hs, hs.H)
    ref = np.stack([ser[h] for h in hs.orders], axis=1)
    np.testing.assert_allclose(Y, ref, atol=1e-12)


@pytest.mark.parametrize("H", [0, 2, 5])
def test_kernel_backends_agree(H):
    hs = HarmonicSet.full(H)
    rng = np.random.default_rng(H)
    blocks = rng.normal(size=(4 * H + 1, 3, 2)) + 1j * rng.normal(size=(4 * H + 1, 3, 2))
    a = _kernels.toeplitz_assemble(blocks, hs.array, 2 * H)
    b = _fallback.toeplitz_assemble(blocks, hs.array, 2 * H)
    np.testing.assert_array_equal(a, b)


def test_rk4_backends_agree():
    rng = np.random.default_rng(3)
    n = 3
    Ac = rng.normal(size=(3, n, n)) - 3 * np.eye(n)
    As = rng.normal(size=(3, n, n))
    bc = rng.normal(size=(3, n))
    bs = rng.normal(size=(3, n))
    args = (Ac, As, bc, bs, 2 * np.pi * 50, np.ones(n), 0.0, 1e-4, 200, 10)
    xa, sa = _kernels.rk4_periodic(*args)
    xb, sb = _fallback.rk4_periodic(*args)
    np.testing.assert_allclose(xa, xb, rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(sa, sb, rtol=1e-12, atol=1e-13)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.complex_numbers(max_magnitude=1e3, allow_nan=False, allow_infinity=False),
                min_size=1, max_size=6),
       st.complex_numbers(max_magnitude=10, allow_nan=False, allow_infinity=False),
       st.complex_numbers(max_magnitude=10, allow_nan=False, allow_infinity=False))
def test_real_stacking_represents_antilinear_map(z, a, b):
    z = np.asarray(z)
    n = z.size
    A = a * np.eye(n)
    B = b * np.eye(n)
    R = real_stack_matrix(A, B)
    got = from_real_stacked(R @ to_real_stacked(z))
    np.testing.assert_allclose(got, A @ z + B @ np.conj(z), rtol=1e-12, atol=1e-9)
    Rs = real_stack_matrix(sp.csr_matrix(A), sp.csr_matrix(B))
    np.testing.assert_allclose(Rs.toarray(), R)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 6), st.integers(0, 2**31 - 1))
def test_symmetrize_is_projection(H, seed):
    hs = HarmonicSet.full(H)
    rng = np.random.default_rng(seed)
    c = rng.normal(size=(2, hs.n)) + 1j * rng.normal(size=(2, hs.n))
    s = symmetrize(c, hs)
    assert HarmonicPhasorVector(hs, s).is_real_signal()
    np.testing.assert_allclose(symmetrize(s, hs), s)
