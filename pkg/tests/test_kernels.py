import os
import subprocess
import sys

import numpy as np
import pytest
from scipy.linalg import expm

from hybrid_hpf import _kernels
from hybrid_hpf._kernels import _fallback
from hybrid_hpf.harmonic import HarmonicSet
from hybrid_hpf.study import reduced_benchmark

core = pytest.importorskip("hybrid_hpf._kernels._core", reason="compiled extension not built")


def test_compiled_backend_is_selected():
    assert _kernels.BACKEND == "compiled"


def test_pure_python_switch():
    env = dict(os.environ, HYBRID_HPF_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from hybrid_hpf import _kernels; print(_kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@pytest.mark.parametrize("seed", range(4))
def test_toeplitz_assemble_agrees(seed):
    rng = np.random.default_rng(seed)
    K, r, c = int(rng.integers(1, 6)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    blocks = rng.normal(size=(K, r, c)) + 1j * rng.normal(size=(K, r, c))
    orders = np.arange(-3, 4)
    a = core.toeplitz_assemble(blocks, orders, K // 2)
    b = _fallback.toeplitz_assemble(blocks, orders, K // 2)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("seed", range(3))
def test_rk4_periodic_agrees(seed):
    rng = np.random.default_rng(seed)
    n, K = 4, 3
    Ac = 0.3 * rng.normal(size=(K, n, n))
    Ac[0] -= 2 * np.eye(n)
    As = 0.3 * rng.normal(size=(K, n, n))
    bc, bs = rng.normal(size=(K, n)), rng.normal(size=(K, n))
    x0 = rng.normal(size=n)
    args = (Ac, As, bc, bs, 2 * np.pi, x0, 0.1, 1e-3, 50, 5)
    xa, sa = core.rk4_periodic(*args)
    xb, sb = _fallback.rk4_periodic(*args)
    assert sa.shape == (10, n)
    assert np.allclose(xa, xb, rtol=1e-13, atol=1e-14)
    assert np.allclose(sa, sb, rtol=1e-13, atol=1e-14)


def test_lawson_cosim_agrees_on_reduced_benchmark():
    from hybrid_hpf.timedomain import _Circuit
    st = reduced_benchmark(H=3)
    hs = HarmonicSet.full(3)
    ckt = _Circuit(st, hs)
    ckt.set_references(0, 1.0, 0.0)
    dt = 1 / 50 / 400
    E = expm(ckt.A * dt / 2)
    x0 = ckt.initial_state()
    args = (E, ckt.pc, ckt.ps, hs.omega0, ckt.nic_idx, ckt.nic_par, x0, 0.0, dt, 40, 4)
    xa, sa = core.lawson_cosim(*args)
    xb, sb = _fallback.lawson_cosim(*args)
    scale = np.abs(xb).max()
    assert np.abs(xa - xb).max() < 1e-12 * scale
    assert np.abs(sa - sb).max() < 1e-12 * scale
    assert sa.shape == (10, ckt.ns)


def test_lawson_with_no_converters_is_exact_for_sources():
    # x' = -x + cos(t): the particular solution is propagated without error
    A = np.array([[-1.0]])
    dt = 0.01
    w0 = 1.0
    # x_p = (cos t + sin t) / 2
    pc = np.array([[0.0], [0.5]])
    ps = np.array([[0.0], [0.5]])
    x0 = np.array([0.5])
    args = (expm(A * dt / 2), pc, ps, w0, np.zeros((0, 10), np.int64), np.zeros((0, 10)), x0, 0.0, dt, 100, 1)
    for impl in (core, _fallback):
        x, s = impl.lawson_cosim(*args)
        t = np.arange(100) * dt
        assert np.allclose(s[:, 0], 0.5 * (np.cos(t) + np.sin(t)), atol=1e-14)
        assert x[0] == pytest.approx(0.5 * (np.cos(1.0) + np.sin(1.0)), abs=1e-14)
