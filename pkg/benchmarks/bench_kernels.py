"""Time the compiled kernels against the pure-Python fallback.

Run with ``python3 benchmarks/bench_kernels.py [--repeat N]``.
"""
import argparse
import timeit

import numpy as np
from scipy.linalg import expm

from hybrid_hpf._kernels import _fallback
from hybrid_hpf.harmonic import HarmonicSet
from hybrid_hpf.study import reduced_benchmark
from hybrid_hpf.timedomain import _Circuit

try:
    from hybrid_hpf._kernels import _core
except ImportError:
    _core = None


def cases():
    rng = np.random.default_rng(0)
    K = 51
    blocks = rng.normal(size=(K, 3, 3)) + 1j * rng.normal(size=(K, 3, 3))
    yield "toeplitz_assemble (H=25, 3x3)", (blocks, np.arange(-25, 26), K // 2), "toeplitz_assemble"

    n = 6
    Ac = 0.3 * rng.normal(size=(3, n, n))
    Ac[0] -= 2 * np.eye(n)
    As = 0.3 * rng.normal(size=(3, n, n))
    args = (Ac, As, rng.normal(size=(3, n)), rng.normal(size=(3, n)), 2 * np.pi, rng.normal(size=n),
            0.0, 1e-3, 2000, 10)
    yield "rk4_periodic (6 states, 2000 steps)", args, "rk4_periodic"

    hs = HarmonicSet.full(25)
    ckt = _Circuit(reduced_benchmark(H=25), hs)
    ckt.set_references(0, 1.0, 0.0)
    dt = 1 / 50 / 2000
    args = (expm(ckt.A * dt / 2), ckt.pc, ckt.ps, hs.omega0, ckt.nic_idx, ckt.nic_par,
            ckt.initial_state(), 0.0, dt, 2000, 10)
    yield f"lawson_cosim (reduced benchmark, {ckt.ns} states, 1 period)", args, "lawson_cosim"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    impls = [("python", _fallback)] + ([("compiled", _core)] if _core else [])
    if _core is None:
        print("compiled extension not built; timing the fallback only")
    print(f"{'kernel':<56} " + " ".join(f"{name:>12}" for name, _ in impls) + "  speedup")
    for label, a, fn in cases():
        best = [min(timeit.repeat(lambda m=m: getattr(m, fn)(*a), number=1, repeat=args.repeat))
                for _, m in impls]
        speed = f"{best[0] / best[1]:8.1f}x" if len(best) == 2 else ""
        print(f"{label:<56} " + " ".join(f"{t * 1e3:10.2f}ms" for t in best) + f"  {speed}")


if __name__ == "__main__":
    main()
