"""Harmonic-domain algebra.

Signals are represented by double-sided Fourier coefficients ``X_h`` with
``x(t) = sum_h X_h exp(j h w0 t)``.  Vectors and operators use a
variable-major layout: entry ``(var, h)`` sits at ``var * n_orders + idx(h)``.

Newton iterations run over real variables; :func:`to_real_stacked` and
:func:`real_stack_matrix` interleave real and imaginary parts
(``[re0, im0, re1, im1, ...]``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from hybrid_hpf import _kernels


@dataclass(frozen=True)
class HarmonicSet:
    """Ordered set of signed harmonic orders sharing one fundamental."""

    f0: float
    orders: tuple[int, ...]

    def __post_init__(self):
        orders = tuple(int(h) for h in self.orders)
        if list(orders) != sorted(set(orders)):
            raise ValueError("harmonic orders must be sorted and unique")
        if set(orders) != {-h for h in orders}:
            raise ValueError("harmonic orders must be symmetric about zero")
        if self.f0 <= 0:
            raise ValueError("fundamental frequency must be positive")
        object.__setattr__(self, "orders", orders)

    @classmethod
    def full(cls, H: int, f0: float = 50.0) -> "HarmonicSet":
        """All orders ``-H..H``."""
        if H < 0:
            raise ValueError("H must be non-negative")
        return cls(f0, tuple(range(-H, H + 1)))

    @property
    def H(self) -> int:
        return max(abs(h) for h in self.orders) if self.orders else 0

    @property
    def n(self) -> int:
        return len(self.orders)

    @property
    def omega0(self) -> float:
        return 2.0 * np.pi * self.f0

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.orders, dtype=int)

    def index(self, h: int) -> int:
        try:
            return self.orders.index(h)
        except ValueError:
            raise KeyError(f"harmonic order {h} not in set") from None

    def has_dc(self) -> bool:
        return 0 in self.orders

    def mirror(self) -> np.ndarray:
        """Permutation mapping each position to the position of ``-h``."""
        return self.n - 1 - np.arange(self.n)


@dataclass(frozen=True, eq=False)
class HarmonicPhasorVector:
    """Fourier coefficients of a (poly)phase signal, shape ``(phases, n)``."""

    harmonic_set: HarmonicSet
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=complex, copy=True)
        if c.ndim == 1:
            c = c[None, :]
        if c.shape[1] != self.harmonic_set.n:
            raise ValueError("coefficient count does not match the harmonic set")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def phases(self) -> int:
        return self.coeffs.shape[0]

    def __len__(self) -> int:
        return self.coeffs.size

    def __getitem__(self, key):
        p, h = key
        return self.coeffs[p, self.harmonic_set.index(h)]

    def flat(self) -> np.ndarray:
        return self.coeffs.ravel()

    def is_real_signal(self, atol: float = 1e-12) -> bool:
        return is_conjugate_symmetric(self.coeffs, self.harmonic_set, atol)

    def single_sided(self) -> np.ndarray:
        """Magnitudes of the one-sided spectrum for ``h >= 0``."""
        return single_sided_magnitude(self.coeffs, self.harmonic_set)


def is_conjugate_symmetric(coeffs: np.ndarray, hset: HarmonicSet, atol: float = 1e-12) -> bool:
    c = np.asarray(coeffs)
    mirrored = np.conj(c[..., hset.mirror()])
    return bool(np.allclose(c, mirrored, rtol=0.0, atol=atol))


def symmetrize(coeffs: np.ndarray, hset: HarmonicSet) -> np.ndarray:
    """Project onto the conjugate-symmetric subspace."""
    c = np.asarray(coeffs, dtype=complex)
    return 0.5 * (c + np.conj(c[..., hset.mirror()]))


def single_sided_magnitude(coeffs: np.ndarray, hset: HarmonicSet) -> np.ndarray:
    """Return ``(..., n_nonneg)`` magnitudes: ``|X_0|`` and ``2|X_h|`` for h >= 1."""
    c = np.asarray(coeffs)
    pos = [i for i, h in enumerate(hset.orders) if h >= 0]
    mag = np.abs(c[..., pos])
    scale = np.array([1.0 if hset.orders[i] == 0 else 2.0 for i in pos])
    return mag * scale


def nonnegative_orders(hset: HarmonicSet) -> list[int]:
    return [h for h in hset.orders if h >= 0]


def dft_coefficients(samples, hset: HarmonicSet, periods: int = 1, dt: float | None = None,
                     rtol: float = 1e-9) -> HarmonicPhasorVector:
    """Fourier coefficients of uniformly sampled periodic signals.

    ``samples`` has shape ``(N,)`` or ``(phases, N)`` and covers exactly
    ``periods`` fundamental periods (first sample at t=0, last sample one
    step before the window end).
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    N = x.shape[-1]
    periods = int(periods)
    if dt is not None:
        span = N * dt * hset.f0
        if abs(span - round(span)) > rtol * max(1.0, span) or round(span) < 1:
            raise ValueError(f"sample window spans {span:.9g} periods, not an integer count")
        periods = int(round(span))
    if periods < 1:
        raise ValueError("window must span at least one period")
    if N < 2 * (2 * hset.H + 1) or hset.H * periods >= N / 2:
        raise ValueError(f"{N} samples alias harmonic order {hset.H} over {periods} periods")
    spectrum = np.fft.fft(x, axis=-1) / N
    bins = (hset.array * periods) % N
    return HarmonicPhasorVector(hset, spectrum[:, bins])


def synthesize(coeffs, hset: HarmonicSet, t) -> np.ndarray:
    """Evaluate ``sum_h X_h exp(j h w0 t)`` (real part) at times ``t``."""
    c = np.asarray(coeffs, dtype=complex)
    t = np.asarray(t, dtype=float)
    phase = np.exp(1j * hset.omega0 * np.outer(hset.array, t))
    return np.real(c @ phase)


@dataclass(frozen=True, eq=False)
class ToeplitzOperator:
    """Block-Toeplitz lifting of a periodic matrix ``M(t) = sum_k M_k e^{jkw0t}``.

    ``blocks[k + 2H]`` holds ``M_k`` for ``k`` in ``-2H..2H``.
    """

    harmonic_set: HarmonicSet
    blocks: np.ndarray
    block_rows: int = field(init=False)
    block_cols: int = field(init=False)

    def __post_init__(self):
        b = np.array(self.blocks, dtype=complex, copy=True)
        K = 4 * self.harmonic_set.H + 1
        if b.ndim != 3 or b.shape[0] != K:
            raise ValueError(f"expected {K} coefficient blocks")
        b.setflags(write=False)
        object.__setattr__(self, "blocks", b)
        object.__setattr__(self, "block_rows", b.shape[1])
        object.__setattr__(self, "block_cols", b.shape[2])

    def coefficient(self, k: int) -> np.ndarray:
        return self.blocks[k + 2 * self.harmonic_set.H]

    def matrix(self) -> np.ndarray:
        return _kernels.toeplitz_assemble(self.blocks, self.harmonic_set.array, 2 * self.harmonic_set.H)

    def is_block_diagonal(self) -> bool:
        H2 = 2 * self.harmonic_set.H
        off = np.delete(self.blocks, H2, axis=0)
        return not np.any(off)

    def apply(self, x) -> np.ndarray:
        """Apply to a variable-major coefficient array of shape ``(cols, n)``."""
        v = np.asarray(x, dtype=complex).reshape(self.block_cols * self.harmonic_set.n)
        return (self.matrix() @ v).reshape(self.block_rows, self.harmonic_set.n)


def toeplitz_from_series(series: Mapping[int, np.ndarray] | np.ndarray, hset: HarmonicSet,
                         korders=None) -> ToeplitzOperator:
    """Lift a Fourier series of matrices to a :class:`ToeplitzOperator`.

    ``series`` is either a mapping ``k -> M_k`` or an array stacked along
    ``korders``.  Coefficients with ``|k| > 2H`` cannot reach any retained
    block and are dropped.
    """
    if not isinstance(series, Mapping):
        arr = np.asarray(series)
        if korders is None:
            raise ValueError("korders required for array input")
        series = {int(k): arr[i] for i, k in enumerate(korders)}
    shapes = {np.shape(np.atleast_2d(m)) for m in series.values()}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent block dimensions across orders: {sorted(shapes)}")
    (r, c), = shapes
    H2 = 2 * hset.H
    blocks = np.zeros((2 * H2 + 1, r, c), dtype=complex)
    for k, m in series.items():
        if abs(k) <= H2:
            blocks[k + H2] = np.atleast_2d(m)
    return ToeplitzOperator(hset, blocks)


def constant_operator(M, hset: HarmonicSet) -> ToeplitzOperator:
    return toeplitz_from_series({0: np.atleast_2d(M)}, hset)


def frequency_shift(hset: HarmonicSet, state_dim: int) -> sp.dia_matrix:
    """Block-diagonal ``diag_h(j h w0 I)`` in variable-major layout."""
    d = 1j * hset.omega0 * np.tile(hset.array.astype(float), state_dim)
    return sp.diags(d, format="csr")


def series_from_samples(values: np.ndarray, hset: HarmonicSet, kmax: int) -> dict[int, np.ndarray]:
    """Exact Fourier series of a trigonometric polynomial sampled over one period.

    ``values`` has shape ``(N, ...)`` with ``N > 2*kmax``.
    """
    N = values.shape[0]
    if N <= 2 * kmax:
        raise ValueError("too few samples for the requested series degree")
    spec = np.fft.fft(values, axis=0) / N
    return {k: spec[k % N] for k in range(-kmax, kmax + 1)}


# --- real stacking -----------------------------------------------------------

def to_real_stacked(v) -> np.ndarray:
    """Interleave real and imaginary parts: ``1+2j -> [1, 2]``."""
    z = np.asarray(v, dtype=complex).ravel()
    out = np.empty(2 * z.size)
    out[0::2] = z.real
    out[1::2] = z.imag
    return out


def from_real_stacked(r, shape=None) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    z = r[0::2] + 1j * r[1::2]
    return z.reshape(shape) if shape is not None else z


_RE = np.array([[1.0, 0.0], [0.0, 1.0]])
_IM = np.array([[0.0, -1.0], [1.0, 0.0]])
_CONJ_RE = np.array([[1.0, 0.0], [0.0, -1.0]])
_CONJ_IM = np.array([[0.0, 1.0], [1.0, 0.0]])


def real_stack_matrix(A, B=None):
    """Real matrix of ``z -> A z + B conj(z)`` in interleaved coordinates.

    Works for dense arrays and scipy sparse matrices.
    """
    if sp.issparse(A) or (B is not None and sp.issparse(B)):
        A = sp.csr_matrix(A)
        out = sp.kron(A.real, _RE) + sp.kron(A.imag, _IM)
        if B is not None:
            B = sp.csr_matrix(B)
            out = out + sp.kron(B.real, _CONJ_RE) + sp.kron(B.imag, _CONJ_IM)
        return out.tocsr()
    A = np.asarray(A, dtype=complex)
    out = np.kron(A.real, _RE) + np.kron(A.imag, _IM)
    if B is not None:
        B = np.asarray(B, dtype=complex)
        out = out + np.kron(B.real, _CONJ_RE) + np.kron(B.imag, _CONJ_IM)
    return out


def antilinear_block(a) -> np.ndarray:
    """2x2 real block of ``z -> a conj(z)``."""
    a = complex(a)
    return np.array([[a.real, a.imag], [a.imag, -a.real]])
