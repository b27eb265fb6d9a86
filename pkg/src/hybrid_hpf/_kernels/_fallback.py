"""Pure-NumPy implementations of the hot kernels.

Signatures mirror the compiled ``_core`` extension exactly; see
``hybrid_hpf._kernels`` for the dispatch.
"""
import numpy as np

_TWO_PI_3 = 2.0 * np.pi / 3.0
_SHIFTS = np.array([0.0, -_TWO_PI_3, _TWO_PI_3])


def toeplitz_assemble(blocks, orders, offset):
    """Dense ``(r*n, c*n)`` matrix with block ``(h, h')`` equal to ``blocks[h - h' + offset]``."""
    blocks = np.asarray(blocks, dtype=complex)
    orders = np.asarray(orders, dtype=np.int64)
    K, r, c = blocks.shape
    n = orders.size
    diff = orders[:, None] - orders[None, :] + offset
    valid = (diff >= 0) & (diff < K)
    lifted = np.zeros((n, n, r, c), dtype=complex)
    lifted[valid] = blocks[diff[valid]]
    # (h, h', i, j) -> (i, h, j, h')
    return lifted.transpose(2, 0, 3, 1).reshape(r * n, c * n)


def _periodic(C, S, w0, t):
    out = C[0].copy()
    for k in range(1, C.shape[0]):
        out += C[k] * np.cos(k * w0 * t) + S[k] * np.sin(k * w0 * t)
    return out


def rk4_periodic(Ac, As, bc, bs, w0, x0, t0, dt, nsteps, stride):
    """Classical RK4 for ``x' = A(t) x + b(t)`` with cosine/sine series coefficients.

    Returns ``(x_final, samples)`` where ``samples`` holds the state at
    steps ``0, stride, 2*stride, ...`` (before each step), shape
    ``(nsteps // stride, n)``.
    """
    x = np.array(x0, dtype=float)
    nrec = nsteps // stride
    out = np.empty((nrec, x.size))

    def f(t, y):
        return _periodic(Ac, As, w0, t) @ y + _periodic(bc, bs, w0, t)

    t = t0
    for s in range(nsteps):
        if s % stride == 0 and s // stride < nrec:
            out[s // stride] = x
        k1 = f(t, x)
        k2 = f(t + 0.5 * dt, x + 0.5 * dt * k1)
        k3 = f(t + 0.5 * dt, x + 0.5 * dt * k2)
        k4 = f(t + dt, x + dt * k3)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t = t0 + (s + 1) * dt
    return x, out


def _cosim_rhs(t, y, pc, ps, w0, nic_idx, nic_par):
    """Converter terms on the full state ``y + x_p(t)``; the linear part is propagated exactly."""
    x = y + _periodic(pc, ps, w0, t)
    dx = np.zeros_like(y)
    for m in range(nic_idx.shape[0]):
        idx = nic_idx[m]
        phi, idref, iqref, kpv, kiv, kp, ki, inv_l1, inv_c, vref = nic_par[m]
        th = w0 * t + phi + _SHIFTS
        c, s = np.cos(th), np.sin(th)
        i1 = x[idx[0:3]]
        i2 = x[idx[3:6]]
        vdc = x[idx[8]]
        wv = x[idx[9]] if idx[9] >= 0 else 0.0
        i2d = (2.0 / 3.0) * np.dot(c, i2)
        i2q = -(2.0 / 3.0) * np.dot(s, i2)
        ed = idref + kpv * vdc - kiv * wv - i2d
        eq = iqref - i2q
        dx[idx[6]] += ed
        dx[idx[7]] += eq
        if idx[9] >= 0:
            dx[idx[9]] += vref - vdc
        ud = kp * ed + ki * x[idx[6]]
        uq = kp * eq + ki * x[idx[7]]
        u = ud * c - uq * s
        dx[idx[0:3]] += u * vdc * inv_l1
        dx[idx[8]] -= (2.0 / 3.0) * np.dot(u, i1) * inv_c
    return dx


def lawson_cosim(E, pc, ps, w0, nic_idx, nic_par, x0, t0, dt, nsteps, stride):
    """Integrating-factor RK4 for ``x' = A x + b(t) + N(t, x)`` with averaged converters in ``N``.

    The sources enter through their periodic particular solution
    ``x_p(t)`` (cosine/sine stacks ``pc``, ``ps``); the scheme integrates
    ``y = x - x_p`` so that stiff modes never see an explicit forcing.
    ``E = expm(A dt / 2)``.  ``nic_idx[m]`` = state indices ``[i1a, i1b,
    i1c, i2a, i2b, i2c, zd, zq, vdc, wv]`` (``wv = -1`` when absent);
    ``nic_par[m]`` = ``[phi, idref, iqref, kpv, kiv, kp, ki, 1/L1, 1/C, vref]``.
    States and samples are returned in full coordinates.
    """
    E = np.asarray(E, dtype=float)
    nic_idx = np.asarray(nic_idx, dtype=np.int64).reshape(-1, 10)
    nic_par = np.asarray(nic_par, dtype=float).reshape(-1, 10)
    pc, ps = np.asarray(pc, dtype=float), np.asarray(ps, dtype=float)
    x = np.array(x0, dtype=float) - _periodic(pc, ps, w0, t0)
    nrec = nsteps // stride
    out = np.empty((nrec, x.size))
    h = dt
    t = t0

    def N(t, y):
        return _cosim_rhs(t, y, pc, ps, w0, nic_idx, nic_par)

    for s in range(nsteps):
        if s % stride == 0 and s // stride < nrec:
            out[s // stride] = x + _periodic(pc, ps, w0, t)
        k1 = N(t, x)
        ex = E @ x
        k2 = N(t + 0.5 * h, E @ (x + 0.5 * h * k1))
        k3 = N(t + 0.5 * h, ex + 0.5 * h * k2)
        k4 = N(t + h, E @ (ex + h * k3))
        x = E @ (E @ (x + (h / 6.0) * k1) + (h / 3.0) * (k2 + k3)) + (h / 6.0) * k4
        t = t0 + (s + 1) * h
    return x + _periodic(pc, ps, w0, t), out
