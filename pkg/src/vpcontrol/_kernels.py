"""Compiled particle/grid loops. All loops run in index order (deterministic sums)."""
import numpy as np
from numba import njit


@njit(cache=True)
def cell_index(x, lower, h, n):
    """Lower cell corner and fractional offsets; ``-1`` flags points outside the box."""
    m = x.shape[0]
    idx = np.empty((m, 3), dtype=np.int64)
    frac = np.empty((m, 3))
    bad = -1
    for p in range(m):
        for a in range(3):
            u = (x[p, a] - lower[a]) / h
            if not (u >= 0.0 and u <= n - 1):
                if bad < 0:
                    bad = p
                u = min(max(u, 0.0), n - 1.0)
            i = int(np.floor(u))
            if i > n - 2:
                i = n - 2
            idx[p, a] = i
            frac[p, a] = u - i
    return idx, frac, bad


@njit(cache=True)
def cic_deposit(idx, frac, q, n):
    rho = np.zeros(n * n * n)
    for p in range(idx.shape[0]):
        i, j, k = idx[p, 0], idx[p, 1], idx[p, 2]
        fx, fy, fz = frac[p, 0], frac[p, 1], frac[p, 2]
        for dx in range(2):
            wx = fx if dx else 1.0 - fx
            for dy in range(2):
                wy = fy if dy else 1.0 - fy
                for dz in range(2):
                    wz = fz if dz else 1.0 - fz
                    rho[((i + dx) * n + j + dy) * n + k + dz] += q[p] * wx * wy * wz
    return rho


@njit(cache=True)
def cic_gather(idx, frac, data, n):
    """``data`` has shape ``(n**3, c)``; returns ``(m, c)``."""
    m = idx.shape[0]
    c = data.shape[1]
    out = np.zeros((m, c))
    for p in range(m):
        i, j, k = idx[p, 0], idx[p, 1], idx[p, 2]
        fx, fy, fz = frac[p, 0], frac[p, 1], frac[p, 2]
        for dx in range(2):
            wx = fx if dx else 1.0 - fx
            for dy in range(2):
                wy = fy if dy else 1.0 - fy
                for dz in range(2):
                    wz = fz if dz else 1.0 - fz
                    w = wx * wy * wz
                    row = ((i + dx) * n + j + dy) * n + k + dz
                    for a in range(c):
                        out[p, a] += w * data[row, a]
    return out


@njit(cache=True)
def boris_krk(v, F, G, dt, use_f, use_g):
    """Half kick, Boris rotation by ``2 arctan(|G| dt/2)``, half kick."""
    m = v.shape[0]
    out = np.empty_like(v)
    for p in range(m):
        a0, a1, a2 = v[p, 0], v[p, 1], v[p, 2]
        if use_f:
            a0 += 0.5 * dt * F[p, 0]
            a1 += 0.5 * dt * F[p, 1]
            a2 += 0.5 * dt * F[p, 2]
        if use_g:
            t0, t1, t2 = 0.5 * dt * G[p, 0], 0.5 * dt * G[p, 1], 0.5 * dt * G[p, 2]
            c = 2.0 / (1.0 + t0 * t0 + t1 * t1 + t2 * t2)
            s0, s1, s2 = c * t0, c * t1, c * t2
            p0 = a0 + (a1 * t2 - a2 * t1)
            p1 = a1 + (a2 * t0 - a0 * t2)
            p2 = a2 + (a0 * t1 - a1 * t0)
            a0 = a0 + (p1 * s2 - p2 * s1)
            a1 = a1 + (p2 * s0 - p0 * s2)
            a2 = a2 + (p0 * s1 - p1 * s0)
        if use_f:
            a0 += 0.5 * dt * F[p, 0]
            a1 += 0.5 * dt * F[p, 1]
            a2 += 0.5 * dt * F[p, 2]
        out[p, 0], out[p, 1], out[p, 2] = a0, a1, a2
    return out


@njit(cache=True)
def max_norms(x, v, mask):
    """Max of ``|v|``, ``|x|`` and ``|(x, v)|`` over rows with ``mask`` set."""
    pm = qm = sm = 0.0
    for p in range(x.shape[0]):
        if not mask[p]:
            continue
        xx = x[p, 0] * x[p, 0] + x[p, 1] * x[p, 1] + x[p, 2] * x[p, 2]
        vv = v[p, 0] * v[p, 0] + v[p, 1] * v[p, 1] + v[p, 2] * v[p, 2]
        qm = max(qm, xx)
        pm = max(pm, vv)
        sm = max(sm, xx + vv)
    return np.sqrt(pm), np.sqrt(qm), np.sqrt(sm)
