"""Numba kernels for ray marching through a lattice grid.

Samples are placed in equal bins over the ray's intersection with the grid
box (clipped to [near, far]); every bin has width ``L / n``.  ``jitter``
gives the sample position inside each bin as a fraction in [0, 1); an empty
jitter array means bin midpoints.
"""

import math

import numba as nb
import numpy as np

_EPS_DIR = 1e-12


@nb.njit(cache=True, inline="always", error_model="numpy")
def _slab(o, d, lo, hi, near, far):
    """Ray/box intersection; returns t_in, t_out and the axes that set them.

    Axis code -1 means the bound came from near/far.
    """
    t_in = near
    t_out = far
    a_in = -1
    a_out = -1
    for a in range(3):
        da = d[a]
        if abs(da) < _EPS_DIR:
            if o[a] < lo[a] or o[a] > hi[a]:
                return 1.0, 0.0, -1, -1
            continue
        t0 = (lo[a] - o[a]) / da
        t1 = (hi[a] - o[a]) / da
        if t0 > t1:
            t0, t1 = t1, t0
        if t0 > t_in:
            t_in = t0
            a_in = a
        if t1 < t_out:
            t_out = t1
            a_out = a
    return t_in, t_out, a_in, a_out


@nb.njit(cache=True, inline="always", error_model="numpy")
def _axis(x, lo, inv, n):
    """Lattice index, fraction and derivative mask along one axis (clamp to edge)."""
    g = (x - lo) * inv
    live = 1.0
    if g <= 0.0:
        g = 0.0
        live = 0.0
    elif g >= n - 1:
        g = n - 1.0
        live = 0.0
    i0 = int(math.floor(g))
    if i0 > n - 2:
        i0 = n - 2
    return i0, g - i0, live


@nb.njit(cache=True, inline="always", error_model="numpy")
def _softplus(x):
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


@nb.njit(cache=True, nogil=True, error_model="numpy")
def render_rays(raw, color, lo, hi, origins, dirs, near, far, n_samples, jitter, bg,
                out_rgb, out_depth, out_opacity):
    nx, ny, nz = raw.shape
    ix = (nx - 1) / (hi[0] - lo[0])
    iy = (ny - 1) / (hi[1] - lo[1])
    iz = (nz - 1) / (hi[2] - lo[2])
    use_jitter = jitter.shape[0] > 0
    for r in range(origins.shape[0]):
        o = origins[r]
        d = dirs[r]
        t_in, t_out, _, _ = _slab(o, d, lo, hi, near, far)
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        dep = 0.0
        T = 1.0
        if t_out > t_in:
            delta = (t_out - t_in) / n_samples
            for k in range(n_samples):
                u = jitter[r, k] if use_jitter else 0.5
                s = t_in + (k + u) * delta
                i0, fx, _ = _axis(o[0] + s * d[0], lo[0], ix, nx)
                j0, fy, _ = _axis(o[1] + s * d[1], lo[1], iy, ny)
                k0, fz, _ = _axis(o[2] + s * d[2], lo[2], iz, nz)
                rv = 0.0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                for cx in range(2):
                    wx = fx if cx else 1.0 - fx
                    for cy in range(2):
                        wy = fy if cy else 1.0 - fy
                        for cz in range(2):
                            w = wx * wy * (fz if cz else 1.0 - fz)
                            i = i0 + cx
                            j = j0 + cy
                            l = k0 + cz
                            rv += w * raw[i, j, l]
                            cr += w * color[i, j, l, 0]
                            cg += w * color[i, j, l, 1]
                            cb += w * color[i, j, l, 2]
                trans = math.exp(-_softplus(rv) * delta)
                wk = T * (1.0 - trans)
                c0 += wk * cr
                c1 += wk * cg
                c2 += wk * cb
                dep += wk * s
                T *= trans
        opacity = 1.0 - T
        out_rgb[r, 0] = c0 + T * bg[0]
        out_rgb[r, 1] = c1 + T * bg[1]
        out_rgb[r, 2] = c2 + T * bg[2]
        out_opacity[r] = opacity
        out_depth[r] = dep / max(opacity, 1e-10)


@nb.njit(cache=True, nogil=True, error_model="numpy")
def backward_rays(raw, color, lo, hi, origins, dirs, targets, near, far, n_samples, jitter, bg,
                  scale, grad_raw, grad_color, grad_o, grad_d, out_rgb):
    """Accumulate gradients of ``scale * sum ||C - target||²`` over rays.

    Returns the unscaled sum of squared errors.  Grid gradients are added
    into ``grad_raw`` / ``grad_color``; ``grad_o`` / ``grad_d`` (per ray) and
    ``out_rgb`` are overwritten.
    """
    nx, ny, nz = raw.shape
    ix = (nx - 1) / (hi[0] - lo[0])
    iy = (ny - 1) / (hi[1] - lo[1])
    iz = (nz - 1) / (hi[2] - lo[2])
    use_jitter = jitter.shape[0] > 0
    s_arr = np.empty(n_samples)
    sig_arr = np.empty(n_samples)
    rv_arr = np.empty(n_samples)
    w_arr = np.empty(n_samples)
    tafter = np.empty(n_samples)
    col = np.empty((n_samples, 3))
    cell = np.empty((n_samples, 3), np.int64)
    frac = np.empty((n_samples, 3))
    live = np.empty((n_samples, 3))
    sse = 0.0
    for r in range(origins.shape[0]):
        o = origins[r]
        d = dirs[r]
        for a in range(3):
            grad_o[r, a] = 0.0
            grad_d[r, a] = 0.0
        t_in, t_out, a_in, a_out = _slab(o, d, lo, hi, near, far)
        hit = t_out > t_in
        T = 1.0
        C0 = 0.0
        C1 = 0.0
        C2 = 0.0
        delta = (t_out - t_in) / n_samples
        if hit:
            for k in range(n_samples):
                u = jitter[r, k] if use_jitter else 0.5
                s = t_in + (k + u) * delta
                i0, fx, lx = _axis(o[0] + s * d[0], lo[0], ix, nx)
                j0, fy, ly = _axis(o[1] + s * d[1], lo[1], iy, ny)
                k0, fz, lz = _axis(o[2] + s * d[2], lo[2], iz, nz)
                rv = 0.0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                for cx in range(2):
                    wx = fx if cx else 1.0 - fx
                    for cy in range(2):
                        wy = fy if cy else 1.0 - fy
                        for cz in range(2):
                            w = wx * wy * (fz if cz else 1.0 - fz)
                            i = i0 + cx
                            j = j0 + cy
                            l = k0 + cz
                            rv += w * raw[i, j, l]
                            cr += w * color[i, j, l, 0]
                            cg += w * color[i, j, l, 1]
                            cb += w * color[i, j, l, 2]
                sigma = _softplus(rv)
                trans = math.exp(-sigma * delta)
                wk = T * (1.0 - trans)
                T *= trans
                C0 += wk * cr
                C1 += wk * cg
                C2 += wk * cb
                s_arr[k] = s
                sig_arr[k] = sigma
                rv_arr[k] = rv
                w_arr[k] = wk
                tafter[k] = T
                col[k, 0] = cr
                col[k, 1] = cg
                col[k, 2] = cb
                cell[k, 0] = i0
                cell[k, 1] = j0
                cell[k, 2] = k0
                frac[k, 0] = fx
                frac[k, 1] = fy
                frac[k, 2] = fz
                live[k, 0] = lx * ix
                live[k, 1] = ly * iy
                live[k, 2] = lz * iz
        C0 += T * bg[0]
        C1 += T * bg[1]
        C2 += T * bg[2]
        out_rgb[r, 0] = C0
        out_rgb[r, 1] = C1
        out_rgb[r, 2] = C2
        e0 = C0 - targets[r, 0]
        e1 = C1 - targets[r, 1]
        e2 = C2 - targets[r, 2]
        sse += e0 * e0 + e1 * e1 + e2 * e2
        if not hit:
            continue
        gC0 = 2.0 * scale * e0
        gC1 = 2.0 * scale * e1
        gC2 = 2.0 * scale * e2
        # S holds everything composited behind the current sample
        S0 = T * bg[0]
        S1 = T * bg[1]
        S2 = T * bg[2]
        g_tin = 0.0
        g_tout = 0.0
        g_L = 0.0
        L = t_out - t_in
        for k in range(n_samples - 1, -1, -1):
            ta = tafter[k]
            dot = (gC0 * (ta * col[k, 0] - S0) + gC1 * (ta * col[k, 1] - S1)
                   + gC2 * (ta * col[k, 2] - S2))
            g_L += dot * sig_arr[k] / n_samples
            g_raw = dot * delta / (1.0 + math.exp(-rv_arr[k]))
            wk = w_arr[k]
            S0 += wk * col[k, 0]
            S1 += wk * col[k, 1]
            S2 += wk * col[k, 2]
            gw0 = gC0 * wk
            gw1 = gC1 * wk
            gw2 = gC2 * wk
            fx = frac[k, 0]
            fy = frac[k, 1]
            fz = frac[k, 2]
            sx = live[k, 0]
            sy = live[k, 1]
            sz = live[k, 2]
            gx0 = 0.0
            gx1 = 0.0
            gx2 = 0.0
            for cx in range(2):
                wx = fx if cx else 1.0 - fx
                dx = sx if cx else -sx
                for cy in range(2):
                    wy = fy if cy else 1.0 - fy
                    dy = sy if cy else -sy
                    for cz in range(2):
                        wz = fz if cz else 1.0 - fz
                        dz = sz if cz else -sz
                        w = wx * wy * wz
                        i = cell[k, 0] + cx
                        j = cell[k, 1] + cy
                        l = cell[k, 2] + cz
                        grad_raw[i, j, l] += g_raw * w
                        grad_color[i, j, l, 0] += gw0 * w
                        grad_color[i, j, l, 1] += gw1 * w
                        grad_color[i, j, l, 2] += gw2 * w
                        q = (g_raw * raw[i, j, l] + gw0 * color[i, j, l, 0]
                             + gw1 * color[i, j, l, 1] + gw2 * color[i, j, l, 2])
                        gx0 += q * dx * wy * wz
                        gx1 += q * wx * dy * wz
                        gx2 += q * wx * wy * dz
            s = s_arr[k]
            grad_o[r, 0] += gx0
            grad_o[r, 1] += gx1
            grad_o[r, 2] += gx2
            grad_d[r, 0] += s * gx0
            grad_d[r, 1] += s * gx1
            grad_d[r, 2] += s * gx2
            g_s = gx0 * d[0] + gx1 * d[1] + gx2 * d[2]
            u = (s - t_in) / L
            g_tin += (1.0 - u) * g_s
            g_tout += u * g_s
        g_tout += g_L
        g_tin -= g_L
        # t = (b - o_a) / d_a for the face that bounds the segment
        if a_in >= 0:
            grad_o[r, a_in] -= g_tin / d[a_in]
            grad_d[r, a_in] -= g_tin * t_in / d[a_in]
        if a_out >= 0:
            grad_o[r, a_out] -= g_tout / d[a_out]
            grad_d[r, a_out] -= g_tout * t_out / d[a_out]
    return sse


@nb.njit(cache=True, nogil=True, error_model="numpy")
def adam_step(param, grad, m, v, lr, beta1, beta2, eps, step):
    """In-place Adam update over flat arrays; ``step`` counts from 1."""
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    for i in range(param.size):
        g = grad[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
        param[i] -= lr * (m[i] / bc1) / (math.sqrt(v[i] / bc2) + eps)
