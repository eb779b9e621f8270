"""Compiled warp kernels (clamp-to-edge multilinear sampling with gradient)."""

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _axis(c, n):
    live = 1.0 if (c > 0.0 and c < n - 1.0) else 0.0
    if c < 0.0:
        c = 0.0
    elif c > n - 1.0:
        c = n - 1.0
    if n == 1:
        return 0, 0, 0.0, 0.0
    i0 = int(np.floor(c))
    if i0 > n - 2:
        i0 = n - 2
    return i0, i0 + 1, c - i0, live


@njit(cache=True)
def warp2(src, phi, out, grad, want_grad):
    h, w = src.shape
    for y in range(h):
        for x in range(w):
            y0, y1, fy, ly = _axis(y + phi[1, y, x], h)
            x0, x1, fx, lx = _axis(x + phi[0, y, x], w)
            v00 = src[y0, x0]
            v01 = src[y0, x1]
            v10 = src[y1, x0]
            v11 = src[y1, x1]
            a = v00 + fx * (v01 - v00)
            b = v10 + fx * (v11 - v10)
            out[y, x] = a + fy * (b - a)
            if want_grad:
                grad[0, y, x] = lx * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10))
                grad[1, y, x] = ly * (b - a)


@njit(cache=True)
def warp3(src, phi, out, grad, want_grad):
    d, h, w = src.shape
    for z in range(d):
        for y in range(h):
            for x in range(w):
                z0, z1, fz, lz = _axis(z + phi[2, z, y, x], d)
                y0, y1, fy, ly = _axis(y + phi[1, z, y, x], h)
                x0, x1, fx, lx = _axis(x + phi[0, z, y, x], w)
                c000 = src[z0, y0, x0]
                c001 = src[z0, y0, x1]
                c010 = src[z0, y1, x0]
                c011 = src[z0, y1, x1]
                c100 = src[z1, y0, x0]
                c101 = src[z1, y0, x1]
                c110 = src[z1, y1, x0]
                c111 = src[z1, y1, x1]
                a00 = c000 + fx * (c001 - c000)
                a01 = c010 + fx * (c011 - c010)
                a10 = c100 + fx * (c101 - c100)
                a11 = c110 + fx * (c111 - c110)
                b0 = a00 + fy * (a01 - a00)
                b1 = a10 + fy * (a11 - a10)
                out[z, y, x] = b0 + fz * (b1 - b0)
                if want_grad:
                    gx0 = (1.0 - fy) * (c001 - c000) + fy * (c011 - c010)
                    gx1 = (1.0 - fy) * (c101 - c100) + fy * (c111 - c110)
                    grad[0, z, y, x] = lx * ((1.0 - fz) * gx0 + fz * gx1)
                    grad[1, z, y, x] = ly * ((1.0 - fz) * (a01 - a00) + fz * (a11 - a10))
                    grad[2, z, y, x] = lz * (b1 - b0)


@njit(cache=True)
def diffusion(phi, grad, scale):
    """Sum of squared forward differences of ``phi`` (C, nz, ny, nx).

    Adds ``scale`` times its gradient into ``grad`` and returns the sum.
    """
    nc, nz, ny, nx = phi.shape
    total = 0.0
    for c in range(nc):
        for z in range(nz):
            for y in range(ny):
                for x in range(nx):
                    p = phi[c, z, y, x]
                    if x + 1 < nx:
                        d = phi[c, z, y, x + 1] - p
                        total += d * d
                        grad[c, z, y, x] -= 2.0 * scale * d
                        grad[c, z, y, x + 1] += 2.0 * scale * d
                    if y + 1 < ny:
                        d = phi[c, z, y + 1, x] - p
                        total += d * d
                        grad[c, z, y, x] -= 2.0 * scale * d
                        grad[c, z, y + 1, x] += 2.0 * scale * d
                    if z + 1 < nz:
                        d = phi[c, z + 1, y, x] - p
                        total += d * d
                        grad[c, z, y, x] -= 2.0 * scale * d
                        grad[c, z + 1, y, x] += 2.0 * scale * d
    return total
