"""Compiled inner loops for the Krylov solves.

All reductions run sequentially in row-major order so results do not depend
on thread count or BLAS build.
"""
import numba as nb
import numpy as np

_jit = nb.njit(cache=True, nogil=True)


@_jit
def seq_dot(a, b):
    s = 0.0
    for k in range(a.size):
        s += a[k] * b[k]
    return s


@_jit
def seq_sum(a):
    s = 0.0
    for k in range(a.size):
        s += a[k]
    return s


@_jit
def lap_into(a, out, ihx2, ihy2):
    ny, nx = a.shape
    for j in range(ny):
        jm = j - 1 if j > 0 else ny - 1
        jp = j + 1 if j < ny - 1 else 0
        for i in range(nx):
            im = i - 1 if i > 0 else nx - 1
            ip = i + 1 if i < nx - 1 else 0
            c = a[j, i]
            out[j, i] = (a[j, ip] - 2.0 * c + a[j, im]) * ihx2 + (a[jp, i] - 2.0 * c + a[jm, i]) * ihy2


@_jit
def semi_implicit_apply(v, out, tmp, idt, cx, cy, cl, cb, ihx2, ihy2, i2hx, i2hy):
    """out = v/dt - cx*Dx v - cy*Dy v - cl*Lap v + cb*Lap^2 v."""
    ny, nx = v.shape
    lap_into(v, tmp, ihx2, ihy2)
    for j in range(ny):
        jm = j - 1 if j > 0 else ny - 1
        jp = j + 1 if j < ny - 1 else 0
        for i in range(nx):
            im = i - 1 if i > 0 else nx - 1
            ip = i + 1 if i < nx - 1 else 0
            c = tmp[j, i]
            l2 = (tmp[j, ip] - 2.0 * c + tmp[j, im]) * ihx2 + (tmp[jp, i] - 2.0 * c + tmp[jm, i]) * ihy2
            adv = cx[j, i] * (v[j, ip] - v[j, im]) * i2hx + cy[j, i] * (v[jp, i] - v[jm, i]) * i2hy
            out[j, i] = v[j, i] * idt - adv - cl[j, i] * c + cb * l2


@_jit
def semi_implicit_apply_t(v, out, tmp, tmp2, idt, cx, cy, cl, cb, ihx2, ihy2, i2hx, i2hy):
    """Transpose of semi_implicit_apply (central differences are antisymmetric)."""
    ny, nx = v.shape
    lap_into(v, tmp, ihx2, ihy2)
    for j in range(ny):
        for i in range(nx):
            tmp2[j, i] = cl[j, i] * v[j, i]
    for j in range(ny):
        jm = j - 1 if j > 0 else ny - 1
        jp = j + 1 if j < ny - 1 else 0
        for i in range(nx):
            im = i - 1 if i > 0 else nx - 1
            ip = i + 1 if i < nx - 1 else 0
            c = tmp[j, i]
            l2 = (tmp[j, ip] - 2.0 * c + tmp[j, im]) * ihx2 + (tmp[jp, i] - 2.0 * c + tmp[jm, i]) * ihy2
            w = tmp2[j, i]
            lcl = (tmp2[j, ip] - 2.0 * w + tmp2[j, im]) * ihx2 + (tmp2[jp, i] - 2.0 * w + tmp2[jm, i]) * ihy2
            adv = (cx[j, ip] * v[j, ip] - cx[j, im] * v[j, im]) * i2hx + (cy[jp, i] * v[jp, i] - cy[jm, i] * v[jm, i]) * i2hy
            out[j, i] = v[j, i] * idt + adv - lcl + cb * l2


@_jit
def midpoint_residual(x, u, lap_u, blap_u, out, lap_x, idt, m0, kbt, tau, ncoef, rho, chi, cb,
                      ihx2, ihy2, i2hx, i2hy):
    """Residual of the midpoint scheme; returns the flat index of the first
    midpoint outside (0, 1/rho), or -1."""
    ny, nx = x.shape
    upper = 1.0 / rho
    for j in range(ny):
        for i in range(nx):
            m = 0.5 * (x[j, i] + u[j, i])
            if not (m > 0.0 and m < upper):
                return i + j * nx
    lap_into(x, lap_x, ihx2, ihy2)
    for j in range(ny):
        jm = j - 1 if j > 0 else ny - 1
        jp = j + 1 if j < ny - 1 else 0
        for i in range(nx):
            im = i - 1 if i > 0 else nx - 1
            ip = i + 1 if i < nx - 1 else 0
            m = 0.5 * (x[j, i] + u[j, i])
            s = 1.0 - rho * m
            gm = kbt * (1.0 / (tau * m) + 1.0 / (ncoef * m) + rho * rho / s - 2.0 * chi * rho * rho)
            gpm = kbt * (-1.0 / (tau * m * m) - 1.0 / (ncoef * m * m) + rho * rho * rho / (s * s))
            mx = 0.5 * ((x[j, ip] + u[j, ip]) - (x[j, im] + u[j, im])) * i2hx
            my = 0.5 * ((x[jp, i] + u[jp, i]) - (x[jm, i] + u[jm, i])) * i2hy
            c = lap_x[j, i]
            blap_x = (lap_x[j, ip] - 2.0 * c + lap_x[j, im]) * ihx2 + (lap_x[jp, i] - 2.0 * c + lap_x[jm, i]) * ihy2
            out[j, i] = ((x[j, i] - u[j, i]) * idt - m0 * gpm * (mx * mx + my * my)
                         - m0 * gm * 0.5 * (lap_u[j, i] + c) + cb * (blap_x + blap_u[j, i]))
    return -1

