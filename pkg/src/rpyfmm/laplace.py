"""Spherical-harmonic multipole and local expansions of the Laplace kernel 1/r.

Harmonics use the normalization

    Y_n^m(theta, phi) = sqrt((n-|m|)!/(n+|m|)!) P_n^|m|(cos theta) exp(i m phi)

with associated Legendre functions *without* the Condon-Shortley phase, so
``P_1^1(x) = sqrt(1 - x^2)``.  Only orders ``0 <= m <= n`` are stored; the
negative orders follow from ``c_n^{-m} = conj(c_n^m)``.

Coefficients are stored box-scaled: a multipole about a box of half-width
``s`` keeps ``M_n^m / s^n`` and a local expansion keeps ``L_n^m * s^n``.  This
keeps high orders in range on deep trees and makes every translation operator
depend only on the relative box geometry.

Translation operators are assembled as real ``(2K, 2K)`` matrices acting on
``[Re c, Im c]`` so that many expansions can be shifted with one GEMM.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

MAX_ORDER = 40

_FACT = np.array([float(math.factorial(i)) for i in range(171)])
_SQRT_FACT = np.sqrt(_FACT)


def ncoeffs(p: int) -> int:
    """Number of stored coefficients (0 <= m <= n <= p)."""
    return (p + 1) * (p + 2) // 2


def _check_order(p):
    if not isinstance(p, (int, np.integer)) or p < 1 or p > MAX_ORDER:
        raise ValueError(f"expansion order must be an integer in [1, {MAX_ORDER}], got {p!r}")
    return int(p)


# ---------------------------------------------------------------------------
# Legendre functions
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _legendre_into(c, s, nmax, out):
    """Fill out[n, m] = P_n^m(c) for 0 <= m <= n <= nmax, where s = sqrt(1-c^2)."""
    out[0, 0] = 1.0
    pmm = 1.0
    for m in range(nmax + 1):
        if m > 0:
            pmm = pmm * (2 * m - 1) * s
            out[m, m] = pmm
        if m + 1 <= nmax:
            out[m + 1, m] = c * (2 * m + 1) * pmm
        for n in range(m + 2, nmax + 1):
            out[n, m] = ((2 * n - 1) * c * out[n - 1, m] - (n + m - 1) * out[n - 2, m]) / (n - m)


def legendre_table(x: float, nmax: int) -> np.ndarray:
    """Associated Legendre functions P_n^m(x), no Condon-Shortley phase.

    Returns a ``(nmax+1, nmax+1)`` array with ``P[n, m]`` filled for
    ``0 <= m <= n``; entries with ``m > n`` are zero.
    """
    x = float(x)
    if not abs(x) <= 1.0 + 1e-14:
        raise ValueError(f"legendre_table: argument {x} outside [-1, 1]")
    x = min(1.0, max(-1.0, x))
    out = np.zeros((nmax + 1, nmax + 1))
    _legendre_into(x, math.sqrt(max(0.0, 1.0 - x * x)), int(nmax), out)
    return out


@njit(cache=True, nogil=True)
def _spherical(dx, dy, dz):
    """(r, cos theta, sin theta, cos phi, sin phi) with safe values at the poles."""
    rxy2 = dx * dx + dy * dy
    r = math.sqrt(rxy2 + dz * dz)
    if r == 0.0:
        return 0.0, 1.0, 0.0, 1.0, 0.0
    rxy = math.sqrt(rxy2)
    if rxy == 0.0:
        return r, dz / r, 0.0, 1.0, 0.0
    return r, dz / r, rxy / r, dx / rxy, dy / rxy


@njit(cache=True, nogil=True)
def _phases(cphi, sphi, mmax, out):
    e1 = complex(cphi, sphi)
    out[0] = 1.0
    for m in range(1, mmax + 1):
        out[m] = out[m - 1] * e1


@njit(cache=True, nogil=True)
def _normalize(ptab, nmax, sqf):
    # ptab[n, m] *= sqrt((n-m)!/(n+m)!)
    for n in range(nmax + 1):
        for m in range(n + 1):
            ptab[n, m] *= sqf[n - m] / sqf[n + m]


@njit(cache=True, nogil=True)
def _ipow(e):
    r = e % 4
    if r == 0:
        return complex(1.0, 0.0)
    if r == 1:
        return complex(0.0, 1.0)
    if r == 2:
        return complex(-1.0, 0.0)
    return complex(0.0, -1.0)


# ---------------------------------------------------------------------------
# Particle <-> expansion kernels (batched over several charge sets)
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _p2m_accumulate(pts, q, cx, cy, cz, scale, p, sqf, out):
    """out[c, idx(n,m)] += sum_j q[j,c] (rho/s)^n conj(Y_n^m(alpha, beta))."""
    nq = q.shape[1]
    ptab = np.zeros((p + 1, p + 1))
    eph = np.empty(p + 1, dtype=np.complex128)
    inv = 1.0 / scale
    for j in range(pts.shape[0]):
        r, ct, st, cp, sp = _spherical((pts[j, 0] - cx) * inv, (pts[j, 1] - cy) * inv,
                                        (pts[j, 2] - cz) * inv)
        _legendre_into(ct, st, p, ptab)
        _phases(cp, -sp, p, eph)
        rn = 1.0
        for n in range(p + 1):
            base = n * (n + 1) // 2
            for m in range(n + 1):
                y = rn * ptab[n, m] * sqf[n - m] / sqf[n + m] * eph[m]
                for c in range(nq):
                    out[c, base + m] += q[j, c] * y
            rn *= r


@njit(cache=True, nogil=True)
def _p2l_accumulate(pts, q, cx, cy, cz, scale, p, sqf, out):
    """out[c, idx(n,m)] += (1/s) sum_j q[j,c] (s/rho)^(n+1) conj(Y_n^m)."""
    nq = q.shape[1]
    ptab = np.zeros((p + 1, p + 1))
    eph = np.empty(p + 1, dtype=np.complex128)
    inv = 1.0 / scale
    for j in range(pts.shape[0]):
        r, ct, st, cp, sp = _spherical((pts[j, 0] - cx) * inv, (pts[j, 1] - cy) * inv,
                                        (pts[j, 2] - cz) * inv)
        _legendre_into(ct, st, p, ptab)
        _phases(cp, -sp, p, eph)
        ir = 1.0 / r
        rn = ir * inv
        for n in range(p + 1):
            base = n * (n + 1) // 2
            for m in range(n + 1):
                y = rn * ptab[n, m] * sqf[n - m] / sqf[n + m] * eph[m]
                for c in range(nq):
                    out[c, base + m] += q[j, c] * y
            rn *= ir


# ---------------------------------------------------------------------------
# Value / gradient / Hessian of expansions
# ---------------------------------------------------------------------------
# Hessian entries are packed as (xx, yy, zz, xy, xz, yz).

@njit(cache=True, nogil=True)
def _assemble(val, g0, gp, gpg0, gpgp, g0g0, ci, value, grad, hess, vscale, gscale, hscale):
    value[ci] += val * vscale
    grad[ci, 0] += gp.real * gscale
    grad[ci, 1] += gp.imag * gscale
    grad[ci, 2] += g0 * gscale
    hess[ci, 0] += 0.5 * (gpgp.real - g0g0) * hscale
    hess[ci, 1] += 0.5 * (-gpgp.real - g0g0) * hscale
    hess[ci, 2] += g0g0 * hscale
    hess[ci, 3] += 0.5 * gpgp.imag * hscale
    hess[ci, 4] += gpg0.real * hscale
    hess[ci, 5] += gpg0.imag * hscale


@njit(cache=True, nogil=True)
def _mpole_derivs_point(coef, dx, dy, dz, scale, p, sqf, ptab, eph, value, grad, hess):
    """Accumulate value/grad/Hessian of the multipoles coef[c] at offset (dx,dy,dz).

    Works in box units x' = x/s, where the scaled coefficients are the plain
    coefficients, then rescales: value/s, grad/s^2, Hessian/s^3.  The s1..s10
    accumulators collect G0, G+ and their products term by term, where
    G0 = d/dz and G+ = d/dx + i d/dy.  Terms that shift m by an odd amount
    carry the opposite sign from the Condon-Shortley form since P here has
    no such phase.
    """
    inv = 1.0 / scale
    r, ct, st, cp, sp = _spherical(dx * inv, dy * inv, dz * inv)
    _legendre_into(ct, st, p + 2, ptab)
    _phases(cp, sp, p + 2, eph)
    em1 = eph[1].conjugate()
    ir = 1.0 / r
    for c in range(coef.shape[0]):
        val = 0.0
        s1 = 0.0
        s2 = 0j
        s3 = 0j
        s4 = 0j
        s5 = 0j
        s6 = 0j
        s7 = 0j
        s8 = 0j
        s9 = 0.0
        s10 = 0j
        rn1 = ir  # 1/r^(n+1)
        for n in range(p + 1):
            rn2 = rn1 * ir
            rn3 = rn2 * ir
            base = n * (n + 1) // 2
            for m in range(n + 1):
                mc = coef[c, base + m]
                cnm = sqf[n - m] / sqf[n + m]
                a = mc * cnm
                if m == 0:
                    val += (a * ptab[n, 0]).real * rn1
                    s1 -= a.real * (n + 1) * ptab[n + 1, 0] * rn2
                    s9 += a.real * ptab[n + 2, 0] * (n + 1) * (n + 2) * rn3
                else:
                    val += 2.0 * (a * ptab[n, m] * eph[m]).real * rn1
                    s2 -= a * ptab[n + 1, m] * eph[m] * ((n - m + 1) * rn2)
                    s10 += a * ptab[n + 2, m] * eph[m] * ((n - m + 2) * (n - m + 1) * rn3)
                    s4 += a * ptab[n + 1, m - 1] * eph[m - 1] * ((n - m + 2) * (n - m + 1) * rn2)
                    s6 -= a * ptab[n + 2, m - 1] * eph[m - 1] * (
                        (n - m + 3) * (n - m + 2) * (n - m + 1) * rn3)
                s3 -= a * ptab[n + 1, m + 1] * eph[m + 1] * rn2
                s5 += a * ptab[n + 2, m + 1] * eph[m + 1] * ((n - m + 1) * rn3)
                s7 += a * ptab[n + 2, m + 2] * eph[m + 2] * rn3
                if m >= 2:
                    s8 += a * ptab[n + 2, m - 2] * eph[m - 2] * (
                        (n - m + 4) * (n - m + 3) * (n - m + 2) * (n - m + 1) * rn3)
                elif m == 1:
                    s8 -= mc * ptab[n + 2, 1] * em1 * (math.sqrt(n * (n + 1.0)) * rn3)
            rn1 = rn2
        g0 = s1 + 2.0 * s2.real
        gp = s3 + s4.conjugate()
        gpg0 = s5 + s6.conjugate()
        gpgp = s7 + s8.conjugate()
        g0g0 = s9 + 2.0 * s10.real
        _assemble(val, g0, gp, gpg0, gpgp, g0g0, c, value, grad, hess,
                  inv, inv * inv, inv * inv * inv)


@njit(cache=True, nogil=True)
def _local_derivs_point(coef, dx, dy, dz, scale, p, sqf, ptab, eph, value, grad, hess):
    """Accumulate value/grad/Hessian of the local expansions coef[c]; same s1..s10 layout as the multipole case."""
    inv = 1.0 / scale
    r, ct, st, cp, sp = _spherical(dx * inv, dy * inv, dz * inv)
    _legendre_into(ct, st, p, ptab)
    _phases(cp, sp, p, eph)
    em1 = eph[1].conjugate() if p >= 1 else complex(1.0, 0.0)
    for c in range(coef.shape[0]):
        val = 0.0
        s1 = 0.0
        s2 = 0j
        s3 = 0j
        s4 = 0j
        s5 = 0j
        s6 = 0j
        s7 = 0j
        s8 = 0j
        s9 = 0.0
        s10 = 0j
        rn = 1.0   # r^n
        rm1 = 0.0  # r^(n-1)
        rm2 = 0.0  # r^(n-2)
        for n in range(p + 1):
            base = n * (n + 1) // 2
            for m in range(n + 1):
                lc = coef[c, base + m]
                cnm = sqf[n - m] / sqf[n + m]
                a = lc * cnm
                if m == 0:
                    val += (a * ptab[n, 0]).real * rn
                else:
                    val += 2.0 * (a * ptab[n, m] * eph[m]).real * rn
                if n >= 1:
                    if m == 0:
                        s1 += a.real * n * ptab[n - 1, 0] * rm1
                    elif m <= n - 1:
                        s2 += a * ptab[n - 1, m] * eph[m] * ((n + m) * rm1)
                    if m <= n - 2:
                        s3 -= a * ptab[n - 1, m + 1] * eph[m + 1] * rm1
                    if m >= 1:
                        s4 += a * ptab[n - 1, m - 1] * eph[m - 1] * ((n + m) * (n + m - 1) * rm1)
                if n >= 2:
                    if m == 0:
                        s9 += a.real * n * (n - 1) * ptab[n - 2, 0] * rm2
                    elif m <= n - 2:
                        s10 += a * ptab[n - 2, m] * eph[m] * ((n + m) * (n + m - 1) * rm2)
                    if m <= n - 3:
                        s5 -= a * ptab[n - 2, m + 1] * eph[m + 1] * ((n + m) * rm2)
                    if 1 <= m <= n - 1:
                        s6 += a * ptab[n - 2, m - 1] * eph[m - 1] * (
                            (n + m) * (n + m - 1) * (n + m - 2) * rm2)
                    if m <= n - 4:
                        s7 += a * ptab[n - 2, m + 2] * eph[m + 2] * rm2
                    if m >= 2:
                        s8 += a * ptab[n - 2, m - 2] * eph[m - 2] * (
                            (n + m) * (n + m - 1) * (n + m - 2) * (n + m - 3) * rm2)
                    elif m == 1 and n >= 3:
                        s8 -= lc * ptab[n - 2, 1] * em1 * (math.sqrt(n * (n + 1.0)) * rm2)
            rm2 = rm1
            rm1 = rn
            rn *= r
        g0 = s1 + 2.0 * s2.real
        gp = s3 + s4.conjugate()
        gpg0 = s5 + s6.conjugate()
        gpgp = s7 + s8.conjugate()
        g0g0 = s9 + 2.0 * s10.real
        _assemble(val, g0, gp, gpg0, gpgp, g0g0, c, value, grad, hess,
                  1.0, inv, inv * inv)


@njit(cache=True, nogil=True)
def _mpole_value_point(coef, dx, dy, dz, scale, p, sqf, ptab, eph, out):
    inv = 1.0 / scale
    r, ct, st, cp, sp = _spherical(dx * inv, dy * inv, dz * inv)
    _legendre_into(ct, st, p, ptab)
    _phases(cp, sp, p, eph)
    ir = 1.0 / r
    for c in range(coef.shape[0]):
        val = 0.0
        rn1 = ir
        for n in range(p + 1):
            base = n * (n + 1) // 2
            val += (coef[c, base] * ptab[n, 0]).real * rn1
            for m in range(1, n + 1):
                val += 2.0 * (coef[c, base + m] * ptab[n, m] * eph[m]).real * (
                    sqf[n - m] / sqf[n + m]) * rn1
            rn1 *= ir
        out[c] += val * inv


@njit(cache=True, nogil=True)
def _eval_many(coef, pts, cx, cy, cz, scale, p, sqf, local, value, grad, hess):
    ptab = np.zeros((p + 3, p + 3))
    eph = np.empty(p + 3, dtype=np.complex128)
    for i in range(pts.shape[0]):
        if local:
            _local_derivs_point(coef, pts[i, 0] - cx, pts[i, 1] - cy, pts[i, 2] - cz, scale, p,
                                sqf, ptab, eph, value[i], grad[i], hess[i])
        else:
            _mpole_derivs_point(coef, pts[i, 0] - cx, pts[i, 1] - cy, pts[i, 2] - cz, scale, p,
                                sqf, ptab, eph, value[i], grad[i], hess[i])


# ---------------------------------------------------------------------------
# Translation operators as real matrices on [Re c, Im c]
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _put(T, K, o, i, sgn, c):
    # input coefficient is conj(stored) when sgn < 0
    T[o, i] += c.real
    T[o, K + i] -= sgn * c.imag
    T[K + o, i] += c.imag
    T[K + o, K + i] += sgn * c.real


@njit(cache=True, nogil=True)
def _m2m_matrix(qx, qy, qz, rs, p, sqf):
    """Child multipole (scale ratio rs = s_child/s_parent) about Q -> parent multipole.

    Q is the child center minus the parent center in parent box units.
    """
    K = (p + 1) * (p + 2) // 2
    T = np.zeros((2 * K, 2 * K))
    rho, ct, st, cp, sp = _spherical(qx, qy, qz)
    ptab = np.zeros((p + 1, p + 1))
    _legendre_into(ct, st, p, ptab)
    _normalize(ptab, p, sqf)
    eph = np.empty(p + 1, dtype=np.complex128)
    _phases(cp, sp, p, eph)
    rpow = np.empty(p + 1)
    spow = np.empty(p + 1)
    rpow[0] = 1.0
    spow[0] = 1.0
    for n in range(1, p + 1):
        rpow[n] = rpow[n - 1] * rho
        spow[n] = spow[n - 1] * rs
    for j in range(p + 1):
        for k in range(j + 1):
            o = j * (j + 1) // 2 + k
            for n in range(j + 1):
                nn = j - n
                for m in range(-n, n + 1):
                    mm = k - m
                    if mm > nn or mm < -nn:
                        continue
                    am = abs(m)
                    # Y_n^{-m}(alpha, beta)
                    y = ptab[n, am] * (eph[am] if m < 0 else eph[am].conjugate())
                    mag = sqf[j - k] * sqf[j + k] / (sqf[n - m] * sqf[n + m] * sqf[nn - mm] * sqf[nn + mm])
                    c = _ipow(abs(k) - abs(m) - abs(mm)) * mag * rpow[n] * spow[nn] * y
                    i = nn * (nn + 1) // 2 + abs(mm)
                    _put(T, K, o, i, 1.0 if mm >= 0 else -1.0, c)
    return T


@njit(cache=True, nogil=True)
def _m2l_matrix(qx, qy, qz, rs, p, sqf):
    """Source multipole about Q -> local about origin, excluding the 1/s_target factor.

    Q is the source center minus the target center in target box units and
    rs = s_source/s_target.
    """
    K = (p + 1) * (p + 2) // 2
    T = np.zeros((2 * K, 2 * K))
    rho, ct, st, cp, sp = _spherical(qx, qy, qz)
    P2 = 2 * p
    ptab = np.zeros((P2 + 1, P2 + 1))
    _legendre_into(ct, st, P2, ptab)
    _normalize(ptab, P2, sqf)
    eph = np.empty(P2 + 1, dtype=np.complex128)
    _phases(cp, sp, P2, eph)
    upow = np.empty(p + 1)
    vpow = np.empty(p + 2)
    upow[0] = 1.0
    vpow[0] = 1.0
    for n in range(1, p + 1):
        upow[n] = upow[n - 1] * rs / rho
    for n in range(1, p + 2):
        vpow[n] = vpow[n - 1] / rho
    # H[N, P2 + M] = sqrt((N-|M|)!(N+|M|)!) Y_N^M(alpha, beta)
    H = np.zeros((P2 + 1, 2 * P2 + 1), dtype=np.complex128)
    for N in range(P2 + 1):
        for aM in range(N + 1):
            h = sqf[N - aM] * sqf[N + aM] * ptab[N, aM]
            H[N, P2 + aM] = h * eph[aM]
            H[N, P2 - aM] = h * eph[aM].conjugate()
    inorm = np.empty(K)
    for n in range(p + 1):
        for m in range(n + 1):
            inorm[n * (n + 1) // 2 + m] = 1.0 / (sqf[n - m] * sqf[n + m])
    ip = np.empty(4, dtype=np.complex128)
    for e in range(4):
        ip[e] = _ipow(e)
    for j in range(p + 1):
        for k in range(j + 1):
            o = j * (j + 1) // 2 + k
            fo = inorm[o] * vpow[j + 1]
            for n in range(p + 1):
                fn = fo * upow[n] * (1.0 if n % 2 == 0 else -1.0)
                N = j + n
                base = n * (n + 1) // 2
                for m in range(-n, n + 1):
                    am = abs(m)
                    i = base + am
                    c = ip[(abs(k - m) - k - am) % 4] * (fn * inorm[i]) * H[N, P2 + m - k]
                    if m >= 0:
                        T[o, i] += c.real
                        T[o, K + i] -= c.imag
                        T[K + o, i] += c.imag
                        T[K + o, K + i] += c.real
                    else:
                        T[o, i] += c.real
                        T[o, K + i] += c.imag
                        T[K + o, i] += c.imag
                        T[K + o, K + i] -= c.real
    return T


@njit(cache=True, nogil=True)
def _l2l_matrix(qx, qy, qz, rs, p, sqf):
    """Parent local about Q -> child local about origin.

    Q is the parent center minus the child center in child box units and
    rs = s_parent/s_child.
    """
    K = (p + 1) * (p + 2) // 2
    T = np.zeros((2 * K, 2 * K))
    rho, ct, st, cp, sp = _spherical(qx / rs, qy / rs, qz / rs)
    ptab = np.zeros((p + 1, p + 1))
    _legendre_into(ct, st, p, ptab)
    _normalize(ptab, p, sqf)
    eph = np.empty(p + 1, dtype=np.complex128)
    _phases(cp, sp, p, eph)
    rpow = np.empty(p + 1)
    spow = np.empty(p + 1)
    rpow[0] = 1.0
    spow[0] = 1.0
    for n in range(1, p + 1):
        rpow[n] = rpow[n - 1] * rho
        spow[n] = spow[n - 1] / rs
    for j in range(p + 1):
        for k in range(j + 1):
            o = j * (j + 1) // 2 + k
            for n in range(j, p + 1):
                nn = n - j
                sgn = 1.0 if nn % 2 == 0 else -1.0
                for m in range(-n, n + 1):
                    mm = m - k
                    if mm > nn or mm < -nn:
                        continue
                    amm = abs(mm)
                    y = ptab[nn, amm] * (eph[amm] if mm >= 0 else eph[amm].conjugate())
                    am = abs(m)
                    mag = sqf[n - am] * sqf[n + am] / (sqf[nn - amm] * sqf[nn + amm] * sqf[j - k] * sqf[j + k])
                    c = _ipow(abs(m) - abs(mm) - abs(k)) * (sgn * mag * rpow[nn] * spow[j]) * y
                    i = n * (n + 1) // 2 + am
                    _put(T, K, o, i, 1.0 if m >= 0 else -1.0, c)
    return T


def m2m_matrix(offset, ratio, p):
    """Real M2M operator; ``offset`` = (child - parent center)/s_parent, ratio = s_child/s_parent."""
    return _m2m_matrix(float(offset[0]), float(offset[1]), float(offset[2]), float(ratio), p, _SQRT_FACT)


def m2l_matrix(offset, ratio, p):
    """Real M2L operator; ``offset`` = (source - target center)/s_target, ratio = s_source/s_target.

    The result must still be multiplied by ``1/s_target``.
    """
    return _m2l_matrix(float(offset[0]), float(offset[1]), float(offset[2]), float(ratio), p, _SQRT_FACT)


def l2l_matrix(offset, ratio, p):
    """Real L2L operator; ``offset`` = (parent - child center)/s_child, ratio = s_parent/s_child."""
    return _l2l_matrix(float(offset[0]), float(offset[1]), float(offset[2]), float(ratio), p, _SQRT_FACT)


def to_real(coeffs: np.ndarray) -> np.ndarray:
    return np.concatenate([coeffs.real, coeffs.imag], axis=-1)


def to_complex(x: np.ndarray) -> np.ndarray:
    K = x.shape[-1] // 2
    return x[..., :K] + 1j * x[..., K:]


# ---------------------------------------------------------------------------
# Public expansion objects
# ---------------------------------------------------------------------------

@dataclass
class _Expansion:
    order: int
    coeffs: np.ndarray
    center: np.ndarray
    scale: float

    def __post_init__(self):
        self.order = _check_order(self.order)
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.coeffs = np.asarray(self.coeffs, dtype=np.complex128)
        if self.coeffs.shape != (ncoeffs(self.order),):
            raise ValueError(f"expected {ncoeffs(self.order)} coefficients, got {self.coeffs.shape}")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        self.scale = float(self.scale)

    def coefficient(self, n: int, m: int) -> complex:
        """Unscaled coefficient c_n^m, including negative m via conjugate symmetry."""
        c = self.coeffs[n * (n + 1) // 2 + abs(m)]
        if m < 0:
            c = np.conj(c)
        return complex(c) * self._unscale(n)

    def __add__(self, other):
        if type(other) is not type(self) or other.order != self.order or other.scale != self.scale \
                or not np.array_equal(other.center, self.center):
            return NotImplemented
        return type(self)(self.order, self.coeffs + other.coeffs, self.center, self.scale)


class MultipoleCoeffs(_Expansion):
    """Truncated multipole expansion sum M_n^m Y_n^m / r^(n+1) about ``center``."""

    def _unscale(self, n):
        return self.scale ** n


class LocalCoeffs(_Expansion):
    """Truncated local expansion sum L_n^m Y_n^m r^n about ``center``."""

    def _unscale(self, n):
        return self.scale ** (-n)


@dataclass
class ExpansionDerivatives:
    value: float
    gradient: np.ndarray
    hessian: np.ndarray = field(repr=False)


def _unpack_hessian(h):
    xx, yy, zz, xy, xz, yz = h
    return np.array([[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]])


def _charges_arrays(points, charges):
    pts = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3))
    q = np.asarray(charges, dtype=float).reshape(-1)
    if q.shape[0] != pts.shape[0]:
        raise ValueError("points and charges have different lengths")
    return pts, np.ascontiguousarray(q.reshape(-1, 1))


def p2m(points, charges, center, scale, p) -> MultipoleCoeffs:
    """Multipole expansion of point charges about ``center``."""
    p = _check_order(p)
    pts, q = _charges_arrays(points, charges)
    c = np.asarray(center, dtype=float)
    out = np.zeros((1, ncoeffs(p)), dtype=np.complex128)
    _p2m_accumulate(pts, q, c[0], c[1], c[2], float(scale), p, _SQRT_FACT, out)
    return MultipoleCoeffs(p, out[0], c, scale)


def p2l(points, charges, center, scale, p) -> LocalCoeffs:
    """Local expansion about ``center`` of well-separated point charges."""
    p = _check_order(p)
    pts, q = _charges_arrays(points, charges)
    c = np.asarray(center, dtype=float)
    out = np.zeros((1, ncoeffs(p)), dtype=np.complex128)
    if len(pts):
        _p2l_accumulate(pts, q, c[0], c[1], c[2], float(scale), p, _SQRT_FACT, out)
    return LocalCoeffs(p, out[0], c, scale)


def m2m(child: MultipoleCoeffs, parent_center, parent_scale) -> MultipoleCoeffs:
    pc = np.asarray(parent_center, dtype=float)
    T = m2m_matrix((child.center - pc) / parent_scale, child.scale / parent_scale, child.order)
    out = T @ to_real(child.coeffs)
    return MultipoleCoeffs(child.order, to_complex(out), pc, parent_scale)


def m2l(source: MultipoleCoeffs, target_center, target_scale) -> LocalCoeffs:
    tc = np.asarray(target_center, dtype=float)
    T = m2l_matrix((source.center - tc) / target_scale, source.scale / target_scale, source.order)
    out = (T @ to_real(source.coeffs)) / target_scale
    return LocalCoeffs(source.order, to_complex(out), tc, target_scale)


def l2l(parent: LocalCoeffs, child_center, child_scale) -> LocalCoeffs:
    cc = np.asarray(child_center, dtype=float)
    T = l2l_matrix((parent.center - cc) / child_scale, parent.scale / child_scale, parent.order)
    out = T @ to_real(parent.coeffs)
    return LocalCoeffs(parent.order, to_complex(out), cc, child_scale)


def _derivs(expansion, x, local):
    x = np.asarray(x, dtype=float).reshape(3)
    p = expansion.order
    value = np.zeros((1, 1))
    grad = np.zeros((1, 1, 3))
    hess = np.zeros((1, 1, 6))
    c = expansion.center
    _eval_many(expansion.coeffs.reshape(1, -1), x.reshape(1, 3), c[0], c[1], c[2],
               expansion.scale, p, _SQRT_FACT, local, value, grad, hess)
    return ExpansionDerivatives(float(value[0, 0]), grad[0, 0].copy(), _unpack_hessian(hess[0, 0]))


def eval_multipole_derivatives(M: MultipoleCoeffs, x) -> ExpansionDerivatives:
    """Value, gradient and Hessian of a multipole expansion at ``x``."""
    r = np.linalg.norm(np.asarray(x, dtype=float) - M.center)
    if not r > math.sqrt(3.0) * M.scale:
        raise ValueError("target inside multipole sphere")
    return _derivs(M, x, False)


def eval_local_derivatives(L: LocalCoeffs, x) -> ExpansionDerivatives:
    """Value, gradient and Hessian of a local expansion at ``x``."""
    return _derivs(L, x, True)


def eval_local(L: LocalCoeffs, x) -> float:
    return eval_local_derivatives(L, x).value


def m2t(M: MultipoleCoeffs, x) -> float:
    """Potential of a multipole expansion at a single target."""
    x = np.asarray(x, dtype=float).reshape(3)
    d = x - M.center
    if not np.linalg.norm(d) > 0:
        raise ValueError("target at multipole center")
    out = np.zeros(1)
    p = M.order
    _mpole_value_point(M.coeffs.reshape(1, -1), d[0], d[1], d[2], M.scale, p, _SQRT_FACT,
                       np.zeros((p + 1, p + 1)), np.empty(p + 1, dtype=np.complex128), out)
    return float(out[0])
