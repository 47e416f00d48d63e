"""Rotne-Prager-Yamakawa kernel: pairwise forms, Laplace charge split, far-field recombination."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit


@dataclass(frozen=True)
class RPYParams:
    """Bead radius ``a``, Boltzmann constant ``k_B``, temperature ``T``, viscosity ``eta``."""

    a: float
    k_B: float = 1.0
    T: float = 1.0
    eta: float = 1.0 / (6.0 * math.pi)

    def __post_init__(self):
        for name in ("a", "k_B", "T", "eta"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float, np.floating)) and math.isfinite(v) and v > 0):
                raise ValueError(f"RPY parameter {name} must be a positive finite number, got {v!r}")

    @property
    def kT(self) -> float:
        return self.k_B * self.T

    @property
    def C0(self) -> float:
        return self.kT / (6.0 * math.pi * self.eta * self.a)

    @property
    def C1(self) -> float:
        return self.kT / (8.0 * math.pi * self.eta)

    @property
    def C2(self) -> float:
        return self.kT * self.a ** 2 / (12.0 * math.pi * self.eta)


def rpy_self(F, params: RPYParams) -> np.ndarray:
    return params.C0 * np.asarray(F, dtype=float)


@njit(cache=True, nogil=True)
def _far_block(rx, ry, rz, r, a, C1):
    """Coefficients (f, g) with D = f I + g r r^T for r >= 2a."""
    ir2 = 1.0 / (r * r)
    c = 2.0 * a * a * ir2 / 3.0
    f = C1 / r * (1.0 + c)
    g = C1 / r * (1.0 - 3.0 * c) * ir2
    return f, g


@njit(cache=True, nogil=True)
def _near_block(rx, ry, rz, r, a, C0):
    """Coefficients (f, g) with D = f I + g r r^T for 0 < r < 2a."""
    f = C0 * (1.0 - 9.0 * r / (32.0 * a))
    g = C0 * 3.0 / (32.0 * a * r)
    return f, g


@njit(cache=True, nogil=True)
def _pair_apply(rx, ry, rz, fx, fy, fz, a, C0, C1, out):
    r = math.sqrt(rx * rx + ry * ry + rz * rz)
    if r >= 2.0 * a:
        f, g = _far_block(rx, ry, rz, r, a, C1)
    else:
        f, g = _near_block(rx, ry, rz, r, a, C0)
    # products r_a r_b are formed once so every 3x3 block is exactly symmetric
    xx = rx * rx
    yy = ry * ry
    zz = rz * rz
    xy = rx * ry
    xz = rx * rz
    yz = ry * rz
    out[0] += f * fx + g * (xx * fx + xy * fy + xz * fz)
    out[1] += f * fy + g * (xy * fx + yy * fy + yz * fz)
    out[2] += f * fz + g * (xz * fx + yz * fy + zz * fz)


def _pair_inputs(xi, xj, Fj):
    xi = np.asarray(xi, dtype=float).reshape(3)
    xj = np.asarray(xj, dtype=float).reshape(3)
    F = np.asarray(Fj, dtype=float).reshape(3)
    rvec = xj - xi
    return rvec, float(np.linalg.norm(rvec)), F


def rpy_pair_far(xi, xj, Fj, params: RPYParams) -> np.ndarray:
    """D_ij F_j for well-separated beads (r >= 2a)."""
    rvec, r, F = _pair_inputs(xi, xj, Fj)
    if r == 0.0:
        raise ValueError("coincident beads")
    if r < 2.0 * params.a:
        raise ValueError("far form called in overlap regime (r < 2a)")
    out = np.zeros(3)
    _pair_apply(rvec[0], rvec[1], rvec[2], F[0], F[1], F[2], params.a, params.C0, params.C1, out)
    return out


def rpy_pair_near(xi, xj, Fj, params: RPYParams) -> np.ndarray:
    """D_ij F_j for overlapping beads (0 < r < 2a)."""
    rvec, r, F = _pair_inputs(xi, xj, Fj)
    if r == 0.0:
        raise ValueError("coincident beads")
    if r >= 2.0 * params.a:
        raise ValueError("near form called for non-overlapping beads (r >= 2a)")
    out = np.zeros(3)
    _pair_apply(rvec[0], rvec[1], rvec[2], F[0], F[1], F[2], params.a, params.C0, params.C1, out)
    return out


def rpy_pair(xi, xj, Fj, params: RPYParams) -> np.ndarray:
    """D_ij F_j, branch chosen by r < 2a."""
    rvec, r, F = _pair_inputs(xi, xj, Fj)
    if r == 0.0:
        raise ValueError("coincident beads")
    out = np.zeros(3)
    _pair_apply(rvec[0], rvec[1], rvec[2], F[0], F[1], F[2], params.a, params.C0, params.C1, out)
    return out


class CoincidentBeadsError(ValueError):
    def __init__(self, i, j):
        super().__init__(f"coincident beads {i} and {j}")
        self.pair = (int(i), int(j))


@njit(cache=True, nogil=True)
def _direct_rows(targets, pos, F, a, C0, C1, out):
    """Full O(N^2) mobility product for the given target rows; returns (i, j) of a
    coincident pair or (-1, -1)."""
    n = pos.shape[0]
    for t in range(targets.shape[0]):
        i = targets[t]
        acc = np.zeros(3)
        acc[0] = C0 * F[i, 0]
        acc[1] = C0 * F[i, 1]
        acc[2] = C0 * F[i, 2]
        xi = pos[i, 0]
        yi = pos[i, 1]
        zi = pos[i, 2]
        for j in range(n):
            if j == i:
                continue
            rx = pos[j, 0] - xi
            ry = pos[j, 1] - yi
            rz = pos[j, 2] - zi
            if rx == 0.0 and ry == 0.0 and rz == 0.0:
                return i, j
            _pair_apply(rx, ry, rz, F[j, 0], F[j, 1], F[j, 2], a, C0, C1, acc)
        out[t, 0] = acc[0]
        out[t, 1] = acc[1]
        out[t, 2] = acc[2]
    return -1, -1


def direct_rpy_matvec(positions, forces, params: RPYParams, targets=None, n_threads: int = 1) -> np.ndarray:
    """Exact D F by pairwise summation; ``targets`` restricts the output rows."""
    pos = np.ascontiguousarray(positions, dtype=float)
    F = np.ascontiguousarray(forces, dtype=float)
    if pos.shape != F.shape or pos.ndim != 2 or pos.shape[1] != 3:
        raise ValueError("positions and forces must both have shape (N, 3)")
    rows = np.arange(len(pos)) if targets is None else np.asarray(targets, dtype=np.int64).reshape(-1)
    out = np.empty((len(rows), 3))
    chunks = np.array_split(np.arange(len(rows)), max(1, min(int(n_threads), len(rows))))

    def work(chunk):
        res = np.empty((len(chunk), 3))
        bad = _direct_rows(rows[chunk], pos, F, params.a, params.C0, params.C1, res)
        out[chunk] = res
        return bad

    if len(chunks) == 1:
        bad = [work(chunks[0])]
    else:
        with ThreadPoolExecutor(len(chunks)) as pool:
            bad = list(pool.map(work, chunks))
    for i, j in bad:
        if i >= 0:
            raise CoincidentBeadsError(i, j)
    return out


def assemble_charges(positions, forces) -> np.ndarray:
    """Charges (F^1, F^2, F^3, F . y) of the four Laplace potentials, shape (N, 4)."""
    pos = np.asarray(positions, dtype=float).reshape(-1, 3)
    F = np.asarray(forces, dtype=float).reshape(-1, 3)
    q = np.empty((len(pos), 4))
    q[:, :3] = F
    q[:, 3] = F[:, 0] * pos[:, 0] + F[:, 1] * pos[:, 1] + F[:, 2] * pos[:, 2]
    return q


@dataclass
class FarFieldPieces:
    """Laplace quantities at one or more targets.

    values: (..., 3) potentials of L1..L3; gradients: (..., 4, 3) of L1..L4;
    hessians: (..., 3, 3, 3) of L1..L3.
    """

    values: np.ndarray
    gradients: np.ndarray
    hessians: np.ndarray

    def __add__(self, other):
        return FarFieldPieces(self.values + other.values, self.gradients + other.gradients,
                              self.hessians + other.hessians)

    def __mul__(self, alpha):
        return FarFieldPieces(alpha * self.values, alpha * self.gradients, alpha * self.hessians)

    __rmul__ = __mul__

    @classmethod
    def zeros(cls, shape=()):
        shape = tuple(shape)
        return cls(np.zeros(shape + (3,)), np.zeros(shape + (4, 3)), np.zeros(shape + (3, 3, 3)))


def combine_far_field(x, pieces: FarFieldPieces, params: RPYParams) -> np.ndarray:
    """Far-field velocity from the four Laplace potentials.

    C1 (L1, L2, L3) - C1 (x dL1 + y dL2 + z dL3) + C1 dL4 - C2 d(dxL1 + dyL2 + dzL3).
    The last term carries a minus sign: the Hessian of 1/r is (3 e e^T - I)/r^3
    while the a^2 correction of the pair tensor is proportional to (I - 3 e e^T).
    """
    x = np.asarray(x, dtype=float)
    grads = pieces.gradients
    stokes = pieces.values - np.einsum("...k,...kd->...d", x, grads[..., :3, :]) + grads[..., 3, :]
    # d/dx_d of sum_k d_k L_k = sum_k H_k[k, d]
    grad_lc = np.einsum("...kkd->...d", pieces.hessians)
    return params.C1 * stokes - params.C2 * grad_lc


@njit(cache=True, nogil=True)
def _combine_rows(x, value, grad, hess, C1, C2, out):
    """Row-wise combine_far_field on packed arrays (value (n,4), grad (n,4,3), hess (n,4,6))."""
    for i in range(x.shape[0]):
        for d in range(3):
            s = value[i, d] - (x[i, 0] * grad[i, 0, d] + x[i, 1] * grad[i, 1, d]
                               + x[i, 2] * grad[i, 2, d]) + grad[i, 3, d]
            out[i, d] += C1 * s
        # packed (xx, yy, zz, xy, xz, yz); d/dx_d sum_k H_k[k, d]
        gx = hess[i, 0, 0] + hess[i, 1, 3] + hess[i, 2, 4]
        gy = hess[i, 0, 3] + hess[i, 1, 1] + hess[i, 2, 5]
        gz = hess[i, 0, 4] + hess[i, 1, 5] + hess[i, 2, 2]
        out[i, 0] -= C2 * gx
        out[i, 1] -= C2 * gy
        out[i, 2] -= C2 * gz


def laplace_pieces_exact(x, y, F) -> FarFieldPieces:
    """Pieces for a single source at ``y`` with force ``F``, from analytic derivatives of 1/|x-y|."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    F = np.asarray(F, dtype=float)
    d = x - y
    r = np.linalg.norm(d)
    q = np.append(F, F @ y)
    g1 = -d / r ** 3
    h1 = (3.0 * np.outer(d, d) / r ** 2 - np.eye(3)) / r ** 3
    return FarFieldPieces(F / r, q[:, None] * g1, F[:, None, None] * h1)
