"""Adaptive FMM evaluation of the RPY mobility product D F.

The far field is carried by four Laplace potentials sharing one tree; the
near field (U lists) is summed directly with the exact RPY pair tensor.

Parallelism: leaf-level kernels (P2M, P2L, target evaluation, near field) run
in chunks on a thread pool; every chunk writes a disjoint set of rows, and
every translation accumulates into its destination in a fixed order, so the
result does not depend on the thread count.  Translation GEMMs are split into
fixed row blocks on the same pool while BLAS itself stays single-threaded,
because its internal partitioning changes the rounding with the thread count.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit
from threadpoolctl import threadpool_limits

from . import laplace
from .laplace import _SQRT_FACT, ncoeffs, to_complex, to_real
from .rpy import CoincidentBeadsError, RPYParams, _combine_rows, _pair_apply, assemble_charges
from .tree import InteractionLists, Tree, build_tree, compute_interaction_lists

log = logging.getLogger(__name__)

DIGITS_ORDER = {3: 5, 6: 17, 9: 25}
DIGITS_THRESHOLD = {3: 80, 6: 100, 9: 120}
N_POTENTIALS = 4


@dataclass(frozen=True)
class AccuracySetting:
    digits: int
    order: int
    threshold: int

    @classmethod
    def from_digits(cls, digits: int, order: int | None = None, threshold: int | None = None):
        if digits not in DIGITS_ORDER:
            raise ValueError(f"accuracy digits must be one of {sorted(DIGITS_ORDER)}, got {digits!r}")
        return cls(digits, order or DIGITS_ORDER[digits], threshold or DIGITS_THRESHOLD[digits])


@dataclass
class EvaluationReport:
    n: int
    order: int
    threshold: int
    threads: int
    n_nodes: int = 0
    n_leaves: int = 0
    depth: int = 0
    times: dict = field(default_factory=dict)

    @property
    def total_time(self) -> float:
        return sum(self.times.values())

    def as_dict(self) -> dict:
        d = asdict(self)
        times = d.pop("times")
        d.update({f"t_{k}": v for k, v in times.items()})
        d["t_total"] = self.total_time
        return d


class LeafSizeError(ValueError):
    """Raised when a bead pair closer than 2a could be routed through an expansion."""


# ---------------------------------------------------------------------------
# Numba kernels over leaf chunks
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _p2m_leaves(leaves, start, count, pts, q, center, half, p, sqf, out):
    for t in range(leaves.shape[0]):
        b = leaves[t]
        s = start[b]
        e = s + count[b]
        laplace._p2m_accumulate(pts[s:e], q[s:e], center[b, 0], center[b, 1], center[b, 2],
                                half[b], p, sqf, out[t])


@njit(cache=True, nogil=True)
def _p2l_targets(targets, xptr, xidx, start, count, pts, q, center, half, p, sqf, out):
    for t in range(targets.shape[0]):
        b = targets[t]
        for k in range(xptr[b], xptr[b + 1]):
            a = xidx[k]
            s = start[a]
            e = s + count[a]
            laplace._p2l_accumulate(pts[s:e], q[s:e], center[b, 0], center[b, 1], center[b, 2],
                                    half[b], p, sqf, out[t])


@njit(cache=True, nogil=True)
def _far_leaves(leaves, start, count, pts, center, half, Lc, Mc, wptr, widx, p, sqf, C1, C2, out):
    ptab = np.zeros((p + 3, p + 3))
    eph = np.empty(p + 3, dtype=np.complex128)
    nq = Lc.shape[1]
    for t in range(leaves.shape[0]):
        b = leaves[t]
        s = start[b]
        e = s + count[b]
        nb = e - s
        value = np.zeros((nb, nq))
        grad = np.zeros((nb, nq, 3))
        hess = np.zeros((nb, nq, 6))
        for i in range(nb):
            x = pts[s + i]
            laplace._local_derivs_point(Lc[b], x[0] - center[b, 0], x[1] - center[b, 1],
                                        x[2] - center[b, 2], half[b], p, sqf, ptab, eph,
                                        value[i], grad[i], hess[i])
            for k in range(wptr[b], wptr[b + 1]):
                w = widx[k]
                laplace._mpole_derivs_point(Mc[w], x[0] - center[w, 0], x[1] - center[w, 1],
                                            x[2] - center[w, 2], half[w], p, sqf, ptab, eph,
                                            value[i], grad[i], hess[i])
        _combine_rows(pts[s:e], value, grad, hess, C1, C2, out[s:e])


@njit(cache=True, nogil=True)
def _near_leaves(leaves, start, count, pts, F, uptr, uidx, a, C0, C1, out):
    """Self term plus direct sums over U lists; returns a coincident pair or (-1, -1)."""
    acc = np.zeros(3)
    for t in range(leaves.shape[0]):
        b = leaves[t]
        for i in range(start[b], start[b] + count[b]):
            acc[0] = C0 * F[i, 0]
            acc[1] = C0 * F[i, 1]
            acc[2] = C0 * F[i, 2]
            xi = pts[i, 0]
            yi = pts[i, 1]
            zi = pts[i, 2]
            for k in range(uptr[b], uptr[b + 1]):
                c = uidx[k]
                for j in range(start[c], start[c] + count[c]):
                    if j == i:
                        continue
                    rx = pts[j, 0] - xi
                    ry = pts[j, 1] - yi
                    rz = pts[j, 2] - zi
                    if rx == 0.0 and ry == 0.0 and rz == 0.0:
                        return i, j
                    _pair_apply(rx, ry, rz, F[j, 0], F[j, 1], F[j, 2], a, C0, C1, acc)
            out[i, 0] += acc[0]
            out[i, 1] += acc[1]
            out[i, 2] += acc[2]
    return -1, -1


# ---------------------------------------------------------------------------
# Translation operator caches
# ---------------------------------------------------------------------------

_CACHE_BYTES = 128 * 2 ** 20
_op_cache: dict = {}


def _cached_operator(kind, key, p, build):
    nbytes = (2 * ncoeffs(p)) ** 2 * 8
    ck = (kind, key, p)
    T = _op_cache.get(ck)
    if T is None:
        T = np.ascontiguousarray(build().T)
        if nbytes * 316 <= _CACHE_BYTES or kind != "m2l":
            _op_cache[ck] = T
    return T


def _octant(tree: Tree):
    """Octant index (bit order x, y, z) of every non-root node within its parent."""
    oc = np.zeros(tree.n_nodes, dtype=np.int64)
    d = tree.center[1:] > tree.center[tree.parent[1:]]
    oc[1:] = d[:, 0] + 2 * d[:, 1] + 4 * d[:, 2]
    return oc


def _octant_sign(o):
    return np.array([1.0 if (o >> b) & 1 else -1.0 for b in range(3)])


# Row block for translation GEMMs.  The split is fixed, not derived from the
# thread count, so results are bit-identical for any number of threads.
_ROW_BLOCK = 256


def _matmul(A, T, runner):
    n = A.shape[0]
    if n <= _ROW_BLOCK:
        return A @ T
    out = np.empty((n, T.shape[1]))

    def work(i):
        np.matmul(A[i:i + _ROW_BLOCK], T, out=out[i:i + _ROW_BLOCK])

    runner.map(work, range(0, n, _ROW_BLOCK))
    return out


# ---------------------------------------------------------------------------
# Passes
# ---------------------------------------------------------------------------

class _Runner:
    def __init__(self, n_threads):
        self.n_threads = max(1, int(n_threads))
        self._pool = ThreadPoolExecutor(self.n_threads) if self.n_threads > 1 else None

    def map(self, fn, items):
        items = list(items)
        if self._pool is None or len(items) < 2:
            return [fn(i) for i in items]
        return list(self._pool.map(fn, items))

    def map_chunks(self, fn, items, weights=None):
        """Apply fn to contiguous chunks of ``items``; fn's per-item results must not depend on the chunking."""
        if len(items) == 0:
            return []
        nchunk = min(len(items), 8 * self.n_threads) if self._pool else 1
        chunks = np.array_split(items, nchunk)
        if self._pool is None:
            return [fn(c) for c in chunks]
        return list(self._pool.map(fn, chunks))

    def close(self):
        if self._pool:
            self._pool.shutdown()


_SERIAL = _Runner(1)


def check_leaf_size(tree: Tree, lists: InteractionLists, params: RPYParams) -> None:
    """Refuse configurations where an overlapping pair could be treated as far field."""
    gaps = []
    for lst in (lists.V, lists.W, lists.X):
        owner, member = lst.pairs()
        if len(owner):
            sep = np.max(np.abs(tree.center[owner] - tree.center[member]), axis=1) \
                - tree.half[owner] - tree.half[member]
            gaps.append(sep.min())
    if gaps and 2.0 * params.a > min(gaps) * (1.0 + 1e-9):
        raise LeafSizeError(
            f"bead diameter {2 * params.a:.6g} exceeds the smallest far-field box gap {min(gaps):.6g}; "
            "an overlapping pair could be treated as far field (reduce the radius or raise the threshold)")


def upward_pass(tree: Tree, charges: np.ndarray, p: int, runner: _Runner | None = None):
    """Multipoles (real layout, shape (n_nodes, 4, 2K)) for every node."""
    runner = runner or _SERIAL
    K = ncoeffs(p)
    nq = charges.shape[1]
    M = np.zeros((tree.n_nodes, nq, 2 * K))
    leaves = tree.leaves

    def work(chunk):
        out = np.zeros((len(chunk), nq, K), dtype=np.complex128)
        _p2m_leaves(chunk, tree.start, tree.count, tree.points, charges, tree.center,
                    tree.half, p, _SQRT_FACT, out)
        M[chunk] = to_real(out)

    runner.map_chunks(work, leaves)
    octant = _octant(tree)
    for level, ids in reversed(tree.level_slices()):
        if level == 0:
            continue
        for o in range(8):
            kids = ids[octant[ids] == o]
            if len(kids) == 0:
                continue
            T = _cached_operator("m2m", o, p, lambda: laplace.m2m_matrix(0.5 * _octant_sign(o), 0.5, p))
            M[tree.parent[kids]] += _matmul(M[kids].reshape(-1, 2 * K), T, runner).reshape(len(kids), nq, 2 * K)
    return M


def _v_offsets(tree, owner, member):
    d = (tree.center[member] - tree.center[owner]) / tree.half[owner][:, None]
    return np.rint(d).astype(np.int64)


def interaction_pass(tree: Tree, lists: InteractionLists, M: np.ndarray, charges: np.ndarray, p: int,
                     runner: _Runner | None = None):
    """Locals (real layout) holding every V-list (M2L) and X-list (P2L) contribution."""
    runner = runner or _SERIAL
    K = ncoeffs(p)
    nq = M.shape[1]
    L = np.zeros_like(M)
    owner, member = lists.V.pairs()
    if len(owner):
        off = _v_offsets(tree, owner, member)
        key = (off[:, 0] + 8) * 289 + (off[:, 1] + 8) * 17 + (off[:, 2] + 8)
        order = np.argsort(key, kind="stable")
        bounds = np.flatnonzero(np.diff(key[order])) + 1
        groups = np.split(order, bounds)

        def translate(grp):
            o = tuple(int(v) for v in off[grp[0]])
            T = _cached_operator("m2l", o, p, lambda: laplace.m2l_matrix(np.array(o, float), 1.0, p))
            Y = _matmul(M[member[grp]].reshape(-1, 2 * K), T, _SERIAL).reshape(len(grp), nq, 2 * K)
            return Y / tree.half[owner[grp]][:, None, None]

        # groups are translated concurrently in batches and accumulated in a fixed order;
        # one source per (target, offset), so targets within a group are unique
        step = 4 * runner.n_threads
        for b in range(0, len(groups), step):
            batch = groups[b:b + step]
            for grp, Y in zip(batch, runner.map(translate, batch)):
                L[owner[grp]] += Y
    xt = np.flatnonzero(lists.X.sizes())
    if len(xt):
        def work(chunk):
            out = np.zeros((len(chunk), nq, K), dtype=np.complex128)
            _p2l_targets(chunk, lists.X.ptr, lists.X.idx, tree.start, tree.count, tree.points,
                         charges, tree.center, tree.half, p, _SQRT_FACT, out)
            L[chunk] += to_real(out)

        runner.map_chunks(work, xt)
    return L


def downward_pass(tree: Tree, L: np.ndarray, p: int, runner: _Runner | None = None) -> np.ndarray:
    """Propagate locals from parents to children (in place)."""
    runner = runner or _SERIAL
    K = ncoeffs(p)
    nq = L.shape[1]
    octant = _octant(tree)
    for level, ids in tree.level_slices():
        if level == 0:
            continue
        for o in range(8):
            kids = ids[octant[ids] == o]
            if len(kids) == 0:
                continue
            T = _cached_operator("l2l", o, p, lambda: laplace.l2l_matrix(-_octant_sign(o), 2.0, p))
            L[kids] += _matmul(L[tree.parent[kids]].reshape(-1, 2 * K), T, runner).reshape(len(kids), nq, 2 * K)
    return L


def leaf_evaluation(tree: Tree, lists: InteractionLists, M, L, params: RPYParams, p: int,
                    runner: _Runner | None = None) -> np.ndarray:
    """Far-field velocities (tree order) from leaf locals and W-list multipoles."""
    runner = runner or _SERIAL
    out = np.zeros((len(tree.points), 3))
    Lc = np.ascontiguousarray(to_complex(L))
    Mc = np.ascontiguousarray(to_complex(M))

    def work(chunk):
        _far_leaves(chunk, tree.start, tree.count, tree.points, tree.center, tree.half, Lc, Mc,
                    lists.W.ptr, lists.W.idx, p, _SQRT_FACT, params.C1, params.C2, out)

    runner.map_chunks(work, tree.leaves)
    return out


def near_field(tree: Tree, lists: InteractionLists, forces_tree, params: RPYParams,
               out: np.ndarray, runner: _Runner | None = None) -> np.ndarray:
    """Add self mobility and U-list direct RPY sums to ``out`` (tree order)."""
    runner = runner or _SERIAL

    def work(chunk):
        return _near_leaves(chunk, tree.start, tree.count, tree.points, forces_tree,
                            lists.U.ptr, lists.U.idx, params.a, params.C0, params.C1, out)

    for i, j in runner.map_chunks(work, tree.leaves):
        if i >= 0:
            raise CoincidentBeadsError(tree.perm[i], tree.perm[j])
    return out


def evaluate_prepared(tree: Tree, lists: InteractionLists, forces, params: RPYParams, order: int,
                      n_threads: int = 1, report: EvaluationReport | None = None) -> np.ndarray:
    """D F for forces given in input order, on an already built tree."""
    F = np.asarray(forces, dtype=float)
    if F.shape != tree.points.shape:
        raise ValueError(f"forces must have shape {tree.points.shape}, got {F.shape}")
    if not np.all(np.isfinite(F)):
        raise ValueError("forces must be finite")
    laplace._check_order(order)
    check_leaf_size(tree, lists, params)
    times = report.times if report is not None else {}
    runner = _Runner(n_threads)
    try:
        with threadpool_limits(limits=1):
            Ft = np.ascontiguousarray(F[tree.perm])
            q = np.ascontiguousarray(assemble_charges(tree.points, Ft))
            t = time.perf_counter()
            M = upward_pass(tree, q, order, runner)
            times["upward"] = time.perf_counter() - t
            t = time.perf_counter()
            L = interaction_pass(tree, lists, M, q, order, runner)
            times["interaction"] = time.perf_counter() - t
            t = time.perf_counter()
            downward_pass(tree, L, order, runner)
            out = leaf_evaluation(tree, lists, M, L, params, order, runner)
            times["downward"] = time.perf_counter() - t
            t = time.perf_counter()
            near_field(tree, lists, Ft, params, out, runner)
            times["near_field"] = time.perf_counter() - t
    finally:
        runner.close()
    result = np.empty_like(out)
    result[tree.perm] = out
    return result


def evaluate(positions, forces, params: RPYParams, accuracy: AccuracySetting | int = 3,
             threshold: int | None = None, n_threads: int = 1):
    """Mobility product D F by adaptive FMM; returns (velocities, EvaluationReport)."""
    if not isinstance(accuracy, AccuracySetting):
        accuracy = AccuracySetting.from_digits(accuracy)
    threshold = threshold or accuracy.threshold
    t = time.perf_counter()
    tree = build_tree(positions, threshold)
    lists = compute_interaction_lists(tree)
    t_tree = time.perf_counter() - t
    report = EvaluationReport(n=len(tree.points), order=accuracy.order, threshold=threshold,
                              threads=max(1, int(n_threads)), n_nodes=tree.n_nodes,
                              n_leaves=len(tree.leaves), depth=tree.depth, times={"tree": t_tree})
    result = evaluate_prepared(tree, lists, forces, params, accuracy.order, n_threads, report)
    log.debug("evaluate: %s", report)
    return result, report


def default_radius(n: int, threshold: int) -> float:
    """Bead radius with 2a = 0.1 (N/threshold)^(-1/3)."""
    return 0.05 * (max(n, 1) / threshold) ** (-1.0 / 3.0)


def relative_error(approx, exact) -> float:
    approx = np.asarray(approx, dtype=float)
    exact = np.asarray(exact, dtype=float)
    den = float(np.sum(exact ** 2))
    num = float(np.sum((approx - exact) ** 2))
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return math.sqrt(num / den)
