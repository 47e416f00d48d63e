"""Adaptive octree over bead positions and the U/V/W/X interaction lists."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from numba import njit

MAX_DEPTH = 64
_MARGIN = 1e-12

# octant bit order: bit0 = x, bit1 = y, bit2 = z (set when coordinate >= center)
_OCTANT_SIGNS = np.array([[(o >> b) & 1 for b in range(3)] for o in range(8)], dtype=float) * 2 - 1


@dataclass(frozen=True)
class BoundingCube:
    center: np.ndarray
    half_width: float

    def contains(self, points) -> np.ndarray:
        d = np.abs(np.asarray(points, dtype=float) - self.center)
        return np.all(d <= self.half_width, axis=-1)


def _as_points(beads) -> np.ndarray:
    pts = np.asarray(beads, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"positions must have shape (N, 3), got {pts.shape}")
    if len(pts) == 0:
        raise ValueError("no beads")
    if not np.all(np.isfinite(pts)):
        raise ValueError("invalid position: non-finite coordinate")
    return pts


def compute_bounding_cube(beads) -> BoundingCube:
    pts = _as_points(beads)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    center = 0.5 * (lo + hi)
    half = 0.5 * float(np.max(hi - lo))
    if half == 0.0:
        half = _MARGIN * max(1.0, float(np.max(np.abs(center))))
    return BoundingCube(center, half * (1.0 + _MARGIN))


@dataclass(frozen=True, eq=False)
class Tree:
    """Adaptive octree in breadth-first node order (parents precede children).

    ``points`` are the bead positions permuted into tree order; position
    ``k`` of the tree holds input bead ``perm[k]``.  Node ``i`` owns the
    contiguous range ``start[i]:start[i] + count[i]``.
    """

    cube: BoundingCube
    threshold: int
    points: np.ndarray
    perm: np.ndarray
    center: np.ndarray
    half: np.ndarray
    level: np.ndarray
    parent: np.ndarray
    children: np.ndarray
    start: np.ndarray
    count: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.half)

    @property
    def is_leaf(self) -> np.ndarray:
        return np.all(self.children < 0, axis=1)

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.is_leaf)

    @property
    def depth(self) -> int:
        return int(self.level.max())

    def leaf_of_bead(self) -> np.ndarray:
        """Leaf index owning each tree-ordered bead."""
        out = np.empty(len(self.points), dtype=np.int64)
        for leaf in self.leaves:
            out[self.start[leaf]:self.start[leaf] + self.count[leaf]] = leaf
        return out

    def level_slices(self):
        """(level, node ids) pairs from the root downward."""
        bounds = np.flatnonzero(np.diff(self.level)) + 1
        return [(int(self.level[ids[0]]), ids)
                for ids in np.split(np.arange(self.n_nodes), bounds)]


def build_tree(beads, threshold: int) -> Tree:
    """Adaptive octree whose leaves hold at most ``threshold`` beads."""
    if int(threshold) != threshold or threshold < 1:
        raise ValueError(f"threshold must be a positive integer, got {threshold!r}")
    threshold = int(threshold)
    pts = _as_points(beads)
    cube = compute_bounding_cube(pts)
    n = len(pts)

    perm = np.arange(n)
    centers = [cube.center.reshape(1, 3)]
    halves = [np.array([cube.half_width])]
    levels = [np.zeros(1, dtype=np.int64)]
    parents = [np.array([-1])]
    starts = [np.array([0])]
    counts = [np.array([n])]
    child_rows = []  # (parent ids, octant, child ids) per level

    n_total = 1
    cur_ids = np.array([0])
    cur_c, cur_h, cur_s, cur_n = centers[0], halves[0], starts[0], counts[0]
    level = 0
    while True:
        split = cur_n > threshold
        if not split.any():
            break
        if level >= MAX_DEPTH:
            raise ValueError("coincident points exceed depth limit")
        sid = cur_ids[split]
        sc, sh, ss, sn = cur_c[split], cur_h[split], cur_s[split], cur_n[split]
        # beads of all splitting nodes, in tree order
        owner = np.repeat(np.arange(len(sid)), sn)
        pos = np.repeat(ss - (np.cumsum(sn) - sn), sn) + np.arange(sn.sum())
        p = pts[perm[pos]]
        ge = p >= sc[owner]
        octant = ge[:, 0] + 2 * ge[:, 1] + 4 * ge[:, 2]
        order = np.argsort(owner * 8 + octant, kind="stable")
        perm[pos] = perm[pos[order]]
        occ = np.bincount(owner * 8 + octant, minlength=8 * len(sid)).reshape(-1, 8)
        par_local, octs = np.nonzero(occ)
        nchild = len(par_local)
        cnt = occ[par_local, octs]
        # children of one parent are consecutive in (parent, octant) order
        within = np.cumsum(occ, axis=1) - occ
        cstart = ss[par_local] + within[par_local, octs]
        ch = sh[par_local] * 0.5
        cc = sc[par_local] + _OCTANT_SIGNS[octs] * ch[:, None]
        cid = n_total + np.arange(nchild)
        child_rows.append((sid[par_local], octs, cid))
        centers.append(cc)
        halves.append(ch)
        levels.append(np.full(nchild, level + 1, dtype=np.int64))
        parents.append(sid[par_local])
        starts.append(cstart)
        counts.append(cnt)
        n_total += nchild
        cur_ids, cur_c, cur_h, cur_s, cur_n = cid, cc, ch, cstart, cnt
        level += 1

    children = np.full((n_total, 8), -1, dtype=np.int64)
    for par, octs, cid in child_rows:
        children[par, octs] = cid
    return Tree(
        cube=cube,
        threshold=threshold,
        points=np.ascontiguousarray(pts[perm]),
        perm=perm,
        center=np.ascontiguousarray(np.concatenate(centers)),
        half=np.concatenate(halves),
        level=np.concatenate(levels),
        parent=np.concatenate(parents).astype(np.int64),
        children=children,
        start=np.concatenate(starts).astype(np.int64),
        count=np.concatenate(counts).astype(np.int64),
    )


# ---------------------------------------------------------------------------
# Interaction lists
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CSRList:
    ptr: np.ndarray
    idx: np.ndarray

    def __getitem__(self, node):
        return self.idx[self.ptr[node]:self.ptr[node + 1]]

    def __len__(self):
        return len(self.ptr) - 1

    def sizes(self):
        return np.diff(self.ptr)

    def pairs(self):
        """(owner, member) arrays for every entry."""
        owner = np.repeat(np.arange(len(self)), self.sizes())
        return owner, self.idx

    @classmethod
    def from_pairs(cls, n, owner, member):
        order = np.lexsort((member, owner))
        owner, member = owner[order], member[order]
        ptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(ptr, owner + 1, 1)
        return cls(np.cumsum(ptr), member.astype(np.int64))


@dataclass(frozen=True, eq=False)
class InteractionLists:
    """Per-node adaptive FMM lists.

    U: leaves adjacent to a leaf (itself included), handled by direct sums.
    V: same-level well-separated boxes, handled by M2L.
    W: finer boxes near a leaf whose multipoles are evaluated at its targets.
    X: coarser leaves whose beads are expanded directly into a local (dual of W).
    """

    colleagues: CSRList
    U: CSRList
    V: CSRList
    W: CSRList
    X: CSRList


@njit(cache=True)
def _adjacent(center, half, a, b):
    tol = min(half[a], half[b])
    lim = half[a] + half[b] + tol
    for d in range(3):
        if abs(center[a, d] - center[b, d]) > lim:
            return False
    return True


@njit(cache=True)
def _colleagues_and_v(center, half, parent, children):
    nn = len(half)
    coll = np.full((nn, 27), -1, dtype=np.int64)
    ncoll = np.zeros(nn, dtype=np.int64)
    coll[0, 0] = 0
    ncoll[0] = 1
    vcount = np.zeros(nn, dtype=np.int64)
    vbuf = np.full((nn, 189), -1, dtype=np.int64)
    for b in range(1, nn):
        par = parent[b]
        for ci in range(ncoll[par]):
            c = coll[par, ci]
            for o in range(8):
                d = children[c, o]
                if d < 0:
                    continue
                if _adjacent(center, half, b, d):
                    coll[b, ncoll[b]] = d
                    ncoll[b] += 1
                else:
                    vbuf[b, vcount[b]] = d
                    vcount[b] += 1
    return coll, ncoll, vbuf, vcount


@njit(cache=True)
def _u_fine_and_w(center, half, children, is_leaf, coll, ncoll, fill, uptr, uidx, wptr, widx):
    """Count (fill=False) or write (fill=True) same-or-finer U entries and W entries."""
    nn = len(half)
    ucnt = np.zeros(nn, dtype=np.int64)
    wcnt = np.zeros(nn, dtype=np.int64)
    stack = np.empty(64 * 8 + 32, dtype=np.int64)
    for b in range(nn):
        if not is_leaf[b]:
            continue
        if fill:
            uidx[uptr[b]] = b
        ucnt[b] = 1
        for ci in range(ncoll[b]):
            c = coll[b, ci]
            if c == b:
                continue
            if is_leaf[c]:
                if fill:
                    uidx[uptr[b] + ucnt[b]] = c
                ucnt[b] += 1
                continue
            top = 0
            for o in range(8):
                if children[c, o] >= 0:
                    stack[top] = children[c, o]
                    top += 1
            while top > 0:
                top -= 1
                d = stack[top]
                if _adjacent(center, half, b, d):
                    if is_leaf[d]:
                        if fill:
                            uidx[uptr[b] + ucnt[b]] = d
                        ucnt[b] += 1
                    else:
                        for o in range(8):
                            if children[d, o] >= 0:
                                stack[top] = children[d, o]
                                top += 1
                else:
                    if fill:
                        widx[wptr[b] + wcnt[b]] = d
                    wcnt[b] += 1
    return ucnt, wcnt


def _csr_from_counts(counts):
    ptr = np.zeros(len(counts) + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    return ptr


def compute_interaction_lists(tree: Tree) -> InteractionLists:
    nn = tree.n_nodes
    coll, ncoll, vbuf, vcount = _colleagues_and_v(tree.center, tree.half, tree.parent, tree.children)
    colleagues = CSRList(_csr_from_counts(ncoll), coll[coll >= 0])
    V = CSRList(_csr_from_counts(vcount), vbuf[vbuf >= 0])
    is_leaf = tree.is_leaf
    dummy = np.zeros(1, dtype=np.int64)
    ucnt, wcnt = _u_fine_and_w(tree.center, tree.half, tree.children, is_leaf, coll, ncoll,
                               False, dummy, dummy, dummy, dummy)
    uptr, wptr = _csr_from_counts(ucnt), _csr_from_counts(wcnt)
    uidx = np.empty(uptr[-1], dtype=np.int64)
    widx = np.empty(wptr[-1], dtype=np.int64)
    _u_fine_and_w(tree.center, tree.half, tree.children, is_leaf, coll, ncoll,
                  True, uptr, uidx, wptr, widx)
    u_owner = np.repeat(np.arange(nn), ucnt)
    # add coarser adjacent leaves by symmetry
    coarse = tree.level[uidx] > tree.level[u_owner]
    U = CSRList.from_pairs(nn, np.concatenate([u_owner, uidx[coarse]]),
                           np.concatenate([uidx, u_owner[coarse]]))
    w_owner = np.repeat(np.arange(nn), wcnt)
    W = CSRList(wptr, widx)
    X = CSRList.from_pairs(nn, widx, w_owner)
    return InteractionLists(colleagues, U, V, W, X)


# ---------------------------------------------------------------------------
# Audits
# ---------------------------------------------------------------------------

def _list_matrix(lst: CSRList, n):
    owner, member = lst.pairs()
    return sp.csr_matrix((np.ones(len(owner)), (owner, member)), shape=(n, n))


def leaf_pair_pathways(tree: Tree, lists: InteractionLists) -> np.ndarray:
    """Number of list pathways connecting each (target leaf, source leaf) pair.

    Entry [a, b] counts: b in U(a); ancestor pairs (A, B) of (a, b) with
    B in V(A); ancestors B of b with B in W(a); ancestors A of a with b in X(A).
    A correct partition has every entry equal to 1.
    """
    nn = tree.n_nodes
    leaves = tree.leaves
    # desc[node, j] = 1 when leaf j lies under node (or is node)
    rows, cols = [], []
    for j, leaf in enumerate(leaves):
        node = leaf
        while node >= 0:
            rows.append(node)
            cols.append(j)
            node = tree.parent[node]
    desc = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(nn, len(leaves)))
    U = _list_matrix(lists.U, nn)[leaves][:, leaves]
    V = desc.T @ _list_matrix(lists.V, nn) @ desc
    W = _list_matrix(lists.W, nn)[leaves] @ desc
    X = desc.T @ _list_matrix(lists.X, nn)[:, leaves]
    return np.asarray((U + V + W + X).todense()).round().astype(np.int64)


def bead_pair_pathways(tree: Tree, lists: InteractionLists) -> np.ndarray:
    """Pathway count for every ordered (target, source) bead pair, in tree order."""
    leaves = tree.leaves
    slot = np.full(tree.n_nodes, -1)
    slot[leaves] = np.arange(len(leaves))
    counts = leaf_pair_pathways(tree, lists)
    lb = slot[tree.leaf_of_bead()]
    return counts[lb[:, None], lb[None, :]]
