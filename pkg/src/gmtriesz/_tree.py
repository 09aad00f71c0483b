"""Tree-accelerated kernel summation.

Median-split spatial tree with monopole far-field evaluation about the
mass-weighted centroid of each node.  Expanding about the centroid makes
the dipole moment vanish identically, so the monopole value is accurate
to second order in (node radius / distance).  Near nodes are opened
recursively and leaves fall back to direct summation, which keeps the
principal-value convention exact: zero-distance pairs contribute nothing.

Evaluation runs level-synchronously on a (target, node) pair frontier so
every step is a whole-array numpy operation; results are scattered back
per target with bincount sums.
"""

from __future__ import annotations

import numpy as np

LEAF_SIZE = 32
_TARGET_CHUNK = 1 << 12
_PAIR_CAP = 1 << 20
_LEAF_PAIR_CAP = 1 << 17


def _scale(dist, n):
    # 1 / dist^(n+1) with zero-distance entries mapped to 0 (pv convention)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dist ** (n + 1)
    inv[~np.isfinite(inv)] = 0.0
    return inv


class KernelTree:
    """Immutable spatial tree over weighted atoms, shared by all queries."""

    def __init__(self, points, weights, phi_values=None, leaf_size=LEAF_SIZE):
        pts = np.ascontiguousarray(np.asarray(points, dtype=float))
        w = np.asarray(weights, dtype=float)
        m = len(pts)
        self.leaf_size = int(leaf_size)
        order = np.arange(m, dtype=np.intp)

        starts, ends, lefts, rights = [], [], [], []
        stack = [(0, m, -1, False)]
        while stack:
            start, end, parent, is_right = stack.pop()
            node = len(starts)
            starts.append(start)
            ends.append(end)
            lefts.append(-1)
            rights.append(-1)
            if parent >= 0:
                (rights if is_right else lefts)[parent] = node
            if end - start > self.leaf_size:
                seg = order[start:end]
                sub = pts[seg]
                axis = int(np.argmax(sub.max(axis=0) - sub.min(axis=0)))
                half = (end - start) // 2
                part = np.argpartition(sub[:, axis], half)
                order[start:end] = seg[part]
                stack.append((start + half, end, node, True))
                stack.append((start, start + half, node, False))

        self.points = pts
        self.weights = w
        self.order = order
        self.start = np.array(starts, dtype=np.intp)
        self.end = np.array(ends, dtype=np.intp)
        self.left = np.array(lefts, dtype=np.intp)
        self.right = np.array(rights, dtype=np.intp)

        nn = len(starts)
        dim = pts.shape[1]
        self.node_weight = np.empty(nn)
        self.node_center = np.empty((nn, dim))
        self.node_radius = np.empty(nn)
        self.node_phi = np.zeros(nn)
        pw = pts[order] * w[order, None]
        ws = w[order]
        phis = None if phi_values is None else np.asarray(phi_values, float)[order]
        for i in range(nn):
            s, e = self.start[i], self.end[i]
            wt = ws[s:e].sum()
            self.node_weight[i] = wt
            c = pw[s:e].sum(axis=0) / wt
            self.node_center[i] = c
            d = pts[order[s:e]] - c
            self.node_radius[i] = np.sqrt((d * d).sum(axis=1).max())
            if phis is not None:
                self.node_phi[i] = (ws[s:e] * phis[s:e]).sum() / wt
        self._phi_atoms = None if phi_values is None else np.asarray(phi_values, float)

        # padded per-leaf atom blocks: zero-weight padding contributes nothing
        leaf_nodes = np.nonzero(self.left < 0)[0]
        self.leaf_row = np.full(nn, -1, dtype=np.intp)
        self.leaf_row[leaf_nodes] = np.arange(len(leaf_nodes))
        width = self.leaf_size
        self.leaf_pts = np.zeros((len(leaf_nodes), width, dim))
        self.leaf_w = np.zeros((len(leaf_nodes), width))
        self.leaf_phi = np.zeros((len(leaf_nodes), width))
        for row, node in enumerate(leaf_nodes):
            seg = order[self.start[node]:self.end[node]]
            k = len(seg)
            self.leaf_pts[row, :k] = pts[seg]
            self.leaf_pts[row, k:] = pts[seg[0]] if k else 0.0
            self.leaf_w[row, :k] = w[seg]
            if phis is not None:
                self.leaf_phi[row, :k] = self._phi_atoms[seg]

    def evaluate(self, targets, n, theta, kernel="riesz", phi_targets=None):
        """Sum the kernel against all atoms, for every target point.

        A node at distance d from a target is evaluated by its monopole
        when node_radius <= theta * (d - node_radius); otherwise it is
        opened.  Leaves are summed directly with zero-distance pairs
        dropped.
        """
        tg = np.atleast_2d(np.asarray(targets, dtype=float))
        k, dim = tg.shape
        out = np.zeros((k, dim))
        if len(self.points) == 0:
            return out
        if kernel == "suppressed":
            if phi_targets is None or self._phi_atoms is None:
                raise ValueError("suppressed kernel needs phi at targets and atoms")
            phit = np.asarray(phi_targets, dtype=float)
        elif kernel == "riesz":
            phit = None
        else:
            raise ValueError(f"unknown kernel {kernel!r}")
        n = int(n)
        open_factor = 1.0 + 1.0 / theta

        for lo in range(0, k, _TARGET_CHUNK):
            hi = min(lo + _TARGET_CHUNK, k)
            sub = np.ascontiguousarray(tg[lo:hi])
            acc = np.zeros((hi - lo, dim))
            pf = None if phit is None else phit[lo:hi]
            tloc = np.arange(hi - lo, dtype=np.intp)
            node = np.zeros(hi - lo, dtype=np.intp)
            while tloc.size:
                next_t, next_n = [], []
                for plo in range(0, tloc.size, _PAIR_CAP):
                    t = tloc[plo:plo + _PAIR_CAP]
                    nd = node[plo:plo + _PAIR_CAP]
                    diff = sub[t] - self.node_center[nd]
                    dist = np.sqrt((diff * diff).sum(axis=1))
                    far = dist >= self.node_radius[nd] * open_factor
                    if far.any():
                        self._monopole(acc, sub, t[far], nd[far], diff[far],
                                       dist[far], n, kernel, pf)
                    near_t, near_n = t[~far], nd[~far]
                    is_leaf = self.left[near_n] < 0
                    if is_leaf.any():
                        self._leaf_direct(acc, sub, near_t[is_leaf],
                                          near_n[is_leaf], n, kernel, pf)
                    rec_t, rec_n = near_t[~is_leaf], near_n[~is_leaf]
                    if rec_t.size:
                        next_t.append(np.repeat(rec_t, 2))
                        kids = np.empty(2 * rec_n.size, dtype=np.intp)
                        kids[0::2] = self.left[rec_n]
                        kids[1::2] = self.right[rec_n]
                        next_n.append(kids)
                if next_t:
                    tloc = np.concatenate(next_t)
                    node = np.concatenate(next_n)
                else:
                    tloc = np.empty(0, dtype=np.intp)
            out[lo:hi] = acc
        return out

    def _monopole(self, acc, sub, t, nd, diff, dist, n, kernel, pf):
        if kernel == "riesz":
            inv = _scale(dist, n)
        else:
            den = (dist * dist + pf[t] * self.node_phi[nd]) ** ((n + 1) / 2.0)
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / den
            inv[~np.isfinite(inv)] = 0.0
        vals = diff * (self.node_weight[nd] * inv)[:, None]
        for c in range(acc.shape[1]):
            acc[:, c] += np.bincount(t, weights=vals[:, c],
                                     minlength=acc.shape[0])

    def _leaf_direct(self, acc, sub, t, nd, n, kernel, pf):
        rows = self.leaf_row[nd]
        for plo in range(0, t.size, _LEAF_PAIR_CAP):
            ti = t[plo:plo + _LEAF_PAIR_CAP]
            ri = rows[plo:plo + _LEAF_PAIR_CAP]
            diff = sub[ti][:, None, :] - self.leaf_pts[ri]
            dist = np.sqrt((diff * diff).sum(axis=2))
            if kernel == "riesz":
                inv = _scale(dist, n)
            else:
                den = (dist * dist
                       + pf[ti][:, None] * self.leaf_phi[ri]) ** ((n + 1) / 2.0)
                with np.errstate(divide="ignore", invalid="ignore"):
                    inv = 1.0 / den
                inv[~np.isfinite(inv)] = 0.0
                inv[dist == 0.0] = 0.0
            vals = (diff * (self.leaf_w[ri] * inv)[:, :, None]).sum(axis=1)
            for c in range(acc.shape[1]):
                acc[:, c] += np.bincount(ti, weights=vals[:, c],
                                         minlength=acc.shape[0])
