"""Gaussian-kernel mean-shift mode seeking for weighted 3D point sets."""

from __future__ import annotations

import numpy as np

# starting points closer than bandwidth / DEDUP_DIVISOR are pooled into one
# weighted kernel; exact duplicates (common for accumulated votes) collapse
# losslessly and the worst-case kernel displacement stays far below the
# merge radius
DEDUP_DIVISOR = 20.0


def _dedup(points, weights, bandwidth):
    """Pool points on a fine grid; returns (means, summed weights)."""
    cell = np.round(points * (DEDUP_DIVISOR / bandwidth)).astype(np.int64)
    _, inverse = np.unique(cell, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    n_cells = int(inverse.max()) + 1
    if n_cells == len(points):
        return points, weights
    w = np.bincount(inverse, weights=weights, minlength=n_cells)
    sums = np.stack([np.bincount(inverse, weights=weights * points[:, d],
                                 minlength=n_cells)
                     for d in range(points.shape[1])], axis=1)
    return sums / w[:, None], w


def _iterate(points, weights, bandwidth, max_iters, tol):
    """Shift every point uphill until it moves less than tol per update."""
    n = len(points)
    shifted = points.copy()
    p_sq = (points * points).sum(axis=1)
    active = np.ones(n, dtype=bool)
    inv_two_bw2 = 0.5 / (bandwidth * bandwidth)
    for _ in range(max_iters):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        m = shifted[idx]
        d2 = (m * m).sum(axis=1)[:, None] + p_sq[None, :] - 2.0 * (m @ points.T)
        np.maximum(d2, 0.0, out=d2)
        k = np.exp(-d2 * inv_two_bw2) * weights[None, :]
        new = (k @ points) / k.sum(axis=1)[:, None]
        moved = np.abs(new - m).max(axis=1) >= tol
        shifted[idx] = new
        active[idx] = moved
    return shifted


def mean_shift(points, weights=None, *, bandwidth, max_iters=50,
               merge_radius=None, tol_factor=1e-3):
    """Modes of the weighted kernel density of `points`.

    Mean-shift iterations start from every (distinct) input point;
    converged points lying within `merge_radius` (default bandwidth/2) of
    each other are merged into one mode whose position is the weighted
    mean of its members and whose support is their total weight.

    Returns (modes (m, d), supports (m,)) sorted by support descending.
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.size == 0:
        return np.empty((0, points.shape[1] if points.ndim == 2 else 3)), np.empty(0)
    if weights is None:
        weights = np.ones(len(points))
    else:
        weights = np.asarray(weights, dtype=float)
        keep = weights > 0
        points, weights = points[keep], weights[keep]
        if len(points) == 0:
            return np.empty((0, points.shape[1])), np.empty(0)
    if merge_radius is None:
        merge_radius = bandwidth / 2.0

    points, weights = _dedup(points, weights, bandwidth)
    shifted = _iterate(points, weights, bandwidth, max_iters,
                       tol_factor * bandwidth)
    return _merge_modes(shifted, weights, merge_radius)


def mean_shift_groups(point_groups, weights=None, *, bandwidth, max_iters=50,
                      merge_radius=None, tol_factor=1e-3):
    """Weighted mean-shift over g equally-sized point sets at once.

    point_groups (g, n, d), weights (g, n) with zero weight marking padded
    entries -> list of (modes, supports) per group, same semantics as
    mean_shift. Batching the groups and computing in float32 amortizes the
    overhead that dominates for the small sets stored at tree leaves.
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    pts = np.asarray(point_groups, dtype=np.float32)
    g, n, dim = pts.shape
    if weights is None:
        weights = np.ones((g, n), dtype=np.float32)
    else:
        weights = np.asarray(weights, dtype=np.float32)
    if merge_radius is None:
        merge_radius = bandwidth / 2.0
    inv_two_bw2 = np.float32(0.5 / (bandwidth * bandwidth))
    tol = np.float32(tol_factor * bandwidth)

    shifted = pts.reshape(g * n, dim).copy()
    gid = np.repeat(np.arange(g), n)
    p_sq = (pts * pts).sum(axis=2)
    live = weights.reshape(g * n) > 0
    active = live.copy()
    for _ in range(max_iters):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        m = shifted[idx]
        grp = gid[idx]
        block = pts[grp]  # (a, n, d): each point shifts within its own group
        d2 = (m * m).sum(axis=1)[:, None] + p_sq[grp] \
            - 2.0 * np.einsum("ad,and->an", m, block)
        np.maximum(d2, 0.0, out=d2)
        k = np.exp(-d2 * inv_two_bw2) * weights[grp]
        new = np.einsum("an,and->ad", k, block) / k.sum(axis=1)[:, None]
        moved = np.abs(new - m).max(axis=1) >= tol
        shifted[idx] = new
        active[idx] = moved

    shifted = shifted.reshape(g, n, dim).astype(float)
    weights = weights.astype(float)
    out = []
    for i in range(g):
        keep = weights[i] > 0
        out.append(_merge_modes(shifted[i, keep], weights[i, keep], merge_radius))
    return out


def _merge_modes(shifted, weights, merge_radius):
    """Greedy merge of converged points, heaviest clusters first.

    Converged points are first collapsed on a fine grid (quarter of the
    merge radius) so the sequential merge only walks a handful of cells.
    """
    total = weights.sum()
    center = (weights[:, None] * shifted).sum(axis=0) / total
    spread2 = ((shifted - center) ** 2).sum(axis=1).max()
    # everything within half the merge radius of the centroid provably
    # collapses to one mode under the greedy walk below
    if spread2 <= 0.25 * merge_radius * merge_radius:
        return center[None, :], np.array([total])

    dim = shifted.shape[1]
    cell = np.round(shifted / (0.25 * merge_radius)).astype(np.int64)
    _, inverse = np.unique(cell, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    n_cells = int(inverse.max()) + 1
    cell_w = np.bincount(inverse, weights=weights, minlength=n_cells)
    cell_sum = np.stack([
        np.bincount(inverse, weights=weights * shifted[:, d], minlength=n_cells)
        for d in range(dim)], axis=1)

    order = np.argsort(-cell_w, kind="stable")
    mode_sum = []
    mode_w = []
    r2 = merge_radius * merge_radius
    for c in order:
        p = cell_sum[c] / cell_w[c]
        if mode_sum:
            centers = np.asarray(mode_sum) / np.asarray(mode_w)[:, None]
            d2 = ((centers - p) ** 2).sum(axis=1)
            nearest = int(np.argmin(d2))
            if d2[nearest] <= r2:
                mode_sum[nearest] = mode_sum[nearest] + cell_sum[c]
                mode_w[nearest] += cell_w[c]
                continue
        mode_sum.append(cell_sum[c].copy())
        mode_w.append(cell_w[c])

    modes = np.asarray(mode_sum) / np.asarray(mode_w)[:, None]
    supports = np.asarray(mode_w)
    order = np.argsort(-supports, kind="stable")
    return modes[order], supports[order]


def shift_once(point, points, weights, bandwidth):
    """One mean-shift update of `point`; used to check fixed-point behavior."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    weights = np.ones(len(points)) if weights is None else np.asarray(weights, dtype=float)
    d2 = ((points - point) ** 2).sum(axis=1)
    k = np.exp(-0.5 * d2 / (bandwidth * bandwidth)) * weights
    return (k[:, None] * points).sum(axis=0) / k.sum()
