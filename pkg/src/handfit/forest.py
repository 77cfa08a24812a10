"""Hough-style regression forest over depth patches.

Each foreground patch carries a part label (nearest joint) and 3D offset
vectors to every joint. Trees split on two-probe depth-difference features
whose pixel offsets are normalized by the patch depth; leaves summarize
the arriving offset distributions per joint by mean-shift modes. At test
time every patch votes absolute 3D positions for every joint; per joint
the strongest votes are condensed by mean-shift into a handful of
confidence-weighted proposals.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry
from .depth import foreground_mask
from .meanshift import _dedup, mean_shift, mean_shift_groups
from .proposals import ProposalSet

MAGIC = b"HFOR"
FORMAT_VERSION = 1


class ForestFormatError(ValueError):
    """Corrupt or incompatible forest file; carries the failing byte offset."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class ForestConfig:
    num_trees: int = 3
    max_depth: int = 23
    min_samples: int = 40
    node_subsample: int = 800
    candidates: int = 200
    probe_range_px_m: float = 60.0
    bg_depth_mm: float = 10000.0
    leaf_modes: int = 2
    leaf_bandwidth_mm: float = 20.0
    leaf_cap: int = 256
    meanshift_iters: int = 50


@dataclass
class SampleSet:
    """Columnar training samples plus the depth images they index into."""

    images: np.ndarray   # (n_img, h, w) uint16
    cam: object
    pixel: np.ndarray    # (n, 2) float, (u, v)
    depth: np.ndarray    # (n,) float mm at the patch centre
    img_idx: np.ndarray  # (n,) int32
    label: np.ndarray    # (n,) int16, nearest joint
    offsets: np.ndarray  # (n, J, 3) float32, joint - patch centre

    def __len__(self):
        return len(self.depth)


def extract_samples(img, gt_joints, stride, rng, cap=None):
    """Training samples from one rendered frame and its ground-truth joints.

    One sample per foreground pixel on the stride grid; the label is the
    joint nearest to the back-projected patch centre and the offsets point
    from that centre to every joint. `cap` randomly limits samples per image.
    """
    gt_joints = np.asarray(gt_joints, dtype=float)
    mask = foreground_mask(img)
    vs, us = np.nonzero(mask)
    keep = (us % stride == 0) & (vs % stride == 0)
    us, vs = us[keep], vs[keep]
    if cap is not None and len(us) > cap:
        sel = np.sort(rng.choice(len(us), size=cap, replace=False))
        us, vs = us[sel], vs[sel]
    depths = img.depth[vs, us].astype(float)
    centers = img.cam.backproject(us.astype(float), vs.astype(float), depths)
    diff = gt_joints[None, :, :] - centers[:, None, :]
    dist = np.linalg.norm(diff, axis=2)
    labels = dist.argmin(axis=1).astype(np.int16)
    return SampleSet(
        images=img.depth[None, :, :],
        cam=img.cam,
        pixel=np.stack([us, vs], axis=1).astype(float),
        depth=depths,
        img_idx=np.zeros(len(us), dtype=np.int32),
        label=labels,
        offsets=diff.astype(np.float32),
    )


def build_training_set(images, gt_joint_list, stride, rng, cap=None):
    """Pooled SampleSet over many frames sharing one image stack."""
    parts = [extract_samples(img, gt, stride, rng, cap=cap)
             for img, gt in zip(images, gt_joint_list)]
    stack = np.stack([img.depth for img in images])
    return SampleSet(
        images=stack,
        cam=images[0].cam,
        pixel=np.concatenate([p.pixel for p in parts]),
        depth=np.concatenate([p.depth for p in parts]),
        img_idx=np.concatenate([np.full(len(p), i, dtype=np.int32)
                                for i, p in enumerate(parts)]),
        label=np.concatenate([p.label for p in parts]),
        offsets=np.concatenate([p.offsets for p in parts]),
    )


def _probe_depth(images, img_idx, probe_px, bg_depth):
    """Depth at probe pixels; out-of-image or background reads `bg_depth`."""
    u = np.rint(probe_px[..., 0]).astype(np.int64)
    v = np.rint(probe_px[..., 1]).astype(np.int64)
    h, w = images.shape[1], images.shape[2]
    inb = (u >= 0) & (u < w) & (v >= 0) & (v < h)
    uc = np.clip(u, 0, w - 1)
    vc = np.clip(v, 0, h - 1)
    d = images[img_idx, vc, uc].astype(float)
    d[~inb] = bg_depth
    d[d == 0] = bg_depth
    return d


def _features(samples, idx, probe_u, probe_v, bg_depth):
    """Depth-difference features for samples `idx` under candidate probes.

    probe_u/probe_v are (c, 2) offsets in px*mm; the per-sample pixel
    displacement is the offset divided by the patch depth.
    """
    px = samples.pixel[idx]
    d = samples.depth[idx]
    imi = samples.img_idx[idx]
    pu = px[None, :, :] + probe_u[:, None, :] / d[None, :, None]
    pv = px[None, :, :] + probe_v[:, None, :] / d[None, :, None]
    imi_b = np.broadcast_to(imi[None, :], pu.shape[:2])
    du = _probe_depth(samples.images, imi_b, pu, bg_depth)
    dv = _probe_depth(samples.images, imi_b, pv, bg_depth)
    return du - dv


def _entropy(counts):
    counts = np.asarray(counts, dtype=float)
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def split_score(left_labels, right_labels, num_classes=geometry.NUM_JOINTS):
    """Information gain (nats) of a partition over part labels.

    An empty side scores -inf so degenerate splits are always rejected.
    """
    left_labels = np.asarray(left_labels)
    right_labels = np.asarray(right_labels)
    if len(left_labels) == 0 or len(right_labels) == 0:
        return -np.inf
    lc = np.bincount(left_labels, minlength=num_classes)
    rc = np.bincount(right_labels, minlength=num_classes)
    n_l, n_r = lc.sum(), rc.sum()
    n = n_l + n_r
    parent = _entropy(lc + rc)
    return parent - (n_l * _entropy(lc) + n_r * _entropy(rc)) / n


def _gains(left_counts, total_counts):
    """Vectorized information gain for many candidate splits."""
    right_counts = total_counts[None, :] - left_counts
    n = total_counts.sum()
    n_l = left_counts.sum(axis=1)
    n_r = n - n_l

    def rows_entropy(counts, sizes):
        with np.errstate(divide="ignore", invalid="ignore"):
            p = counts / sizes[:, None]
            plogp = np.where(counts > 0, p * np.log(p), 0.0)
        return -plogp.sum(axis=1)

    h_parent = _entropy(total_counts)
    h_l = rows_entropy(left_counts, np.maximum(n_l, 1))
    h_r = rows_entropy(right_counts, np.maximum(n_r, 1))
    gains = h_parent - (n_l * h_l + n_r * h_r) / n
    gains[(n_l == 0) | (n_r == 0)] = -np.inf
    return gains


def _balanced_subsample(labels, idx, size, rng):
    """Class-balanced subsample of node indices, at most `size` entries."""
    if len(idx) <= size:
        return idx
    classes = np.unique(labels[idx])
    quota = max(1, size // len(classes))
    chosen = []
    for c in classes:
        members = idx[labels[idx] == c]
        if len(members) > quota:
            members = rng.choice(members, size=quota, replace=False)
        chosen.append(members)
    out = np.concatenate(chosen)
    out.sort()
    return out


def build_leaf(samples, idx, cfg, rng):
    """Leaf model: per joint, top-M mean-shift modes of the offset vectors.

    Returns (modes (J, M, 3), weights (J, M)) zero-padded, weights are the
    support mass of each mode.
    """
    if len(idx) > cfg.leaf_cap:
        idx = np.sort(rng.choice(idx, size=cfg.leaf_cap, replace=False))
    n_joints = samples.offsets.shape[1]
    modes_out = np.zeros((n_joints, cfg.leaf_modes, 3), dtype=np.float32)
    weights_out = np.zeros((n_joints, cfg.leaf_modes), dtype=np.float32)
    offs = samples.offsets[idx].astype(float).transpose(1, 0, 2)  # (J, n, 3)

    # pool near-identical offsets per joint before the shared batched run;
    # large leaves hold mostly duplicates, so this trims the quadratic cost
    pooled = [_dedup(offs[j], np.ones(len(idx)), cfg.leaf_bandwidth_mm)
              for j in range(n_joints)]
    width = max(len(w) for _, w in pooled)
    pts = np.zeros((n_joints, width, 3))
    wts = np.zeros((n_joints, width))
    for j, (p, w) in enumerate(pooled):
        pts[j, :len(w)] = p
        pts[j, len(w):] = p[0]  # zero-weight padding parked on a real point
        wts[j, :len(w)] = w
    results = mean_shift_groups(pts, wts, bandwidth=cfg.leaf_bandwidth_mm,
                                max_iters=cfg.meanshift_iters)
    for j, (modes, support) in enumerate(results):
        m = min(cfg.leaf_modes, len(modes))
        modes_out[j, :m] = modes[:m]
        weights_out[j, :m] = support[:m]
    return modes_out, weights_out


@dataclass
class Tree:
    left: np.ndarray      # (n_nodes,) int32, -1 for leaves
    right: np.ndarray     # (n_nodes,) int32
    leaf_id: np.ndarray   # (n_nodes,) int32, -1 for internal nodes
    probe_u: np.ndarray   # (n_nodes, 2) float32, px*mm
    probe_v: np.ndarray   # (n_nodes, 2) float32
    tau: np.ndarray       # (n_nodes,) float32, mm
    leaf_modes: np.ndarray    # (n_leaves, J, M, 3) float32
    leaf_weights: np.ndarray  # (n_leaves, J, M) float32

    @property
    def n_nodes(self):
        return len(self.tau)

    @property
    def n_leaves(self):
        return len(self.leaf_weights)

    def max_depth(self):
        depth = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            for child in (self.left[i], self.right[i]):
                if child >= 0:
                    depth[child] = depth[i] + 1
        return int(depth.max()) if self.n_nodes else 0

    def route(self, images, img_idx, pixel, depth, bg_depth):
        """Leaf index for every patch; routing is total and deterministic."""
        m = len(depth)
        node = np.zeros(m, dtype=np.int64)
        while True:
            internal = self.leaf_id[node] < 0
            if not internal.any():
                break
            act = np.nonzero(internal)[0]
            nd = node[act]
            scale = depth[act, None]
            pu = pixel[act] + self.probe_u[nd] / scale
            pv = pixel[act] + self.probe_v[nd] / scale
            du = _probe_depth(images, img_idx[act], pu, bg_depth)
            dv = _probe_depth(images, img_idx[act], pv, bg_depth)
            go_left = (du - dv) < self.tau[nd]
            node[act] = np.where(go_left, self.left[nd], self.right[nd])
        return self.leaf_id[node]


def train_tree(samples, cfg, rng):
    """Grow one tree by recursive entropy-gain splitting.

    At each node a class-balanced subsample scores `cfg.candidates` random
    (u, v, tau) probe triples; thresholds are drawn from the empirical
    feature values so both fine intra-hand and coarse silhouette splits
    stay reachable.
    """
    if len(samples) == 0:
        raise ValueError("cannot train a tree on an empty sample set")
    probe_range = cfg.probe_range_px_m * 1000.0  # px*m -> px*mm
    n_joints = samples.offsets.shape[1]

    nodes = []   # [left, right, leaf_id, u0, u1, v0, v1, tau]
    leaf_modes = []
    leaf_weights = []

    def make_leaf(idx):
        modes, weights = build_leaf(samples, idx, cfg, rng)
        leaf_modes.append(modes)
        leaf_weights.append(weights)
        nodes.append([-1, -1, len(leaf_modes) - 1, 0.0, 0.0, 0.0, 0.0, 0.0])
        return len(nodes) - 1

    def grow(idx, depth):
        if depth >= cfg.max_depth or len(idx) < cfg.min_samples:
            return make_leaf(idx)
        sub = _balanced_subsample(samples.label, idx, cfg.node_subsample, rng)
        probe_u = rng.uniform(-probe_range, probe_range, size=(cfg.candidates, 2))
        probe_v = rng.uniform(-probe_range, probe_range, size=(cfg.candidates, 2))
        feats = _features(samples, sub, probe_u, probe_v, cfg.bg_depth_mm)
        tau = feats[np.arange(cfg.candidates), rng.integers(0, len(sub), size=cfg.candidates)]

        onehot = np.zeros((len(sub), n_joints))
        onehot[np.arange(len(sub)), samples.label[sub]] = 1.0
        left_counts = (feats < tau[:, None]).astype(float) @ onehot
        gains = _gains(left_counts, onehot.sum(axis=0))
        best = int(np.argmax(gains))
        if not np.isfinite(gains[best]) or gains[best] <= 1e-12:
            return make_leaf(idx)

        f_all = _features(samples, idx, probe_u[best:best + 1],
                          probe_v[best:best + 1], cfg.bg_depth_mm)[0]
        go_left = f_all < tau[best]
        if not go_left.any() or go_left.all():
            return make_leaf(idx)

        node_id = len(nodes)
        nodes.append([-2, -2, -1, probe_u[best, 0], probe_u[best, 1],
                      probe_v[best, 0], probe_v[best, 1], tau[best]])
        left_id = grow(idx[go_left], depth + 1)
        right_id = grow(idx[~go_left], depth + 1)
        nodes[node_id][0] = left_id
        nodes[node_id][1] = right_id
        return node_id

    grow(np.arange(len(samples)), 0)
    arr = np.asarray(nodes, dtype=float)
    return Tree(
        left=arr[:, 0].astype(np.int32),
        right=arr[:, 1].astype(np.int32),
        leaf_id=arr[:, 2].astype(np.int32),
        probe_u=arr[:, 3:5].astype(np.float32),
        probe_v=arr[:, 5:7].astype(np.float32),
        tau=arr[:, 7].astype(np.float32),
        leaf_modes=np.stack(leaf_modes),
        leaf_weights=np.stack(leaf_weights),
    )


@dataclass
class Forest:
    trees: list
    num_joints: int = geometry.NUM_JOINTS
    leaf_modes: int = 2
    bg_depth_mm: float = 10000.0

    def stats(self):
        return [{"depth": t.max_depth(), "leaves": t.n_leaves, "nodes": t.n_nodes}
                for t in self.trees]


def train_forest(samples, cfg=None, rng=None, threads=1):
    cfg = cfg or ForestConfig()
    rng = rng or np.random.default_rng(0)
    tree_rngs = rng.spawn(cfg.num_trees)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trees = list(pool.map(lambda r: train_tree(samples, cfg, r), tree_rngs))
    else:
        trees = [train_tree(samples, cfg, r) for r in tree_rngs]
    return Forest(trees, num_joints=samples.offsets.shape[1],
                  leaf_modes=cfg.leaf_modes, bg_depth_mm=cfg.bg_depth_mm)


def accumulate_votes(forest, img, stride=2, depth_sq_weight=True):
    """Absolute 3D votes per joint from every foreground patch and tree.

    Vote weight is the leaf mode support, optionally scaled by the squared
    patch depth to undo the perspective thinning of per-pixel sampling.
    Returns {joint: (positions (v, 3), weights (v,))}.
    """
    mask = foreground_mask(img)
    vs, us = np.nonzero(mask)
    keep = (us % stride == 0) & (vs % stride == 0)
    us, vs = us[keep], vs[keep]
    if len(us) == 0:
        return {}
    depths = img.depth[vs, us].astype(float)
    centers = img.cam.backproject(us.astype(float), vs.astype(float), depths)
    pixel = np.stack([us, vs], axis=1).astype(float)
    img_idx = np.zeros(len(us), dtype=np.int64)
    images = img.depth[None, :, :]
    scale = (depths / 1000.0) ** 2 if depth_sq_weight else np.ones(len(depths))

    pos_parts = []
    w_parts = []
    for tree in forest.trees:
        leaf = tree.route(images, img_idx, pixel, depths, forest.bg_depth_mm)
        modes = tree.leaf_modes[leaf].astype(float)      # (m, J, M, 3)
        weights = tree.leaf_weights[leaf].astype(float)  # (m, J, M)
        pos_parts.append(centers[:, None, None, :] + modes)
        w_parts.append(weights * scale[:, None, None])
    positions = np.concatenate(pos_parts)  # (m*T, J, M, 3)
    weights = np.concatenate(w_parts)

    votes = {}
    for j in range(forest.num_joints):
        pj = positions[:, j].reshape(-1, 3)
        wj = weights[:, j].reshape(-1)
        live = wj > 0
        if live.any():
            votes[j] = (pj[live], wj[live])
    return votes


def proposals_from_votes(votes, top_n=200, k=3, bandwidth_mm=15.0,
                         max_iters=50):
    """Condense votes into at most k weighted proposals per joint.

    Per joint the top_n highest-weight votes are retained, mean-shift over
    their positions extracts the modes, and each mode's confidence is the
    number of retained votes that converged to it; ProposalSet then
    normalizes the confidences per joint.
    """
    entries = {}
    for j, (pos, w) in votes.items():
        if len(w) > top_n:
            order = np.argsort(-w, kind="stable")[:top_n]
            pos = pos[order]
        modes, support = mean_shift(pos, None, bandwidth=bandwidth_mm,
                                    max_iters=max_iters)
        if len(modes) == 0:
            continue
        entries[j] = (modes[:k], support[:k])
    return ProposalSet(entries)


def infer_proposals(forest, img, stride=2, top_n=200, k=3,
                    bandwidth_mm=15.0, max_iters=50, depth_sq_weight=True):
    """Full inference path: dense voting then per-joint mode extraction.

    Joints that attracted no votes are omitted from the result; downstream
    fitting tolerates the gap.
    """
    votes = accumulate_votes(forest, img, stride=stride,
                             depth_sq_weight=depth_sq_weight)
    return proposals_from_votes(votes, top_n=top_n, k=k,
                                bandwidth_mm=bandwidth_mm, max_iters=max_iters)


# --- serialization ---------------------------------------------------------

def save_forest(path, forest):
    """Versioned little-endian binary dump (magic HFOR)."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<HHIHHd", FORMAT_VERSION, 0, len(forest.trees),
                        forest.num_joints, forest.leaf_modes, forest.bg_depth_mm)
    for tree in forest.trees:
        blob += struct.pack("<II", tree.n_nodes, tree.n_leaves)
        node_block = np.empty((tree.n_nodes, 8), dtype="<f4")
        node_block[:, 0] = tree.left
        node_block[:, 1] = tree.right
        node_block[:, 2] = tree.leaf_id
        node_block[:, 3:5] = tree.probe_u
        node_block[:, 5:7] = tree.probe_v
        node_block[:, 7] = tree.tau
        # child/leaf indices are exactly representable in f4 for any
        # desk-scale tree (< 2**24 nodes)
        blob += node_block.tobytes()
        blob += tree.leaf_modes.astype("<f4").tobytes()
        blob += tree.leaf_weights.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(blob))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, n, what):
        if self.offset + n > len(self.data):
            raise ForestFormatError(f"truncated while reading {what}", self.offset)
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_forest(path):
    reader = _Reader(Path(path).read_bytes())
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise ForestFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version, _, n_trees, n_joints, n_modes, bg_depth = reader.unpack("<HHIHHd", "header")
    if version != FORMAT_VERSION:
        raise ForestFormatError(
            f"unsupported forest format version {version}, expected {FORMAT_VERSION}", 4)
    trees = []
    for t in range(n_trees):
        n_nodes, n_leaves = reader.unpack("<II", f"tree {t} sizes")
        raw = reader.take(n_nodes * 32, f"tree {t} nodes")
        node_block = np.frombuffer(raw, dtype="<f4").reshape(n_nodes, 8)
        raw = reader.take(n_leaves * n_joints * n_modes * 3 * 4, f"tree {t} leaf modes")
        modes = np.frombuffer(raw, dtype="<f4").reshape(n_leaves, n_joints, n_modes, 3)
        raw = reader.take(n_leaves * n_joints * n_modes * 4, f"tree {t} leaf weights")
        weights = np.frombuffer(raw, dtype="<f4").reshape(n_leaves, n_joints, n_modes)
        trees.append(Tree(
            left=node_block[:, 0].astype(np.int32),
            right=node_block[:, 1].astype(np.int32),
            leaf_id=node_block[:, 2].astype(np.int32),
            probe_u=node_block[:, 3:5].astype(np.float32),
            probe_v=node_block[:, 5:7].astype(np.float32),
            tau=node_block[:, 7].astype(np.float32),
            leaf_modes=modes.astype(np.float32),
            leaf_weights=weights.astype(np.float32),
        ))
    if reader.offset != len(reader.data):
        raise ForestFormatError("trailing bytes after forest payload", reader.offset)
    return Forest(trees, num_joints=n_joints, leaf_modes=n_modes, bg_depth_mm=bg_depth)
