"""Per-joint 3D position proposals with normalized confidence weights."""

from __future__ import annotations

import csv

import numpy as np

from . import geometry


class ProposalSet:
    """Up to k weighted position proposals per joint.

    Confidences are normalized to sum to one per joint so they behave like
    probabilities; proposals are kept sorted by weight descending. Joints
    absent from the mapping simply have no proposals.
    """

    def __init__(self, entries, num_joints=geometry.NUM_JOINTS):
        self.num_joints = num_joints
        self._entries = {}
        for j, (positions, weights) in sorted(entries.items()):
            positions = np.atleast_2d(np.asarray(positions, dtype=float))
            weights = np.atleast_1d(np.asarray(weights, dtype=float))
            if len(positions) == 0:
                continue
            if not (0 <= j < num_joints):
                raise ValueError(f"joint index {j} out of range")
            if positions.shape != (len(weights), 3):
                raise ValueError(f"joint {j}: positions/weights shape mismatch")
            if not np.all(np.isfinite(positions)) or not np.all(np.isfinite(weights)):
                raise ValueError(f"joint {j}: non-finite proposal")
            if np.any(weights < 0):
                raise ValueError(f"joint {j}: negative weight")
            total = weights.sum()
            if total <= 0:
                continue
            order = np.argsort(-weights, kind="stable")
            self._entries[j] = (positions[order].copy(), weights[order] / total)
        self._padded_cache = None

    @classmethod
    def from_joints(cls, joints, joint_indices=None):
        """Single exact proposal per joint with weight 1 (oracle input)."""
        joints = np.asarray(joints, dtype=float)
        if joint_indices is None:
            joint_indices = range(len(joints))
        return cls({j: (joints[j][None, :], np.ones(1)) for j in joint_indices})

    @property
    def joints(self):
        return sorted(self._entries)

    def __contains__(self, j):
        return j in self._entries

    def __len__(self):
        return len(self._entries)

    def positions(self, j):
        return self._entries[j][0]

    def weights(self, j):
        return self._entries[j][1]

    def top(self, j):
        """The highest-confidence position for joint j."""
        return self._entries[j][0][0]

    def count(self):
        """Total number of proposals over all joints."""
        return sum(len(p) for p, _ in self._entries.values())

    def top_k(self, k):
        """Keep the k strongest proposals per joint, renormalized."""
        return ProposalSet({j: (p[:k], w[:k]) for j, (p, w) in self._entries.items()},
                           num_joints=self.num_joints)

    def translate(self, offset):
        offset = np.asarray(offset, dtype=float)
        return ProposalSet({j: (p + offset, w) for j, (p, w) in self._entries.items()},
                           num_joints=self.num_joints)

    def padded(self):
        """Dense (J, K, 3) positions and (J, K) weights, zero weight = absent."""
        if self._padded_cache is None:
            k_max = max((len(w) for _, w in self._entries.values()), default=1)
            pos = np.zeros((self.num_joints, k_max, 3))
            wts = np.zeros((self.num_joints, k_max))
            for j, (p, w) in self._entries.items():
                pos[j, :len(w)] = p
                wts[j, :len(w)] = w
            pos.flags.writeable = False
            wts.flags.writeable = False
            self._padded_cache = (pos, wts)
        return self._padded_cache


PROPOSAL_COLUMNS = ["frame", "joint", "x", "y", "z", "confidence"]


def write_proposals_csv(path, proposal_sets):
    """Persist per-frame proposal sets as frame,joint,x,y,z,confidence rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PROPOSAL_COLUMNS)
        for frame, pset in enumerate(proposal_sets):
            for j in pset.joints:
                for pos, w in zip(pset.positions(j), pset.weights(j)):
                    writer.writerow([frame, j, f"{pos[0]:.9g}", f"{pos[1]:.9g}",
                                     f"{pos[2]:.9g}", f"{w:.9g}"])


def read_proposals_csv(path, num_frames=None):
    raw = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PROPOSAL_COLUMNS:
            raise ValueError(f"{path}:1: unexpected proposals CSV header")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 columns")
            try:
                frame, j = int(row[0]), int(row[1])
                pos = [float(v) for v in row[2:5]]
                conf = float(row[5])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            raw.setdefault(frame, {}).setdefault(j, ([], []))
            raw[frame][j][0].append(pos)
            raw[frame][j][1].append(conf)
    if num_frames is None:
        num_frames = max(raw, default=-1) + 1
    sets = []
    for frame in range(num_frames):
        entries = {j: (np.asarray(p), np.asarray(w))
                   for j, (p, w) in raw.get(frame, {}).items()}
        sets.append(ProposalSet(entries))
    return sets
