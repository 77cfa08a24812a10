"""Model-based fitting: proposal-distance objective and stepwise PSO.

The objective sums, per joint, the best confidence-weighted agreement
between the hypothesized joint position and that joint's proposals, with
distances clamped so far-off proposals contribute nothing. It needs only
a handful of 3D distances per evaluation: no rendering, no image access.
The 27-parameter search runs as six sub-problems: a 7-parameter global
stage scored on the palm-rigid joints, then four parameters per finger.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import geometry, quats

TRANSLATION_DIMS = np.arange(0, 3)
QUAT_DIMS = np.arange(3, 7)
GLOBAL_DIMS = np.arange(0, 7)
HYP_DIM = 27

PALM_STAGE_JOINTS = (geometry.PALM,) + tuple(geometry.mcp_index(f) for f in range(5))


class UnderConstrainedError(RuntimeError):
    """Too few palm-region proposals to determine the global pose."""


def finger_dims(finger):
    return np.arange(7 + 4 * finger, 11 + 4 * finger)


@dataclass(frozen=True)
class PsoConfig:
    """Swarm sizes per optimisation stage plus canonical PSO coefficients."""

    palm_particles: int = 26
    palm_generations: int = 26
    finger_particles: int = 23
    finger_generations: int = 23
    joint_particles: int = 67
    joint_generations: int = 50
    inertia: float = 0.7298
    cognitive: float = 1.49618
    social: float = 1.49618
    d_max: float = 100.0
    translation_margin: float = 150.0
    bounds: object = None  # optional (27, 2); derived from proposals when None
    seed: int = 0

    def __post_init__(self):
        if self.d_max <= 0:
            raise ValueError("d_max must be positive")
        for name in ("palm_particles", "finger_particles", "joint_particles"):
            if getattr(self, name) < 2:
                raise ValueError(f"{name} must be >= 2")


def clamped_distance(p, q, d_max):
    """||p - q|| / d_max clamped to [0, 1]."""
    if d_max <= 0:
        raise ValueError("d_max must be positive")
    return min(1.0, float(np.linalg.norm(np.asarray(p, dtype=float) -
                                         np.asarray(q, dtype=float))) / d_max)


def _score_joints(joint_positions, padded_pos, padded_w, d_max):
    """Objective core on precomputed joint positions.

    joint_positions (n, J, 3), padded_pos (J, K, 3), padded_w (J, K) with
    zero weight marking absent proposals -> scores (n,).
    """
    diff = joint_positions[:, :, None, :] - padded_pos[None, :, :, :]
    d = np.sqrt((diff * diff).sum(axis=3)) / d_max
    np.clip(d, None, 1.0, out=d)
    terms = padded_w[None, :, :] * (1.0 - d * d)
    return terms.max(axis=2).sum(axis=1)


def objective(proposal_set, hypothesis, geom, d_max, joint_subset=None):
    """Proposal-agreement score of hypothesis vectors.

    Accepts one (27,) vector or a (n, 27) batch. Joints absent from the
    proposal set contribute zero; `joint_subset` restricts scoring to the
    given joint indices (used by the stepwise stages). Hypotheses with a
    zero-norm quaternion score -inf.
    """
    h = np.asarray(hypothesis, dtype=float)
    single = h.ndim == 1
    h = np.atleast_2d(h)
    pos, w = proposal_set.padded()
    if joint_subset is not None:
        mask = np.zeros(w.shape[0], dtype=bool)
        mask[list(joint_subset)] = True
        w = np.where(mask[:, None], w, 0.0)

    q = h[:, QUAT_DIMS]
    norms = np.linalg.norm(q, axis=1)
    valid = norms > 1e-12
    scores = np.full(len(h), -np.inf)
    if valid.any():
        q_unit = q[valid] / norms[valid, None]
        joints = geometry.fk_batch(geom, h[valid][:, TRANSLATION_DIMS], q_unit,
                                   h[valid][:, 7:].reshape(-1, 5, 4))
        scores[valid] = _score_joints(joints, pos, w, d_max)
    return float(scores[0]) if single else scores


@dataclass
class PsoResult:
    best: np.ndarray
    score: float
    evals: int
    trace: np.ndarray  # global-best score after each generation


def _sanitize_quat(x):
    """Renormalize quaternion dims in-place; zero-norm resets to identity."""
    q = x[:, QUAT_DIMS]
    norms = np.linalg.norm(q, axis=1)
    dead = norms < 1e-12
    if dead.any():
        q[dead] = quats.IDENTITY
        norms[dead] = 1.0
    x[:, QUAT_DIMS] = q / norms[:, None]


def pso_optimize(score_fn, bounds, active_dims, particles, generations,
                 cfg, seeds, rng):
    """Canonical global-best PSO over `active_dims`; other dims stay frozen.

    score_fn maps an (n, 27) batch to (n,) scores (higher is better).
    Particles start from `seeds` (first seed also supplies the frozen
    dims) topped up with uniform draws inside `bounds`; velocities start
    at zero. The initial evaluation counts as generation one, so the
    total evaluation budget is particles * generations.
    """
    if not seeds:
        raise ValueError("pso_optimize needs at least one seed hypothesis")
    bounds = np.asarray(bounds, dtype=float)
    active = np.asarray(active_dims, dtype=int)
    if not np.all(np.isfinite(bounds[active])):
        raise ValueError("bounds must be finite on active dims")
    lo, hi = bounds[active, 0], bounds[active, 1]
    quat_active = bool(np.intersect1d(active, QUAT_DIMS).size)

    x = np.tile(np.asarray(seeds[0], dtype=float), (particles, 1))
    for i, seed in enumerate(seeds[:particles]):
        x[i] = seed
    n_seeded = min(len(seeds), particles)
    if particles > n_seeded:
        u = rng.random((particles - n_seeded, len(active)))
        x[n_seeded:, active] = lo + u * (hi - lo)
    if quat_active:
        _sanitize_quat(x)

    v = np.zeros((particles, len(active)))
    scores = score_fn(x)
    evals = particles
    pbest = x.copy()
    pscore = scores.copy()
    g = int(np.argmax(pscore))
    gbest = pbest[g].copy()
    gscore = float(pscore[g])
    trace = [gscore]

    for _ in range(1, generations):
        r1 = rng.random((particles, len(active)))
        r2 = rng.random((particles, len(active)))
        v = (cfg.inertia * v
             + cfg.cognitive * r1 * (pbest[:, active] - x[:, active])
             + cfg.social * r2 * (gbest[active] - x[:, active]))
        x[:, active] = np.clip(x[:, active] + v, lo, hi)
        if quat_active:
            _sanitize_quat(x)
        scores = score_fn(x)
        evals += particles
        improved = scores > pscore
        pbest[improved] = x[improved]
        pscore[improved] = scores[improved]
        g = int(np.argmax(pscore))
        if pscore[g] > gscore:
            gbest = pbest[g].copy()
            gscore = float(pscore[g])
        trace.append(gscore)

    return PsoResult(best=gbest, score=gscore, evals=evals,
                     trace=np.asarray(trace))


def default_bounds(proposal_set, limits, margin):
    """Search box: proposal bounding box +- margin for translation,
    [-1, 1] for quaternion components, joint limits for angles."""
    bounds = np.empty((HYP_DIM, 2))
    all_pos = np.concatenate([proposal_set.positions(j) for j in proposal_set.joints])
    bounds[TRANSLATION_DIMS, 0] = all_pos.min(axis=0) - margin
    bounds[TRANSLATION_DIMS, 1] = all_pos.max(axis=0) + margin
    bounds[QUAT_DIMS, 0] = -1.0
    bounds[QUAT_DIMS, 1] = 1.0
    bounds[7:, 0] = limits.lower.ravel()
    bounds[7:, 1] = limits.upper.ravel()
    return bounds


def _check_palm_constrained(proposal_set):
    pts = [proposal_set.positions(j) for j in PALM_STAGE_JOINTS if j in proposal_set]
    if not pts:
        raise UnderConstrainedError("no palm or MCP proposals at all")
    pts = np.concatenate(pts)
    if len(pts) < 3:
        raise UnderConstrainedError(
            f"only {len(pts)} palm-region proposals; need >= 3 non-collinear")
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[1] < 1e-3:
        raise UnderConstrainedError("palm-region proposals are collinear")


def _warm_start(proposal_set, limits):
    """Neutral-fingers hypothesis translated onto the strongest palm proposal."""
    neutral = np.clip(np.zeros((5, 4)), limits.lower, limits.upper)
    if geometry.PALM in proposal_set:
        t = proposal_set.top(geometry.PALM)
    else:
        mcps = [proposal_set.top(j) for j in PALM_STAGE_JOINTS if j in proposal_set]
        t = np.mean(mcps, axis=0)
    return geometry.PoseParams(t, quats.IDENTITY.copy(), neutral).to_vector()


def _cube_orientations():
    """The 24 rotational symmetries of the cube, as unit quaternions."""
    out = [quats.IDENTITY.copy()]
    for axis in ((1, 0, 0), (0, 1, 0), (0, 0, 1)):
        for deg in (90.0, 180.0, -90.0):
            out.append(quats.from_axis_angle(axis, np.radians(deg)))
    for sx in (1, -1):
        for sy in (1, -1):
            for deg in (120.0, -120.0):
                out.append(quats.from_axis_angle((sx, sy, 1), np.radians(deg)))
    for axis in ((1, 1, 0), (1, -1, 0), (1, 0, 1), (1, 0, -1), (0, 1, 1), (0, 1, -1)):
        out.append(quats.from_axis_angle(axis, np.radians(180.0)))
    return np.asarray(out)


_PALM_SEED_ORIENTATIONS = _cube_orientations()


def _palm_seeds(proposal_set, limits):
    """Warm-start seeds: the palm-anchored translation under a coarse
    orientation cover, so the global stage never searches SO(3) blind."""
    base = _warm_start(proposal_set, limits)
    seeds = []
    for q in _PALM_SEED_ORIENTATIONS:
        vec = base.copy()
        vec[QUAT_DIMS] = q
        seeds.append(vec)
    return seeds


@dataclass
class FitResult:
    pose: geometry.PoseParams
    score: float
    evals: int
    finger_fitted: tuple  # 5 bools; False = no proposals, finger left neutral

    def joints(self, geom):
        return geometry.forward_kinematics(geom, self.pose)


def stepwise_fit(proposal_set, geom, limits, cfg=None, rng=None):
    """Six-stage fit: global pose from palm-rigid joints, then each finger.

    Raises UnderConstrainedError when the palm stage lacks three
    non-collinear proposals. Fingers without any proposals stay neutral
    and are flagged in the result.
    """
    cfg = cfg or PsoConfig()
    rng = rng or np.random.default_rng(cfg.seed)
    _check_palm_constrained(proposal_set)
    bounds = np.asarray(cfg.bounds, dtype=float) if cfg.bounds is not None \
        else default_bounds(proposal_set, limits, cfg.translation_margin)

    def stage_score(joint_subset):
        return lambda batch: objective(proposal_set, batch, geom, cfg.d_max,
                                       joint_subset=joint_subset)

    palm = pso_optimize(stage_score(PALM_STAGE_JOINTS), bounds, GLOBAL_DIMS,
                        cfg.palm_particles, cfg.palm_generations, cfg,
                        seeds=_palm_seeds(proposal_set, limits), rng=rng)
    current = palm.best.copy()
    evals = palm.evals

    fitted = []
    for f in range(5):
        joints_f = geometry.finger_joint_indices(f)
        if not any(j in proposal_set for j in joints_f):
            fitted.append(False)
            continue
        res = pso_optimize(stage_score(joints_f), bounds, finger_dims(f),
                           cfg.finger_particles, cfg.finger_generations, cfg,
                           seeds=[current], rng=rng)
        current = res.best.copy()
        evals += res.evals
        fitted.append(True)

    pose = geometry.clamp_to_limits(geometry.PoseParams.from_vector(current), limits)
    score = objective(proposal_set, pose.to_vector(), geom, cfg.d_max)
    return FitResult(pose=pose, score=score, evals=evals, finger_fitted=tuple(fitted))


def joint_fit(proposal_set, geom, limits, cfg=None, rng=None):
    """Ablation baseline: one PSO over all 27 parameters, same objective."""
    cfg = cfg or PsoConfig()
    rng = rng or np.random.default_rng(cfg.seed)
    _check_palm_constrained(proposal_set)
    bounds = np.asarray(cfg.bounds, dtype=float) if cfg.bounds is not None \
        else default_bounds(proposal_set, limits, cfg.translation_margin)
    score_fn = lambda batch: objective(proposal_set, batch, geom, cfg.d_max)
    res = pso_optimize(score_fn, bounds, np.arange(HYP_DIM),
                       cfg.joint_particles, cfg.joint_generations, cfg,
                       seeds=_palm_seeds(proposal_set, limits), rng=rng)
    pose = geometry.clamp_to_limits(geometry.PoseParams.from_vector(res.best), limits)
    score = objective(proposal_set, pose.to_vector(), geom, cfg.d_max)
    return FitResult(pose=pose, score=score, evals=res.evals,
                     finger_fitted=(True,) * 5)


FIT_COLUMNS = geometry.POSE_COLUMNS + ["score", "evals"] + \
    [f"fitted_{f}" for f in geometry.FINGERS]


def write_fits_csv(path, results):
    """Pose trace: 27 parameters + score + eval count + per-finger flags."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame"] + FIT_COLUMNS)
        for frame, res in enumerate(results):
            row = [frame]
            row += [f"{v:.9g}" for v in res.pose.to_vector()]
            row += [f"{res.score:.9g}", res.evals]
            row += [int(flag) for flag in res.finger_fitted]
            writer.writerow(row)


def read_fits_csv(path):
    results = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["frame"] + FIT_COLUMNS:
            raise ValueError(f"{path}:1: unexpected fit CSV header")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 1 + len(FIT_COLUMNS):
                raise ValueError(f"{path}:{lineno}: wrong column count")
            vec = np.array([float(v) for v in row[1:28]])
            results.append(FitResult(
                pose=geometry.PoseParams.from_vector(vec),
                score=float(row[28]),
                evals=int(row[29]),
                finger_fitted=tuple(bool(int(v)) for v in row[30:35]),
            ))
    return results
