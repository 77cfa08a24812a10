"""Training/test corpora: articulation grids, interpolated sequences, datasets.

The training grid follows the protocol of combining a handful of named
articulation templates per finger under a small set of whole-hand
viewpoints; the test material is a keypose-interpolated sequence with the
global pose held fixed, subsampled to simulate faster motion.
"""

from __future__ import annotations

import itertools
from importlib import resources
from pathlib import Path

import numpy as np

from . import geometry, quats
from .config import read_keyvalue
from .depth import DepthImage, render_depth, write_pgm, read_pgm

TEMPLATE_NAMES = ("extended", "flexed", "half", "spread")


def _data_path(name):
    return resources.files("handfit") / "data" / name


def load_articulations(path=None):
    """Per-finger articulation templates -> (5, n_templates, 4) radians."""
    if path is None:
        with resources.as_file(_data_path("articulations.txt")) as p:
            return load_articulations(p)
    kv = read_keyvalue(path)
    out = np.zeros((5, len(TEMPLATE_NAMES), 4))
    for f, finger in enumerate(geometry.FINGERS):
        for t, tmpl in enumerate(TEMPLATE_NAMES):
            for a, angle in enumerate(geometry.ANGLE_NAMES):
                out[f, t, a] = np.radians(float(kv[f"{finger}.{tmpl}.{angle}_deg"]))
    return out


def load_viewpoints(path=None):
    """Whole-hand orientations -> (n_views, 4) unit quaternions."""
    if path is None:
        with resources.as_file(_data_path("viewpoints.txt")) as p:
            return load_viewpoints(p)
    kv = read_keyvalue(path)
    views = []
    i = 0
    while f"view{i}.angle_deg" in kv:
        axis = np.array([float(kv[f"view{i}.axis.{ax}"]) for ax in "xyz"])
        angle = np.radians(float(kv[f"view{i}.angle_deg"]))
        views.append(quats.from_axis_angle(axis, angle))
        i += 1
    if not views:
        raise ValueError(f"{path}: no viewpoints found")
    return np.asarray(views)


def generate_training_poses(articulations=None, viewpoints=None, *,
                            limits=None, translation=(0.0, 0.0, 550.0),
                            per_finger=None, num_views=None):
    """Cartesian articulation grid under every viewpoint.

    With the default 4 templates per finger and 7 viewpoints this yields
    4**5 * 7 = 7168 poses. Every pose is validated against the limits.
    """
    if articulations is None:
        articulations = load_articulations()
    if viewpoints is None:
        viewpoints = load_viewpoints()
    if limits is None:
        limits = geometry.JointLimits.default()
    if per_finger is not None:
        articulations = articulations[:, :per_finger]
    if num_views is not None:
        viewpoints = viewpoints[:num_views]
    translation = np.asarray(translation, dtype=float)

    n_templates = articulations.shape[1]
    poses = []
    for view in viewpoints:
        for combo in itertools.product(range(n_templates), repeat=5):
            angles = np.stack([articulations[f, c] for f, c in enumerate(combo)])
            pose = geometry.PoseParams(translation, view, angles)
            if not geometry.validate_pose(pose, limits):
                raise ValueError("articulation template violates joint limits")
            poses.append(pose)
    return poses


def interpolate_pose(a, b, t, limits):
    """Parameter-space interpolation: slerp orientation, lerp the rest."""
    trans = (1.0 - t) * a.translation + t * b.translation
    quat = quats.slerp(quats.normalize(a.orientation),
                       quats.normalize(b.orientation), t)
    angles = (1.0 - t) * a.finger_angles + t * b.finger_angles
    return geometry.clamp_to_limits(geometry.PoseParams(trans, quat, angles), limits)


def generate_sequence(keyposes, frames_between, subsample, limits=None):
    """Interpolated sequence through `keyposes`, then every subsample-th frame.

    Each keypose segment contributes frames_between + 1 frames (start
    inclusive, end exclusive), so n keyposes produce (n-1)*(frames_between+1)
    frames before subsampling.
    """
    if len(keyposes) < 2:
        raise ValueError("need at least 2 keyposes")
    if frames_between < 1:
        raise ValueError("frames_between must be >= 1")
    if limits is None:
        limits = geometry.JointLimits.default()
    frames = []
    steps = frames_between + 1
    for a, b in zip(keyposes[:-1], keyposes[1:]):
        for i in range(steps):
            frames.append(interpolate_pose(a, b, i / steps, limits))
    return frames[::subsample]


def make_track_keyposes(rng, count, *, articulations=None, limits=None,
                        translation=(0.0, 0.0, 550.0), orientation=None):
    """Random articulation-grid keyposes with a fixed global pose.

    The tracked-sequence analog articulates fingers while position and
    orientation stay constant, so keyposes share one translation/quaternion.
    """
    if articulations is None:
        articulations = load_articulations()
    if limits is None:
        limits = geometry.JointLimits.default()
    if orientation is None:
        orientation = quats.IDENTITY.copy()
    translation = np.asarray(translation, dtype=float)
    n_templates = articulations.shape[1]
    keyposes = []
    for _ in range(count):
        combo = rng.integers(0, n_templates, size=5)
        angles = np.stack([articulations[f, c] for f, c in enumerate(combo)])
        pose = geometry.PoseParams(translation, orientation, angles)
        keyposes.append(geometry.clamp_to_limits(pose, limits))
    return keyposes


def render_poses(poses, geom, cam, *, jitter_mm=0.0, rng=None):
    """Render each pose; optional uniform depth jitter on foreground pixels."""
    images = []
    for pose in poses:
        img = render_depth(geom, pose, cam)
        if jitter_mm > 0.0:
            if rng is None:
                raise ValueError("depth jitter requires an rng")
            grid = img.depth.astype(np.int32)
            fg = grid > 0
            noise = rng.uniform(-jitter_mm, jitter_mm, size=int(fg.sum()))
            grid[fg] = np.clip(grid[fg] + np.rint(noise).astype(np.int32), 1, 65534)
            img = DepthImage(grid.astype(np.uint16), cam)
        images.append(img)
    return images


def write_split(split_dir, poses, images):
    """Persist one dataset split: poses.csv plus frame_%05d.pgm files."""
    split_dir = Path(split_dir)
    split_dir.mkdir(parents=True, exist_ok=True)
    geometry.write_poses_csv(split_dir / "poses.csv", poses)
    for i, img in enumerate(images):
        write_pgm(split_dir / f"frame_{i:05d}.pgm", img)


def read_split(split_dir, cam):
    split_dir = Path(split_dir)
    poses_path = split_dir / "poses.csv"
    if not poses_path.exists():
        raise FileNotFoundError(str(poses_path))
    poses = geometry.read_poses_csv(poses_path)
    images = []
    for i in range(len(poses)):
        frame = split_dir / f"frame_{i:05d}.pgm"
        if not frame.exists():
            raise FileNotFoundError(str(frame))
        images.append(read_pgm(frame, cam))
    return poses, images
