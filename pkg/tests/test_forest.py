import numpy as np
import pytest

from handfit import forest as F
from handfit import geometry, synth
from handfit.depth import render_depth
from handfit.geometry import PoseParams, forward_kinematics


@pytest.fixture(scope="module")
def rest_frame(geom, cam):
    pose = PoseParams.rest((0.0, 0.0, 550.0))
    img = render_depth(geom, pose, cam)
    return img, forward_kinematics(geom, pose)


@pytest.fixture(scope="module")
def tiny_forest(geom, cam, rest_frame):
    """Single-image forest, enough to memorize the frame it saw."""
    img, gt = rest_frame
    rng = np.random.default_rng(0)
    samples = F.build_training_set([img], [gt], stride=2, rng=rng, cap=4000)
    cfg = F.ForestConfig(num_trees=2, max_depth=12, min_samples=10,
                         node_subsample=400, candidates=60)
    return F.train_forest(samples, cfg, np.random.default_rng(1)), samples


def test_extract_zero_offset_on_joint(cam, rest_frame):
    # craft ground truth so one joint coincides exactly with a patch centre
    img, _ = rest_frame
    vs, us = np.nonzero(img.depth)
    u, v = int(us[len(us) // 2]), int(vs[len(us) // 2])
    center = cam.backproject(np.array([float(u)]), np.array([float(v)]),
                             np.array([float(img.depth[v, u])]))[0]
    gt = np.tile(center + np.array([500.0, 0, 0]), (21, 1))
    gt[7] = center  # joint 7 sits exactly on the patch centre
    samples = F.extract_samples(img, gt, stride=1, rng=np.random.default_rng(0))
    hit = (samples.pixel == [u, v]).all(axis=1)
    assert hit.sum() == 1
    idx = int(np.nonzero(hit)[0][0])
    assert samples.label[idx] == 7
    np.testing.assert_allclose(samples.offsets[idx, 7], [0, 0, 0], atol=1e-6)


def test_extract_stride_counting(cam, rest_frame):
    img, gt = rest_frame
    samples = F.extract_samples(img, gt, stride=cam.width,
                                rng=np.random.default_rng(0))
    assert len(samples) <= cam.height


def test_labels_match_brute_force_nearest(cam, rest_frame):
    img, gt = rest_frame
    samples = F.extract_samples(img, gt, stride=4, rng=np.random.default_rng(0))
    # independent nearest-joint check over every extracted pixel
    for i in range(len(samples)):
        u, v = samples.pixel[i]
        z = samples.depth[i]
        center = cam.backproject(np.array([u]), np.array([v]), np.array([z]))[0]
        dists = [np.linalg.norm(gt[j] - center) for j in range(21)]
        assert samples.label[i] == int(np.argmin(dists))
    assert len(np.unique(samples.label)) >= 2


def test_split_score_arithmetic():
    # perfect separation of a two-class node recovers the parent entropy
    left = np.zeros(5, dtype=int)
    right = np.ones(3, dtype=int)
    parent_entropy = -(5 / 8 * np.log(5 / 8) + 3 / 8 * np.log(3 / 8))
    assert F.split_score(left, right) == pytest.approx(parent_entropy, abs=1e-12)

    # identical class mixtures on both sides gain nothing
    mixed = np.array([0, 0, 1, 1])
    assert F.split_score(mixed, mixed) == pytest.approx(0.0, abs=1e-12)

    # 3-class node isolating one class: ln(3) - (2/3) ln(2), frozen from
    # direct evaluation of the entropy formula
    left = np.full(4, 2, dtype=int)
    right = np.array([0] * 4 + [1] * 4)
    assert F.split_score(left, right) == pytest.approx(0.6365141682948129,
                                                       abs=1e-12)
    assert F.split_score(np.empty(0, dtype=int), mixed) == -np.inf


def test_build_leaf_single_and_duplicate_samples(geom, cam, rest_frame):
    img, gt = rest_frame
    samples = F.extract_samples(img, gt, stride=3, rng=np.random.default_rng(0))
    cfg = F.ForestConfig()
    modes, weights = F.build_leaf(samples, np.array([0]), cfg,
                                  np.random.default_rng(0))
    for j in range(21):
        np.testing.assert_allclose(modes[j, 0], samples.offsets[0, j], atol=1e-4)
        assert weights[j, 0] == pytest.approx(1.0)
        assert weights[j, 1] == 0.0
    # two identical samples: one mode, weight 2
    dup = F.SampleSet(samples.images, samples.cam,
                      np.repeat(samples.pixel[:1], 2, axis=0),
                      np.repeat(samples.depth[:1], 2),
                      np.zeros(2, dtype=np.int32),
                      np.repeat(samples.label[:1], 2),
                      np.repeat(samples.offsets[:1], 2, axis=0))
    modes, weights = F.build_leaf(dup, np.array([0, 1]), cfg,
                                  np.random.default_rng(0))
    assert weights[0, 0] == pytest.approx(2.0)
    assert weights[0, 1] == 0.0


def test_build_leaf_two_clusters_weighted_mean_oracle(cam, rest_frame):
    img, gt = rest_frame
    base = F.extract_samples(img, gt, stride=3, rng=np.random.default_rng(0))
    rng = np.random.default_rng(4)
    n = 30
    offs = np.zeros((n, 21, 3), dtype=np.float32)
    cluster_a = rng.normal((0, 0, 0), 1.0, size=(20, 3))
    cluster_b = rng.normal((120, 0, 0), 1.0, size=(10, 3))
    offs[:20, 5] = cluster_a
    offs[20:, 5] = cluster_b
    crafted = F.SampleSet(base.images, base.cam,
                          np.tile(base.pixel[:1], (n, 1)),
                          np.full(n, base.depth[0]),
                          np.zeros(n, dtype=np.int32),
                          np.zeros(n, dtype=np.int16),
                          offs)
    cfg = F.ForestConfig(leaf_bandwidth_mm=20.0)
    modes, weights = F.build_leaf(crafted, np.arange(n), cfg,
                                  np.random.default_rng(0))
    np.testing.assert_allclose(modes[5, 0], cluster_a.mean(axis=0), atol=0.5)
    np.testing.assert_allclose(modes[5, 1], cluster_b.mean(axis=0), atol=0.5)
    assert weights[5, 0] == pytest.approx(20, abs=0.5)
    assert weights[5, 1] == pytest.approx(10, abs=0.5)


def test_train_tree_degenerate_cases(cam, rest_frame):
    img, gt = rest_frame
    rng = np.random.default_rng(0)
    samples = F.extract_samples(img, gt, stride=3, rng=rng, cap=200)
    # min_samples above the sample count: the root is a leaf
    cfg = F.ForestConfig(min_samples=len(samples) + 1)
    tree = F.train_tree(samples, cfg, np.random.default_rng(0))
    assert tree.n_nodes == 1 and tree.n_leaves == 1
    with pytest.raises(ValueError):
        F.train_tree(samples.__class__(samples.images, samples.cam,
                                       samples.pixel[:0], samples.depth[:0],
                                       samples.img_idx[:0], samples.label[:0],
                                       samples.offsets[:0]),
                     cfg, np.random.default_rng(0))

    # identical appearance everywhere: no split can gain, root stays a leaf
    flat = F.SampleSet(
        images=np.full((1, 10, 10), 500, dtype=np.uint16), cam=cam,
        pixel=np.tile(np.array([[5.0, 5.0]]), (50, 1)),
        depth=np.full(50, 500.0), img_idx=np.zeros(50, dtype=np.int32),
        label=np.zeros(50, dtype=np.int16),
        offsets=np.zeros((50, 21, 3), dtype=np.float32))
    tree = F.train_tree(flat, F.ForestConfig(min_samples=10), np.random.default_rng(0))
    assert tree.n_leaves == 1


def test_train_tree_deterministic(cam, rest_frame):
    img, gt = rest_frame
    samples = F.extract_samples(img, gt, stride=3, rng=np.random.default_rng(0))
    cfg = F.ForestConfig(num_trees=1, max_depth=8, min_samples=20,
                         node_subsample=200, candidates=40)
    t1 = F.train_tree(samples, cfg, np.random.default_rng(9))
    t2 = F.train_tree(samples, cfg, np.random.default_rng(9))
    assert np.array_equal(t1.left, t2.left)
    assert np.array_equal(t1.tau, t2.tau)
    assert np.array_equal(t1.leaf_modes, t2.leaf_modes)


def test_routing_total_and_deterministic(tiny_forest, rest_frame):
    (model, samples), (img, _) = tiny_forest, rest_frame
    for tree in model.trees:
        leaf = tree.route(samples.images, samples.img_idx.astype(np.int64),
                          samples.pixel, samples.depth, model.bg_depth_mm)
        assert np.all(leaf >= 0)
        again = tree.route(samples.images, samples.img_idx.astype(np.int64),
                           samples.pixel, samples.depth, model.bg_depth_mm)
        assert np.array_equal(leaf, again)


def test_depth_invariant_features(geom, cam):
    # the same physical probe on a hand translated in z reads the same
    # feature value: pixel offsets shrink as 1/depth while relief is rigid
    near = render_depth(geom, PoseParams.rest((0.0, 0.0, 500.0)), cam)
    far = render_depth(geom, PoseParams.rest((0.0, 0.0, 650.0)), cam)
    anchor = np.array([5.0, 40.0, 500.0])  # palm interior point
    probe_u = np.array([[4000.0, 2000.0]])
    probe_v = np.array([[-3000.0, 5000.0]])

    feats = []
    for img, z in ((near, 500.0), (far, 650.0)):
        u, v = img.cam.project(np.array([[anchor[0], anchor[1], z]]))[0]
        d = float(img.depth[int(round(v)), int(round(u))])
        sample = F.SampleSet(img.depth[None], img.cam,
                             np.array([[round(u), round(v)]], dtype=float),
                             np.array([d]), np.zeros(1, dtype=np.int64),
                             np.zeros(1, dtype=np.int16),
                             np.zeros((1, 21, 3), dtype=np.float32))
        feats.append(F._features(sample, np.array([0]), probe_u, probe_v,
                                 10000.0)[0, 0])
    assert abs(feats[0] - feats[1]) < 3.0  # rounding + resampling slack


def test_infer_memorizes_training_frame(geom, tiny_forest, rest_frame):
    (model, _), (img, gt) = tiny_forest, rest_frame
    pset = F.infer_proposals(model, img, stride=2, top_n=200, k=3)
    assert pset.count() <= 3 * 21  # at most k x J proposals
    for j in pset.joints:
        best = np.linalg.norm(pset.positions(j) - gt[j], axis=1).min()
        assert best < 20.0
    for j in pset.joints:
        assert pset.weights(j).sum() == pytest.approx(1.0, abs=1e-9)


def test_infer_k1_single_unit_proposal(tiny_forest, rest_frame):
    (model, _), (img, _) = tiny_forest, rest_frame
    pset = F.infer_proposals(model, img, stride=3, top_n=100, k=1)
    for j in pset.joints:
        assert len(pset.weights(j)) == 1
        assert pset.weights(j)[0] == pytest.approx(1.0)


def test_zero_vote_joint_omitted():
    votes = {2: (np.array([[0.0, 0.0, 500.0]]), np.array([1.0])),
             5: (np.empty((0, 3)), np.empty(0))}
    pset = F.proposals_from_votes(votes, top_n=10, k=3)
    assert 2 in pset and 5 not in pset


def test_empty_foreground_gives_no_votes(cam, tiny_forest):
    from handfit.depth import DepthImage

    (model, _) = tiny_forest
    blank = DepthImage(np.zeros((cam.height, cam.width), dtype=np.uint16), cam)
    assert F.accumulate_votes(model, blank) == {}


def test_save_load_round_trip(tmp_path, tiny_forest, rest_frame):
    (model, _), (img, _) = tiny_forest, rest_frame
    path = tmp_path / "forest.bin"
    F.save_forest(path, model)
    again = F.load_forest(path)
    a = F.infer_proposals(model, img, stride=3, top_n=100, k=3)
    b = F.infer_proposals(again, img, stride=3, top_n=100, k=3)
    assert a.joints == b.joints
    for j in a.joints:
        assert np.array_equal(a.positions(j), b.positions(j))
        assert np.array_equal(a.weights(j), b.weights(j))


def test_load_rejects_bad_files(tmp_path, tiny_forest):
    (model, _) = tiny_forest
    path = tmp_path / "forest.bin"
    F.save_forest(path, model)
    blob = path.read_bytes()

    truncated = tmp_path / "trunc.bin"
    truncated.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(F.ForestFormatError, match="byte"):
        F.load_forest(truncated)

    wrong_magic = tmp_path / "magic.bin"
    wrong_magic.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(F.ForestFormatError, match="magic"):
        F.load_forest(wrong_magic)

    import struct

    bad_version = tmp_path / "ver.bin"
    bad_version.write_bytes(blob[:4] + struct.pack("<H", 99) + blob[6:])
    with pytest.raises(F.ForestFormatError, match="version"):
        F.load_forest(bad_version)
