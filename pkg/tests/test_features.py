import numpy as np
import pytest

from metasel import features, nn

from conftest import random_net


def store_with(accs, rng, sizes=(3, 5, 4, 3)):
    s = nn.CheckpointStore()
    for e, a in enumerate(accs, start=1):
        nn.checkpoint(s, e, random_net(rng, list(sizes)), a)
    return s


# checkpoints -------------------------------------------------------------------

def test_sample_checkpoints_uniform(rng):
    s = store_with([0.1, 0.9, 0.5, 0.6, 0.7, 0.2], rng)
    picks = features.sample_checkpoints(s, 3, seed=4)
    assert picks == sorted(picks) and len(set(picks)) == 3 and min(picks) > 2
    assert picks == features.sample_checkpoints(s, 3, seed=4)
    assert features.sample_checkpoints(store_with([0.1, 0.9, 0.3], rng), 1) == [3]
    with pytest.raises(ValueError):
        features.sample_checkpoints(s, 5)


def test_sample_checkpoints_stride(rng):
    s = store_with([0.9] + [0.1] * 60, rng, sizes=(2, 2))
    assert features.sample_checkpoints(s, None, "stride", 20) == [21, 41, 61]
    assert features.sample_checkpoints(s, 2, "stride", 20) == [21, 41]
    with pytest.raises(ValueError):
        features.sample_checkpoints(s, 4, "stride", 20)


def test_sample_checkpoints_none_after_best(rng):
    with pytest.raises(ValueError):
        features.sample_checkpoints(store_with([0.1, 0.9], rng), 1)


# RBC ---------------------------------------------------------------------------

def test_rbc_full_is_last_layer_gradient(rng):
    p = random_net(rng, [4, 6, 5, 3])
    X = rng.standard_normal((5, 4))
    y = rng.integers(0, 3, 5)
    F = features.rbc_features(p, X, y, "full")
    for j in range(5):
        g = nn.per_sample_gradient(p, X[j], y[j])
        np.testing.assert_allclose(F[j], g.weights[-1].ravel(), atol=1e-10, rtol=0)
    Fb = features.rbc_features(p, X, y, "full", include_bias=True)
    np.testing.assert_allclose(Fb[0], g_flat(p, X[0], y[0]), atol=1e-10, rtol=0)


def g_flat(p, x, y):
    g = nn.per_sample_gradient(p, x, y)
    return g.layer_vector(p.n_layers - 1)


def test_rbc_confident_correct_is_zero():
    p = nn.NetworkParams([np.array([[800.0, 0.0], [0.0, 0.0]])], [np.zeros(2)])
    assert np.abs(features.rbc_feature(p, [1.0, 0.0], 0)).max() == 0.0


def test_rbc_zero_last_input():
    p = nn.NetworkParams([np.zeros((3, 2)), np.ones((2, 3))], [-np.ones(3), np.zeros(2)])
    assert not features.rbc_feature(p, [0.5, 0.5], 1, "label_free").any()


def test_rbc_label_free_decomposition(rng):
    p = random_net(rng, [3, 4, 3])
    X = rng.standard_normal((6, 3))
    y = rng.integers(0, 3, 6)
    full = features.rbc_features(p, X, y, "full")
    free = features.rbc_features(p, X, None, "label_free")
    dep = features.rbc_features(p, X, y, "label_dependent")
    # (a - b) x and a x - b x agree up to one rounding
    np.testing.assert_allclose(full, free - dep, rtol=1e-15, atol=1e-15)


# GBC ---------------------------------------------------------------------------

def test_layer_importance_brute_force():
    p = nn.NetworkParams([np.array([[0.5, -1.0], [0.3, 0.2], [1.0, 1.0]]),
                          np.array([[1.0, -0.5, 0.2], [-0.3, 0.8, 0.1]])],
                         [np.array([0.1, 0.0, -0.2]), np.array([0.05, -0.05])])
    X = np.array([[1.0, 2.0], [-1.0, 0.5], [0.3, -0.7]])
    y = np.array([0, 1, 1])
    masses, total = features.layer_importance(p, X, y)
    gs = [nn.per_sample_gradient(p, x, t) for x, t in zip(X, y)]
    want = []
    for l in range(2):
        w = sum(g.weights[l] for g in gs) / 3
        b = sum(g.biases[l] for g in gs) / 3
        want.append((w ** 2).sum() + (b ** 2).sum())
    np.testing.assert_allclose(masses, want, rtol=1e-12, atol=0)
    assert total == pytest.approx(sum(want), rel=1e-12)
    dup, _ = features.layer_importance(p, np.vstack([X, X]), np.concatenate([y, y]))
    np.testing.assert_allclose(dup, masses, rtol=1e-12)


def test_single_layer_plan(rng):
    p = random_net(rng, [3, 2])
    X = rng.standard_normal((4, 3))
    y = rng.integers(0, 2, 4)
    masses, total = features.layer_importance(p, X, y)
    plan = features.make_plan(masses, total, r=1)
    assert plan.probabilities.tolist() == [1.0] and plan.scales.tolist() == [1.0]
    blk = features.gbc_feature(p, plan, X[0], y[0])
    np.testing.assert_allclose(blk, nn.per_sample_gradient(p, X[0], y[0]).flat())


def test_layer_importance_errors():
    p = nn.NetworkParams([np.zeros((2, 2))], [np.zeros(2)])
    with pytest.raises(ValueError):
        features.layer_importance(p, np.empty((0, 2)))
    # symmetric samples cancel: mean gradient zero
    with pytest.raises(ValueError, match="zero"):
        features.layer_importance(p, np.array([[1.0, 0.0], [1.0, 0.0]]), np.array([0, 1]))


def test_gbc_shared_plan_and_mismatch(rng):
    p = random_net(rng, [3, 4, 4, 2])
    x = rng.standard_normal(3)
    masses, total = features.layer_importance(p, x[None], np.array([1]))
    plan = features.make_plan(masses, total, 5, seed=1)
    F = features.gbc_features(p, plan, np.vstack([x, x]), np.array([1, 1]))
    np.testing.assert_array_equal(F[0], F[1])
    assert plan.probabilities.sum() == pytest.approx(1.0)
    bad = features.make_plan(masses[:2], masses[:2].sum(), 5)
    with pytest.raises(ValueError):
        features.gbc_features(p, bad, x[None], np.array([1]))


def test_gbc_compact_preserves_inner_products(rng):
    p = random_net(rng, [3, 4, 4, 2])
    X = rng.standard_normal((5, 3))
    y = rng.integers(0, 2, 5)
    masses, total = features.layer_importance(p, X, y)
    plan = features.make_plan(masses, total, 7, seed=3)
    a = features.gbc_features(p, plan, X, y)
    b = features.gbc_features(p, plan, X, y, compact=True)
    np.testing.assert_allclose(a @ a.T, b @ b.T, rtol=1e-12, atol=1e-15)


def test_gbc_unscaled_mode(rng):
    masses = np.array([1.0, 3.0])
    plan = features.make_plan(masses, 4.0, 4, seed=0, scaled=False)
    assert (plan.scales == 1.0).all()
    scaled = features.make_plan(masses, 4.0, 4, seed=0)
    np.testing.assert_allclose(scaled.scales, np.sqrt(4.0 / (4 * masses[scaled.draws])))


# assembly ----------------------------------------------------------------------

def test_assemble_rbc_matches_per_checkpoint_sum(rng):
    s = store_with([0.2, 0.3, 0.4], rng)
    X = rng.standard_normal((4, 3))
    y = rng.integers(0, 3, 4)
    fs = features.assemble_features(s, [1, 3], X, y, "rbc", "full")
    assert fs.layout.block_dims == [12, 12] and fs.matrix.shape == (4, 24)
    G = fs.matrix @ fs.matrix.T
    for i in range(4):
        for j in range(4):
            want = sum(np.vdot(nn.per_sample_gradient(s[t], X[i], y[i]).weights[-1],
                               nn.per_sample_gradient(s[t], X[j], y[j]).weights[-1])
                       for t in (1, 3))
            assert G[i, j] == pytest.approx(want, abs=1e-10)
    single = features.assemble_features(s, [2], X, y, "rbc", "full")
    np.testing.assert_array_equal(single.matrix, features.rbc_features(s[2], X, y))


def test_assemble_permutation_equivariant(rng):
    s = store_with([0.2, 0.3, 0.4], rng)
    X = rng.standard_normal((6, 3))
    perm = rng.permutation(6)
    for method in ("rbc", "gbc"):
        a = features.assemble_features(s, [2, 3], X, None, method, "label_free", seed=2,
                                       importance_X=X)
        b = features.assemble_features(s, [2, 3], X[perm], None, method, "label_free", seed=2,
                                       importance_X=X)
        np.testing.assert_allclose(b.matrix, a.matrix[perm], atol=1e-14)


def test_assemble_chunking_is_invisible(rng):
    s = store_with([0.2, 0.3], rng)
    X = rng.standard_normal((9, 3))
    a = features.assemble_features(s, [1, 2], X, None, "gbc", "label_free", seed=5)
    b = features.assemble_features(s, [1, 2], X, None, "gbc", "label_free", seed=5, chunk=2)
    np.testing.assert_allclose(a.matrix, b.matrix, rtol=1e-14, atol=1e-16)


def test_feature_dump_round_trip(rng, tmp_path):
    s = store_with([0.2, 0.3, 0.4], rng)
    X = rng.standard_normal((5, 3))
    fs = features.assemble_features(s, [2, 3], X, None, "gbc", "label_free", seed=1)
    fs.indices = np.array([10, 11, 12, 13, 14])
    features.save_features(tmp_path / "f.bin", fs)
    back = features.load_features(tmp_path / "f.bin")
    assert np.array_equal(back.matrix, fs.matrix)
    assert back.layout.to_dict() == fs.layout.to_dict()
    assert back.indices.tolist() == [10, 11, 12, 13, 14]
    raw = (tmp_path / "f.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        features.load_features(tmp_path / "bad.bin")
    (tmp_path / "bad.bin").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(ValueError):
        features.load_features(tmp_path / "bad.bin")


def test_feature_set_layout_check():
    layout = features.FeatureLayout([1], [3], "rbc", "full")
    with pytest.raises(ValueError):
        features.FeatureSet(np.zeros((2, 4)), layout)
