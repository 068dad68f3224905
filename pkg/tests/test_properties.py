"""Randomised invariants."""
import numpy as np
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from metasel import analysis, cluster, data, nn, reweight

from oracles import auc_pairs, mco_sum, msso_sum

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
seeds = st.integers(0, 2 ** 31 - 1)
FAST = settings(max_examples=60, deadline=None)


def matrix(rows, cols, lo=-5.0, hi=5.0):
    return arrays(np.float64, (rows, cols), elements=st.floats(lo, hi, allow_nan=False))


@FAST
@given(arrays(np.float64, st.integers(1, 12), elements=finite))
def test_softmax_is_a_distribution(z):
    p = nn.softmax(z)
    assert np.all(p >= 0) and abs(p.sum() - 1.0) < 1e-12


@FAST
@given(seeds, st.sampled_from(["relu", "tanh"]))
def test_gradient_decomposition(seed, act):
    rng = np.random.default_rng(seed)
    sizes = [int(rng.integers(1, 6)) for _ in range(int(rng.integers(2, 5)))] + [3]
    p = nn.init_params(sizes, act, seed)
    x = rng.standard_normal(sizes[0])
    y = int(rng.integers(0, 3))
    full = nn.per_sample_gradient(p, x, y)
    diff = nn.per_sample_gradient(p, x, y, "label_free") - \
        nn.per_sample_gradient(p, x, y, "label_dependent")
    for a, b in zip(full.weights + full.biases, diff.weights + diff.biases):
        np.testing.assert_allclose(a, b, rtol=1e-14, atol=1e-15)


@FAST
@given(arrays(np.float64, 8, elements=st.floats(0, 1)), arrays(np.float64, 8, elements=finite))
def test_shu_weights_stay_in_unit_interval(w, delta):
    out = reweight.apply_weight_update_shu(w, delta)
    assert np.all((out >= 0) & (out <= 1))


@FAST
@given(arrays(np.float64, st.integers(1, 10), elements=finite))
def test_ren_weights_normalised(delta):
    w = reweight.apply_weight_update_ren(delta)
    assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-12


@FAST
@given(arrays(np.float64, 5, elements=st.floats(-10, 10)),
       arrays(np.float64, 5, elements=st.floats(-10, 10)))
def test_similarity_sign_invariant(g, c):
    assume(np.linalg.norm(c) > 1e-3)
    assert cluster.weighted_similarity(-g, c) == cluster.weighted_similarity(g, c)


@FAST
@given(matrix(10, 4), matrix(3, 4), st.floats(1e-3, 1e3))
def test_assignment_scale_free(F, C, lam):
    assume((np.linalg.norm(C, axis=1) > 1e-3).all())
    S = cluster.similarity_matrix(F, C)
    top = np.sort(S, axis=1)
    # skip near-ties, where rounding may legitimately pick another index
    assume(np.all(top[:, -1] - top[:, -2] > 1e-9 * (1 + top[:, -1])))
    G = F.copy()
    G[0] *= lam
    np.testing.assert_array_equal(cluster.kmeans_assign(F, C), cluster.kmeans_assign(G, C))


@FAST
@given(matrix(6, 3), matrix(3, 3))
def test_msso_le_mco_and_forms_agree(F, C):
    msso, mco = analysis.msso_value(F, C), analysis.mco_value(F, C)
    assert msso <= mco * (1 + 1e-12) + 1e-12
    assert abs(analysis.mco_value(F, C, "cosine") - mco) <= 1e-10 * max(1.0, mco)
    assert abs(msso - msso_sum(F, C)) <= 1e-10 * max(1.0, msso)
    assert abs(mco - mco_sum(F, C)) <= 1e-10 * max(1.0, mco)


@FAST
@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=2, max_size=40))
def test_auc_oracle_and_monotone_invariance(pairs):
    w = np.array([p[0] for p in pairs])
    f = np.array([p[1] for p in pairs])
    assume(f.any() and not f.all())
    auc = analysis.auc_weights_vs_clean(w, f)
    assert 0 <= auc <= 1 and abs(auc - auc_pairs(w, f)) < 1e-12
    # a strictly increasing map of the distinct values (float rounding could merge
    # neighbours under an arbitrary closed-form transform)
    _, level = np.unique(w, return_inverse=True)
    assert analysis.auc_weights_vs_clean(np.sqrt(level + 1.0) * 10 - 4, f) == auc


@FAST
@given(seeds, st.floats(0, 100))
def test_corruption_preserves_clean_labels(seed, p):
    ds = data.gen_gaussian_mixture(60, seed=seed % 1000)
    for noisy, rep in (data.inject_uniform_noise(ds, p, seed),
                       data.inject_adversarial_noise(ds, p, None, seed)):
        assert np.array_equal(noisy.clean_labels, ds.clean_labels)
        assert np.array_equal(noisy.features, ds.features)
        assert 0 <= rep.realized_fraction <= 1
        changed = noisy.observed_labels != ds.observed_labels
        assert not changed[ds.split != "train"].any()


@FAST
@given(st.integers(3, 400), st.floats(0, 1), st.floats(0, 1), seeds)
def test_split_partitions(n, a, b, seed):
    total = a + b + 1.0
    fr = (1.0 / total, a / total, b / total)
    sizes = data.split_sizes(n, fr)
    assume(all(s > 0 for s, f in zip(sizes, fr) if f > 0))
    ds = data.Dataset(np.zeros((n, 1)), np.zeros(n), np.zeros(n), np.full(n, "train"), 1)
    out = data.split(ds, fr, seed)
    counts = [int((out.split == t).sum()) for t in ("train", "validation", "test")]
    assert counts == sizes.tolist() and sum(counts) == n


@FAST
@given(st.integers(2, 10), st.floats(1, 300), seeds)
def test_long_tail_profile(classes, factor, seed):
    c = data.long_tail_counts(1000, classes, factor)
    assert np.all(np.diff(c) <= 0) and c[0] == 1000
    assert abs(c[-1] - np.floor(1000 / factor + 1e-9)) == 0


@FAST
@given(seeds, st.integers(1, 5))
def test_kmeans_deterministic_and_monotone(seed, m):
    F = np.random.default_rng(seed).standard_normal((25, 4))
    a = cluster.kmeans_with_restart(F, m, seed)
    b = cluster.kmeans_with_restart(F, m, seed)
    assert np.array_equal(a.centroids, b.centroids)
    assert a.n_empty == 0 and a.n_clusters <= m
    assert all(after >= before - 1e-12 * max(1.0, before) for before, after in a.assign_trace)
