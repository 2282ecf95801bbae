import numpy as np
import pytest

from marginlab.data import BlobConfig, gen_blobs, normalize
from marginlab.errors import (
    DegenerateGradientError,
    DegenerateVarianceError,
    DomainError,
    UnreachableSubspaceError,
)
from marginlab.margin import (
    MarginResult,
    SearchConfig,
    SearchStatus,
    TvNormalizer,
    compute_total_variation,
    constrained_deepfool_margin,
    constrained_taylor_margin,
    deepfool_margin,
    deepfool_margin_batch,
    fit_tv_normalizer,
    taylor_margin,
    tv_normalize,
)
from marginlab.nnet import (
    DenseLayer,
    Network,
    TrainConfig,
    forward,
    init_network,
    predict,
    predict_batch,
    train_sgd,
)
from marginlab.pca import PcaModel, fit_pca


def two_class_line():
    """f1 = x1, f2 = 1 - x1: the decision boundary is the line x1 = 0.5."""
    layer = DenseLayer(weights=np.array([[1.0, 0.0], [-1.0, 0.0]]),
                       bias=np.array([0.0, 1.0]), activation="none")
    return Network(layers=[layer], input_dim=2, num_classes=2, norm_meta=None)


def random_affine(rng, dim=10, classes=3):
    layer = DenseLayer(weights=rng.normal(size=(classes, dim)),
                       bias=rng.normal(size=classes), activation="none")
    return Network(layers=[layer], input_dim=dim, num_classes=classes,
                   norm_meta=None)


def analytic_linear_margin(net, x):
    """Point-to-hyperplane distance for a one-layer linear net."""
    w = net.layers[0].weights
    b = net.layers[0].bias
    logits = w @ x + b
    i = int(np.argmax(logits))
    best = np.inf
    for j in range(net.num_classes):
        if j == i:
            continue
        denom = np.linalg.norm(w[i] - w[j])
        if denom < 1e-12:
            continue
        best = min(best, (logits[i] - logits[j]) / denom)
    return best


def orthonormal_pca(rng, n, m=None):
    X = rng.normal(size=(max(4 * n, 20), n))
    return fit_pca(X, n_components=m)


# ---------------------------------------------------------------------------
# Taylor margin


def test_taylor_margin_linear_hand_example():
    net = two_class_line()
    r = taylor_margin(net, 0, np.array([1.0, 0.0]))
    assert r.d_best == pytest.approx(0.5, abs=1e-15)
    assert r.class_pair == (0, 1)
    assert r.v_best == pytest.approx(1.0)
    assert r.steps == 0
    assert r.boundary_point is None


def test_taylor_margin_on_boundary_is_zero():
    net = two_class_line()
    r = taylor_margin(net, 0, np.array([0.5, 3.0]))
    assert r.d_best == 0.0


def test_taylor_margin_matches_formula_rederivation():
    from marginlab.nnet import logit_diff_grad

    rng = np.random.default_rng(17)
    for _ in range(30):
        net = random_affine(rng, dim=6, classes=4)
        hidden = DenseLayer(weights=rng.normal(size=(8, 6)),
                            bias=rng.normal(size=8), activation="relu")
        out = DenseLayer(weights=rng.normal(size=(4, 8)),
                         bias=rng.normal(size=4), activation="none")
        net = Network(layers=[hidden, out], input_dim=6, num_classes=4,
                      norm_meta=None)
        x = rng.normal(size=6)
        i = predict(net, x)
        expected = np.inf
        expected_pair = None
        for j in range(4):
            if j == i:
                continue
            o, w = logit_diff_grad(net, 0, x, i, j)
            nrm = np.linalg.norm(w)
            if nrm < 1e-12:
                continue
            if o / nrm < expected:
                expected = o / nrm
                expected_pair = (i, j)
        r = taylor_margin(net, 0, x)
        assert abs(r.d_best - expected) <= 1e-12
        assert r.class_pair == expected_pair


def test_taylor_margin_target_and_second_highest():
    rng = np.random.default_rng(23)
    net = random_affine(rng, dim=5, classes=4)
    x = rng.normal(size=5)
    logits = forward(net, x).per_layer[-1]
    i = int(np.argmax(logits))
    runner = int(np.argmax(np.where(np.arange(4) == i, -np.inf, logits)))
    r2 = taylor_margin(net, 0, x, second_highest=True)
    assert r2.class_pair == (i, runner)
    for j in range(4):
        if j == i:
            continue
        rt = taylor_margin(net, 0, x, target_class=j)
        assert rt.class_pair == (i, j)
        w = net.layers[0].weights
        d = (logits[i] - logits[j]) / np.linalg.norm(w[i] - w[j])
        assert rt.d_best == pytest.approx(d, abs=1e-12)


def test_taylor_margin_true_class_base_goes_negative_when_misclassified():
    net = two_class_line()
    # x = (0.2, 0): predicted class is 1, but ask from the viewpoint of class 0
    r = taylor_margin(net, 0, np.array([0.2, 0.0]), base_class=0)
    assert r.d_best == pytest.approx(-0.3, abs=1e-15)
    assert r.v_best == pytest.approx(0.6, abs=1e-15)


def test_taylor_margin_degenerate_pair_errors():
    layer = DenseLayer(weights=np.array([[1.0, 0.0], [1.0, 0.0]]),
                       bias=np.array([0.5, 0.0]), activation="none")
    net = Network(layers=[layer], input_dim=2, num_classes=2, norm_meta=None)
    with pytest.raises(DegenerateGradientError):
        taylor_margin(net, 0, np.array([1.0, 2.0]))
    with pytest.raises(DegenerateGradientError):
        taylor_margin(net, 0, np.array([1.0, 2.0]), target_class=1)


# ---------------------------------------------------------------------------
# DeepFool margin, single sample


def test_deepfool_linear_one_step_with_unit_rate():
    net = two_class_line()
    cfg = SearchConfig(learning_rate=1.0)
    r = deepfool_margin(net, 0, np.array([1.0, 0.0]), cfg)
    assert r.d_best == pytest.approx(0.5, abs=1e-12)
    assert r.v_best <= 1e-10
    assert r.steps == 1
    assert r.status == SearchStatus.VIOLATION_ROSE
    assert np.allclose(r.boundary_point, [0.5, 0.0], atol=1e-12)
    assert r.class_pair == (0, 1)


def test_deepfool_quarter_rate_refines_to_same_boundary():
    net = two_class_line()
    cfg = SearchConfig(learning_rate=0.25, stop_tolerance=1e-8)
    r = deepfool_margin(net, 0, np.array([1.0, 0.0]), cfg)
    assert r.d_best == pytest.approx(0.5, abs=1e-6)
    assert r.steps > 1


def test_deepfool_matches_analytic_distance_on_random_linear_nets():
    rng = np.random.default_rng(31)
    for gamma in (1.0, 0.25):
        cfg = SearchConfig(learning_rate=gamma, stop_tolerance=1e-9, max_iters=200)
        for _ in range(20):
            net = random_affine(rng)
            x = rng.normal(size=10)
            expected = analytic_linear_margin(net, x)
            r = deepfool_margin(net, 0, x, cfg)
            assert abs(r.d_best - expected) <= 1e-4
            assert r.v_best <= cfg.equality_threshold


def test_deepfool_clips_to_bounds():
    net = two_class_line()
    lower = np.array([0.8, -1.0])
    upper = np.array([2.0, 1.0])
    cfg = SearchConfig(learning_rate=1.0, bounds=(lower, upper))
    r = deepfool_margin(net, 0, np.array([1.0, 0.0]), cfg)
    # true boundary (x1=0.5) lies outside the box; search pins at x1=0.8
    assert r.d_best == pytest.approx(0.2, abs=1e-12)
    assert r.status == SearchStatus.VIOLATION_ROSE
    assert np.all(r.boundary_point >= lower - 1e-12)
    assert np.all(r.boundary_point <= upper + 1e-12)


def test_deepfool_near_boundary_sample_returns_the_degenerate_zero():
    # first accepted distance would sit within delta of the initial d=0, so the
    # search reports (0, inf) exactly as the bookkeeping dictates
    net = two_class_line()
    cfg = SearchConfig(learning_rate=1.0, stop_tolerance=0.01)
    r = deepfool_margin(net, 0, np.array([0.5 + 1e-6, 0.0]), cfg)
    assert r.d_best == 0.0
    assert r.v_best == np.inf
    assert r.steps == 0
    assert r.status == SearchStatus.CONVERGED


def test_deepfool_no_descent_when_all_gradients_vanish():
    layer = DenseLayer(weights=np.zeros((3, 2)), bias=np.array([0.1, 0.0, -0.2]),
                       activation="none")
    net = Network(layers=[layer], input_dim=2, num_classes=3, norm_meta=None)
    r = deepfool_margin(net, 0, np.array([1.0, 1.0]), SearchConfig())
    assert r.status == SearchStatus.NO_DESCENT
    assert r.steps == 0
    assert r.d_best == 0.0


def test_deepfool_max_iters_never_raises():
    net = two_class_line()
    cfg = SearchConfig(learning_rate=0.01, stop_tolerance=1e-15, max_iters=3)
    r = deepfool_margin(net, 0, np.array([1.0, 0.0]), cfg)
    assert r.status == SearchStatus.MAX_ITERS
    assert r.steps == 3


def test_deepfool_violation_trace_is_strictly_decreasing():
    ds, _ = _normalized_blobs(seed=2)
    net = _trained_net(ds, seed=3)
    X = ds.features[predict_batch(net, ds.features) == ds.labels]
    cfg = SearchConfig(learning_rate=0.25, stop_tolerance=1e-6, max_iters=150)
    traced = 0
    for x in X[:10]:
        r = deepfool_margin(net, 0, x, cfg, collect_trace=True)
        vs = [v for _, v in r.trace]
        assert all(b < a for a, b in zip(vs, vs[1:]))
        traced += len(vs)
    assert traced > 0


def test_deepfool_hidden_layer_runs_without_clipping():
    ds, _ = _normalized_blobs(seed=4)
    net = _trained_net(ds, seed=5)
    acts = forward(net, ds.features[0])
    cfg = SearchConfig(learning_rate=0.25, stop_tolerance=1e-6, max_iters=200)
    r = deepfool_margin(net, 1, acts.per_layer[1], cfg)
    assert r.d_best >= 0.0
    assert r.boundary_point.shape == acts.per_layer[1].shape


def test_search_config_validation():
    with pytest.raises(DomainError):
        SearchConfig(learning_rate=0.0)
    with pytest.raises(DomainError):
        SearchConfig(learning_rate=1.2)
    with pytest.raises(DomainError):
        SearchConfig(stop_tolerance=0.0)
    with pytest.raises(DomainError):
        SearchConfig(max_iters=0)
    with pytest.raises(DomainError):
        SearchConfig(equality_threshold=0.0)


# ---------------------------------------------------------------------------
# DeepFool margin, batched


def _normalized_blobs(seed=0, classes=3, spc=50, dim=4, spread=0.9):
    ds = gen_blobs(BlobConfig(classes=classes, samples_per_class=spc, dim=dim,
                              spread=spread, seed=seed))
    return normalize(ds, "znorm")


def _trained_net(ds, seed=0, width=16, epochs=60):
    net = init_network(ds.feature_count, [width], ds.class_count, seed=seed)
    return train_sgd(net, ds, TrainConfig(epochs=epochs, batch_size=16,
                                          learning_rate=0.05, seed=seed))


def test_batch_of_identical_samples_gives_identical_results():
    ds, _ = _normalized_blobs(seed=6)
    net = _trained_net(ds, seed=7)
    x = ds.features[0]
    batch = np.tile(x, (5, 1))
    results = deepfool_margin_batch(net, 0, batch, SearchConfig())
    first = results[0]
    for r in results[1:]:
        assert r.d_best == first.d_best
        assert r.v_best == first.v_best
        assert r.steps == first.steps
        assert r.status == first.status


def test_batch_of_one_close_to_single_mode():
    ds, _ = _normalized_blobs(seed=8)
    net = _trained_net(ds, seed=9)
    cfg = SearchConfig(learning_rate=0.25, stop_tolerance=0.01, max_iters=100)
    correct = ds.features[predict_batch(net, ds.features) == ds.labels]
    for x in correct[:8]:
        single = deepfool_margin(net, 0, x, cfg)
        batched = deepfool_margin_batch(net, 0, x[None, :], cfg)[0]
        assert abs(single.d_best - batched.d_best) <= cfg.stop_tolerance


def test_batch_converged_samples_meet_equality_threshold():
    ds, _ = _normalized_blobs(seed=10, spc=40)
    net = _trained_net(ds, seed=11)
    correct = ds.features[predict_batch(net, ds.features) == ds.labels][:50]
    cfg = SearchConfig(learning_rate=0.25, stop_tolerance=1e-6, max_iters=500)
    results = deepfool_margin_batch(net, 0, correct, cfg)
    assert len(results) == len(correct)
    converged = [r for r in results if r.status == SearchStatus.CONVERGED]
    assert converged
    for r in converged:
        assert r.v_best <= cfg.equality_threshold


def test_batch_rejects_empty_input():
    ds, _ = _normalized_blobs(seed=12)
    net = _trained_net(ds, seed=12)
    with pytest.raises(DomainError):
        deepfool_margin_batch(net, 0, np.empty((0, 4)), SearchConfig())


# ---------------------------------------------------------------------------
# constrained estimators


def test_constrained_taylor_orthogonal_subspace_unreachable():
    net = two_class_line()
    pca = PcaModel(mean=np.zeros(2), components=np.array([[0.0, 1.0]]),
                   explained_variance=np.array([1.0]),
                   explained_ratio=np.array([0.6]))
    with pytest.raises(UnreachableSubspaceError):
        constrained_taylor_margin(net, np.array([1.0, 0.0]), pca, 1)


def test_constrained_taylor_aligned_subspace_equals_unconstrained():
    net = two_class_line()
    pca = PcaModel(mean=np.zeros(2), components=np.array([[1.0, 0.0]]),
                   explained_variance=np.array([1.0]),
                   explained_ratio=np.array([0.6]))
    r = constrained_taylor_margin(net, np.array([1.0, 0.0]), pca, 1)
    assert r.d_best == pytest.approx(0.5, abs=1e-15)


def test_constrained_taylor_full_rank_equals_taylor():
    rng = np.random.default_rng(41)
    for _ in range(25):
        hidden = DenseLayer(weights=rng.normal(size=(7, 5)),
                            bias=rng.normal(size=7), activation="relu")
        out = DenseLayer(weights=rng.normal(size=(3, 7)),
                         bias=rng.normal(size=3), activation="none")
        net = Network(layers=[hidden, out], input_dim=5, num_classes=3,
                      norm_meta=None)
        x = rng.normal(size=5)
        pca = orthonormal_pca(rng, 5)
        assert pca.components.shape == (5, 5)
        full = constrained_taylor_margin(net, x, pca, 5)
        plain = taylor_margin(net, 0, x)
        assert abs(full.d_best - plain.d_best) <= 1e-10


def test_constrained_deepfool_full_rank_matches_standard_on_linear():
    rng = np.random.default_rng(43)
    cfg = SearchConfig(learning_rate=1.0, stop_tolerance=1e-9, max_iters=200)
    for _ in range(15):
        net = random_affine(rng, dim=6, classes=3)
        x = rng.normal(size=6)
        pca = orthonormal_pca(rng, 6)
        standard = deepfool_margin(net, 0, x, cfg)
        constrained = constrained_deepfool_margin(net, x, pca, 6, cfg)
        assert abs(standard.d_best - constrained.d_best) <= 1e-6
        assert constrained.left_subspace is False


def test_constrained_deepfool_orthogonal_subspace_no_descent():
    net = two_class_line()
    pca = PcaModel(mean=np.zeros(2), components=np.array([[0.0, 1.0]]),
                   explained_variance=np.array([1.0]),
                   explained_ratio=np.array([0.6]))
    r = constrained_deepfool_margin(net, np.array([1.0, 0.0]), pca, 1, SearchConfig())
    assert r.status == SearchStatus.NO_DESCENT


def test_constrained_deepfool_stays_in_span_without_clipping():
    ds, _ = _normalized_blobs(seed=14, classes=2, dim=3)
    net = _trained_net(ds, seed=15)
    bare = Network(net.layers, net.input_dim, net.num_classes, norm_meta=None)
    pca = fit_pca(ds.features, n_components=2)
    cfg = SearchConfig(learning_rate=0.25, stop_tolerance=1e-7, max_iters=300)
    correct = ds.features[predict_batch(bare, ds.features) == ds.labels]
    x = correct[0]
    r = constrained_deepfool_margin(bare, x, pca, 2, cfg)
    if r.steps > 0:
        p = r.boundary_point - x
        residual = p - (p @ pca.components.T) @ pca.components
        assert np.linalg.norm(residual) <= 1e-9
        assert r.left_subspace is False


def test_constrained_deepfool_records_when_clipping_leaves_span():
    net = two_class_line()
    u = np.sqrt(0.5)
    pca = PcaModel(mean=np.zeros(2), components=np.array([[u, u]]),
                   explained_variance=np.array([1.0]),
                   explained_ratio=np.array([0.6]))
    lower = np.array([0.8, -0.1])
    upper = np.array([2.0, 0.1])
    cfg = SearchConfig(learning_rate=1.0, bounds=(lower, upper))
    r = constrained_deepfool_margin(net, np.array([1.0, 0.0]), pca, 1, cfg)
    assert r.steps >= 1
    assert r.left_subspace is True


def test_constrained_deepfool_single_direction_matches_bisection_oracle():
    ds, _ = _normalized_blobs(seed=16, classes=2, dim=2, spread=0.7)
    net = _trained_net(ds, seed=17, width=12, epochs=80)
    bare = Network(net.layers, net.input_dim, net.num_classes, norm_meta=None)
    pca = fit_pca(ds.features)
    direction = pca.components[0]
    cfg = SearchConfig(learning_rate=0.25, stop_tolerance=1e-7, max_iters=500)
    correct = np.flatnonzero(predict_batch(bare, ds.features) == ds.labels)
    checked = 0
    for idx in correct:
        x = ds.features[idx]
        oracle = _line_boundary_distance(bare, x, direction)
        if oracle is None:
            continue
        r = constrained_deepfool_margin(bare, x, pca, 1, cfg)
        assert abs(r.d_best - oracle) <= 1e-4
        checked += 1
        if checked >= 5:
            break
    assert checked >= 3


def _line_boundary_distance(net, x, u, reach=10.0, grid=4000):
    """Smallest |t| with a predicted-class change along x + t*u (bisected)."""
    base = predict(net, x)
    best = None
    for sign in (1.0, -1.0):
        prev = 0.0
        for t in np.linspace(0.0, reach, grid)[1:]:
            if predict(net, x + sign * t * u) != base:
                a, b = prev, t
                for _ in range(60):
                    mid = 0.5 * (a + b)
                    if predict(net, x + sign * mid * u) != base:
                        b = mid
                    else:
                        a = mid
                cand = 0.5 * (a + b)
                if best is None or cand < best:
                    best = cand
                break
            prev = t
    return best


def test_constrained_distance_dominates_standard_on_linear_nets():
    rng = np.random.default_rng(47)
    cfg = SearchConfig(learning_rate=0.5, stop_tolerance=1e-9, max_iters=300)
    for _ in range(15):
        net = random_affine(rng, dim=6, classes=3)
        x = rng.normal(size=6)
        pca = orthonormal_pca(rng, 6)
        m = int(rng.integers(2, 6))
        standard = deepfool_margin(net, 0, x, cfg)
        constrained = constrained_deepfool_margin(net, x, pca, m, cfg)
        if constrained.status == SearchStatus.NO_DESCENT:
            continue
        assert constrained.d_best >= standard.d_best - 1e-6


# ---------------------------------------------------------------------------
# total-variation normalization


def test_tv_single_feature_hand_example():
    acts = np.array([[0.0], [4.0]])  # population variance 4 -> TV 2
    assert compute_total_variation(acts) == pytest.approx(2.0)
    assert tv_normalize(np.array([6.0]), acts)[0] == pytest.approx(3.0)


def test_tv_homogeneity():
    rng = np.random.default_rng(51)
    acts = rng.normal(size=(30, 6))
    for c in (0.5, 2.0, 7.3):
        assert compute_total_variation(c * acts) == pytest.approx(
            c * compute_total_variation(acts), rel=1e-12)


def test_tv_matches_sum_of_variances_oracle():
    rng = np.random.default_rng(53)
    acts = rng.normal(size=(40, 9)) * rng.uniform(0.1, 3.0, size=9)
    total = 0.0
    for col in acts.T:
        mu = sum(col) / len(col)
        total += sum((v - mu) ** 2 for v in col) / len(col)
    assert compute_total_variation(acts) == pytest.approx(np.sqrt(total), abs=1e-10)


def test_tv_zero_variance_is_degenerate():
    acts = np.ones((5, 3))
    with pytest.raises(DegenerateVarianceError):
        tv_normalize(np.array([1.0]), acts)


def test_tv_normalizer_over_network_layers():
    ds, _ = _normalized_blobs(seed=18)
    net = _trained_net(ds, seed=19)
    tvn = fit_tv_normalizer(net, ds.features)
    assert set(tvn.per_layer_tv) == {0, 1, 2}
    assert all(v > 0 for v in tvn.per_layer_tv.values())
    margins = np.array([1.0, 2.0])
    out = tvn.normalize(margins, 1)
    assert np.allclose(out, margins / tvn.per_layer_tv[1])
