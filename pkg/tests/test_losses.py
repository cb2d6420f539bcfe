import math

import numpy as np
import pytest

from lifelong_intent.autodiff import Graph, ZeroNormError, finite_diff_check
from lifelong_intent.losses import (
    ClassEmbeddings,
    LossWeights,
    build_batch_loss,
    cosine_probs,
    cross_entropy,
    dot_scores,
    fkd_loss,
    icml_loss,
    kd_loss,
    total_loss,
)

# ---------------------------------------------------------------------------
# brute-force oracles, written with python floats and loops on purpose
# ---------------------------------------------------------------------------


def bf_cos(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return dot / (na * nb)


def bf_softmax(scores):
    exps = [math.exp(s) for s in scores]
    z = sum(exps)
    return [e / z for e in exps]


def bf_cosine_probs(f, rows, tau):
    return bf_softmax([tau * bf_cos(f, r) for r in rows])


def bf_kd(s_star, s, temp):
    target = bf_softmax([v / temp for v in s_star])
    ours = bf_softmax([v / temp for v in s])
    return -sum(t * math.log(o) for t, o in zip(target, ours))


def bf_icml(new_rows, old_rows, alpha):
    total = 0.0
    for r_new in new_rows:
        for r_old in old_rows:
            total += max(bf_cos(r_new, r_old) - alpha, 0.0)
    return total


# ------------------------------------------------------------------- heads


def test_dot_scores_by_hand():
    theta = np.array([[2.0, 0.0], [0.0, 3.0]])
    assert np.array_equal(dot_scores([1.0, 0.0], theta), [2.0, 0.0])
    assert np.array_equal(dot_scores([0.0, 0.0], theta), [0.0, 0.0])


def test_dot_scores_magnitude_flips_argmax():
    theta = np.array([[0.6, 0.0], [0.0, 0.5]])
    f = np.array([1.0, 1.0])
    assert int(np.argmax(dot_scores(f, theta))) == 0
    theta_scaled = theta.copy()
    theta_scaled[1] *= 10.0
    assert int(np.argmax(dot_scores(f, theta_scaled))) == 1


def test_dot_scores_dim_mismatch():
    with pytest.raises(ValueError):
        dot_scores([1.0, 2.0, 3.0], np.eye(2))


def test_cosine_probs_two_class_closed_form():
    theta = np.array([[2.0, 0.0], [0.0, 5.0]])
    p = cosine_probs([3.0, 0.0], theta, tau=1.0)
    e = math.e
    assert p[0] == pytest.approx(e / (e + 1.0), abs=1e-12)
    assert p[1] == pytest.approx(1.0 / (e + 1.0), abs=1e-12)


def test_cosine_probs_identical_directions_are_uniform():
    theta = np.array([[1.0, 1.0], [2.0, 2.0], [0.5, 0.5]])
    p = cosine_probs([3.0, -1.0], theta, tau=50.0)
    assert np.allclose(p, 1.0 / 3.0, atol=1e-12)


def test_cosine_probs_matches_bruteforce_at_high_tau():
    rng = np.random.default_rng(20)
    f = rng.normal(size=4)
    theta = rng.normal(size=(3, 4))
    p = cosine_probs(f, theta, tau=50.0)
    expected = bf_cosine_probs(f.tolist(), theta.tolist(), 50.0)
    assert np.allclose(p, expected, atol=1e-10)


def test_cosine_probs_zero_norm_errors():
    with pytest.raises(ZeroNormError):
        cosine_probs([0.0, 0.0], np.eye(2), tau=1.0)
    with pytest.raises(ZeroNormError):
        cosine_probs([1.0, 0.0], np.array([[1.0, 0.0], [0.0, 0.0]]), tau=1.0)


def test_scaling_invariance_of_cosine_probs():
    rng = np.random.default_rng(21)
    for trial in range(200):
        f = rng.normal(size=5)
        theta = rng.normal(size=(4, 5))
        c = float(rng.uniform(0.01, 100.0))
        base = cosine_probs(f, theta, tau=50.0)
        assert np.allclose(cosine_probs(c * f, theta, tau=50.0), base, atol=1e-6)
        row = int(rng.integers(4))
        scaled = theta.copy()
        scaled[row] *= c
        assert np.allclose(cosine_probs(f, scaled, tau=50.0), base, atol=1e-6)


# ----------------------------------------------------------- cross entropy


def test_cross_entropy_perfect_prediction():
    assert cross_entropy([1.0, 0.0, 0.0], [1.0, 0.0, 0.0]) == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_uniform():
    p = [0.25] * 4
    assert cross_entropy(p, [0.0, 1.0, 0.0, 0.0]) == pytest.approx(math.log(4.0), abs=1e-12)


def test_cross_entropy_two_class_value():
    p = [0.7311, 0.2689]
    assert cross_entropy(p, [0.0, 1.0]) == pytest.approx(-math.log(0.2689), abs=1e-12)


def test_cross_entropy_rejects_non_onehot():
    with pytest.raises(ValueError):
        cross_entropy([0.5, 0.5], [0.5, 0.5])
    with pytest.raises(ValueError):
        cross_entropy([0.5, 0.5], [1.0, 1.0])
    with pytest.raises(ValueError):
        cross_entropy([0.5, 0.5], [0.0, 0.0])


# -------------------------------------------------------------- distillation


def test_kd_identical_uniform_scores_give_ln2():
    assert kd_loss([0.0, 0.0], [0.0, 0.0], temp=1.0) == pytest.approx(math.log(2.0), abs=1e-12)
    assert kd_loss([0.0, 0.0], [0.0, 0.0], temp=7.3) == pytest.approx(math.log(2.0), abs=1e-12)


def test_kd_swapped_scores_spot_value():
    got = kd_loss([2.0, 0.0], [0.0, 2.0], temp=2.0)
    assert got == pytest.approx(bf_kd([2.0, 0.0], [0.0, 2.0], 2.0), abs=1e-12)
    # gamma(s*) = softmax([1, 0]) = (0.7311, 0.2689)
    assert got == pytest.approx(1.0443, abs=5e-4)


def test_kd_empty_old_class_set_errors():
    with pytest.raises(ValueError):
        kd_loss([], [], temp=2.0)


def test_kd_matches_bruteforce_100_instances():
    rng = np.random.default_rng(22)
    for trial in range(100):
        n = int(rng.integers(2, 7))
        s_star = rng.normal(scale=3.0, size=n)
        s = rng.normal(scale=3.0, size=n)
        temp = float(rng.uniform(0.5, 5.0))
        assert kd_loss(s_star, s, temp) == pytest.approx(
            bf_kd(s_star.tolist(), s.tolist(), temp), abs=1e-10)


def test_kd_minimum_is_entropy_of_target():
    # Gibbs: loss >= H(gamma(s*)), equality iff the distributions match.
    # Optimize s directly with the graph to convergence on a 3-class toy.
    s_star = np.array([1.0, -0.5, 0.25])
    temp = 2.0
    target = np.exp(s_star / temp) / np.exp(s_star / temp).sum()
    entropy = float(-(target * np.log(target)).sum())

    s = np.zeros(3)
    for _ in range(3000):
        g = Graph()
        ns = g.leaf(s, trainable=True)
        gamma = g.softmax(ns, temperature=temp)
        loss = g.scale(g.sum(g.mul(g.constant(target), g.log(gamma))), -1.0)
        g.forward(loss)
        grads = g.backward(loss)
        s = s - 0.5 * grads[ns]
    final = kd_loss(s_star, s, temp)
    assert final >= entropy - 1e-12
    assert final == pytest.approx(entropy, abs=1e-6)
    ours = np.exp(s / temp) / np.exp(s / temp).sum()
    assert np.allclose(ours, target, atol=1e-4)


def test_kd_lower_bound_randomized():
    rng = np.random.default_rng(23)
    for _ in range(100):
        s_star = rng.normal(size=4)
        s = rng.normal(size=4)
        target = np.exp(s_star / 2.0) / np.exp(s_star / 2.0).sum()
        entropy = float(-(target * np.log(target)).sum())
        assert kd_loss(s_star, s, 2.0) >= entropy - 1e-12


# ------------------------------------------------------------- feature KD


def test_fkd_spot_values():
    f = np.array([1.0, 2.0, -3.0])
    assert fkd_loss(f, f) == pytest.approx(0.0, abs=1e-12)
    assert fkd_loss(f, -f) == pytest.approx(2.0, abs=1e-12)
    assert fkd_loss([1.0, 0.0], [0.0, 1.0]) == pytest.approx(1.0, abs=1e-12)


def test_fkd_range_and_zero_condition():
    rng = np.random.default_rng(24)
    for _ in range(100):
        f = rng.normal(size=6)
        f_star = rng.normal(size=6)
        v = fkd_loss(f, f_star)
        assert 0.0 <= v <= 2.0
        assert fkd_loss(f, 3.7 * f) == pytest.approx(0.0, abs=1e-12)


def test_fkd_zero_norm_errors():
    with pytest.raises(ZeroNormError):
        fkd_loss([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(ZeroNormError):
        fkd_loss([1.0, 0.0], [0.0, 0.0])


def test_fkd_matches_bruteforce_100_instances():
    rng = np.random.default_rng(25)
    for _ in range(100):
        f = rng.normal(size=5)
        f_star = rng.normal(size=5)
        assert fkd_loss(f, f_star) == pytest.approx(
            1.0 - bf_cos(f.tolist(), f_star.tolist()), abs=1e-10)


# -------------------------------------------------------------- margin loss


def test_icml_inactive_hinge_is_zero():
    new = np.array([[1.0, 0.0]])
    old = np.array([[0.0, 1.0]])  # cosine 0
    assert icml_loss(new, old, alpha=0.5) == 0.0


def test_icml_single_pair_arithmetic():
    new = np.array([[1.0, 0.0, 0.0]])
    old = np.array([[1.0, math.sqrt(3.0), 0.0]])  # cos = 0.5
    assert icml_loss(new, old, alpha=-0.1) == pytest.approx(0.6, abs=1e-12)


def test_icml_matches_bruteforce_100_instances():
    rng = np.random.default_rng(26)
    for _ in range(100):
        new = rng.normal(size=(2, 4))
        old = rng.normal(size=(3, 4))
        alpha = float(rng.uniform(-0.5, 0.5))
        assert icml_loss(new, old, alpha) == pytest.approx(
            bf_icml(new.tolist(), old.tolist(), alpha), abs=1e-12)


def test_icml_monotone_in_pairwise_cosine():
    old = np.array([[1.0, 0.0]])
    lo = icml_loss(np.array([[1.0, 1.0]]), old, alpha=-0.1)     # cos ~ 0.707
    hi = icml_loss(np.array([[1.0, 0.25]]), old, alpha=-0.1)    # cos ~ 0.970
    assert hi > lo > 0.0


def test_icml_requires_old_classes():
    with pytest.raises(ValueError):
        icml_loss(np.ones((1, 3)), np.zeros((0, 3)), alpha=0.0)


def test_icml_zero_norm_row_errors():
    with pytest.raises(ZeroNormError):
        icml_loss(np.zeros((1, 3)), np.ones((1, 3)), alpha=0.0)


def test_icml_new_pair_flag_adds_unordered_pairs():
    new = np.array([[1.0, 0.0], [1.0, 1.0]])
    old = np.array([[0.0, 1.0]])
    base = icml_loss(new, old, alpha=-1.0)
    with_pairs = icml_loss(new, old, alpha=-1.0, include_new_pairs=True)
    assert with_pairs == pytest.approx(base + (bf_cos([1, 0], [1, 1]) + 1.0), abs=1e-12)


# ------------------------------------------------------------ combined loss


def _toy_batch(seed=30, batch=3, d=4, n_old=2, n_new=2):
    rng = np.random.default_rng(seed)
    features = rng.normal(size=(batch, d))
    theta = rng.normal(size=(n_old + n_new, d))
    labels = rng.integers(0, n_old + n_new, size=batch)
    onehot = np.zeros((batch, n_old + n_new))
    onehot[np.arange(batch), labels] = 1.0
    snap_features = rng.normal(size=(batch, d))
    snap_theta = theta[:n_old] + 0.1 * rng.normal(size=(n_old, d))
    return features, theta, onehot, snap_features, snap_theta


def _snapshot_scores(snap_features, snap_theta, tau, head):
    out = []
    for f in snap_features:
        if head == "cosine":
            out.append([tau * bf_cos(f.tolist(), r.tolist()) for r in snap_theta])
        else:
            out.append([float(f @ r) for r in snap_theta])
    return np.array(out)


def test_total_loss_no_snapshot_is_plain_ce():
    features, theta, onehot, _, _ = _toy_batch()
    w = LossWeights()
    full = total_loss(features, onehot, theta, w, head="cosine", n_old=0,
                      use_pkd=True, use_fkd=False, use_icml=True)
    ce_only = total_loss(features, onehot, theta, w, head="cosine", n_old=0)
    assert full == ce_only


def test_total_loss_zero_betas_reduce_to_ce():
    features, theta, onehot, snap_f, snap_t = _toy_batch()
    w = LossWeights(beta1=0.0, beta2=0.0, beta3=0.0)
    scores = _snapshot_scores(snap_f, snap_t, w.tau, "cosine")
    full = total_loss(features, onehot, theta, w, head="cosine", n_old=2,
                      snapshot_features=snap_f, snapshot_scores=scores,
                      use_pkd=True, use_fkd=True, use_icml=True)
    ce_only = total_loss(features, onehot, theta, w, head="cosine", n_old=2)
    assert full == pytest.approx(ce_only, abs=1e-12)


def test_total_loss_equals_sum_of_independent_terms():
    features, theta, onehot, snap_f, snap_t = _toy_batch()
    # the published weight triple, including the large-model margin weight
    w = LossWeights(beta1=0.001, beta2=0.002, beta3=10000.0)
    scores = _snapshot_scores(snap_f, snap_t, w.tau, "cosine")

    got = total_loss(features, onehot, theta, w, head="cosine", n_old=2,
                     snapshot_features=snap_f, snapshot_scores=scores,
                     use_pkd=True, use_fkd=True, use_icml=True)

    ce_terms, kd_terms, fkd_terms = [], [], []
    for b in range(3):
        p = bf_cosine_probs(features[b].tolist(), theta.tolist(), w.tau)
        label = int(np.argmax(onehot[b]))
        ce_terms.append(-math.log(p[label]))  # no clamp: oracle is the raw math
        s = [w.tau * bf_cos(features[b].tolist(), r.tolist()) for r in theta[:2]]
        kd_terms.append(bf_kd(scores[b].tolist(), s, w.temp))
        fkd_terms.append(1.0 - bf_cos(features[b].tolist(), snap_f[b].tolist()))
    expected = (sum(ce_terms) / 3.0
                + w.beta1 * sum(kd_terms) / 3.0
                + w.beta2 * sum(fkd_terms) / 3.0
                + w.beta3 * bf_icml(theta[2:].tolist(), theta[:2].tolist(), w.alpha))
    assert got == pytest.approx(expected, abs=1e-10)


@pytest.mark.parametrize("head", ["cosine", "dot"])
def test_graph_loss_matches_reference(head):
    features, theta, onehot, snap_f, snap_t = _toy_batch(seed=31)
    w = LossWeights()
    scores = _snapshot_scores(snap_f, snap_t, w.tau, head)

    expected = total_loss(features, onehot, theta, w, head=head, n_old=2,
                          snapshot_features=snap_f, snapshot_scores=scores,
                          use_pkd=True, use_fkd=True, use_icml=True)

    g = Graph()
    nf = g.leaf(features, trainable=True, name="features")
    nt = g.leaf(theta, trainable=True, name="theta")
    nodes = build_batch_loss(g, nf, nt, onehot, w, head=head, n_old=2,
                             snapshot_features=snap_f, snapshot_scores=scores,
                             use_pkd=True, use_fkd=True, use_icml=True)
    got = g.forward(nodes["total"])
    assert got == pytest.approx(expected, abs=1e-10)


def test_graph_loss_gradcheck_away_from_kinks():
    features, theta, onehot, snap_f, snap_t = _toy_batch(seed=32)
    w = LossWeights(beta1=0.5, beta2=0.5, beta3=0.5)  # keep terms comparable
    scores = _snapshot_scores(snap_f, snap_t, w.tau, "cosine")
    g = Graph()
    nf = g.leaf(features, trainable=True)
    nt = g.leaf(theta, trainable=True)
    nodes = build_batch_loss(g, nf, nt, onehot, w, head="cosine", n_old=2,
                             snapshot_features=snap_f, snapshot_scores=scores,
                             use_pkd=True, use_fkd=True, use_icml=True)
    assert finite_diff_check(g, nodes["total"], 1e-5) < 1e-4


def test_class_embeddings_append_and_copy():
    emb = ClassEmbeddings.empty(3)
    emb.append(0, [1.0, 0.0, 0.0])
    emb.append(1, [0.0, 1.0, 0.0])
    assert emb.n_classes == 2
    assert emb.row_of == {0: 0, 1: 1}
    with pytest.raises(ValueError):
        emb.append(0, [0.0, 0.0, 1.0])
    dup = emb.copy()
    dup.matrix[0, 0] = 99.0
    assert emb.matrix[0, 0] == 1.0


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(tau=0.0)
    with pytest.raises(ValueError):
        LossWeights(temp=-1.0)
    with pytest.raises(ValueError):
        LossWeights(alpha=1.5)
