import math

import numpy as np
import pytest

from lifelong_intent.autodiff import (
    Graph,
    GraphStateError,
    NonFiniteError,
    ShapeError,
    ZeroNormError,
    backward,
    finite_diff_check,
    forward,
)


def test_forward_dot_product_by_hand():
    g = Graph()
    x = g.leaf([1.0, 2.0], trainable=True, name="x")
    y = g.leaf([3.0, 4.0], name="y")
    loss = g.matmul(x, y)
    assert forward(g, loss) == 11.0


def test_forward_sum_of_zeros():
    g = Graph()
    x = g.leaf(np.zeros(5), trainable=True)
    assert forward(g, g.sum(x)) == 0.0


def test_forward_matches_scalar_reevaluation():
    # Independent oracle: re-run the same three-layer expression with plain
    # python floats and math functions, no numpy.
    rng = np.random.default_rng(7)
    w1 = rng.normal(size=(3, 4))
    w2 = rng.normal(size=(4, 2))
    x = rng.normal(size=(1, 3))

    g = Graph()
    nx = g.constant(x)
    nw1 = g.leaf(w1, trainable=True)
    nw2 = g.leaf(w2, trainable=True)
    h = g.tanh(g.matmul(nx, nw1))
    out = g.matmul(h, nw2)
    loss = g.sum(g.mul(out, out))
    got = forward(g, loss)

    hvals = []
    for j in range(4):
        acc = 0.0
        for i in range(3):
            acc += x[0][i] * w1[i][j]
        hvals.append(math.tanh(acc))
    expected = 0.0
    for k in range(2):
        acc = 0.0
        for j in range(4):
            acc += hvals[j] * w2[j][k]
        expected += acc * acc
    assert abs(got - expected) < 1e-12


def test_backward_square():
    g = Graph()
    x = g.leaf([3.0], trainable=True, name="x")
    loss = g.matmul(x, x)
    forward(g, loss)
    grads = backward(g, loss)
    assert np.allclose(grads[x], [6.0])


def test_backward_unused_parameter_gets_zeros():
    g = Graph()
    x = g.leaf([1.0, 2.0], trainable=True)
    unused = g.leaf(np.ones((2, 2)), trainable=True)
    loss = g.sum(g.mul(x, x))
    forward(g, loss)
    grads = backward(g, loss)
    assert np.array_equal(grads[unused], np.zeros((2, 2)))


def test_backward_before_forward_raises():
    g = Graph()
    x = g.leaf([1.0], trainable=True)
    loss = g.sum(x)
    with pytest.raises(GraphStateError):
        backward(g, loss)


def test_set_value_invalidates_forward_cache():
    g = Graph()
    x = g.leaf([1.0, 2.0], trainable=True)
    loss = g.sum(x)
    forward(g, loss)
    g.set_value(x, [5.0, 5.0])
    with pytest.raises(GraphStateError):
        backward(g, loss)
    assert forward(g, loss) == 10.0


def test_shape_mismatch_names_both_nodes():
    g = Graph()
    a = g.leaf(np.ones((2, 3)), name="lhs")
    b = g.leaf(np.ones((2, 3)), name="rhs")
    with pytest.raises(ShapeError) as err:
        g.matmul(a, b)
    assert "lhs" in str(err.value) and "rhs" in str(err.value)


def test_nonfinite_output_raises():
    g = Graph()
    x = g.leaf([1e308], trainable=True)
    loss = g.sum(g.mul(x, x))
    with pytest.raises(NonFiniteError):
        forward(g, loss)


def _random_composite(seed):
    """A loss that touches every differentiable op away from kinks."""
    rng = np.random.default_rng(seed)
    g = Graph()
    a = g.leaf(rng.normal(size=(3, 4)) + 0.1, trainable=True, name="a")
    b = g.leaf(rng.normal(size=(5, 4)) + 0.1, trainable=True, name="b")
    w = g.leaf(rng.normal(size=(4, 4)), trainable=True, name="w")
    h = g.tanh(g.matmul(a, w))
    cos = g.cosine_rows(h, b)
    probs = g.softmax(g.scale(cos, 7.0))
    ce_ish = g.sum(g.mul(probs, g.log(probs)))
    hinge = g.sum(g.relu(g.sub(cos, g.constant(0.2))))
    pair = g.mean(g.cosine_pairs(h, g.slice_rows(b, 0, 3)))
    nrm = g.l2norm(a)
    loss = g.add(g.add(ce_ish, g.scale(hinge, 0.5)), g.add(pair, g.scale(nrm, 0.01)))
    return g, loss


def test_random_composite_gradients_match_finite_differences():
    for seed in range(5):
        g, loss = _random_composite(seed)
        assert finite_diff_check(g, loss, 1e-5) < 1e-4


def test_finite_diff_quadratic_is_nearly_exact():
    g = Graph()
    x = g.leaf([1.5, -2.25, 0.5], trainable=True)
    loss = g.sum(g.mul(x, x))
    assert finite_diff_check(g, loss, 1e-5) < 1e-6


def test_finite_diff_hinge_away_from_kink():
    # cosine values sit well away from the 0.2 threshold, so the hinge is
    # smooth at the evaluation point.
    rng = np.random.default_rng(42)
    g = Graph()
    a = g.leaf(rng.normal(size=(2, 6)), trainable=True)
    b = g.leaf(rng.normal(size=(3, 6)), trainable=True)
    loss = g.sum(g.relu(g.sub(g.cosine_rows(a, b), g.constant(0.2))))
    assert finite_diff_check(g, loss, 1e-5) < 1e-4


def test_relu_subgradient_zero_at_kink():
    g = Graph()
    x = g.leaf([0.0, -1.0, 2.0], trainable=True)
    loss = g.sum(g.relu(x))
    forward(g, loss)
    grads = backward(g, loss)
    assert np.array_equal(grads[x], [0.0, 0.0, 1.0])


def test_log_floor_clamps_value_and_gradient():
    g = Graph()
    x = g.leaf([1e-20, 2.0], trainable=True)
    loss = g.sum(g.log(x, floor=1e-12))
    forward(g, loss)
    grads = backward(g, loss)
    assert loss.value == pytest.approx(math.log(1e-12) + math.log(2.0))
    assert grads[x][0] == 0.0
    assert grads[x][1] == pytest.approx(0.5)


def test_zero_norm_cosine_raises():
    g = Graph()
    a = g.leaf(np.zeros((1, 3)), trainable=True)
    b = g.leaf(np.ones((2, 3)))
    loss = g.sum(g.cosine_rows(a, b))
    with pytest.raises(ZeroNormError):
        forward(g, loss)


def test_evaluation_is_bit_deterministic():
    def build():
        g, loss = _random_composite(123)
        value = forward(g, loss)
        grads = backward(g, loss)
        return value, {n.name: v.tobytes() for n, v in grads.items()}

    v1, g1 = build()
    v2, g2 = build()
    assert v1 == v2
    assert g1 == g2


PER_OP_BUILDERS = {
    "matmul": lambda g, r: g.sum(g.matmul(g.leaf(r.normal(size=(3, 4)), trainable=True),
                                          g.leaf(r.normal(size=(4, 2)), trainable=True))),
    "matmul_t": lambda g, r: g.sum(g.matmul(g.leaf(r.normal(size=(3, 4)), trainable=True),
                                            g.leaf(r.normal(size=(2, 4)), trainable=True),
                                            transpose_b=True)),
    "dot": lambda g, r: g.matmul(g.leaf(r.normal(size=5), trainable=True),
                                 g.leaf(r.normal(size=5), trainable=True)),
    "add": lambda g, r: g.sum(g.add(g.leaf(r.normal(size=(2, 3)), trainable=True),
                                    g.leaf(r.normal(size=3), trainable=True))),
    "sub": lambda g, r: g.sum(g.sub(g.leaf(r.normal(size=(2, 3)), trainable=True),
                                    g.leaf(r.normal(size=(2, 3)), trainable=True))),
    "mul": lambda g, r: g.sum(g.mul(g.leaf(r.normal(size=(2, 3)), trainable=True),
                                    g.leaf(r.normal(size=(2, 3)), trainable=True))),
    "scale": lambda g, r: g.scale(g.sum(g.leaf(r.normal(size=4), trainable=True)), -2.5),
    "tanh": lambda g, r: g.sum(g.tanh(g.leaf(r.normal(size=(3, 3)), trainable=True))),
    "relu": lambda g, r: g.sum(g.relu(g.leaf(r.normal(size=(3, 3)) + 0.05, trainable=True))),
    "log": lambda g, r: g.sum(g.log(g.leaf(r.uniform(0.5, 2.0, size=(2, 4)), trainable=True))),
    "softmax": lambda g, r: g.sum(g.mul(g.softmax(g.leaf(r.normal(size=(2, 5)), trainable=True),
                                                  temperature=2.0),
                                        g.constant(r.normal(size=(2, 5))))),
    "l2norm": lambda g, r: g.l2norm(g.leaf(r.normal(size=(2, 3)) + 0.5, trainable=True)),
    "cosine_rows": lambda g, r: g.sum(g.mul(
        g.cosine_rows(g.leaf(r.normal(size=(3, 4)), trainable=True),
                      g.leaf(r.normal(size=(2, 4)), trainable=True)),
        g.constant(r.normal(size=(3, 2))))),
    "cosine_pairs": lambda g, r: g.sum(g.mul(
        g.cosine_pairs(g.leaf(r.normal(size=(3, 4)), trainable=True),
                       g.leaf(r.normal(size=(3, 4)), trainable=True)),
        g.constant(r.normal(size=3)))),
    "mean": lambda g, r: g.mean(g.leaf(r.normal(size=(4, 2)), trainable=True)),
    "slice_rows": lambda g, r: g.sum(g.slice_rows(g.leaf(r.normal(size=(5, 3)), trainable=True), 1, 4)),
}


@pytest.mark.parametrize("op_name", sorted(PER_OP_BUILDERS))
def test_every_op_passes_gradcheck_100_trials(op_name):
    build = PER_OP_BUILDERS[op_name]
    for trial in range(100):
        rng = np.random.default_rng(1000 + trial)
        g = Graph()
        loss = build(g, rng)
        assert finite_diff_check(g, loss, 1e-5) < 1e-4, f"{op_name} trial {trial}"


def test_cosine_gradient_matches_composed_formula():
    # Independent composition in the test: cos = a.b / (|a||b|), chain rule by
    # hand in numpy. The graph op uses its own closed form.
    rng = np.random.default_rng(11)
    for _ in range(50):
        a = rng.normal(size=(2, 5))
        b = rng.normal(size=(3, 5))
        upstream = rng.normal(size=(2, 3))

        g = Graph()
        na = g.leaf(a, trainable=True)
        nb = g.leaf(b, trainable=True)
        loss = g.sum(g.mul(g.cosine_rows(na, nb), g.constant(upstream)))
        forward(g, loss)
        grads = backward(g, loss)

        da = np.zeros_like(a)
        db = np.zeros_like(b)
        for i in range(2):
            for j in range(3):
                ai, bj = a[i], b[j]
                nai = math.sqrt(float(ai @ ai))
                nbj = math.sqrt(float(bj @ bj))
                dot = float(ai @ bj)
                da[i] += upstream[i, j] * (bj / (nai * nbj) - dot * ai / (nai ** 3 * nbj))
                db[j] += upstream[i, j] * (ai / (nai * nbj) - dot * bj / (nai * nbj ** 3))
        assert np.allclose(grads[na], da, atol=1e-10)
        assert np.allclose(grads[nb], db, atol=1e-10)


def test_nearly_parallel_vectors_stay_accurate():
    # Near parallel vectors the true gradient shrinks toward zero and the
    # finite-difference quotient loses all its digits, so compare the closed
    # form against the hand-composed chain rule instead.
    base = np.array([1.0, 2.0, 3.0, 4.0])
    for eps in (1e-3, 1e-6, 1e-9):
        bvec = base * 2.0 + eps
        g = Graph()
        a = g.leaf(base[None, :], trainable=True)
        b = g.leaf(bvec[None, :], trainable=True)
        loss = g.sum(g.cosine_rows(a, b))
        forward(g, loss)
        grads = backward(g, loss)

        na = math.sqrt(float(base @ base))
        nb = math.sqrt(float(bvec @ bvec))
        dot = float(base @ bvec)
        da = bvec / (na * nb) - dot * base / (na ** 3 * nb)
        db = base / (na * nb) - dot * bvec / (na * nb ** 3)
        assert np.allclose(grads[a][0], da, atol=1e-12)
        assert np.allclose(grads[b][0], db, atol=1e-12)
        assert np.all(np.isfinite(grads[a]))
