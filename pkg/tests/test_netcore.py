import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradcheck import TOL, away_from_zero, check
from tavp.errors import ShapeError
from tavp.netcore import ops
from tavp.netcore.layers import (
    GaussianPoseParams,
    add_cross_attention,
    add_film,
    build_mlp,
    cross_attention,
    film,
    gaussian_entropy,
    gaussian_log_prob,
    mlp_forward,
    sample_reparam,
    softmax_entropy,
)
from tavp.netcore.optim import Lamb, cosine_lr
from tavp.netcore.params import ParamStore
from tavp.netcore.tensor import Tensor, no_grad

SEEDS = range(20)


def leaf(x):
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def weighted(out, w):
    return ops.sum(ops.mul(out, Tensor(w)))


def _unary_cases(rng):
    a = leaf(away_from_zero(rng, (3, 4)))
    pos = leaf(np.abs(rng.standard_normal((3, 4))) + 0.2)
    return [
        ("relu", lambda: ops.relu(a), [a]),
        ("sigmoid", lambda: ops.sigmoid(a), [a]),
        ("tanh", lambda: ops.tanh(a), [a]),
        ("exp", lambda: ops.exp(a), [a]),
        ("log", lambda: ops.log(pos), [pos]),
        ("square", lambda: ops.square(a), [a]),
        ("scale", lambda: ops.scale(a, -1.7), [a]),
        ("add_scalar", lambda: ops.add_scalar(a, 0.3), [a]),
        ("clamp", lambda: ops.clamp(a, -0.5, 0.5), [a]),
        ("transpose", lambda: ops.transpose(a), [a]),
        ("reshape", lambda: ops.reshape(a, (2, 6)), [a]),
        ("sum_axis0", lambda: ops.sum(a, axis=0), [a]),
        ("sum_axis1", lambda: ops.sum(a, axis=1), [a]),
        ("index", lambda: ops.index(a, (slice(0, 2), [0, 0, 3])), [a]),
        ("take_rows", lambda: ops.take_rows(a, [2, 0, 2]), [a]),
        ("max_axis0", lambda: ops.max_axis(a, 0), [a]),
        ("max_axis1", lambda: ops.max_axis(a, 1), [a]),
        ("segment_max", lambda: ops.segment_max(a, [0, 2, 0], 3), [a]),
        ("logsumexp", lambda: ops.logsumexp(a, axis=1), [a]),
        ("log_softmax", lambda: ops.log_softmax(a, axis=1), [a]),
        ("softmax", lambda: ops.softmax(a, axis=0), [a]),
    ]


def _binary_cases(rng):
    a = leaf(away_from_zero(rng, (3, 4)))
    b = leaf(away_from_zero(rng, (3, 4)) + 0.1)
    m = leaf(rng.standard_normal((4, 2)))
    v = leaf(rng.standard_normal(4))
    s = leaf(rng.standard_normal(1))
    c = leaf(rng.standard_normal((2, 4)))
    lw = np.log(rng.random(4) + 0.1)
    return [
        ("add", lambda: ops.add(a, b), [a, b]),
        ("sub", lambda: ops.sub(a, b), [a, b]),
        ("mul", lambda: ops.mul(a, b), [a, b]),
        ("minimum", lambda: ops.minimum(a, b), [a, b]),
        ("matmul", lambda: ops.matmul(a, m), [a, m]),
        ("add_row", lambda: ops.add_row(a, v), [a, v]),
        ("mul_row", lambda: ops.mul_row(a, v), [a, v]),
        ("mul_scalar", lambda: ops.mul_scalar(a, s), [a, s]),
        ("concat0", lambda: ops.concat([a, c], axis=0), [a, c]),
        ("weighted_logsumexp", lambda: ops.weighted_logsumexp(v, lw), [v]),
    ]


@pytest.mark.parametrize("seed", SEEDS)
def test_op_gradients(seed):
    rng = np.random.default_rng(seed)
    for name, fn, leaves in _unary_cases(rng) + _binary_cases(rng):
        w = rng.standard_normal(fn().shape)
        err = check(lambda: weighted(fn(), w), leaves)
        assert err < TOL, f"{name}: rel err {err:.2e}"
    a = leaf(rng.standard_normal(5))
    assert check(lambda: ops.mean(ops.square(a)), [a]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_layer_gradients(seed):
    rng = np.random.default_rng(seed)
    store = ParamStore(seed)
    spec = build_mlp(store, "mlp", [5, 7, 3])
    add_cross_attention(store, "xa", 6)
    add_film(store, "film", 4, 6)
    for name, p in store.items():  # move FiLM and value weights off their identity-ish init
        p.data += 0.3 * rng.standard_normal(p.shape)
    x = leaf(rng.standard_normal((4, 5)))
    q = leaf(rng.standard_normal((2, 6)))
    kv = leaf(rng.standard_normal((3, 6)))
    cond = leaf(rng.standard_normal(4))
    feats = leaf(rng.standard_normal((3, 6)))
    params = [p for _, p in store.items()]
    cases = [
        ("mlp", lambda: mlp_forward(x, store, spec), [x] + [store[n] for n in store.names("mlp")]),
        ("cross_attention", lambda: cross_attention(q, kv, store, "xa"), [q, kv] + [store[n] for n in store.names("xa")]),
        ("film", lambda: film(feats, cond, store, "film"), [feats, cond] + [store[n] for n in store.names("film")]),
        ("softmax_entropy", lambda: softmax_entropy(feats), [feats]),
    ]
    assert params
    for name, fn, leaves in cases:
        w = rng.standard_normal(fn().shape)
        err = check(lambda: weighted(fn(), w), leaves)
        assert err < TOL, f"{name}: rel err {err:.2e}"


@pytest.mark.parametrize("seed", SEEDS)
def test_gaussian_head_gradients(seed):
    rng = np.random.default_rng(seed)
    mu = leaf(rng.standard_normal((3, 5)))
    ls = leaf(rng.uniform(-1.5, 1.5, (3, 5)))
    x = rng.standard_normal((3, 5))
    eps = rng.standard_normal((3, 5))
    w = rng.standard_normal((3, 5))
    assert check(lambda: gaussian_log_prob(GaussianPoseParams.from_raw(mu, ls), x), [mu, ls]) < TOL
    assert check(lambda: weighted(sample_reparam(GaussianPoseParams.from_raw(mu, ls), eps), w), [mu, ls]) < TOL
    assert check(lambda: gaussian_entropy(GaussianPoseParams.from_raw(mu, ls)), [ls]) < TOL


def test_log_prob_analytic():
    g = GaussianPoseParams.from_raw(np.zeros((1, 5)), np.zeros((1, 5)))
    base = -2.5 * math.log(2 * math.pi)
    assert gaussian_log_prob(g, np.zeros((1, 5))).item() == pytest.approx(base, abs=1e-12)
    assert base == pytest.approx(-4.594692, abs=1e-6)
    sig = np.exp(np.full((1, 5), 0.4))
    g2 = GaussianPoseParams.from_raw(np.zeros((1, 5)), np.full((1, 5), 0.4))
    x = sig.copy()
    assert gaussian_log_prob(g2, x).item() == pytest.approx(base - 5 * 0.4 - 2.5, abs=1e-12)


def test_log_prob_grad_matches_closed_form():
    rng = np.random.default_rng(0)
    mu = leaf(rng.standard_normal((3, 5)))
    ls = rng.uniform(-1, 1, (3, 5))
    x = rng.standard_normal((3, 5))
    gaussian_log_prob(GaussianPoseParams.from_raw(mu, ls), x).backward()
    np.testing.assert_allclose(mu.grad, (x - mu.data) / np.exp(2 * ls), rtol=1e-12)


def test_sample_reparam_examples():
    mu = np.arange(15.0).reshape(3, 5)
    g = GaussianPoseParams.from_raw(mu, np.zeros((3, 5)))
    np.testing.assert_array_equal(sample_reparam(g, np.zeros((3, 5))).data, mu)
    np.testing.assert_array_equal(sample_reparam(g, np.ones((3, 5))).data, mu + 1)


def test_log_sigma_clamp_keeps_log_prob_finite():
    g = GaussianPoseParams.from_raw(np.zeros((1, 5)), np.array([[-50.0, 50.0, 0, 0, 0]]))
    assert g.log_sigma.data.min() == -5.0 and g.log_sigma.data.max() == 2.0
    assert np.isfinite(gaussian_log_prob(g, np.full((1, 5), 3.0)).item())


def test_mlp_examples():
    store = ParamStore(0)
    store.add("id.w", (4, 4), np.eye(4))
    store.add("id.b", (4,), "zeros")
    from tavp.netcore.layers import Dense

    x = np.random.default_rng(1).standard_normal((2, 4))
    np.testing.assert_array_equal(mlp_forward(x, store, [Dense("id", 4, 4, "linear")]).data, x)
    store.add("z.w", (4, 3), "zeros")
    store.add("z.b", (3,), np.array([-1.0, 0.5, 2.0]))
    out = mlp_forward(x, store, [Dense("z", 4, 3, "relu")]).data
    np.testing.assert_array_equal(out, [[0, 0.5, 2.0]] * 2)
    with pytest.raises(ShapeError):
        mlp_forward(np.zeros((2, 5)), store, [Dense("id", 4, 4)])


def test_cross_attention_examples():
    store = ParamStore(3)
    add_cross_attention(store, "xa", 4)
    rng = np.random.default_rng(2)
    q = rng.standard_normal((2, 4))
    kv = rng.standard_normal((1, 4))
    out = cross_attention(q, kv, store, "xa").data
    np.testing.assert_allclose(out, kv @ store["xa.wv"].data + q, atol=1e-14)
    twice = cross_attention(q, np.concatenate([kv, kv]), store, "xa").data
    np.testing.assert_allclose(twice, out, atol=1e-14)


def test_film_examples():
    store = ParamStore(0)
    add_film(store, "f", 3, 4)
    store["f.gamma.w"].data[...] = 0.0
    store["f.beta.w"].data[...] = 0.0
    x = np.random.default_rng(0).standard_normal((5, 4))
    np.testing.assert_array_equal(film(x, np.ones(3), store, "f").data, x)
    store["f.gamma.b"].data[...] = 0.0
    store["f.beta.b"].data[...] = [1, 2, 3, 4]
    np.testing.assert_array_equal(film(x, np.ones(3), store, "f").data, np.tile([1.0, 2, 3, 4], (5, 1)))


def test_softmax_entropy_examples():
    assert softmax_entropy(np.zeros(16)).item() == pytest.approx(math.log(16), abs=1e-12)
    assert softmax_entropy(np.zeros((224, 224))).item() == pytest.approx(math.log(50176), abs=1e-9)
    one_hot = np.zeros(16)
    one_hot[3] = 1000.0
    assert softmax_entropy(one_hot).item() == pytest.approx(0.0, abs=1e-12)


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=40))
def test_softmax_properties(xs):
    p = ops.softmax(np.array(xs)).data
    assert abs(p.sum() - 1.0) < 1e-12
    h = softmax_entropy(np.array(xs)).item()
    assert -1e-12 <= h <= math.log(len(xs)) + 1e-12


def test_no_grad_records_nothing():
    a = leaf([1.0, 2.0])
    with no_grad():
        b = ops.square(a)
    assert not b.requires_grad


def test_shape_errors():
    with pytest.raises(ShapeError):
        ops.add(np.zeros(3), np.zeros(4))
    with pytest.raises(ShapeError):
        ops.add_row(np.zeros((2, 3)), np.zeros(2))


def test_zero_grad_resets_only_touched():
    store = ParamStore(0)
    store.add("a", (2,), "ones")
    store.add("b", (2,), "ones")
    ops.sum(ops.square(store["a"])).backward()
    assert store["a"].touched and not store["b"].touched
    store.zero_grad()
    assert not store["a"].grad.any() and not store["a"].touched


def test_cosine_lr():
    assert cosine_lr(1.0, 0, 11) == 1.0
    assert cosine_lr(1.0, 5, 11) == pytest.approx(0.5)
    assert cosine_lr(1.0, 10, 11) == pytest.approx(0.0, abs=1e-15)


def test_lamb_decreases_quadratic_and_skips_untouched():
    store = ParamStore(0)
    store.add("w", (4,), np.array([1.0, -2.0, 3.0, 0.5]))
    store.add("idle", (2,), "ones")
    opt = Lamb(store, ["w", "idle"])
    before = store["idle"].data.copy()
    losses = []
    for _ in range(50):
        store.zero_grad()
        loss = ops.sum(ops.square(store["w"]))
        loss.backward()
        losses.append(loss.item())
        opt.step(0.05)
    assert losses[-1] < 0.2 * losses[0]
    assert np.array_equal(store["idle"].data, before)
    assert opt.counts["idle"] == 0 and opt.counts["w"] == 50


def test_store_digest_and_clone():
    store = ParamStore(7)
    store.add("x.w", (3, 3))
    store.add("y.w", (2,))
    c = store.clone()
    assert c.digest() == store.digest()
    c["y.w"].data[0] += 1e-12
    assert c.digest() != store.digest()
    assert c.digest(prefixes=("x.",)) == store.digest(prefixes=("x.",))
    assert c.digest(exclude=("y.",)) == store.digest(exclude=("y.",))
