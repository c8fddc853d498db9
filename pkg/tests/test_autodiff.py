import math

import mpmath
import numpy as np
import pytest

from taskmerge import autodiff as ad

SEEDS = range(10)
H = 1e-3


def _rng(seed):
    return np.random.default_rng(1000 + seed)


# op name -> (builder(rng) -> (fn(*nodes) -> Node, [input arrays]))
def _binary(op):
    def build(rng):
        return op, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]

    return build


def _unary(op):
    def build(rng):
        return op, [rng.standard_normal((3, 4))]

    return build


def _layer_norm(rng):
    return ad.layer_norm, [rng.standard_normal((3, 4)), 1.0 + 0.3 * rng.standard_normal(4), 0.3 * rng.standard_normal(4)]


def _embedding(rng):
    idx = rng.integers(0, 5, size=(3, 2))
    return (lambda table: ad.embedding(table, idx)), [rng.standard_normal((5, 4))]


def _conv1d(rng):
    return (lambda x, w: ad.conv1d(x, w, 2)), [rng.standard_normal((2, 11, 3)), rng.standard_normal((4, 3, 3))]


def _cross_entropy(rng):
    labels = rng.integers(0, 4, size=3)
    return (lambda z: ad.cross_entropy(z, labels)), [rng.standard_normal((3, 4))]


OPS = {
    "matmul": lambda rng: (ad.matmul, [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))]),
    "add": _binary(ad.add),
    "add_broadcast": lambda rng: (ad.add, [rng.standard_normal((3, 4)), rng.standard_normal(4)]),
    "mul": _binary(ad.mul),
    "scale": _unary(lambda a: ad.scale(a, -1.7)),
    "transpose": _unary(ad.transpose),
    "gelu": _unary(ad.gelu),
    "softmax": _unary(ad.softmax),
    "log_softmax": _unary(ad.log_softmax),
    "layer_norm": _layer_norm,
    "mean_axis0": _unary(lambda a: ad.mean(a, axis=0)),
    "mean_axis1": _unary(lambda a: ad.mean(a, axis=1)),
    "mean_all": _unary(ad.mean),
    "total": _unary(ad.total),
    "l1_mean": _binary(ad.l1_mean),
    "cosine_similarity": _binary(ad.cosine_similarity),
    "log_sigmoid": _unary(ad.log_sigmoid),
    "embedding": _embedding,
    "conv1d": _conv1d,
    "reshape": _unary(lambda a: ad.reshape(a, (4, 3))),
    "permute": _unary(lambda a: ad.permute(a, (1, 0))),
    "cross_entropy": _cross_entropy,
}


def gradcheck(fn, arrays, seed):
    """Max relative error between backprop and central differences of a random projection."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    nodes = [ad.Node(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*nodes)
    proj = np.random.default_rng(seed + 77).standard_normal(out.shape)

    def scalar(vals):
        y = fn(*[ad.Node(v) for v in vals]).value
        return float((y * proj).sum())

    root = ad.total(ad.mul(out, ad.Node(proj)))
    ad.backward(root)
    worst = 0.0
    for i, a in enumerate(arrays):
        numeric = np.zeros_like(a)
        for j in np.ndindex(a.shape):
            up = [x.copy() for x in arrays]
            dn = [x.copy() for x in arrays]
            up[i][j] += H
            dn[i][j] -= H
            numeric[j] = (scalar(up) - scalar(dn)) / (2 * H)
        analytic = nodes[i].grad
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst


def covered_ops():
    return {op for op in ad.OPS if any(case == op or case.startswith(op + "_") for case in OPS)}


def test_every_registered_op_has_a_gradcheck():
    assert covered_ops() == set(ad.OPS)
    assert all(callable(getattr(ad, op)) for op in ad.OPS)


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradcheck_every_op(name):
    for seed in SEEDS:
        fn, arrays = OPS[name](_rng(seed))
        err = gradcheck(fn, arrays, seed)
        assert err < 1e-3, f"{name} seed {seed}: relative error {err:.2e}"


def test_float32_inputs_stay_float32():
    a = ad.Node(np.ones((2, 3), np.float32), requires_grad=True)
    out = ad.gelu(ad.layer_norm(a, np.ones(3, np.float32), np.zeros(3, np.float32)))
    assert out.value.dtype == np.float32


def test_cosine_examples():
    assert ad.cosine_similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0])).value == pytest.approx(0.0)
    assert ad.cosine_similarity(np.array([2.0, 0.0]), np.array([1.0, 0.0])).value == pytest.approx(1.0, abs=1e-7)


def test_log_sigmoid_against_mpmath():
    for x in (0.0, -3.5, 2.25, 20.0, -40.0):
        want = float(-mpmath.log(1 + mpmath.e ** (-mpmath.mpf(x))))
        got = float(ad.log_sigmoid(np.array(x, dtype=np.float64)).value)
        assert got == pytest.approx(want, rel=1e-12, abs=1e-12)
    assert float(ad.log_sigmoid(np.float32(0.0)).value) == pytest.approx(-0.693147, abs=1e-6)


def test_backward_examples():
    w = ad.Node(np.array([3.0]), requires_grad=True)
    grads = ad.backward(ad.total(ad.mul(w, w)), {"w": w})
    assert grads["w"][0] == pytest.approx(6.0)

    p = ad.Node(np.ones(4), requires_grad=True)
    grads = ad.backward(ad.total(ad.Node(np.ones(3))), {"p": p})
    assert np.array_equal(grads["p"], np.zeros(4))


def test_unreachable_parameter_gets_zero_grad():
    a = ad.Node(np.ones(3), requires_grad=True)
    b = ad.Node(np.ones((2, 2)), requires_grad=True)
    grads = ad.backward(ad.total(ad.scale(a, 2.0)), {"a": a, "b": b})
    assert np.array_equal(grads["a"], np.full(3, 2.0))
    assert grads["b"].shape == (2, 2) and not grads["b"].any()


def test_non_scalar_root_rejected():
    a = ad.Node(np.ones(3), requires_grad=True)
    with pytest.raises(ad.NonScalarRootError):
        ad.backward(ad.scale(a, 2.0))


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ad.ShapeError, match=r"matmul.*\(3, 4\).*\(3, 4\)"):
        ad.matmul(np.ones((3, 4)), np.ones((3, 4)))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(np.ones((3, 4)), np.ones((2, 4)))
    with pytest.raises(ad.ShapeError, match="conv1d"):
        ad.conv1d(np.ones((5, 2)), np.ones((4, 3, 3)), 1)


def test_shared_subexpression_accumulates():
    x = ad.Node(np.array([1.5, -2.0]), requires_grad=True)
    y = ad.mul(x, x)
    root = ad.total(ad.add(y, y))  # 2 x^2
    grads = ad.backward(root, {"x": x})
    assert np.allclose(grads["x"], 4 * x.value)


@pytest.mark.parametrize("seed", SEEDS)
def test_layer_norm_normalizes(seed):
    x = _rng(seed).standard_normal((5, 16)) * 3 + 2
    y = ad.layer_norm(x, np.ones(16), np.zeros(16)).value
    assert np.abs(y.mean(axis=-1)).max() < 1e-5
    assert np.abs(y.var(axis=-1) - 1).max() < 1e-3


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_rows_are_distributions(seed):
    y = ad.softmax(_rng(seed).standard_normal((4, 7)) * 10).value
    assert (y >= 0).all()
    assert np.abs(y.sum(axis=-1) - 1).max() < 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_cosine_bounded(seed):
    rng = _rng(seed)
    a = rng.standard_normal((50, 8)) * rng.uniform(1e-6, 1e3)
    c = ad.cosine_similarity(a, a * rng.uniform(1e-3, 10)).value
    assert (np.abs(c) <= 1 + 1e-6).all()
    c = ad.cosine_similarity(a, rng.standard_normal((50, 8))).value
    assert (np.abs(c) <= 1 + 1e-6).all()


def test_adam_first_step_moves_by_lr():
    new, state = ad.adam_step({"w": np.zeros(1, np.float32)}, {"w": np.ones(1, np.float32)}, ad.AdamState(), lr=0.001)
    assert new["w"][0] == pytest.approx(-0.001, rel=1e-5)
    assert state.step == 1


def test_adam_zero_grad_is_identity():
    p = {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}
    new, _ = ad.adam_step(p, {"w": np.zeros((2, 3), np.float32)}, ad.AdamState(), lr=0.1)
    assert np.array_equal(new["w"], p["w"])


def test_adam_matches_hand_formula_over_steps():
    rng = np.random.default_rng(3)
    w = rng.standard_normal(5).astype(np.float32)
    m = v = np.zeros(5)
    ref = w.astype(np.float64)
    state = ad.AdamState()
    params = {"w": w}
    for t in range(1, 6):
        g = rng.standard_normal(5).astype(np.float32)
        params, state = ad.adam_step(params, {"w": g}, state, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g.astype(np.float64) ** 2
        ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.allclose(params["w"], ref, atol=1e-5)


def test_adam_key_mismatch():
    with pytest.raises(KeyError):
        ad.adam_step({"a": np.zeros(1)}, {"b": np.zeros(1)}, ad.AdamState(), lr=0.1)


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(9)
        p, s = {"w": rng.standard_normal(10).astype(np.float32)}, ad.AdamState()
        for _ in range(20):
            p, s = ad.adam_step(p, {"w": rng.standard_normal(10).astype(np.float32)}, s, lr=1e-3)
        return p["w"]

    assert run().tobytes() == run().tobytes()


def test_gelu_tanh_form():
    x = np.linspace(-4, 4, 9)
    want = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
    assert np.allclose(ad.gelu(x).value, want)
