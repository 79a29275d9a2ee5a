import math

import numpy as np
import pytest

from lst2d.errors import BadLabel, EmptyDataset
from lst2d.mnist_io import Dataset
from lst2d.nn_core import TANH, Fc, Flatten, Lst, ModelSpec, ResLst, ffnn, lst1, model_forward, zero_params
from lst2d.rng import SplitMix64
from lst2d.train import (
    AdamState,
    TrainConfig,
    adam_step,
    backward,
    batch_loss,
    cross_entropy,
    evaluate,
    glorot_init,
    gradcheck,
    init_params,
    input_gradient,
    read_history_csv,
    relative_error,
    train,
    write_history_csv,
)

GRAD_TOL = 1e-5


def small_spec(kind, d, o):
    if kind == "lst":
        return ModelSpec("lst", (Lst(d, o), Flatten(), Fc(o * o, 10)))
    if kind == "res":
        return ModelSpec("res", (ResLst(d), Flatten(), Fc(d * d, 10)))
    return ModelSpec("fc", (Flatten(), Fc(d * d, o, TANH), Fc(o, 10)))


def random_params(spec, rng, scale=0.5):
    return [{k: scale * rng.standard_normal(v.shape) for k, v in p.items()} for p in zero_params(spec)]


# initialization

def test_glorot_bound():
    bound = math.sqrt(6 / 56)
    assert bound == pytest.approx(0.32733, abs=1e-5)
    rng = SplitMix64(5)
    draws = np.concatenate([glorot_init(28, 28, rng).W.ravel() for _ in range(13)])
    assert draws.size >= 10000
    assert np.abs(draws).max() <= bound
    assert np.abs(draws).max() > 0.99 * bound
    assert abs(draws.mean()) < 0.01


def test_glorot_bias_zero_and_deterministic():
    a = glorot_init(7, 3, SplitMix64(11))
    b = glorot_init(7, 3, SplitMix64(11))
    assert np.all(a.b == 0)
    assert a.W.shape == (3, 7)
    np.testing.assert_array_equal(a.W, b.W)


def test_init_params_seeded():
    a, b, c = init_params(lst1(), 3), init_params(lst1(), 3), init_params(lst1(), 4)
    np.testing.assert_array_equal(a[0]["W1"], b[0]["W1"])
    assert not np.array_equal(a[0]["W1"], c[0]["W1"])
    assert not np.array_equal(a[0]["W1"], a[0]["W2"])


# loss

def test_cross_entropy_uniform():
    assert cross_entropy(np.zeros(10), 3) == pytest.approx(math.log(10), abs=1e-12)
    assert math.log(10) == pytest.approx(2.302585, abs=1e-6)


def test_cross_entropy_stable():
    z = np.zeros(10)
    z[4] = 1000.0
    loss = cross_entropy(z, 4)
    assert math.isfinite(loss) and loss == pytest.approx(0.0, abs=1e-300)
    assert math.isfinite(cross_entropy(z, 0))


def test_cross_entropy_shift_invariant(rng):
    z = rng.standard_normal((5, 10))
    y = rng.integers(0, 10, 5)
    assert cross_entropy(z + 123.4, y) == pytest.approx(cross_entropy(z, y), abs=1e-12)


def test_cross_entropy_bad_label():
    with pytest.raises(BadLabel):
        cross_entropy(np.zeros(10), 10)


# gradients

@pytest.mark.parametrize("kind", ["fc", "lst", "res"])
def test_gradients_match_finite_differences(kind):
    rng = np.random.default_rng({"fc": 1, "lst": 2, "res": 3}[kind])
    worst = 0.0
    for _ in range(20):
        d, o = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        spec = small_spec(kind, d, o)
        params = random_params(spec, rng)
        X = rng.standard_normal((3, d, d))
        y = rng.integers(0, 10, 3)
        worst = max(worst, gradcheck(spec, params, X, y, h=1e-5))
    assert worst <= GRAD_TOL


def test_lst1_gradients_match_finite_differences(rng):
    spec = lst1()
    params = init_params(spec, 3)
    for p in params:
        for k in p:
            p[k] = p[k] + 0.1 * rng.standard_normal(p[k].shape)
    X = rng.random((3, 28, 28))
    assert gradcheck(spec, params, X, np.array([1, 5, 7])) <= GRAD_TOL


def test_input_gradient_zero_residual_block(rng):
    spec = ModelSpec("res", (ResLst(4), Flatten(), Fc(16, 10)))
    params = zero_params(spec)
    params[2] = {"W": rng.standard_normal((10, 16)), "b": rng.standard_normal(10)}
    X = rng.standard_normal((2, 4, 4))
    y = np.array([3, 8])
    g = input_gradient(spec, params, X, y)
    num = np.zeros_like(X)
    h = 1e-5
    for idx in np.ndindex(X.shape):
        Xp, Xm = X.copy(), X.copy()
        Xp[idx] += h
        Xm[idx] -= h
        num[idx] = (batch_loss(spec, params, Xp, y) - batch_loss(spec, params, Xm, y)) / (2 * h)
    assert relative_error(g, num).max() <= GRAD_TOL
    # zero LST weights pass nothing back, so only the skip path remains
    loss_grad_flat = input_gradient(ModelSpec("fc", (Flatten(), Fc(16, 10))), [{}, params[2]], X, y)
    np.testing.assert_allclose(g, loss_grad_flat, rtol=0, atol=1e-15)


def _lst1_loop_grad_w1(params, X, y):
    """Per-row brute-force gradient of W1 for an LST(3, o) -> flatten -> FC model."""
    W1, b1, W2, b2 = (params[0][k] for k in ("W1", "b1", "W2", "b2"))
    Wo, bo = params[2]["W"], params[2]["b"]
    d, o = W1.shape[1], W1.shape[0]
    total = np.zeros_like(W1)
    n = len(y)
    for s in range(n):
        V = np.array([[math.tanh(sum(W1[j, i] * X[s, k, i] for i in range(d)) + b1[j]) for j in range(o)]
                      for k in range(d)])
        Y = np.array([[math.tanh(sum(W2[r, i] * V[i, c] for i in range(d)) + b2[r]) for c in range(o)]
                      for r in range(o)])
        z = Wo @ Y.reshape(-1) + bo
        p = np.exp(z - z.max())
        p /= p.sum()
        dz = p.copy()
        dz[y[s]] -= 1.0
        dz /= n
        dY = (Wo.T @ dz).reshape(o, o)
        dV = np.zeros((d, o))
        for r in range(o):
            for c in range(o):
                da2 = dY[r, c] * (1 - Y[r, c] ** 2)
                for i in range(d):
                    dV[i, c] += W2[r, i] * da2
        # each row application of the shared layer contributes its own outer product
        for k in range(d):
            for j in range(o):
                da1 = dV[k, j] * (1 - V[k, j] ** 2)
                for i in range(d):
                    total[j, i] += da1 * X[s, k, i]
    return total


def test_shared_weight_accumulation(rng):
    spec = ModelSpec("lst", (Lst(3, 2), Flatten(), Fc(4, 10)))
    params = random_params(spec, rng)
    X = rng.standard_normal((4, 3, 3))
    y = rng.integers(0, 10, 4)
    _, grads = backward(spec, params, X, y)
    np.testing.assert_allclose(grads[0]["W1"], _lst1_loop_grad_w1(params, X, y), rtol=1e-10, atol=1e-14)


def test_duplicated_batch_same_mean_gradient(rng):
    spec = small_spec("lst", 4, 3)
    params = random_params(spec, rng)
    X = rng.standard_normal((5, 4, 4))
    y = rng.integers(0, 10, 5)
    l1, g1 = backward(spec, params, X, y)
    l2, g2 = backward(spec, params, np.concatenate([X, X]), np.concatenate([y, y]))
    assert l1 == pytest.approx(l2, abs=1e-12)
    for a, b in zip(g1, g2):
        for k in a:
            np.testing.assert_allclose(a[k], b[k], rtol=0, atol=1e-12)


def test_gradients_finite(rng):
    spec = lst1()
    _, grads = backward(spec, init_params(spec, 0), rng.random((8, 28, 28)), rng.integers(0, 10, 8))
    assert all(np.all(np.isfinite(g[k])) for g in grads for k in g)


# Adam

def test_adam_zero_gradient_no_change():
    params = [{"w": np.array([1.0, -2.0])}]
    state = AdamState.fresh(params, lr=2e-3)
    adam_step(state, params, [{"w": np.zeros(2)}])
    np.testing.assert_array_equal(params[0]["w"], [1.0, -2.0])


def test_adam_first_step_is_lr():
    g = 0.37
    params = [{"w": np.array([0.5])}]
    state = AdamState.fresh(params, lr=2e-3)
    adam_step(state, params, [{"w": np.array([g])}])
    step = 0.5 - params[0]["w"][0]
    assert step == pytest.approx(2e-3 * g / (g + 1e-8), rel=1e-9)
    assert step == pytest.approx(2e-3, rel=1e-6)


def test_adam_reference_sequence():
    # hand-rolled Adam with coupled L2 for three steps on a scalar
    w, m, v = 1.0, 0.0, 0.0
    lr, b1, b2, eps, wd = 0.01, 0.9, 0.999, 1e-8, 0.1
    grads = [0.5, -0.2, 0.9]
    params = [{"w": np.array([1.0])}]
    state = AdamState.fresh(params, lr=lr, weight_decay=wd)
    for t, g in enumerate(grads, start=1):
        g = g + wd * w
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    for g in grads:
        adam_step(state, params, [{"w": np.array([g])}])
    assert params[0]["w"][0] == pytest.approx(w, rel=1e-14)
    assert state.t == 3 and state.v[0]["w"][0] >= 0


# config

@pytest.mark.parametrize("bad", [dict(epochs=0), dict(batch_size=0), dict(lr=0.0), dict(precision="f16")])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_train_config_paper_defaults():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.lr, cfg.weight_decay) == (300, 1000, 2e-3, 1e-5)


# evaluation

def test_evaluate_perfect_model():
    spec = ModelSpec("probe", (Flatten(), Fc(784, 10)))
    W = np.zeros((10, 784))
    W[np.arange(10), np.arange(10)] = 1.0
    labels = np.array([3, 1, 4, 1, 5, 9, 2, 6])
    images = np.zeros((len(labels), 28, 28))
    images.reshape(len(labels), -1)[np.arange(len(labels)), labels] = 1.0
    assert evaluate(spec, [{}, {"W": W, "b": np.zeros(10)}], Dataset(images, labels)) == 1.0


def test_evaluate_empty():
    spec = lst1()
    with pytest.raises(EmptyDataset):
        evaluate(spec, zero_params(spec), Dataset(np.zeros((0, 28, 28)), np.zeros(0, dtype=np.int64)))


def test_evaluate_constant_model_counts_zeros(mnist):
    _, test = mnist
    spec = lst1()
    # all-zero model ties every logit, ties go to class 0
    acc = evaluate(spec, zero_params(spec), test)
    assert acc == np.count_nonzero(test.labels == 0) / len(test)
    assert acc == 980 / 10000


def test_argmax_ignores_softmax(rng):
    z = rng.standard_normal((100, 10))
    from lst2d.nn_core import softmax
    assert np.array_equal(np.argmax(softmax(z), axis=1), np.argmax(z, axis=1))


# training loop

def test_loss_decreases_on_subset(mnist):
    train_ds, _ = mnist
    sub = train_ds.subset(1000)
    result = train(lst1(), sub, None, TrainConfig(epochs=20, seed=3))
    losses = [r.train_loss for r in result.history]
    assert losses[-1] < losses[0]
    assert len(result.history) == 20


def test_training_deterministic(mnist):
    train_ds, test_ds = mnist
    sub, tsub = train_ds.subset(2000), test_ds.subset(500)
    cfg = TrainConfig(epochs=1, batch_size=500, seed=17)
    a = train(lst1(), sub, tsub, cfg)
    b = train(lst1(), sub, tsub, cfg)
    for p, q in zip(a.params, b.params):
        for k in p:
            assert p[k].tobytes() == q[k].tobytes()
    assert [(r.train_loss, r.test_accuracy) for r in a.history] == [(r.train_loss, r.test_accuracy) for r in b.history]


def test_training_works_for_every_stage_type(mnist):
    train_ds, test_ds = mnist
    for spec in (ffnn([784, 12, 10]), small_spec("res", 28, 0)):
        result = train(spec, train_ds.subset(2000), test_ds.subset(1000), TrainConfig(epochs=3, batch_size=200, seed=1))
        assert result.history[-1].test_accuracy > 0.6


def test_history_csv_round_trip(tmp_path):
    from lst2d.train import EpochRecord
    hist = [EpochRecord(1, 0.5, 0.9), EpochRecord(2, 0.25, 0.95)]
    path = tmp_path / "h.csv"
    write_history_csv(hist, path)
    assert path.read_text().splitlines()[0] == "epoch,mean_train_loss,test_accuracy"
    back = read_history_csv(path)
    assert [(r.epoch, r.train_loss, r.test_accuracy) for r in back] == [(1, 0.5, 0.9), (2, 0.25, 0.95)]


def test_f64_training_precision(mnist):
    train_ds, _ = mnist
    result = train(lst1(), train_ds.subset(500), None, TrainConfig(epochs=1, batch_size=250, precision="f64"))
    assert result.params[0]["W1"].dtype == np.float64
    assert model_forward(lst1(), result.params, train_ds.images[0]).dtype == np.float64
