import numpy as np
import pytest

from meshfl.errors import ConfigError
from meshfl.models import (
    LOGISTIC,
    MLP,
    SYNTHETIC_PAYLOAD,
    SoftmaxRegression,
    TwoLayerPerceptron,
    build_model,
    proximal_gradient,
    proximal_penalty,
)


def _central_difference(f, w, h=1e-6):
    grad = np.empty_like(w)
    for i in range(w.size):
        step = np.zeros_like(w)
        step[i] = h
        grad[i] = (f(w + step) - f(w - step)) / (2 * h)
    return grad


def _relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def _batch(rng, n=12, d=3, classes=4):
    return rng.normal(size=(n, d)), rng.integers(0, classes, n)


@pytest.mark.parametrize("model", [SoftmaxRegression(3, 4), TwoLayerPerceptron(3, 4, hidden=5)], ids=["logistic", "mlp"])
def test_gradient_matches_finite_differences(model):
    rng = np.random.default_rng(0)
    for _ in range(100):
        X, y = _batch(rng)
        w = rng.normal(0.0, 0.5, model.dim)
        numeric = _central_difference(lambda v: model.loss(v, X, y), w)
        assert _relative_error(model.gradient(w, X, y), numeric) < 1e-5


def test_proximal_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    for _ in range(100):
        w, anchor = rng.normal(size=7), rng.normal(size=7)
        rho = float(rng.uniform(0.01, 2.0))
        numeric = _central_difference(lambda v: proximal_penalty(v, anchor, rho), w)
        assert _relative_error(proximal_gradient(w, anchor, rho), numeric) < 1e-5


def test_proximal_term_vanishes_at_the_anchor():
    w = np.arange(4.0)
    assert proximal_penalty(w, w, 3.0) == 0.0
    assert not proximal_gradient(w, w, 3.0).any()


def test_logistic_dimensions_and_prediction():
    model = SoftmaxRegression(2, 3)
    assert model.dim == 2 * 3 + 3
    w = np.zeros(model.dim)
    w[-3:] = [0.0, 5.0, 0.0]
    assert model.predict(w, np.ones((4, 2))).tolist() == [1, 1, 1, 1]
    assert model.loss(np.zeros(model.dim), np.ones((4, 2)), np.array([0, 1, 2, 0])) == pytest.approx(np.log(3))


def test_loss_is_stable_for_large_logits():
    model = SoftmaxRegression(1, 2)
    w = np.array([1000.0, -1000.0, 0.0, 0.0])
    loss = model.loss(w, np.array([[1.0]]), np.array([1]))
    assert np.isfinite(loss) and loss == pytest.approx(2000.0)


def test_init_weights_are_seeded():
    model = TwoLayerPerceptron(4, 3, hidden=8)
    a = model.init_weights(np.random.default_rng(5))
    b = model.init_weights(np.random.default_rng(5))
    assert a.shape == (model.dim,) and np.array_equal(a, b)


def test_build_model():
    assert isinstance(build_model(LOGISTIC, 4, 3), SoftmaxRegression)
    assert isinstance(build_model(SYNTHETIC_PAYLOAD, 4, 3), SoftmaxRegression)
    assert build_model(MLP, 4, 3, hidden=6).hidden == 6
    with pytest.raises(ConfigError):
        build_model("cnn", 4, 3)
    with pytest.raises(ConfigError):
        TwoLayerPerceptron(4, 3, hidden=0)
