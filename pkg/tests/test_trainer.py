import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stackforecast import kernel as K
from stackforecast.trainer import (AdamState, LinearModel, TrainConfig, TrainingError, adam_step, clip_gradients,
                                   global_norm, train)


class Scalar:
    """pred = w * x; one parameter, so loss curves are easy to steer."""

    def __init__(self, w=0.0):
        self.params = {"w": K.parameter(np.array([w]))}

    def forward(self, X, training=False, rng=None):
        return K.mul(K.Tensor(np.asarray(X, dtype=float).reshape(-1)), self.params["w"])


def test_adam_first_step_is_lr_times_sign():
    p = {"a": K.parameter(np.array([1.0, -2.0, 0.5]))}
    g = {"a": np.array([0.3, -4.0, 1e-3])}
    adam_step(p, g, AdamState.zeros_like(p), lr=0.01)
    # m_hat = g, v_hat = g^2 after bias correction
    expected = np.array([1.0, -2.0, 0.5]) - 0.01 * g["a"] / (np.abs(g["a"]) + 1e-8)
    np.testing.assert_allclose(p["a"].value, expected, rtol=1e-12)


def test_adam_two_steps_by_hand():
    p = {"a": K.parameter(np.array([0.0]))}
    st_ = AdamState.zeros_like(p)
    adam_step(p, {"a": np.array([1.0])}, st_, lr=0.1)
    adam_step(p, {"a": np.array([3.0])}, st_, lr=0.1)
    m = 0.1 * 1 * 0.9 + 0.1 * 3
    v = 0.001 * 1 * 0.999 + 0.001 * 9
    step2 = 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    assert p["a"].value[0] == pytest.approx(-0.1 * 1 / (1 + 1e-8) - step2, rel=1e-12)


def test_adam_rejects_non_finite_gradient():
    p = {"a": K.parameter(np.zeros(2))}
    with pytest.raises(FloatingPointError):
        adam_step(p, {"a": np.array([np.nan, 0.0])}, AdamState.zeros_like(p))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_clip_bounds_global_norm(seed, scale):
    rng = np.random.default_rng(seed)
    grads = {"a": rng.normal(size=(3, 4)) * scale, "b": rng.normal(size=5) * scale}
    clipped = clip_gradients(grads, 0.1)
    assert global_norm(clipped) <= 0.1 + 1e-12
    if global_norm(grads) <= 0.1:
        assert clipped is grads
    else:  # direction preserved
        np.testing.assert_allclose(clipped["a"] / grads["a"], clipped["b"][0] / grads["b"][0])


def test_linear_model_fits():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(400, 3))
    y = X @ np.array([0.5, -1.0, 2.0]) + 0.3
    m = LinearModel(3, seed=1)
    h = train(m, (X[:300], y[:300]), (X[300:], y[300:]),
              TrainConfig(learning_rate=0.05, max_epochs=200, patience=10, seed=0))
    assert h.best_val_loss < 1e-4
    np.testing.assert_allclose(m.params["w"].value.ravel(), [0.5, -1.0, 2.0], atol=1e-2)


def test_early_stopping_and_restore_best():
    X = np.ones(64)
    model = Scalar(0.0)
    # training pulls w towards 1, validation prefers 0: val loss rises every epoch
    h = train(model, (X, X), (X, np.zeros(64)), TrainConfig(learning_rate=0.01, patience=10, max_epochs=100))
    assert len(h.val_loss) == 11
    assert h.best_epoch == 0
    assert "early stop" in h.stop_reason
    assert all(b > a for a, b in zip(h.val_loss, h.val_loss[1:]))
    # restored to the parameters that produced the best validation loss
    assert float(np.mean((model.params["w"].value[0] * X) ** 2)) == pytest.approx(h.val_loss[0])


def test_training_is_seed_deterministic():
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(100, 4)), rng.normal(size=100)
    runs = []
    for _ in range(2):
        m = LinearModel(4, seed=3)
        train(m, (X, y), (X, y), TrainConfig(max_epochs=5, seed=9))
        runs.append(m.params["w"].value.copy())
    assert np.array_equal(*runs)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_history():
    X = np.full(8, 1e200)
    with pytest.raises(TrainingError) as info:
        train(Scalar(1.0), (X, np.zeros(8)), (X, np.zeros(8)), TrainConfig(max_epochs=3))
    assert "diverged" in str(info.value)
    assert "w" in info.value.last_params


def test_history_csv_header(tmp_path):
    m = LinearModel(2)
    X, y = np.ones((10, 2)), np.ones(10)
    h = train(m, (X, y), (X, y), TrainConfig(max_epochs=2))
    h.write_csv(tmp_path / "h.csv", {"config_hash": "abc", "seed": 1})
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[:3] == ["# config_hash=abc", "# seed=1", "epoch,train_loss,val_loss"]
    assert len(lines) == 5


def test_zero_epochs_leaves_params():
    m = LinearModel(2)
    before = m.params["w"].value.copy()
    h = train(m, (np.ones((4, 2)), np.ones(4)), (np.ones((4, 2)), np.ones(4)), TrainConfig(max_epochs=0))
    assert h.best_epoch is None and np.array_equal(before, m.params["w"].value)
