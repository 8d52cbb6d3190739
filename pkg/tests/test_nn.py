import math

import numpy as np
import pytest

from maggait import nn
from maggait.nn import (
    LSTM,
    Adam,
    Conv1D,
    Dense,
    Dropout,
    Flatten,
    MaxPool2D,
    Model,
    ModelConfig,
    ReLU,
    ShapeMismatch,
    SplitFeet,
    TrainConfig,
    build_model,
    predict,
    softmax,
    softmax_cross_entropy,
    train,
)

H_FD = 1e-5


def fd_check(get_loss, arr, analytic, rng, max_checks=200):
    """Central finite differences against the analytic gradient.

    Relative error < 1e-4 where the gradient is meaningfully sized;
    tiny-magnitude entries are held to an absolute bound instead.
    """
    idxs = list(np.ndindex(arr.shape))
    if len(idxs) > max_checks:
        sel = rng.choice(len(idxs), size=max_checks, replace=False)
        idxs = [idxs[i] for i in sel]
    for idx in idxs:
        orig = arr[idx]
        arr[idx] = orig + H_FD
        lp = get_loss()
        arr[idx] = orig - H_FD
        lm = get_loss()
        arr[idx] = orig
        num = (lp - lm) / (2.0 * H_FD)
        ana = analytic[idx]
        scale = max(abs(num), abs(ana))
        if scale < 1e-6:
            assert abs(num - ana) < 1e-8, f"{idx}: {ana} vs {num}"
        else:
            rel = abs(num - ana) / scale
            assert rel < 1e-4, f"{idx}: {ana} vs {num} (rel {rel:.2e})"


def layer_gradcheck(layer, x, rng, check_params=True):
    """Project the layer output onto fixed random weights to get a scalar
    loss, then verify input and parameter gradients."""
    ref = rng.standard_normal(layer.forward(x, train=True).shape)

    def loss():
        return float(np.sum(layer.forward(x, train=True) * ref))

    layer.forward(x, train=True)
    dx = layer.backward(ref)
    fd_check(loss, x, dx, rng)
    if check_params:
        for name in layer.params:
            layer.forward(x, train=True)
            layer.backward(ref)
            fd_check(loss, layer.params[name], layer.grads[name], rng)


class TestLayerGradients:
    def test_dense(self):
        rng = np.random.default_rng(41)
        for _ in range(5):
            n_in, n_out = rng.integers(2, 9, size=2)
            layer = Dense(int(n_in), int(n_out), rng)
            x = rng.standard_normal((int(rng.integers(2, 6)), int(n_in)))
            layer_gradcheck(layer, x, rng)

    def test_conv1d(self):
        rng = np.random.default_rng(42)
        for _ in range(5):
            c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 5))
            k = int(rng.integers(2, 5))
            t = int(rng.integers(k + 1, k + 8))
            f = int(rng.integers(1, 4))
            layer = Conv1D(c_in, c_out, k, rng)
            x = rng.standard_normal((2, t, f, c_in))
            layer_gradcheck(layer, x, rng)

    def test_maxpool(self):
        rng = np.random.default_rng(43)
        for _ in range(5):
            pt, pf = int(rng.integers(1, 4)), int(rng.integers(1, 3))
            t, f, c = pt * int(rng.integers(1, 4)) + int(rng.integers(0, 2)), pf * 2, 3
            layer = MaxPool2D(pt, pf)
            # distinct values with gaps >> h so FD never crosses an argmax tie
            size = 2 * t * f * c
            x = (rng.permutation(size).astype(float) * 1e-3).reshape(2, t, f, c)
            layer_gradcheck(layer, x, rng, check_params=False)

    def test_lstm(self):
        rng = np.random.default_rng(44)
        for _ in range(5):
            d, h = int(rng.integers(2, 6)), int(rng.integers(2, 7))
            t, n = int(rng.integers(2, 6)), int(rng.integers(2, 5))
            layer = LSTM(d, h, rng)
            x = rng.standard_normal((n, t, d))
            layer_gradcheck(layer, x, rng)

    def test_relu(self):
        rng = np.random.default_rng(45)
        for _ in range(5):
            layer = ReLU()
            x = rng.standard_normal((4, 7))
            x[np.abs(x) < 0.01] = 0.5  # keep FD away from the kink
            layer_gradcheck(layer, x, rng)

    def test_flatten_and_split(self):
        rng = np.random.default_rng(46)
        x = rng.standard_normal((3, 4, 6))
        layer_gradcheck(SplitFeet(2), x, rng)
        x2 = rng.standard_normal((3, 4, 2, 5))
        layer_gradcheck(Flatten(), x2, rng)

    def test_dropout_backward_uses_cached_mask(self):
        rng = np.random.default_rng(47)
        layer = Dropout(0.4, rng)
        x = rng.standard_normal((6, 8))
        y = layer.forward(x, train=True)
        mask = layer._mask
        dy = rng.standard_normal(y.shape)
        np.testing.assert_array_equal(layer.backward(dy), dy * mask)

    def test_dropout_eval_identity(self):
        rng = np.random.default_rng(48)
        layer = Dropout(0.4, rng)
        x = rng.standard_normal((6, 8))
        np.testing.assert_array_equal(layer.forward(x, train=False), x)


class TestFullModelGradients:
    def small_cnn_config(self):
        return ModelConfig(
            arch="cnn", window_len=30, n_features=6, n_channels=2,
            conv_filters=(4, 5), conv_kernel=3, pool_shapes=((2, 1), (3, 1)),
            dense_units=7, dropout=0.0,
        )

    def small_lstm_config(self):
        return ModelConfig(arch="lstm", window_len=8, n_features=5,
                           lstm_units=6, lstm_dense=4)

    @pytest.mark.parametrize("which", ["cnn", "lstm"])
    def test_model_gradient(self, which):
        rng = np.random.default_rng(49)
        cfg = self.small_cnn_config() if which == "cnn" else self.small_lstm_config()
        model = build_model(cfg, seed=5)
        x = rng.standard_normal((4, cfg.window_len, cfg.n_features))
        y = rng.integers(0, 4, size=4)

        def loss():
            logits = model.forward(x, train=True)
            return softmax_cross_entropy(logits, y)[0]

        logits = model.forward(x, train=True)
        _, _, dlogits = softmax_cross_entropy(logits, y)
        model.backward(dlogits)
        grads = dict(model.grad_items())
        params = dict(model.param_items())
        for key in params:
            fd_check(loss, params[key], grads[key], rng, max_checks=40)


class TestSoftmaxCrossEntropy:
    def test_uniform_on_zeros(self):
        p = softmax(np.zeros((2, 4)))
        np.testing.assert_allclose(p, 0.25)

    def test_combined_gradient_identity(self):
        rng = np.random.default_rng(50)
        logits = rng.standard_normal((10, 4))
        y = rng.integers(0, 4, size=10)
        _, probs, dlogits = softmax_cross_entropy(logits, y)
        onehot = np.zeros_like(probs)
        onehot[np.arange(10), y] = 1.0
        np.testing.assert_allclose(dlogits, (probs - onehot) / 10.0, atol=1e-9)

    def test_combined_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(51)
        logits = rng.standard_normal((5, 4))
        y = rng.integers(0, 4, size=5)
        _, _, dlogits = softmax_cross_entropy(logits, y)
        fd_check(lambda: softmax_cross_entropy(logits, y)[0], logits, dlogits, rng)


class TestConvIdentity:
    def test_one_tap_unit_kernel_is_identity(self):
        rng = np.random.default_rng(52)
        layer = Conv1D(1, 1, 1, rng)
        layer.params["W"] = np.ones((1, 1, 1))
        layer.params["b"] = np.zeros(1)
        x = rng.standard_normal((2, 9, 3, 1))
        np.testing.assert_allclose(layer.forward(x), x)


def toy_dataset(rng, n=16, window=20, features=4):
    x = rng.standard_normal((n, window, features))
    y = rng.integers(0, 4, size=n)
    return x, y


class TestTraining:
    def test_lr_zero_keeps_parameters(self):
        rng = np.random.default_rng(53)
        cfg = ModelConfig(arch="lstm", window_len=20, n_features=4,
                          lstm_units=5, lstm_dense=4)
        model = build_model(cfg, seed=1)
        before = {k: v.copy() for k, v in model.param_items()}
        x, y = toy_dataset(rng)
        train(model, x, y, TrainConfig(epochs=3, lr=0.0, seed=2, batch_size=8))
        for k, v in model.param_items():
            np.testing.assert_array_equal(v, before[k])

    def test_same_seed_identical_parameters(self):
        rng = np.random.default_rng(54)
        x, y = toy_dataset(rng)
        outs = []
        for _ in range(2):
            cfg = ModelConfig(arch="lstm", window_len=20, n_features=4,
                              lstm_units=5, lstm_dense=4)
            model = build_model(cfg, seed=3)
            train(model, x, y, TrainConfig(epochs=3, seed=4, batch_size=8))
            outs.append({k: v.copy() for k, v in model.param_items()})
        for k in outs[0]:
            np.testing.assert_array_equal(outs[0][k], outs[1][k])

    def test_full_batch_shuffle_invariance(self):
        rng = np.random.default_rng(55)
        x, y = toy_dataset(rng)
        finals = []
        for shuffle_seed in (10, 11):
            cfg = ModelConfig(arch="lstm", window_len=20, n_features=4,
                              lstm_units=5, lstm_dense=4)
            model = build_model(cfg, seed=3)
            train(model, x, y, TrainConfig(epochs=2, seed=shuffle_seed,
                                           batch_size=len(x)))
            finals.append({k: v.copy() for k, v in model.param_items()})
        for k in finals[0]:
            np.testing.assert_allclose(finals[0][k], finals[1][k],
                                       rtol=0.0, atol=1e-10)

    def test_divergence_flag(self):
        rng = np.random.default_rng(56)
        x, y = toy_dataset(rng)
        cfg = ModelConfig(arch="lstm", window_len=20, n_features=4,
                          lstm_units=5, lstm_dense=4)
        model = build_model(cfg, seed=3)
        # poison a weight so the first forward already yields a NaN loss
        model.layers[-1].params["W"][:] = np.nan
        hist = train(model, x, y, TrainConfig(epochs=1, seed=1, batch_size=8))
        assert hist.diverged

    def test_toy_memorization_improves_loss(self):
        rng = np.random.default_rng(57)
        x, y = toy_dataset(rng, n=12)
        cfg = ModelConfig(arch="lstm", window_len=20, n_features=4,
                          lstm_units=8, lstm_dense=6)
        model = build_model(cfg, seed=3)
        hist = train(model, x, y, TrainConfig(epochs=200, seed=1, batch_size=4, lr=3e-3))
        assert hist.loss[-1] < hist.loss[0] / 10.0
        assert hist.accuracy[-1] == 1.0


class TestPredict:
    def make_model(self):
        cfg = ModelConfig(arch="lstm", window_len=10, n_features=3,
                          lstm_units=4, lstm_dense=4)
        return build_model(cfg, seed=9)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(58)
        model = self.make_model()
        p = predict(model, rng.standard_normal((7, 10, 3)))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)

    def test_duplicated_rows_identical(self):
        rng = np.random.default_rng(59)
        model = self.make_model()
        row = rng.standard_normal((1, 10, 3))
        p = predict(model, np.concatenate([row, row]))
        np.testing.assert_array_equal(p[0], p[1])

    def test_shape_mismatch(self):
        rng = np.random.default_rng(60)
        model = self.make_model()
        with pytest.raises(ShapeMismatch):
            predict(model, rng.standard_normal((2, 10, 5)))


class TestModelIO:
    def test_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(61)
        cfg = ModelConfig(arch="cnn", window_len=30, n_features=6,
                          conv_filters=(4, 5), conv_kernel=3,
                          pool_shapes=((2, 1), (3, 1)), dense_units=7)
        model = build_model(cfg, seed=2)
        x = rng.standard_normal((3, 30, 6))
        p1 = predict(model, x)
        path = tmp_path / "params.bundle"
        model.save(path)
        back = Model.load(path)
        np.testing.assert_array_equal(predict(back, x), p1)
        assert back.config == cfg


class TestConfigValidation:
    def test_pool_empties_feature_axis(self):
        cfg = ModelConfig(arch="cnn", window_len=500, n_features=6)
        # 3 features per foot survive (5,2) once but (9,2) would empty them
        with pytest.raises(ShapeMismatch):
            nn.cnn_output_shape(cfg)

    def test_ablation_pools_fit(self):
        cfg = ModelConfig(arch="cnn", window_len=500, n_features=6,
                          pool_shapes=((5, 1), (9, 1)))
        t, f = nn.cnn_output_shape(cfg)
        assert t >= 1 and f == 3

    def test_bad_dropout(self):
        with pytest.raises(ValueError):
            ModelConfig(arch="cnn", window_len=500, n_features=12, dropout=1.0)

    def test_odd_feature_split(self):
        with pytest.raises(ValueError):
            ModelConfig(arch="cnn", window_len=500, n_features=13)
