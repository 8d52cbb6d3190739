"""Minimal from-scratch deep-learning stack for the two gait classifiers.

Hand-written forward/backward per layer (no autograd), float64 throughout,
mini-batch Adam.  The finite-difference test suite is the safety net for
every backward pass.

Data layout conventions:

* LSTM input is (N, T, D): windows over time with flat feature columns.
* CNN input is (N, T, F, C): the flat features are split into C = 2 foot
  channels of F columns each; convolutions run along time only (kernel k,
  all input channels, shared across the F feature columns) and max pooling
  runs over (time, feature) blocks, so the tabulated pool shapes (5, 2) and
  (9, 2) reduce the feature axis while pooling time.  Ablation feature
  subsets (3 columns per foot) use (5, 1)/(9, 1) instead, since a second
  2-fold feature reduction would leave zero columns.

Training is deterministic for a fixed seed: parameter init, batch shuffling
and dropout masks all derive from explicit generators, and batch reductions
use a fixed summation order.  Inference over shared read-only parameters is
safe from concurrent callers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import dataio


class ShapeMismatch(Exception):
    pass


@dataclass(frozen=True)
class ModelConfig:
    arch: str  # "cnn" or "lstm"
    window_len: int
    n_features: int
    n_classes: int = 4
    # CNN
    n_channels: int = 2
    conv_filters: tuple[int, int] = (32, 64)
    conv_kernel: int = 5
    pool_shapes: tuple[tuple[int, int], tuple[int, int]] = ((5, 2), (9, 2))
    dense_units: int = 64
    dropout: float = 0.5
    # LSTM
    lstm_units: int = 64
    lstm_dense: int = 32

    def __post_init__(self):
        if self.arch not in ("cnn", "lstm"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if min(self.window_len, self.n_features, self.n_classes) < 1:
            raise ValueError("sizes must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.arch == "cnn" and self.n_features % self.n_channels:
            raise ValueError(
                f"{self.n_features} features do not split into "
                f"{self.n_channels} channels"
            )

    def to_json(self) -> str:
        d = dict(self.__dict__)
        d["conv_filters"] = list(self.conv_filters)
        d["pool_shapes"] = [list(p) for p in self.pool_shapes]
        return json.dumps(d, sort_keys=True)

    @staticmethod
    def from_json(s: str) -> "ModelConfig":
        d = json.loads(s)
        d["conv_filters"] = tuple(d["conv_filters"])
        d["pool_shapes"] = tuple(tuple(p) for p in d["pool_shapes"])
        return ModelConfig(**d)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 12
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0.0:
            raise ValueError("lr must be >= 0")


@dataclass
class History:
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)
    diverged: bool = False


def _check(cond: bool, msg: str):
    if not cond:
        raise ShapeMismatch(msg)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Layer:
    params: dict
    grads: dict

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, n_in, n_out, rng):
        super().__init__()
        lim = math.sqrt(6.0 / (n_in + n_out))
        self.params = {
            "W": rng.uniform(-lim, lim, size=(n_in, n_out)),
            "b": np.zeros(n_out),
        }

    def forward(self, x, train=False):
        _check(x.ndim == 2 and x.shape[1] == self.params["W"].shape[0],
               f"dense expects (batch, {self.params['W'].shape[0]}), got {x.shape}")
        self._x = x
        w = self.params["W"].astype(x.dtype, copy=False)
        return x @ w + self.params["b"].astype(x.dtype, copy=False)

    def backward(self, dy):
        self.grads = {"W": self._x.T @ dy, "b": dy.sum(axis=0)}
        return dy @ self.params["W"].astype(dy.dtype, copy=False).T


class ReLU(Layer):
    def forward(self, x, train=False):
        self._mask = x > 0.0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class Dropout(Layer):
    def __init__(self, rate, rng):
        super().__init__()
        self.rate = rate
        self.rng = rng

    def forward(self, x, train=False):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        keep = self.rng.random(x.shape) >= self.rate
        self._mask = keep.astype(x.dtype) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, dy):
        return dy if self._mask is None else dy * self._mask


class Flatten(Layer):
    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(len(x), -1)

    def backward(self, dy):
        return dy.reshape(self._shape)


class SplitFeet(Layer):
    """(N, T, F * C) flat windows to (N, T, F, C) with feet as channels;
    channel 0 is the left-foot block, channel 1 the right."""

    def __init__(self, n_channels):
        super().__init__()
        self.n_channels = n_channels

    def forward(self, x, train=False):
        _check(x.ndim == 3, f"expected (batch, time, features), got {x.shape}")
        _check(x.shape[2] % self.n_channels == 0,
               f"{x.shape[2]} features do not split into {self.n_channels} channels")
        f = x.shape[2] // self.n_channels
        self._f = f
        return np.stack([x[:, :, i * f:(i + 1) * f] for i in range(self.n_channels)],
                        axis=-1)

    def backward(self, dy):
        return np.concatenate([dy[..., i] for i in range(self.n_channels)], axis=-1)


class Conv1D(Layer):
    """Convolution along time of (N, T, F, C_in), kernel k, valid padding,
    weights shared across the F feature columns.  Implemented as im2col
    plus one matrix product per pass."""

    def __init__(self, c_in, c_out, kernel, rng):
        super().__init__()
        self.kernel = kernel
        lim = math.sqrt(6.0 / (kernel * c_in + kernel * c_out))
        self.params = {
            "W": rng.uniform(-lim, lim, size=(kernel, c_in, c_out)),
            "b": np.zeros(c_out),
        }

    def _wmat(self):
        # (k, C_in, C_out) -> (C_in * k, C_out), matching im2col column order
        return self.params["W"].transpose(1, 0, 2).reshape(-1, self.params["W"].shape[2])

    def forward(self, x, train=False):
        k = self.kernel
        c_in, c_out = self.params["W"].shape[1:]
        _check(x.ndim == 4 and x.shape[3] == c_in,
               f"conv expects (batch, time, feat, {c_in}), got {x.shape}")
        _check(x.shape[1] >= k, f"time axis {x.shape[1]} shorter than kernel {k}")
        n, t, f, _ = x.shape
        tp = t - k + 1
        xs = np.lib.stride_tricks.sliding_window_view(x, k, axis=1)
        cols = xs.reshape(n * tp * f, c_in * k)  # copies into one GEMM operand
        self._cols = cols if train else None
        self._in_shape = x.shape
        w = self._wmat().astype(x.dtype, copy=False)
        y = cols @ w + self.params["b"].astype(x.dtype, copy=False)
        return y.reshape(n, tp, f, c_out)

    def backward(self, dy):
        k = self.kernel
        c_in, c_out = self.params["W"].shape[1:]
        n, t, f, _ = self._in_shape
        tp = t - k + 1
        dyf = dy.reshape(-1, c_out)
        dwmat = self._cols.T @ dyf
        self.grads = {
            "W": dwmat.reshape(c_in, k, c_out).transpose(1, 0, 2),
            "b": dyf.sum(axis=0),
        }
        dcols = (dyf @ self._wmat().astype(dy.dtype, copy=False).T)
        dcols = dcols.reshape(n, tp, f, c_in, k)
        dx = np.zeros(self._in_shape, dtype=dy.dtype)
        for kk in range(k):
            dx[:, kk : kk + tp] += dcols[..., kk]
        return dx


class MaxPool2D(Layer):
    """Non-overlapping max pooling over (time, feature) blocks of
    (N, T, F, C); trailing remainders are dropped."""

    def __init__(self, pool_t, pool_f):
        super().__init__()
        self.pt, self.pf = pool_t, pool_f

    def forward(self, x, train=False):
        pt, pf = self.pt, self.pf
        n, t, f, c = x.shape
        to, fo = t // pt, f // pf
        _check(to >= 1 and fo >= 1,
               f"pool ({pt}, {pf}) leaves no output for input (time={t}, feat={f})")
        self._in_shape = x.shape
        xb = x[:, : to * pt, : fo * pf]
        xb = xb.reshape(n, to, pt, fo, pf, c).transpose(0, 1, 3, 5, 2, 4)
        flat = xb.reshape(n, to, fo, c, pt * pf)
        self._argmax = flat.argmax(axis=-1)
        return np.take_along_axis(flat, self._argmax[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        pt, pf = self.pt, self.pf
        n, t, f, c = self._in_shape
        to, fo = t // pt, f // pf
        flat = np.zeros((n, to, fo, c, pt * pf), dtype=dy.dtype)
        np.put_along_axis(flat, self._argmax[..., None], dy[..., None], axis=-1)
        xb = flat.reshape(n, to, fo, c, pt, pf).transpose(0, 1, 4, 2, 5, 3)
        dx = np.zeros(self._in_shape, dtype=dy.dtype)
        dx[:, : to * pt, : fo * pf] = xb.reshape(n, to * pt, fo * pf, c)
        return dx


class LSTM(Layer):
    """Single-direction LSTM unrolled over the window; returns the last
    hidden state.  Gate layout in the fused weight matrices: input, forget,
    output, candidate.  Forget-gate bias starts at 1."""

    def __init__(self, d_in, units, rng):
        super().__init__()
        self.units = units
        lim_x = math.sqrt(6.0 / (d_in + 4 * units))
        lim_h = math.sqrt(6.0 / (units + 4 * units))
        b = np.zeros(4 * units)
        b[units : 2 * units] = 1.0
        self.params = {
            "Wx": rng.uniform(-lim_x, lim_x, size=(d_in, 4 * units)),
            "Wh": rng.uniform(-lim_h, lim_h, size=(units, 4 * units)),
            "b": b,
        }

    @staticmethod
    def _sigmoid_(a):
        np.negative(a, out=a)
        np.exp(a, out=a)
        a += 1.0
        np.reciprocal(a, out=a)

    def forward(self, x, train=False):
        _check(x.ndim == 3 and x.shape[2] == self.params["Wx"].shape[0],
               f"lstm expects (batch, time, {self.params['Wx'].shape[0]}), got {x.shape}")
        n, t, d = x.shape
        hdim = self.units
        dt = x.dtype
        wx = self.params["Wx"].astype(dt, copy=False)
        wh = self.params["Wh"].astype(dt, copy=False)
        b = self.params["b"].astype(dt, copy=False)
        # input projections for every timestep in one product, (t, n, 4H)
        zx = (x.reshape(n * t, d) @ wx).reshape(n, t, 4 * hdim)
        zx += b
        zx = np.ascontiguousarray(zx.transpose(1, 0, 2))
        h = np.zeros((n, hdim), dtype=dt)
        c = np.zeros((n, hdim), dtype=dt)
        gates = zx if train else None  # gate slab reuses the projection slab
        if train:
            self._x = x
            self._cells = np.empty((t, n, hdim), dtype=dt)
            self._tanhc = np.empty((t, n, hdim), dtype=dt)
        zbuf = np.empty((n, 4 * hdim), dtype=dt)
        for step in range(t):
            if train:
                z = gates[step]
                z += h @ wh
            else:
                np.dot(h, wh, out=zbuf)
                zbuf += zx[step]
                z = zbuf
            i, f = z[:, :hdim], z[:, hdim : 2 * hdim]
            o, g = z[:, 2 * hdim : 3 * hdim], z[:, 3 * hdim :]
            self._sigmoid_(i)
            self._sigmoid_(f)
            self._sigmoid_(o)
            np.tanh(g, out=g)
            c = f * c + i * g
            tc = np.tanh(c)
            h = o * tc
            if train:
                self._cells[step] = c
                self._tanhc[step] = tc
        if train:
            self._gates = gates
        return h

    def backward(self, dh):
        x = self._x
        n, t, d = x.shape
        hdim = self.units
        dt = dh.dtype
        wh = self.params["Wh"].astype(dt, copy=False)
        wx = self.params["Wx"].astype(dt, copy=False)
        gates = self._gates
        dz_all = np.empty((t, n, 4 * hdim), dtype=dt)
        hprev = np.empty((t, n, hdim), dtype=dt)
        dc = np.zeros((n, hdim), dtype=dt)
        dh = dh.astype(dt, copy=True)
        # float32 only: gradients vanishing through hundreds of steps reach
        # the subnormal range, which stalls the FPU; flush them to zero well
        # below any magnitude Adam can resolve
        flush = np.float32(1e-15) if dt == np.float32 else None
        for step in range(t - 1, -1, -1):
            z = gates[step]
            i, f = z[:, :hdim], z[:, hdim : 2 * hdim]
            o, g = z[:, 2 * hdim : 3 * hdim], z[:, 3 * hdim :]
            tc = self._tanhc[step]
            if step > 0:
                c_prev = self._cells[step - 1]
                # h before this step, recomputed instead of stored
                np.multiply(gates[step - 1, :, 2 * hdim : 3 * hdim],
                            self._tanhc[step - 1], out=hprev[step])
            else:
                c_prev = np.zeros((n, hdim), dtype=dt)
                hprev[step] = 0.0
            do = dh * tc
            dc += dh * o * (1.0 - tc * tc)
            dz = dz_all[step]
            np.multiply(dc * g, i * (1.0 - i), out=dz[:, :hdim])
            np.multiply(dc * c_prev, f * (1.0 - f), out=dz[:, hdim : 2 * hdim])
            np.multiply(do, o * (1.0 - o), out=dz[:, 2 * hdim : 3 * hdim])
            np.multiply(dc * i, 1.0 - g * g, out=dz[:, 3 * hdim :])
            dc *= f
            dh = dz @ wh.T
            if flush is not None:
                dc *= np.abs(dc) > flush
                dh *= np.abs(dh) > flush
        # weight gradients batched over the whole sequence
        dzf = dz_all.reshape(t * n, 4 * hdim)
        dz_nt = np.ascontiguousarray(dz_all.transpose(1, 0, 2)).reshape(n * t, 4 * hdim)
        self.grads = {
            "Wx": x.reshape(n * t, d).T @ dz_nt,
            "Wh": hprev.reshape(t * n, hdim).T @ dzf,
            "b": dzf.sum(axis=0),
        }
        return (dz_nt @ wx.T).reshape(n, t, d)


# ---------------------------------------------------------------------------
# Loss, model, optimizer
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Returns (mean loss, probabilities, dloss/dlogits)."""
    _check(logits.ndim == 2, f"logits must be (batch, classes), got {logits.shape}")
    _check(len(labels) == len(logits), "labels/logits batch mismatch")
    probs = softmax(logits)
    n = len(labels)
    picked = probs[np.arange(n), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return loss, probs, dlogits / n


class Model:
    def __init__(self, config: ModelConfig, layers: list[Layer]):
        self.config = config
        self.layers = layers

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, dlogits):
        d = dlogits
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d

    def param_items(self):
        """Canonical (key, array) order used by the optimizer and the
        parameter file."""
        out = []
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                out.append((f"{i}.{name}", layer.params[name]))
        return out

    def grad_items(self):
        out = []
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                out.append((f"{i}.{name}", layer.grads[name]))
        return out

    def set_params(self, flat: dict):
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                layer.params[name] = flat[f"{i}.{name}"].copy()

    def predict_proba(self, windows: np.ndarray, batch_size: int = 256) -> np.ndarray:
        _check(windows.ndim == 3, f"windows must be (n, time, features), got {windows.shape}")
        _check(
            windows.shape[1] == self.config.window_len
            and windows.shape[2] == self.config.n_features,
            f"windows {windows.shape[1:]}, model expects "
            f"({self.config.window_len}, {self.config.n_features})",
        )
        dtype = self.param_items()[0][1].dtype
        windows = windows.astype(dtype, copy=False)
        chunks = [
            softmax(self.forward(windows[s : s + batch_size], train=False))
            for s in range(0, len(windows), batch_size)
        ]
        return np.concatenate(chunks, axis=0)

    def save(self, path):
        arrays = {k: v for k, v in self.param_items()}
        dataio.save_bundle(path, meta={"model_config": self.config.to_json()}, arrays=arrays)

    @staticmethod
    def load(path) -> "Model":
        meta, arrays = dataio.load_bundle(path)
        config = ModelConfig.from_json(meta["model_config"])
        model = build_model(config, seed=0)
        model.set_params(arrays)
        return model


def cnn_output_shape(config: ModelConfig) -> tuple[int, int]:
    """(time, feature) grid after the conv/pool stack; raises ShapeMismatch
    if a pool stage empties an axis."""
    t = config.window_len
    f = config.n_features // config.n_channels
    for (pt, pf) in config.pool_shapes:
        t = t - config.conv_kernel + 1
        _check(t >= 1, f"kernel {config.conv_kernel} exceeds time axis")
        t //= pt
        f //= pf
        _check(t >= 1 and f >= 1,
               f"pool ({pt}, {pf}) leaves an empty grid; use (.., 1) pools "
               f"for narrow feature subsets")
    return t, f


def build_model(config: ModelConfig, seed: int, dtype=np.float64) -> Model:
    """Seeded parameter init.  dtype float32 roughly halves training time
    on this stack; gradient-check tests use the float64 default."""
    rng = np.random.default_rng(seed)
    if config.arch == "cnn":
        f1, f2 = config.conv_filters
        (p1t, p1f), (p2t, p2f) = config.pool_shapes
        t_out, f_out = cnn_output_shape(config)
        layers = [
            SplitFeet(config.n_channels),
            Conv1D(config.n_channels, f1, config.conv_kernel, rng),
            ReLU(),
            MaxPool2D(p1t, p1f),
            Conv1D(f1, f2, config.conv_kernel, rng),
            ReLU(),
            MaxPool2D(p2t, p2f),
            Flatten(),
            Dense(t_out * f_out * f2, config.dense_units, rng),
            ReLU(),
            Dropout(config.dropout, rng),
            Dense(config.dense_units, config.n_classes, rng),
        ]
    else:
        layers = [
            LSTM(config.n_features, config.lstm_units, rng),
            Dense(config.lstm_units, config.lstm_dense, rng),
            ReLU(),
            Dense(config.lstm_dense, config.n_classes, rng),
        ]
    model = Model(config, layers)
    if dtype is not np.float64:
        for layer in model.layers:
            for name in layer.params:
                layer.params[name] = layer.params[name].astype(dtype)
    return model


class Adam:
    def __init__(self, model: Model, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in model.param_items()}
        self.v = {k: np.zeros_like(v) for k, v in model.param_items()}

    def step(self, model: Model):
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        params = dict(model.param_items())
        for key, grad in model.grad_items():
            m = self.m[key] = cfg.beta1 * self.m[key] + (1.0 - cfg.beta1) * grad
            v = self.v[key] = cfg.beta2 * self.v[key] + (1.0 - cfg.beta2) * grad**2
            params[key] -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def train(model: Model, windows: np.ndarray, labels: np.ndarray,
          cfg: TrainConfig, optimizer: Adam | None = None) -> History:
    """Mini-batch Adam over shuffled batches.  Deterministic for a fixed
    seed (and fixed initial parameters).  Returns per-epoch mean training
    loss and accuracy; sets History.diverged and stops if the loss goes
    non-finite."""
    _check(windows.ndim == 3, f"windows must be (n, time, features), got {windows.shape}")
    _check(len(windows) == len(labels), "windows/labels length mismatch")
    rng = np.random.default_rng(cfg.seed)
    opt = optimizer if optimizer is not None else Adam(model, cfg)
    history = History()
    dtype = model.param_items()[0][1].dtype
    windows = windows.astype(dtype, copy=False)
    n = len(windows)
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        total_loss = 0.0
        total_correct = 0
        for s in range(0, n, cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            xb, yb = windows[idx], labels[idx]
            logits = model.forward(xb, train=True)
            loss, probs, dlogits = softmax_cross_entropy(logits, yb)
            if not math.isfinite(loss):
                history.diverged = True
                history.loss.append(loss)
                history.accuracy.append(total_correct / max(s, 1))
                return history
            model.backward(dlogits)
            opt.step(model)
            total_loss += loss * len(idx)
            total_correct += int((probs.argmax(axis=1) == yb).sum())
        history.loss.append(total_loss / n)
        history.accuracy.append(total_correct / n)
    return history


def predict(model: Model, windows: np.ndarray) -> np.ndarray:
    """Class probability matrix (n, n_classes); dropout disabled."""
    return model.predict_proba(windows)
