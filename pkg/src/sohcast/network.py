"""LSTM encoder-decoder for next-step SOH regression, from scratch.

The encoder LSTM consumes a standardized window of (soh, c_rate_dis,
c_rate_ch) rows; its final hidden state is the latent code z that domain
adaptation acts on.  A single-step decoder LSTM consumes z (from a zero
initial state) and a dense head maps its hidden state to the one-step SOH
increment, which is added to the window's last SOH to give the predicted
next-step SOH.  Gate order throughout is [input, forget, cell, output].

All forward and reverse-mode computations are explicit numpy float64:
the backward pass implements exact backpropagation through time, which is
validated against central finite differences in the test suite.  The
supervised loss is the plain sum of squared errors over a batch; the
domain-adaptation penalty is added by the training code in
:mod:`sohcast.adapt` and routes gradients into the encoder only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.special import expit

from .dataset import Scaler
from .errors import DataError, NumericError, ParameterError

GATES = 4  # [i, f, g, o]


# --------------------------------------------------------------------------
# Parameters
# --------------------------------------------------------------------------


@dataclass
class ModelParams:
    """All trainable arrays.  Shapes use H = hidden size, D = input size.

    Decoder weights follow the same (4H, .) stacking as the encoder even
    though the decoder runs for a single step from a zero state, so its
    recurrent kernel and forget gate receive exactly zero gradient; they
    are kept for structural symmetry.
    """

    enc_wx: np.ndarray  # (4H, D)
    enc_wh: np.ndarray  # (4H, H)
    enc_b: np.ndarray  # (4H,)
    dec_wx: np.ndarray  # (4H, H)
    dec_wh: np.ndarray  # (4H, H)
    dec_b: np.ndarray  # (4H,)
    head_w: np.ndarray  # (H,)
    head_b: np.ndarray  # (1,)

    @property
    def hidden(self) -> int:
        return int(self.enc_wh.shape[1])

    @property
    def input_size(self) -> int:
        return int(self.enc_wx.shape[1])

    def items(self) -> list[tuple[str, np.ndarray]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def copy(self) -> "ModelParams":
        return ModelParams(**{name: arr.copy() for name, arr in self.items()})

    def n_params(self) -> int:
        return int(sum(arr.size for _, arr in self.items()))


def init_model(hidden: int, seed: int, input_size: int = 3) -> ModelParams:
    """Initialize weights U(-1/sqrt(H), 1/sqrt(H)), biases zero.

    The encoder and decoder forget-gate biases are set to 1 so the cell
    state is initially retained.
    """
    if hidden < 1:
        raise ParameterError(f"hidden size must be >= 1; got {hidden}")
    if input_size < 1:
        raise ParameterError(f"input size must be >= 1; got {input_size}")
    rng = np.random.default_rng(seed)
    s = 1.0 / np.sqrt(hidden)

    def uniform(*shape: int) -> np.ndarray:
        return rng.uniform(-s, s, size=shape)

    enc_b = np.zeros(GATES * hidden)
    enc_b[hidden : 2 * hidden] = 1.0
    dec_b = np.zeros(GATES * hidden)
    dec_b[hidden : 2 * hidden] = 1.0
    return ModelParams(
        enc_wx=uniform(GATES * hidden, input_size),
        enc_wh=uniform(GATES * hidden, hidden),
        enc_b=enc_b,
        dec_wx=uniform(GATES * hidden, hidden),
        dec_wh=uniform(GATES * hidden, hidden),
        dec_b=dec_b,
        head_w=uniform(hidden),
        head_b=np.zeros(1),
    )


def zero_grads(model: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in model.items()}


# --------------------------------------------------------------------------
# Forward
# --------------------------------------------------------------------------


@dataclass
class _LstmCache:
    """Per-step activations needed by the backward pass."""

    x: np.ndarray  # (n, T, D) inputs
    i: np.ndarray  # (T, n, H)
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c: np.ndarray
    tc: np.ndarray  # tanh(c)
    h: np.ndarray  # (T + 1, n, H), h[0] is the initial state


@dataclass
class ForwardCache:
    enc: _LstmCache
    dec: _LstmCache | None
    z: np.ndarray  # (n, H)
    h_dec: np.ndarray | None  # (n, H)
    yhat: np.ndarray | None  # (n,)


def _lstm_forward(
    X: np.ndarray, wx: np.ndarray, wh: np.ndarray, b: np.ndarray
) -> _LstmCache:
    """Run an LSTM over (n, T, D) inputs from a zero initial state."""
    n, T, D = X.shape
    H = wh.shape[1]
    xp = (X.reshape(n * T, D) @ wx.T).reshape(n, T, GATES * H)
    i_c = np.empty((T, n, H))
    f_c = np.empty((T, n, H))
    g_c = np.empty((T, n, H))
    o_c = np.empty((T, n, H))
    c_c = np.empty((T, n, H))
    tc_c = np.empty((T, n, H))
    h_c = np.zeros((T + 1, n, H))
    c = np.zeros((n, H))
    for t in range(T):
        pre = xp[:, t] + h_c[t] @ wh.T + b
        i = expit(pre[:, :H])
        f = expit(pre[:, H : 2 * H])
        g = np.tanh(pre[:, 2 * H : 3 * H])
        o = expit(pre[:, 3 * H :])
        c = f * c + i * g
        tc = np.tanh(c)
        i_c[t], f_c[t], g_c[t], o_c[t] = i, f, g, o
        c_c[t], tc_c[t] = c, tc
        h_c[t + 1] = o * tc
    return _LstmCache(x=X, i=i_c, f=f_c, g=g_c, o=o_c, c=c_c, tc=tc_c, h=h_c)


def forward(
    model: ModelParams, X: np.ndarray, *, encoder_only: bool = False
) -> ForwardCache:
    """Full forward pass on standardized windows X of shape (n, w, D).

    Returns the latent codes z (encoder final hidden state) and, unless
    `encoder_only`, the decoder hidden state and scalar predictions.
    """
    if X.ndim != 3:
        raise ParameterError(f"X must be (n, w, D); got shape {X.shape}")
    if X.shape[0] == 0:
        raise ParameterError("cannot run the network on an empty batch")
    if X.shape[2] != model.input_size:
        raise ParameterError(
            f"X has {X.shape[2]} features; model expects {model.input_size}"
        )
    enc = _lstm_forward(X, model.enc_wx, model.enc_wh, model.enc_b)
    z = enc.h[-1]
    if encoder_only:
        return ForwardCache(enc=enc, dec=None, z=z, h_dec=None, yhat=None)
    dec = _lstm_forward(z[:, None, :], model.dec_wx, model.dec_wh, model.dec_b)
    h_dec = dec.h[-1]
    # The head predicts the one-step SOH *increment* on top of the window's
    # last SOH (both in standardized units, which share the SOH channel's
    # scale).  Predicting the increment instead of the level keeps the MSE
    # gradient focused on the fade dynamics -- the level part is carried by
    # the skip -- which is what closed-loop rollouts accumulate.  Inputs are
    # constants, so no extra backward path is introduced.
    yhat = X[:, -1, 0] + h_dec @ model.head_w + model.head_b[0]
    return ForwardCache(enc=enc, dec=dec, z=z, h_dec=h_dec, yhat=yhat)


def loss_source(yhat: np.ndarray, y: np.ndarray) -> float:
    """Sum of squared errors over the batch."""
    if yhat.shape != y.shape or yhat.size == 0:
        raise ParameterError(
            f"prediction/label shape mismatch or empty: {yhat.shape} vs {y.shape}"
        )
    d = yhat - y
    return float(d @ d)


# --------------------------------------------------------------------------
# Backward
# --------------------------------------------------------------------------


def _lstm_backward(
    cache: _LstmCache,
    wx: np.ndarray,
    wh: np.ndarray,
    dh_last: np.ndarray,
    grads: dict[str, np.ndarray],
    prefix: str,
) -> np.ndarray:
    """Backpropagate through time.  Returns dL/dX of shape (n, T, D).

    `dh_last` is the loss gradient w.r.t. the final hidden state.
    Gradients are accumulated into `grads[prefix + {'wx','wh','b'}]`.
    """
    X = cache.x
    n, T, D = X.shape
    H = wh.shape[1]
    g_wx = grads[prefix + "wx"]
    g_wh = grads[prefix + "wh"]
    g_b = grads[prefix + "b"]
    dX = np.empty((n, T, D))
    dh = dh_last
    dc = np.zeros((n, H))
    for t in range(T - 1, -1, -1):
        i, f, g, o = cache.i[t], cache.f[t], cache.g[t], cache.o[t]
        tc = cache.tc[t]
        c_prev = cache.c[t - 1] if t > 0 else np.zeros((n, H))
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dc = dc * f
        dpre = np.concatenate(
            [
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                dg * (1.0 - g * g),
                do * o * (1.0 - o),
            ],
            axis=1,
        )
        g_wx += dpre.T @ X[:, t]
        g_wh += dpre.T @ cache.h[t]
        g_b += dpre.sum(axis=0)
        dX[:, t] = dpre @ wx
        dh = dpre @ wh
    return dX


def backward(
    model: ModelParams,
    cache: ForwardCache,
    dyhat: np.ndarray | None,
    dz_extra: np.ndarray | None = None,
    grads: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients for this forward pass.

    `dyhat` is dL/dyhat from the supervised loss (None for unlabeled,
    encoder-only passes); `dz_extra` is any additional dL/dz, e.g. from
    the MMD penalty.  Head and decoder gradients come exclusively from
    `dyhat`; `dz_extra` flows only into the encoder.  Accumulates into
    `grads` when given.
    """
    if grads is None:
        grads = zero_grads(model)
    dz = np.zeros_like(cache.z)
    if dyhat is not None:
        if cache.dec is None:
            raise ParameterError("supervised backward needs a full forward pass")
        grads["head_w"] += cache.h_dec.T @ dyhat
        grads["head_b"] += np.array([dyhat.sum()])
        dh_dec = dyhat[:, None] * model.head_w[None, :]
        dz_dec = _lstm_backward(
            cache.dec, model.dec_wx, model.dec_wh, dh_dec, grads, "dec_"
        )
        dz += dz_dec[:, 0, :]
    if dz_extra is not None:
        dz += dz_extra
    _lstm_backward(cache.enc, model.enc_wx, model.enc_wh, dz, grads, "enc_")
    return grads


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] | None = None
    v: dict[str, np.ndarray] | None = None


def adam_init(model: ModelParams, lr: float = 1e-3) -> AdamState:
    return AdamState(
        lr=lr,
        m={name: np.zeros_like(arr) for name, arr in model.items()},
        v={name: np.zeros_like(arr) for name, arr in model.items()},
    )


def adam_step(
    model: ModelParams, grads: Mapping[str, np.ndarray], state: AdamState
) -> ModelParams:
    """One Adam update; mutates `state`, returns a new ModelParams."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    new = {}
    for name, arr in model.items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        new[name] = arr - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return ModelParams(**new)


def clip_global_norm(
    grads: dict[str, np.ndarray], max_norm: float
) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients jointly so their global L2 norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if not np.isfinite(norm):
        raise NumericError(f"non-finite gradient norm: {norm}")
    if norm > max_norm > 0.0:
        scale = max_norm / norm
        grads = {name: g * scale for name, g in grads.items()}
    return grads, norm


# --------------------------------------------------------------------------
# Prediction convenience and checkpoints
# --------------------------------------------------------------------------


@dataclass
class Predictor:
    """Bundles a trained model with its feature scaler."""

    model: ModelParams
    scaler: Scaler

    def predict_next(self, X_phys: np.ndarray) -> np.ndarray:
        """Physical-unit windows in, physical-unit next-step SOH out."""
        fc = forward(self.model, self.scaler.transform(X_phys))
        return self.scaler.inverse_labels(fc.yhat)

    def encode(self, X_phys: np.ndarray) -> np.ndarray:
        fc = forward(self.model, self.scaler.transform(X_phys), encoder_only=True)
        return fc.z


def save_checkpoint(
    path: Path | str, model: ModelParams, scaler: Scaler, meta: Mapping
) -> None:
    """Persist model weights, scaler stats, and JSON metadata to .npz."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: arr for name, arr in model.items()}
    arrays["scaler_mean"] = scaler.mean_
    arrays["scaler_std"] = scaler.std_
    arrays["meta_json"] = np.frombuffer(
        json.dumps(dict(meta), sort_keys=True).encode(), dtype=np.uint8
    )
    np.savez(path, **arrays)


def load_checkpoint(path: Path | str) -> tuple[ModelParams, Scaler, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing checkpoint: {path}")
    with np.load(path) as data:
        names = {f.name for f in fields(ModelParams)}
        missing = names - set(data.files)
        if missing:
            raise DataError(f"{path}: checkpoint lacks arrays {sorted(missing)}")
        model = ModelParams(**{name: data[name].copy() for name in names})
        scaler = Scaler(
            mean_=data["scaler_mean"].copy(), std_=data["scaler_std"].copy()
        )
        meta = json.loads(bytes(data["meta_json"].tobytes()).decode())
    h = model.hidden
    expected = {
        "enc_wx": (GATES * h, model.input_size),
        "enc_wh": (GATES * h, h),
        "enc_b": (GATES * h,),
        "dec_wx": (GATES * h, h),
        "dec_wh": (GATES * h, h),
        "dec_b": (GATES * h,),
        "head_w": (h,),
        "head_b": (1,),
    }
    for name, shape in expected.items():
        if getattr(model, name).shape != shape:
            raise DataError(
                f"{path}: array {name} has shape {getattr(model, name).shape}, "
                f"expected {shape}"
            )
    return model, scaler, meta
