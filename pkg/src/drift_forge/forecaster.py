"""Linear and one-hidden-layer forecasters trained with single-example Adam.

Parameters live in one flat vector split into an encoder block (the hidden
layer, empty for the linear model) followed by a regressor block (the final
affine map). Inputs are ``(M, L)`` look-back windows, outputs ``(M, H)``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


class ModelKind(str, Enum):
    LINEAR = "linear"
    MLP = "mlp"


@dataclass(frozen=True)
class ForecasterSpec:
    kind: ModelKind
    channels: int
    lookback: int
    horizon: int
    hidden_width: int = 64
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        if min(self.channels, self.lookback, self.horizon) < 1:
            raise ValueError("channels, lookback and horizon must be positive")
        if self.kind is ModelKind.MLP and self.hidden_width < 1:
            raise ValueError(f"hidden_width must be positive, got {self.hidden_width}")

    @property
    def n_in(self) -> int:
        return self.channels * self.lookback

    @property
    def n_out(self) -> int:
        return self.channels * self.horizon

    @property
    def encoder_size(self) -> int:
        if self.kind is ModelKind.LINEAR:
            return 0
        return self.hidden_width * (self.n_in + 1)

    @property
    def regressor_in(self) -> int:
        return self.n_in if self.kind is ModelKind.LINEAR else self.hidden_width

    @property
    def regressor_size(self) -> int:
        return self.n_out * (self.regressor_in + 1)

    @property
    def n_params(self) -> int:
        return self.encoder_size + self.regressor_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)
    t: int = 0

    @classmethod
    def zeros(cls, n: int, lr: float = 1e-3, weight_decay: float = 0.0) -> "AdamState":
        return cls(lr=lr, weight_decay=weight_decay, m=np.zeros(n), v=np.zeros(n))

    def copy(self) -> "AdamState":
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay, self.m.copy(), self.v.copy(), self.t)


def _views(params: np.ndarray, spec: ForecasterSpec):
    """Weight/bias views into the flat vector: ``(W1, b1, W2, b2)``."""
    enc = spec.encoder_size
    if spec.kind is ModelKind.MLP:
        h, n_in = spec.hidden_width, spec.n_in
        w1 = params[: h * n_in].reshape(h, n_in)
        b1 = params[h * n_in : enc]
    else:
        w1 = b1 = None
    k = spec.regressor_in
    w2 = params[enc : enc + spec.n_out * k].reshape(spec.n_out, k)
    b2 = params[enc + spec.n_out * k :]
    return w1, b1, w2, b2


def init_model(spec: ForecasterSpec, lr: float = 1e-3, weight_decay: float = 0.0) -> tuple[np.ndarray, AdamState]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    rng = np.random.default_rng(spec.init_seed)
    params = np.empty(spec.n_params)
    if spec.kind is ModelKind.MLP:
        bound = 1.0 / np.sqrt(spec.n_in)
        params[: spec.encoder_size] = rng.uniform(-bound, bound, spec.encoder_size)
    bound = 1.0 / np.sqrt(spec.regressor_in)
    params[spec.encoder_size :] = rng.uniform(-bound, bound, spec.regressor_size)
    return params, AdamState.zeros(spec.n_params, lr=lr, weight_decay=weight_decay)


def _flatten_inputs(x: np.ndarray, spec: ForecasterSpec) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.shape[1:] != (spec.channels, spec.lookback):
        raise ValueError(f"expected input shape (M={spec.channels}, L={spec.lookback}), got {x.shape[1:]}")
    return x.reshape(x.shape[0], -1), single


def predict(params: np.ndarray, spec: ForecasterSpec, x: np.ndarray) -> np.ndarray:
    """Forecast ``(M, H)`` for one window or ``(n, M, H)`` for a batch."""
    xf, single = _flatten_inputs(x, spec)
    w1, b1, w2, b2 = _views(params, spec)
    z = xf if w1 is None else np.maximum(xf @ w1.T + b1, 0.0)
    out = (z @ w2.T + b2).reshape(-1, spec.channels, spec.horizon)
    return out[0] if single else out


def mse_loss(yhat: np.ndarray, y: np.ndarray) -> float:
    yhat, y = np.asarray(yhat, dtype=float), np.asarray(y, dtype=float)
    if yhat.shape != y.shape:
        raise ValueError(f"shape mismatch {yhat.shape} vs {y.shape}")
    return float(np.mean((yhat - y) ** 2))


def mae_metric(yhat: np.ndarray, y: np.ndarray) -> float:
    yhat, y = np.asarray(yhat, dtype=float), np.asarray(y, dtype=float)
    if yhat.shape != y.shape:
        raise ValueError(f"shape mismatch {yhat.shape} vs {y.shape}")
    return float(np.mean(np.abs(yhat - y)))


def loss_and_grad(
    params: np.ndarray,
    spec: ForecasterSpec,
    x: np.ndarray,
    y: np.ndarray,
    regressor_only: bool = False,
    weights: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Batch-mean MSE and its gradient.

    ``weights`` scales each example's loss (default 1 each, averaged over the
    batch). With ``regressor_only`` the backward pass stops at the regressor
    and the encoder slice of the gradient stays zero.
    """
    xf, _ = _flatten_inputs(x, spec)
    y = np.asarray(y, dtype=float).reshape(xf.shape[0], -1)
    n = xf.shape[0]
    if weights is None:
        weights = np.full(n, 1.0 / n)
    w1, b1, w2, b2 = _views(params, spec)

    if w1 is None:
        z = xf
    else:
        pre = xf @ w1.T + b1
        z = np.maximum(pre, 0.0)
    out = z @ w2.T + b2
    resid = out - y
    per_example = np.mean(resid**2, axis=1)
    loss = float(per_example @ weights)

    grad = np.zeros_like(params)
    _, gb1, gw2, gb2 = _views(grad, spec)
    d_out = resid * (2.0 / spec.n_out) * weights[:, None]
    gw2[...] = d_out.T @ z
    gb2[...] = d_out.sum(axis=0)
    if w1 is not None and not regressor_only:
        d_pre = (d_out @ w2) * (pre > 0)
        gw1 = grad[: spec.hidden_width * spec.n_in].reshape(spec.hidden_width, spec.n_in)
        gw1[...] = d_pre.T @ xf
        gb1[...] = d_pre.sum(axis=0)
    return loss, grad


def adam_update(params: np.ndarray, adam: AdamState, grad: np.ndarray, start: int = 0) -> None:
    """One in-place bias-corrected Adam(W) step on ``params[start:]``."""
    adam.t += 1
    sl = slice(start, None)
    g = grad[sl]
    adam.m[sl] = adam.beta1 * adam.m[sl] + (1.0 - adam.beta1) * g
    adam.v[sl] = adam.beta2 * adam.v[sl] + (1.0 - adam.beta2) * (g * g)
    m_hat = adam.m[sl] / (1.0 - adam.beta1**adam.t)
    v_hat = adam.v[sl] / (1.0 - adam.beta2**adam.t)
    if adam.weight_decay:
        params[sl] -= adam.lr * adam.weight_decay * params[sl]
    params[sl] -= adam.lr * m_hat / (np.sqrt(v_hat) + adam.eps)


@dataclass
class StepInfo:
    loss: float
    skipped: bool
    grad_entries: int


def grad_step(
    params: np.ndarray,
    adam: AdamState,
    spec: ForecasterSpec,
    x: np.ndarray,
    y: np.ndarray,
    freeze_encoder: bool = False,
) -> tuple[np.ndarray, AdamState, float]:
    """Functional single-example update; returns copies and the pre-update loss."""
    params, adam = params.copy(), adam.copy()
    info = train_step(params, adam, spec, x, y, freeze_encoder=freeze_encoder)
    return params, adam, info.loss


def train_step(
    params: np.ndarray,
    adam: AdamState,
    spec: ForecasterSpec,
    x: np.ndarray,
    y: np.ndarray,
    freeze_encoder: bool = False,
    weights: np.ndarray | None = None,
) -> StepInfo:
    """In-place variant of :func:`grad_step` used by the streaming loop."""
    with np.errstate(invalid="ignore", over="ignore"):
        loss, grad = loss_and_grad(params, spec, x, y, regressor_only=freeze_encoder, weights=weights)
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        logger.warning("non-finite gradient (loss=%r); update skipped", loss)
        return StepInfo(loss=loss, skipped=True, grad_entries=0)
    start = spec.encoder_size if freeze_encoder else 0
    adam_update(params, adam, grad, start=start)
    return StepInfo(loss=loss, skipped=False, grad_entries=spec.n_params - start)


# ---------------------------------------------------------------------------
# Checkpoints: a JSON header line followed by one float.hex value per line.


def save_checkpoint(params: np.ndarray, spec: ForecasterSpec, path: str | Path) -> None:
    lines = [json.dumps({"forecaster_spec": spec.to_dict(), "n_params": int(params.size)})]
    lines.extend(float(v).hex() for v in params)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[np.ndarray, ForecasterSpec]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    spec = ForecasterSpec(**header["forecaster_spec"])
    params = np.array([float.fromhex(s) for s in lines[1:] if s], dtype=float)
    if params.size != header["n_params"] or params.size != spec.n_params:
        raise ValueError(f"checkpoint holds {params.size} values, spec expects {spec.n_params}")
    return params, spec
