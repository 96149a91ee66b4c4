"""Memory banks, noise-augmented replay and the post-alarm adaptation routines."""

from __future__ import annotations

import logging
import math
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .forecaster import AdamState, ForecasterSpec, loss_and_grad, adam_update, predict
from .stream import WindowPair

logger = logging.getLogger(__name__)

CHANNEL_THRESHOLD = 20


class MemoryBank:
    """FIFO store of window pairs; ``push`` returns the evicted pair, if any."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque[WindowPair] = deque()

    def push(self, pair: WindowPair) -> WindowPair | None:
        self._items.append(pair)
        if len(self._items) > self.capacity:
            return self._items.popleft()
        return None

    @property
    def items(self) -> list[WindowPair]:
        return list(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def inputs(self) -> np.ndarray:
        return np.stack([p.lookback for p in self._items])

    def targets(self) -> np.ndarray:
        return np.stack([p.target for p in self._items])


def push(bank: MemoryBank, pair: WindowPair) -> MemoryBank:
    bank.push(pair)
    return bank


def feature_variance(*banks: MemoryBank) -> np.ndarray:
    """Per-coordinate sample variance of the flattened look-back inputs."""
    xs = [p.lookback.ravel() for b in banks for p in b]
    if not xs:
        raise ValueError("feature_variance needs at least one stored pair")
    if len(xs) == 1:
        return np.zeros(xs[0].size)
    return np.var(np.stack(xs), axis=0, ddof=1)


@dataclass
class AugmentedSet:
    inputs: np.ndarray  # (n, M, L)
    targets: np.ndarray  # (n, M, H)
    source_ids: list[int]

    def __len__(self) -> int:
        return len(self.source_ids)


def synthesize_augmented(source: MemoryBank, s: np.ndarray, seed: int | np.random.Generator) -> AugmentedSet:
    """Pair every stored input with ``x + u``, ``u ~ N(0, diag(s))``; targets untouched."""
    s = np.asarray(s, dtype=float)
    if not np.all(np.isfinite(s)) or np.any(s < 0):
        raise ValueError("variance vector must be finite and non-negative")
    rng = np.random.default_rng(seed)
    if len(source) == 0:
        return AugmentedSet(np.empty((0,)), np.empty((0,)), [])
    x = source.inputs()
    noise = rng.standard_normal(x.shape) * np.sqrt(s).reshape(x.shape[1:])
    return AugmentedSet(inputs=x + noise, targets=source.targets(), source_ids=list(range(len(source))))


class AdaptMode(str, Enum):
    FULL = "full"
    REGRESSOR_ONLY = "regressor_only"


@dataclass(frozen=True)
class AdaptConfig:
    lam: float = 0.1
    mode: AdaptMode = AdaptMode.FULL
    max_epochs: int = 20
    steps_per_epoch: int | None = None  # None: max(1, ceil(|M| / batch_size))
    lr_init: float = 1e-3
    plateau_decay_factor: float = 3.0
    lr_min: float = 1e-5
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", AdaptMode(self.mode))
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not self.plateau_decay_factor > 1:
            raise ValueError("plateau_decay_factor must exceed 1")
        if not self.lr_min < self.lr_init:
            raise ValueError("lr_min must be below lr_init")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be positive and max_epochs non-negative")


def select_lambda(channels: int, override: float | None = None, channel_threshold: int = CHANNEL_THRESHOLD) -> float:
    if override is not None:
        return float(override)
    if channels < 1:
        raise ValueError("channels must be positive")
    return 2.0 if channels >= channel_threshold else 0.1


@dataclass
class AdaptTrace:
    epochs: int = 0
    epoch_losses: list[float] = field(default_factory=list)
    lr_path: list[float] = field(default_factory=list)
    grad_entries: int = 0
    steps: int = 0
    wall_time: float = 0.0
    aborted: bool = False


def _adapt(
    params: np.ndarray,
    spec: ForecasterSpec,
    memory: MemoryBank,
    augmented: AugmentedSet | None,
    cfg: AdaptConfig,
    adam: AdamState | None,
    plateau: bool,
) -> tuple[np.ndarray, AdamState, AdaptTrace]:
    if len(memory) == 0:
        raise ValueError("adaptation needs a non-empty memory bank")
    use_aug = cfg.lam > 0 and augmented is not None and len(augmented) > 0
    if cfg.lam > 0 and not use_aug:
        logger.debug("lambda > 0 but no augmented pairs; adapting on M alone")
    regressor_only = cfg.mode is AdaptMode.REGRESSOR_ONLY
    start = spec.encoder_size if regressor_only else 0

    original = params.copy()
    params = params.copy()
    adam = AdamState.zeros(spec.n_params, lr=cfg.lr_init) if adam is None else adam.copy()
    adam.lr = cfg.lr_init
    rng = np.random.default_rng(cfg.seed)
    xm, ym = memory.inputs(), memory.targets()
    steps = cfg.steps_per_epoch or max(1, math.ceil(len(memory) / cfg.batch_size))

    trace = AdaptTrace()
    t0 = time.perf_counter()
    prev_epoch_loss = math.inf
    for _ in range(cfg.max_epochs):
        trace.lr_path.append(adam.lr)
        epoch = []
        for _ in range(steps):
            idx = rng.integers(0, len(memory), cfg.batch_size)
            if use_aug:
                jdx = rng.integers(0, len(augmented), cfg.batch_size)
                x = np.concatenate([xm[idx], augmented.inputs[jdx]])
                y = np.concatenate([ym[idx], augmented.targets[jdx]])
                w = np.concatenate([np.full(cfg.batch_size, 1.0), np.full(cfg.batch_size, cfg.lam)]) / cfg.batch_size
            else:
                x, y, w = xm[idx], ym[idx], None
            loss, grad = loss_and_grad(params, spec, x, y, regressor_only=regressor_only, weights=w)
            if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                logger.warning("non-finite loss during adaptation; restoring parameters")
                trace.aborted = True
                trace.wall_time = time.perf_counter() - t0
                return original, adam, trace
            adam_update(params, adam, grad, start=start)
            trace.grad_entries += spec.n_params - start
            trace.steps += 1
            epoch.append(loss)
        epoch_loss = float(np.mean(epoch))
        trace.epoch_losses.append(epoch_loss)
        trace.epochs += 1
        if plateau:
            if not epoch_loss < prev_epoch_loss:
                adam.lr /= cfg.plateau_decay_factor
            prev_epoch_loss = epoch_loss
            if adam.lr < cfg.lr_min:
                break
    trace.wall_time = time.perf_counter() - t0
    return params, adam, trace


def adapt_full(
    params: np.ndarray,
    spec: ForecasterSpec,
    memory: MemoryBank,
    augmented: AugmentedSet | None,
    cfg: AdaptConfig,
    adam: AdamState | None = None,
) -> tuple[np.ndarray, AdamState, AdaptTrace]:
    """Tune every parameter on ``M`` plus ``lam``-weighted augmented replay.

    Each step draws ``batch_size`` pairs (with replacement) from each source
    and minimises ``mean L(M batch) + lam * mean L(augmented batch)``.
    A fresh Adam state is used unless ``adam`` is given. A non-finite loss
    aborts and returns the untouched input parameters.
    """
    cfg = AdaptConfig(**{**cfg.__dict__, "mode": AdaptMode.FULL})
    return _adapt(params, spec, memory, augmented, cfg, adam, plateau=False)


def adapt_regressor_only(
    params: np.ndarray,
    spec: ForecasterSpec,
    memory: MemoryBank,
    augmented: AugmentedSet | None,
    cfg: AdaptConfig,
    adam: AdamState | None = None,
) -> tuple[np.ndarray, AdamState, AdaptTrace]:
    """Efficient variant: freeze the encoder, divide lr by the decay factor
    whenever an epoch fails to improve, stop once lr drops below ``lr_min``."""
    cfg = AdaptConfig(**{**cfg.__dict__, "mode": AdaptMode.REGRESSOR_ONLY})
    return _adapt(params, spec, memory, augmented, cfg, adam, plateau=True)


def bank_loss(params: np.ndarray, spec: ForecasterSpec, bank: MemoryBank) -> float:
    if len(bank) == 0:
        return float("nan")
    return float(np.mean((predict(params, spec, bank.inputs()) - bank.targets()) ** 2))
