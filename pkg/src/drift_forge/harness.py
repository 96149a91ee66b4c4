"""Experiment orchestration: the detect-then-adapt online loop, metrics and reports."""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
import os
import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import adapter as adp
from .detector import DetectorConfig, DetectorState, VerdictKind
from .forecaster import ForecasterSpec, ModelKind, init_model, mae_metric, mse_loss, predict, train_step
from .stream import (
    MultivariateSeries,
    Protocol,
    ProtocolState,
    SyntheticSpec,
    fit_normalizer,
    generate_synthetic,
    iter_windows,
    load_csv,
    n_windows,
    split_warmup,
    window_at,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TRACE_COLUMNS = ("round", "mse", "mae", "cumulative_mean_mse", "cumulative_mean_mae", "verdict")


class Method(str, Enum):
    NAIVE = "naive"
    D3A = "d3a"
    D3A_STAR = "d3a-star"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    data_path: str | None = None
    synthetic: SyntheticSpec | None = None
    lookback: int = 60
    horizon: int = 24
    warm_fraction: float = 0.25
    protocol: Protocol = Protocol.STANDARD
    method: Method = Method.D3A
    model_kind: ModelKind = ModelKind.LINEAR
    hidden_width: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    l_w: int = 16
    alpha_t: float = 0.01
    m_t: int | None = None  # None: 64 * l_w
    lam: float | None = None  # None: chosen from the channel count
    l_v: int = 512
    adapt_epochs: int = 20
    adapt_batch_size: int = 8
    adapt_lr: float = 1e-3
    adapt_lr_min: float = 1e-5
    plateau_decay_factor: float = 3.0
    pretrain: bool = True
    seed: int = 0
    has_header: bool = True

    def __post_init__(self):
        self.protocol = Protocol(self.protocol)
        self.method = Method(self.method)
        self.model_kind = ModelKind(self.model_kind)
        if isinstance(self.synthetic, dict):
            self.synthetic = SyntheticSpec.from_dict(self.synthetic)

    def validate(self) -> None:
        if (self.data_path is None) == (self.synthetic is None):
            raise ConfigError("exactly one of data_path or synthetic must be given")
        if self.lookback < 1 or self.horizon < 1:
            raise ConfigError("lookback and horizon must be positive")
        if self.l_v < 1:
            raise ConfigError("l_v must be positive")
        try:
            self.detector_config()
            self.adapt_config(1)
            ForecasterSpec(self.model_kind, 1, self.lookback, self.horizon, self.hidden_width, self.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not 0 < self.warm_fraction < 1:
            raise ConfigError("warm_fraction must lie in (0, 1)")

    def detector_config(self) -> DetectorConfig:
        m_t = 64 * self.l_w if self.m_t is None else self.m_t
        return DetectorConfig(l_w=self.l_w, alpha_t=self.alpha_t, m_t=m_t)

    def adapt_config(self, channels: int, seed: int = 0) -> adp.AdaptConfig:
        mode = adp.AdaptMode.REGRESSOR_ONLY if self.method is Method.D3A_STAR else adp.AdaptMode.FULL
        return adp.AdaptConfig(
            lam=adp.select_lambda(channels, self.lam),
            mode=mode,
            max_epochs=self.adapt_epochs,
            lr_init=self.adapt_lr,
            plateau_decay_factor=self.plateau_decay_factor,
            lr_min=self.adapt_lr_min,
            batch_size=self.adapt_batch_size,
            seed=seed,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["synthetic"] = self.synthetic.to_dict() if self.synthetic is not None else None
        for k in ("protocol", "method", "model_kind"):
            d[k] = getattr(self, k).value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ReportRecord:
    accumulated_mse: float
    accumulated_mae: float
    n_rounds: int
    dropped_rounds: int
    train_updates: int
    alarms: list = field(default_factory=list)  # [round, z]
    scheduled_refreshes: list = field(default_factory=list)
    adaptation_events: list = field(default_factory=list)
    wall_time: float = 0.0
    config: dict = field(default_factory=dict)
    seed: int = 0
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ReportRecord":
        return cls(**d)


@dataclass
class LossTrace:
    rounds: list[int] = field(default_factory=list)
    mse: list[float] = field(default_factory=list)
    mae: list[float] = field(default_factory=list)
    cumulative_mean_mse: list[float] = field(default_factory=list)
    cumulative_mean_mae: list[float] = field(default_factory=list)
    verdict: list[str] = field(default_factory=list)

    def append(self, round_: int, mse: float, mae: float, verdict: str) -> None:
        n = len(self.rounds)
        prev_mse = self.cumulative_mean_mse[-1] if n else 0.0
        prev_mae = self.cumulative_mean_mae[-1] if n else 0.0
        self.rounds.append(round_)
        self.mse.append(mse)
        self.mae.append(mae)
        self.cumulative_mean_mse.append(prev_mse + (mse - prev_mse) / (n + 1))
        self.cumulative_mean_mae.append(prev_mae + (mae - prev_mae) / (n + 1))
        self.verdict.append(verdict)

    def __len__(self) -> int:
        return len(self.rounds)

    def rows(self):
        return zip(self.rounds, self.mse, self.mae, self.cumulative_mean_mse, self.cumulative_mean_mae, self.verdict)


def accumulate(trace: LossTrace) -> tuple[float, float]:
    if len(trace) == 0:
        raise ValueError("cannot accumulate an empty trace")
    return float(np.mean(trace.mse)), float(np.mean(trace.mae))


# ---------------------------------------------------------------------------
# Data preparation


@dataclass
class PreparedData:
    warm: MultivariateSeries
    online: MultivariateSeries
    normalizer: object
    boundaries_online: list[int]  # regime starts, in online-row coordinates


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    if cfg.synthetic is not None:
        raw = generate_synthetic(cfg.synthetic)
        boundaries = cfg.synthetic.boundaries
    else:
        raw = load_csv(cfg.data_path, has_header=cfg.has_header)
        boundaries = []
    warm, online = split_warmup(raw, cfg.warm_fraction, cfg.lookback, cfg.horizon)
    norm = fit_normalizer(warm)
    cut = warm.length
    return PreparedData(
        warm=norm.apply(warm),
        online=norm.apply(online),
        normalizer=norm,
        boundaries_online=[b - cut for b in boundaries if b > cut],
    )


def shift_rounds(prepared: PreparedData, lookback: int, horizon: int) -> list[int]:
    """First online round whose target window touches each regime change."""
    return [max(0, b - lookback - horizon + 1) for b in prepared.boundaries_online]


# ---------------------------------------------------------------------------
# The online loop


@dataclass
class RunResult:
    report: ReportRecord
    trace: LossTrace
    params: np.ndarray
    spec: ForecasterSpec
    shift_rounds: list[int]


def run_experiment(cfg: ExperimentConfig, partial_trace_path: str | Path | None = None) -> RunResult:
    """Run one configuration end to end.

    Per round: predict, score, release truths per the protocol and train on
    them, then feed each matured pair to the memory banks and the detector.
    On an alarm or scheduled refresh (non-naive methods) the forecaster is
    re-tuned on the memory bank with noise-augmented replay and the
    detector is reset.
    """
    cfg.validate()
    t_start = time.perf_counter()
    data = prepare_data(cfg)
    L, H = cfg.lookback, cfg.horizon
    M = data.online.channels
    spec = ForecasterSpec(cfg.model_kind, M, L, H, cfg.hidden_width, init_seed=cfg.seed)
    params, adam = init_model(spec, lr=cfg.lr, weight_decay=cfg.weight_decay)

    if cfg.pretrain:
        for pair in iter_windows(data.warm, L, H):
            train_step(params, adam, spec, pair.lookback, pair.target)

    detect = cfg.method is not Method.NAIVE
    detector = DetectorState(cfg.detector_config())
    memory = adp.MemoryBank(cfg.l_w)
    memory_prev = adp.MemoryBank(cfg.l_v)
    protocol = ProtocolState(cfg.protocol, H)
    adapt_rng = np.random.default_rng([cfg.seed, 0xADA])

    trace = LossTrace()
    alarms, refreshes, events = [], [], []
    scoring: deque = deque()  # (maturity_round, round, mse, mae, pair)
    train_updates = 0
    n_rounds = n_windows(data.online, L, H)

    try:
        for r in range(n_rounds):
            pair = window_at(data.online, r, L, H)
            yhat = predict(params, spec, pair.lookback)
            scoring.append((protocol.maturity_round(r), r, mse_loss(yhat, pair.target), mae_metric(yhat, pair.target), pair))

            for revealed in protocol.advance(r, pair):
                info = train_step(params, adam, spec, revealed.lookback, revealed.target)
                train_updates += not info.skipped

            while scoring and scoring[0][0] <= r:
                _, rr, mse_r, mae_r, spair = scoring.popleft()
                evicted = memory.push(spair)
                if evicted is not None:
                    memory_prev.push(evicted)
                kind = VerdictKind.NO_DRIFT
                if detect:
                    detector.record_loss(mse_r)
                    verdict = detector.check(r)
                    kind = verdict.kind
                    if kind is not VerdictKind.NO_DRIFT:
                        if kind is VerdictKind.DRIFT_ALARM:
                            alarms.append([r, verdict.z_score])
                        else:
                            refreshes.append(r)
                        params, event = _adapt_event(cfg, spec, params, memory, memory_prev, adapt_rng, r, kind)
                        events.append(event)
                        detector.reset()
                trace.append(rr, mse_r, mae_r, kind.value)
    except Exception:
        if partial_trace_path is not None:
            emit_trace(trace, partial_trace_path)
        raise

    acc_mse, acc_mae = accumulate(trace)
    report = ReportRecord(
        accumulated_mse=acc_mse,
        accumulated_mae=acc_mae,
        n_rounds=len(trace),
        dropped_rounds=len(scoring),
        train_updates=train_updates,
        alarms=alarms,
        scheduled_refreshes=refreshes,
        adaptation_events=events,
        wall_time=time.perf_counter() - t_start,
        config=cfg.to_dict(),
        seed=cfg.seed,
    )
    return RunResult(report, trace, params, spec, shift_rounds(data, L, H))


def _adapt_event(cfg, spec, params, memory, memory_prev, rng, round_, kind) -> tuple[np.ndarray, dict]:
    seed = int(rng.integers(2**31))
    acfg = cfg.adapt_config(spec.channels, seed=seed)
    augmented = None
    if acfg.lam > 0 and len(memory_prev) > 0:
        s = adp.feature_variance(memory_prev, memory)
        augmented = adp.synthesize_augmented(memory_prev, s, seed + 1)
    pre = adp.bank_loss(params, spec, memory)
    if acfg.mode is adp.AdaptMode.REGRESSOR_ONLY:
        new_params, _, tr = adp.adapt_regressor_only(params, spec, memory, augmented, acfg)
    else:
        new_params, _, tr = adp.adapt_full(params, spec, memory, augmented, acfg)
    event = {
        "event_round": round_,
        "trigger": "alarm" if kind is VerdictKind.DRIFT_ALARM else "scheduled",
        "epochs": tr.epochs,
        "lr_path": tr.lr_path,
        "pre_loss": pre,
        "post_loss": adp.bank_loss(new_params, spec, memory),
        "steps": tr.steps,
        "grad_entries": tr.grad_entries,
        "wall_time": tr.wall_time,
        "aborted": tr.aborted,
    }
    return new_params, event


# ---------------------------------------------------------------------------
# Post-hoc analysis


def recovery_rounds(
    mse: list[float] | np.ndarray,
    shift_round: int,
    pre_window: int = 200,
    smooth: int = 16,
    factor: float = 1.5,
    limit: int | None = None,
) -> int:
    """Rounds after ``shift_round`` until the trailing ``smooth``-round mean
    loss is back within ``factor`` times the pre-shift mean.

    The pre-shift mean covers the ``pre_window`` rounds before the shift.
    Returns ``limit`` (default: remaining rounds) if recovery never happens.
    """
    mse = np.asarray(mse, dtype=float)
    pre = mse[max(0, shift_round - pre_window) : shift_round]
    if pre.size == 0:
        raise ValueError("no pre-shift rounds to compare against")
    target = factor * pre.mean()
    stop = mse.size if limit is None else min(mse.size, shift_round + limit)
    csum = np.concatenate([[0.0], np.cumsum(mse)])
    for r in range(shift_round + smooth, stop + 1):
        if (csum[r] - csum[r - smooth]) / smooth <= target:
            return r - shift_round
    return stop - shift_round


# ---------------------------------------------------------------------------
# Serialization


def emit_report(record: ReportRecord, path: str | Path) -> None:
    Path(path).write_text(json.dumps(record.to_dict(), indent=2), encoding="utf-8")


def read_report(path: str | Path) -> ReportRecord:
    return ReportRecord.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def emit_trace(trace: LossTrace, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for rnd, mse, mae, cmse, cmae, verdict in trace.rows():
            w.writerow([rnd, repr(mse), repr(mae), repr(cmse), repr(cmae), verdict])


def read_trace(path: str | Path) -> LossTrace:
    trace = LossTrace()
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != TRACE_COLUMNS:
            raise ValueError(f"unexpected trace columns {header}")
        for rnd, mse, mae, cmse, cmae, verdict in reader:
            trace.rounds.append(int(rnd))
            trace.mse.append(float(mse))
            trace.mae.append(float(mae))
            trace.cumulative_mean_mse.append(float(cmse))
            trace.cumulative_mean_mae.append(float(cmae))
            trace.verdict.append(verdict)
    return trace


# ---------------------------------------------------------------------------
# Suites

SUITE_COLUMNS = ("method", "protocol", "horizon", "seed", "mse", "mae", "n_rounds", "alarms", "status")
SUMMARY_COLUMNS = ("method", "protocol", "horizon", "n_seeds", "mean_mse", "mean_mae")


def expand_grid(grid_doc: dict) -> list[ExperimentConfig]:
    """``{"base": {...}, "grid": {"method": [...], "seed": [...]}}`` -> configs."""
    base = dict(grid_doc.get("base", {}))
    grid = grid_doc.get("grid", {})
    keys = sorted(grid)
    configs = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        configs.append(ExperimentConfig.from_dict({**base, **dict(zip(keys, combo))}))
    return configs


def _suite_worker(cfg_dict: dict) -> dict:
    cfg = ExperimentConfig.from_dict(cfg_dict)
    row = {"method": cfg.method.value, "protocol": cfg.protocol.value, "horizon": cfg.horizon, "seed": cfg.seed}
    try:
        res = run_experiment(cfg)
        row.update(
            mse=res.report.accumulated_mse,
            mae=res.report.accumulated_mae,
            n_rounds=res.report.n_rounds,
            alarms=len(res.report.alarms),
            status="ok",
            report=res.report.to_dict(),
        )
    except Exception as exc:  # recorded, the suite carries on
        logger.error("config failed: %s", exc)
        row.update(mse=float("nan"), mae=float("nan"), n_rounds=0, alarms=0, status=f"error: {exc}", report=None)
    return row


def suite_parallelism(requested: int) -> int:
    cap = os.environ.get("DRIFT_FORGE_THREADS")
    n = max(1, requested)
    if cap:
        n = min(n, max(1, int(cap)))
    return n


def run_suite(configs: list[ExperimentConfig], parallelism: int = 1) -> tuple[list[dict], list[dict]]:
    """Run configs independently; returns (per-config rows, per-group summary)."""
    n = suite_parallelism(parallelism)
    dicts = [c.to_dict() for c in configs]
    if n == 1:
        rows = [_suite_worker(d) for d in dicts]
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            rows = list(pool.map(_suite_worker, dicts))
    rows.sort(key=lambda r: (r["method"], r["protocol"], r["horizon"], r["seed"]))
    return rows, summarize(rows)


def summarize(rows: list[dict]) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        if r["status"] == "ok":
            groups.setdefault((r["method"], r["protocol"], r["horizon"]), []).append(r)
    out = []
    for (method, protocol, horizon), rs in sorted(groups.items()):
        out.append(
            {
                "method": method,
                "protocol": protocol,
                "horizon": horizon,
                "n_seeds": len(rs),
                "mean_mse": float(np.mean([r["mse"] for r in rs])),
                "mean_mae": float(np.mean([r["mae"] for r in rs])),
            }
        )
    return out


def write_table(rows: list[dict], columns: tuple[str, ...], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
