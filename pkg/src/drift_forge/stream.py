"""Raw series handling: ingestion, synthetic drift streams, normalization,
windowing and the two online evaluation protocols."""

from __future__ import annotations

import csv
import json
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

EPS_STD = 1e-8
DATE_COLUMNS = ("date", "timestamp")


class StreamError(ValueError):
    pass


@dataclass(frozen=True)
class MultivariateSeries:
    values: np.ndarray  # (T, M)
    channel_names: tuple[str, ...]
    origin: str = "synthetic"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[1] < 1:
            raise StreamError(f"series must be a T x M matrix with M >= 1, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise StreamError("series contains non-finite values")
        if len(self.channel_names) != values.shape[1]:
            raise StreamError("channel_names length does not match channel count")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "channel_names", tuple(self.channel_names))

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def slice_rows(self, start: int, stop: int) -> "MultivariateSeries":
        return MultivariateSeries(self.values[start:stop].copy(), self.channel_names, self.origin)


@dataclass(frozen=True)
class WindowPair:
    lookback: np.ndarray  # (M, L)
    target: np.ndarray  # (M, H)
    step_index: int


# ---------------------------------------------------------------------------
# CSV ingestion


def load_csv(path: str | Path, has_header: bool = True) -> MultivariateSeries:
    """Parse a comma-separated numeric file.

    A leading column named ``date`` or ``timestamp`` (case-insensitive) is
    dropped. Without a header, channels are named ``c0, c1, ...`` and every
    column must be numeric.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    # blank trailing lines are tolerated
    numbered = [(i + 1, r) for i, r in enumerate(rows) if any(cell.strip() for cell in r)]
    if not numbered:
        raise StreamError(f"{path}: empty file (line 1)")

    skip_first_col = False
    if has_header:
        header_line, header = numbered[0]
        numbered = numbered[1:]
        names = [h.strip() for h in header]
        if names and names[0].lower() in DATE_COLUMNS:
            skip_first_col = True
            names = names[1:]
        if not numbered:
            raise StreamError(f"{path}: no data rows after header (line {header_line})")
    else:
        names = None

    arity = None
    data = []
    for lineno, row in numbered:
        if arity is None:
            arity = len(row)
        elif len(row) != arity:
            raise StreamError(f"{path}: line {lineno}: expected {arity} fields, got {len(row)}")
        cells = row[1:] if skip_first_col else row
        parsed = []
        for cell in cells:
            try:
                v = float(cell)
            except ValueError:
                raise StreamError(f"{path}: line {lineno}: non-numeric cell {cell!r}") from None
            if not math.isfinite(v):
                raise StreamError(f"{path}: line {lineno}: non-finite cell {cell!r}")
            parsed.append(v)
        data.append(parsed)

    n_cols = len(data[0])
    if names is None:
        names = [f"c{j}" for j in range(n_cols)]
    elif len(names) != n_cols:
        raise StreamError(f"{path}: line {numbered[0][0]}: header has {len(names)} channels, rows have {n_cols}")
    if n_cols == 0:
        raise StreamError(f"{path}: line {numbered[0][0]}: no numeric channels")
    return MultivariateSeries(np.array(data, dtype=float), tuple(names), origin="csv-file")


def save_csv(series: MultivariateSeries, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(series.channel_names)
        for row in series.values:
            writer.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# Synthetic piecewise-stationary AR streams


@dataclass(frozen=True)
class Regime:
    length: int
    ar_coefficients: tuple[tuple[float, ...], ...]  # one AR vector per channel
    noise_scale: float = 1.0
    level_offset: float = 0.0


@dataclass(frozen=True)
class SyntheticSpec:
    regimes: tuple[Regime, ...]
    channels: int
    seed: int = 0

    @property
    def boundaries(self) -> list[int]:
        """Start index of every regime after the first."""
        out, acc = [], 0
        for r in self.regimes[:-1]:
            acc += r.length
            out.append(acc)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        channels = int(d["channels"])
        regimes = []
        for r in d["regimes"]:
            coeffs = r.get("ar_coefficients", [0.0])
            # a flat list is shared by every channel
            if not coeffs or not isinstance(coeffs[0], (list, tuple)):
                coeffs = [list(coeffs)] * channels
            regimes.append(
                Regime(
                    length=int(r["length"]),
                    ar_coefficients=tuple(tuple(float(c) for c in ch) for ch in coeffs),
                    noise_scale=float(r.get("noise_scale", 1.0)),
                    level_offset=float(r.get("level_offset", 0.0)),
                )
            )
        return cls(regimes=tuple(regimes), channels=channels, seed=int(d.get("seed", 0)))

    def to_dict(self) -> dict:
        return {
            "channels": self.channels,
            "seed": self.seed,
            "regimes": [
                {
                    "length": r.length,
                    "ar_coefficients": [list(c) for c in r.ar_coefficients],
                    "noise_scale": r.noise_scale,
                    "level_offset": r.level_offset,
                }
                for r in self.regimes
            ],
        }


def load_synthetic_spec(path: str | Path) -> SyntheticSpec:
    """Read a synthetic spec from JSON or YAML (chosen by file suffix)."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() in (".yaml", ".yml"):
        import yaml

        d = yaml.safe_load(text)
    else:
        d = json.loads(text)
    return SyntheticSpec.from_dict(d)


def ar_spectral_radius(coeffs: Sequence[float]) -> float:
    """Spectral radius of the AR(p) companion matrix."""
    p = len(coeffs)
    if p == 0:
        return 0.0
    comp = np.zeros((p, p))
    comp[0, :] = coeffs
    if p > 1:
        comp[1:, :-1] = np.eye(p - 1)
    return float(np.max(np.abs(np.linalg.eigvals(comp))))


def validate_synthetic(spec: SyntheticSpec, min_length: int = 1) -> None:
    if spec.channels < 1:
        raise StreamError("synthetic spec needs at least one channel")
    if not spec.regimes:
        raise StreamError("synthetic spec needs at least one regime")
    for i, r in enumerate(spec.regimes):
        if r.length < min_length:
            raise StreamError(f"regime {i}: length {r.length} < {min_length}")
        if len(r.ar_coefficients) != spec.channels:
            raise StreamError(f"regime {i}: expected {spec.channels} coefficient vectors, got {len(r.ar_coefficients)}")
        if r.noise_scale < 0:
            raise StreamError(f"regime {i}: negative noise_scale")
        for j, c in enumerate(r.ar_coefficients):
            rho = ar_spectral_radius(c)
            if not rho < 1.0:
                raise StreamError(f"regime {i}, channel {j}: unstable AR coefficients (spectral radius {rho:.4f})")


def generate_synthetic(spec: SyntheticSpec, min_regime_length: int = 1) -> MultivariateSeries:
    """Simulate a piecewise-stationary AR stream.

    Within a regime each channel follows
    ``x_t - c = sum_i phi_i (x_{t-i} - c) + noise_scale * eps_t`` with ``c``
    the regime's level offset, so lags carried across a boundary relax
    towards the new level under the new dynamics.
    """
    validate_synthetic(spec, min_regime_length)
    rng = np.random.default_rng(spec.seed)
    total = sum(r.length for r in spec.regimes)
    m = spec.channels
    out = np.empty((total, m))
    max_p = max(len(c) for r in spec.regimes for c in r.ar_coefficients)
    # history starts at the first regime's level
    history = np.full((max(max_p, 1), m), spec.regimes[0].level_offset)  # row 0 = most recent
    t = 0
    for r in spec.regimes:
        eps = rng.standard_normal((r.length, m))
        for s in range(r.length):
            x = np.full(m, r.level_offset)
            for j, coeffs in enumerate(r.ar_coefficients):
                for i, phi in enumerate(coeffs):
                    x[j] += phi * (history[i, j] - r.level_offset)
            x += r.noise_scale * eps[s]
            out[t] = x
            history = np.roll(history, 1, axis=0)
            history[0] = x
            t += 1
    return MultivariateSeries(out, tuple(f"ch{j}" for j in range(m)), origin="synthetic")


# ---------------------------------------------------------------------------
# Warm-up split and normalization


def split_warmup(
    series: MultivariateSeries, warm_fraction: float = 0.25, lookback: int = 1, horizon: int = 1
) -> tuple[MultivariateSeries, MultivariateSeries]:
    if not 0.0 < warm_fraction < 1.0:
        raise StreamError(f"warm_fraction must lie in (0, 1), got {warm_fraction}")
    cut = int(math.floor(warm_fraction * series.length))
    need = lookback + horizon
    if cut < need:
        raise StreamError(f"warm split has {cut} rows, needs at least {need}")
    if series.length - cut < need:
        raise StreamError(f"online split has {series.length - cut} rows, needs at least {need}")
    return series.slice_rows(0, cut), series.slice_rows(cut, series.length)


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, series: MultivariateSeries) -> MultivariateSeries:
        return MultivariateSeries((series.values - self.mean) / self.std, series.channel_names, series.origin)

    def invert(self, series: MultivariateSeries) -> MultivariateSeries:
        return MultivariateSeries(series.values * self.std + self.mean, series.channel_names, series.origin)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def fit_normalizer(warm: MultivariateSeries) -> Normalizer:
    if warm.length == 0:
        raise StreamError("cannot fit a normalizer on an empty series")
    mean = warm.values.mean(axis=0)
    if warm.length > 1:
        std = warm.values.std(axis=0, ddof=1)
    else:
        std = np.zeros(warm.channels)
    return Normalizer(mean=mean, std=np.maximum(std, EPS_STD))


# ---------------------------------------------------------------------------
# Windowing


def window_at(series: MultivariateSeries, t: int, lookback: int, horizon: int) -> WindowPair:
    if t < 0 or t + lookback + horizon > series.length:
        raise StreamError(f"window at t={t} (L={lookback}, H={horizon}) exceeds series length {series.length}")
    v = series.values
    return WindowPair(
        lookback=v[t : t + lookback].T.copy(),
        target=v[t + lookback : t + lookback + horizon].T.copy(),
        step_index=t,
    )


def n_windows(series: MultivariateSeries, lookback: int, horizon: int) -> int:
    return max(0, series.length - lookback - horizon + 1)


def iter_windows(series: MultivariateSeries, lookback: int, horizon: int):
    for t in range(n_windows(series, lookback, horizon)):
        yield window_at(series, t, lookback, horizon)


# ---------------------------------------------------------------------------
# Evaluation protocols


class Protocol(str, Enum):
    STANDARD = "standard"
    DELAYED = "delayed"


@dataclass
class ProtocolState:
    """Decides when an issued window's target may be trained on.

    Standard mode releases every pair in the round it is issued. Delayed
    mode only trains once per ``horizon`` rounds: the pair issued at a
    round divisible by ``horizon`` is released at the end of round
    ``issue + horizon - 1``, when the last of its target observations has
    arrived.
    """

    mode: Protocol
    horizon: int
    pending: deque = field(default_factory=deque)
    last_round: int | None = None

    def __post_init__(self):
        self.mode = Protocol(self.mode)
        if self.horizon < 1:
            raise StreamError("horizon must be >= 1")

    def maturity_round(self, issued_round: int) -> int:
        """Round at whose end the truth of ``issued_round`` is fully known."""
        if self.mode is Protocol.STANDARD:
            return issued_round
        return issued_round + self.horizon - 1

    def advance(self, round_: int, issued: WindowPair) -> list[WindowPair]:
        if self.last_round is not None and round_ != self.last_round + 1:
            raise StreamError(f"rounds must advance by one ({self.last_round} -> {round_})")
        self.last_round = round_
        if self.mode is Protocol.STANDARD:
            return [issued]
        if round_ % self.horizon == 0:
            self.pending.append((round_, issued))
        revealed = []
        while self.pending and self.maturity_round(self.pending[0][0]) <= round_:
            revealed.append(self.pending.popleft()[1])
        return revealed


def protocol_advance(state: ProtocolState, round_: int, issued: WindowPair) -> list[WindowPair]:
    return state.advance(round_, issued)
