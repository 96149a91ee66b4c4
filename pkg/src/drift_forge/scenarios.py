"""Reference synthetic streams used by the test-suite and the ``synth`` command."""

from __future__ import annotations

from .stream import SyntheticSpec


def three_regime(seed: int = 0, regime_length: int = 2000, noise_scale: float = 1.0) -> SyntheticSpec:
    """Four channels, three regimes with joint level and AR-coefficient shifts."""
    return SyntheticSpec.from_dict(
        {
            "channels": 4,
            "seed": seed,
            "regimes": [
                {
                    "length": regime_length,
                    "ar_coefficients": [[0.9], [0.8], [0.85], [0.7]],
                    "noise_scale": noise_scale,
                    "level_offset": 0.0,
                },
                {
                    "length": regime_length,
                    "ar_coefficients": [[0.3, 0.4], [-0.5], [0.2], [0.5, -0.3]],
                    "noise_scale": noise_scale,
                    "level_offset": 4.0,
                },
                {
                    "length": regime_length,
                    "ar_coefficients": [[-0.6], [0.6], [0.4, 0.4], [-0.3]],
                    "noise_scale": noise_scale,
                    "level_offset": -3.0,
                },
            ],
        }
    )


def level_shift(
    seed: int = 0, length: int = 1200, channels: int = 2, shift: float = 5.0, ar: float = 0.5
) -> SyntheticSpec:
    """Two equal-length AR(1) regimes differing only in level (``ar=0``: white noise)."""
    regime = {"length": length // 2, "ar_coefficients": [[ar]] * channels, "noise_scale": 1.0}
    return SyntheticSpec.from_dict(
        {
            "channels": channels,
            "seed": seed,
            "regimes": [{**regime, "level_offset": 0.0}, {**regime, "level_offset": shift}],
        }
    )


SCENARIOS = {"three-regime": three_regime, "level-shift": level_shift}
