from collections import deque

import numpy as np
import pytest

from drift_forge.adapter import (
    AdaptConfig,
    AdaptMode,
    MemoryBank,
    adapt_full,
    adapt_regressor_only,
    bank_loss,
    feature_variance,
    push,
    select_lambda,
    synthesize_augmented,
)
from drift_forge.forecaster import ForecasterSpec, ModelKind, init_model, train_step
from drift_forge.stream import SyntheticSpec, WindowPair, fit_normalizer, generate_synthetic, iter_windows


def pair(i, m=1, l=2, h=1, value=None):
    v = float(i) if value is None else value
    return WindowPair(np.full((m, l), v), np.full((m, h), v + 0.5), i)


# -- memory banks ------------------------------------------------------------


def test_fifo_eviction():
    bank = MemoryBank(2)
    a, b, c = pair(0), pair(1), pair(2)
    assert bank.push(a) is None and bank.push(b) is None
    assert bank.push(c) is a
    assert [p.step_index for p in bank] == [1, 2]


def test_no_eviction_under_capacity():
    bank = MemoryBank(5)
    for i in range(3):
        push(bank, pair(i))
    assert len(bank) == 3


def test_eviction_order_matches_reference_queue():
    rng = np.random.default_rng(0)
    cap = int(rng.integers(3, 10))
    bank, ref, evicted_bank, evicted_ref = MemoryBank(cap), deque(), [], []
    for i in range(100):
        p = pair(i)
        out = bank.push(p)
        if out is not None:
            evicted_bank.append(out.step_index)
        ref.append(i)
        if len(ref) > cap:
            evicted_ref.append(ref.popleft())
    assert evicted_bank == evicted_ref
    assert [p.step_index for p in bank] == list(ref)


# -- variance / augmentation -------------------------------------------------


def test_variance_constant_inputs():
    bank = MemoryBank(4)
    for i in range(4):
        bank.push(pair(i, value=1.5))
    assert np.all(feature_variance(bank) == 0.0)


def test_variance_two_items_hand_value():
    a, b = MemoryBank(4), MemoryBank(4)
    a.push(pair(0, value=0.0))
    b.push(pair(1, value=2.0))
    np.testing.assert_allclose(feature_variance(a, b), [2.0, 2.0])


def test_variance_permutation_invariant():
    rng = np.random.default_rng(1)
    pairs = [WindowPair(rng.standard_normal((2, 3)), np.zeros((2, 1)), i) for i in range(10)]
    a, b = MemoryBank(10), MemoryBank(10)
    for p in pairs:
        a.push(p)
    for i in rng.permutation(10):
        b.push(pairs[i])
    np.testing.assert_allclose(feature_variance(a), feature_variance(b), rtol=1e-12)


def test_variance_empty_rejected():
    with pytest.raises(ValueError):
        feature_variance(MemoryBank(3))


def _random_bank(n, seed, m=2, l=3, h=2):
    rng = np.random.default_rng(seed)
    bank = MemoryBank(n)
    for i in range(n):
        bank.push(WindowPair(rng.standard_normal((m, l)), rng.standard_normal((m, h)), i))
    return bank


def test_zero_variance_copies_source():
    bank = _random_bank(5, 2)
    aug = synthesize_augmented(bank, np.zeros(6), seed=0)
    np.testing.assert_array_equal(aug.inputs, bank.inputs())
    assert aug.source_ids == list(range(5))


def test_augmented_targets_bit_identical():
    bank = _random_bank(5, 3)
    aug = synthesize_augmented(bank, np.full(6, 4.0), seed=1)
    assert np.array_equal(aug.targets, bank.targets())
    assert len(aug) == len(bank)


def test_augmentation_deterministic():
    bank = _random_bank(5, 4)
    s = np.linspace(0.1, 2.0, 6)
    a = synthesize_augmented(bank, s, seed=9)
    b = synthesize_augmented(bank, s, seed=9)
    assert np.array_equal(a.inputs, b.inputs)


def test_augmentation_noise_moments():
    n = 10_000
    s = np.array([0.25, 1.0, 4.0, 0.5, 2.0, 9.0])
    bank = MemoryBank(n)
    zero = np.zeros((2, 3))
    for i in range(n):
        bank.push(WindowPair(zero, np.zeros((2, 1)), i))
    aug = synthesize_augmented(bank, s, seed=123)
    u = (aug.inputs - bank.inputs()).reshape(n, -1)
    var = u.var(axis=0, ddof=1)
    assert np.all(np.abs(var / s - 1) <= 0.05)
    # unbiasedness: each coordinate mean within 3 Monte Carlo standard errors
    assert np.all(np.abs(u.mean(axis=0)) <= 3 * np.sqrt(s / n))


# -- lambda selection ----------------------------------------------------------


def test_select_lambda():
    assert select_lambda(321) == 2.0
    assert select_lambda(7) == 0.1
    assert select_lambda(7, override=0.5) == 0.5


# -- adaptation ----------------------------------------------------------------

L, H, M = 8, 2, 2


def _regime_spec(seed, level2=3.0):
    return SyntheticSpec.from_dict(
        {
            "channels": M,
            "seed": seed,
            "regimes": [
                {"length": 600, "ar_coefficients": [[0.8], [0.6]], "noise_scale": 0.5},
                {"length": 600, "ar_coefficients": [[-0.5], [0.2]], "noise_scale": 0.5, "level_offset": level2},
            ],
        }
    )


def _setup(seed, kind=ModelKind.LINEAR):
    """Model pretrained on regime 1 plus window lists from both regimes."""
    series = generate_synthetic(_regime_spec(seed))
    norm = fit_normalizer(series.slice_rows(0, 600))
    s = norm.apply(series)
    r1 = list(iter_windows(s.slice_rows(0, 600), L, H))
    r2 = list(iter_windows(s.slice_rows(600, 1200), L, H))
    spec = ForecasterSpec(kind, M, L, H, hidden_width=16, init_seed=seed)
    params, adam = init_model(spec, lr=3e-3)
    for p in r1:
        train_step(params, adam, spec, p.lookback, p.target)
    return spec, params, r1, r2


def _bank(pairs, cap=None):
    bank = MemoryBank(cap or len(pairs))
    for p in pairs:
        bank.push(p)
    return bank


def _eval(params, spec, pairs):
    return bank_loss(params, spec, _bank(pairs))


def test_adapt_zero_epochs_is_identity():
    spec, params, r1, r2 = _setup(0)
    new, _, trace = adapt_full(params, spec, _bank(r2[:16]), None, AdaptConfig(max_epochs=0))
    assert np.array_equal(new, params)
    assert trace.epochs == 0


def test_lambda_zero_matches_memory_only_training():
    spec, params, r1, r2 = _setup(1)
    mem = _bank(r2[:16])
    aug = synthesize_augmented(_bank(r1[-64:]), np.ones(M * L), seed=3)
    cfg = AdaptConfig(lam=0.0, seed=5)
    a, _, _ = adapt_full(params, spec, mem, aug, cfg)
    b, _, _ = adapt_full(params, spec, mem, None, cfg)
    assert np.array_equal(a, b)


def test_adaptation_improves_on_drifted_regime():
    improved = 0
    trials = 100
    for seed in range(trials):
        spec, params, r1, r2 = _setup(seed)
        start = 20 + seed % 40
        mem = _bank(r2[start : start + 16])
        prev = _bank(r1[-128:])
        s = feature_variance(prev, mem)
        aug = synthesize_augmented(prev, s, seed=seed)
        held_out = r2[300:500]
        before = _eval(params, spec, held_out)
        new, _, _ = adapt_full(params, spec, mem, aug, AdaptConfig(lam=0.1, seed=seed))
        improved += _eval(new, spec, held_out) < before
    assert improved >= 95


def test_replay_limits_forgetting():
    diffs = []
    for seed in range(20):
        spec, params, r1, r2 = _setup(100 + seed)
        mem = _bank(r2[40:56])
        prev = _bank(r1[-128:])
        aug = synthesize_augmented(prev, feature_variance(prev, mem), seed=seed)
        held_out_r1 = r1[200:400]
        cfg = dict(seed=seed, max_epochs=40)
        with_replay, _, _ = adapt_full(params, spec, mem, aug, AdaptConfig(lam=2.0, **cfg))
        without, _, _ = adapt_full(params, spec, mem, aug, AdaptConfig(lam=0.0, **cfg))
        diffs.append(_eval(with_replay, spec, held_out_r1) - _eval(without, spec, held_out_r1))
    assert np.median(diffs) <= 0.0


def test_abort_restores_parameters_exactly():
    spec, params, r1, r2 = _setup(2)
    bad = WindowPair(np.full((M, L), 1e300), np.full((M, H), -1e300), 0)
    mem = _bank([bad] * 4)
    snapshot = params.copy()
    with np.errstate(all="ignore"):
        new, _, trace = adapt_full(params, spec, mem, None, AdaptConfig())
    assert trace.aborted
    assert np.array_equal(new, snapshot)
    assert np.array_equal(params, snapshot)


def test_regressor_only_keeps_encoder_and_schedule():
    spec, params, r1, r2 = _setup(3, ModelKind.MLP)
    mem = _bank(r2[:16])
    prev = _bank(r1[-64:])
    aug = synthesize_augmented(prev, feature_variance(prev, mem), seed=0)
    cfg = AdaptConfig(lam=0.1, max_epochs=60, seed=1)
    new, _, trace = adapt_regressor_only(params, spec, mem, aug, cfg)
    enc = slice(0, spec.encoder_size)
    assert np.array_equal(new[enc], params[enc])
    assert not np.array_equal(new[spec.encoder_size :], params[spec.encoder_size :])
    lrs = trace.lr_path
    assert lrs[0] == 1e-3
    for a, b in zip(lrs, lrs[1:]):
        assert b == a or b == pytest.approx(a / 3, rel=1e-15)
    # lr for epoch i is cut exactly when epoch i-1 failed to improve on epoch i-2
    losses = [np.inf, *trace.epoch_losses]
    for i in range(1, len(lrs)):
        assert (lrs[i] < lrs[i - 1]) == (losses[i] >= losses[i - 1])
    assert any(b < a for a, b in zip(lrs, lrs[1:]))
    if trace.epochs < cfg.max_epochs:
        assert lrs[-1] / 3 < cfg.lr_min


def test_regressor_only_on_linear_equals_scheduled_full():
    spec, params, r1, r2 = _setup(4)
    mem = _bank(r2[:16])
    cfg = AdaptConfig(lam=0.0, max_epochs=10, seed=2)
    a, _, ta = adapt_regressor_only(params, spec, mem, None, cfg)
    # linear model: the frozen block is empty, so all parameters move
    assert spec.encoder_size == 0
    assert ta.grad_entries == ta.steps * spec.n_params
    b, _, tb = adapt_full(params, spec, mem, None, AdaptConfig(lam=0.0, max_epochs=ta.epochs, seed=2))
    if all(x == ta.lr_path[0] for x in ta.lr_path):
        assert np.array_equal(a, b)


def test_regressor_only_cheaper_than_full():
    spec = ForecasterSpec(ModelKind.MLP, 4, 60, 24, hidden_width=64, init_seed=0)
    params, _ = init_model(spec)
    rng = np.random.default_rng(0)
    mem, prev = MemoryBank(16), MemoryBank(512)
    for i in range(16):
        mem.push(WindowPair(rng.standard_normal((4, 60)), rng.standard_normal((4, 24)), i))
    for i in range(512):
        prev.push(WindowPair(rng.standard_normal((4, 60)), rng.standard_normal((4, 24)), i))
    aug = synthesize_augmented(prev, feature_variance(prev, mem), seed=1)
    # lr_min tiny so both run the same number of epochs
    cfg = AdaptConfig(lam=0.1, max_epochs=20, lr_min=1e-300, seed=3)
    _, _, full = adapt_full(params, spec, mem, aug, cfg)
    _, _, reg = adapt_regressor_only(params, spec, mem, aug, cfg)
    assert full.epochs == reg.epochs == 20
    assert reg.grad_entries < full.grad_entries
    assert reg.wall_time < full.wall_time


def test_adapt_config_validation():
    with pytest.raises(ValueError):
        AdaptConfig(lam=-1)
    with pytest.raises(ValueError):
        AdaptConfig(plateau_decay_factor=1.0)
    with pytest.raises(ValueError):
        AdaptConfig(lr_min=1e-2, lr_init=1e-3)
    assert AdaptConfig(mode="regressor_only").mode is AdaptMode.REGRESSOR_ONLY


def test_empty_memory_rejected():
    spec, params, _, _ = _setup(5)
    with pytest.raises(ValueError):
        adapt_full(params, spec, MemoryBank(4), None, AdaptConfig())
