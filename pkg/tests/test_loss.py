import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calign import autodiff as ad
from calign.autodiff import Tape, Tensor, backward
from calign.data import generate_caption, generate_scene, prepare_item, render_features, Sample
from calign.errors import ConfigError, DegenerateSampleError, ShapeError
from calign.loss import (
    CalConfig, TokenWeights, build_weight_report, cal_loss, clamp_weights,
    compute_token_weights, delta_logits, mle_loss, pool_weights,
    write_weight_report,
)
from calign.model import forward, init_params

from conftest import tiny_model_config


# ---------------------------------------------------------------------------
# delta_logits
# ---------------------------------------------------------------------------

def test_delta_zero_for_identical_inputs():
    logits = np.random.default_rng(0).normal(size=(5, 9))
    out = delta_logits(logits, logits.copy(), np.arange(5))
    assert np.array_equal(out, np.zeros(5))


def test_delta_definition():
    o_with = np.zeros((1, 4))
    o_without = np.zeros((1, 4))
    o_with[0, 2] = 3.0
    o_without[0, 2] = 1.5
    assert delta_logits(o_with, o_without, [2])[0] == 1.5


def test_delta_shape_mismatch():
    with pytest.raises(ShapeError):
        delta_logits(np.zeros((3, 4)), np.zeros((2, 4)), [0, 0, 0])


def test_delta_matches_independent_double_forward():
    # run the two passes twice, independently, and index by hand
    cfg = tiny_model_config()
    params = init_params(cfg, 7)
    rng = np.random.default_rng(1)
    scene = generate_scene(rng)
    caption = generate_caption(scene, 0.0, rng)
    prefix = render_features(scene, cfg, rng)
    n = caption.tokens.size - 1
    labels = caption.tokens[1:]

    o_with = forward(params, caption.tokens, prefix).data[:n]
    o_without = forward(params, caption.tokens, None).data[:n]
    via_op = delta_logits(o_with, o_without, labels)

    again_with = forward(params, caption.tokens, prefix).data
    again_without = forward(params, caption.tokens, None).data
    by_hand = np.array([
        again_with[j, labels[j]] - again_without[j, labels[j]] for j in range(n)
    ])
    assert np.max(np.abs(via_op - by_hand)) <= 1e-12


# ---------------------------------------------------------------------------
# clamp
# ---------------------------------------------------------------------------

def test_clamp_examples():
    out = clamp_weights([-2.0, 0.3, 2.4, 7.2], 1.0, 5.0)
    assert np.array_equal(out, [1.0, 1.0, 2.4, 5.0])


def test_clamp_identity_region_with_infinite_upper():
    x = np.array([0.0, 0.5, 100.0])
    assert np.array_equal(clamp_weights(x, 0.0, math.inf), x)


def test_clamp_narrow_band():
    eps = 1e-9
    out = clamp_weights(np.linspace(-10, 10, 21), 2.0, 2.0 + eps)
    assert np.all(out >= 2.0) and np.all(out <= 2.0 + eps)


def test_clamp_rejects_inverted_bounds():
    with pytest.raises(ConfigError):
        clamp_weights([1.0], 2.0, 1.0)


@settings(derandomize=True, max_examples=60)
@given(st.lists(st.floats(min_value=-100, max_value=100), min_size=1, max_size=20),
       st.floats(min_value=0, max_value=5), st.floats(min_value=0, max_value=10))
def test_clamp_bound_containment(values, alpha, width):
    beta = alpha + width
    out = clamp_weights(values, alpha, beta)
    assert np.all(out >= alpha) and np.all(out <= beta)


# ---------------------------------------------------------------------------
# pool
# ---------------------------------------------------------------------------

def test_pool_shrinking_window_example():
    out = pool_weights([1.0, 5.0, 1.0], 3)
    assert np.allclose(out, [3.0, 7.0 / 3.0, 3.0], atol=0)
    assert out[0] == (1.0 + 5.0) / 2.0  # hand-computed boundary mean


def test_pool_window_one_is_identity():
    x = np.array([4.0, -1.0, 2.5])
    assert np.array_equal(pool_weights(x, 1), x)


def test_pool_constant_stays_constant():
    assert np.array_equal(pool_weights(np.full(7, 3.25), 3), np.full(7, 3.25))


def test_pool_rejects_even_window():
    with pytest.raises(ConfigError):
        pool_weights([1.0, 2.0], 2)


def test_pool_window_longer_than_sequence_is_full_mean():
    out = pool_weights([1.0, 2.0, 6.0], 5)
    assert np.allclose(out, 3.0)


@settings(derandomize=True, max_examples=60)
@given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=15),
       st.sampled_from([1, 3, 5, 7]))
def test_pool_stays_within_input_range(values, window):
    out = pool_weights(values, window)
    assert np.all(out >= min(values) - 1e-12)
    assert np.all(out <= max(values) + 1e-12)


def test_clamp_then_pool_order():
    # clamp first: [10, -10] -> [5, 1] -> pooled [3, 3]
    # pooling first would average to 0 and clamp to [1, 1]
    delta = np.array([10.0, -10.0])
    mask = np.array([True, True])
    o_with = np.zeros((2, 3))
    o_with[0, 1] = 10.0
    o_with[1, 2] = -10.0
    weights = compute_token_weights(o_with, np.zeros((2, 3)), [1, 2], mask,
                                    CalConfig(alpha=1.0, beta=5.0, window=3))
    assert np.array_equal(weights.clamped, [5.0, 1.0])
    assert np.array_equal(weights.pooled, [3.0, 3.0])


def test_pooling_skips_prompt_rows():
    # prompt rows must not leak into the response pooling window
    o_with = np.zeros((4, 2))
    o_with[:, 1] = [100.0, 1.0, 5.0, 1.0]
    o_without = np.zeros((4, 2))
    mask = np.array([False, True, True, True])
    weights = compute_token_weights(o_with, o_without, [1, 1, 1, 1], mask,
                                    CalConfig(alpha=0.0, beta=math.inf, window=3))
    assert weights.pooled[0] == 0.0
    assert np.allclose(weights.pooled[1:], [3.0, 7.0 / 3.0, 3.0])


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _random_case(seed, rows=6, vocab=11, prompt=2):
    rng = np.random.default_rng(seed)
    o = Tensor(rng.normal(scale=2.0, size=(rows, vocab)), requires_grad=True)
    labels = rng.integers(0, vocab, size=rows)
    mask = np.arange(rows) >= prompt
    return o, labels, mask


def test_constant_weights_reduce_to_mle():
    for c in (1.0, 2.5, 0.125):
        o, labels, mask = _random_case(3)
        weights = TokenWeights(
            delta=np.zeros(6), clamped=np.full(6, c) * mask,
            pooled=np.full(6, c) * mask, trainable_mask=mask)
        a = cal_loss(o, labels, weights).item()
        b = mle_loss(o, labels, mask).item()
        assert abs(a - b) < 1e-12


def test_alpha_equals_beta_reduces_to_mle():
    o, labels, mask = _random_case(4)
    weights = compute_token_weights(
        o.data, np.zeros_like(o.data), labels, mask,
        CalConfig(alpha=2.0, beta=2.0))
    assert abs(cal_loss(o, labels, weights).item()
               - mle_loss(o, labels, mask).item()) < 1e-12


def test_single_trainable_token_ignores_weight_value():
    o, labels, _ = _random_case(5)
    mask = np.zeros(6, dtype=bool)
    mask[4] = True
    lsm = ad.log_softmax(o).data
    expected = -lsm[4, labels[4]]
    for w in (0.5, 1.0, 7.0):
        weights = TokenWeights(np.zeros(6), np.zeros(6),
                               np.where(mask, w, 0.0), mask)
        value = cal_loss(o, labels, weights).item()
        assert abs(value - expected) < 1e-12


def test_mle_uniform_logits():
    o = Tensor(np.zeros((3, 4)), requires_grad=True)
    value = mle_loss(o, [0, 1, 2], np.array([True, True, True])).item()
    assert abs(value - math.log(4.0)) < 1e-12


def test_mle_perfect_logits_approach_zero():
    o = np.full((2, 5), -100.0)
    o[0, 3] = 100.0
    o[1, 1] = 100.0
    value = mle_loss(Tensor(o), [3, 1], np.array([True, True])).item()
    assert value < 1e-12


def test_mle_empty_mask_raises():
    o, labels, _ = _random_case(6)
    with pytest.raises(DegenerateSampleError):
        mle_loss(o, labels, np.zeros(6, dtype=bool))


def test_zero_weight_mass_raises():
    o, labels, mask = _random_case(7)
    # alpha = 0 and every difference non-positive -> mass 0
    weights = compute_token_weights(
        np.zeros((6, 11)), np.ones((6, 11)), labels, mask,
        CalConfig(alpha=0.0, beta=5.0))
    assert weights.mass() == 0.0
    with pytest.raises(DegenerateSampleError):
        cal_loss(o, labels, weights)


def test_normalization_invariance():
    o, labels, mask = _random_case(8)
    base_w = np.where(mask, np.abs(np.random.default_rng(8).normal(size=6)) + 0.5, 0.0)

    def loss_for(scaled):
        weights = TokenWeights(np.zeros(6), scaled.copy(), scaled.copy(), mask)
        return cal_loss(o, labels, weights).item()

    reference = loss_for(base_w)
    # powers of two rescale exactly
    for s in (0.25, 2.0, 1024.0):
        assert loss_for(base_w * s) == reference
    for s in (3.7, 0.001, 123.456):
        assert abs(loss_for(base_w * s) - reference) < 1e-12


@settings(derandomize=True, max_examples=40)
@given(st.integers(min_value=0, max_value=2 ** 31 - 1),
       st.floats(min_value=0.01, max_value=100.0))
def test_normalization_invariance_property(seed, factor):
    o, labels, mask = _random_case(seed)
    w = np.where(mask, np.abs(np.random.default_rng(seed).normal(size=6)) + 0.1, 0.0)
    a = cal_loss(o, labels, TokenWeights(np.zeros(6), w, w, mask)).item()
    b = cal_loss(o, labels, TokenWeights(np.zeros(6), w * factor, w * factor, mask)).item()
    assert abs(a - b) <= 1e-12 * max(1.0, abs(a))


def test_window_one_no_saturation_weight_depends_only_on_own_delta():
    rng = np.random.default_rng(9)
    o_without = np.zeros((5, 4))
    labels = np.array([1, 2, 3, 0, 1])
    mask = np.ones(5, dtype=bool)
    cfg = CalConfig(alpha=0.0, beta=math.inf, window=1)
    o_a = np.zeros((5, 4))
    o_a[np.arange(5), labels] = [1.0, 2.0, 3.0, 4.0, 5.0]
    w_a = compute_token_weights(o_a, o_without, labels, mask, cfg)
    o_b = o_a.copy()
    o_b[np.arange(5), labels] = [1.0, 9.0, 3.0, 9.0, 5.0]  # perturb rows 1, 3
    w_b = compute_token_weights(o_b, o_without, labels, mask, cfg)
    unchanged = [0, 2, 4]
    assert np.array_equal(w_a.pooled[unchanged], w_b.pooled[unchanged])
    assert w_a.pooled[1] != w_b.pooled[1]


# ---------------------------------------------------------------------------
# gradient-path isolation
# ---------------------------------------------------------------------------

def test_weights_enter_as_constants():
    # gradients with weights computed live equal gradients with the same
    # weights frozen as plain numbers
    cfg = tiny_model_config()
    params = init_params(cfg, 11)
    rng = np.random.default_rng(12)
    scene = generate_scene(rng)
    caption = generate_caption(scene, 0.5, rng)
    prefix = render_features(scene, cfg, rng)
    n = caption.tokens.size - 1
    labels = caption.tokens[1:]
    mask = np.arange(1, caption.tokens.size) >= caption.prompt_len

    def grads_with(weights):
        tape = Tape()
        o = forward(params, caption.tokens, prefix, tape=tape)
        rows = ad.slice_rows(o, 0, n, tape)
        loss = cal_loss(rows, labels, weights, tape)
        backward(loss, tape)
        out = {name: params[name].grad.copy() for name in params.names()
               if params[name].grad is not None}
        for t in params.tensors():
            t.grad = None
        return out

    o_with = forward(params, caption.tokens, prefix)
    o_without = forward(params, caption.tokens, None)
    live = compute_token_weights(o_with.data[:n], o_without.data[:n], labels,
                                 mask, CalConfig())
    frozen = TokenWeights(
        delta=live.delta.copy(), clamped=live.clamped.copy(),
        pooled=live.pooled.copy(), trainable_mask=live.trainable_mask.copy())

    g_live = grads_with(live)
    g_frozen = grads_with(frozen)
    assert g_live.keys() == g_frozen.keys()
    for name in g_live:
        assert np.max(np.abs(g_live[name] - g_frozen[name])) <= 1e-12


def test_log_prob_variant_differs_from_raw():
    o_with = np.array([[2.0, 1.0], [0.0, 3.0]])
    o_without = np.array([[1.0, 0.0], [1.0, 1.0]])
    labels = [0, 1]
    mask = np.array([True, True])
    raw = compute_token_weights(o_with, o_without, labels, mask,
                                CalConfig(alpha=0.0, beta=math.inf))
    lp = compute_token_weights(o_with, o_without, labels, mask,
                               CalConfig(alpha=0.0, beta=math.inf,
                                         use_log_probs=True))
    assert not np.allclose(raw.delta, lp.delta)


# ---------------------------------------------------------------------------
# weight report
# ---------------------------------------------------------------------------

def test_weight_report_matches_loss_values(tmp_path):
    cfg = tiny_model_config()
    params = init_params(cfg, 13)
    rng = np.random.default_rng(14)
    scene = generate_scene(rng)
    caption = generate_caption(scene, 1.0, rng)
    sample = Sample(scene, caption, feature_seed=55)
    item = prepare_item(sample, cfg, 0)
    n = item.labels.size
    o_with = forward(params, item.tokens, item.prefix).data[:n]
    o_without = forward(params, item.tokens, None).data[:n]
    weights = compute_token_weights(o_with, o_without, item.labels,
                                    item.trainable_mask, CalConfig())

    from calign.data import get_tokenizer
    words = get_tokenizer().decode(item.tokens)
    report = build_weight_report(words, caption.kinds, weights)
    assert len(report.entries) == caption.tokens.size
    assert report.entries[0].delta is None
    for entry in report.entries[1:]:
        row = entry.position - 1
        assert entry.delta == float(weights.delta[row])
        if item.trainable_mask[row]:
            assert abs(entry.pooled - weights.pooled[row]) == 0.0
        else:
            assert entry.pooled is None
    kinds = [e.kind for e in report.entries]
    assert "contradictory" in kinds

    json_path = tmp_path / "report.json"
    csv_path = tmp_path / "report.csv"
    write_weight_report(report, json_path, csv_path)
    import json as json_mod
    payload = json_mod.loads(json_path.read_text())
    assert payload["version"] == 1
    assert len(payload["tokens"]) == caption.tokens.size
    lines = csv_path.read_text().strip().splitlines()
    assert len(lines) == caption.tokens.size + 1  # header + tokens
