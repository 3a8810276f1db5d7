import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from unient import adapt, bench, nn
from unient import autodiff as ad
from unient.adapt import AdaptConfig
from unient.filter import FilterOutput, SourceFilter


def probs_tensor(p):
    return ad.Tensor(np.asarray(p, dtype=np.float64))


def mean_entropy_oracle(p):
    p = np.asarray(p, dtype=np.float64)
    return float(-(p * np.log(np.maximum(p, 1e-12))).sum(axis=1).mean())


def split_output(n, csid, csood):
    pi = np.zeros(n)
    pi[csid] = 1.0
    return FilterOutput(np.zeros(n), pi, None, np.asarray(csid, int), np.asarray(csood, int))


def short_cfg(**kw):
    return bench.BenchmarkConfig(seed=42, batches_per_domain=kw.pop("bpd", 4), **kw)


# ---------------------------------------------------------------- losses


def test_uniform_rows_give_log_c():
    p = probs_tensor(np.full((6, 8), 1 / 8))
    loss = adapt.unient_loss(p, np.arange(6), np.array([], int), 0.2, 0.0)
    assert abs(loss.values - math.log(8)) < 1e-12


def test_one_hot_csid_uniform_csood():
    p = np.vstack([np.eye(4)[[0, 2]], np.full((3, 4), 0.25)])
    loss = adapt.unient_loss(probs_tensor(p), np.array([0, 1]), np.array([2, 3, 4]), 1.0, 0.0)
    assert abs(loss.values + math.log(4)) < 1e-12


def test_unient_without_weights_is_tent_mean_entropy(rng):
    p = ad.softmax_rows(rng.normal(size=(20, 6))).values
    loss = adapt.unient_loss(probs_tensor(p), np.arange(20), np.array([], int), 0.0, 0.0)
    assert abs(loss.values - mean_entropy_oracle(p)) < 1e-12
    assert abs(adapt.tent_loss(probs_tensor(p)).values - mean_entropy_oracle(p)) < 1e-12


def test_marginal_term_oracle(rng):
    p = ad.softmax_rows(rng.normal(size=(10, 5))).values
    fbar = p.mean(axis=0)
    expected = mean_entropy_oracle(p) + 0.3 * float((fbar * np.log(fbar)).sum())
    assert abs(adapt.tent_loss(probs_tensor(p), 0.3).values - expected) < 1e-12


def test_unient_plus_limits(rng):
    p = ad.softmax_rows(rng.normal(size=(12, 5))).values
    all_id = adapt.unient_plus_loss(probs_tensor(p), np.ones(12), 0.4, 0.3).values
    ref = adapt.unient_loss(probs_tensor(p), np.arange(12), np.array([], int), 0.4, 0.3).values
    assert abs(all_id - ref) < 1e-12
    all_ood = adapt.unient_plus_loss(probs_tensor(p), np.zeros(12), 1.0, 0.0).values
    assert abs(all_ood + mean_entropy_oracle(p)) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_unient_plus_binary_pi_scaled_identity(seed):
    rng = np.random.default_rng(seed)
    n, lam1, lam2 = 15, rng.uniform(0, 1), rng.uniform(0, 1)
    p = probs_tensor(ad.softmax_rows(rng.normal(size=(n, 5))).values)
    pi = (rng.random(n) < 0.6).astype(float)
    pi[:2] = [0.0, 1.0]
    S, O = np.flatnonzero(pi == 1), np.flatnonzero(pi == 0)
    empty = np.array([], int)
    mean_s = adapt.unient_loss(p, S, empty, 0, 0).values
    mean_o = -adapt.unient_loss(p, empty, O, 1, 0).values
    h_bar = -adapt.unient_loss(p, empty, empty, 0, 1).values
    plus = adapt.unient_plus_loss(p, pi, lam1, lam2).values
    full = adapt.unient_loss(p, S, O, lam1, lam2).values
    expected = len(S) / n * mean_s - lam1 * len(O) / n * mean_o - lam2 * h_bar
    assert abs(plus - expected) < 1e-12
    assert abs(plus - full) > 1e-6


prob_rows = arrays(np.float64, st.tuples(st.integers(2, 10), st.integers(2, 6)), elements=st.floats(0.01, 1))


@given(prob_rows, st.floats(0, 2), st.floats(0, 2), st.data())
@settings(max_examples=80, deadline=None)
def test_loss_nonincreasing_in_lambda1(raw, lo, hi, data):
    p = raw / raw.sum(axis=1, keepdims=True)
    n = len(p)
    k = data.draw(st.integers(0, n))
    csid, csood = np.arange(k), np.arange(k, n)
    lo, hi = min(lo, hi), max(lo, hi)
    a = adapt.unient_loss(probs_tensor(p), csid, csood, lo, 0.2).values
    b = adapt.unient_loss(probs_tensor(p), csid, csood, hi, 0.2).values
    assert b <= a + 1e-12


def test_config_validation():
    with pytest.raises(ValueError, match="source, bn_adapt, tent, unient, unient_plus"):
        AdaptConfig(method="eata").validate()
    with pytest.raises(ValueError, match="non-negative"):
        AdaptConfig(lambda1=-1).validate()
    with pytest.raises(ValueError, match="lr"):
        AdaptConfig(lr=0).validate()


# ---------------------------------------------------------------- stepping


@pytest.fixture(scope="module")
def shifted_batch(default_cfg):
    return next(bench.stream(default_cfg))


def test_source_leaves_params_bit_identical(source_model_42):
    m = source_model_42.copy()
    before = {k: v.copy() for k, v in m.params().items()}
    for b in bench.stream(short_cfg(bpd=2)):
        adapt.adapt_step(m, b.x, AdaptConfig(method="source"))
    for k, v in m.params().items():
        assert v.tobytes() == before[k].tobytes()


def test_bn_adapt_params_equal_logits_differ(source_model_42, shifted_batch):
    m = source_model_42.copy()
    src, _ = adapt.adapt_step(m, shifted_batch.x, AdaptConfig(method="source"))
    bn, _ = adapt.adapt_step(m, shifted_batch.x, AdaptConfig(method="bn_adapt"))
    for k, v in m.params().items():
        assert v.tobytes() == source_model_42.params()[k].tobytes()
    assert np.max(np.abs(src - bn)) > 1e-3


def _batch_mean_entropy(model, x):
    return mean_entropy_oracle(nn.forward(model, x, "batch").probs.values)


def test_tent_single_step_lowers_entropy(source_model_42, shifted_batch):
    m = source_model_42.copy()
    before = _batch_mean_entropy(m, shifted_batch.x)
    adapt.adapt_step(m, shifted_batch.x, AdaptConfig(method="tent"))
    assert _batch_mean_entropy(m, shifted_batch.x) < before


def test_entropy_max_single_step_raises_entropy(source_model_42, shifted_batch):
    m = source_model_42.copy()
    x = shifted_batch.x
    before = _batch_mean_entropy(m, x)
    fo = split_output(len(x), [], np.arange(len(x)))
    adapt.adapt_step(m, x, AdaptConfig(method="unient", lambda1=1.0, lambda2=0.0), fo)
    assert _batch_mean_entropy(m, x) > before


@pytest.mark.parametrize("method", adapt.GRADIENT_METHODS)
def test_gradient_scope_bn_affine_only(method, source_model_42, shifted_batch):
    m = source_model_42.copy()
    before = {k: v.copy() for k, v in m.params().items()}
    running = [(l.running_mean.copy(), l.running_var.copy()) for l in m.layers]
    fo = SourceFilter(source_model_42)(shifted_batch.x)
    adapt.adapt_step(m, shifted_batch.x, AdaptConfig(method=method, lambda_tent=0.1), fo)
    affine = set(m.bn_affine_names())
    for k, v in m.params().items():
        if k in affine:
            assert not np.array_equal(v, before[k]), k
        else:
            assert v.tobytes() == before[k].tobytes(), k
    for l, (rm, rv) in zip(m.layers, running):
        assert l.running_mean.tobytes() == rm.tobytes() and l.running_var.tobytes() == rv.tobytes()


def test_predictions_are_pre_update(source_model_42, shifted_batch):
    m = source_model_42.copy()
    expected = nn.forward(m, shifted_batch.x, "batch").logits.values
    logits, _ = adapt.adapt_step(m, shifted_batch.x, AdaptConfig(method="tent"))
    assert logits.tobytes() == expected.tobytes()


def test_labeled_batch_is_rejected(source_model_42, shifted_batch):
    with pytest.raises(TypeError, match="LabeledBatch"):
        adapt.adapt_step(source_model_42.copy(), shifted_batch, AdaptConfig(method="tent"))


def test_non_finite_loss_reports_method_and_batch(source_model_42):
    x = np.full((4, 16), np.nan)
    with pytest.raises(adapt.AdaptationError, match=r"method=tent, batch=3"):
        adapt.adapt_step(source_model_42.copy(), x, AdaptConfig(method="tent"), batch_index=3)


def test_unient_plus_all_csid_matches_tent_with_marginal(source_model_42):
    lam2 = 0.2
    a, b = source_model_42.copy(), source_model_42.copy()
    ca = AdaptConfig(method="unient_plus", lambda1=0.2, lambda2=lam2)
    cb = AdaptConfig(method="tent", lambda_tent=lam2)
    oa, ob = adapt.make_optimizer(ca), adapt.make_optimizer(cb)
    for t, batch in enumerate(bench.stream(short_cfg(bpd=2))):
        if t == 10:
            break
        pi = np.ones(len(batch))
        fo = FilterOutput(np.full(len(batch), 0.5), pi, None, np.arange(len(batch)), np.array([], int), True)
        la, _ = adapt.adapt_step(a, batch.x, ca, fo, oa)
        lb, _ = adapt.adapt_step(b, batch.x, cb, None, ob)
        assert np.max(np.abs(la - lb)) < 1e-12
        for k, v in a.params().items():
            assert np.max(np.abs(v - b.params()[k])) < 1e-12


def test_filter_scores_invariant_under_adaptation(source_model_42):
    cfg = short_cfg(bpd=10)
    batches = list(bench.stream(cfg))
    probe = batches[0].x
    sf = SourceFilter(source_model_42)
    before = sf(probe).scores.copy()
    _, final = adapt.run_stream(source_model_42, batches, AdaptConfig(method="unient"))
    assert len(batches) == 50
    assert sf(probe).scores.tobytes() == before.tobytes()
    assert SourceFilter(source_model_42)(probe).scores.tobytes() == before.tobytes()
    assert not np.array_equal(final.layers[0].gamma, source_model_42.layers[0].gamma)


# ---------------------------------------------------------------- streams


def test_empty_stream():
    report, _ = adapt.run_stream(nn.init_model([16, 8, 8], np.random.default_rng(0)), [], AdaptConfig(method="tent"))
    assert report.n_csid == 0 and report.acc is None and report.oscr is None


def test_source_acc_equals_offline(source_model_42):
    batches = list(bench.stream(short_cfg(bpd=3)))
    report, _ = adapt.run_stream(source_model_42, batches, AdaptConfig(method="source"))
    x = np.concatenate([b.x[~b.is_csood] for b in batches])
    y = np.concatenate([b.y[~b.is_csood] for b in batches])
    assert abs(report.acc - 100 * nn.accuracy(source_model_42, x, y)) < 1e-12


def test_causality_under_truncation(source_model_42):
    batches = list(bench.stream(short_cfg(bpd=2)))
    full, _ = adapt.run_stream(source_model_42, batches, AdaptConfig(method="unient"))
    part, _ = adapt.run_stream(source_model_42, batches[:4], AdaptConfig(method="unient"))
    assert full.per_domain[:2] == part.per_domain


def test_run_stream_does_not_modify_model0(source_model_42):
    before = {k: v.copy() for k, v in source_model_42.params().items()}
    adapt.run_stream(source_model_42, list(bench.stream(short_cfg(bpd=1))), AdaptConfig(method="tent"))
    for k, v in source_model_42.params().items():
        assert v.tobytes() == before[k].tobytes()


def test_seed42_unient_beats_tent_on_oscr(default_cfg, source_model_42):
    batches = list(bench.stream(default_cfg))
    tent, _ = adapt.run_stream(source_model_42, batches, AdaptConfig(method="tent"))
    uni, _ = adapt.run_stream(source_model_42, batches, AdaptConfig(method="unient"))
    assert uni.oscr > tent.oscr
