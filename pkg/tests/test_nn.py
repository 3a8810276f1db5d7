import numpy as np
import pytest

from unient import autodiff as ad
from unient import bench, nn


def small_model(seed=0, dims=(5, 7, 6, 3)):
    return nn.init_model(dims, np.random.default_rng(seed))


def test_zero_weight_model_predicts_uniform(rng):
    m = small_model()
    for layer in m.layers:
        layer.W[:] = 0
        layer.b[:] = 0
    m.W_head[:] = 0
    m.b_head[:] = 0
    x = rng.normal(size=(4, 5))
    for mode in ("batch", "running"):
        out = nn.forward(m, x, mode)
        np.testing.assert_array_equal(out.probs.values, np.full((4, 3), 1 / 3))


def test_duplicated_sample_bn_output_is_beta(rng):
    m = small_model()
    m.layers[0].beta[:] = rng.normal(size=7)
    x = np.repeat(rng.normal(size=(1, 5)), 2, axis=0)
    h = ad.add_bias(ad.matmul(ad.Tensor(x), ad.Tensor(m.layers[0].W.T)), ad.Tensor(m.layers[0].b))
    out, _, _ = ad.batchnorm_train(h, m.layers[0].gamma, m.layers[0].beta)
    np.testing.assert_array_equal(out.values, np.tile(m.layers[0].beta, (2, 1)))


def test_dimension_mismatch(rng):
    with pytest.raises(nn.ArchitectureError, match="input dim 5"):
        nn.forward(small_model(), rng.normal(size=(4, 6)))
    with pytest.raises(nn.ArchitectureError, match="batch >= 2"):
        nn.forward(small_model(), rng.normal(size=(1, 5)), "batch")


def test_running_mode_is_batch_independent(rng):
    m = small_model()
    for layer in m.layers:
        layer.running_mean[:] = rng.normal(size=layer.running_mean.shape)
        layer.running_var[:] = rng.uniform(0.5, 2, size=layer.running_var.shape)
    x = rng.normal(size=(10, 5))
    full = nn.predict_logits(m, x)
    perm = rng.permutation(10)
    np.testing.assert_allclose(nn.predict_logits(m, x[perm]), full[perm], rtol=0, atol=1e-12)
    parts = np.concatenate([nn.predict_logits(m, x[:3]), nn.predict_logits(m, x[3:])])
    np.testing.assert_allclose(parts, full, rtol=0, atol=1e-12)


def test_batch_mode_is_permutation_equivariant(rng):
    m = small_model()
    x = rng.normal(size=(12, 5))
    perm = rng.permutation(12)
    a = nn.forward(m, x, "batch").logits.values
    b = nn.forward(m, x[perm], "batch").logits.values
    np.testing.assert_allclose(b, a[perm], rtol=0, atol=1e-12)


def test_probs_rows_sum_to_one(rng):
    p = nn.forward(small_model(), 10 * rng.normal(size=(8, 5)), "batch").probs.values
    assert np.max(np.abs(p.sum(axis=1) - 1)) < 1e-12


def test_train_mode_updates_running_stats(rng):
    m = small_model()
    x = 3 + rng.normal(size=(50, 5))
    before = m.layers[0].running_mean.copy()
    nn.forward(m, x, "train", momentum=0.1)
    assert not np.array_equal(before, m.layers[0].running_mean)
    assert np.all(m.layers[0].running_var >= 0)


def test_forward_gradients_match_finite_differences(rng):
    m = small_model()
    x = rng.normal(size=(6, 5))
    name = "layers.1.gamma"
    out = nn.forward(m, x, "batch", track=[name])
    ad.backward(ad.sum(ad.entropy_rows(out.probs)))
    g = out.leaves[name].grad
    h = 1e-5
    p = m.params()[name]
    for j in range(len(p)):
        old = p[j]
        p[j] = old + h
        fp = ad.entropy_rows(nn.forward(m, x, "batch").probs).values.sum()
        p[j] = old - h
        fm = ad.entropy_rows(nn.forward(m, x, "batch").probs).values.sum()
        p[j] = old
        assert abs(g[j] - (fp - fm) / (2 * h)) < 1e-6


def test_pretrain_zero_epochs_returns_init():
    data = bench.make_source(bench.BenchmarkConfig(d=4, C_s=3, cluster_separation=6, seed=1), 20)
    m = nn.pretrain(data, nn.PretrainConfig(max_epochs=0, hidden=(8,)), seed=3)
    ref = nn.init_model([4, 8, 3], np.random.default_rng(np.random.SeedSequence([3, 0x1A17])))
    for k, v in ref.params().items():
        np.testing.assert_array_equal(m.params()[k], v)
    assert np.all(m.layers[0].running_mean == 0) and np.all(m.layers[0].running_var == 1)


def test_pretrain_separable_blobs_reach_full_accuracy():
    cfg = bench.BenchmarkConfig(d=2, C_s=2, C_open=1, cluster_separation=10, seed=5)
    data = bench.make_source(cfg, 200)
    m = nn.pretrain(data, nn.PretrainConfig(max_epochs=50), seed=5)
    assert nn.accuracy(m, data.x, data.y) == 1.0


def test_pretrain_rejects_negative_labels():
    data = bench.LabeledBatch(np.zeros((4, 2)), np.array([0, 1, -1, 0]), np.zeros(4, bool))
    with pytest.raises(ValueError):
        nn.pretrain(data, nn.PretrainConfig(max_epochs=1, hidden=(4,)))


def test_seed42_pretrained_accuracy(default_cfg, source_model_42):
    pc = nn.PretrainConfig()
    train = bench.make_source(default_cfg, pc.n_train_per_class, "train")
    test = bench.make_source(default_cfg, pc.n_test_per_class, "test")
    assert nn.accuracy(source_model_42, train.x, train.y) > 0.95
    assert nn.accuracy(source_model_42, test.x, test.y) >= 0.97


def test_prototypes_shape_and_copy(source_model_42):
    p = nn.prototypes(source_model_42)
    assert list(p.shape) == [source_model_42.n_classes, source_model_42.feat_dim]
    p[:] = 0
    assert np.any(source_model_42.W_head != 0)


def test_prototypes_identity_head():
    m = small_model(dims=(5, 3, 3))
    m.W_head[:] = np.eye(3)
    np.testing.assert_array_equal(nn.prototypes(m), np.eye(3))


def test_class_features_align_with_own_prototype(default_cfg, source_model_42):
    data = bench.make_source(default_cfg, 100, "test")
    feats = nn.forward(source_model_42, data.x, "running").features.values
    protos = nn.prototypes(source_model_42)
    pn = protos / np.linalg.norm(protos, axis=1, keepdims=True)
    for c in range(default_cfg.C_s):
        mean = feats[data.y == c].mean(axis=0)
        cos = pn @ (mean / np.linalg.norm(mean))
        assert np.argmax(cos) == c


def test_checkpoint_roundtrip_bit_exact(tmp_path, source_model_42, rng):
    path = tmp_path / "ck.json"
    nn.save_checkpoint(source_model_42, path, seed=42)
    loaded, seed = nn.load_checkpoint(path)
    assert seed == 42
    for k, v in source_model_42.params().items():
        np.testing.assert_array_equal(loaded.params()[k], v)
    x = rng.normal(size=(7, 16))
    np.testing.assert_array_equal(nn.predict_logits(loaded, x), nn.predict_logits(source_model_42, x))
    nn.save_checkpoint(loaded, tmp_path / "ck2.json", seed=42)
    assert path.read_bytes() == (tmp_path / "ck2.json").read_bytes()


def test_checkpoint_rejects_unknown_version(tmp_path):
    (tmp_path / "bad.json").write_text('{"format_version": 9}')
    with pytest.raises(ValueError, match="format_version"):
        nn.load_checkpoint(tmp_path / "bad.json")


def test_checkpoint_writes_seventeen_digits(tmp_path):
    m = small_model()
    m.b_head[0] = 0.1
    nn.save_checkpoint(m, tmp_path / "ck.json", seed=0)
    assert "0.10000000000000001" in (tmp_path / "ck.json").read_text()
    assert nn.load_checkpoint(tmp_path / "ck.json")[0].b_head[0] == 0.1
