from __future__ import annotations

import numpy as np
import pytest

from multilid import acoustic
from multilid.acoustic import NetworkConfig, TrainHyper
from multilid.dsp import FeatureSequence
from multilid.errors import BadInputError, TooShortError


def tiny_config(**overrides):
    base = dict(
        n_targets=2,
        n_mels=4,
        conv_layers=1,
        conv_filters=4,
        kernel_time=3,
        kernel_freq=3,
        freq_pool=2,
        fc_layers=1,
        fc_width=8,
        bottleneck=8,
        post_width=8,
    )
    base.update(overrides)
    return NetworkConfig(**base)


def rand_feats(t, dims, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return FeatureSequence(rng.standard_normal((t, dims)) * scale)


def test_param_count_hand_counted():
    cfg = tiny_config()
    # hand count, layer by layer:
    #   conv0: 4 filters x (1 in x 3 x 3) + 4 biases        = 40
    #   freq 4 -> 2 after pooling, flat dim 4 * 2 = 8
    #   fc0: 8 x 8 + 8                                      = 72
    #   bottleneck: 8 x 8 + 8                               = 72
    #   post: (2 * 8) x 8 + 8                               = 136
    #   out: 8 x 2 + 2                                      = 18
    assert acoustic.param_count(cfg) == 40 + 72 + 72 + 136 + 18


def test_build_network_matches_count_and_is_deterministic():
    cfg = tiny_config()
    a = acoustic.build_network(cfg, seed=5)
    b = acoustic.build_network(cfg, seed=5)
    c = acoustic.build_network(cfg, seed=6)
    assert sum(p.size for p in a.values()) == acoustic.param_count(cfg)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_full_config_parameter_budget():
    cfg = acoustic.full_config(n_targets=8)
    count = acoustic.param_count(cfg)
    assert 0.85 * 8_000_000 <= count <= 1.15 * 8_000_000
    assert cfg.freq_trajectory() == [40, 20, 10, 5, 2]


def test_config_rejects_vanishing_frequency():
    with pytest.raises(BadInputError, match="frequency"):
        NetworkConfig(n_targets=2, n_mels=4, conv_layers=3, freq_pool=2)


def test_forward_posterior_is_simplex():
    cfg = tiny_config()
    params = acoustic.build_network(cfg, seed=1)
    logits, post = acoustic.forward(params, cfg, rand_feats(20, 4))
    assert logits.shape == (2,)
    assert post.values.sum() == pytest.approx(1.0, abs=1e-6)
    assert np.all(post.values >= 0)


def test_forward_rejects_short_input():
    cfg = tiny_config()
    params = acoustic.build_network(cfg, seed=1)
    with pytest.raises(TooShortError):
        acoustic.forward(params, cfg, rand_feats(cfg.min_frames - 1, 4))


def test_zero_weight_network_gives_uniform_posterior():
    cfg = tiny_config(n_targets=5)
    params = {k: np.zeros_like(v) for k, v in acoustic.build_network(cfg, 1).items()}
    _, post = acoustic.forward(params, cfg, rand_feats(12, 4))
    assert np.allclose(post.values, 0.2, atol=1e-9)


def test_temporal_pool_constant_rows():
    v = np.array([1.5, -2.0, 0.25])
    pooled = acoustic.temporal_pool(np.tile(v, (9, 1)))
    assert np.allclose(pooled[:3], v)
    assert np.all(pooled[3:] <= 1e-3)


def test_temporal_pool_mean_and_population_std():
    pooled = acoustic.temporal_pool(np.array([[0.0], [2.0]]))
    # mean 1, population std sqrt(((0-1)^2 + (2-1)^2) / 2) = 1
    assert pooled[0] == pytest.approx(1.0, abs=1e-12)
    assert pooled[1] == pytest.approx(1.0, abs=1e-6)


def test_temporal_pool_permutation_invariant():
    rng = np.random.default_rng(2)
    h = rng.standard_normal((17, 6))
    shuffled = h[rng.permutation(17)]
    assert np.allclose(
        acoustic.temporal_pool(h), acoustic.temporal_pool(shuffled), atol=1e-12
    )


def test_temporal_pool_rejects_empty():
    with pytest.raises(BadInputError):
        acoustic.temporal_pool(np.zeros((0, 4)))


def frame_local_config(**overrides):
    """kernel_time=1 makes every layer frame-local, so pooling symmetry
    extends to the whole forward pass."""
    return tiny_config(kernel_time=1, **overrides)


def test_forward_permutation_invariance_frame_local():
    cfg = frame_local_config()
    params = acoustic.build_network(cfg, seed=3)
    feats = rand_feats(30, 4, seed=4)
    rng = np.random.default_rng(5)
    shuffled = FeatureSequence(feats.frames[rng.permutation(30)])
    a, _ = acoustic.forward(params, cfg, feats)
    b, _ = acoustic.forward(params, cfg, shuffled)
    assert np.allclose(a, b, atol=1e-5)


def test_forward_tiling_invariance_frame_local():
    cfg = frame_local_config()
    params = acoustic.build_network(cfg, seed=3)
    frames = np.random.default_rng(6).standard_normal((25, 4))
    a, _ = acoustic.forward(params, cfg, FeatureSequence(frames))
    b, _ = acoustic.forward(params, cfg, FeatureSequence(np.tile(frames, (2, 1))))
    assert np.allclose(a, b, atol=1e-5)


def test_variable_length_contract_short_sweep():
    cfg = tiny_config()
    params = acoustic.build_network(cfg, seed=7)
    for t in range(cfg.min_frames, 60):
        logits, post = acoustic.forward(params, cfg, rand_feats(t, 4, seed=t))
        assert np.all(np.isfinite(logits))


def test_class_weights_balanced():
    w = acoustic.class_weights([0, 1, 0, 1], 2)
    assert np.allclose(w, [1.0, 1.0])


def test_class_weights_imbalanced_90_10():
    labels = [0] * 90 + [1] * 10
    w = acoustic.class_weights(labels, 2)
    # oracle: raw (1/90, 1/10) scaled to mean 1 -> (0.2, 1.8)
    assert np.allclose(w, [0.2, 1.8], atol=1e-12)


def test_class_weights_single_class():
    assert np.allclose(acoustic.class_weights([0, 0, 0], 1), [1.0])


def test_class_weights_empty_class_rejected():
    with pytest.raises(BadInputError, match="no samples"):
        acoustic.class_weights([0, 0], 2)


def separable_dataset(n_per_class=30, t=12, dims=4, gap=6.0, seed=0):
    rng = np.random.default_rng(seed)
    mu0 = np.zeros(dims)
    mu1 = np.full(dims, gap / np.sqrt(dims))
    data = []
    for label, mu in ((0, mu0), (1, mu1)):
        for _ in range(n_per_class):
            frames = mu + rng.standard_normal((t, dims)) * 0.5
            data.append((FeatureSequence(frames), label))
    return data


def logistic_regression_separates(data, steps=400, lr=0.5):
    """Independent separability oracle on pooled frame means."""
    x = np.stack([d[0].frames.mean(axis=0) for d in data])
    y = np.array([d[1] for d in data], dtype=np.float64)
    w = np.zeros(x.shape[1])
    b = 0.0
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-(x @ w + b)))
        g = p - y
        w -= lr * (x.T @ g) / len(y)
        b -= lr * g.mean()
    pred = (x @ w + b) > 0
    return np.mean(pred == y)


def test_training_fits_separable_data():
    data = separable_dataset()
    assert logistic_regression_separates(data) >= 0.99
    cfg = tiny_config()
    params = acoustic.build_network(cfg, seed=11)
    hyper = TrainHyper(learning_rate=0.1, batch_size=8, epochs=12, seed=11)
    params, history = acoustic.train(params, cfg, data, hyper)
    correct = 0
    for feats, label in data:
        logits, _ = acoustic.forward(params, cfg, feats)
        correct += int(np.argmax(logits)) == label
    assert correct / len(data) >= 0.99
    assert history[-1] < history[0]


def test_training_zero_epochs_is_identity():
    data = separable_dataset(n_per_class=3)
    cfg = tiny_config()
    params = acoustic.build_network(cfg, seed=1)
    out, history = acoustic.train(
        params, cfg, data, TrainHyper(0.1, 4, 0, seed=1)
    )
    assert history == []
    assert all(np.array_equal(out[k], params[k]) for k in params)


def test_weight_doubling_equals_lr_halving_in_float64():
    data = separable_dataset(n_per_class=6, seed=3)
    cfg = tiny_config()
    init = acoustic.build_network(cfg, seed=2, dtype=np.float64)
    w1 = np.array([1.0, 1.0])
    a, _ = acoustic.train(
        init, cfg, data, TrainHyper(0.1, 4, 2, seed=9, class_weights=w1)
    )
    b, _ = acoustic.train(
        init, cfg, data, TrainHyper(0.05, 4, 2, seed=9, class_weights=2 * w1)
    )
    for key in a:
        assert np.allclose(a[key], b[key], atol=1e-6)


def test_training_is_deterministic():
    data = separable_dataset(n_per_class=5, seed=4)
    cfg = tiny_config()
    init = acoustic.build_network(cfg, seed=3)
    hyper = TrainHyper(0.1, 4, 3, seed=21)
    a, ha = acoustic.train(init, cfg, data, hyper)
    b, hb = acoustic.train(init, cfg, data, hyper)
    assert ha == hb
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_gradient_check_tiny():
    cfg = tiny_config(n_mels=6, kernel_freq=2, conv_filters=2)
    feats = rand_feats(8, 6, seed=12)
    err = acoustic.gradient_check(cfg, feats, target=1, seed=13, weight=1.3)
    assert err < 1e-4


def test_gradient_zero_weight_sample():
    cfg = tiny_config(n_mels=4, conv_filters=2)
    feats = rand_feats(7, 4, seed=14)
    _, grads = acoustic.loss_and_grads(
        acoustic.build_network(cfg, 15, dtype=np.float64), cfg, feats, 0, weight=0.0
    )
    assert all(np.allclose(g, 0.0) for g in grads.values())


def test_model_file_round_trip(tmp_path):
    cfg = tiny_config()
    params = acoustic.build_network(cfg, seed=8)
    path = tmp_path / "model.bin"
    acoustic.save_model(
        path,
        cfg,
        params,
        class_names=["a", "b"],
        locale_to_class=[0, 1, 1],
        class_to_language=[0, 1],
        registry_pairs=[("en-US", "en"), ("de-DE", "de"), ("de-AT", "de")],
        scheme_kind="languages",
        meta={"seed": 8},
    )
    cfg2, params2, header = acoustic.load_model(path)
    assert cfg2 == cfg
    assert header["class_names"] == ["a", "b"]
    assert header["meta"]["seed"] == 8
    for key in params:
        assert np.allclose(params2[key], params[key], atol=1e-7)


def test_model_file_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"XXXX" + b"\x00" * 32)
    with pytest.raises(BadInputError, match="magic"):
        acoustic.load_model(path)
