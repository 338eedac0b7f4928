import numpy as np
import pytest

from lamreid import network
from lamreid.gradcheck import check_network


@pytest.fixture(scope="module")
def full_params():
    return network.init_params(network.NetConfig(), seed=0)


def test_default_shape_chain():
    cfg = network.NetConfig()
    assert cfg.global_shape() == (64, 74, 24)
    assert [s[0] for s in cfg.part_shapes()] == [19, 19, 18, 18]
    assert cfg.feature_dim == 800


def test_forward_full_size_gives_800_features(full_params, rng):
    images = rng.uniform(0, 1, size=(2, 3, 230, 80))
    feats, _ = network.forward(full_params, images)
    assert feats.shape == (2, 800)
    assert np.all(np.isfinite(feats))


def test_parameter_shapes(full_params):
    P = full_params.params
    assert P["global.conv.weight"].shape == (64, 3, 7, 7)
    assert P["part0.block0.conv1.weight"].shape == (32, 64, 3, 3)
    assert P["part0.block0.conv2.weight"].shape == (32, 32, 3, 3)
    assert P["part0.fc1.weight"].shape == (100, 32 * 17 * 22)
    assert P["part3.fc1.weight"].shape == (100, 32 * 16 * 22)
    assert P["part2.fc2.weight"].shape == (100, 100)
    assert P["summarizer.weight"].shape == (400, 400)


def test_later_blocks_are_32_to_32():
    p = network.init_params(network.NetConfig.reduced(residual_blocks=3, local_filters=3), 0)
    assert p.params["part1.block0.conv1.weight"].shape[1] == 4
    assert p.params["part1.block2.conv1.weight"].shape[:2] == (3, 3)


@pytest.mark.parametrize("height,expected", [(74, [19, 19, 18, 18]), (8, [2, 2, 2, 2]), (5, [2, 1, 1, 1])])
def test_stripe_heights(height, expected):
    assert network.stripe_heights(height) == expected


def test_split_parts_round_trip(rng):
    fm = rng.standard_normal((2, 3, 74, 5))
    parts = network.split_parts(fm)
    assert [p.shape[2] for p in parts] == [19, 19, 18, 18]
    np.testing.assert_array_equal(np.concatenate(parts, axis=2), fm)
    with pytest.raises(ValueError):
        network.split_parts(np.zeros((1, 1, 3, 4)))


def test_init_biases_zero_and_deterministic():
    cfg = network.NetConfig.reduced(use_batch_norm=True)
    a, b = network.init_params(cfg, 7), network.init_params(cfg, 7)
    for k, v in a.params.items():
        np.testing.assert_array_equal(v, b.params[k])
        if k.endswith(".bias") or k.endswith(".shift"):
            assert not v.any()
    assert not np.array_equal(a.params["global.conv.weight"], network.init_params(cfg, 8).params["global.conv.weight"])


@pytest.mark.parametrize("scheme", ["fixed", "fan_in"])
def test_global_weight_std(full_params, scheme):
    cfg = network.NetConfig(init_scheme=scheme)
    w = network.init_params(cfg, 3).params["global.conv.weight"]
    target = network.weight_std(cfg, "conv", 3 * 7 * 7)
    if scheme == "fixed":
        assert target == 0.01
    assert abs(w.std() / target - 1) < 0.2


def test_fixed_scheme_fc_std():
    cfg = network.NetConfig.reduced(init_scheme="fixed")
    assert network.init_params(cfg, 0).params["summarizer.weight"].std() == pytest.approx(0.001, rel=0.2)


def test_zero_image_zero_bias_gives_zero_features(tiny_config):
    p = network.init_params(tiny_config, 0)
    feats, _ = network.forward(p, np.zeros((2,) + tiny_config.input_shape))
    np.testing.assert_array_equal(feats, 0.0)


def test_duplicate_images_identical_rows(tiny_config, rng):
    p = network.init_params(tiny_config, 0)
    img = rng.uniform(size=(1,) + tiny_config.input_shape)
    feats, _ = network.forward(p, np.concatenate([img, img, rng.uniform(size=img.shape)]))
    np.testing.assert_array_equal(feats[0], feats[1])


def test_forward_rejects_wrong_shape(tiny_config):
    p = network.init_params(tiny_config, 0)
    with pytest.raises(ValueError, match=r"\(batch, 3, 24, 8\)"):
        network.forward(p, np.zeros((1, 3, 24, 9)))


def test_chunking_does_not_change_result(tiny_config, rng):
    p = network.init_params(tiny_config, 1)
    x = rng.uniform(size=(5,) + tiny_config.input_shape)
    f1, _ = network.forward(p, x, chunk=2)
    f2, _ = network.forward(p, x, chunk=16)
    np.testing.assert_allclose(f1, f2, rtol=0, atol=1e-14)


def test_zero_feature_grads_give_zero_param_grads(tiny_config, rng):
    p = network.init_params(tiny_config, 0)
    feats, trace = network.forward(p, rng.uniform(size=(3,) + tiny_config.input_shape))
    grads = network.backward(p, trace, np.zeros_like(feats))
    assert grads.keys() == p.params.keys()
    assert all(not g.any() for g in grads.values())


def test_backward_rejects_mismatched_trace(tiny_config, rng):
    p = network.init_params(tiny_config, 0)
    feats, trace = network.forward(p, rng.uniform(size=(2,) + tiny_config.input_shape))
    other = network.init_params(network.NetConfig.reduced(residual_blocks=2), 0)
    with pytest.raises(ValueError, match="different structure"):
        network.backward(other, trace, np.zeros_like(feats))


def test_duplicated_sample_doubles_gradient(tiny_config, rng):
    p = network.init_params(tiny_config, 0).astype(np.float64)
    img = rng.uniform(size=(1,) + tiny_config.input_shape)
    g_up = rng.standard_normal((1, tiny_config.feature_dim))
    f1, t1 = network.forward(p, img)
    single = network.backward(p, t1, g_up)
    f2, t2 = network.forward(p, np.concatenate([img, img]))
    double = network.backward(p, t2, np.concatenate([g_up, g_up]))
    for k in single:
        np.testing.assert_allclose(double[k], 2 * single[k], rtol=1e-10, atol=1e-14)


def test_parts_do_not_share_parameters(tiny_config, rng):
    p = network.init_params(tiny_config, 0)
    x = rng.uniform(size=(2,) + tiny_config.input_shape)
    base, tb = network.forward(p, x)
    q = p.copy()
    q.params["part2.block0.conv1.weight"] += 0.5
    moved, tm = network.forward(q, x)
    d = tiny_config.part_dim
    for part in range(4):
        same = part != 2
        assert np.array_equal(tb.parts[part]["fc1"], tm.parts[part]["fc1"]) == same
        sl = slice(4 * d + part * d, 4 * d + (part + 1) * d)
        assert np.array_equal(base[:, sl], moved[:, sl]) == same
    assert not np.array_equal(base[:, :4 * d], moved[:, :4 * d])
    ids = {id(v) for v in p.params.values()}
    assert len(ids) == len(p.params)


def test_batch_norm_inference_batch_of_one_matches_batch(rng):
    cfg = network.NetConfig.reduced(use_batch_norm=True)
    p = network.init_params(cfg, 0)
    x = rng.uniform(size=(4,) + cfg.input_shape)
    _, trace = network.forward(p, x, mode="train")
    p.buffers.update(trace.buffers)
    full, _ = network.forward(p, x, mode="inference")
    one, _ = network.forward(p, x[2:3], mode="inference")
    np.testing.assert_allclose(one[0], full[2], rtol=1e-12, atol=1e-14)


def test_forward_does_not_commit_running_stats(rng):
    cfg = network.NetConfig.reduced(use_batch_norm=True)
    p = network.init_params(cfg, 0)
    before = {k: v.copy() for k, v in p.buffers.items()}
    _, trace = network.forward(p, rng.uniform(size=(3,) + cfg.input_shape))
    for k, v in p.buffers.items():
        np.testing.assert_array_equal(v, before[k])
        assert not np.array_equal(trace.buffers[k], before[k])


@pytest.mark.parametrize("bn", [False, True])
def test_four_block_paths_pass_gradcheck(bn):
    cfg = network.NetConfig.reduced(residual_blocks=4, use_batch_norm=bn)
    results = check_network(cfg, "adaptive", seed=2, samples=3)
    assert all(r.passed for r in results), [r for r in results if not r.passed]


def test_config_round_trip_and_validation():
    cfg = network.NetConfig(residual_blocks=2, use_batch_norm=True)
    assert network.NetConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        network.NetConfig(residual_blocks=0)
    with pytest.raises(ValueError):
        network.NetConfig(input_shape=(3, 10, 10))
