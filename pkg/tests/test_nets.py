import itertools

import numpy as np
import pytest

from fsrnet import tensor as T
from fsrnet.nets import (ConfigError, ModelParams, NetConfig, coarse_sr_forward, discriminator_forward,
                         fine_decoder_forward, fine_encoder_forward, fsrnet_forward, init_discriminator,
                         init_generator, init_phi, perceptual_extract, prior_net_forward, residual_block)
from fsrnet.tensor import ShapeError, Tensor
from fsrnet.train import RMSprop

SMALL = dict(base_channels=4, num_coarse_res_blocks=1, num_encoder_res_blocks=1, num_decoder_res_blocks=1)


def img(n, hr, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(0, 1, (n, 3, hr, hr)).astype(np.float32))


MATRIX = list(itertools.product([32, 64], [4, 8], [1, 2], [5, 11], [4, 9]))


@pytest.mark.parametrize("hr,scale,h,k,p", MATRIX)
def test_pipeline_shape_chain(hr, scale, h, k, p):
    cfg = NetConfig(hr_size=hr, scale_factor=scale, num_hourglass=h, num_landmarks=k, num_parsing_maps=p,
                    hourglass_depth=2, **SMALL)
    params = init_generator(cfg, seed=0)
    with T.no_grad():
        out = fsrnet_forward(img(2, hr), params, cfg)
    half = hr // 2
    assert out.coarse.shape == (2, 3, hr, hr)
    assert out.fine.shape == (2, 3, hr, hr)
    assert out.prior.landmark_heatmaps.shape == (2, k, half, half)
    assert out.prior.parsing_maps.shape == (2, p, half, half)
    assert len(out.prior.stacks) == h
    assert out.prior.decoder_input().shape == (2, cfg.base_channels + k + p, half, half)
    heat = out.prior.landmark_heatmaps.data
    assert heat.min() >= 0 and heat.max() <= 1


def test_full_scale_encoder_shape():
    cfg = NetConfig(hr_size=128, base_channels=64, num_encoder_res_blocks=1)
    p = init_generator(cfg, seed=0)
    with T.no_grad():
        f = fine_encoder_forward(img(1, 128), p, cfg)
    assert f.shape == (1, 64, 64, 64)


def test_desk_encoder_and_decoder_shapes():
    cfg = NetConfig(hr_size=64, base_channels=64, num_landmarks=5, num_parsing_maps=4,
                    num_encoder_res_blocks=1, num_decoder_res_blocks=1, num_coarse_res_blocks=1)
    p = init_generator(cfg, seed=0)
    with T.no_grad():
        f = fine_encoder_forward(img(1, 64), p, cfg)
        assert f.shape == (1, 64, 32, 32)
        priors = Tensor(np.zeros((1, 64 + 9, 32, 32), np.float32))
        y = fine_decoder_forward(f, priors, p, cfg)
    assert y.shape == (1, 3, 64, 64)


def test_decoder_rejects_spatial_mismatch():
    cfg = NetConfig(hr_size=32, **SMALL)
    p = init_generator(cfg, seed=0)
    f = Tensor(np.zeros((1, 4, 16, 16), np.float32))
    with pytest.raises(ShapeError):
        fine_decoder_forward(f, Tensor(np.zeros((1, 14, 8, 8), np.float32)), p, cfg)


@pytest.mark.parametrize("priors", ["both", "landmarks", "parsing"])
def test_channel_matched_baseline_decoder_width(priors):
    widths = {}
    for variant in ("gt_prior", "gt_prior_baseline"):
        cfg = NetConfig(hr_size=32, priors=priors, variant=variant, **SMALL)
        widths[variant] = cfg.decoder_in_channels
        p = init_generator(cfg, seed=0)
        assert p["decoder.reduce.conv.weight"].shape[1] == cfg.decoder_in_channels
    assert widths["gt_prior"] == widths["gt_prior_baseline"]


def test_baseline_v1_has_no_prior_branch():
    p = init_generator(NetConfig(hr_size=32, variant="baseline_v1", **SMALL), seed=0)
    assert not any(k.startswith("prior.") for k in p)


@pytest.mark.parametrize("hr,cells", [(64, 4), (128, 8), (32, 2), (16, 1)])
def test_discriminator_downsamples_by_16(hr, cells):
    cfg = NetConfig(hr_size=hr, scale_factor=4, hourglass_depth=1, disc_channels=(8, 8, 8, 8), **SMALL)
    d = init_discriminator(cfg, seed=0)
    with T.no_grad():
        c = discriminator_forward(img(2, hr), img(2, hr, seed=1), d, cfg)
    assert c.shape == (2, 1, cells, cells)
    assert np.all((c.data > 0) & (c.data < 1))


def test_discriminator_rejects_bad_size():
    cfg = NetConfig(hr_size=24, scale_factor=4, hourglass_depth=1, **SMALL)
    with pytest.raises(ConfigError):
        discriminator_forward(img(1, 24), img(1, 24), init_discriminator(cfg, 0), cfg)


def test_zero_residual_branch_is_identity():
    p = ModelParams("0" * 64)
    from fsrnet.nets import _Init
    _Init(p, np.random.default_rng(0)).residual("blk", 3)
    p["blk.conv2.weight"].data[...] = 0
    p["blk.conv2.bias"].data[...] = 0
    x = img(2, 8)
    assert np.array_equal(residual_block(x, p, "blk").data, x.data)


def test_residual_rejects_width_mismatch():
    p = ModelParams("0" * 64)
    from fsrnet.nets import _Init
    _Init(p, np.random.default_rng(0)).residual("blk", 4)
    with pytest.raises(ShapeError):
        residual_block(img(1, 8), p, "blk")


def test_coarse_param_count_formula():
    c, n = 6, 2
    cfg = NetConfig(hr_size=32, base_channels=c, num_coarse_res_blocks=n)
    p = init_generator(cfg, seed=0)
    got = sum(t.data.size for k, t in p.trainable() if k.startswith("coarse."))
    head = 3 * c * 9 + c + 2 * c
    res = 2 * (c * c * 9 + c) + 2 * (2 * c)
    tail = c * 3 * 9 + 3
    assert got == head + n * res + tail


def test_coarse_zero_tail_reference():
    cfg = NetConfig(hr_size=16, scale_factor=4, hourglass_depth=1, **SMALL)
    p = init_generator(cfg, seed=0)
    p["coarse.tail.weight"].data[...] = 0
    p["coarse.tail.bias"].data[...] = np.array([0.1, 0.2, 0.3], np.float32)
    with T.no_grad():
        y = coarse_sr_forward(img(2, 16), p, cfg)
    np.testing.assert_array_equal(y.data, np.broadcast_to(np.array([0.1, 0.2, 0.3], np.float32)
                                                            .reshape(1, 3, 1, 1), y.shape))


def test_coarse_rejects_wrong_size():
    cfg = NetConfig(hr_size=32, **SMALL)
    with pytest.raises(ShapeError):
        coarse_sr_forward(img(1, 16), init_generator(cfg, 0), cfg)


def test_parsing_head_does_not_touch_landmarks_single_stack():
    cfg = NetConfig(hr_size=32, num_hourglass=1, hourglass_depth=2, **SMALL)
    p = init_generator(cfg, seed=3)
    y_c = img(2, 32)
    with T.no_grad():
        before = prior_net_forward(y_c, p, cfg, training=False).landmark_heatmaps.data.copy()
        p["prior.stack1.parsing_head.weight"].data[...] = 0
        p["prior.stack1.parsing_head.bias"].data[...] = 0
        after = prior_net_forward(y_c, p, cfg, training=False)
    assert np.array_equal(before, after.landmark_heatmaps.data)
    assert np.all(after.parsing_maps.data == 0.5)


def test_last_parsing_head_does_not_touch_landmarks_stacked():
    cfg = NetConfig(hr_size=32, num_hourglass=2, hourglass_depth=2, **SMALL)
    p = init_generator(cfg, seed=3)
    y_c = img(2, 32)
    with T.no_grad():
        before = prior_net_forward(y_c, p, cfg, training=False).landmark_heatmaps.data.copy()
        p["prior.stack2.parsing_head.weight"].data[...] = 0
        after = prior_net_forward(y_c, p, cfg, training=False).landmark_heatmaps.data
    assert np.array_equal(before, after)


@pytest.mark.parametrize("training", [False, True])
def test_gt_prior_substitution_matches_full(training):
    cfg = NetConfig(hr_size=32, hourglass_depth=2, **SMALL)
    p = init_generator(cfg, seed=5)
    x = img(2, 32)
    with T.no_grad():
        full = fsrnet_forward(x, p.copy(), cfg, training=training)
        sub = fsrnet_forward(x, p.copy(), cfg, mode="gt_prior", priors=full.prior.decoder_input(),
                             training=training)
    assert np.array_equal(full.fine.data, sub.fine.data)


def test_gt_prior_mode_needs_maps():
    cfg = NetConfig(hr_size=32, variant="gt_prior", **SMALL)
    with pytest.raises(ConfigError):
        fsrnet_forward(img(1, 32), init_generator(cfg, 0), cfg, mode="gt_prior")
    with pytest.raises(ConfigError):
        fsrnet_forward(img(1, 32), init_generator(cfg, 0), cfg, mode="full")


@pytest.mark.parametrize("kwargs", [dict(hr_size=60, scale_factor=8), dict(num_hourglass=3),
                                    dict(variant="nope"), dict(priors="eyes"),
                                    dict(hr_size=16, scale_factor=4, hourglass_depth=3)])
def test_config_rejects(kwargs):
    with pytest.raises(ConfigError):
        NetConfig(**kwargs)


def test_fingerprint_tracks_architecture():
    a, b = NetConfig(), NetConfig(base_channels=32)
    assert a.fingerprint() != b.fingerprint()
    assert a.fingerprint() == NetConfig.from_dict(a.to_dict()).fingerprint()
    assert a.fingerprint("generator") != a.fingerprint("discriminator")


def test_params_names_unique_and_state_checks():
    p = ModelParams("0" * 64)
    p.add("w", np.zeros(2, np.float32))
    with pytest.raises(KeyError):
        p.add("w", np.zeros(2, np.float32))
    with pytest.raises(ConfigError):
        p.load_state({"w": np.zeros(3, np.float32)})
    with pytest.raises(ConfigError):
        p.load_state({"v": np.zeros(2, np.float32)})


def test_phi_frozen_and_deterministic():
    cfg = NetConfig(hr_size=32, **SMALL)
    phi = init_phi(cfg)
    assert phi.frozen and phi.num_trainable() == 0
    x = img(1, 32)
    assert perceptual_extract(x, phi).data.tobytes() == perceptual_extract(x, init_phi(cfg)).data.tobytes()
    with pytest.raises(ConfigError):
        RMSprop(phi, 1e-3)


def test_perceptual_gradient_flows_to_input_only():
    cfg = NetConfig(hr_size=16, scale_factor=4, hourglass_depth=1, **SMALL)
    phi = init_phi(cfg)
    x = Tensor(np.random.default_rng(0).uniform(0, 1, (1, 3, 16, 16)).astype(np.float32), requires_grad=True)
    T.tsum(perceptual_extract(x, phi)).backward()
    assert np.any(x.grad != 0)
    assert all(t.grad is None for _, t in phi.items())
