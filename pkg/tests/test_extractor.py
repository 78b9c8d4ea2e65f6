import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svuf.extractor import (
    BasicBlock,
    FeaturePyramid,
    Pooling,
    ResNet34,
    ResNetConfig,
    SpeakerNet,
    SpeakerNetConfig,
    classify_softmax_loss,
)
from svuf.tensor import Tensor, check_gradients, no_grad


def forward(module, *args):
    with no_grad():
        return module(*args)


def test_stage_shapes_2d_full_width(rng):
    net = ResNet34(ResNetConfig(variant="2d"), rng)
    shapes = [o.shape[1:] for o in forward(net, Tensor(rng.standard_normal((1, 64, 200))))]
    assert shapes == [(32, 64, 200), (64, 32, 100), (128, 16, 50), (256, 8, 25)]


def test_stage_shapes_1d_full_width(rng):
    net = ResNet34(ResNetConfig(variant="1d"), rng)
    shapes = [o.shape[1:] for o in forward(net, Tensor(rng.standard_normal((1, 64, 200))))]
    assert shapes[0] == (32, 200) and shapes[-1] == (256, 25)


def test_spec160_front_end_quarters_frequency(rng):
    # stride-2 conv1 along frequency plus a 2x2 max-pool with frequency stride 2
    cfg = ResNetConfig(width_multiplier=1 / 8, input_kind="spec160", blocks_per_stage=(1, 1, 1, 1))
    out = forward(ResNet34(cfg, rng), Tensor(rng.standard_normal((1, 160, 200))))
    assert out[0].shape[2:] == (40, 200)
    assert out[-1].shape[2:] == (5, 25)


@settings(max_examples=25)
@given(t=st.integers(8, 120), variant=st.sampled_from(["1d", "2d"]))
def test_time_scale_chain(t, variant):
    r = np.random.default_rng(t)
    cfg = ResNetConfig(variant=variant, width_multiplier=1 / 8, blocks_per_stage=(1, 1, 1, 1), feature_dim=8)
    net = ResNet34(cfg, r)
    fpm = FeaturePyramid(cfg.channels, 2 if variant == "2d" else 1, r)
    cs = forward(net, Tensor(r.standard_normal((2, 8, t))))
    ps = forward(fpm, cs)
    lengths = [c.shape[-1] for c in cs]
    assert lengths == [t, t // 2, t // 4, t // 8]
    assert [p.shape for p in ps] == [c.shape for c in cs]


def test_zeroed_residual_branch_is_identity(rng):
    block = BasicBlock(2, 4, 4, 1, rng)
    block.conv2.weight.data[:] = 0.0
    x = Tensor(np.abs(rng.standard_normal((2, 4, 5, 6))))  # block inputs are post-ReLU
    np.testing.assert_array_equal(forward(block, x).data, x.data)


def _fpm_inputs(rng, channels, sizes=(8, 10)):
    return [Tensor(rng.standard_normal((2, c, sizes[0] >> i, sizes[1] >> i))) for i, c in enumerate(channels)]


def test_fpm_channels_follow_bottom_up(rng):
    for wm in (1 / 8, 1 / 4):
        ch = ResNetConfig(width_multiplier=wm).channels
        assert ch == tuple(int(c * wm) for c in (32, 64, 128, 256))
        out = forward(FeaturePyramid(ch, 2, rng), _fpm_inputs(rng, ch))
        assert tuple(p.shape[1] for p in out) == ch


def test_p5_depends_only_on_c5(rng):
    ch = (4, 8, 16, 32)
    fpm = FeaturePyramid(ch, 2, rng)
    cs = _fpm_inputs(rng, ch)
    a = forward(fpm, cs)[-1].data
    cs2 = [Tensor(rng.standard_normal(c.shape)) for c in cs[:-1]] + [cs[-1]]
    np.testing.assert_array_equal(forward(fpm, cs2)[-1].data, a)


def test_zero_top_down_isolates_laterals(rng):
    ch = (4, 8, 16, 32)
    fpm = FeaturePyramid(ch, 2, rng)
    for up in fpm.upsample:
        up.weight.data[:] = 0.0
        up.bias.data[:] = 0.0
    cs = _fpm_inputs(rng, ch)
    base = [p.data for p in forward(fpm, cs)]
    for i in range(4):
        changed = list(cs)
        changed[i] = Tensor(rng.standard_normal(cs[i].shape))
        out = forward(fpm, changed)
        for j in range(4):
            same = np.array_equal(out[j].data, base[j])
            assert same == (j != i)


def test_odd_sizes_merge_by_cropping(rng):
    ch = (4, 8, 16, 32)
    cs = [Tensor(rng.standard_normal((1, c, 9 >> i, 13 >> i))) for i, c in enumerate(ch)]
    out = forward(FeaturePyramid(ch, 2, rng), cs)
    assert [p.shape for p in out] == [c.shape for c in cs]


# -- pooling ---------------------------------------------------------------------------


def test_gap_of_constant_map(rng):
    vec = rng.standard_normal(5)
    fmap = Tensor(np.broadcast_to(vec[None, :, None, None], (2, 5, 3, 4)).copy())
    np.testing.assert_allclose(forward(Pooling("gap", 5, rng), fmap).data, np.stack([vec, vec]), atol=1e-15)


def test_sap_with_zero_v_equals_gap(rng):
    pool = Pooling("sap", 6, rng)
    pool.v.data[:] = 0.0
    fmap = Tensor(rng.standard_normal((3, 6, 4, 5)))
    np.testing.assert_allclose(
        forward(pool, fmap).data, forward(Pooling("gap", 6, rng), fmap).data, atol=1e-14
    )


def test_sap_two_vectors_softmax_weights(rng):
    pool = Pooling("sap", 2, rng)
    pool.W.data[:] = np.eye(2)
    pool.b.data[:] = 0.0
    pool.v.data[:] = [2.0, 0.0]
    h1 = np.array([np.arctanh(0.5), 0.3])  # score 2 * 0.5 = 1
    h2 = np.array([0.0, -1.7])  # score 0
    fmap = Tensor(np.stack([h1, h2], axis=1)[None])  # (1, 2 channels, 2 frames)
    expected = 0.7310585786 * h1 + 0.2689414214 * h2
    np.testing.assert_allclose(forward(pool, fmap).data[0], expected, atol=1e-9)


def test_sp_std_half_of_identical_vectors(rng):
    vec = rng.standard_normal(4)
    fmap = Tensor(np.repeat(vec[None, :, None], 7, axis=2))
    out = forward(Pooling("sp", 4, rng), fmap).data[0]
    np.testing.assert_allclose(out[:4], vec, atol=1e-14)
    assert np.all(out[4:] <= 1e-5)


def test_asp_matches_weighted_moments(rng):
    pool = Pooling("asp", 3, rng)
    fmap = rng.standard_normal((1, 3, 11))
    h = fmap[0].T
    alpha = np.exp(np.tanh(h @ pool.W.data.T + pool.b.data) @ pool.v.data)
    alpha /= alpha.sum()
    mu = alpha @ h
    std = np.sqrt(alpha @ (h - mu) ** 2)
    np.testing.assert_allclose(forward(pool, Tensor(fmap)).data[0], np.concatenate([mu, std]), atol=1e-12)


@given(st.integers(0, 2**16))
def test_sap_attention_sums_to_one(seed):
    r = np.random.default_rng(seed)
    pool = Pooling("sap", 4, r)
    h = Tensor(r.standard_normal((2, 9, 4)) * 3)
    assert np.all(np.abs(pool.attention(h).data.sum(axis=1) - 1.0) < 1e-12)


def test_sap_gradient(rng):
    pool = Pooling("sap", 5, rng)
    fmap = Tensor(rng.standard_normal((2, 5, 3, 4)), requires_grad=True)
    proj = rng.standard_normal((2, 5))
    tensors = dict(pool.named_parameters(), fmap=fmap)
    assert check_gradients(lambda: (pool(fmap) * proj).sum(), tensors).max_rel_error < 1e-4


# -- embedding head -----------------------------------------------------------------------


def test_fc1_input_sizes():
    full = ResNetConfig(width_multiplier=1.0)
    assert SpeakerNetConfig(resnet=full, pooling="sap").fc1_input == 480
    assert SpeakerNetConfig(resnet=full, pooling="asp").fc1_input == 960
    assert SpeakerNetConfig(resnet=full, pooling="gap", stages=(5,), use_fpm=False).fc1_input == 256


def test_single_stage_gap_equals_plain_path(rng):
    cfg = SpeakerNetConfig(
        resnet=ResNetConfig(width_multiplier=1 / 8, blocks_per_stage=(1, 1, 1, 1)),
        use_fpm=False,
        stages=(5,),
        pooling="gap",
        n_speakers=4,
    )
    net = SpeakerNet(cfg, rng)
    x = Tensor(rng.standard_normal((2, 64, 24)))
    forward(net, x)  # fill BN running stats
    net.eval()
    np.testing.assert_array_equal(forward(net, x).data, forward(net.forward_single_scale, x).data)


def test_embeddings_deterministic(rng):
    cfg = SpeakerNetConfig(resnet=ResNetConfig(width_multiplier=1 / 8, blocks_per_stage=(1, 1, 1, 1)), embed_dim=16)
    net = SpeakerNet(cfg, rng)
    x = Tensor(rng.standard_normal((2, 64, 16)))
    forward(net, x)
    net.eval()
    z1, z2 = forward(net.embed, x).data, forward(net.embed, x).data
    assert z1.shape == (2, 16) and z1.tobytes() == z2.tobytes()


def test_softmax_loss_examples(rng):
    assert np.isclose(classify_softmax_loss(Tensor(np.zeros(10)), 3).item(), np.log(10), atol=1e-12)
    big = np.zeros(5)
    big[2] = 60.0
    assert classify_softmax_loss(Tensor(big), 2).item() < 1e-20
    logits = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    labels = np.array([1, 0, 3])
    classify_softmax_loss(logits, labels).backward()
    p = np.exp(logits.data) / np.exp(logits.data).sum(1, keepdims=True)
    np.testing.assert_allclose(logits.grad, (p - np.eye(4)[labels]) / 3, atol=1e-14)
    assert check_gradients(lambda: classify_softmax_loss(logits, labels), [logits]).max_rel_error < 1e-6
    with pytest.raises(ValueError):
        classify_softmax_loss(logits, np.array([0, 1, 9]), n_speakers=4)


def test_config_validation():
    with pytest.raises(ValueError):
        ResNetConfig(variant="3d")
    with pytest.raises(ValueError):
        SpeakerNetConfig(stages=(1, 2))
    with pytest.raises(ValueError):
        SpeakerNet(SpeakerNetConfig(resnet=ResNetConfig(width_multiplier=1 / 8), n_speakers=1), np.random.default_rng(0))
