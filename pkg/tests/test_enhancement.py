import numpy as np
import pytest

from svuf.enhancement import MaskNet, MaskNetConfig, mask_apply
from svuf.tensor import Tensor, check_gradients


def test_mask_range_and_shape(rng):
    net = MaskNet(MaskNetConfig(layers=2, channels=4), rng)
    for d in (64, 160):
        x = Tensor(rng.standard_normal((1, d, 200)) * 5)
        m = net(x).data
        assert m.shape == (1, d, 200)
        assert np.all((m > 0) & (m < 1))


def test_receptive_field_default():
    cfg = MaskNetConfig()
    assert cfg.layers == 10 and cfg.dilation == 2
    assert MaskNet(cfg, np.random.default_rng(0)).receptive_field() == 41


def test_receptive_field_empirical(rng):
    # perturbing one input frame moves exactly the outputs within +-layers*dilation frames
    net = MaskNet(MaskNetConfig(layers=3, channels=2), rng)
    net.train()
    net(Tensor(rng.standard_normal((2, 8, 40))))
    net.eval()
    x = rng.standard_normal((1, 8, 40))
    y = x.copy()
    y[0, 4, 20] += 1.0
    diff = np.abs(net(Tensor(y)).data - net(Tensor(x)).data).max(axis=1)[0]
    touched = np.flatnonzero(diff > 0)
    assert touched.min() == 20 - 6 and touched.max() == 20 + 6
    assert net.receptive_field() == 13


def test_mask_apply_cases(rng):
    x = rng.standard_normal((3, 5))
    np.testing.assert_array_equal(mask_apply(x, np.ones_like(x)), x)
    assert np.all(mask_apply(x, np.zeros_like(x)) == 0)
    m = rng.uniform(size=(3, 5))
    out = mask_apply(x, m)
    for i in range(3):
        for j in range(5):
            assert out[i, j] == x[i, j] * m[i, j]
    with pytest.raises(ValueError):
        mask_apply(x, m[:, :4])


def test_mask_gradient_is_x_times_upstream(rng):
    x = rng.standard_normal((2, 4, 6))
    m = Tensor(rng.uniform(size=x.shape), requires_grad=True)
    g = rng.standard_normal(x.shape)
    (mask_apply(Tensor(x), m) * g).sum().backward()
    np.testing.assert_allclose(m.grad, x * g, rtol=1e-14)
    report = check_gradients(lambda: (mask_apply(Tensor(x), m) * g).sum(), [m])
    assert report.max_rel_error < 1e-4


def test_forced_identity_hook(rng):
    net = MaskNet(MaskNetConfig(layers=2, channels=3), rng)
    net.force_identity = True
    x = Tensor(rng.standard_normal((2, 6, 10)))
    assert np.array_equal(net(x).data, np.ones((2, 6, 10)))
