import numpy as np
import pytest

from xpra_unrolled import autodiff as ad
from xpra_unrolled.prior import PriorConfig, PriorNet, weight_init


def _inputs(b, ny, nx, seed=0):
    rng = np.random.default_rng(seed)
    return ad.Tensor(rng.normal(size=(b, ny, nx))), ad.Tensor(rng.normal(size=(b, ny, nx)))


@pytest.mark.parametrize("size", [24, 48, 13, 10])
@pytest.mark.parametrize("train", [True, False])
def test_output_shape(size, train):
    net = weight_init(PriorNet(PriorConfig(levels=2, channels=4)), 1)
    zr, zi = _inputs(2, size, size + 2)
    assert net(zr, zi, train).shape == (2, size, size + 2)


def test_untrained_is_identity_on_zi():
    net = weight_init(PriorNet(PriorConfig(levels=2, channels=4)), 5)
    zr, zi = _inputs(3, 24, 24)
    assert np.all(net.net(zr, zi, train=True).value == 0)
    assert np.array_equal(net(zr, zi, train=False).value, zi.value)


def test_same_seed_same_parameters():
    a = weight_init(PriorNet(PriorConfig(channels=4)), 9)
    b = weight_init(PriorNet(PriorConfig(channels=4)), 9)
    c = weight_init(PriorNet(PriorConfig(channels=4)), 10)
    assert all(np.array_equal(p.value, q.value) for p, q in zip(a.parameters(), b.parameters()))
    assert not all(np.array_equal(p.value, q.value) for p, q in zip(a.parameters(), c.parameters()))


def test_kernel_variance():
    # pool each fan-in class across seeds until it has >= 1e4 draws
    by_fan = {}
    seed = 0
    while not by_fan or min(sum(k.size for k in ks) for ks in by_fan.values()) < 10_000:
        net = weight_init(PriorNet(PriorConfig(levels=2, channels=16)), seed)
        for p in net.parameters():
            if p.value.ndim == 4 and p is not net.out_w:
                by_fan.setdefault(p.shape[1] * 9, []).append(p.value.ravel())
        seed += 1
    for fan_in, ks in by_fan.items():
        assert np.concatenate(ks).var() == pytest.approx(2 / fan_in, rel=0.2)
    assert np.all(net.out_w.value == 0) and float(net.alpha.value) == 1.0


def test_skip_doubles_channels():
    net = PriorNet(PriorConfig(levels=3, channels=8))
    for _, _, blk_a, _ in net.dec:
        assert blk_a.w.shape[1] == 16


def test_running_stats_train_vs_eval():
    net = weight_init(PriorNet(PriorConfig(levels=1, channels=4)), 3)
    zr, zi = _inputs(4, 8, 8)
    before = {k: v.copy() for k, v in net.buffers().items()}
    net(zr, zi, train=False)
    assert all(np.array_equal(before[k], v) for k, v in net.buffers().items())
    net(zr, zi, train=True)
    assert any(not np.array_equal(before[k], v) for k, v in net.buffers().items())


def test_gradients_finite_and_nonzero():
    net = weight_init(PriorNet(PriorConfig(levels=2, channels=4)), 4)
    net.out_w.value = np.full(net.out_w.shape, 0.1)
    zr, zi = _inputs(2, 12, 12)
    with ad.Tape() as tape:
        loss = ad.mean_all(ad.square(net(zr, zi, train=True)))
        grads = tape.backward(loss, wrt=net.parameters())
    assert all(np.all(np.isfinite(g)) for g in grads)
    assert np.any(grads[0] != 0)


def test_config_validation():
    with pytest.raises(ValueError):
        PriorConfig(levels=0)
