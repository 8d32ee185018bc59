"""Convolutional proximal operator: a small U-Net with a residual gate.

The prox maps the two gradient-step images (Z_R, Z_I) to a chi_I image as
``alpha * Z_I + net(Z_R, Z_I)``. The last 1x1 convolution of ``net`` starts
at zero and ``alpha`` at one, so an untrained prox is exactly the identity
on Z_I and unrolled PGM starts as the classical iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .rng import Xoshiro256


@dataclass(frozen=True)
class PriorConfig:
    levels: int = 2
    channels: int = 16
    momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.levels < 1 or self.channels < 1:
            raise ValueError("levels and channels must be >= 1")


class _ConvBn:
    """3x3 conv (no bias; BN supplies the shift) + batch norm + ReLU."""

    def __init__(self, c_in: int, c_out: int, name: str):
        self.w = ad.Tensor(np.zeros((c_out, c_in, 3, 3)), requires_grad=True, name=f"{name}.w")
        self.gamma = ad.Tensor(np.ones(c_out), requires_grad=True, name=f"{name}.gamma")
        self.beta = ad.Tensor(np.zeros(c_out), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(c_out)
        self.running_var = np.ones(c_out)

    def params(self):
        return [self.w, self.gamma, self.beta]

    def __call__(self, x, train: bool, cfg: PriorConfig, update_running: bool):
        y = ad.conv2d(x, self.w)
        y = ad.batch_norm(y, self.gamma, self.beta, self.running_mean, self.running_var, train,
                          cfg.momentum, cfg.bn_eps, update_running)
        return ad.relu(y)


class PriorNet:
    def __init__(self, config: PriorConfig = PriorConfig(), name: str = "prior"):
        self.config = config
        self.name = name
        c = config.channels
        self.enc = []
        c_in = 2
        for i in range(config.levels):
            self.enc.append((_ConvBn(c_in, c, f"{name}.enc{i}a"), _ConvBn(c, c, f"{name}.enc{i}b")))
            c_in = c
        self.mid = (_ConvBn(c, c, f"{name}.mid_a"), _ConvBn(c, c, f"{name}.mid_b"))
        self.dec = []
        for i in range(config.levels):
            up_w = ad.Tensor(np.zeros((c, c, 3, 3)), requires_grad=True, name=f"{name}.dec{i}.up_w")
            up_b = ad.Tensor(np.zeros(c), requires_grad=True, name=f"{name}.dec{i}.up_b")
            self.dec.append((up_w, up_b, _ConvBn(2 * c, c, f"{name}.dec{i}a"), _ConvBn(c, c, f"{name}.dec{i}b")))
        self.out_w = ad.Tensor(np.zeros((1, c, 1, 1)), requires_grad=True, name=f"{name}.out_w")
        self.out_b = ad.Tensor(np.zeros(1), requires_grad=True, name=f"{name}.out_b")
        self.alpha = ad.Tensor(np.array(1.0), requires_grad=True, name=f"{name}.alpha")

    def _blocks(self):
        for pair in self.enc:
            yield from pair
        yield from self.mid
        for _, _, a, b in self.dec:
            yield a
            yield b

    def parameters(self) -> list[ad.Tensor]:
        out = []
        for pair in self.enc:
            for blk in pair:
                out += blk.params()
        for blk in self.mid:
            out += blk.params()
        for up_w, up_b, a, b in self.dec:
            out += [up_w, up_b] + a.params() + b.params()
        return out + [self.out_w, self.out_b, self.alpha]

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, blk in enumerate(self._blocks()):
            out[f"{self.name}.bn{i}.running_mean"] = blk.running_mean
            out[f"{self.name}.bn{i}.running_var"] = blk.running_var
        return out

    def net(self, zr, zi, train: bool = False, update_running: bool = True):
        """The correction term; zr, zi are (B, ny, nx) tensors."""
        cfg = self.config
        zr, zi = ad.as_tensor(zr), ad.as_tensor(zi)
        b, ny, nx = zr.shape
        x = ad.concat([ad.reshape(zr, (b, 1, ny, nx)), ad.reshape(zi, (b, 1, ny, nx))], axis=1)
        m = 2 ** cfg.levels
        py, px = -ny % m, -nx % m
        if py or px:
            x = ad.pad_edge(x, (py // 2, py - py // 2), (px // 2, px - px // 2))
        skips = []
        for blk_a, blk_b in self.enc:
            x = blk_b(blk_a(x, train, cfg, update_running), train, cfg, update_running)
            skips.append(x)
            x = ad.maxpool2(x)
        x = self.mid[1](self.mid[0](x, train, cfg, update_running), train, cfg, update_running)
        for (up_w, up_b, blk_a, blk_b), skip in zip(self.dec, reversed(skips)):
            x = ad.conv2d(ad.upsample2(x), up_w, up_b)
            x = ad.concat([x, skip], axis=1)
            x = blk_b(blk_a(x, train, cfg, update_running), train, cfg, update_running)
        x = ad.conv2d(x, self.out_w, self.out_b)
        if py or px:
            x = ad.crop(x, ny, nx, py // 2, px // 2)
        return ad.reshape(x, (b, ny, nx))

    def __call__(self, zr, zi, train: bool = False, update_running: bool = True):
        zi = ad.as_tensor(zi)
        return ad.add(ad.mul(self.alpha, zi), self.net(zr, zi, train, update_running))


def weight_init(net: PriorNet, seed: int) -> PriorNet:
    """He-normal 3x3 kernels (std sqrt(2 / fan_in)); BN scale 1 and shift 0;
    final 1x1 conv and all biases zero; residual gate 1."""
    rng = Xoshiro256(seed)
    for t in net.parameters():
        if t is net.alpha:
            t.value = np.array(1.0)
        elif t.name.endswith(".gamma"):
            t.value = np.ones_like(t.value)
        elif t.value.ndim == 4 and t is not net.out_w:
            fan_in = t.value.shape[1] * t.value.shape[2] * t.value.shape[3]
            t.value = rng.normal_array(t.value.shape, np.sqrt(2.0 / fan_in))
        else:
            t.value = np.zeros_like(t.value)
    for blk in net._blocks():
        blk.running_mean[:] = 0.0
        blk.running_var[:] = 1.0
    return net
