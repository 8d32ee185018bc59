"""Adam with two learning-rate groups and the mini-batch training loop."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .rng import Xoshiro256
from .unrolled import LinearSystem

CLAMP_FLOOR = 1e-12


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, diagnostics: list):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr_reg: float = 1e-2
    lr_other: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0


@dataclass
class OptimizerState:
    """Adam moments keyed by parameter name."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


class Adam:
    def __init__(self, groups: list[tuple[list[ad.Tensor], float]], beta1=0.9, beta2=0.999, eps=1e-8,
                 clamped: list[ad.Tensor] = ()):
        self.groups = groups
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clamped = list(clamped)
        self.state = OptimizerState()
        for params, _ in groups:
            for p in params:
                self.state.m[p.name] = np.zeros_like(p.value)
                self.state.v[p.name] = np.zeros_like(p.value)

    def step(self) -> None:
        st = self.state
        st.step += 1
        c1 = 1.0 - self.beta1 ** st.step
        c2 = 1.0 - self.beta2 ** st.step
        for params, lr in self.groups:
            for p in params:
                g = p.grad if p.grad is not None else np.zeros_like(p.value)
                m = st.m[p.name] = self.beta1 * st.m[p.name] + (1.0 - self.beta1) * g
                v = st.v[p.name] = self.beta2 * st.v[p.name] + (1.0 - self.beta2) * g * g
                if lr:
                    p.value = p.value - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        for p in self.clamped:
            p.value = np.maximum(p.value, CLAMP_FLOOR)

    def zero_grad(self) -> None:
        for params, _ in self.groups:
            for p in params:
                p.grad = None


def make_optimizer(model, cfg: TrainConfig) -> Adam:
    return Adam([(model.reg_params(), cfg.lr_reg), (model.other_params(), cfg.lr_other)],
                cfg.beta1, cfg.beta2, cfg.eps, model.clamped())


def batch_loss(model, sysm: LinearSystem, dp: np.ndarray, truth: np.ndarray, train: bool = True):
    """Forward + backward of the MSE loss on one batch; returns the loss value."""
    with ad.Tape() as tape:
        out = model.forward(sysm, ad.Tensor(dp), train=train)
        loss = ad.mse_loss(out, truth)
        tape.backward(loss)
    return float(loss.value)


@dataclass
class TrainResult:
    losses: list[float]
    batch_losses: list[float]
    optimizer: Adam
    rng_state: tuple
    wall_time: float


def train(model, sysm: LinearSystem, measurements: np.ndarray, truths: np.ndarray,
          cfg: TrainConfig = TrainConfig(), optimizer: Adam | None = None, start_epoch: int = 0,
          rng: Xoshiro256 | None = None, log=None, checkpoint=None) -> TrainResult:
    """Mini-batch Adam on the MSE between model output and ground-truth images.

    The per-epoch loss is the sample-weighted mean of the batch losses seen
    during that epoch. `checkpoint(epoch, model, optimizer, rng, losses)` is
    called after each epoch when given.
    """
    x = np.asarray(measurements, dtype=np.float64)
    y = np.asarray(truths, dtype=np.float64)
    if x.shape[0] != y.shape[0] or x.shape[0] == 0:
        raise ValueError("need a non-empty training set with matching measurements and truths")
    opt = optimizer or make_optimizer(model, cfg)
    rng = rng or Xoshiro256(cfg.seed)
    losses, batch_losses = [], []
    t0 = time.perf_counter()
    for epoch in range(start_epoch, cfg.epochs):
        order = rng.permutation(x.shape[0])
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            opt.zero_grad()
            loss = batch_loss(model, sysm, x[idx], y[idx], train=True)
            if not np.isfinite(loss):
                trace = []
                model.forward(sysm, ad.Tensor(x[idx]), train=False, trace=trace)
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch + 1}, batch starting {s}; activation norms {trace}", trace)
            opt.step()
            batch_losses.append(loss)
            total += loss * len(idx)
        losses.append(total / x.shape[0])
        if log is not None:
            log(epoch + 1, losses[-1])
        if checkpoint is not None:
            checkpoint(epoch + 1, model, opt, rng, losses)
    return TrainResult(losses, batch_losses, opt, rng.get_state(), time.perf_counter() - t0)


def predict(model, sysm: LinearSystem, measurements: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode reconstructions for a stack of measurement rows."""
    x = np.atleast_2d(np.asarray(measurements, dtype=np.float64))
    outs = [model.forward(sysm, ad.Tensor(x[s:s + batch_size]), train=False).value
            for s in range(0, x.shape[0], batch_size)]
    return np.concatenate(outs, axis=0)
