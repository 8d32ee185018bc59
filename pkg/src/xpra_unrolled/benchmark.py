"""Desk-scale training benchmark: four learned reconstructors against the
Tikhonov initialization on a small synthetic dataset."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import load_dataset, save_dataset
from .metrics import PsnrConfig, evaluate_split
from .prior import PriorConfig
from .scene import SceneConfig, build_dataset
from .train import TrainConfig, predict, train
from .unrolled import LinearSystem, build_model, tikhonov_image
from .xpra import assemble_kernel

DESK_SCENE = SceneConfig(node_count=20, forward_nx=96, forward_ny=96, inverse_nx=24, inverse_ny=24)
MODELS = ("tk-dprior", "dprior", "tv", "di")


@dataclass
class BenchmarkSettings:
    scene: SceneConfig = DESK_SCENE
    n_train: int = 200
    n_test: int = 50
    layers: int = 3
    prior: PriorConfig = PriorConfig(levels=2, channels=16)
    epochs: int = 10
    batch_size: int = 8
    data_seed: int = 0
    train_seed: int = 0
    models: tuple = MODELS


@dataclass
class BenchmarkResult:
    settings: BenchmarkSettings
    init_only_psnr: float
    test_psnr: dict = field(default_factory=dict)
    losses: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)

    def summary_lines(self) -> list[str]:
        out = [f"init-only test PSNR {self.init_only_psnr:.4f} dB"]
        for k in self.test_psnr:
            out.append(f"{k:10s} test PSNR {self.test_psnr[k]:.4f} dB  loss epoch1 {self.losses[k][0]:.6g} "
                       f"-> epoch{len(self.losses[k])} {self.losses[k][-1]:.6g}  ({self.seconds[k]:.0f} s)")
        return out


def desk_dataset(s: BenchmarkSettings, cache: Path | None = None, log=None):
    """Build (or reload from `cache`) the train/test dataset for `s`."""
    if cache is not None and (Path(cache) / "dataset.pdis").exists():
        ds = load_dataset(cache)
        if ds.config == s.scene and len(ds.train) == s.n_train and len(ds.test) == s.n_test:
            return ds
    t0 = time.perf_counter()
    ds = build_dataset(s.scene, s.n_train + s.n_test, s.data_seed, fractions=(s.n_train, 0, s.n_test))
    if log:
        log(f"generated {s.n_train + s.n_test} samples in {time.perf_counter() - t0:.0f} s")
    if cache is not None:
        save_dataset(ds, cache, s.data_seed)
    return ds


def run_desk_benchmark(s: BenchmarkSettings = BenchmarkSettings(), cache: Path | None = None,
                       log=None) -> BenchmarkResult:
    ds = desk_dataset(s, cache, log)
    sysm = LinearSystem.build(assemble_kernel(s.scene))
    x = np.array([t.measurements for t in ds.train])
    y = np.array([t.ground_truth for t in ds.train])
    psnr_cfg = PsnrConfig()
    lam = 1e-2 * sysm.mean_eig
    init = evaluate_split(lambda m: tikhonov_image(sysm, None, lam, lam, m), ds.test, psnr_cfg).mean
    result = BenchmarkResult(s, init)
    if log:
        log(f"init-only test PSNR {init:.4f} dB")
    for kind in s.models:
        model = build_model(kind, sysm, s.layers, s.prior, seed=s.train_seed)
        cfg = TrainConfig(epochs=s.epochs, batch_size=s.batch_size, seed=s.train_seed)
        t0 = time.perf_counter()
        tr = train(model, sysm, x, y, cfg,
                   log=(lambda e, l, k=kind: log(f"  {k} epoch {e} loss {l:.6g}")) if log else None)
        result.seconds[kind] = time.perf_counter() - t0
        result.losses[kind] = tr.losses
        result.test_psnr[kind] = evaluate_split(lambda m: predict(model, sysm, m), ds.test, psnr_cfg).mean
        if log:
            log(f"{kind} test PSNR {result.test_psnr[kind]:.4f} dB")
    return result
