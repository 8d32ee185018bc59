"""PSNR and split-level evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_PEAK = 0.8775  # 0.1 * sqrt(77), largest ground-truth value in the scene distribution


@dataclass(frozen=True)
class PsnrConfig:
    """``peak`` is a fixed value, or None for the per-split maximum of the truths."""

    peak: float | None = DEFAULT_PEAK

    def __post_init__(self):
        if self.peak is not None and not self.peak > 0:
            raise ValueError("PSNR peak must be positive")

    @classmethod
    def parse(cls, text: str) -> "PsnrConfig":
        return cls(None) if text == "max" else cls(float(text))


def psnr(estimate, truth, cfg: PsnrConfig = PsnrConfig(), peak: float | None = None) -> float:
    """10 log10(peak^2 / MSE); identical images give ``math.inf``."""
    a = np.asarray(estimate, dtype=np.float64)
    b = np.asarray(truth, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    p = peak if peak is not None else cfg.peak
    if p is None:
        p = float(np.max(b))
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(p * p / mse)


def format_db(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.4f}"


@dataclass
class SplitScore:
    indices: list[int]
    values: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))


def evaluate_split(reconstruct, samples, cfg: PsnrConfig = PsnrConfig()) -> SplitScore:
    """`reconstruct` maps an (n, L) measurement stack to (n, ny, nx) images."""
    samples = sorted(samples, key=lambda s: s.index)
    if not samples:
        raise ValueError("empty split")
    est = reconstruct(np.array([s.measurements for s in samples]))
    peak = cfg.peak if cfg.peak is not None else float(max(np.max(s.ground_truth) for s in samples))
    vals = [psnr(e, s.ground_truth, peak=peak) for e, s in zip(est, samples)]
    return SplitScore([s.index for s in samples], vals)
