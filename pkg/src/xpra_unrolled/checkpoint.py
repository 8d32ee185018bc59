"""Model checkpoints in the PDIS container."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .io import ContainerError, config_from_manifest, config_manifest, read_pdis, write_pdis
from .prior import PriorConfig
from .rng import Xoshiro256
from .scene import SceneConfig
from .train import Adam
from .unrolled import LinearSystem, build_model, model_parameters
from .xpra import assemble_kernel


def save_checkpoint(path, model, config: SceneConfig, optimizer: Adam | None = None, epoch: int = 0,
                    rng: Xoshiro256 | None = None, losses=(), extra: dict | None = None) -> Path:
    path = Path(path)
    records = {}
    for p in model_parameters(model):
        records[f"param.{p.name}"] = p.value
    for name, buf in model.buffers().items():
        records[f"buffer.{name}"] = buf
    if hasattr(model, "eta_scale"):
        records["eta_scale"] = np.array(model.eta_scale)
    if optimizer is not None:
        for name in optimizer.state.m:
            records[f"adam.m.{name}"] = optimizer.state.m[name]
            records[f"adam.v.{name}"] = optimizer.state.v[name]
        records["adam.step"] = np.array(optimizer.state.step, dtype=np.uint64)
    records["epoch"] = np.array(epoch, dtype=np.uint64)
    if rng is not None:
        records["rng_state"] = np.array(rng.get_state(), dtype=np.uint64)
    records["loss_history"] = np.asarray(losses, dtype=np.float64)
    manifest = {"format": "checkpoint", "model": model.kind, "layers": str(model.layers)}
    pc = getattr(model, "prior_config", None)
    if pc is not None:
        manifest.update(levels=str(pc.levels), channels=str(pc.channels))
    manifest.update(config_manifest(config))
    manifest.update(extra or {})
    write_pdis(path, records, manifest)
    with open(str(path) + ".loss.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,loss\n")
        for i, v in enumerate(losses, 1):
            fh.write(f"{i},{v:.17g}\n")
    return path


def load_checkpoint(path, sysm: LinearSystem | None = None):
    """Returns (model, LinearSystem, SceneConfig, records, manifest)."""
    records, manifest = read_pdis(path)
    if manifest.get("format") != "checkpoint":
        raise ContainerError(f"{path}: not a model checkpoint")
    config = config_from_manifest(manifest)
    if sysm is None:
        sysm = LinearSystem.build(assemble_kernel(config))
    pc = PriorConfig(int(manifest.get("levels", 2)), int(manifest.get("channels", 16)))
    model = build_model(manifest["model"], sysm, int(manifest["layers"]), pc)
    for p in model_parameters(model):
        key = f"param.{p.name}"
        if key not in records:
            raise ContainerError(f"{path}: missing {key}")
        p.value = np.array(records[key], dtype=np.float64).reshape(p.value.shape)
    for name, buf in model.buffers().items():
        buf[...] = records[f"buffer.{name}"]
    if "eta_scale" in records:
        model.eta_scale = float(records["eta_scale"])
    return model, sysm, config, records, manifest


def restore_optimizer(optimizer: Adam, records: dict) -> None:
    for name in optimizer.state.m:
        optimizer.state.m[name] = np.array(records[f"adam.m.{name}"])
        optimizer.state.v[name] = np.array(records[f"adam.v.{name}"])
    optimizer.state.step = int(records["adam.step"])
