"""PDIS container, flat config files, dataset/checkpoint persistence and
image export.

PDIS layout (all integers little-endian)::

    b"PDIS"  u16 version  u32 record_count
    per record: u16 len + name (utf-8), u16 len + kind (utf-8),
                u8 ndim, ndim x u64 dims, u64 offset, u64 value_count
    payload: little-endian float64 values, records back to back

Kinds: ``f64`` (one value per element), ``c128`` (real, imag interleaved)
and ``u64`` (high and low 32-bit halves, each exactly representable as a
float64). A ``<file>.manifest`` sidecar holds UTF-8 ``key=value`` lines.
"""

from __future__ import annotations

import dataclasses
import os
import struct
from pathlib import Path

import numpy as np

from .scene import Dataset, DistributionConfig, Sample, SceneConfig, ScattererSpec, SHAPES

MAGIC = b"PDIS"
VERSION = 1


class ContainerError(ValueError):
    pass


class ConfigFileError(ValueError):
    pass


# ---------------------------------------------------------------- container

def _encode(arr) -> tuple[str, np.ndarray, tuple]:
    a = np.asarray(arr)
    if a.dtype.kind == "c":
        flat = np.empty(a.size * 2, dtype="<f8")
        flat[0::2] = a.real.ravel()
        flat[1::2] = a.imag.ravel()
        return "c128", flat, a.shape
    if a.dtype.kind == "u":
        u = a.astype(np.uint64).ravel()
        flat = np.empty(u.size * 2, dtype="<f8")
        flat[0::2] = (u >> np.uint64(32)).astype(np.float64)
        flat[1::2] = (u & np.uint64(0xFFFFFFFF)).astype(np.float64)
        return "u64", flat, a.shape
    return "f64", np.ascontiguousarray(a, dtype="<f8").ravel(), a.shape


def _decode(kind: str, flat: np.ndarray, shape) -> np.ndarray:
    if kind == "f64":
        return flat.astype(np.float64).reshape(shape)
    if kind == "c128":
        # reinterpret (re, im) pairs; arithmetic like re + 1j*im would turn inf into nan
        return np.ascontiguousarray(flat, dtype="<f8").view("<c16").astype(np.complex128).reshape(shape)
    if kind == "u64":
        hi = flat[0::2].astype(np.uint64)
        lo = flat[1::2].astype(np.uint64)
        return ((hi << np.uint64(32)) | lo).reshape(shape)
    raise ContainerError(f"unknown record kind {kind!r}")


def _sized(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def write_pdis(path, records: dict, manifest: dict | None = None) -> None:
    """Write `records` (name -> array) and an optional manifest sidecar."""
    path = Path(path)
    header = [MAGIC, struct.pack("<HI", VERSION, len(records))]
    payloads = []
    offset = 0
    for name, arr in records.items():
        kind, flat, shape = _encode(arr)
        header.append(_sized(name) + _sized(kind) + struct.pack("<B", len(shape)))
        header.append(struct.pack(f"<{len(shape)}Q", *shape))
        header.append(struct.pack("<QQ", offset, flat.size))
        payloads.append(flat.tobytes())
        offset += flat.nbytes
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(b"".join(header))
        fh.write(b"".join(payloads))
    if manifest is not None:
        write_manifest(path, manifest)


def read_pdis(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ContainerError(f"{path}: not a PDIS container")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    pos = 10
    entries = []

    def sized():
        nonlocal pos
        (n,) = struct.unpack_from("<H", data, pos)
        s = data[pos + 2:pos + 2 + n].decode("utf-8")
        pos += 2 + n
        return s

    for _ in range(count):
        name, kind = sized(), sized()
        (ndim,) = struct.unpack_from("<B", data, pos)
        shape = struct.unpack_from(f"<{ndim}Q", data, pos + 1)
        pos += 1 + 8 * ndim
        off, n = struct.unpack_from("<QQ", data, pos)
        pos += 16
        entries.append((name, kind, shape, off, n))
    base = pos
    records = {}
    end = 0
    for name, kind, shape, off, n in sorted(entries, key=lambda e: e[3]):
        if off < end:
            raise ContainerError(f"{path}: overlapping record {name!r}")
        expect = int(np.prod(shape, dtype=np.int64)) * (1 if kind == "f64" else 2)
        if expect != n:
            raise ContainerError(f"{path}: record {name!r} shape {shape} does not match {n} values")
        flat = np.frombuffer(data, dtype="<f8", count=n, offset=base + off)
        records[name] = _decode(kind, flat, shape)
        end = off + 8 * n
    if base + end != len(data):
        raise ContainerError(f"{path}: payload size mismatch")
    ordered = {e[0]: records[e[0]] for e in entries}
    mpath = Path(str(path) + ".manifest")
    return ordered, (read_manifest(mpath) if mpath.exists() else {})


def write_manifest(path, manifest: dict) -> None:
    lines = [f"{k}={v}" for k, v in manifest.items()]
    with open(str(path) + ".manifest", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k] = v
    return out


# ---------------------------------------------------------------- config files

SCENE_KEYS = {f.name: f.type for f in dataclasses.fields(SceneConfig)}
RUN_KEYS = {
    "noise_sigma_db": (float, 0.0),
    "model": (str, "tk-dprior"),
    "layers": (int, 3),
    "levels": (int, 2),
    "channels": (int, 16),
    "batch_size": (int, 8),
    "lr_reg": (float, 1e-2),
    "lr_other": (float, 1e-4),
    "psnr_peak": (float, 0.8775),
    "reproducible": (bool, True),
    "workers": (int, 1),
    "split_train": (int, 1350),
    "split_val": (int, 150),
    "split_test": (int, 500),
}


def _parse_value(key: str, raw: str, typ):
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigFileError(f"bad value for {key!r}: {raw!r}") from None


def parse_config_text(text: str) -> tuple[SceneConfig, dict]:
    """Flat ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    scene, run = {}, {k: d for k, (_, d) in RUN_KEYS.items()}
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"line {lineno}: expected key = value")
        key, _, raw = (s.strip() for s in line.partition("="))
        if key in seen:
            raise ConfigFileError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        if key in SCENE_KEYS:
            typ = SCENE_KEYS[key]
            scene[key] = _parse_value(key, raw, int if "int" in str(typ) else float)
        elif key in RUN_KEYS:
            run[key] = _parse_value(key, raw, RUN_KEYS[key][0])
        else:
            raise ConfigFileError(f"line {lineno}: unknown key {key!r}")
    return SceneConfig(**scene), run


def load_config(path) -> tuple[SceneConfig, dict]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def config_manifest(config: SceneConfig) -> dict:
    return {f"scene.{k}": repr(v) for k, v in dataclasses.asdict(config).items()}


def config_from_manifest(manifest: dict) -> SceneConfig:
    kw = {}
    for k, typ in SCENE_KEYS.items():
        raw = manifest.get(f"scene.{k}")
        if raw is None:
            raise ContainerError(f"manifest lacks scene.{k}")
        kw[k] = int(raw) if "int" in str(typ) else float(raw)
    return SceneConfig(**kw)


def parse_scene_text(text: str) -> list[ScattererSpec]:
    """Scene files: flat ``key = value`` with indexed keys ``shape.i``,
    ``cx.i``, ``cy.i``, ``size.i``, ``eps_real.i``, ``eps_imag.i``."""
    fields: dict[int, dict] = {}
    names = ("shape", "cx", "cy", "size", "eps_real", "eps_imag")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = (s.strip() for s in line.partition("="))
        base, dot, idx = key.partition(".")
        if not sep or not dot or base not in names or not idx.isdigit():
            raise ConfigFileError(f"line {lineno}: unknown scene key {key!r}")
        fields.setdefault(int(idx), {})[base] = raw
    specs = []
    for i in sorted(fields):
        f = fields[i]
        missing = [n for n in names if n not in f]
        if missing:
            raise ConfigFileError(f"object {i}: missing {missing}")
        try:
            specs.append(ScattererSpec(f["shape"], float(f["cx"]), float(f["cy"]), float(f["size"]),
                                       complex(float(f["eps_real"]), float(f["eps_imag"]))))
        except ValueError as exc:
            raise ConfigFileError(f"object {i}: {exc}") from None
    return specs


# ---------------------------------------------------------------- datasets

def _spec_rows(specs, width: int) -> np.ndarray:
    rows = np.full((width, 6), np.nan)
    for j, s in enumerate(specs):
        rows[j] = (SHAPES.index(s.shape), s.cx, s.cy, s.size, s.eps.real, s.eps.imag)
    return rows


def save_dataset(dataset: Dataset, directory, seed: int, extra: dict | None = None) -> Path:
    directory = Path(directory)
    records, manifest = {}, config_manifest(dataset.config)
    manifest["seed"] = str(seed)
    for name in ("train", "val", "test"):
        split = dataset.split(name)
        width = max([len(s.scatterers) for s in split] + [1])
        ny, nx = dataset.config.inverse_ny, dataset.config.inverse_nx
        records[f"{name}.measurements"] = np.array([s.measurements for s in split]).reshape(
            len(split), dataset.config.link_count)
        records[f"{name}.truth"] = np.array([s.ground_truth for s in split]).reshape(len(split), ny, nx)
        records[f"{name}.index"] = np.array([s.index for s in split], dtype=np.uint64)
        records[f"{name}.scatterers"] = np.array([_spec_rows(s.scatterers, width) for s in split]).reshape(len(split), width, 6)
        manifest[f"count.{name}"] = str(len(split))
    manifest.update(extra or {})
    path = directory / "dataset.pdis"
    write_pdis(path, records, manifest)
    return path


def load_dataset(directory) -> Dataset:
    path = Path(directory)
    if path.is_dir():
        path = path / "dataset.pdis"
    records, manifest = read_pdis(path)
    config = config_from_manifest(manifest)
    seed = int(manifest.get("seed", "0"))
    ds = Dataset(config)
    for name in ("train", "val", "test"):
        meas = records[f"{name}.measurements"]
        for k in range(meas.shape[0]):
            specs = [ScattererSpec(SHAPES[int(r[0])], r[1], r[2], r[3], complex(r[4], r[5]))
                     for r in records[f"{name}.scatterers"][k] if not np.isnan(r[0])]
            ds.split(name).append(Sample(meas[k], records[f"{name}.truth"][k], specs,
                                         int(records[f"{name}.index"][k]), seed))
    return ds


# ---------------------------------------------------------------- image export

def export_image(image, path, fmt: str = "pgm", peak: float = 0.8775) -> Path:
    """Write a grayscale PGM (P5, 16-bit, [0, peak] -> [0, 65535], values
    clipped) or a CSV of 17-significant-digit decimals, rows top to bottom in
    array order. The mapping is recorded in the manifest sidecar."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or not np.all(np.isfinite(img)):
        raise ValueError("need a finite 2D image")
    path = Path(path)
    if fmt == "pgm":
        if not peak > 0:
            raise ValueError("peak must be positive")
        q = np.rint(np.clip(img / peak, 0.0, 1.0) * 65535.0).astype(">u2")
        head = f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode("ascii")
        with open(path, "wb") as fh:
            fh.write(head + q.tobytes())
        write_manifest(path, {"format": "pgm", "peak": repr(float(peak)), "maxval": "65535",
                              "mapping": "linear [0, peak] -> [0, maxval], clipped"})
    elif fmt == "csv":
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for row in img:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
        write_manifest(path, {"format": "csv", "digits": "17", "order": "row-major"})
    else:
        raise ValueError(f"unknown image format {fmt!r}")
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2").reshape(h, w).astype(np.uint16)


def read_csv_image(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def writable(path) -> bool:
    parent = Path(path).parent
    return parent.exists() and os.access(parent, os.W_OK)
