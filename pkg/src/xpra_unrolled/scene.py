"""Imaging geometry, transceiver layout, scatterer rasterization and the
randomized two-object scene distribution used for training data.

Coordinates are DoI-corner coordinates (origin at the lower-left corner of
the DoI, metres) unless a name says otherwise. Scatterer centres in
:class:`ScattererSpec` are relative to the DoI centre.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import Xoshiro256


class InvalidConfigError(ValueError):
    pass


class ScattererOutsideError(ValueError):
    def __init__(self, index: int, message: str):
        super().__init__(f"scatterer {index}: {message}")
        self.index = index


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centred grid over the DoI; arrays are shaped (ny, nx)."""

    nx: int
    ny: int
    width: float
    height: float

    @property
    def n(self) -> int:
        return self.nx * self.ny

    @property
    def dx(self) -> float:
        return self.width / self.nx

    @property
    def dy(self) -> float:
        return self.height / self.ny

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    def centers(self) -> np.ndarray:
        """Cell centres as an (N, 2) array in raster order (row-major from the lower-left)."""
        xs = (np.arange(self.nx) + 0.5) * self.dx
        ys = (np.arange(self.ny) + 0.5) * self.dy
        X, Y = np.meshgrid(xs, ys)
        return np.column_stack([X.ravel(), Y.ravel()])


@dataclass(frozen=True)
class SceneConfig:
    doi_width: float = 1.5
    doi_height: float = 1.5
    wavelength: float = 0.125
    node_count: int = 40
    forward_nx: int = 96
    forward_ny: int = 96
    inverse_nx: int = 50
    inverse_ny: int = 50

    def __post_init__(self):
        if self.node_count < 3:
            raise InvalidConfigError("node_count must be >= 3")
        if min(self.forward_nx, self.forward_ny, self.inverse_nx, self.inverse_ny) < 2:
            raise InvalidConfigError("grid dimensions must be >= 2")
        if not self.wavelength > 0:
            raise InvalidConfigError("wavelength must be positive")
        if not (self.doi_width > 0 and self.doi_height > 0):
            raise InvalidConfigError("DoI dimensions must be positive")

    @property
    def k0(self) -> float:
        return 2.0 * math.pi / self.wavelength

    @property
    def n_inverse(self) -> int:
        return self.inverse_nx * self.inverse_ny

    @property
    def link_count(self) -> int:
        return self.node_count * (self.node_count - 1) // 2

    @property
    def forward_grid(self) -> Grid:
        return Grid(self.forward_nx, self.forward_ny, self.doi_width, self.doi_height)

    @property
    def inverse_grid(self) -> Grid:
        return Grid(self.inverse_nx, self.inverse_ny, self.doi_width, self.doi_height)

    def check_no_inverse_crime(self) -> None:
        if self.forward_nx == self.inverse_nx:
            raise InvalidConfigError("forward grid must differ from the inverse grid (nxf == nx)")


@dataclass(frozen=True)
class LinkTable:
    pairs: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.pairs)

    def as_array(self) -> np.ndarray:
        return np.array(self.pairs, dtype=np.int64).reshape(-1, 2)

    def index_of(self, a: int, b: int) -> int:
        tx, rx = min(a, b), max(a, b)
        m = self.node_count
        # lexicographic position of (tx, rx)
        return tx * m - tx * (tx + 1) // 2 + (rx - tx - 1)

    @property
    def node_count(self) -> int:
        return self.pairs[-1][1] + 1 if self.pairs else 0


def enumerate_links(m: int) -> LinkTable:
    if m < 2:
        raise InvalidConfigError("need at least two nodes for a link")
    return LinkTable(tuple((t, r) for t in range(m) for r in range(t + 1, m)))


def place_nodes(config: SceneConfig) -> np.ndarray:
    """Equally spaced nodes on the DoI perimeter, counter-clockwise from the
    lower-left corner. Returns an (M, 2) array."""
    w, h = config.doi_width, config.doi_height
    perimeter = 2.0 * (w + h)
    step = perimeter / config.node_count
    out = np.empty((config.node_count, 2))
    for i in range(config.node_count):
        s = i * step
        if s < w:
            out[i] = (s, 0.0)
        elif s < w + h:
            out[i] = (w, s - w)
        elif s < 2 * w + h:
            out[i] = (w - (s - w - h), h)
        else:
            out[i] = (0.0, h - (s - 2 * w - h))
    return out


SHAPES = ("circle", "square")


@dataclass(frozen=True)
class ScattererSpec:
    shape: str
    cx: float
    cy: float
    size: float
    eps: complex

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if not self.size > 0:
            raise ValueError("size must be positive")
        if self.eps.real < 1 or self.eps.imag < 0:
            raise ValueError("need eps_R >= 1 and eps_I >= 0")

    @property
    def target_value(self) -> float:
        """delta*sqrt(eps_R) = eps_I / sqrt(eps_R)."""
        return self.eps.imag / math.sqrt(self.eps.real)

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Membership of points given relative to the DoI centre."""
        half = 0.5 * self.size
        if self.shape == "circle":
            return (x - self.cx) ** 2 + (y - self.cy) ** 2 <= half * half
        return (np.abs(x - self.cx) <= half) & (np.abs(y - self.cy) <= half)

    def fits_inside(self, width: float, height: float) -> bool:
        half = 0.5 * self.size
        return abs(self.cx) + half <= 0.5 * width and abs(self.cy) + half <= 0.5 * height


def _check_inside(specs, width, height):
    for i, s in enumerate(specs):
        if not s.fits_inside(width, height):
            raise ScattererOutsideError(i, "extends outside the DoI")


def rasterize_permittivity(specs, grid: Grid) -> np.ndarray:
    """Complex permittivity per cell, shape (ny, nx); background 1+0j.
    A cell belongs to a scatterer iff its centre does; later specs win."""
    _check_inside(specs, grid.width, grid.height)
    c = grid.centers()
    x = c[:, 0] - 0.5 * grid.width
    y = c[:, 1] - 0.5 * grid.height
    eps = np.ones(grid.n, dtype=np.complex128)
    for s in specs:
        eps[s.contains(x, y)] = s.eps
    return eps.reshape(grid.ny, grid.nx)


def rasterize_ground_truth(specs, grid: Grid) -> np.ndarray:
    """delta*sqrt(eps_R) per cell, shape (ny, nx); background exactly 0."""
    eps = rasterize_permittivity(specs, grid)
    out = np.zeros(eps.shape)
    mask = eps != 1
    out[mask] = eps.imag[mask] / np.sqrt(eps.real[mask])
    return out


def rasterize(specs, grid: Grid, kind: str = "permittivity") -> np.ndarray:
    if kind == "permittivity":
        return rasterize_permittivity(specs, grid)
    if kind == "ground_truth":
        return rasterize_ground_truth(specs, grid)
    raise ValueError(f"unknown raster kind {kind!r}")


@dataclass(frozen=True)
class DistributionConfig:
    objects: int = 2
    cx_range: tuple[float, float] = (-0.6, 0.6)
    cy_range: tuple[float, float] = (0.15, 0.6)
    size_factors: tuple[float, ...] = (0.5, 1.0, 1.5, 2.0, 2.5)
    eps_real_values: tuple[float, ...] = (2, 4, 6, 8, 10) + tuple(range(50, 77, 2))
    loss_tangent: float = 0.1
    max_redraws: int = 1000


def sample_scene(rng: Xoshiro256, params: DistributionConfig, config: SceneConfig) -> list[ScattererSpec]:
    """Draw the objects of one training scene.

    Centres are redrawn (same shape, size and permittivity) until the object
    lies inside the DoI; the largest objects near the sampling-box corners
    would otherwise poke through the boundary.
    """
    specs = []
    for _ in range(params.objects):
        shape = SHAPES[rng.integer(2)]
        size = params.size_factors[rng.integer(len(params.size_factors))] * config.wavelength
        eps_r = float(params.eps_real_values[rng.integer(len(params.eps_real_values))])
        eps = complex(eps_r, params.loss_tangent * eps_r)
        for _ in range(params.max_redraws):
            cx = rng.uniform(*params.cx_range)
            cy = rng.uniform(*params.cy_range)
            spec = ScattererSpec(shape, cx, cy, size, eps)
            if spec.fits_inside(config.doi_width, config.doi_height):
                break
        else:
            raise InvalidConfigError("could not place an object inside the DoI")
        specs.append(spec)
    return specs


def split_counts(count: int, fractions=(1350, 150, 500)) -> tuple[int, ...]:
    """Largest-remainder apportionment of `count` over the given weights;
    equal remainders favour the later split (20 -> 13/2/5)."""
    if count < 1:
        raise InvalidConfigError("count must be >= 1")
    total = float(sum(fractions))
    quotas = [count * f / total for f in fractions]
    base = [int(math.floor(q)) for q in quotas]
    rest = count - sum(base)
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - base[i]), -i))
    for i in order[:rest]:
        base[i] += 1
    return tuple(base)


@dataclass
class Sample:
    measurements: np.ndarray
    ground_truth: np.ndarray
    scatterers: list[ScattererSpec]
    index: int
    seed: int


@dataclass
class Dataset:
    config: SceneConfig
    train: list[Sample] = field(default_factory=list)
    val: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)

    def split(self, name: str) -> list[Sample]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


class SampleGenerationError(RuntimeError):
    def __init__(self, index: int, cause: Exception):
        super().__init__(f"sample {index}: {cause}")
        self.index = index


def make_sample(config: SceneConfig, params: DistributionConfig, seed: int, index: int,
                noise_sigma_db: float = 0.0) -> Sample:
    from .forward import simulate

    rng = Xoshiro256.for_stream(seed, index)
    specs = sample_scene(rng, params, config)
    try:
        perm = rasterize_permittivity(specs, config.forward_grid)
        meas = simulate(config, perm, noise_sigma_db=noise_sigma_db, rng=rng)
    except Exception as exc:  # noqa: BLE001 - re-raised with the sample index
        raise SampleGenerationError(index, exc) from exc
    truth = rasterize_ground_truth(specs, config.inverse_grid)
    return Sample(meas.delta_p, truth, specs, index, seed)


def build_dataset(config: SceneConfig, count: int, seed: int, fractions=(1350, 150, 500),
                  params: DistributionConfig | None = None, noise_sigma_db: float = 0.0,
                  workers: int = 1, progress=None) -> Dataset:
    """Generate `count` samples and split them train/val/test in index order."""
    params = params or DistributionConfig()
    config.check_no_inverse_crime()
    sizes = split_counts(count, fractions)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as ex:
            futs = [ex.submit(make_sample, config, params, seed, i, noise_sigma_db) for i in range(count)]
            samples = [f.result() for f in futs]
    else:
        samples = []
        for i in range(count):
            samples.append(make_sample(config, params, seed, i, noise_sigma_db))
            if progress is not None:
                progress(i + 1, count)
    a, b = sizes[0], sizes[0] + sizes[1]
    return Dataset(config, samples[:a], samples[a:b], samples[b:])
