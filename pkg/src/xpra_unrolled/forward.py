"""Method-of-moments solution of the 2D Lippmann-Schwinger equation and
synthetic RSS (phaseless) measurements.

Cells are replaced by disks of equal area (Richmond's rule); the coupling
between cells is the closed-form disk integral from :mod:`em`. The discrete
operator is block-Toeplitz and applied with zero-padded FFTs.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft
import scipy.linalg as sla
from scipy import special
from scipy.sparse.linalg import LinearOperator, bicgstab

from .em import disk_integral, equivalent_radius, hankel1, incident_field
from .scene import Grid, LinkTable, SceneConfig, enumerate_links, place_nodes


class SolverError(RuntimeError):
    def __init__(self, message: str, residual_history=()):
        super().__init__(message)
        self.residual_history = list(residual_history)


class DegenerateLinkError(ValueError):
    pass


class OracleError(RuntimeError):
    pass


TOLERANCE = 1e-8
MAX_ITER = 2000
DENSE_FALLBACK_CELLS = 48 * 48
SUPPORT_DIRECT_MAX = 6000


@dataclass
class SolveReport:
    method: str
    iterations: list[int] = field(default_factory=list)
    residuals: list[float] = field(default_factory=list)
    wall_time: float = 0.0


@dataclass
class MeasurementSet:
    delta_p: np.ndarray
    links: LinkTable
    noise_sigma_db: float = 0.0

    def __post_init__(self):
        self.delta_p = np.asarray(self.delta_p, dtype=np.float64)
        if self.delta_p.shape != (len(self.links),):
            raise ValueError("measurement length does not match the link table")
        if not np.all(np.isfinite(self.delta_p)):
            raise ValueError("non-finite measurement")


class GreenOperator:
    """Discrete volume-integral operator K on a grid: (K v)_m = sum_n K(m-n) v_n,
    with K(m-n) = k0^2 * integral of g over the equivalent disk of cell n."""

    def __init__(self, grid: Grid, k0: float):
        self.grid = grid
        self.k0 = k0
        self.radius = equivalent_radius(grid.cell_area)
        ny, nx = grid.ny, grid.nx
        py = np.arange(-(ny - 1), ny)[:, None] * grid.dy
        qx = np.arange(-(nx - 1), nx)[None, :] * grid.dx
        # offsets table indexed [dy + ny - 1, dx + nx - 1]
        self.offsets = disk_integral(k0, self.radius, np.hypot(py, qx))
        emb = np.zeros((2 * ny, 2 * nx), dtype=np.complex128)
        for p in range(-(ny - 1), ny):
            emb[p % (2 * ny), [q % (2 * nx) for q in range(-(nx - 1), nx)]] = self.offsets[p + ny - 1]
        self._kernel_fft = sfft.fft2(emb)

    def apply(self, v: np.ndarray) -> np.ndarray:
        """K applied to field(s) of shape (..., ny, nx)."""
        ny, nx = self.grid.ny, self.grid.nx
        v = np.asarray(v, dtype=np.complex128)
        pad = np.zeros(v.shape[:-2] + (2 * ny, 2 * nx), dtype=np.complex128)
        pad[..., :ny, :nx] = v
        out = sfft.ifft2(sfft.fft2(pad) * self._kernel_fft)
        return out[..., :ny, :nx]

    def block(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Dense sub-matrix K[rows, cols] for flat (raster) cell indices."""
        nx, ny = self.grid.nx, self.grid.ny
        ry, rx = np.divmod(rows, nx)
        cy, cx = np.divmod(cols, nx)
        return self.offsets[(ry[:, None] - cy[None, :]) + ny - 1, (rx[:, None] - cx[None, :]) + nx - 1]

    def dense(self) -> np.ndarray:
        idx = np.arange(self.grid.n)
        return self.block(idx, idx)


def _contrast(perm_map) -> np.ndarray:
    return np.asarray(perm_map, dtype=np.complex128) - 1.0


def _relative_residual(op: GreenOperator, chi, field, e_inc) -> np.ndarray:
    r = field - op.apply(chi * field) - e_inc
    axes = (-2, -1)
    return np.sqrt(np.sum(np.abs(r) ** 2, axis=axes) / np.sum(np.abs(e_inc) ** 2, axis=axes))


def solve_fields(config: SceneConfig, perm_map, tx_positions, method: str = "auto",
                 amplitude: complex = 1.0, op: GreenOperator | None = None):
    """Total field on the forward grid for each transmitter position.

    method: "support" (dense LU restricted to scatterer cells, exact for
    piecewise scenes), "bicgstab" (FFT-applied full-grid BiCGStab with a
    dense-LU fallback on small grids), "dense" (full-grid LU) or "auto".
    Returns (fields of shape (T, ny, nx), SolveReport).
    """
    grid = config.forward_grid
    op = op or GreenOperator(grid, config.k0)
    chi = _contrast(perm_map)
    if chi.shape != (grid.ny, grid.nx):
        raise ValueError("permittivity map does not match the forward grid")
    tx_positions = np.atleast_2d(np.asarray(tx_positions, dtype=np.float64))
    centers = grid.centers()
    e_inc = np.stack([incident_field(config.k0, t, centers, amplitude).reshape(grid.ny, grid.nx)
                      for t in tx_positions])
    support = np.flatnonzero(chi.ravel() != 0)
    if method == "auto":
        method = "support" if support.size <= SUPPORT_DIRECT_MAX else "bicgstab"
    t0 = time.perf_counter()
    report = SolveReport(method)
    if support.size == 0:
        fields = e_inc.copy()
        report.iterations = [0] * len(tx_positions)
    elif method == "support":
        chi_s = chi.ravel()[support]
        a = np.eye(support.size, dtype=np.complex128) - op.block(support, support) * chi_s[None, :]
        e_s = sla.lu_solve(sla.lu_factor(a), e_inc.reshape(len(tx_positions), -1)[:, support].T).T
        src = np.zeros((len(tx_positions), grid.n), dtype=np.complex128)
        src[:, support] = chi_s * e_s
        fields = e_inc + op.apply(src.reshape(-1, grid.ny, grid.nx))
        report.iterations = [1] * len(tx_positions)
    elif method == "dense":
        a = np.eye(grid.n, dtype=np.complex128) - op.dense() * chi.ravel()[None, :]
        sol = sla.lu_solve(sla.lu_factor(a), e_inc.reshape(len(tx_positions), -1).T).T
        fields = sol.reshape(e_inc.shape)
        report.iterations = [1] * len(tx_positions)
    elif method == "bicgstab":
        fields = np.empty_like(e_inc)
        shape = (grid.ny, grid.nx)

        def matvec(v):
            v = v.reshape(shape)
            return (v - op.apply(chi * v)).ravel()

        lin = LinearOperator((grid.n, grid.n), matvec=matvec, dtype=np.complex128)
        for i, b in enumerate(e_inc):
            history = []
            bnorm = np.linalg.norm(b)

            def track(xk, b=b, history=history, bnorm=bnorm):
                history.append(float(np.linalg.norm(b.ravel() - matvec(xk)) / bnorm))

            x, info = bicgstab(lin, b.ravel(), x0=np.zeros(grid.n, dtype=np.complex128),
                               rtol=TOLERANCE, atol=0.0, maxiter=MAX_ITER, callback=track)
            if info != 0:
                if grid.n <= DENSE_FALLBACK_CELLS:
                    a = np.eye(grid.n, dtype=np.complex128) - op.dense() * chi.ravel()[None, :]
                    x = sla.solve(a, b.ravel())
                    report.method = "bicgstab+dense"
                else:
                    raise SolverError(f"BiCGStab did not converge for transmitter {i}", history)
            fields[i] = x.reshape(shape)
            report.iterations.append(len(history))
    else:
        raise ValueError(f"unknown solver method {method!r}")
    res = _relative_residual(op, chi, fields, e_inc)
    report.residuals = [float(r) for r in res]
    report.wall_time = time.perf_counter() - t0
    bad = res > TOLERANCE
    if np.any(bad):
        raise SolverError(f"relative residual {res.max():.2e} exceeds {TOLERANCE:g}", report.residuals)
    return fields, report


def solve_total_field(config: SceneConfig, perm_map, tx_index: int, method: str = "auto",
                      amplitude: complex = 1.0):
    nodes = place_nodes(config)
    fields, report = solve_fields(config, perm_map, nodes[tx_index:tx_index + 1], method, amplitude)
    return fields[0], report


def scattered_field_at(config: SceneConfig, perm_map, tx_position, total_field, rx_positions,
                       amplitude: complex = 1.0) -> np.ndarray:
    """Total field at receiver positions from the solved interior field."""
    grid = config.forward_grid
    chi = _contrast(perm_map).ravel()
    rx_positions = np.atleast_2d(np.asarray(rx_positions, dtype=np.float64))
    e_inc = incident_field(config.k0, tx_position, rx_positions, amplitude)
    support = np.flatnonzero(chi != 0)
    if support.size == 0:
        return e_inc
    centers = grid.centers()[support]
    rho = np.linalg.norm(rx_positions[:, None, :] - centers[None, :, :], axis=-1)
    kern = disk_integral(config.k0, equivalent_radius(grid.cell_area), rho)
    src = chi[support] * np.asarray(total_field).ravel()[support]
    return e_inc + kern @ src


def rss_delta(total, incident):
    """Change in received power, 20 log10(|E| / |E^i|) in dB."""
    inc = np.abs(np.asarray(incident))
    if np.any(inc == 0):
        raise DegenerateLinkError("incident field vanishes on a link")
    return 20.0 * np.log10(np.abs(np.asarray(total)) / inc)


def simulate(config: SceneConfig, perm_map, noise_sigma_db: float = 0.0, rng=None,
             amplitude: complex = 1.0, method: str = "auto", return_report: bool = False):
    """Delta-P over every link; each transmitter is solved once."""
    nodes = place_nodes(config)
    links = enumerate_links(config.node_count)
    m = config.node_count
    txs = list(range(m - 1))
    fields, report = solve_fields(config, perm_map, nodes[txs], method, amplitude)
    delta = np.empty(len(links))
    pos = 0
    for t in txs:
        rx = nodes[t + 1:]
        total = scattered_field_at(config, perm_map, nodes[t], fields[t], rx, amplitude)
        inc = incident_field(config.k0, nodes[t], rx, amplitude)
        delta[pos:pos + len(rx)] = rss_delta(total, inc)
        pos += len(rx)
    if noise_sigma_db > 0:
        if rng is None:
            raise ValueError("noise requested without a random generator")
        delta = delta + noise_sigma_db * np.array([rng.normal() for _ in range(len(delta))])
    meas = MeasurementSet(delta, links, noise_sigma_db)
    return (meas, report) if return_report else meas


def cylinder_series(k0: float, radius: float, eps: complex, tx_position, eval_position,
                    center=(0.0, 0.0), order: int | None = None) -> complex:
    """Total field outside a homogeneous dielectric circular cylinder lit by a
    unit line source (eigenfunction expansion)."""
    eps = complex(eps)
    center = np.asarray(center, dtype=np.float64)
    dt = np.asarray(tx_position, dtype=np.float64) - center
    de = np.asarray(eval_position, dtype=np.float64) - center
    rho_t, phi_t = math.hypot(*dt), math.atan2(dt[1], dt[0])
    rho_e, phi_e = math.hypot(*de), math.atan2(de[1], de[0])
    if rho_e <= radius or rho_t <= radius:
        raise OracleError("source and observation must lie outside the cylinder")
    if order is None:
        order = math.ceil(k0 * radius * math.sqrt(abs(eps))) + 15
    n = np.arange(order + 1)
    k1 = k0 * np.sqrt(eps)
    x0, x1 = k0 * radius, k1 * radius
    num = k1 * special.jvp(n, x1) * special.jv(n, x0) - k0 * special.jvp(n, x0) * special.jv(n, x1)
    den = k0 * special.h1vp(n, x0) * special.jv(n, x1) - k1 * special.jvp(n, x1) * special.hankel1(n, x0)
    coef = num / den
    terms = coef * special.hankel1(n, k0 * rho_t) * special.hankel1(n, k0 * rho_e) * np.cos(n * (phi_e - phi_t))
    terms[1:] *= 2.0
    scat = 0.25j * np.sum(terms)
    if abs(scat) > 0 and np.max(np.abs(terms[-3:])) / 4 > 1e-10 * abs(scat):
        raise OracleError(f"series tail not converged at order {order}")
    inc = 0.25j * hankel1(0, k0 * math.hypot(*(de - dt)))
    return complex(inc + scat)
