"""Linear phaseless (xPRA) model: complex kernel, its real-stacked form and
the first-difference operators used by the Tikhonov and TV priors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .em import C0, greens_2d, incident_field
from .scene import Grid, LinkTable, SceneConfig, enumerate_links, place_nodes


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class XpraOperator:
    """Complex kernel ``G`` (L x N) and the real operator ``A = [Re G, -Im G]`` (L x 2N)."""

    G: np.ndarray
    A: np.ndarray
    grid: Grid
    links: LinkTable

    @property
    def c0(self) -> float:
        return C0

    @property
    def n(self) -> int:
        return self.G.shape[1]

    @property
    def shape(self):
        return self.A.shape


def assemble_kernel(config: SceneConfig, amplitude: complex = 1.0) -> XpraOperator:
    grid = config.inverse_grid
    nodes = place_nodes(config)
    links = enumerate_links(config.node_count)
    centers = grid.centers()
    k0 = config.k0
    d = np.linalg.norm(nodes[:, None, :] - centers[None, :, :], axis=-1)
    if np.any(d == 0):
        raise AssemblyError("a node coincides with a cell centre")
    # node-to-cell Green's function doubles as the unit incident field
    g_nc = greens_2d(k0, nodes[:, None, :], centers[None, :, :])
    pairs = links.as_array()
    tx, rx = pairs[:, 0], pairs[:, 1]
    e_cells = amplitude * g_nc[tx]
    e_rx = incident_field(k0, nodes[tx], nodes[rx], amplitude)
    G = C0 * k0**2 * grid.cell_area * g_nc[rx] * e_cells / e_rx[:, None]
    A = np.hstack([G.real, -G.imag])
    return XpraOperator(G, A, grid, links)


def predict(op: XpraOperator, state) -> np.ndarray:
    x = np.asarray(state, dtype=np.float64)
    if x.shape[-1] != op.A.shape[1]:
        raise ValueError(f"state has {x.shape[-1]} entries, operator expects {op.A.shape[1]}")
    return x @ op.A.T


def adjoint_apply(op: XpraOperator, residual) -> np.ndarray:
    r = np.asarray(residual, dtype=np.float64)
    if r.shape[-1] != op.A.shape[0]:
        raise ValueError(f"residual has {r.shape[-1]} entries, operator expects {op.A.shape[0]}")
    return r @ op.A


@dataclass(frozen=True)
class DiffOperators:
    Dx: sp.csr_matrix
    Dy: sp.csr_matrix

    @property
    def laplacian(self) -> sp.csr_matrix:
        """Dx^T Dx + Dy^T Dy."""
        return (self.Dx.T @ self.Dx + self.Dy.T @ self.Dy).tocsr()

    @property
    def stacked(self) -> sp.csr_matrix:
        """[Dx; Dy], shape (4N, 2N)."""
        return sp.vstack([self.Dx, self.Dy]).tocsr()


def _forward_difference(n: int) -> sp.csr_matrix:
    # trailing row stays zero (replicate boundary)
    d = sp.lil_matrix((n, n))
    for i in range(n - 1):
        d[i, i] = -1.0
        d[i, i + 1] = 1.0
    return d.tocsr()


def build_diff_operators(nx: int, ny: int) -> DiffOperators:
    """Forward differences on (ny, nx) raster images, block-diagonal over the
    [chi_R; chi_I] stacking."""
    if nx < 2 or ny < 2:
        raise ValueError("grid must be at least 2x2")
    dx = sp.kron(sp.identity(ny), _forward_difference(nx))
    dy = sp.kron(_forward_difference(ny), sp.identity(nx))
    two = sp.identity(2)
    return DiffOperators(sp.kron(two, dx).tocsr(), sp.kron(two, dy).tocsr())


@dataclass
class ReconstructionState:
    chi_r: np.ndarray
    chi_i: np.ndarray

    @classmethod
    def from_stacked(cls, x) -> "ReconstructionState":
        x = np.asarray(x, dtype=np.float64)
        n = x.shape[-1] // 2
        return cls(x[..., :n].copy(), x[..., n:].copy())

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.chi_r, self.chi_i], axis=-1)
