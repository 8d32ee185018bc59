"""Compare the MoM simulator with the analytic cylinder series on every link.

    python3 scripts/cylinder_check.py --grid 96 --eps 2 0.2 --radius-wavelengths 0.5
"""

import argparse
import sys
import time

import numpy as np

from xpra_unrolled.em import incident_field
from xpra_unrolled.forward import cylinder_series, simulate
from xpra_unrolled.scene import ScattererSpec, SceneConfig, enumerate_links, place_nodes, rasterize_permittivity


def series_delta_p(cfg: SceneConfig, radius: float, eps: complex) -> np.ndarray:
    nodes = place_nodes(cfg)
    center = (cfg.doi_width / 2, cfg.doi_height / 2)
    out = []
    for a, b in enumerate_links(cfg.node_count).pairs:
        tot = cylinder_series(cfg.k0, radius, eps, nodes[a], nodes[b], center=center)
        inc = incident_field(cfg.k0, nodes[a], nodes[b:b + 1])[0]
        out.append(20 * np.log10(abs(tot) / abs(inc)))
    return np.array(out)


def compare(grid: int, eps: complex, radius_wl: float, nodes: int = 40):
    cfg = SceneConfig(node_count=nodes, forward_nx=grid, forward_ny=grid)
    radius = radius_wl * cfg.wavelength
    perm = rasterize_permittivity([ScattererSpec("circle", 0.0, 0.0, 2 * radius, eps)], cfg.forward_grid)
    t0 = time.perf_counter()
    mom = simulate(cfg, perm).delta_p
    secs = time.perf_counter() - t0
    ref = series_delta_p(cfg, radius, eps)
    cells = int(np.count_nonzero(perm != 1))
    area_ratio = cells * cfg.forward_grid.cell_area / (np.pi * radius**2)
    return float(np.linalg.norm(mom - ref) / np.linalg.norm(ref)), area_ratio, secs


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--grid", type=int, nargs="+", default=[96])
    p.add_argument("--eps", type=float, nargs=2, default=[2.0, 0.2])
    p.add_argument("--radius-wavelengths", type=float, default=0.5)
    a = p.parse_args(argv)
    eps = complex(*a.eps)
    print("grid,rms_rel_error,raster_area_ratio,seconds")
    for g in a.grid:
        err, ratio, secs = compare(g, eps, a.radius_wavelengths)
        print(f"{g},{err:.5f},{ratio:.5f},{secs:.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
