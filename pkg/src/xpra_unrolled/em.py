"""Special functions and free-space field quantities for the 2D TM problem.

Time convention is exp(-j w t), so a lossy medium has Im(eps) > 0 and the
outgoing wave is H0^(1). The Green's function of (lap + k^2) g = -delta is
g = (j/4) H0^(1)(k rho).
"""

from __future__ import annotations

import numpy as np
from scipy import special

C0 = 20.0 * np.log10(np.e)


class SingularityError(ValueError):
    pass


class BranchError(ValueError):
    pass


_BESSEL = {
    "J0": special.j0,
    "J1": special.j1,
    "Y0": special.y0,
    "Y1": special.y1,
}


def bessel(order: str, x):
    """Real Bessel functions J0, J1, Y0, Y1 of a real argument."""
    try:
        fn = _BESSEL[order]
    except KeyError:
        raise ValueError(f"unsupported Bessel order {order!r}") from None
    xa = np.asarray(x, dtype=np.float64)
    if order[0] == "Y" and np.any(xa <= 0):
        raise ValueError(f"{order} needs x > 0")
    if order[0] == "J" and np.any(xa < 0):
        raise ValueError(f"{order} needs x >= 0")
    out = fn(xa)
    return float(out) if np.ndim(out) == 0 else out


def hankel1(order: int, x):
    """H_n^(1)(x) = J_n(x) + j Y_n(x) for real x > 0."""
    if order == 0:
        return special.j0(x) + 1j * special.y0(x)
    if order == 1:
        return special.j1(x) + 1j * special.y1(x)
    return special.hankel1(order, x)


def _distance(r, r_prime):
    d = np.asarray(r, dtype=np.float64) - np.asarray(r_prime, dtype=np.float64)
    return np.sqrt(np.sum(d * d, axis=-1))


def greens_2d(k0: float, r, r_prime):
    rho = _distance(r, r_prime)
    if np.any(rho == 0):
        raise SingularityError("Green's function evaluated at coincident points")
    return 0.25j * hankel1(0, k0 * rho)


def incident_field(k0: float, tx_position, eval_points, amplitude: complex = 1.0):
    """Field of a line source of the given amplitude at `tx_position`."""
    pts = np.asarray(eval_points, dtype=np.float64)
    rho = _distance(pts, np.asarray(tx_position, dtype=np.float64))
    if np.any(rho == 0):
        raise SingularityError("evaluation point coincides with the source")
    return amplitude * 0.25j * hankel1(0, k0 * rho)


def xpra_contrast(eps: complex, theta_i: float, theta_s: float) -> complex:
    """Extended phaseless-Rytov contrast for one cell and one illumination."""
    eps = complex(eps)
    s2 = np.sin(theta_i) ** 2
    if eps.real <= s2:
        raise BranchError("eps_R must exceed sin^2(theta_i)")
    real = 2.0 * (np.sqrt(eps.real) * np.cos(theta_s) - 1.0)
    imag = eps.imag * np.cos(theta_i) / np.sqrt(eps.real - s2)
    return complex(real, imag)


def equivalent_radius(cell_area: float) -> float:
    return float(np.sqrt(cell_area / np.pi))


def disk_integral(k0: float, a: float, rho):
    """k0^2 times the integral of g over a disk of radius `a`, observed at
    distance `rho` from the disk centre.

    Outside (rho >= a) this is the J1-smoothed kernel; inside it follows from
    splitting the Graf expansion at rho; rho = 0 gives the self term
    (j pi/2) k a H1^(1)(k a) - 1.
    """
    rho = np.asarray(rho, dtype=np.float64)
    ka = k0 * a
    out = np.empty(rho.shape, dtype=np.complex128)
    outside = rho >= a
    if np.any(outside):
        out[outside] = (0.5j * np.pi * ka) * special.j1(ka) * hankel1(0, k0 * rho[outside])
    inside = ~outside
    if np.any(inside):
        out[inside] = (0.5j * np.pi * ka) * hankel1(1, ka) * special.j0(k0 * rho[inside]) - 1.0
    return out if out.ndim else complex(out)


def self_term(k0: float, a: float) -> complex:
    return complex((0.5j * np.pi) * k0 * a * hankel1(1, k0 * a) - 1.0)
