"""Tiny exact solver for linear-fractional programs on a trust box.

The placement iteration linearizes its objective's numerator and denominator
around the current iterate and minimizes the resulting ratio over a small
axis-aligned box. The Charnes-Cooper substitution q = p * z, z = 1 / (d.p +
gamma) turns that into a 3-variable linear program with one equality
constraint, which is solved exactly by enumerating basic solutions: a vertex
lies on the equality plane plus two of the five inequality faces, so there
are at most C(5, 2) = 10 candidates.

A raw linearized ratio has no interior minimum, so the trust box is what
makes the subproblem well-posed; the strict ``z > 0`` constraint is realized
as ``z >= 1e-12``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .core import InfeasibleError, UnboundedError

Z_MIN = 1e-12


def box_corners(center, radius) -> np.ndarray:
    cx, cy = float(center[0]), float(center[1])
    r = float(radius)
    return np.array([[cx - r, cy - r], [cx - r, cy + r],
                     [cx + r, cy - r], [cx + r, cy + r]])


@dataclass(frozen=True)
class LinFrac:
    """Linear-fractional objective (num_c . p + num_beta) / (den_d . p + den_gamma)
    minimized over the box ||p - center||_inf <= radius."""

    num_c: np.ndarray
    num_beta: float
    den_d: np.ndarray
    den_gamma: float
    center: np.ndarray
    radius: float

    def __post_init__(self):
        for name in ("num_c", "den_d", "center"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(2).copy()
            v.flags.writeable = False
            object.__setattr__(self, name, v)
        if self.radius <= 0:
            raise ValueError("trust radius must be > 0")
        dens = box_corners(self.center, self.radius) @ self.den_d + self.den_gamma
        if dens.min() <= 0:
            raise UnboundedError("linearized denominator is not strictly positive "
                                 "on the trust box")

    def numerator(self, p):
        return np.asarray(p, dtype=float) @ self.num_c + self.num_beta

    def denominator(self, p):
        return np.asarray(p, dtype=float) @ self.den_d + self.den_gamma

    def ratio(self, p):
        return self.numerator(p) / self.denominator(p)


def solve_box_lp(objective, eq_vec, eq_rhs, center, radius, z_min=Z_MIN):
    """Minimize objective . (qx, qy, z) subject to eq_vec . (qx, qy, z) == eq_rhs,
    the box (in original p = q / z variables), and z >= z_min.

    Returns (q, z) at a vertex optimum. Ties across the whole feasible set
    (degenerate objective) resolve to the image of the box center; remaining
    vertex ties resolve lexicographically.

    Raises UnboundedError when the plane eq_vec[:2] . u + eq_vec[2] == 0
    crosses the box (a feasible recession ray exists) and InfeasibleError
    when no vertex satisfies all constraints.
    """
    objective = np.asarray(objective, dtype=float).reshape(3)
    eq_vec = np.asarray(eq_vec, dtype=float).reshape(3)
    center = np.asarray(center, dtype=float).reshape(2)
    lo = center - radius
    hi = center + radius

    # Recession rays have z-component > 0 and direction u in the box with
    # eq_vec[:2] . u + eq_vec[2] == 0; existence is a corner sign check.
    corner_vals = box_corners(center, radius) @ eq_vec[:2] + eq_vec[2]
    if corner_vals.min() <= 0.0 <= corner_vals.max():
        raise UnboundedError("equality-plane direction crosses the trust box")

    rows = np.array([
        [1.0, 0.0, -hi[0]],
        [-1.0, 0.0, lo[0]],
        [0.0, 1.0, -hi[1]],
        [0.0, -1.0, lo[1]],
        [0.0, 0.0, -1.0],
    ])
    rhs = np.array([0.0, 0.0, 0.0, 0.0, -z_min])

    vertices = []
    for i, j in itertools.combinations(range(5), 2):
        m = np.vstack([eq_vec, rows[i], rows[j]])
        if abs(np.linalg.det(m)) < 1e-14:
            continue
        v = np.linalg.solve(m, np.array([eq_rhs, rhs[i], rhs[j]]))
        if (rows @ v <= rhs + 1e-9).all():
            vertices.append(v)
    if not vertices:
        raise InfeasibleError("no feasible vertex for the box LP")

    vertices = np.array(vertices)
    values = vertices @ objective
    vmin, vmax = values.min(), values.max()
    if vmax - vmin <= 1e-12 * (1.0 + abs(vmin)):
        # Objective constant over the polytope: return the box center's image.
        zc = eq_rhs / (center @ eq_vec[:2] + eq_vec[2])
        if zc >= z_min:
            return center * zc, zc
    best = np.flatnonzero(values <= vmin + 1e-12 * (1.0 + abs(vmin)))
    order = np.lexsort((vertices[best, 2], vertices[best, 1], vertices[best, 0]))
    q_x, q_y, z = vertices[best[order[0]]]
    return np.array([q_x, q_y]), z


def charnes_cooper_min(frac: LinFrac) -> np.ndarray:
    """Minimizer of the linear-fractional ratio over the trust box."""
    objective = np.array([frac.num_c[0], frac.num_c[1], frac.num_beta])
    eq_vec = np.array([frac.den_d[0], frac.den_d[1], frac.den_gamma])
    q, z = solve_box_lp(objective, eq_vec, 1.0, frac.center, frac.radius)
    p = q / z
    # Guard against last-bit excursions outside the box.
    return np.clip(p, frac.center - frac.radius, frac.center + frac.radius)
