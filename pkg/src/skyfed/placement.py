"""Stationary drone placement by iterated fractional programming.

The asymptotic loss of a stationary drone splits into a ratio f / g: the
numerator collects the additive per-round error terms and the denominator is
the contraction margin 1 - phi. Starting from the dataset-size weighted
centroid, each iteration linearizes f and g at the current point and solves
the resulting linear-fractional program exactly on a trust box, accepting
steps only when the exact ratio does not increase (halving the box
otherwise); this safeguard is what guarantees monotone descent when the
linearization is poor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import bound, channel
from .core import InfeasibleError, Scenario, UnboundedError
from .lp import LinFrac, charnes_cooper_min

R_MIN = 1e-3  # meters; smallest trust radius before giving up


@dataclass(frozen=True)
class PlacementResult:
    position: np.ndarray
    objective: float      # asymptotic loss (j + k) / (1 - phi) at the position
    iterations: int
    converged: bool
    trace: np.ndarray     # iterates including start and final, shape (k, 2)


def weighted_centroid(devices) -> np.ndarray:
    """Dataset-size weighted mean of device positions."""
    sizes = np.array([d.dataset_size for d in devices], dtype=float)
    pos = np.stack([d.position for d in devices])
    return sizes @ pos / sizes.sum()


def _pers(p, scenario: Scenario):
    pos = np.stack([d.position for d in scenario.devices])
    return channel.pers_at(p, pos, scenario.devices, scenario.radio)


def _terms(p, scenario: Scenario):
    sizes = np.array([d.dataset_size for d in scenario.devices], dtype=float)
    s2 = np.array([d.noise_var for d in scenario.devices], dtype=float)
    return bound.terms_arrays(_pers(p, scenario), sizes, s2, scenario.constants)


def numerator_f(p, scenario: Scenario):
    """Additive error terms j + k as a function of drone ground position."""
    _, j, k, _ = _terms(p, scenario)
    return j + k


def denominator_g(p, scenario: Scenario):
    """Contraction margin 1 - phi as a function of drone ground position."""
    phi, _, _, _ = _terms(p, scenario)
    return 1.0 - phi


def objective_ratio(p, scenario: Scenario):
    """Asymptotic loss (j + k) / (1 - phi); +inf where the margin is not positive."""
    phi, j, k, _ = _terms(p, scenario)
    g = 1.0 - phi
    return np.where(g > 0, (j + k) / np.where(g > 0, g, 1.0), np.inf)


def _gradients(p, scenario: Scenario):
    devices = scenario.devices
    c = scenario.constants
    sizes = np.array([d.dataset_size for d in devices], dtype=float)
    s2 = np.array([d.noise_var for d in devices], dtype=float)
    total = sizes.sum()
    pos = np.stack([d.position for d in devices])
    grads = channel.per_gradients_at(p, pos, devices, scenario.radio)  # (..., N, 2)
    a_f = (2.0 * c.c1 / (c.lipschitz * total)) * sizes \
        - (c.gradient_coupling * c.feature_dim
           / (2.0 * c.lipschitz * total * total)) * sizes * s2
    a_g = -(4.0 * c.strong_convexity * c.c2 / (c.lipschitz * total)) * sizes
    return np.einsum("n,...nc->...c", a_f, grads), np.einsum("n,...nc->...c", a_g, grads)


def grad_f(p, scenario: Scenario):
    """Gradient of the numerator w.r.t. drone (x, y)."""
    return _gradients(p, scenario)[0]


def grad_g(p, scenario: Scenario):
    """Gradient of the denominator w.r.t. drone (x, y)."""
    return _gradients(p, scenario)[1]


def _feasibility_scan(scenario: Scenario, resolution=21):
    xs = np.linspace(0.0, scenario.area_m, resolution)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    grid = np.stack([gx, gy], axis=-1)
    phi, j, k, _ = _terms(grid, scenario)
    g = 1.0 - phi
    feasible = g > 0
    if not feasible.any():
        raise InfeasibleError("contraction margin is nonpositive on the whole "
                              "feasibility scan grid")
    ratio = np.where(feasible, (j + k) / np.where(feasible, g, 1.0), np.inf)
    best = np.unravel_index(np.argmin(ratio), ratio.shape)
    return grid[best]


def optimize_placement(scenario: Scenario, delta=0.01, trust_radius=5.0,
                       max_iters=50) -> PlacementResult:
    """Optimal stationary drone position for the scenario's initial layout.

    Starts from the weighted centroid (falling back to the best point of a
    coarse feasibility scan when the centroid violates the contraction
    requirement) and iterates linearize / transform / solve until the step
    falls below ``delta`` meters.
    """
    p = weighted_centroid(scenario.devices)
    if denominator_g(p, scenario) <= 0:
        p = _feasibility_scan(scenario)
    trace = [np.array(p)]
    iterations = 0
    converged = False
    r_start = trust_radius
    for _ in range(max_iters):
        fp = float(numerator_f(p, scenario))
        gp = float(denominator_g(p, scenario))
        ratio_p = fp / gp
        c, d = _gradients(p, scenario)
        beta = fp - c @ p
        gamma = gp - d @ p

        def exact_ratio(q):
            gq = float(denominator_g(q, scenario))
            if gq <= 0:
                return np.inf
            return float(numerator_f(q, scenario)) / gq

        r = r_start
        cand = None
        while r >= R_MIN:
            try:
                frac = LinFrac(c, beta, d, gamma, p, r)
            except UnboundedError:
                r *= 0.5
                continue
            trial = charnes_cooper_min(frac)
            # The LP lands on a box corner; refine along the segment toward
            # it so the accepted step tracks the exact ratio's 1-D minimum
            # instead of merely not regressing.
            best_q, best_ratio = None, ratio_p + 1e-15 * (1.0 + abs(ratio_p))
            for t in (1.0, 0.75, 0.5, 0.25, 0.125):
                q = p + t * (trial - p)
                rq = exact_ratio(q)
                if rq < best_ratio:
                    best_q, best_ratio = q, rq
            if best_q is not None:
                # Polish within the iteration: one exact-ratio descent step
                # fixes the corner-quantized LP direction near the optimum.
                cf, cg = _gradients(best_q, scenario)
                gq = float(denominator_g(best_q, scenario))
                fq = float(numerator_f(best_q, scenario))
                grad_ratio = (cf * gq - fq * cg) / (gq * gq)
                gnorm = float(np.linalg.norm(grad_ratio))
                if gnorm > 0:
                    direction = -grad_ratio / gnorm
                    for t in (r, r / 4, r / 16, r / 64):
                        q2 = best_q + t * direction
                        rq2 = exact_ratio(q2)
                        if rq2 < best_ratio:
                            best_q, best_ratio = q2, rq2
                            break
                cand = best_q
                break
            r *= 0.5
        if cand is None:
            if r < R_MIN and gamma + d @ p <= 0:
                raise UnboundedError("linearized denominator nonpositive below "
                                     f"minimum trust radius {R_MIN} m")
            # No improving step at any radius: stationary within numerics.
            converged = True
            break
        step = float(np.linalg.norm(cand - p))
        p = cand
        trace.append(np.array(p))
        iterations += 1
        if step <= delta:
            converged = True
            break
        # Keep the trust box at the scale the exact ratio actually moved.
        r_start = min(trust_radius, max(4.0 * step, 8.0 * delta))
    return PlacementResult(position=np.array(p),
                           objective=float(objective_ratio(p, scenario)),
                           iterations=iterations, converged=converged,
                           trace=np.array(trace))


def grid_search_placement(scenario: Scenario, resolution=201):
    """Exhaustive argmin of the asymptotic loss over a square grid.

    Serves as the independent oracle for the iterative optimizer; cells with
    a nonpositive contraction margin are skipped.
    """
    xs = np.linspace(0.0, scenario.area_m, resolution)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    grid = np.stack([gx, gy], axis=-1)
    ratio = objective_ratio(grid, scenario)
    if not np.isfinite(ratio).any():
        raise InfeasibleError("every grid cell violates the contraction requirement")
    best = np.unravel_index(np.argmin(ratio), ratio.shape)
    return grid[best]
