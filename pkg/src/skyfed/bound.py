"""Per-round convergence-bound terms and the asymptotic trajectory loss (ATL).

Each aggregation round contributes a contraction factor ``phi`` on the
optimality gap plus additive error terms ``j`` (packet errors) and ``k``
(sensor noise):

    gap[t+1] <= phi[t] * gap[t] + j[t] + k[t]

with, for devices i holding D_i samples at error rate e[i] and noise
variance s2[i],

    phi = 1 - mu/L + (4 mu c2 / (L D)) * sum(D_i e_i)
    j   = (2 c1 / (L D)) * sum(D_i e_i)
    k   = (eta M / (2 L D^2)) * sum(D_i (1 - e_i) s2_i)

The ATL is the residual of unrolling this recursion from a zero gap over a
finite horizon; it is the surrogate objective all trajectory optimizers in
this package minimize.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import channel
from .core import LearningConstants, Trajectory


@dataclass(frozen=True)
class RoundTerms:
    phi: float
    j: float
    k: float
    contraction_ok: bool  # True iff (4 c2 / D) * sum(D_i e_i) < 1, i.e. phi < 1


@dataclass(frozen=True)
class AtlResult:
    value: float
    phi: np.ndarray              # (T,)
    jk: np.ndarray               # (T,) additive term j + k per round
    contraction_ok: np.ndarray   # (T,) bool

    @property
    def all_contracting(self) -> bool:
        return bool(self.contraction_ok.all())


def _device_arrays(devices):
    sizes = np.array([d.dataset_size for d in devices], dtype=float)
    s2 = np.array([d.noise_var for d in devices], dtype=float)
    return sizes, s2


def terms_arrays(pers, sizes, noise_vars, constants: LearningConstants):
    """Vectorized (phi, j, k, contraction_ok) for PER arrays of shape (..., N)."""
    pers = np.asarray(pers, dtype=float)
    total = sizes.sum()
    L = constants.lipschitz
    mu = constants.strong_convexity
    weighted_err = pers @ sizes                       # sum D_i e_i, shape (...,)
    noise_sum = (1.0 - pers) @ (sizes * noise_vars)   # sum D_i (1-e_i) s2_i
    phi = 1.0 - mu / L + (4.0 * mu * constants.c2 / (L * total)) * weighted_err
    j = (2.0 * constants.c1 / (L * total)) * weighted_err
    k = (constants.gradient_coupling * constants.feature_dim
         / (2.0 * L * total * total)) * noise_sum
    ok = (4.0 * constants.c2 / total) * weighted_err < 1.0
    return phi, j, k, ok


def round_terms(per, devices, constants: LearningConstants) -> RoundTerms:
    """Bound terms for one aggregation round from per-device error rates."""
    per = np.asarray(per, dtype=float)
    if per.shape != (len(devices),):
        raise ValueError(f"expected {len(devices)} error rates, got shape {per.shape}")
    if ((per < 0) | (per >= 1)).any():
        raise ValueError("error rates must lie in [0, 1)")
    sizes, s2 = _device_arrays(devices)
    phi, j, k, ok = terms_arrays(per, sizes, s2, constants)
    return RoundTerms(phi=float(phi), j=float(j), k=float(k), contraction_ok=bool(ok))


def gap_step(gap: float, terms: RoundTerms) -> float:
    """One application of the per-round recursion."""
    if gap < 0:
        raise ValueError("gap must be nonnegative")
    return terms.phi * gap + terms.j + terms.k


def stationary_gap(terms: RoundTerms, horizon: int, gap0: float) -> float:
    """Gap bound after ``horizon`` rounds with constant terms.

    Equals the ``horizon``-fold application of :func:`gap_step`; the
    ``phi == 1`` boundary degenerates to ``gap0 + horizon * (j + k)``.
    """
    phi, jk = terms.phi, terms.j + terms.k
    if phi == 1.0:
        return gap0 + horizon * jk
    geom = (1.0 - phi ** horizon) / (1.0 - phi)
    return phi ** horizon * gap0 + jk * geom


def _round_geometry(drone_traj: Trajectory, device_traces, horizon: int):
    drone_rounds = drone_traj.positions_at_rounds(horizon)
    traces = np.asarray(device_traces, dtype=float)
    if traces.ndim != 3 or traces.shape[2] != 2:
        raise ValueError("device_traces must have shape (horizon+1, N, 2)")
    if traces.shape[0] != horizon + 1:
        raise ValueError(f"device_traces cover {traces.shape[0] - 1} rounds, "
                         f"horizon is {horizon}")
    return drone_rounds, traces[1:]


def atl(drone_traj: Trajectory, device_traces, devices, radio,
        constants: LearningConstants, horizon: int) -> AtlResult:
    """Asymptotic trajectory loss of a drone trajectory against device motion.

    ``device_traces`` has shape (horizon+1, N, 2); row t holds the device
    positions at round t. The value is sum_t (j_t + k_t) * prod_{u>t} phi_u,
    evaluated by the equivalent forward recursion. Rounds with phi >= 1 are
    still evaluated but flagged; optimizers treat flagged configurations as
    infeasible.
    """
    drone_rounds, device_rounds = _round_geometry(drone_traj, device_traces, horizon)
    pers = channel.pers_at(drone_rounds, device_rounds, devices, radio)
    sizes, s2 = _device_arrays(devices)
    phi, j, k, ok = terms_arrays(pers, sizes, s2, constants)
    jk = j + k
    # suffix[t] = prod_{u > t} phi_u  (suffix[T-1] = 1)
    suffix = np.empty_like(phi)
    suffix[-1] = 1.0
    if len(phi) > 1:
        suffix[:-1] = np.cumprod(phi[::-1])[::-1][1:]
    return AtlResult(value=float(jk @ suffix), phi=phi, jk=jk, contraction_ok=ok)


def atl_gradient(drone_traj: Trajectory, device_traces, devices, radio,
                 constants: LearningConstants, horizon: int) -> np.ndarray:
    """Analytic gradient of the ATL w.r.t. every waypoint, shape (n+1, 2).

    Chains the PER gradients through the additive terms and the phi product.
    Waypoint 0 (the start marker) is used by no round, so its entry is zero;
    closed-loop identification of first and last waypoints is the caller's
    concern.
    """
    drone_rounds, device_rounds = _round_geometry(drone_traj, device_traces, horizon)
    pers = channel.pers_at(drone_rounds, device_rounds, devices, radio)
    grads = channel.per_gradients_at(drone_rounds, device_rounds, devices, radio)
    sizes, s2 = _device_arrays(devices)
    phi, j, k, _ = terms_arrays(pers, sizes, s2, constants)
    jk = j + k

    total = sizes.sum()
    L = constants.lipschitz
    a_jk = (2.0 * constants.c1 / (L * total)) * sizes \
        - (constants.gradient_coupling * constants.feature_dim
           / (2.0 * L * total * total)) * sizes * s2
    a_phi = (4.0 * constants.strong_convexity * constants.c2 / (L * total)) * sizes

    d_jk = np.einsum("n,tnc->tc", a_jk, grads)    # (T, 2) gradient of j_t + k_t
    d_phi = np.einsum("n,tnc->tc", a_phi, grads)  # (T, 2) gradient of phi_t

    suffix = np.empty_like(phi)
    suffix[-1] = 1.0
    if len(phi) > 1:
        suffix[:-1] = np.cumprod(phi[::-1])[::-1][1:]
    # prefix[t] = value of the recursion just before round t (gap0 = 0)
    prefix = np.empty_like(phi)
    acc = 0.0
    for t in range(len(phi)):
        prefix[t] = acc
        acc = phi[t] * acc + jk[t]

    round_grad = suffix[:, None] * (d_jk + prefix[:, None] * d_phi)  # (T, 2)
    out = np.zeros((len(drone_traj.waypoints), 2))
    idx = np.arange(horizon) // drone_traj.dwell + 1
    np.add.at(out, idx, round_grad)
    return out
