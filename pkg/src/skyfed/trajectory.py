"""Trajectory optimization for moving devices.

Three policies emit speed-feasible waypoint sequences:

* ``greedy_trajectory`` — per-round optimal velocity (a weighted average of
  device velocities and drone-device offsets) projected onto the speed ball;
  myopic but cheap.
* ``horizon_optimize`` — projected gradient descent on the full-horizon ATL
  with exact pairwise speed constraints and optional closed-loop (return to
  start) identification. The solver only ever accepts improving steps, so
  its result is never worse than its initialization.
* ``baseline_weighted_centroid`` / ``baseline_max_rate`` — reference
  policies that track the dataset-weighted centroid or climb the sum-rate
  field, ignoring the convergence bound.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import bound, channel
from .core import InfeasibleError, Scenario, Trajectory, device_positions
from .placement import optimize_placement, weighted_centroid


@dataclass(frozen=True)
class VelocityStep:
    """One greedy step: unconstrained optimum, projection, and its weights."""

    v_hat: np.ndarray
    weights: np.ndarray
    v_star: Optional[np.ndarray] = None
    degenerate: bool = False  # True when the weights summed to ~zero


def _geometry(drone_pos, devices, device_pos=None, device_vel=None):
    drone_pos = np.asarray(drone_pos, dtype=float).reshape(2)
    pos = (np.stack([d.position for d in devices]) if device_pos is None
           else np.asarray(device_pos, dtype=float))
    vel = (np.stack([d.velocity for d in devices]) if device_vel is None
           else np.asarray(device_vel, dtype=float))
    return drone_pos, pos, vel


def _loss_weights(devices, constants):
    """a_i = (D_i / D) (2 c1 / L - eta M s2_i / (2 L D)): sensitivity of the
    additive round terms to each device's error rate."""
    sizes = np.array([d.dataset_size for d in devices], dtype=float)
    s2 = np.array([d.noise_var for d in devices], dtype=float)
    total = sizes.sum()
    L = constants.lipschitz
    return (sizes / total) * (2.0 * constants.c1 / L
                              - constants.gradient_coupling * constants.feature_dim
                              * s2 / (2.0 * L * total))


def optimal_velocity(drone_pos, devices, radio, constants,
                     device_pos=None, device_vel=None) -> VelocityStep:
    """Unconstrained next-round drone velocity minimizing the round's error terms.

    The stationary point of the per-round model is a weighted average of
    (device velocity - drone-to-device offset) with weights combining data
    footprint, noise level, and channel slope. Devices with a pinned error
    rate contribute zero weight. When the weights sum to ~zero the step is
    degenerate and the drone holds position.
    """
    drone_pos, pos, vel = _geometry(drone_pos, devices, device_pos, device_vel)
    offsets = drone_pos - pos                           # (N, 2)
    d = np.sqrt((offsets ** 2).sum(axis=1) + radio.altitude_m ** 2)
    a = _loss_weights(devices, constants)
    w = np.empty(len(devices))
    for i, dev in enumerate(devices):
        if dev.per_override is not None:
            w[i] = 0.0
        else:
            w[i] = a[i] * channel.per_slope(d[i], dev, radio) / d[i]
    wsum = w.sum()
    if abs(wsum) < 1e-12:
        return VelocityStep(v_hat=np.zeros(2), weights=w, degenerate=True)
    v_hat = w @ (vel - offsets) / wsum
    return VelocityStep(v_hat=v_hat, weights=w)


def step_loss_model(drone_pos, devices, radio, constants, displacement,
                    device_pos=None, device_vel=None) -> float:
    """Next round's additive error terms as a function of drone displacement.

    Uses the per-round model underlying :func:`optimal_velocity`: the error
    rate responds linearly to the distance change, with the distance slope
    frozen at the current geometry. ``optimal_velocity`` returns the exact
    stationary point of this function.
    """
    drone_pos, pos, vel = _geometry(drone_pos, devices, device_pos, device_vel)
    v = np.asarray(displacement, dtype=float).reshape(2)
    offsets = drone_pos - pos
    d0 = np.sqrt((offsets ** 2).sum(axis=1) + radio.altitude_m ** 2)
    a = _loss_weights(devices, constants)
    u = offsets + v - vel                               # next-round ground offsets
    d_hat = d0 + ((u ** 2).sum(axis=1) - (offsets ** 2).sum(axis=1)) / (2.0 * d0)
    total = float(sum(dev.dataset_size for dev in devices))
    value = 0.0
    for i, dev in enumerate(devices):
        if dev.per_override is not None:
            e_i = dev.per_override
        else:
            e0 = float(channel.per_from_distance(d0[i], dev, radio))
            e_i = e0 + float(channel.per_slope(d0[i], dev, radio)) * (d_hat[i] - d0[i])
        value += a[i] * e_i
    const_k = (constants.gradient_coupling * constants.feature_dim
               / (2.0 * constants.lipschitz * total * total)) \
        * sum(dev.dataset_size * dev.noise_var for dev in devices)
    return value + const_k


def project_velocity(v_hat, v_max, mode="radial") -> np.ndarray:
    """Project a velocity onto the speed constraint.

    ``radial`` rescales onto the disk of radius v_max; ``componentwise``
    clamps each axis to +/- v_max / sqrt(2) (equal per-axis split).
    """
    v = np.asarray(v_hat, dtype=float).reshape(2)
    if mode == "radial":
        norm = float(np.linalg.norm(v))
        if norm <= v_max or norm == 0.0:
            return v.copy()
        return v * (v_max / norm)
    if mode == "componentwise":
        cap = v_max / np.sqrt(2.0)
        return np.clip(v, -cap, cap)
    raise ValueError(f"unknown projection mode '{mode}'")


def atl_of(scenario: Scenario, traj: Trajectory) -> bound.AtlResult:
    """ATL of a trajectory under the scenario's device motion."""
    traces = device_positions(scenario.devices, scenario.horizon)
    return bound.atl(traj, traces, scenario.devices, scenario.radio,
                     scenario.constants, scenario.horizon)


def greedy_trajectory(scenario: Scenario, mode="radial", start=None):
    """Greedy per-step policy: optimal velocity, projected, applied.

    Starts from the optimal stationary placement for the initial layout
    (unless ``start`` is given) and emits one waypoint per dwell period.
    Returns (trajectory, velocity steps).
    """
    if start is None:
        start = optimize_placement(scenario).position
    kappa = scenario.dwell
    n_steps = scenario.horizon // kappa
    traces = device_positions(scenario.devices, scenario.horizon)
    waypoints = [np.asarray(start, dtype=float).reshape(2)]
    steps = []
    for j in range(1, n_steps + 1):
        dev_pos = traces[(j - 1) * kappa]
        vs = optimal_velocity(waypoints[-1], scenario.devices, scenario.radio,
                              scenario.constants, device_pos=dev_pos)
        v_star = project_velocity(vs.v_hat, scenario.v_max, mode)
        steps.append(replace(vs, v_star=v_star))
        waypoints.append(waypoints[-1] + v_star)
    return Trajectory(np.stack(waypoints), dwell=kappa, closed=False), steps


def _project_speed(points, v_max, closed, fixed_first, max_sweeps=1000):
    """Project waypoints onto the pairwise speed-feasible set (in place copy).

    Cyclic projections over consecutive-pair ball constraints; with a closed
    loop the pair (last, first) wraps. The all-equal configuration is always
    feasible, so the sweeps converge; iteration stops once the largest
    violation is below 1e-12.
    """
    pts = np.array(points, dtype=float)
    n = len(pts)
    pairs = [(i, i + 1) for i in range(n - 1)]
    if closed:
        pairs.append((n - 1, 0))
    for _ in range(max_sweeps):
        worst = 0.0
        for a, b in pairs:
            delta = pts[b] - pts[a]
            dist = float(np.linalg.norm(delta))
            if dist <= v_max:
                continue
            worst = max(worst, dist - v_max)
            excess = (dist - v_max) / dist
            if fixed_first and a == 0:
                pts[b] -= delta * excess
            elif fixed_first and b == 0:
                pts[a] += delta * excess
            else:
                pts[a] += delta * (excess / 2.0)
                pts[b] -= delta * (excess / 2.0)
        if worst <= 1e-12:
            break
    return pts


def _expand(vars_, closed, fixed_start):
    if closed:
        return np.vstack([vars_, vars_[:1]])
    return np.vstack([fixed_start[None, :], vars_])


def horizon_optimize(scenario: Scenario, init: Optional[Trajectory] = None,
                     closed_loop=False, max_iters=200, step=None) -> Trajectory:
    """Full-horizon ATL minimizer (projected gradient descent).

    Decision variables are the waypoints; the speed constraint is enforced
    exactly by projection and the closed-loop constraint by identifying the
    first and last waypoints as one variable. Accepted iterates never
    increase the ATL and never violate the contraction requirement, so the
    returned trajectory is at least as good as the initialization.
    """
    kappa = scenario.dwell
    horizon = scenario.horizon
    n = horizon // kappa
    traces = device_positions(scenario.devices, horizon)
    devices, radio, constants = scenario.devices, scenario.radio, scenario.constants

    def evaluate(waypoints):
        traj = Trajectory(waypoints, dwell=kappa, closed=closed_loop)
        res = bound.atl(traj, traces, devices, radio, constants, horizon)
        return (res.value if res.all_contracting else np.inf), traj

    if init is None:
        if closed_loop:
            p = optimize_placement(scenario).position
            full = np.tile(p, (n + 1, 1))
        else:
            init, _ = greedy_trajectory(scenario)
            full = np.array(init.waypoints)
    else:
        full = np.array(init.waypoints, dtype=float)
        if len(full) != n + 1:
            raise ValueError(f"initial trajectory has {len(full)} waypoints, "
                             f"expected {n + 1}")
    if closed_loop:
        full[-1] = full[0]

    value, _ = evaluate(full)
    if not np.isfinite(value):
        p = weighted_centroid(devices)
        full = np.tile(p, (n + 1, 1))
        value, _ = evaluate(full)
        if not np.isfinite(value):
            raise InfeasibleError("no feasible initial trajectory: contraction "
                                  "fails along every candidate")

    fixed_start = full[0].copy()
    vars_ = full[:-1].copy() if closed_loop else full[1:].copy()

    def var_gradient(full_pts):
        traj = Trajectory(full_pts, dwell=kappa, closed=closed_loop)
        g = bound.atl_gradient(traj, traces, devices, radio, constants, horizon)
        if closed_loop:
            gv = g[:-1].copy()
            gv[0] += g[-1]
            return gv
        return g[1:]

    if step is None:
        g0 = var_gradient(_expand(vars_, closed_loop, fixed_start))
        gmax = float(np.abs(g0).max())
        step = (0.5 * max(scenario.v_max, 1e-3) / gmax) if gmax > 0 else 1.0

    best_val = value
    best_vars = vars_.copy()
    stall = 0
    for _ in range(max_iters):
        grad = var_gradient(_expand(best_vars, closed_loop, fixed_start))
        improved = False
        while step > 1e-14 * (1.0 + float(np.abs(best_vars).max())):
            cand = best_vars - step * grad
            if closed_loop:
                # Project in variable space so the wraparound pair is honored.
                cand_vars = _project_speed(cand, scenario.v_max, closed=True,
                                           fixed_first=False)
                cand_full = _expand(cand_vars, True, fixed_start)
            else:
                cand_full = _project_speed(_expand(cand, False, fixed_start),
                                           scenario.v_max, closed=False,
                                           fixed_first=True)
                cand_vars = cand_full[1:]
            val, _ = evaluate(cand_full)
            if val < best_val:
                best_val = val
                best_vars = cand_vars
                step *= 1.3
                improved = True
                break
            step *= 0.5
        if not improved:
            stall += 1
            if stall >= 2:
                break
            step = max(step, 1e-6)
        else:
            stall = 0
    final = _expand(best_vars, closed_loop, fixed_start)
    return Trajectory(final, dwell=kappa, closed=closed_loop)


# --------------------------------------------------------------------------
# Baselines
# --------------------------------------------------------------------------

def sum_rate(p, device_pos, devices, radio):
    """Aggregate achievable rate sum(log2(1 + gain * rho / (B N0)))."""
    p = np.asarray(p, dtype=float)
    delta = p[..., None, :] - np.asarray(device_pos, dtype=float)
    d = np.sqrt(delta[..., 0] ** 2 + delta[..., 1] ** 2 + radio.altitude_m ** 2)
    amp = np.array([channel.amplitude_gain(dev, radio) * dev.tx_power_mw
                    for dev in devices])
    snr = amp * d ** (-radio.pathloss_exp) / (radio.bandwidth_hz * radio.noise_psd)
    return np.log2(1.0 + snr).sum(axis=-1)


def _rate_gradient(p, device_pos, devices, radio):
    p = np.asarray(p, dtype=float).reshape(2)
    delta = p - np.asarray(device_pos, dtype=float)       # (N, 2)
    d2 = (delta ** 2).sum(axis=1) + radio.altitude_m ** 2
    d = np.sqrt(d2)
    amp = np.array([channel.amplitude_gain(dev, radio) * dev.tx_power_mw
                    for dev in devices])
    snr = amp * d ** (-radio.pathloss_exp) / (radio.bandwidth_hz * radio.noise_psd)
    coef = -radio.pathloss_exp * snr / ((1.0 + snr) * np.log(2.0) * d2)
    return coef @ delta


def _ascend_rate(p0, device_pos, devices, radio, max_iters=300):
    """Deterministic backtracking gradient ascent on the sum rate."""
    p = np.asarray(p0, dtype=float).reshape(2).copy()
    value = float(sum_rate(p, device_pos, devices, radio))
    step = 5.0
    for _ in range(max_iters):
        g = _rate_gradient(p, device_pos, devices, radio)
        gnorm = float(np.linalg.norm(g))
        if gnorm < 1e-12:
            break
        moved = False
        while step > 1e-9:
            cand = p + (step / gnorm) * g
            cand_val = float(sum_rate(cand, device_pos, devices, radio))
            if cand_val > value:
                p, value = cand, cand_val
                step = min(step * 1.3, 10.0)
                moved = True
                break
            step *= 0.5
        if not moved:
            break
    return p


def _clip_step(prev, target, v_max):
    delta = target - prev
    dist = float(np.linalg.norm(delta))
    if dist <= v_max or dist == 0.0:
        return target
    return prev + delta * (v_max / dist)


def baseline_weighted_centroid(scenario: Scenario) -> Trajectory:
    """Track the dataset-size weighted centroid of the devices, speed-limited."""
    kappa = scenario.dwell
    n = scenario.horizon // kappa
    traces = device_positions(scenario.devices, scenario.horizon)
    sizes = np.array([d.dataset_size for d in scenario.devices], dtype=float)
    waypoints = [sizes @ traces[0] / sizes.sum()]
    for j in range(1, n + 1):
        target = sizes @ traces[(j - 1) * kappa] / sizes.sum()
        waypoints.append(_clip_step(waypoints[-1], target, scenario.v_max))
    return Trajectory(np.stack(waypoints), dwell=kappa, closed=False)


def baseline_max_rate(scenario: Scenario) -> Trajectory:
    """Chase the maximum of the aggregate rate field, speed-limited."""
    kappa = scenario.dwell
    n = scenario.horizon // kappa
    traces = device_positions(scenario.devices, scenario.horizon)
    devices, radio = scenario.devices, scenario.radio
    start = _ascend_rate(traces[0].mean(axis=0), traces[0], devices, radio)
    waypoints = [start]
    for j in range(1, n + 1):
        dev_pos = traces[(j - 1) * kappa]
        target = _ascend_rate(waypoints[-1], dev_pos, devices, radio)
        waypoints.append(_clip_step(waypoints[-1], target, scenario.v_max))
    return Trajectory(np.stack(waypoints), dwell=kappa, closed=False)
