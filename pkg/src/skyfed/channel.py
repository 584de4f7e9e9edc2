"""Air-to-ground channel: LoS probability, mean gain, packet error rate.

All functions are pure and broadcast over leading axes of the drone
position, so a grid of candidate positions evaluates in one call. The
default model assumes a line-of-sight link (valid below roughly 100 m
altitude); the full LoS/NLoS mixture sits behind ``assume_los=False``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DeviceState, RadioEnvironment


@dataclass(frozen=True)
class LinkState:
    """Snapshot of one drone-device link."""

    distance: float     # 3-D separation, meters
    mean_gain: float    # linear power gain
    per: float          # packet error rate in [0, 1)


def los_probability(drone_pos, device_pos, los_a, los_b, approx=False):
    """Probability of a line-of-sight link from the elevation angle.

    Positions are 3-vectors (or arrays broadcasting to them). With
    ``approx=True`` returns 1.0, the moderate-altitude approximation used by
    the rest of the model.
    """
    drone_pos = np.asarray(drone_pos, dtype=float)
    device_pos = np.asarray(device_pos, dtype=float)
    if approx:
        return np.ones(np.broadcast_shapes(drone_pos.shape[:-1], device_pos.shape[:-1]))[()]
    delta = drone_pos - device_pos
    ground = np.hypot(delta[..., 0], delta[..., 1])
    elev_deg = np.degrees(np.arctan2(delta[..., 2], ground))
    return 1.0 / (1.0 + los_a * np.exp(-los_b * (elev_deg - los_a)))


def amplitude_gain(device: DeviceState, radio: RadioEnvironment) -> float:
    """Distance-independent gain factor: (s / 4 pi f_c)^2 * extra_loss_los * nu."""
    wave = radio.light_speed / (4.0 * np.pi * radio.carrier_hz)
    return wave * wave * radio.extra_loss_los * device.fading_mean


def link_distance(drone_pos, device_ground_pos, altitude):
    """3-D separation between a drone at ``altitude`` and a ground device."""
    drone_pos = np.asarray(drone_pos, dtype=float)
    delta = drone_pos[..., :2] - np.asarray(device_ground_pos, dtype=float)
    return np.sqrt(delta[..., 0] ** 2 + delta[..., 1] ** 2 + altitude * altitude)


def mean_channel_gain(drone_pos, device: DeviceState, radio: RadioEnvironment,
                      assume_los=True):
    """Mean channel power gain at the drone position(s).

    ``drone_pos`` is a ground 2-vector or 3-vector (extra components beyond
    x, y are ignored; altitude comes from the radio environment). In the
    default LoS mode the gain is A * d**(-alpha) with
    A = (s / 4 pi f_c)^2 * extra_loss_los * nu.
    """
    d = link_distance(drone_pos, device.position, radio.altitude_m)
    base = (radio.light_speed / (4.0 * np.pi * radio.carrier_hz)) ** 2
    if assume_los:
        return amplitude_gain(device, radio) * d ** (-radio.pathloss_exp)
    drone3 = np.concatenate([np.asarray(drone_pos, dtype=float)[..., :2],
                             np.broadcast_to(radio.altitude_m,
                                             np.asarray(drone_pos).shape[:-1] + (1,))],
                            axis=-1)
    device3 = np.concatenate([device.position, [0.0]])
    zeta = los_probability(drone3, device3, radio.los_a, radio.los_b)
    mix = radio.extra_loss_los * zeta + radio.extra_loss_nlos * (1.0 - zeta)
    return base * device.fading_mean * d ** (-radio.pathloss_exp) * mix


def per_from_distance(d, device: DeviceState, radio: RadioEnvironment):
    """Packet error rate at 3-D distance d (LoS mode), ignoring overrides."""
    coeff = (radio.theta * radio.bandwidth_hz * radio.noise_psd
             / (amplitude_gain(device, radio) * device.tx_power_mw))
    return -np.expm1(-coeff * np.asarray(d, dtype=float) ** radio.pathloss_exp)


def per_slope(d, device: DeviceState, radio: RadioEnvironment):
    """d(per)/d(distance) at 3-D distance d (LoS mode)."""
    d = np.asarray(d, dtype=float)
    alpha = radio.pathloss_exp
    coeff = (radio.theta * radio.bandwidth_hz * radio.noise_psd
             / (amplitude_gain(device, radio) * device.tx_power_mw))
    return coeff * alpha * d ** (alpha - 1.0) * np.exp(-coeff * d ** alpha)


def packet_error_rate(drone_pos, device: DeviceState, radio: RadioEnvironment):
    """Packet error rate for the device at the drone position(s).

    Honors ``device.per_override`` when set (constant, geometry-free rate).
    """
    d = link_distance(drone_pos, device.position, radio.altitude_m)
    if device.per_override is not None:
        return np.broadcast_to(float(device.per_override), d.shape)[()] + 0.0
    return per_from_distance(d, device, radio)


def per_gradient(drone_pos, device: DeviceState, radio: RadioEnvironment):
    """Gradient of the packet error rate w.r.t. the drone's (x, y).

    Returns an array with trailing axis 2. For an overridden (constant) rate
    the gradient is identically zero.
    """
    drone_pos = np.asarray(drone_pos, dtype=float)
    delta = drone_pos[..., :2] - device.position
    if device.per_override is not None:
        return np.zeros(delta.shape)
    d = np.sqrt(delta[..., 0] ** 2 + delta[..., 1] ** 2 + radio.altitude_m ** 2)
    # slope/d = theta*B*N0*alpha/(rho*A) * d**(alpha-2) * exp(-theta*B*N0*d**alpha/(A*rho))
    return (per_slope(d, device, radio) / d)[..., None] * delta


def link_state(drone_pos, device: DeviceState, radio: RadioEnvironment) -> LinkState:
    d = float(link_distance(drone_pos, device.position, radio.altitude_m))
    return LinkState(distance=d,
                     mean_gain=float(mean_channel_gain(drone_pos, device, radio)),
                     per=float(packet_error_rate(drone_pos, device, radio)))


def round_pers(drone_pos, devices, radio: RadioEnvironment) -> np.ndarray:
    """Packet error rates for every device at one drone position, shape (N,)."""
    return np.array([packet_error_rate(drone_pos, dev, radio) for dev in devices],
                    dtype=float)


def _per_coeffs(devices, radio):
    """theta*B*N0 / (A_i * rho_i) per device, with override bookkeeping."""
    coeff = np.array([radio.theta * radio.bandwidth_hz * radio.noise_psd
                      / (amplitude_gain(dev, radio) * dev.tx_power_mw)
                      for dev in devices])
    override = np.array([np.nan if dev.per_override is None else dev.per_override
                         for dev in devices])
    return coeff, override


def pers_at(drone_xy, device_xy, devices, radio: RadioEnvironment) -> np.ndarray:
    """Vectorized PERs: drone (..., 2) against device positions (..., N, 2) -> (..., N)."""
    delta = np.asarray(drone_xy, dtype=float)[..., None, :] - np.asarray(device_xy, dtype=float)
    d = np.sqrt(delta[..., 0] ** 2 + delta[..., 1] ** 2 + radio.altitude_m ** 2)
    coeff, override = _per_coeffs(devices, radio)
    pers = -np.expm1(-coeff * d ** radio.pathloss_exp)
    fixed = ~np.isnan(override)
    if fixed.any():
        pers = np.where(fixed, override, pers)
    return pers


def per_gradients_at(drone_xy, device_xy, devices, radio: RadioEnvironment) -> np.ndarray:
    """Vectorized PER gradients w.r.t. drone (x, y): returns (..., N, 2)."""
    delta = np.asarray(drone_xy, dtype=float)[..., None, :] - np.asarray(device_xy, dtype=float)
    d = np.sqrt(delta[..., 0] ** 2 + delta[..., 1] ** 2 + radio.altitude_m ** 2)
    coeff, override = _per_coeffs(devices, radio)
    alpha = radio.pathloss_exp
    factor = coeff * alpha * d ** (alpha - 2.0) * np.exp(-coeff * d ** alpha)
    factor = np.where(np.isnan(override), factor, 0.0)
    return factor[..., None] * delta
