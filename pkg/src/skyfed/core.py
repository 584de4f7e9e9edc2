"""Domain types, scenario file parsing, and deterministic RNG streams.

Units are fixed by convention: meters for positions and altitudes, Hz for
bandwidth and carrier, mW and mW/Hz for power quantities, meters-per-round
for velocities. All types are immutable after construction and safe to
share across threads.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np


class SkyfedError(Exception):
    """Base class for errors raised by this package."""


class ScenarioError(SkyfedError):
    """Invalid scenario text or violated scenario invariant."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class InfeasibleError(SkyfedError):
    """No point satisfies the contraction requirement (or an LP has no feasible vertex)."""


class UnboundedError(SkyfedError):
    """Linear program unbounded; the linearized denominator changes sign on the trust box."""


def _vec2(value) -> np.ndarray:
    v = np.asarray(value, dtype=float).reshape(2).copy()
    v.flags.writeable = False
    return v


@dataclass(frozen=True, eq=False)
class DeviceState:
    """One ground device: geometry, data footprint, and radio parameters.

    ``per_override`` pins the device's packet error rate to a constant,
    independent of geometry; it exists for controlled experiments that sweep
    the error rate directly.
    """

    id: int
    position: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: _vec2((0.0, 0.0)))
    dataset_size: int = 1000
    noise_var: float = 0.0
    tx_power_mw: float = 0.1
    fading_mean: float = 1.0
    per_override: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "position", _vec2(self.position))
        object.__setattr__(self, "velocity", _vec2(self.velocity))
        if self.dataset_size < 1:
            raise ScenarioError(f"device {self.id}: dataset_size must be >= 1")
        if self.noise_var < 0:
            raise ScenarioError(f"device {self.id}: noise_var must be >= 0")
        if self.tx_power_mw <= 0:
            raise ScenarioError(f"device {self.id}: tx_power_mw must be > 0")
        if not 0.0 < self.fading_mean <= 1.0:
            raise ScenarioError(f"device {self.id}: fading_mean must be in (0, 1]")
        if self.per_override is not None and not 0.0 <= self.per_override < 1.0:
            raise ScenarioError(f"device {self.id}: per_override must be in [0, 1)")

    def __eq__(self, other):
        if not isinstance(other, DeviceState):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.position, other.position)
            and np.array_equal(self.velocity, other.velocity)
            and self.dataset_size == other.dataset_size
            and self.noise_var == other.noise_var
            and self.tx_power_mw == other.tx_power_mw
            and self.fading_mean == other.fading_mean
            and self.per_override == other.per_override
        )


@dataclass(frozen=True)
class RadioEnvironment:
    """Shared channel constants. Defaults reproduce the standard desk setup:
    20 m altitude, -174 dBm/Hz noise density, 1 GHz carrier, 2.5 MHz band,
    waterfall threshold 0.053, path loss exponent 3.4.
    """

    theta: float = 0.053
    bandwidth_hz: float = 2.5e6
    noise_psd: float = 10.0 ** -17.4  # mW/Hz
    pathloss_exp: float = 3.4
    carrier_hz: float = 1.0e9
    extra_loss_los: float = 1.0
    extra_loss_nlos: float = 0.2
    los_a: float = 9.61
    los_b: float = 0.16
    altitude_m: float = 20.0
    light_speed: float = 299792458.0

    def __post_init__(self):
        for name in ("theta", "bandwidth_hz", "noise_psd", "pathloss_exp",
                     "carrier_hz", "extra_loss_los", "extra_loss_nlos",
                     "altitude_m", "light_speed"):
            if getattr(self, name) <= 0:
                raise ScenarioError(f"radio.{name} must be > 0")
        for name in ("los_a", "los_b"):
            if getattr(self, name) < 0:
                raise ScenarioError(f"radio.{name} must be >= 0")
        if self.pathloss_exp <= 2.0:
            # The greedy velocity formula relies on d**(alpha-2) vanishing as
            # d -> 0; warn loudly rather than fail.
            import warnings

            warnings.warn("pathloss_exp <= 2 breaks the d**(alpha-2) factor "
                          "in velocity weights", stacklevel=2)


@dataclass(frozen=True)
class LearningConstants:
    """Constants of the per-round contraction bound."""

    lipschitz: float = 1.0
    strong_convexity: float = 0.5
    c1: float = 1.0
    c2: float = 0.5
    gradient_coupling: float = 0.8  # bound on the squared mixed-Hessian norm
    feature_dim: int = 784

    def __post_init__(self):
        if not 0 < self.strong_convexity <= self.lipschitz:
            raise ScenarioError("learning: need 0 < strong_convexity <= lipschitz")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ScenarioError("learning: c1 and c2 must be > 0")
        if self.gradient_coupling <= 0:
            raise ScenarioError("learning: gradient_coupling must be > 0")
        if self.feature_dim < 1:
            raise ScenarioError("learning: feature_dim must be >= 1")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Ordered drone waypoints on the ground plane (altitude is implicit).

    ``waypoints`` has shape (n+1, 2). The drone starts at waypoint 0 and
    dwells ``dwell`` aggregation rounds at each subsequent waypoint, so a
    horizon of T rounds needs n >= T / dwell.
    """

    waypoints: np.ndarray
    dwell: int = 1
    closed: bool = False

    def __post_init__(self):
        w = np.asarray(self.waypoints, dtype=float).reshape(-1, 2).copy()
        w.flags.writeable = False
        object.__setattr__(self, "waypoints", w)
        if self.dwell < 1:
            raise ScenarioError("trajectory dwell must be >= 1")
        if len(w) < 1:
            raise ScenarioError("trajectory needs at least one waypoint")
        if self.closed and np.linalg.norm(w[0] - w[-1]) > 1e-9:
            raise ScenarioError("closed trajectory must end at its start (within 1e-9 m)")

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (np.array_equal(self.waypoints, other.waypoints)
                and self.dwell == other.dwell and self.closed == other.closed)

    def positions_at_rounds(self, horizon: int) -> np.ndarray:
        """Per-round drone positions, shape (horizon, 2); row t-1 is round t.

        Round t uses waypoint ceil(t / dwell): the drone moves away from the
        start point before the first aggregation round, matching the greedy
        policy's update order.
        """
        n = len(self.waypoints) - 1
        if n * self.dwell < horizon:
            raise ScenarioError(
                f"trajectory with {n + 1} waypoints and dwell {self.dwell} "
                f"does not cover horizon {horizon}")
        idx = np.arange(horizon) // self.dwell + 1
        return self.waypoints[idx]


@dataclass(frozen=True, eq=False)
class Scenario:
    """Full experiment description: devices, radio, bound constants, run setup."""

    devices: tuple
    radio: RadioEnvironment = field(default_factory=RadioEnvironment)
    constants: LearningConstants = field(default_factory=LearningConstants)
    horizon: int = 100
    dwell: int = 1
    v_max: float = 1.0
    seed: int = 0
    area_m: float = 70.0
    model: str = "quadratic"
    dataset: str = "synthetic"
    idx_images: Optional[str] = None
    idx_labels: Optional[str] = None
    classes: int = 2
    label_skew: float = 0.0
    learning_rate: Optional[float] = None  # None means 1/L

    def __post_init__(self):
        object.__setattr__(self, "devices", tuple(self.devices))
        if not self.devices:
            raise ScenarioError("scenario needs at least one [device] block")
        if self.horizon < 1:
            raise ScenarioError("run.horizon must be >= 1")
        if self.dwell < 1:
            raise ScenarioError("run.dwell must be >= 1")
        if self.horizon % self.dwell != 0:
            raise ScenarioError("run.horizon must be divisible by run.dwell")
        if self.v_max < 0:
            raise ScenarioError("run.v_max must be >= 0")
        if self.area_m <= 0:
            raise ScenarioError("run.area_m must be > 0")
        if self.model not in ("quadratic", "logistic", "tiny-mlp"):
            raise ScenarioError(f"unknown run.model '{self.model}'")
        if self.dataset not in ("synthetic", "idx"):
            raise ScenarioError(f"unknown run.dataset '{self.dataset}'")
        if self.dataset == "idx" and (self.idx_images is None or self.idx_labels is None):
            raise ScenarioError("dataset=idx requires run.idx_images and run.idx_labels")
        if self.classes < 1:
            raise ScenarioError("run.classes must be >= 1")
        if not 0.0 <= self.label_skew <= 1.0:
            raise ScenarioError("run.label_skew must be in [0, 1]")
        if self.learning_rate is not None and self.learning_rate <= 0:
            raise ScenarioError("run.learning_rate must be > 0 or 'auto'")

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return (self.devices == other.devices
                and self.radio == other.radio
                and self.constants == other.constants
                and (self.horizon, self.dwell, self.v_max, self.seed, self.area_m,
                     self.model, self.dataset, self.idx_images, self.idx_labels,
                     self.classes, self.label_skew, self.learning_rate)
                == (other.horizon, other.dwell, other.v_max, other.seed, other.area_m,
                    other.model, other.dataset, other.idx_images, other.idx_labels,
                    other.classes, other.label_skew, other.learning_rate))

    @property
    def total_data(self) -> int:
        return sum(d.dataset_size for d in self.devices)

    def with_devices(self, devices: Sequence[DeviceState]) -> "Scenario":
        return replace(self, devices=tuple(devices))


def psnr_to_variance(psnr_db: float, peak: float = 1.0) -> float:
    """Noise variance for a given peak-signal-to-noise ratio in dB."""
    if peak <= 0:
        raise ValueError("peak must be > 0")
    return peak * peak * 10.0 ** (-psnr_db / 10.0)


def seeded_rng(seed: int, stream_label: str) -> np.random.Generator:
    """Independent reproducible stream for (seed, label).

    Streams with distinct labels are statistically independent; identical
    (seed, label) pairs yield bit-identical draws on any platform or worker
    count, so parallel code keys its streams by worker/device/round labels.
    """
    digest = hashlib.sha256(stream_label.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *words])
    return np.random.Generator(np.random.PCG64(ss))


def device_positions(devices: Sequence[DeviceState], horizon: int) -> np.ndarray:
    """Per-round device positions, shape (horizon+1, N, 2); row t is round t.

    Devices translate by their per-round velocity; row 0 is the initial layout.
    """
    p0 = np.stack([d.position for d in devices])
    v = np.stack([d.velocity for d in devices])
    t = np.arange(horizon + 1, dtype=float)[:, None, None]
    return p0[None, :, :] + t * v[None, :, :]


# ---------------------------------------------------------------------------
# Scenario file grammar: UTF-8 `key = value` lines grouped under `[radio]`,
# `[learning]`, `[run]`, and repeated `[device]` sections; `#` starts a
# comment. Every key has a documented default (the dataclass defaults above);
# a minimal file is just one `[device]` block.
# ---------------------------------------------------------------------------

_RADIO_KEYS = {
    "theta": float, "bandwidth_hz": float, "noise_psd": float,
    "pathloss_exp": float, "carrier_hz": float, "extra_loss_los": float,
    "extra_loss_nlos": float, "los_a": float, "los_b": float,
    "altitude_m": float, "light_speed": float,
}
_LEARNING_KEYS = {
    "lipschitz": float, "strong_convexity": float, "c1": float, "c2": float,
    "gradient_coupling": float, "feature_dim": int,
}
_RUN_KEYS = {
    "horizon": int, "dwell": int, "v_max": float, "seed": int, "area_m": float,
    "model": str, "dataset": str, "idx_images": str, "idx_labels": str,
    "classes": int, "label_skew": float, "learning_rate": float,
}
_DEVICE_KEYS = {
    "x": float, "y": float, "vx": float, "vy": float, "dataset_size": int,
    "noise_var": float, "psnr_db": float, "tx_power_mw": float,
    "fading_mean": float, "per_override": float,
}


def _convert(key, value, type_, lineno):
    if type_ is str:
        return value
    try:
        if type_ is int:
            return int(value)
        return float(value)
    except ValueError:
        raise ScenarioError(f"key '{key}': cannot parse value '{value}'", lineno) from None


def parse_scenario(text: str) -> Scenario:
    """Parse scenario-file contents into a fully validated Scenario."""
    sections = {"radio": {}, "learning": {}, "run": {}}
    device_blocks = []
    current = None  # (name, dict)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ScenarioError("unterminated section header", lineno)
            name = line[1:-1].strip().lower()
            if name == "device":
                device_blocks.append({})
                current = ("device", device_blocks[-1])
            elif name in sections:
                current = (name, sections[name])
            else:
                raise ScenarioError(f"unknown section '[{name}]'", lineno)
            continue
        if "=" not in line:
            raise ScenarioError("expected 'key = value'", lineno)
        if current is None:
            raise ScenarioError("key outside any section", lineno)
        key, _, value = line.partition("=")
        key = key.strip().lower()
        value = value.strip()
        sec_name, sec = current
        keymap = {"radio": _RADIO_KEYS, "learning": _LEARNING_KEYS,
                  "run": _RUN_KEYS, "device": _DEVICE_KEYS}[sec_name]
        if key not in keymap:
            raise ScenarioError(f"unknown key '{key}' in [{sec_name}]", lineno)
        if key in sec:
            raise ScenarioError(f"duplicate key '{key}' in [{sec_name}]", lineno)
        if sec_name == "run" and key == "learning_rate" and value.lower() == "auto":
            sec[key] = None
        elif sec_name == "device" and key == "per_override" and value.lower() == "none":
            sec[key] = None
        else:
            sec[key] = _convert(key, value, keymap[key], lineno)

    if not device_blocks:
        raise ScenarioError("scenario needs at least one [device] block")

    radio = RadioEnvironment(**sections["radio"])
    constants = LearningConstants(**sections["learning"])
    devices = []
    for i, blk in enumerate(device_blocks, start=1):
        blk = dict(blk)
        if "psnr_db" in blk:
            if "noise_var" in blk:
                raise ScenarioError(f"device {i}: give noise_var or psnr_db, not both")
            blk["noise_var"] = psnr_to_variance(blk.pop("psnr_db"))
        pos = (blk.pop("x", 0.0), blk.pop("y", 0.0))
        vel = (blk.pop("vx", 0.0), blk.pop("vy", 0.0))
        devices.append(DeviceState(id=i, position=pos, velocity=vel, **blk))
    return Scenario(devices=tuple(devices), radio=radio, constants=constants,
                    **sections["run"])


def serialize_scenario(s: Scenario) -> str:
    """Emit scenario text that parses back to an equal Scenario."""
    out = ["[radio]"]
    for key in _RADIO_KEYS:
        out.append(f"{key} = {getattr(s.radio, key)!r}")
    out.append("")
    out.append("[learning]")
    for key in _LEARNING_KEYS:
        out.append(f"{key} = {getattr(s.constants, key)!r}")
    out.append("")
    out.append("[run]")
    for key in _RUN_KEYS:
        val = getattr(s, key)
        if val is None:
            if key == "learning_rate":
                out.append("learning_rate = auto")
            continue
        out.append(f"{key} = {val!r}" if not isinstance(val, str) else f"{key} = {val}")
    for d in s.devices:
        out.append("")
        out.append("[device]")
        out.append(f"x = {d.position[0]!r}")
        out.append(f"y = {d.position[1]!r}")
        out.append(f"vx = {d.velocity[0]!r}")
        out.append(f"vy = {d.velocity[1]!r}")
        out.append(f"dataset_size = {d.dataset_size!r}")
        out.append(f"noise_var = {d.noise_var!r}")
        out.append(f"tx_power_mw = {d.tx_power_mw!r}")
        out.append(f"fading_mean = {d.fading_mean!r}")
        if d.per_override is not None:
            out.append(f"per_override = {d.per_override!r}")
    return "\n".join(out) + "\n"
