"""Federated-averaging simulator with lossy uplinks and sensor-noisy data.

Each aggregation round every device takes one full-batch gradient step on
its local (noise-corrupted) dataset and uploads the result; an upload
survives with probability 1 - PER at the current drone-device geometry, and
the drone aggregates the delivered models by dataset-size weighted mean.
Rounds where nothing arrives keep the previous global model.

Three models are available: a least-squares ``quadratic`` (strongly convex,
closed-form optimum, exact curvature constants), a binary ``logistic``
regression with L2 regularization (strong convexity via the regularizer),
and a small nonconvex ``tiny-mlp`` for qualitative multi-class runs only.
Optimality gaps are measured against the noise-free loss: the per-round
bound treats sensor noise as a gradient perturbation around the clean
objective, so that is the yardstick its predictions apply to.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import channel
from .bound import terms_arrays
from .core import (LearningConstants, Scenario, ScenarioError, Trajectory,
                   device_positions, seeded_rng)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class LocalDataset:
    """One device's training data. ``features`` already contain the frozen
    sensor noise; ``clean_features`` keep the pre-noise values when known."""

    features: np.ndarray
    labels: np.ndarray
    noise_var: float = 0.0
    source: str = "synthetic"
    clean_features: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels disagree on sample count")


@dataclass(frozen=True)
class ModelState:
    weights: np.ndarray
    round: int = 0


@dataclass(frozen=True)
class RoundRecord:
    round: int
    per: np.ndarray         # per-device error rates this round
    delivered: np.ndarray   # 0/1 delivery bits
    drone_pos: np.ndarray
    loss: float             # global training loss (noisy data)
    accuracy: float         # clean eval accuracy (nan for regression)
    gap: float              # clean-loss optimality gap when the optimum is known


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

def make_synthetic(n_samples, feature_dim, classes, label_skew, rng,
                   dominant=None) -> LocalDataset:
    """Gaussian class blobs with optional per-device label skew.

    Class k is centered at +2 along feature axis k (orthogonal class
    directions, so single-class shards have genuinely different gradient
    geometry, not mirror images). ``label_skew`` interpolates between
    balanced class counts (0) and a single dominant class (1); the dominant
    class is drawn from ``rng`` unless given explicitly.
    """
    if n_samples < classes:
        raise ValueError("need at least one sample per class")
    if classes > feature_dim:
        raise ValueError("too many classes for this feature dimension")
    dominant = int(rng.integers(classes)) if dominant is None else int(dominant)
    props = np.full(classes, (1.0 - label_skew) / classes)
    props[dominant] += label_skew
    counts = np.floor(props * n_samples).astype(int)
    remainder = n_samples - counts.sum()
    order = np.argsort(-(props * n_samples - counts), kind="stable")
    counts[order[:remainder]] += 1

    means = np.zeros((classes, feature_dim))
    for k in range(classes):
        means[k, k] = 2.0
    feats = []
    labels = []
    for k in range(classes):
        feats.append(rng.normal(means[k], 1.0, size=(counts[k], feature_dim)))
        labels.append(np.full(counts[k], k, dtype=int))
    features = np.concatenate(feats)
    labels = np.concatenate(labels)
    perm = rng.permutation(n_samples)
    features, labels = features[perm], labels[perm]
    return LocalDataset(features=features, labels=labels, noise_var=0.0,
                        source="synthetic", clean_features=features)


def add_sensor_noise(dataset: LocalDataset, noise_var, rng) -> LocalDataset:
    """Corrupt features with frozen zero-mean Gaussian noise of the given variance."""
    if noise_var < 0:
        raise ValueError("noise_var must be >= 0")
    clean = dataset.clean_features if dataset.clean_features is not None else dataset.features
    if noise_var == 0.0:
        return replace(dataset, features=clean, noise_var=0.0, clean_features=clean)
    noisy = clean + rng.normal(0.0, np.sqrt(noise_var), size=clean.shape)
    return replace(dataset, features=noisy, noise_var=float(noise_var),
                   clean_features=clean)


def load_idx(images_path, labels_path) -> LocalDataset:
    """Parse a big-endian IDX image/label file pair; pixels scale to [0, 1]."""
    with open(images_path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise ValueError(f"{images_path}: truncated header")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGES_MAGIC:
            raise ValueError(f"{images_path}: bad magic 0x{magic:08x} at offset 0 "
                             f"(expected 0x{IDX_IMAGES_MAGIC:08x})")
        raw = fh.read(count * rows * cols)
        if len(raw) < count * rows * cols:
            raise ValueError(f"{images_path}: truncated pixel data")
    with open(labels_path, "rb") as fh:
        header = fh.read(8)
        if len(header) < 8:
            raise ValueError(f"{labels_path}: truncated header")
        magic, label_count = struct.unpack(">II", header)
        if magic != IDX_LABELS_MAGIC:
            raise ValueError(f"{labels_path}: bad magic 0x{magic:08x} at offset 0 "
                             f"(expected 0x{IDX_LABELS_MAGIC:08x})")
        raw_labels = fh.read(label_count)
        if len(raw_labels) < label_count:
            raise ValueError(f"{labels_path}: truncated label data")
    if count != label_count:
        raise ValueError(f"image count {count} != label count {label_count}")
    features = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)
    features = features.astype(float) / 255.0
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(int)
    return LocalDataset(features=features, labels=labels, noise_var=0.0,
                        source="idx", clean_features=features)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

class QuadraticModel:
    """Least-squares regression onto the (float-cast) labels."""

    name = "quadratic"

    def init_weights(self, feature_dim, rng=None):
        return np.zeros(feature_dim)

    def loss(self, w, X, y):
        r = X @ w - np.asarray(y, dtype=float)
        return 0.5 * float(r @ r) / len(y)

    def grad(self, w, X, y):
        r = X @ w - np.asarray(y, dtype=float)
        return X.T @ r / len(y)

    def accuracy(self, w, X, y):
        return float("nan")

    def hessian(self, X):
        return X.T @ X / len(X)

    def optimum(self, X, y):
        return np.linalg.solve(self.hessian(X), X.T @ np.asarray(y, dtype=float) / len(X))

    def lipschitz_mu(self, X, y):
        eig = np.linalg.eigvalsh(self.hessian(X))
        return float(eig[-1]), float(eig[0])

    def per_sample_grad_sq(self, w, X, y):
        r = X @ w - np.asarray(y, dtype=float)
        return r ** 2 * (X ** 2).sum(axis=1)

    def mixed_hessian(self, w, x, y):
        return np.outer(x, w) + (float(x @ w) - float(y)) * np.eye(len(w))


class LogisticModel:
    """Binary logistic regression with L2 regularization (labels in {0, 1})."""

    name = "logistic"

    def __init__(self, reg=1e-2):
        self.reg = reg

    def init_weights(self, feature_dim, rng=None):
        return np.zeros(feature_dim)

    def _check_labels(self, y):
        y = np.asarray(y)
        if ((y != 0) & (y != 1)).any():
            raise ValueError("logistic model needs binary labels in {0, 1}")
        return y.astype(float)

    def loss(self, w, X, y):
        y = self._check_labels(y)
        z = X @ w
        # softplus(z) - y z is the negative log-likelihood per sample
        nll = np.logaddexp(0.0, z) - y * z
        return float(nll.mean()) + 0.5 * self.reg * float(w @ w)

    def grad(self, w, X, y):
        y = self._check_labels(y)
        p = _sigmoid(X @ w)
        return X.T @ (p - y) / len(y) + self.reg * w

    def accuracy(self, w, X, y):
        y = self._check_labels(y)
        return float(((X @ w > 0) == (y > 0.5)).mean())

    def lipschitz_mu(self, X, y):
        eig_max = float(np.linalg.eigvalsh(X.T @ X)[-1])
        return eig_max / (4.0 * len(X)) + self.reg, self.reg

    def per_sample_grad_sq(self, w, X, y):
        y = self._check_labels(y)
        p = _sigmoid(X @ w)
        g = (p - y)[:, None] * X + self.reg * w
        return (g ** 2).sum(axis=1)

    def mixed_hessian(self, w, x, y):
        z = float(x @ w)
        p = _sigmoid(z)
        return p * (1.0 - p) * np.outer(x, w) + (p - float(y)) * np.eye(len(w))


class TinyMLP:
    """One-hidden-layer tanh network with softmax output; nonconvex,
    used for qualitative multi-class runs only."""

    name = "tiny-mlp"

    def __init__(self, feature_dim, hidden=16, classes=2):
        self.m = feature_dim
        self.h = hidden
        self.k = classes

    def _unpack(self, w):
        m, h, k = self.m, self.h, self.k
        i = 0
        w1 = w[i:i + m * h].reshape(m, h); i += m * h
        b1 = w[i:i + h]; i += h
        w2 = w[i:i + h * k].reshape(h, k); i += h * k
        b2 = w[i:i + k]
        return w1, b1, w2, b2

    @property
    def n_params(self):
        return self.m * self.h + self.h + self.h * self.k + self.k

    def init_weights(self, feature_dim, rng):
        if feature_dim != self.m:
            raise ValueError("feature_dim mismatch")
        scale = 1.0 / np.sqrt(self.m)
        return rng.normal(0.0, scale, size=self.n_params)

    def _forward(self, w, X):
        w1, b1, w2, b2 = self._unpack(w)
        hid = np.tanh(X @ w1 + b1)
        logits = hid @ w2 + b2
        logits -= logits.max(axis=1, keepdims=True)
        expl = np.exp(logits)
        probs = expl / expl.sum(axis=1, keepdims=True)
        return hid, probs

    def loss(self, w, X, y):
        _, probs = self._forward(w, X)
        return float(-np.log(probs[np.arange(len(y)), y] + 1e-12).mean())

    def grad(self, w, X, y):
        w1, b1, w2, b2 = self._unpack(w)
        hid, probs = self._forward(w, X)
        n = len(y)
        delta = probs
        delta[np.arange(n), y] -= 1.0
        delta /= n
        g_w2 = hid.T @ delta
        g_b2 = delta.sum(axis=0)
        back = (delta @ w2.T) * (1.0 - hid ** 2)
        g_w1 = X.T @ back
        g_b1 = back.sum(axis=0)
        return np.concatenate([g_w1.ravel(), g_b1, g_w2.ravel(), g_b2])

    def accuracy(self, w, X, y):
        _, probs = self._forward(w, X)
        return float((probs.argmax(axis=1) == np.asarray(y)).mean())


def _sigmoid(z):
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def get_model(scenario: Scenario):
    if scenario.model == "quadratic":
        return QuadraticModel()
    if scenario.model == "logistic":
        if scenario.dataset == "synthetic" and scenario.classes != 2:
            raise ScenarioError("logistic model needs classes = 2")
        return LogisticModel()
    return TinyMLP(scenario.constants.feature_dim, classes=scenario.classes)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def local_step(w_global, dataset: LocalDataset, learning_rate, model):
    """One full-batch gradient step on the device's local loss."""
    g = model.grad(w_global, dataset.features, dataset.labels)
    if not np.isfinite(g).all():
        raise FloatingPointError("non-finite local gradient")
    return w_global - learning_rate * g


def aggregate(local_models, delivered, dataset_sizes, previous=None):
    """Dataset-size weighted mean over delivered models.

    When nothing was delivered the previous global model is retained (the
    only choice that keeps the iterate well-defined).
    """
    local_models = np.asarray(local_models, dtype=float)
    delivered = np.asarray(delivered, dtype=float)
    sizes = np.asarray(dataset_sizes, dtype=float)
    if not (len(local_models) == len(delivered) == len(sizes)):
        raise ValueError("length mismatch between models, bits, and sizes")
    weights = delivered * sizes
    total = weights.sum()
    if total == 0.0:
        if previous is None:
            raise ValueError("all deliveries failed and no previous model given")
        return np.array(previous, dtype=float)
    return weights @ local_models / total


def build_datasets(scenario: Scenario):
    """Per-device noisy datasets plus a clean evaluation set."""
    m = scenario.constants.feature_dim
    locals_ = []
    if scenario.dataset == "synthetic":
        for dev in scenario.devices:
            rng = seeded_rng(scenario.seed, f"data/device/{dev.id}")
            ds = make_synthetic(dev.dataset_size, m, scenario.classes,
                                scenario.label_skew, rng)
            noise_rng = seeded_rng(scenario.seed, f"noise/device/{dev.id}")
            locals_.append(add_sensor_noise(ds, dev.noise_var, noise_rng))
        eval_ds = make_synthetic(500, m, scenario.classes, 0.0,
                                 seeded_rng(scenario.seed, "data/eval"))
        return locals_, eval_ds

    pool = load_idx(scenario.idx_images, scenario.idx_labels)
    if pool.features.shape[1] != m:
        raise ScenarioError(f"idx feature dim {pool.features.shape[1]} != "
                            f"learning.feature_dim {m}")
    perm = seeded_rng(scenario.seed, "data/idx").permutation(len(pool.features))
    need = sum(d.dataset_size for d in scenario.devices)
    if need > len(pool.features):
        raise ScenarioError(f"idx pool has {len(pool.features)} samples, "
                            f"devices need {need}")
    offset = 0
    for dev in scenario.devices:
        idx = perm[offset:offset + dev.dataset_size]
        offset += dev.dataset_size
        ds = LocalDataset(features=pool.features[idx], labels=pool.labels[idx],
                          source="idx", clean_features=pool.features[idx])
        noise_rng = seeded_rng(scenario.seed, f"noise/device/{dev.id}")
        locals_.append(add_sensor_noise(ds, dev.noise_var, noise_rng))
    rest = perm[offset:offset + 1000]
    if len(rest) == 0:
        rest = perm[:1000]
    eval_ds = LocalDataset(features=pool.features[rest], labels=pool.labels[rest],
                           source="idx", clean_features=pool.features[rest])
    return locals_, eval_ds


def concat_clean(datasets: Sequence[LocalDataset]):
    """Clean global dataset (features, labels) across devices."""
    feats = [ds.clean_features if ds.clean_features is not None else ds.features
             for ds in datasets]
    return np.concatenate(feats), np.concatenate([ds.labels for ds in datasets])


def resolve_learning_rate(scenario: Scenario, model, datasets):
    """Scenario learning rate, defaulting to 1 / L on the clean global data."""
    if scenario.learning_rate is not None:
        return scenario.learning_rate
    if not hasattr(model, "lipschitz_mu"):
        raise ScenarioError("tiny-mlp needs an explicit run.learning_rate")
    X, y = concat_clean(datasets)
    lip, _ = model.lipschitz_mu(X, y)
    return 1.0 / lip


def simulate(scenario: Scenario, traj: Trajectory, model=None, datasets=None,
             delivery_seed=None, force_delivery=False) -> list:
    """Run the federated training loop along a trajectory.

    Returns one :class:`RoundRecord` per round, prefixed by a round-0 record
    of the initial model. Deliveries draw from streams keyed by
    (delivery seed, device id, round), so results do not depend on worker
    count and replicas can vary ``delivery_seed`` while keeping datasets
    fixed.
    """
    devices = scenario.devices
    horizon = scenario.horizon
    if model is None:
        model = get_model(scenario)
    if datasets is None:
        datasets = build_datasets(scenario)
    locals_, eval_ds = datasets
    lr = resolve_learning_rate(scenario, model, locals_)
    dseed = scenario.seed if delivery_seed is None else delivery_seed

    drone_rounds = traj.positions_at_rounds(horizon)
    traces = device_positions(devices, horizon)
    pers = channel.pers_at(drone_rounds, traces[1:], devices, scenario.radio)

    sizes = np.array([d.dataset_size for d in devices], dtype=float)
    w = model.init_weights(scenario.constants.feature_dim,
                           seeded_rng(scenario.seed, "init"))

    w_star = None
    loss_star = 0.0
    if isinstance(model, QuadraticModel):
        X, y = concat_clean(locals_)
        w_star = model.optimum(X, y)
        loss_star = model.loss(w_star, X, y)

    def global_loss(weights):
        per_dev = [model.loss(weights, ds.features, ds.labels) for ds in locals_]
        return float(sizes @ np.array(per_dev) / sizes.sum())

    def gap_of(weights):
        if w_star is None:
            return float("nan")
        X, y = concat_clean(locals_)
        return model.loss(weights, X, y) - loss_star

    records = [RoundRecord(round=0, per=np.zeros(len(devices)),
                           delivered=np.ones(len(devices), dtype=int),
                           drone_pos=np.array(traj.waypoints[0]),
                           loss=global_loss(w),
                           accuracy=model.accuracy(w, eval_ds.features, eval_ds.labels),
                           gap=gap_of(w))]
    for t in range(1, horizon + 1):
        locals_w = [local_step(w, ds, lr, model) for ds in locals_]
        if force_delivery:
            delivered = np.ones(len(devices), dtype=int)
        else:
            draws = np.array([seeded_rng(dseed, f"delivery/{dev.id}/{t}").random()
                              for dev in devices])
            delivered = (draws < 1.0 - pers[t - 1]).astype(int)
        w = aggregate(locals_w, delivered, sizes, previous=w)
        records.append(RoundRecord(
            round=t, per=pers[t - 1].copy(), delivered=delivered,
            drone_pos=np.array(drone_rounds[t - 1]), loss=global_loss(w),
            accuracy=model.accuracy(w, eval_ds.features, eval_ds.labels),
            gap=gap_of(w)))
    return records


# ---------------------------------------------------------------------------
# Bound-constant estimation and validation
# ---------------------------------------------------------------------------

def estimate_constants(model, dataset: LocalDataset, n_probe=40,
                       seed=0) -> LearningConstants:
    """Curvature and gradient-envelope constants from a clean dataset.

    Quadratic: L and mu are the exact extreme Hessian eigenvalues. Logistic:
    the standard sigmoid curvature bound and the regularizer. The envelope
    constants (c1, c2) come from a least-squares fit of the worst per-sample
    squared gradient norm against the global squared gradient norm over
    probe points, inflated to cover the whole probe sample; the coupling
    constant is the worst sampled squared mixed-Hessian norm, inflated the
    same way.
    """
    if not hasattr(model, "lipschitz_mu"):
        raise ValueError(f"constant estimation not supported for {model.name}")
    X = dataset.clean_features if dataset.clean_features is not None else dataset.features
    y = dataset.labels
    lip, mu = model.lipschitz_mu(X, y)
    if mu <= 0:
        raise ValueError("dataset does not induce strong convexity")

    if isinstance(model, QuadraticModel):
        w_ref = model.optimum(X, y)
    else:
        w_ref = np.zeros(X.shape[1])
        for _ in range(200):
            w_ref = w_ref - (1.0 / lip) * model.grad(w_ref, X, y)

    rng = seeded_rng(seed, "constants/probe")
    scale = float(np.linalg.norm(w_ref)) + 1.0
    probes = [w_ref, np.zeros_like(w_ref)]
    for radius in (0.1, 0.3, 1.0, 3.0):
        for _ in range(max(1, n_probe // 4)):
            probes.append(w_ref + rng.normal(0.0, radius * scale / np.sqrt(len(w_ref)),
                                             size=len(w_ref)))
    gsq = np.array([float(model.grad(w, X, y) @ model.grad(w, X, y)) for w in probes])
    zmax = np.array([float(model.per_sample_grad_sq(w, X, y).max()) for w in probes])

    a = np.vstack([np.ones_like(gsq), gsq]).T
    coef, *_ = np.linalg.lstsq(a, zmax, rcond=None)
    c1, c2 = float(coef[0]), float(coef[1])
    if c2 <= 0:
        c2 = 1e-9
    if c1 <= 0:
        c1 = 1e-9
    cover = float(np.max(zmax / (c1 + c2 * gsq)))
    if cover > 1.0:
        c1 *= cover
        c2 *= cover
    c1 *= 1.05
    c2 *= 1.05

    m = X.shape[1]
    if m > 256:
        raise ValueError("mixed-Hessian sampling supports feature_dim <= 256")
    sample_idx = rng.choice(len(X), size=min(len(X), 128), replace=False)
    eta = 0.0
    for w in probes[:6]:
        for i in sample_idx[:32]:
            s = np.linalg.svd(model.mixed_hessian(w, X[i], y[i]), compute_uv=False)[0]
            eta = max(eta, float(s) ** 2)
    eta *= 1.05

    return LearningConstants(lipschitz=lip, strong_convexity=mu, c1=c1, c2=c2,
                             gradient_coupling=eta, feature_dim=m)


@dataclass(frozen=True)
class BoundReport:
    lhs: np.ndarray        # measured mean gap per round (1..T)
    rhs: np.ndarray        # bound prediction per round
    violations: int
    fraction: float


def check_theorem_bound(replica_records, devices, constants: LearningConstants
                        ) -> BoundReport:
    """Compare Monte-Carlo mean gaps against the per-round bound.

    ``replica_records`` holds the output of :func:`simulate` for independent
    delivery seeds on an otherwise identical run (same model, datasets, and
    trajectory, so the per-round error rates agree across replicas).
    """
    gaps = np.array([[rec.gap for rec in records] for records in replica_records])
    if not np.isfinite(gaps).all():
        raise ValueError("bound checking needs a model with a known optimum")
    mean_gap = gaps.mean(axis=0)          # index t = round t (0-based row 0 = start)
    pers = np.array([rec.per for rec in replica_records[0]])[1:]  # (T, N)
    sizes = np.array([d.dataset_size for d in devices], dtype=float)
    s2 = np.array([d.noise_var for d in devices], dtype=float)
    phi, j, k, _ = terms_arrays(pers, sizes, s2, constants)
    rhs = phi * mean_gap[:-1] + j + k
    lhs = mean_gap[1:]
    violations = int((lhs > rhs).sum())
    return BoundReport(lhs=lhs, rhs=rhs, violations=violations,
                       fraction=violations / len(lhs))
