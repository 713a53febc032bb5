"""Point-to-center MLP used to seed Gaussian positions.

The network maps a (normalized) 3D point to a (normalized) Gaussian center;
predictions are denormalized back to world units before the squared-error
loss is taken. Training uses minibatch Adam and keeps the checkpoint with
the best held-out loss.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .scene import GaussianScene, SparsePointCloud, TriangleMesh, logit

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "geosplat-mlp"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, x):
        return np.asarray(x, dtype=np.float64) * self.std + self.mean

    @classmethod
    def identity(cls, dim: int = 3) -> "NormStats":
        return cls(np.zeros(dim), np.ones(dim))


def normalize_fit(points) -> tuple[NormStats, np.ndarray]:
    """Per-axis standardization of ``points``.

    Axes with zero spread keep a unit std (with a warning) so they pass
    through centered but unscaled.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 2:
        raise ValueError("normalize_fit needs at least 2 points")
    mean = pts.mean(axis=0)
    std = pts.std(axis=0)
    # identical values can leave a rounding-level std; treat that as zero spread too
    flat = std <= 1e-12 * np.max(np.abs(pts), axis=0)
    if np.any(flat):
        warnings.warn(f"degenerate axes {np.flatnonzero(flat).tolist()} have zero spread; std clamped to 1",
                      RuntimeWarning, stacklevel=2)
        std = np.where(flat, 1.0, std)
    stats = NormStats(mean, std)
    return stats, stats.apply(pts)


def augment(points, sigma: float, rng_seed) -> np.ndarray:
    """Add i.i.d. ``N(0, sigma^2)`` noise to every coordinate."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    pts = np.asarray(points, dtype=np.float64)
    if sigma == 0:
        return pts.copy()
    rng = np.random.default_rng(rng_seed)
    return pts + rng.normal(0.0, sigma, size=pts.shape)


@dataclass
class MlpModel:
    weights: list  # W[l] has shape (out, in)
    biases: list
    input_norm: NormStats = field(default_factory=NormStats.identity)
    output_denorm: NormStats = field(default_factory=NormStats.identity)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape[0] != b.shape[0]:
                raise ValueError(f"layer {l}: weight rows {W.shape[0]} != bias size {b.shape[0]}")
            if l and W.shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"layer {l}: input dim {W.shape[1]} != previous output {self.weights[l - 1].shape[0]}")
        if np.any(self.input_norm.std <= 0) or np.any(self.output_denorm.std <= 0):
            raise ValueError("normalization std must be positive")

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @classmethod
    def random(cls, dims: Sequence[int], rng, input_norm=None, output_denorm=None) -> "MlpModel":
        rng = np.random.default_rng(rng)
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, input_norm or NormStats.identity(dims[0]),
                   output_denorm or NormStats.identity(dims[-1]))

    @classmethod
    def near_identity(cls, dims: Sequence[int], rng, input_norm=None, output_denorm=None,
                      scale: float = 0.1) -> "MlpModel":
        """Random weights shrunk by ``scale`` plus an exact pass-through of the input.

        The first ``2 * d`` units of every hidden layer carry ``relu(x)`` and
        ``relu(-x)`` and the output layer recombines them, so the untrained
        network is the identity plus a small random term. Needs equal input
        and output widths and hidden layers at least ``2 * d`` wide.
        """
        d = dims[0]
        if dims[-1] != d or any(w < 2 * d for w in dims[1:-1]):
            raise ValueError(f"near-identity init needs {d} -> (>= {2 * d} wide hidden) -> {d}, got {list(dims)}")
        m = cls.random(dims, rng, input_norm, output_denorm)
        for W in m.weights:
            W *= scale
        if len(dims) == 2:
            m.weights[0] += np.eye(d)
            return m
        split = np.vstack([np.eye(d), -np.eye(d)])
        m.weights[0][:2 * d] = split
        for W in m.weights[1:-1]:
            W[:2 * d] = 0.0
            W[:2 * d, :2 * d] = np.eye(2 * d)
        m.weights[-1][:, :2 * d] = split.T
        return m

    def copy(self) -> "MlpModel":
        return MlpModel([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                        NormStats(self.input_norm.mean.copy(), self.input_norm.std.copy()),
                        NormStats(self.output_denorm.mean.copy(), self.output_denorm.std.copy()))

    def forward_normalized(self, xn):
        """Network on normalized inputs; returns output and per-layer activations."""
        acts = [xn]
        h = xn
        last = len(self.weights) - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W.T + b
            if l < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def __call__(self, x):
        return mlp_forward(self, x)


def mlp_forward(model: MlpModel, x) -> np.ndarray:
    """Predicted centers in world units for one point ``(3,)`` or a batch ``(N, 3)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.dims[0]:
        raise ValueError(f"input has dimension {x.shape[-1]}, model expects {model.dims[0]}")
    out, _ = model.forward_normalized(model.input_norm.apply(np.atleast_2d(x)))
    y = model.output_denorm.invert(out)
    return y[0] if x.ndim == 1 else y


def init_loss(preds, targets) -> float:
    """Mean squared center error ``(1/N) sum ||pred - gt||^2``."""
    preds = np.asarray(preds, dtype=np.float64).reshape(-1, 3)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    if len(preds) != len(targets):
        raise ValueError("preds and targets differ in length")
    if len(preds) == 0:
        raise ValueError("init_loss needs at least one pair")
    return float(np.mean(np.sum((preds - targets) ** 2, axis=1)))


def loss_and_grads(model: MlpModel, x, y):
    """World-unit init loss on a batch and its gradient w.r.t. every weight and bias."""
    xn = model.input_norm.apply(x)
    out, acts = model.forward_normalized(xn)
    pred = model.output_denorm.invert(out)
    diff = pred - y
    n = len(x)
    loss = float(np.sum(diff * diff) / n)
    delta = 2.0 * diff / n * model.output_denorm.std
    gW, gb = [None] * len(model.weights), [None] * len(model.weights)
    for l in range(len(model.weights) - 1, -1, -1):
        gW[l] = delta.T @ acts[l]
        gb[l] = delta.sum(axis=0)
        if l:
            delta = (delta @ model.weights[l]) * (acts[l] > 0)
    return loss, gW, gb


@dataclass
class InitTrainingSet:
    inputs: np.ndarray
    targets: np.ndarray
    noise_sigma: float = 0.0

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64).reshape(-1, 3)
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1, 3)
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets differ in length")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise ValueError("training set contains non-finite values")

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass
class InitConfig:
    hidden: tuple = (64, 64)
    lr: float = 1e-3
    epochs: int = 300
    batch: int = 64
    seed: int = 0
    holdout: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    final_lr_fraction: float = 0.1  # exponential decay target at the last epoch
    # start from the input map plus a small random term (see MlpModel.near_identity);
    # a fully random start converges too slowly to beat the identity baseline
    near_identity: bool = True


@dataclass
class InitReport:
    epoch_train_loss: list = field(default_factory=list)
    epoch_holdout_loss: list = field(default_factory=list)
    best_holdout_loss: float = np.inf
    best_epoch: int = -1
    holdout_inputs: Optional[np.ndarray] = None
    holdout_targets: Optional[np.ndarray] = None


class Adam:
    """Adam over a flat list of arrays, updated in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train_init(dataset: InitTrainingSet, config: Optional[InitConfig] = None) -> tuple[MlpModel, InitReport]:
    """Fit the init MLP; returns the best held-out checkpoint and its training log."""
    cfg = config or InitConfig()
    if len(dataset) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(len(dataset))
    n_hold = int(round(cfg.holdout * len(dataset))) if len(dataset) > 1 else 0
    hold, train = perm[:n_hold], perm[n_hold:]
    if n_hold == 0:
        hold = train
    x_tr, y_tr = dataset.inputs[train], dataset.targets[train]
    x_ho, y_ho = dataset.inputs[hold], dataset.targets[hold]

    if len(x_tr) >= 2:
        in_stats, _ = normalize_fit(x_tr)
        out_stats, _ = normalize_fit(y_tr)
    else:
        in_stats, out_stats = NormStats.identity(), NormStats.identity()
    dims = [3, *cfg.hidden, 3]
    if cfg.near_identity and dims[-1] == dims[0] and all(w >= 2 * dims[0] for w in cfg.hidden):
        model = MlpModel.near_identity(dims, rng, in_stats, out_stats)
    else:
        model = MlpModel.random(dims, rng, in_stats, out_stats)
    report = InitReport(holdout_inputs=x_ho, holdout_targets=y_ho)
    best = model.copy()
    report.best_holdout_loss = init_loss(mlp_forward(model, x_ho), y_ho)
    report.best_epoch = 0

    params = model.weights + model.biases
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2)
    decay = cfg.final_lr_fraction ** (1.0 / max(cfg.epochs - 1, 1))
    for epoch in range(cfg.epochs):
        x_ep = augment(x_tr, dataset.noise_sigma, rng.integers(2**63)) if dataset.noise_sigma > 0 else x_tr
        order = rng.permutation(len(x_tr))
        total = 0.0
        for start in range(0, len(order), cfg.batch):
            b = order[start:start + cfg.batch]
            loss, gW, gb = loss_and_grads(model, x_ep[b], y_tr[b])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite init loss at epoch {epoch}; lower the learning rate (lr={opt.lr})")
            opt.step(params, gW + gb)
            total += loss * len(b)
        opt.lr *= decay
        ho = init_loss(mlp_forward(model, x_ho), y_ho)
        report.epoch_train_loss.append(total / len(x_tr))
        report.epoch_holdout_loss.append(ho)
        if ho < report.best_holdout_loss:
            report.best_holdout_loss, report.best_epoch = ho, epoch + 1
            best = model.copy()
        log.debug("epoch %d train %.3e holdout %.3e", epoch, total / len(x_tr), ho)
    return best, report


def sample_surface(mesh: TriangleMesh, n: int, rng) -> np.ndarray:
    """Area-uniform samples on a mesh surface."""
    rng = np.random.default_rng(rng)
    v0, v1, v2 = (mesh.vertices[mesh.triangles[:, k]] for k in range(3))
    area = 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
    tri = rng.choice(len(area), size=n, p=area / area.sum())
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    return v0[tri] + u[:, None] * (v1[tri] - v0[tri]) + v[:, None] * (v2[tri] - v0[tri])


def denoising_dataset(clean, sigma: float, rng_seed) -> InitTrainingSet:
    """Pairs of (noisy point, clean point): a center-prediction task with known answers."""
    clean = np.asarray(clean, dtype=np.float64)
    return InitTrainingSet(augment(clean, sigma, rng_seed), clean)


def knn_mean_distance(points: np.ndarray, k: int = 3) -> np.ndarray:
    tree = cKDTree(points)
    d, _ = tree.query(points, k=k + 1)
    return d[:, 1:].mean(axis=1)


def seed_scene(cloud: SparsePointCloud, model: Optional[MlpModel] = None, opacity: float = 0.1) -> GaussianScene:
    """One isotropic Gaussian per cloud point, centered at the MLP prediction.

    ``model=None`` keeps the raw cloud positions. Scale is the mean distance
    to the 3 nearest predicted neighbours (1% of the bounding-box diagonal
    when there are fewer than 4 points).
    """
    if len(cloud) == 0:
        raise ValueError("cannot seed a scene from an empty cloud")
    mu = cloud.points.copy() if model is None else np.atleast_2d(mlp_forward(model, cloud.points))
    n = len(mu)
    if n >= 4:
        scale = knn_mean_distance(mu, 3)
        scale = np.maximum(scale, 1e-7)
    else:
        diag = float(np.linalg.norm(mu.max(0) - mu.min(0))) if n > 1 else 0.0
        scale = np.full(n, 0.01 * diag if diag > 0 else 0.01)
    color = cloud.colors if cloud.colors is not None else np.full((n, 3), 0.5)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianScene(mu, np.repeat(np.log(scale)[:, None], 3, axis=1), rot,
                         np.full(n, float(logit(opacity))), np.clip(color, 0.0, 1.0))


def _fmt(arr) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(arr).ravel())


def save_model(path, model: MlpModel) -> None:
    """Write the text checkpoint (see README for the layout)."""
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
             "dims " + " ".join(str(d) for d in model.dims),
             "input_mean " + _fmt(model.input_norm.mean),
             "input_std " + _fmt(model.input_norm.std),
             "output_mean " + _fmt(model.output_denorm.mean),
             "output_std " + _fmt(model.output_denorm.std)]
    for l, (W, b) in enumerate(zip(model.weights, model.biases)):
        lines.append(f"W{l} " + _fmt(W))
        lines.append(f"b{l} " + _fmt(b))
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path) -> MlpModel:
    text = Path(path).read_text().splitlines()
    if not text or text[0].split()[:1] != [CHECKPOINT_MAGIC]:
        raise ValueError(f"{path}: not a {CHECKPOINT_MAGIC} checkpoint")
    version = int(text[0].split()[1])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    fields = {}
    for line in text[1:]:
        if line.strip():
            key, *vals = line.split()
            fields[key] = vals
    dims = [int(v) for v in fields["dims"]]
    vec = lambda k: np.array([float(v) for v in fields[k]])  # noqa: E731
    weights, biases = [], []
    for l, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        W, b = vec(f"W{l}"), vec(f"b{l}")
        if W.size != fan_in * fan_out or b.size != fan_out:
            raise ValueError(f"{path}: layer {l} size does not match dims {dims}")
        weights.append(W.reshape(fan_out, fan_in))
        biases.append(b)
    return MlpModel(weights, biases, NormStats(vec("input_mean"), vec("input_std")),
                    NormStats(vec("output_mean"), vec("output_std")))
