"""Joint optimization of network weights and gates on synthetic data.

The loss couples per-pixel cross entropy with the quadratic budget penalty
on the alpha-weighted expected routing cost; SGD with momentum, weight decay
and the poly learning-rate schedule drives both the convolution weights and
the gate parameters.  The synthetic task paints axis-aligned squares whose
side lengths are drawn from per-class scale bands, so routing has a scale
signal to adapt to.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import engine
from .costs import CostModel, real_total_cost
from .engine import Graph, Tensor, backward
from .errors import ConfigError, DataError, DynRouteError, NumericError
from .network import (NetworkParams, RouteLog, build_network, network_forward,
                      stable_seed)
from .ops import softmax_cross_entropy
from .space import ArchMask, build_space, max_scale_at

# Budget presets: name -> (lambda2, mu).
BUDGET_PRESETS = {"A": (0.8, 0.1), "B": (0.5, 0.1), "C": (0.5, 0.2)}


@dataclass
class TrainConfig:
    layers: int = 4
    base_channels: int = 8
    classes: int = 4
    input_size: int = 64
    batch: int = 4
    max_iter: int = 2000
    seed: int = 0
    lambda1: float = 1.0
    lambda2: float = 0.0
    mu: float = 0.0
    base_lr: float = 0.05
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    dataset_size: int = 64
    budget_preset: str | None = None
    frozen_mask: ArchMask | None = None

    def __post_init__(self):
        if self.budget_preset is not None:
            if self.budget_preset not in BUDGET_PRESETS:
                raise ConfigError(f"unknown budget preset {self.budget_preset!r}; "
                                  f"known: {sorted(BUDGET_PRESETS)}")
            self.lambda2, self.mu = BUDGET_PRESETS[self.budget_preset]
        if not 0.0 <= self.mu <= 1.0:
            raise ConfigError(f"mu must lie in [0, 1], got {self.mu}")
        if self.lambda2 < 0:
            raise ConfigError(f"lambda2 must be >= 0, got {self.lambda2}")
        if self.input_size % 32:
            raise ConfigError(f"input_size {self.input_size} must divide by 32")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")

    @property
    def budget_active(self):
        return self.lambda2 > 0


@dataclass
class MetricsRecord:
    iteration: int
    task_loss: float
    budget_loss: float
    cost_ratio: float
    lr: float
    open_frac: dict                # scale index -> fraction of open legal paths

    def to_line(self):
        parts = [f"iter={self.iteration}",
                 f"task_loss={self.task_loss!r}",
                 f"budget_loss={self.budget_loss!r}",
                 f"cost_ratio={self.cost_ratio!r}",
                 f"lr={self.lr!r}"]
        parts += [f"open_s{s}={self.open_frac[s]!r}" for s in sorted(self.open_frac)]
        return " ".join(parts)

    @classmethod
    def from_line(cls, line):
        kv = dict(p.split("=", 1) for p in line.split())
        open_frac = {int(k[6:]): float(v) for k, v in kv.items()
                     if k.startswith("open_s")}
        return cls(iteration=int(kv["iter"]), task_loss=float(kv["task_loss"]),
                   budget_loss=float(kv["budget_loss"]),
                   cost_ratio=float(kv["cost_ratio"]), lr=float(kv["lr"]),
                   open_frac=open_frac)


# ---------------------------------------------------------------------------
# Optimizer pieces
# ---------------------------------------------------------------------------

def poly_lr(iteration, max_iter, base_lr, power=0.9):
    """base_lr * (1 - iter/max_iter) ** power."""
    if max_iter <= 0:
        raise ConfigError(f"max_iter must be positive, got {max_iter}")
    if not 0 <= iteration <= max_iter:
        raise ConfigError(f"iteration {iteration} outside [0, {max_iter}]")
    return base_lr * (1.0 - iteration / max_iter) ** power


def sgd_step(theta, grad, velocity, lr, momentum=0.9, weight_decay=1e-4):
    """One SGD update: v <- momentum*v + (g + wd*theta); theta <- theta - lr*v.

    Pure function over arrays; returns (new_theta, new_velocity).
    """
    theta = np.asarray(theta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if theta.shape != grad.shape:
        from .errors import ShapeError
        raise ShapeError(f"sgd_step: theta {theta.shape} vs grad {grad.shape}")
    v = momentum * np.asarray(velocity, dtype=float) + grad + weight_decay * theta
    return theta - lr * v, v


class SGD:
    """Momentum SGD over a network's named parameters (in-place updates)."""

    def __init__(self, named_params, momentum=0.9, weight_decay=1e-4):
        self.params = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(t.data) for name, t in self.params}

    def zero_grad(self):
        for _, t in self.params:
            t.zero_grad()

    def step(self, lr):
        for name, t in self.params:
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            new_theta, new_v = sgd_step(t.data, g, self.velocity[name], lr,
                                        self.momentum, self.weight_decay)
            t.data[...] = new_theta
            self.velocity[name] = new_v


# ---------------------------------------------------------------------------
# Synthetic scale-varying segmentation data
# ---------------------------------------------------------------------------

def class_scale_band(cls, k_classes, size):
    """Side-length range for a foreground class; higher class = larger scale."""
    lo_all, hi_all = max(2, size // 16), int(size * 0.75)
    bands = k_classes - 1
    i = cls - 1
    lo = lo_all * (hi_all / lo_all) ** (i / bands)
    hi = lo_all * (hi_all / lo_all) ** ((i + 1) / bands)
    return max(2, int(round(lo))), max(3, int(round(hi)))


def sample_scene(rng, size, k_classes, classes=None, n_range=(2, 4)):
    """Draw square descriptors (cls, top, left, side) for one image."""
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    scene = []
    for _ in range(n):
        cls = int(rng.choice(classes)) if classes is not None \
            else int(rng.integers(1, k_classes))
        lo, hi = class_scale_band(cls, k_classes, size)
        side = int(rng.integers(lo, hi + 1))
        side = min(side, size - 1)
        top = int(rng.integers(0, size - side))
        left = int(rng.integers(0, size - side))
        scene.append((cls, top, left, side))
    return scene


def rasterize_label(scene, size):
    """Paint squares in order onto a background-0 label map."""
    label = np.zeros((size, size), dtype=np.int64)
    for cls, top, left, side in scene:
        label[top:top + side, left:left + side] = cls
    return label


def render_image(scene, size, rng, k_classes):
    """3-channel image: noisy background, per-class colored squares."""
    img = rng.normal(0.0, 0.1, size=(3, size, size))
    for cls, top, left, side in scene:
        color = np.zeros(3)
        color[cls % 3] = 1.0
        color[(cls + 1) % 3] = 0.3
        intensity = rng.uniform(0.6, 1.0)
        patch = color[:, None, None] * intensity
        patch = patch + rng.normal(0.0, 0.05, size=(3, side, side))
        img[:, top:top + side, left:left + side] = patch
    return img


def synth_dataset(seed, n, size, k_classes):
    """Deterministic list of (image (3,s,s), label (s,s)) pairs."""
    if size % 32:
        raise ConfigError(f"size {size} must divide by 32")
    if k_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {k_classes}")
    rng = np.random.Generator(np.random.PCG64(stable_seed(seed, "synth")))
    out = []
    for _ in range(n):
        scene = sample_scene(rng, size, k_classes)
        out.append((render_image(scene, size, rng, k_classes),
                    rasterize_label(scene, size)))
    return out


def scale_probe_pair(seed, size, k_classes):
    """One small-square-only and one large-square-only image (no labels)."""
    rng = np.random.Generator(np.random.PCG64(stable_seed(seed, "probe")))
    small = sample_scene(rng, size, k_classes, classes=[1], n_range=(3, 4))
    large = sample_scene(rng, size, k_classes, classes=[k_classes - 1],
                         n_range=(1, 2))
    return (render_image(small, size, rng, k_classes),
            render_image(large, size, rng, k_classes))


# ---------------------------------------------------------------------------
# Loss and the training loop
# ---------------------------------------------------------------------------

def joint_loss(logits, target, expected_cost, real_total, cfg):
    """lambda1 * cross_entropy + lambda2 * (expected/real - mu)^2.

    Returns (loss Tensor, task_value, budget_value).  The budget term joins
    the graph only when lambda2 > 0 and the expected cost is differentiable
    (a Tensor); with a frozen route it is a constant and contributes no
    gradient.
    """
    if real_total <= 0:
        raise ConfigError(f"real total cost must be positive, got {real_total}")
    task = softmax_cross_entropy(logits, target)
    task_value = task.item()
    if isinstance(expected_cost, Tensor):
        ratio_value = expected_cost.item() / real_total
    else:
        ratio_value = float(expected_cost) / real_total
    budget_value = (ratio_value - cfg.mu) ** 2

    loss = engine.scale(task, cfg.lambda1)
    if cfg.lambda2 > 0 and isinstance(expected_cost, Tensor):
        ratio = engine.scale(expected_cost, 1.0 / real_total)
        penalty = engine.square(engine.add_const(ratio, -cfg.mu))
        loss = engine.add(loss, engine.scale(penalty, cfg.lambda2))
    return loss, task_value, budget_value


def open_fractions(route, space):
    """Per-scale fraction of open legal paths across the batch."""
    from .space import PATH_INDEX
    opens = {}
    counts = {}
    for nid, dec in route.items():
        legal_idx = [PATH_INDEX[k] for k in dec.legal]
        s = nid.scale
        opens[s] = opens.get(s, 0) + int(dec.open[:, legal_idx].sum())
        counts[s] = counts.get(s, 0) + dec.open.shape[0] * len(legal_idx)
    return {s: (opens[s] / counts[s] if counts[s] else 0.0)
            for s in range(max_scale_at(space.layers) + 1) if s in counts}


@dataclass
class TrainResult:
    params: NetworkParams
    metrics: list
    route_log: RouteLog
    real_total: float
    velocity: dict = field(default_factory=dict)


class TrainingDiverged(DynRouteError):
    def __init__(self, record):
        super().__init__(f"training diverged at iteration {record.iteration}")
        self.record = record


def train(cfg, params=None, start_iter=0, velocity=None, on_metrics=None):
    """Run the optimization loop; returns a TrainResult.

    ``params`` / ``start_iter`` / ``velocity`` support resuming from a
    checkpoint.  ``on_metrics`` is called with each MetricsRecord as it is
    produced (used by the CLI to stream the metrics file).
    """
    space = build_space(cfg.layers, cfg.base_channels)
    if params is None:
        params = build_network(space, cfg.classes, seed=cfg.seed,
                               gate_downsample=cfg.budget_active)
    model = CostModel(space, (cfg.input_size, cfg.input_size),
                      classes=cfg.classes, gate_downsample=cfg.budget_active)
    if cfg.frozen_mask is not None:
        from .costs import static_cost_report
        real_total = float(static_cost_report(
            model, _full_reference_mask(space), include_gates=False).total.macs)
    else:
        real_total = float(real_total_cost(model))

    data = synth_dataset(cfg.seed, cfg.dataset_size, cfg.input_size, cfg.classes)
    batch_rng = np.random.Generator(np.random.PCG64(stable_seed(cfg.seed, "batches")))

    trainable = [(n, t) for n, t in params.named_parameters()]
    if cfg.frozen_mask is not None:
        # Gates are bypassed entirely under a frozen route.
        trainable = [(n, t) for n, t in trainable if ".gate." not in n]
    opt = SGD(trainable, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    if velocity:
        for name in opt.velocity:
            if name in velocity:
                opt.velocity[name] = velocity[name].copy()

    log = RouteLog(space)
    metrics = []
    for it in range(start_iter, cfg.max_iter):
        idx = batch_rng.choice(len(data), size=cfg.batch, replace=False)
        images = np.stack([data[i][0] for i in idx])
        labels = np.stack([data[i][1] for i in idx])
        x = engine.from_array(images)

        opt.zero_grad()
        with Graph() as g:
            result = network_forward(x, params, mode="train",
                                     frozen_mask=cfg.frozen_mask,
                                     budget_active=cfg.budget_active)
            loss, task_value, budget_value = joint_loss(
                result.logits, labels, result.expected_cost, real_total, cfg)
        loss_value = loss.item()
        if isinstance(result.expected_cost, Tensor):
            ratio = result.expected_cost.item() / real_total
        else:
            ratio = float(result.expected_cost) / real_total

        lr = poly_lr(it, cfg.max_iter, cfg.base_lr, cfg.power)
        record = MetricsRecord(iteration=it, task_loss=task_value,
                               budget_loss=budget_value, cost_ratio=ratio,
                               lr=lr, open_frac=open_fractions(result.route, space))
        if not np.isfinite(loss_value):
            metrics.append(record)
            if on_metrics:
                on_metrics(record)
            raise TrainingDiverged(record)

        backward(g, loss)
        opt.step(lr)
        log.add_forward(result.route)
        metrics.append(record)
        if on_metrics:
            on_metrics(record)

    return TrainResult(params=params, metrics=metrics, route_log=log,
                       real_total=real_total, velocity=opt.velocity)


def _full_reference_mask(space):
    from .space import full_mask
    return full_mask(space)


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(path, params, cfg, iteration, velocity):
    arrays = {}
    for name, t in params.named_parameters():
        arrays[f"param:{name}"] = t.data
    for name, arr in params.named_buffers():
        arrays[f"buffer:{name}"] = arr
    for name, v in velocity.items():
        arrays[f"vel:{name}"] = v
    cfg_dict = asdict(cfg)
    cfg_dict.pop("frozen_mask", None)
    meta = json.dumps({"iteration": iteration, "config": cfg_dict,
                       "frozen": cfg.frozen_mask is not None})
    np.savez_compressed(path, __meta__=np.frombuffer(meta.encode(), dtype=np.uint8),
                        **arrays)


def load_checkpoint(path, frozen_mask=None):
    """Returns (cfg, params, iteration, velocity)."""
    with np.load(path) as blob:
        meta = json.loads(bytes(blob["__meta__"]).decode())
        cfg_dict = meta["config"]
        cfg_dict["budget_preset"] = None  # lambda2/mu already resolved
        cfg = TrainConfig(**cfg_dict, frozen_mask=frozen_mask)
        space = build_space(cfg.layers, cfg.base_channels)
        params = build_network(space, cfg.classes, seed=cfg.seed,
                               gate_downsample=cfg.budget_active)
        for name, t in params.named_parameters():
            t.data[...] = blob[f"param:{name}"]
        for name, arr in params.named_buffers():
            arr[...] = blob[f"buffer:{name}"]
        velocity = {}
        for key in blob.files:
            if key.startswith("vel:"):
                velocity[key[4:]] = blob[key].copy()
    return cfg, params, meta["iteration"], velocity
