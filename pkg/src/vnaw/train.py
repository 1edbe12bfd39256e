"""AdamW training loop, evaluation, end-to-end gradient checking and the ablation driver."""

from __future__ import annotations

import dataclasses
import logging
import time
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentConfig, Clip, augment_clip
from .config import ConfigError
from .data import GenConfig, LabeledClip, generate_dataset, worker_count
from .loss import NawParams, batch_loss, naw_ce_loss
from .metrics import ConfusionCounts, macro_f1, per_class_f1
from .model import ModelConfig, ModelParams, backward, backward_batch, forward, forward_batch, pad_clips
from .tensors import RngStream, relative_error

log = logging.getLogger(__name__)

# Full-scale reference settings (clip length and batch size are documented, not defaults).
REFERENCE_LR = 1e-4
REFERENCE_FRAMES = 100
REFERENCE_BATCH = 4096


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = REFERENCE_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    augment: bool = False
    naw: bool = False
    lambda_min: float = 0.2
    lambda_max: float = 0.4
    erase_ratio: float = 0.2
    naw_mu: str = "uniform"
    naw_sigma: float = 0.2
    naw_weight_cap: float | None = None
    dim: int = 32
    heads: int = 2
    blocks: int = 2
    precision: str = "float64"
    val_fraction: float = 0.3
    eval_labels: str = "clean"
    per_frame: bool = False
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if not (0 < self.val_fraction < 1):
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.eval_labels not in ("clean", "noisy"):
            raise ConfigError("eval_labels must be 'clean' or 'noisy'")
        self.augment_config().validate()
        return self

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(self.lambda_min, self.lambda_max, self.erase_ratio)

    def model_config(self, channels: int, height: int, width: int, classes: int) -> ModelConfig:
        return ModelConfig(channels, height, width, self.dim, self.heads, self.blocks, classes,
                           precision=self.precision)

    def naw_params(self, classes: int) -> NawParams | None:
        if not self.naw:
            return None
        return NawParams.create(classes, self.naw_mu, self.naw_sigma, self.naw_weight_cap)


# -- optimiser --------------------------------------------------------------------

@dataclass
class OptState:
    m: "OrderedDict[str, np.ndarray]"
    v: "OrderedDict[str, np.ndarray]"
    step: int = 0

    @classmethod
    def init(cls, params: ModelParams) -> "OptState":
        return cls(params.zeros_like(), params.zeros_like())

    def check_shapes(self, params: ModelParams) -> None:
        for name, arr in params.items():
            if self.m[name].shape != arr.shape or self.v[name].shape != arr.shape:
                raise ValueError(f"optimizer state for {name} does not match parameter shape")


def optimizer_step(params: ModelParams, grads, state: OptState, cfg: TrainConfig):
    """One AdamW update, in place; returns ``(params, state)``.

    Weight decay multiplies the weights by ``1 - lr * weight_decay`` directly
    instead of entering the moment estimates.
    """
    state.check_shapes(params)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter group {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p *= 1.0 - cfg.lr * cfg.weight_decay
        p -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return params, state


# -- epochs ---------------------------------------------------------------------------

@dataclass
class RunStats:
    epoch: int
    loss: float
    mean_weight: float
    train_f1: float
    val_f1: float
    val_class_f1: np.ndarray
    wall_time: float = 0.0


def split_dataset(items: list, val_fraction: float = 0.3) -> tuple[list, list]:
    """Deterministic ordered split: leading ``1 - val_fraction`` for training."""
    n_train = int(round(len(items) * (1.0 - val_fraction)))
    n_train = min(max(n_train, 1), len(items) - 1) if len(items) > 1 else len(items)
    return items[:n_train], items[n_train:]


def loss_and_grads(params: ModelParams, clips: list[Clip], labels, naw: NawParams | None):
    """Batch-mean loss, per-clip weights and parameter gradients for one mini-batch."""
    values, mask, positions = pad_clips(clips, params.config.dtype)
    _, clip_probs, cache = forward_batch(params, values, mask, positions)
    out = batch_loss(clip_probs, np.asarray(labels), naw)
    grads = backward_batch(params, cache, out.grad.astype(params.config.dtype))
    return out.value, out.weight, grads, clip_probs


def _first_bad_clip(params: ModelParams, batch: list[LabeledClip]) -> str:
    for item in batch:
        try:
            forward(item.clip, params)
        except ValueError:
            return item.clip_id
    return "<unknown>"


def train_epoch(items: list[LabeledClip], params: ModelParams, opt: OptState, cfg: TrainConfig,
                rng: RngStream, naw: NawParams | None = None):
    """Shuffle, augment (if enabled), forward, loss, backward, AdamW step per batch.

    Returns ``(params, opt, mean_loss, mean_weight)``.
    """
    if not items:
        raise ValueError("empty training set")
    order = rng.split(0).gen.permutation(len(items))
    aug_cfg = cfg.augment_config()
    losses, weights = [], []
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        clips = []
        for i in idx:
            clip = items[i].clip
            if cfg.augment:
                clip = augment_clip(clip, aug_cfg, rng.split(1, int(i)))
            clips.append(clip)
        labels = [items[i].label for i in idx]
        try:
            loss, w, grads, clip_probs = loss_and_grads(params, clips, labels, naw)
        except ValueError as exc:
            if "invalid logits" not in str(exc):
                raise
            bad = _first_bad_clip(params, [items[i] for i in idx])
            raise NonFiniteError(f"non-finite loss on clip {bad}") from exc
        if not np.isfinite(loss):
            per_clip = naw_ce_loss(clip_probs, np.asarray(labels), naw).value
            bad = items[idx[int(np.argmax(~np.isfinite(per_clip)))]].clip_id
            raise NonFiniteError(f"non-finite loss on clip {bad}")
        optimizer_step(params, grads, opt, cfg)
        losses.append(loss * len(idx))
        weights.extend(np.atleast_1d(w).tolist())
    return params, opt, float(np.sum(losses) / len(order)), float(np.mean(weights))


def predict(params: ModelParams, items: list[LabeledClip], batch_size: int = 64,
            per_frame: bool = False):
    """Argmax predictions; per clip, or per retained frame when ``per_frame``."""
    preds = []
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        values, mask, positions = pad_clips([it.clip for it in chunk], params.config.dtype)
        frame_probs, clip_probs, _ = forward_batch(params, values, mask, positions)
        if per_frame:
            for b in range(len(chunk)):
                preds.append(frame_probs[b, mask[b]].argmax(axis=1))
        else:
            preds.extend(clip_probs.argmax(axis=1).tolist())
    return preds


def evaluate(params: ModelParams, items: list[LabeledClip], labels: str = "clean",
             per_frame: bool = False) -> ConfusionCounts:
    """Confusion counts against clean or noisy labels (no augmentation)."""
    k = params.config.classes
    truth = [it.clean_label if labels == "clean" else it.label for it in items]
    preds = predict(params, items, per_frame=per_frame)
    if per_frame:
        truth = np.concatenate([np.full(len(p), t) for p, t in zip(preds, truth)])
        preds = np.concatenate(preds)
    return ConfusionCounts.from_predictions(preds, truth, k)


def init_model(items: list[LabeledClip], cfg: TrainConfig, classes: int) -> ModelParams:
    _, c, h, w = items[0].clip.shape
    return ModelParams.init(cfg.model_config(c, h, w, classes), RngStream(cfg.seed, (2,)))


def infer_classes(items: list[LabeledClip]) -> int:
    return max(max(it.label, it.clean_label) for it in items) + 1


def fit(train_items, val_items, cfg: TrainConfig, classes: int | None = None, on_epoch=None):
    """Train from scratch; returns ``(params, [RunStats per epoch])``."""
    cfg.validate()
    classes = classes or infer_classes(list(train_items) + list(val_items))
    params = init_model(train_items, cfg, classes)
    opt = OptState.init(params)
    naw = cfg.naw_params(classes)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        params, opt, loss, w = train_epoch(train_items, params, opt, cfg, RngStream(cfg.seed, (3, epoch)), naw)
        train_counts = evaluate(params, train_items, "noisy")
        val_counts = evaluate(params, val_items, cfg.eval_labels, cfg.per_frame)
        stats = RunStats(epoch, loss, w, macro_f1(train_counts), macro_f1(val_counts),
                         per_class_f1(val_counts), time.perf_counter() - t0)
        log.info("epoch %d loss %.4f w* %.4g val F1 %.4f (%.1fs)", epoch, loss, w, stats.val_f1, stats.wall_time)
        history.append(stats)
        if on_epoch:
            on_epoch(stats)
    return params, history


# -- gradient check --------------------------------------------------------------------

TINY_CONFIG = ModelConfig(channels=1, height=6, width=6, dim=8, heads=2, blocks=1, classes=4)


def gradient_errors(params: ModelParams, clip: Clip, y: int, naw: NawParams | None,
                    step: float = 1e-5, max_coords: int | None = None,
                    rng: RngStream | None = None, loss_scale: float = 1.0) -> dict[str, float]:
    """Max relative error per parameter group between analytic and central-difference gradients.

    The loss is ``loss_scale * (1 + w*) * CE`` with ``w*`` frozen at the
    unperturbed point. Relative error uses ``max(|a|, |n|, 1e-3 * max|a|)``
    as denominator so coordinates whose exact gradient is zero (e.g. key
    biases, which softmax cancels) are judged against the gradient's scale.
    """
    _, clip_prob, cache = forward(clip, params)
    out = naw_ce_loss(clip_prob, y, naw)
    w = float(out.weight)
    grads = backward(params, cache, loss_scale * out.grad)

    def loss() -> float:
        _, p, _ = forward(clip, params)
        return loss_scale * (1.0 + w) * float(naw_ce_loss(p, y, None).value)

    scale = max(float(np.max(np.abs(g))) for g in grads.values())
    floor = max(1e-3 * scale, 1e-300)
    errors = {}
    for name, arr in params.items():
        coords = list(np.ndindex(arr.shape))
        if max_coords is not None and len(coords) > max_coords:
            pick = (rng or RngStream(0)).gen.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        analytic = np.array([grads[name][c] for c in coords])
        numeric = np.empty(len(coords))
        for j, c in enumerate(coords):
            orig = arr[c]
            arr[c] = orig + step
            fp = loss()
            arr[c] = orig - step
            fm = loss()
            arr[c] = orig
            numeric[j] = (fp - fm) / (2 * step)
        errors[name] = float(relative_error(analytic, numeric, floor).max())
    return errors


def check_gradients(params: ModelParams, clip: Clip, y: int, naw: NawParams | None,
                    step: float = 1e-5, **kwargs) -> float:
    return max(gradient_errors(params, clip, y, naw, step, **kwargs).values())


def tiny_problem(seed: int, frames: int = 3):
    """Random tiny model, clip and label for gradient checks."""
    rng = RngStream(seed, (4,))
    params = ModelParams.init(TINY_CONFIG, rng)
    cfg = TINY_CONFIG
    values = rng.gen.random((frames, cfg.channels, cfg.height, cfg.width))
    # skipped-looking source positions exercise the positional path
    indices = np.sort(rng.gen.choice(4 * frames, size=frames, replace=False))
    y = int(rng.gen.integers(cfg.classes))
    return params, Clip(values, indices), y


# -- ablation -----------------------------------------------------------------------------

# Desk-scale ablation defaults. At REFERENCE_LR a 20-epoch run never fits the noisy
# labels, so there is nothing for augmentation or NAW to regularise.
ABLATION_LR = 1e-3
ABLATION_GEN = GenConfig(imbalance=4.0, noise=0.2)
ABLATION_TRAIN = TrainConfig(lr=ABLATION_LR)

VARIANTS = (("vanilla", False, False), ("aug", True, False), ("naw", False, True), ("aug+naw", True, True))


@dataclass
class AblationTable:
    names: list[str]
    flags: list[tuple[bool, bool]]
    class_f1: np.ndarray  # (4, K), mean over seeds
    macro: np.ndarray  # (4,)
    per_seed: np.ndarray = field(default=None)  # (seeds, 4) macro-F1


def _ablation_job(args):
    gen_cfg, train_cfg, seed, aug, naw = args
    items = generate_dataset(dataclasses.replace(gen_cfg, seed=seed))
    train_items, val_items = split_dataset(items, train_cfg.val_fraction)
    cfg = dataclasses.replace(train_cfg, seed=seed, augment=aug, naw=naw)
    params, _ = fit(train_items, val_items, cfg, gen_cfg.classes)
    counts = evaluate(params, val_items, cfg.eval_labels, cfg.per_frame)
    return per_class_f1(counts), macro_f1(counts)


def run_ablation(gen_cfg: GenConfig, train_cfg: TrainConfig, seeds) -> AblationTable:
    """Train the four {augmentation, NAW} variants on the same data per seed; average over seeds."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    jobs = [(gen_cfg, train_cfg, s, aug, naw) for s in seeds for _, aug, naw in VARIANTS]
    workers = min(worker_count(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablation_job, jobs))
    else:
        results = [_ablation_job(j) for j in jobs]
    k = gen_cfg.classes
    cls = np.array([r[0] for r in results]).reshape(len(seeds), len(VARIANTS), k)
    macro = np.array([r[1] for r in results]).reshape(len(seeds), len(VARIANTS))
    return AblationTable(
        names=[v[0] for v in VARIANTS],
        flags=[(v[1], v[2]) for v in VARIANTS],
        class_f1=cls.mean(axis=0),
        macro=macro.mean(axis=0),
        per_seed=macro,
    )
