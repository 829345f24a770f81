"""Segmentation losses, AdamW and the two-phase transductive training loop.

Phase 1 trains on seen-class pixels only. Phase 2 relabels every pixel whose
ground truth is not a seen class with the unseen class that the label
generator (a previous snapshot of the model) scores highest, then trains on
the full map.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .alignment import Model, PipelineConfig, Prediction, forward, init_model, normalize_rows
from .autodiff import Tensor, as_tensor, no_grad
from .synthetic import ClassPartition, World, WorldConfig

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    """Loss or gradient became non-finite."""


@dataclass(frozen=True)
class LossWeights:
    w_ce: float = 1.0
    w_focal: float = 20.0
    w_dice: float = 1.0
    gamma: float = 2.0

    def __post_init__(self):
        if min(self.w_ce, self.w_focal, self.w_dice) < 0:
            raise TrainingError("loss weights must be nonnegative")


@dataclass(frozen=True)
class Schedule:
    total_iters: int = 3000
    lr: float = 1e-2
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    phase1_fraction: float = 0.2
    n_train_scenes: int = 16
    n_eval_scenes: int = 12
    eval_every: int = 250
    label_policy: str = "live"  # or "frozen"
    init_context_std: float = 0.5

    def __post_init__(self):
        if self.total_iters < 1:
            raise TrainingError("total_iters must be >= 1")
        if self.label_policy not in ("live", "frozen"):
            raise TrainingError("label_policy must be 'live' or 'frozen'")

    @property
    def phase1_iters(self) -> int:
        return max(1, int(round(self.phase1_fraction * self.total_iters)))


# ----------------------------------------------------------------- losses

def _one_hot(gt, k: int) -> np.ndarray:
    gt = np.asarray(gt)
    if gt.ndim == 2:
        return gt.astype(np.float64)
    return np.eye(k)[gt.reshape(-1)]


def _mask(mask, n: int) -> np.ndarray:
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if not mask.any():
        raise TrainingError("loss mask selects no pixels")
    return mask


def ce_loss(probs, gt, mask=None) -> Tensor:
    """Per-channel binary cross-entropy on class probabilities, mean over masked pixels."""
    probs = as_tensor(probs)
    y = _one_hot(gt, probs.shape[-1])
    m = _mask(mask, probs.shape[0])
    p = probs.clip(PROB_CLAMP, 1.0 - PROB_CLAMP)
    per_pixel = (p.log() * y + (1.0 - p).log() * (1.0 - y)).sum(axis=-1)
    return -(per_pixel * m).sum() * (1.0 / m.sum())


def focal_loss(logits, gt, mask=None, gamma: float = 2.0) -> Tensor:
    logits = as_tensor(logits)
    y = _one_hot(gt, logits.shape[-1])
    m = _mask(mask, logits.shape[0])
    sig = logits.sigmoid()
    log_p = logits.log_sigmoid()
    log_q = (-logits).log_sigmoid()
    if gamma == 0:
        terms = log_p * y + log_q * (1.0 - y)
    else:
        terms = (1.0 - sig) ** gamma * log_p * y + sig**gamma * log_q * (1.0 - y)
    return -(terms.sum(axis=-1) * m).sum() * (1.0 / m.sum())


def sigmoid_bce(logits, gt, mask=None) -> Tensor:
    logits = as_tensor(logits)
    y = _one_hot(gt, logits.shape[-1])
    m = _mask(mask, logits.shape[0])
    terms = logits.log_sigmoid() * y + (-logits).log_sigmoid() * (1.0 - y)
    return -(terms.sum(axis=-1) * m).sum() * (1.0 / m.sum())


def dice_loss(probs, gt, mask=None) -> Tensor:
    probs = as_tensor(probs)
    y = _one_hot(gt, probs.shape[-1])
    m = _mask(mask, probs.shape[0])[:, None]
    y = y * m
    pm = probs * m
    denom = float((y * y).sum()) + (pm * pm).sum()
    if denom.data == 0:
        raise TrainingError("dice denominator is zero")
    return 1.0 - (pm * y).sum() * 2.0 / denom


def loss_terms(logits, gt, mask, w: LossWeights) -> dict[str, Tensor]:
    logits = as_tensor(logits)
    probs = logits.softmax(axis=-1)
    return {
        "ce": ce_loss(probs, gt, mask),
        "focal": focal_loss(logits, gt, mask, w.gamma),
        "dice": dice_loss(probs, gt, mask),
    }


def seg_loss(logits, gt, mask, w: LossWeights) -> Tensor:
    t = loss_terms(logits, gt, mask, w)
    return t["ce"] * w.w_ce + t["focal"] * w.w_focal + t["dice"] * w.w_dice


def total_loss(pred: Prediction, gt, mask, w: LossWeights) -> Tensor:
    return seg_loss(pred.y, gt, mask, w) + seg_loss(pred.y_tilde, gt, mask, w)


def loss_breakdown(pred: Prediction, gt, mask, w: LossWeights) -> tuple[Tensor, dict[str, float]]:
    """Total loss plus the unweighted component sums over both prediction heads."""
    ty = loss_terms(pred.y, gt, mask, w)
    tt = loss_terms(pred.y_tilde, gt, mask, w)
    total = None
    parts = {}
    for name, weight in (("ce", w.w_ce), ("focal", w.w_focal), ("dice", w.w_dice)):
        pair = ty[name] + tt[name]
        parts[name] = float(pair.data)
        total = pair * weight if total is None else total + pair * weight
    return total, parts


# ----------------------------------------------------------- pseudo labels

def pseudo_label(y_tilde, gt, partition: ClassPartition) -> np.ndarray:
    """Relabel pixels outside the seen set with their best unseen class."""
    if not partition.unseen:
        raise TrainingError("no unseen classes to assign")
    scores = np.asarray(getattr(y_tilde, "data", y_tilde))
    gt = np.asarray(gt)
    flat = gt.reshape(-1)
    unseen = np.asarray(partition.unseen)
    out = flat.copy()
    relabel = ~np.isin(flat, partition.seen)
    if relabel.any():
        out[relabel] = unseen[np.argmax(scores[relabel][:, unseen], axis=1)]
    return out.reshape(gt.shape)


# ----------------------------------------------------------------- AdamW

class AdamW:
    def __init__(self, params: dict[str, Tensor], lr=1e-2, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.params = params
        self.lr, self.betas, self.eps, self.wd = lr, betas, eps, weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1**self.t)
            vhat = self.v[k] / (1 - b2**self.t)
            p.data = p.data * (1 - self.lr * self.wd) - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        out["adam.t"] = np.array([self.t], dtype=np.float64)
        return out


# ---------------------------------------------------------------- gradients

def backward(model: Model, world: World, scene, pipe: PipelineConfig, w: LossWeights,
             gt=None, mask=None) -> dict[str, np.ndarray]:
    """Gradients of the total loss for every trainable group."""
    params = model.parameters()
    for p in params.values():
        p.zero_grad()
    gt = scene.labels.reshape(-1) if gt is None else np.asarray(gt).reshape(-1)
    pred = forward(scene, model, world.text_encoder, pipe)
    loss = total_loss(pred, gt, mask, w)
    loss.backward()
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {k}")
    return grads


# ------------------------------------------------------------------ driver

@dataclass
class TrainState:
    model: Model
    optimizer: AdamW
    step: int = 0
    phase: int = 1

    def arrays(self) -> dict[str, np.ndarray]:
        out = {k: p.data for k, p in self.model.parameters().items()}
        out.update(self.optimizer.state())
        out["state.step"] = np.array([self.step], dtype=np.float64)
        out["state.phase"] = np.array([self.phase], dtype=np.float64)
        return out


@dataclass
class FitResult:
    state: TrainState
    trace: list[dict] = field(default_factory=list)
    pseudo_label_calls: int = 0


def evaluate(model: Model, world: World, scenes, pipe: PipelineConfig) -> dict[str, float]:
    acc = metrics.ConfusionAccumulator(world.cfg.n_classes)
    with no_grad():
        for sc in scenes:
            pred = forward(sc, model, world.text_encoder, pipe)
            metrics.accumulate(acc, np.argmax(pred.y_star.data, axis=1), sc.labels.reshape(-1))
    part = world.partition
    s = metrics.miou(acc, part.seen)
    u = metrics.miou(acc, part.unseen)
    return {"miou_seen": s, "miou_unseen": u, "hiou": metrics.hiou(s, u) if s + u > 0 else 0.0,
            "pacc": metrics.pacc(acc)}


def train_scene_seeds(schedule: Schedule) -> list[int]:
    return [schedule.seed * 100_003 + i for i in range(schedule.n_train_scenes)]


def eval_scene_seeds(schedule: Schedule) -> list[int]:
    return [10_000_000 + schedule.seed * 100_003 + i for i in range(schedule.n_eval_scenes)]


def prompt_embeddings(model: Model, world: World) -> np.ndarray:
    with no_grad():
        return normalize_rows(world.text_encoder.encode(model.contexts)).data


def fit(world: World, pipe: PipelineConfig, schedule: Schedule, weights: LossWeights | None = None,
        callback=None) -> FitResult:
    """Run phase 1 for ``schedule.phase1_iters`` steps, then self-training."""
    weights = weights or LossWeights()
    rng = np.random.default_rng([schedule.seed, 11])
    model = init_model(world.cfg, rng, schedule.init_context_std)
    opt = AdamW(model.parameters(), schedule.lr, schedule.betas, weight_decay=schedule.weight_decay)
    state = TrainState(model, opt)
    result = FitResult(state)
    train = [world.generate_scene(s) for s in train_scene_seeds(schedule)]
    evals = [world.generate_scene(s) for s in eval_scene_seeds(schedule)]
    part = world.partition
    t_g = schedule.phase1_iters
    half = schedule.total_iters // 2
    generator = None  # label-generator snapshot
    order = rng.permutation(len(train))

    for t in range(1, schedule.total_iters + 1):
        if (t - 1) % len(train) == 0 and t > 1:
            order = rng.permutation(len(train))
        scene = train[order[(t - 1) % len(train)]]
        gt = scene.labels.reshape(-1)
        if t <= t_g:
            state.phase = 1
            mask = np.isin(gt, part.seen)
            if not mask.any():
                mask = None
                gt_used = None
            else:
                gt_used = gt
        else:
            state.phase = 2
            if schedule.label_policy == "frozen" and t <= max(half, t_g + 1):
                gen = generator
            else:
                gen = prev_model
            with no_grad():
                y_t = forward(scene, gen, world.text_encoder, pipe).y_tilde.data
            gt_used = pseudo_label(y_t, gt, part)
            result.pseudo_label_calls += 1
            mask = np.ones(gt.size, dtype=bool)

        opt.zero_grad()
        if gt_used is None:
            # no seen pixels in this scene: nothing to learn in phase 1
            prev_model = model.copy()
            row = {"step": t, "phase": state.phase, "loss_total": 0.0, "loss_ce": 0.0,
                   "loss_focal": 0.0, "loss_dice": 0.0}
        else:
            pred = forward(scene, model, world.text_encoder, pipe)
            loss, parts = loss_breakdown(pred, gt_used, mask, weights)
            if not np.isfinite(loss.data):
                raise DivergenceError(f"loss became non-finite at step {t}")
            loss.backward()
            for k, p in model.parameters().items():
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    raise DivergenceError(f"non-finite gradient in {k} at step {t}")
            prev_model = model.copy()
            opt.step()
            row = {"step": t, "phase": state.phase, "loss_total": float(loss.data),
                   "loss_ce": parts["ce"], "loss_focal": parts["focal"], "loss_dice": parts["dice"]}
        if t == t_g:
            generator = model.copy()
        state.step = t
        if t % schedule.eval_every == 0 or t == schedule.total_iters:
            row.update(evaluate(model, world, evals, pipe))
            result.trace.append(row)
            log.info("step %d phase %d loss %.4f hiou %.3f", t, state.phase, row["loss_total"], row["hiou"])
        if callback is not None:
            callback(t, row)
    return result


def train_miou_seen(model: Model, world: World, schedule: Schedule, pipe: PipelineConfig) -> float:
    scenes = [world.generate_scene(s) for s in train_scene_seeds(schedule)]
    acc = metrics.ConfusionAccumulator(world.cfg.n_classes)
    with no_grad():
        for sc in scenes:
            pred = forward(sc, model, world.text_encoder, pipe)
            metrics.accumulate(acc, np.argmax(pred.y_star.data, axis=1), sc.labels.reshape(-1))
    return metrics.miou(acc, world.partition.seen)
