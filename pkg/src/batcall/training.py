"""Asymmetric loss, sharpness-aware Adam updates and the training loop."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .metrics import f1_scores, predict_scores

__all__ = [
    "AslConfig",
    "TrainConfig",
    "DivergenceError",
    "NonFiniteGradientError",
    "asymmetric_loss",
    "Adam",
    "sam_step",
    "cosine_lr",
    "HistoryRow",
    "FitResult",
    "fit",
    "tune_threshold",
    "write_history",
    "DEFAULT_GRID",
]

_CLAMP = 1e-7


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; ``history`` holds completed epochs."""

    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = history or []


class NonFiniteGradientError(DivergenceError):
    pass


@dataclass
class AslConfig:
    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    margin: float = 0.05

    def __post_init__(self):
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise ValueError("focusing exponents must be non-negative")
        if not 0 <= self.margin < 1:
            raise ValueError("margin must lie in [0, 1)")


@dataclass
class TrainConfig:
    lr_max: float = 5e-4
    lr_min: float = 0.0
    epochs: int = 25
    batch_size: int = 32
    sam_rho: float = 0.05
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    threshold: float = 0.5
    asl: AslConfig = field(default_factory=AslConfig)

    def __post_init__(self):
        if isinstance(self.asl, dict):
            self.asl = AslConfig(**self.asl)
        if self.lr_max <= 0:
            raise ValueError("lr_max must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.sam_rho < 0:
            raise ValueError("sam_rho must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- loss


def asymmetric_loss(probs: Tensor, targets, cfg: AslConfig | None = None) -> Tensor:
    """Mean asymmetric loss over batch and classes.

    Positives contribute ``-(1-p)^gp * log p``; negatives use the shifted
    probability ``pm = max(p - margin, 0)`` and contribute
    ``-pm^gn * log(1 - pm)``.  Probabilities are clamped to
    ``[1e-7, 1 - 1e-7]`` first; the clamp passes no gradient.
    """
    cfg = cfg or AslConfig()
    y = np.asarray(targets, dtype=probs.dtype)
    if y.shape != probs.shape:
        raise ad.ShapeError(f"targets {y.shape} do not match probabilities {probs.shape}")
    p_raw = probs.data
    p = np.clip(p_raw, _CLAMP, 1 - _CLAMP)
    inside = (p_raw >= _CLAMP) & (p_raw <= 1 - _CLAMP)
    gp, gn, m = cfg.gamma_pos, cfg.gamma_neg, cfg.margin

    q = 1 - p
    logp = np.log(p)
    pos = -(q**gp) * logp
    pm = np.maximum(p - m, 0.0)
    log1m = np.log1p(-pm)
    neg = -(pm**gn) * log1m
    n = p.size
    value = np.asarray(np.sum(y * pos + (1 - y) * neg) / n, dtype=probs.dtype)

    def bwd(g):
        dpos = -(q**gp) / p
        if gp:
            dpos = dpos + gp * q ** (gp - 1) * logp
        dneg = pm**gn / (1 - pm)
        if gn:
            safe = np.where(pm > 0, pm, 1.0)
            dneg = dneg - gn * np.where(pm > 0, safe ** (gn - 1), 0.0) * log1m
        dneg = np.where(p > m, dneg, 0.0)
        grad = (y * dpos + (1 - y) * dneg) * inside * (g / n)
        return (grad.astype(probs.dtype),)

    return ad.apply_op(value, (probs,), bwd, "asymmetric_loss")


# ---------------------------------------------------------------- optimisation


class Adam:
    """Adam with bias correction; reads gradients from ``param.grad``."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def _grads_finite(params) -> list[str]:
    return [p.name or f"param{i}" for i, p in enumerate(params) if p.grad is not None and not np.all(np.isfinite(p.grad))]


def sam_step(params, loss_fn, rho: float, base_optimizer, lr: float | None = None, buffers: dict | None = None) -> float:
    """One sharpness-aware update; returns the loss at the unperturbed weights.

    ``loss_fn`` builds the loss inside the active graph.  The ascent step is
    ``rho * g / (||g|| + 1e-12)`` with the norm taken over all parameters.
    When ``buffers`` is given, buffer updates made by the second pass are
    rolled back, so running statistics only see the unperturbed weights.
    """
    if rho < 0:
        raise ValueError("rho must be non-negative")
    params = list(params)
    ad.zero_grad(params)
    with ad.Graph():
        loss = loss_fn()
        ad.backward(loss)
    value = loss.item()
    bad = _grads_finite(params)
    if bad:
        raise NonFiniteGradientError(f"non-finite gradient in {bad[:3]} (loss={value})")

    if rho > 0:
        norm = math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params if p.grad is not None))
        scale = rho / (norm + 1e-12)
        saved = [p.data.copy() for p in params]
        for p in params:
            if p.grad is not None:
                p.data = p.data + (scale * p.grad).astype(p.dtype)
        kept = {k: v.copy() for k, v in buffers.items()} if buffers is not None else None
        ad.zero_grad(params)
        try:
            with ad.Graph():
                ad.backward(loss_fn())
        finally:
            for p, w in zip(params, saved):
                p.data = w
            if kept is not None:
                buffers.update(kept)
        bad = _grads_finite(params)
        if bad:
            raise NonFiniteGradientError(f"non-finite perturbed gradient in {bad[:3]}")
    base_optimizer.step(lr)
    return value


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == total_steps:
        return float(lr_min)
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------- loop


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_micro_f1: float
    val_macro_f1: float
    lr: float


@dataclass
class FitResult:
    model: object
    history: list
    best_epoch: int
    best_state: dict
    final_state: dict


def fit(model, train_stream, val_stream, cfg: TrainConfig, log=None) -> FitResult:
    """Train ``model`` in place; the best-by-validation weights are loaded at the end.

    Streams expose ``num_batches`` and ``batches(epoch)`` yielding
    ``(patches, mask, labels)``.  Without a validation stream every epoch
    counts as an improvement, so the final weights are kept.
    """
    params = model.parameters()
    opt = Adam(params, cfg.lr_max, (cfg.beta1, cfg.beta2), cfg.adam_eps)
    per_epoch = train_stream.num_batches
    if per_epoch < 1:
        raise ValueError("training stream is empty")
    total = cfg.epochs * per_epoch
    step = 0
    history: list[HistoryRow] = []
    best_state, best_epoch, best_score = model.state(), 0, -np.inf

    for epoch in range(1, cfg.epochs + 1):
        losses = []
        lr = cfg.lr_max
        for patches, mask, labels in train_stream.batches(epoch - 1):
            lr = cosine_lr(step, total, cfg.lr_max, cfg.lr_min)

            def loss_fn():
                logits = model(patches, mask, training=True)
                return asymmetric_loss(ad.sigmoid(logits), labels, cfg.asl)

            try:
                value = sam_step(params, loss_fn, cfg.sam_rho, opt, lr, model.buffers)
            except NonFiniteGradientError as exc:
                model.load_state(best_state)
                raise NonFiniteGradientError(str(exc), history) from None
            if not math.isfinite(value):
                model.load_state(best_state)
                raise DivergenceError(f"loss became {value} at epoch {epoch}", history)
            losses.append(value)
            step += 1
        train_loss = float(np.mean(losses))
        if val_stream is not None:
            scores, truth = predict_scores(model, val_stream)
            micro, macro = f1_scores(scores > cfg.threshold, truth)
            score = macro
        else:
            micro = macro = float("nan")
            score = epoch
        history.append(HistoryRow(epoch, train_loss, micro, macro, lr))
        if score > best_score:
            best_score, best_epoch, best_state = score, epoch, model.state()
        if log is not None:
            log(history[-1])

    final_state = model.state()
    model.load_state(best_state)
    return FitResult(model, history, best_epoch, best_state, final_state)


DEFAULT_GRID = tuple(sorted({round(0.05 * i, 2) for i in range(1, 20)} | {0.33}))


def tune_threshold(model, val_stream, grid=DEFAULT_GRID) -> float:
    """Grid threshold maximising validation macro F1; ties go to the value nearest 0.5."""
    _check_grid(grid)
    scores, truth = predict_scores(model, val_stream)
    if len(scores) == 0:
        raise ValueError("validation stream is empty")
    return best_threshold(scores, truth, grid)


def _check_grid(grid) -> list:
    grid = sorted(float(t) for t in grid)
    if not grid or any(not 0 < t < 1 for t in grid):
        raise ValueError("grid must be a non-empty subset of (0, 1)")
    return grid


def best_threshold(scores: np.ndarray, truth: np.ndarray, grid) -> float:
    best, best_key = None, None
    for t in _check_grid(grid):
        macro = f1_scores(scores > t, truth)[1]
        key = (macro, -abs(t - 0.5))
        if best_key is None or key > best_key:
            best, best_key = t, key
    return best


def write_history(history, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "val_micro_f1", "val_macro_f1", "lr"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_micro_f1), repr(r.val_macro_f1), repr(r.lr)])
