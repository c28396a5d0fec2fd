"""Training losses, their weighted combination, the decoupled-weight-decay
adaptive-moment optimizer, the one-cycle schedule, and the train step.

The losses are fused diffgrid operations with hand-derived backward passes
(each is covered by the finite-difference suite). Regression and IoU losses
are masked to the ground-truth-injected queries; the heatmaps are supervised
purely on the rendered Gaussian targets.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import diffgrid as dg
from . import kernels
from .diffgrid import Tape, Value

_CLAMP = 1e-6
FOCAL_ALPHA = 2.0       # modulating exponent on the prediction
FOCAL_BETA_NEG = 4.0    # penalty-reduction exponent on soft negatives


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    w_hm: float = 1.0
    w_reg: float = 2.0
    w_iou: float = 1.0
    w_cor: float = 1.0

    def __post_init__(self):
        if min(self.w_hm, self.w_reg, self.w_iou, self.w_cor) < 0:
            raise ValueError("loss weights must be non-negative")


def focal_heatmap_loss(pred: Value, target: np.ndarray) -> Value:
    """Penalty-reduced pixel-wise focal loss, normalized by positive count.

    Positives are cells where the target is exactly 1 (the Gaussian peaks):
      -(1-p)^2 log p.  Negatives: -(1-t)^4 p^2 log(1-p).
    """
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"heatmap shapes differ: {pred.shape} vs {target.shape}")
    p = np.clip(pred.data, _CLAMP, 1.0 - _CLAMP)
    inside = (pred.data > _CLAMP) & (pred.data < 1.0 - _CLAMP)
    pos = target == 1.0
    n_pos = max(int(pos.sum()), 1)
    neg_w = (1.0 - target) ** FOCAL_BETA_NEG
    log_p = np.log(p)
    log_1p = np.log1p(-p)
    loss_pos = -((1.0 - p) ** FOCAL_ALPHA) * log_p
    loss_neg = -neg_w * (p ** FOCAL_ALPHA) * log_1p
    total = float((np.where(pos, loss_pos, loss_neg)).sum() / n_pos)
    out = Value(np.array(total))

    def backward(g):
        if not pred.requires_grad:
            return
        d_pos = 2.0 * (1.0 - p) * log_p - (1.0 - p) ** 2 / p
        d_neg = -neg_w * (2.0 * p * log_1p - p ** 2 / (1.0 - p))
        grad = np.where(pos, d_pos, d_neg) / n_pos
        pred.accum_grad(float(g) * grad * inside)

    return dg.record(out, (pred,), backward)


def reg_loss(pred_enc: Value, target_enc: np.ndarray, mask: np.ndarray) -> Value:
    """Mean absolute error over the 8 channels of masked entries; 0 if the
    mask is empty."""
    target_enc = np.asarray(target_enc, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred_enc.shape != target_enc.shape or pred_enc.shape[:1] != mask.shape:
        raise ValueError("regression loss shape mismatch")
    n = int(mask.sum())
    if n == 0:
        return _masked_zero(pred_enc)
    err = pred_enc.data - target_enc
    total = float(np.abs(err[mask]).sum() / (n * pred_enc.shape[1]))
    out = Value(np.array(total))

    def backward(g):
        if pred_enc.requires_grad:
            grad = np.sign(err) * mask[:, None] / (n * pred_enc.shape[1])
            pred_enc.accum_grad(float(g) * grad)

    return dg.record(out, (pred_enc,), backward)


def _masked_zero(v: Value) -> Value:
    out = Value(np.array(0.0))

    def backward(g):
        if v.requires_grad:
            v.accum_grad(np.zeros_like(v.data))

    return dg.record(out, (v,), backward)


def smooth_l1(e: np.ndarray, delta: float = 1.0):
    a = np.abs(e)
    return np.where(a <= delta, 0.5 * e * e / delta, a - 0.5 * delta)


def iou_targets(boxes, gt_boxes) -> np.ndarray:
    """Per-query target: highest BEV IoU against ALL ground-truth boxes
    (regardless of class); 0 when the scene has no ground truth."""
    if not boxes:
        return np.zeros(0)
    if not gt_boxes:
        return np.zeros(len(boxes))
    mat = kernels.iou_matrix(np.stack([b.bev() for b in boxes]),
                             np.stack([g.bev() for g in gt_boxes]))
    return mat.max(axis=1)


def iou_loss(iou_pred: Value, target: np.ndarray, mask=None) -> Value:
    """Smooth-L1 (delta=1) between the predicted IoU and its target, averaged
    over the (masked) queries."""
    target = np.asarray(target, dtype=np.float64)
    mask = np.ones(len(target), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if iou_pred.shape != target.shape or iou_pred.shape != mask.shape:
        raise ValueError("iou loss shape mismatch")
    n = int(mask.sum())
    if n == 0:
        return _masked_zero(iou_pred)
    e = iou_pred.data - target
    total = float(smooth_l1(e)[mask].sum() / n)
    out = Value(np.array(total))

    def backward(g):
        if iou_pred.requires_grad:
            grad = np.where(np.abs(e) <= 1.0, e, np.sign(e)) * mask / n
            iou_pred.accum_grad(float(g) * grad)

    return dg.record(out, (iou_pred,), backward)


def corner_loss(pred: Value, target: np.ndarray) -> Value:
    """MSE restricted to cells where the target is above 0; 0 if empty."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"corner heatmap shapes differ: {pred.shape} vs {target.shape}")
    support = target > 0.0
    n = int(support.sum())
    if n == 0:
        return _masked_zero(pred)
    e = pred.data - target
    total = float((e[support] ** 2).sum() / n)
    out = Value(np.array(total))

    def backward(g):
        if pred.requires_grad:
            pred.accum_grad(float(g) * 2.0 * e * support / n)

    return dg.record(out, (pred,), backward)


def total_loss(parts: dict, weights: LossWeights) -> Value:
    """Weighted combination; aborts with the offending part named on NaN."""
    for name, v in parts.items():
        if not np.isfinite(v.data):
            raise TrainingDiverged(f"loss part {name!r} is not finite")
    w = {"hm": weights.w_hm, "reg": weights.w_reg, "iou": weights.w_iou,
         "cor": weights.w_cor}
    acc = None
    for name, v in parts.items():
        term = dg.scale(v, w[name])
        acc = term if acc is None else dg.add(acc, term)
    return acc


# ---------------------------------------------------------------------------
# optimizer and schedule


class AdamW:
    """Decoupled-weight-decay adaptive-moment optimizer."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.01):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def grads_finite(self) -> bool:
        return all(np.all(np.isfinite(p.grad)) for p in self.params.values())

    def step(self, lr: float):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for n, p in self.params.items():
            g = p.grad
            m = self.m[n]
            v = self.v[n]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p.data -= lr * (update + self.weight_decay * p.data)


@dataclass(frozen=True)
class OneCycle:
    """Linear warm-up from base/start_div to base at warmup_frac of the run,
    then cosine decay to base/final_div."""

    base_lr: float
    total_steps: int
    warmup_frac: float = 0.4
    start_div: float = 25.0
    final_div: float = 100.0

    def lr(self, step: int) -> float:
        warm = max(int(round(self.warmup_frac * self.total_steps)), 1)
        start = self.base_lr / self.start_div
        final = self.base_lr / self.final_div
        if step < warm:
            return start + (self.base_lr - start) * step / warm
        denom = max(self.total_steps - warm, 1)
        prog = min((step - warm) / denom, 1.0)
        return final + (self.base_lr - final) * 0.5 * (1.0 + np.cos(np.pi * prog))


# ---------------------------------------------------------------------------
# train step


@dataclass
class StepRecord:
    step: int
    lr: float
    l_hm: float
    l_reg: float
    l_iou: float
    l_cor: float
    total: float
    wall_ms: float
    skipped: bool = False

    def line(self) -> str:
        return (f"{self.step} {self.lr:.6g} {self.l_hm:.6g} {self.l_reg:.6g} "
                f"{self.l_iou:.6g} {self.l_cor:.6g} {self.total:.6g} "
                f"{self.wall_ms:.1f}" + (" skipped" if self.skipped else ""))


def compute_losses(result, gt_boxes, iou_target_override=None) -> dict:
    """Assemble the four loss parts from a train-mode forward result.

    Regression and IoU supervision applies only to GT-injected queries. The
    IoU target is a stop-gradient quantity recomputed from the decoded boxes
    each call; the override pins it for finite-difference checks.
    """
    parts = {
        "hm": focal_heatmap_loss(result.center.values, result.targets.center),
        "cor": corner_loss(result.corner.values, result.targets.corner),
    }
    if len(result.proposals):
        gt_mask = np.array([p.is_gt for p in result.proposals], dtype=bool)
        target_enc = np.stack([result.targets.reg[p.row, p.col]
                               for p in result.proposals])
        parts["reg"] = reg_loss(result.enc, target_enc, gt_mask)
        tgt = iou_targets(result.boxes, gt_boxes) if iou_target_override is None \
            else iou_target_override
        parts["iou"] = iou_loss(result.iou_pred, tgt, gt_mask)
    else:
        parts["reg"] = Value(np.array(0.0))
        parts["iou"] = Value(np.array(0.0))
    return parts


def train_step(model, windows, optimizer: AdamW, schedule: OneCycle,
               step: int, weights: LossWeights) -> StepRecord:
    """One optimizer step over a batch of frame windows.

    Each item runs forward/backward on its own tape; parameter gradients
    accumulate across items (scaled to the batch mean). A non-finite gradient
    skips the update and flags the record; a non-finite loss aborts.
    """
    t0 = time.perf_counter()
    lr = schedule.lr(step)
    optimizer.zero_grad()
    acc = {"hm": 0.0, "reg": 0.0, "iou": 0.0, "cor": 0.0, "total": 0.0}
    n = len(windows)
    for window in windows:
        with Tape() as tape:
            result = model.forward(window, mode="train")
            parts = compute_losses(result, [a.box for a in window[-1].annotations])
            loss = total_loss(parts, weights)
            scaled = dg.scale(loss, 1.0 / n) if n > 1 else loss
        tape.backward(scaled)
        for k in ("hm", "reg", "iou", "cor"):
            acc[k] += float(parts[k].data) / n
        acc["total"] += float(loss.data) / n

    skipped = not optimizer.grads_finite()
    if not skipped:
        optimizer.step(lr)
    wall = (time.perf_counter() - t0) * 1e3
    return StepRecord(step=step, lr=lr, l_hm=acc["hm"], l_reg=acc["reg"],
                      l_iou=acc["iou"], l_cor=acc["cor"], total=acc["total"],
                      wall_ms=wall, skipped=skipped)


def fit(model, sequences, cfg, log_fn=None, checkpoint_fn=None,
        optimizer=None, schedule=None, start_step=0):
    """Deterministic training loop: batch items cycle through the given
    sequence windows in order. Optimizer/schedule may be supplied (with a
    nonzero start step) to resume a run."""
    weights = LossWeights(w_hm=cfg.train.w_hm, w_reg=cfg.train.w_reg,
                          w_iou=cfg.train.w_iou, w_cor=cfg.train.w_cor)
    if optimizer is None:
        optimizer = AdamW(model.named_parameters(),
                          weight_decay=cfg.train.weight_decay)
    if schedule is None:
        schedule = OneCycle(base_lr=cfg.train.base_lr,
                            total_steps=cfg.train.steps,
                            warmup_frac=cfg.train.warmup_frac,
                            start_div=cfg.train.start_div,
                            final_div=cfg.train.final_div)
    windows = [seq.frames[max(0, len(seq.frames) - model.cfg.model.frames):]
               for seq in sequences]
    records = []
    b = cfg.train.batch_size
    for step in range(start_step, cfg.train.steps):
        batch = [windows[(step * b + i) % len(windows)] for i in range(b)]
        rec = train_step(model, batch, optimizer, schedule, step, weights)
        records.append(rec)
        if log_fn:
            log_fn(rec)
        if checkpoint_fn and cfg.train.checkpoint_every > 0 \
                and (step + 1) % cfg.train.checkpoint_every == 0:
            checkpoint_fn(step + 1)
    return records
