"""Losses, optimizer, schedule, reference sampling, augmentation, train loop.

The loop owns all mutation: gradients are zeroed before each backward, the
optimizer steps, then the prototype memory absorbs detached reference
vectors. All randomness flows from one seeded generator, so a fixed seed
reproduces the checkpoint bit-exactly.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics as metrics_mod
from .dataset import SampleRecord, load_sample, resize_bilinear
from .memory import classification_loss
from .model import CamoModel, ModelConfig
from .tensor import Tensor


class TrainingError(RuntimeError):
    """Numeric failure (NaN loss or gradient); carries the failing step."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


@dataclass
class TrainConfig:
    lr0: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 20
    batch_size: int = 4
    lambda_cls: float = 0.03
    mu: float = 0.99
    refs_per_query: int = 5
    warmup_steps: int = 100
    seed: int = 0
    eval_every: int = 1
    eval_samples: int = 24
    augment: bool = True

    def __post_init__(self):
        if self.lambda_cls < 0:
            raise ValueError("lambda_cls must be nonnegative")
        if self.refs_per_query < 1:
            raise ValueError("refs_per_query must be at least 1")


def baseline_no_ref_mode(cfg: ModelConfig) -> ModelConfig:
    """The ablation baseline: same encoder/decoder, no guidance anywhere."""
    return replace(cfg, no_ref_baseline=True)


# -- losses --------------------------------------------------------------------


def bce_seg_loss(logits: Tensor, gt_mask) -> Tensor:
    """Pixel-mean binary cross-entropy on raw logits (sigmoid applied inside).

    Uses softplus identities for stability: -log sigmoid(z) = softplus(-z).
    """
    g = np.asarray(gt_mask.data if isinstance(gt_mask, Tensor) else gt_mask,
                   dtype=logits.data.dtype)
    if g.shape != logits.shape:
        raise ValueError(f"mask shape {g.shape} != logits shape {logits.shape}")
    gt = Tensor(g)
    return (gt * (-logits).softplus() + (1.0 - gt) * logits.softplus()).mean()


def total_loss(seg: Tensor, cls: Tensor | None, lambda_cls: float) -> Tensor:
    if cls is None or lambda_cls == 0.0:
        return seg
    return seg + lambda_cls * cls


# -- optimizer -------------------------------------------------------------------


class SGD:
    """Classic momentum SGD with coupled weight decay.

    buf <- m * buf + (grad + wd * param);  param <- param - lr * buf
    """

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9,
                 weight_decay: float = 5e-4):
        self.params = dict(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float, step_index: int = -1) -> None:
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.isfinite(g).all():
                raise TrainingError(f"non-finite gradient in parameter {name!r}", step_index)
            buf = self.buffers[name]
            buf *= self.momentum
            buf += g + self.weight_decay * p.data
            p.data -= lr * buf


def lr_schedule(step: int, total_steps: int, warmup_steps: int, lr0: float) -> float:
    """Linear warmup to lr0 at ``warmup_steps``, then linear decay to zero."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step < warmup_steps:
        return lr0 * step / warmup_steps
    if total_steps == warmup_steps:
        return lr0
    return lr0 * (total_steps - step) / (total_steps - warmup_steps)


# -- reference sampling --------------------------------------------------------------


class ReferenceSampler:
    """Draws n same-category references and averages their encoded vectors.

    With a frozen reference encoder the per-image vectors are cached, since
    they can never change during training.
    """

    def __init__(self, root: str, records: list[SampleRecord], model: CamoModel):
        self.root = root
        self.model = model
        self.by_cat: dict[int, list[SampleRecord]] = {}
        for r in records:
            if r.role == "reference":
                self.by_cat.setdefault(r.category, []).append(r)
        for recs in self.by_cat.values():
            recs.sort(key=lambda r: r.id)
        self._cache: dict[str, np.ndarray] = {}

    def sample_and_average(self, y: int, n: int, rng: np.random.Generator) -> Tensor:
        recs = self.by_cat.get(y)
        if not recs:
            raise ValueError(f"category {y} has no reference samples")
        picks = [recs[int(i)] for i in rng.integers(0, len(recs), size=n)]
        if self.model.cfg.freeze_ref:
            vecs = []
            for rec in picks:
                vec = self._cache.get(rec.id)
                if vec is None:
                    img, mask = load_sample(self.root, rec)
                    vec = self.model.encode_reference(Tensor(img), Tensor(mask)).data
                    self._cache[rec.id] = vec
                vecs.append(vec)
            return Tensor(np.mean(vecs, axis=0, dtype=np.float64).astype(np.float32))
        acc = None
        for rec in picks:
            img, mask = load_sample(self.root, rec)
            r = self.model.encode_reference(Tensor(img), Tensor(mask))
            acc = r if acc is None else acc + r
        return acc * (1.0 / n)


# -- augmentation ---------------------------------------------------------------------


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
            out_size: int | None = None):
    """Shared-geometry random crop, right-angle rotation, and resize.

    Crop side scale is drawn from [0.75, 1.0]; rotations are multiples of 90
    degrees so masks stay exact; the mask is re-binarized at 0.5 after the
    bilinear resize.
    """
    _, h, w = image.shape
    out_size = out_size or h
    scale = rng.uniform(0.75, 1.0)
    ch = max(1, int(round(h * scale)))
    cw = max(1, int(round(w * scale)))
    oy = int(rng.integers(0, h - ch + 1))
    ox = int(rng.integers(0, w - cw + 1))
    k = int(rng.integers(0, 4))
    img_c = image[:, oy:oy + ch, ox:ox + cw]
    msk_c = mask[:, oy:oy + ch, ox:ox + cw]
    if k:
        img_c = np.rot90(img_c, k, axes=(1, 2))
        msk_c = np.rot90(msk_c, k, axes=(1, 2))
    if img_c.shape[1:] != (out_size, out_size):
        img_c = resize_bilinear(np.ascontiguousarray(img_c), out_size, out_size)
        msk_c = resize_bilinear(np.ascontiguousarray(msk_c), out_size, out_size)
    msk_c = (msk_c >= 0.5).astype(np.float32)
    return np.ascontiguousarray(img_c, dtype=np.float32), msk_c


# -- training loop -----------------------------------------------------------------------


def train_loop(model: CamoModel, root: str, records: list[SampleRecord],
               cfg: TrainConfig, out_dir: str | None = None,
               log_rows: list | None = None) -> dict:
    """Run the full schedule; returns a summary with final losses.

    Writes ``train_log.tsv`` (step, lr, L_seg, L_cls, L_total) and, when
    ``eval_every`` > 0, ``epoch_eval.tsv`` with metric means on a test
    subset. Raises TrainingError on a non-finite loss.
    """
    # separate streams so baseline and guided runs see identical data
    # draws even though only the latter consumes reference randomness
    data_rng, ref_rng = np.random.default_rng(cfg.seed).spawn(2)
    train = [r for r in records if r.split == "train" and r.role == "query"]
    test = [r for r in records if r.split == "test" and r.role == "query"]
    if not train:
        raise ValueError("no training queries in dataset")
    sampler = None if model.cfg.no_ref_baseline else ReferenceSampler(root, records, model)
    opt = SGD(model.parameters(), momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    log_fh = None
    eval_fh = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "train_log.tsv"), "w",
                      encoding="utf-8", newline="\n")
        log_fh.write("step\tlr\tl_seg\tl_cls\tl_total\n")
        if cfg.eval_every > 0:
            eval_fh = open(os.path.join(out_dir, "epoch_eval.tsv"), "w",
                           encoding="utf-8", newline="\n")
            eval_fh.write("epoch\ts_m\talpha_e\tw_f\tmae\n")

    step = 0
    last = {}
    try:
        for epoch in range(cfg.epochs):
            order = data_rng.permutation(len(train))
            for lo in range(0, len(train), cfg.batch_size):
                batch = [train[i] for i in order[lo:lo + cfg.batch_size]]
                lr = lr_schedule(step, total_steps, cfg.warmup_steps, cfg.lr0)
                seg_terms = []
                cls_terms = []
                ema_updates = []
                for rec in batch:
                    img, mask = load_sample(root, rec)
                    if cfg.augment:
                        img, mask = augment(img, mask, data_rng, model.cfg.input_size)
                    if sampler is not None:
                        r = sampler.sample_and_average(rec.category,
                                                       cfg.refs_per_query, ref_rng)
                        logits, a, _v = model.forward_train(Tensor(img), r, rec.category)
                        cls_terms.append(classification_loss(a, rec.category))
                        ema_updates.append((r.data.copy(), rec.category))
                    else:
                        logits, _a, _v = model.forward_train(Tensor(img), None, None)
                    seg_terms.append(bce_seg_loss(logits, mask))
                seg = _mean(seg_terms)
                cls = _mean(cls_terms) if cls_terms else None
                loss = total_loss(seg, cls, cfg.lambda_cls)
                if not np.isfinite(loss.data).all():
                    raise TrainingError(f"non-finite loss at step {step}", step)
                opt.zero_grad()
                loss.backward()
                opt.step(lr, step_index=step)
                if model.memory is not None:
                    for r_np, y in ema_updates:
                        model.memory.ema_update(r_np, y)
                row = (step, lr, seg.item(), cls.item() if cls is not None else 0.0,
                       loss.item())
                if log_fh:
                    log_fh.write("%d\t%.9f\t%.9f\t%.9f\t%.9f\n" % row)
                if log_rows is not None:
                    log_rows.append(row)
                last = {"step": step, "lr": lr, "l_seg": row[2], "l_cls": row[3],
                        "l_total": row[4]}
                step += 1
            if eval_fh and test and (epoch + 1) % cfg.eval_every == 0:
                report = _quick_eval(model, root, test[:cfg.eval_samples])
                eval_fh.write("%d\t%.9f\t%.9f\t%.9f\t%.9f\n"
                              % (epoch, report.s_measure, report.adaptive_e,
                                 report.weighted_f, report.mae))
    finally:
        if log_fh:
            log_fh.close()
        if eval_fh:
            eval_fh.close()
    return last


def _mean(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc * (1.0 / len(terms))


def infer_mask(model: CamoModel, image: np.ndarray, y: int | None = None) -> np.ndarray:
    probs, _pi = model.forward_infer(Tensor(image), y=y)
    return probs.data[0]


def _quick_eval(model: CamoModel, root: str, records: list[SampleRecord]):
    pairs = []
    for rec in records:
        img, mask = load_sample(root, rec)
        pred = infer_mask(model, img)
        pairs.append((rec.id, pred, mask[0] >= 0.5))
    report, _rows = metrics_mod.evaluate_pairs(pairs)
    return report
