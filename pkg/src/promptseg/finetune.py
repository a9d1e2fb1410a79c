"""Contrastive fine-tuning of a trainable encoder pair.

The encoder's ``trainable`` object must provide

* ``params``                               -- dict of arrays
* ``prepare(pairs) -> feats``               -- parameter-free features, computed once
* ``embed(params, feats, idx)``             -- unnormalized (image, text) embeddings
* ``backprop(params, feats, idx, gI, gT)``  -- parameter gradients
* ``with_parameters(params)``               -- a new model with those parameters

Embeddings are L2-normalized before the loss; updates are plain SGD with the
learning rate multiplied by ``decay_rate`` after every epoch.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .embedding import EmbeddingBatch, EncoderHandle
from .losses import LossConfig, loss_and_gradient, loss_value

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FinetuneConfig:
    learning_rate: float = 1e-6
    decay_rate: float = 0.5
    batch_size: int = 64
    epochs: int = 1
    split_fraction: float = 0.85
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must be in (0, 1]")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must be in (0, 1)")

    def to_json(self):
        d = asdict(self)
        d["loss"] = self.loss.to_json()
        return d

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        loss = LossConfig.from_json(obj.pop("loss", {}))
        keys = ("learning_rate", "decay_rate", "batch_size", "epochs", "split_fraction", "seed")
        return cls(loss=loss, **{k: obj[k] for k in keys if k in obj})


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)

    def add(self, epoch, train_loss, val_loss, lr, seconds):
        self.entries.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr,
                             "seconds": seconds})

    def column(self, name):
        return [e[name] for e in self.entries]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "lr", "seconds"])
            for e in self.entries:
                w.writerow([e["epoch"], repr(e["train_loss"]), repr(e["val_loss"]), repr(e["lr"]),
                            f"{e['seconds']:.3f}"])


def split_dataset(pairs, fraction: float = 0.85, seed: int = 0):
    """Shuffled split into ``ceil(fraction * N)`` training items and the rest."""
    if not 0 < fraction < 1:
        raise ValueError(f"split fraction must be in (0, 1), got {fraction}")
    if not pairs:
        raise ValueError("cannot split an empty dataset")
    n = len(pairs)
    # guard against 0.85 * 100 = 85.00000000000001
    n_train = min(n, math.ceil(fraction * n - 1e-9))
    order = np.random.default_rng(seed).permutation(n)
    train = [pairs[i] for i in order[:n_train]]
    val = [pairs[i] for i in order[n_train:]]
    if not val:
        warnings.warn(f"validation split is empty for N={n}", stacklevel=2)
    return train, val


def _normalize_with_jacobian(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / norms, norms


def _through_normalization(grad_unit, unit, norms):
    # d(x/|x|)^T g = (g - (g.u) u) / |x|
    return (grad_unit - np.sum(grad_unit * unit, axis=1, keepdims=True) * unit) / norms


def _batches(idx, size):
    out = [idx[i : i + size] for i in range(0, len(idx), size)]
    return [b for b in out if len(b) >= 2]


def _mean_loss(model, params, feats, idx, cfg):
    if len(idx) < 2:
        return float("nan")
    vals = []
    for b in _batches(np.asarray(idx), cfg.batch_size):
        img, txt = model.embed(params, feats, b)
        vals.append(loss_value(EmbeddingBatch.from_raw(img, txt), cfg.loss).total)
    return float(np.mean(vals))


def save_checkpoint(directory, params, meta):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.savez(directory / "params.npz", **{k: params[k] for k in sorted(params)})
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def finetune(enc: EncoderHandle, data, cfg: FinetuneConfig, validation=None, checkpoint_dir=None):
    """Fine-tune ``enc`` on image/text pairs.

    ``data`` is split per ``cfg.split_fraction`` unless ``validation`` is given.
    Returns the encoder at the best-validation epoch and the :class:`TrainLog`.
    """
    model = enc.trainable
    if model is None or not all(hasattr(model, a) for a in ("prepare", "embed", "backprop", "with_parameters")):
        raise TypeError("encoder does not expose trainable parameters")
    log_ = TrainLog()
    if cfg.epochs == 0:
        return enc, log_
    if validation is None:
        train, validation = split_dataset(list(data), cfg.split_fraction, cfg.seed)
    else:
        train = list(data)
    if len(train) < 2:
        raise ValueError("need at least two training pairs")

    tr_feats = model.prepare(train)
    va_feats = model.prepare(validation) if len(validation) >= 2 else None
    params = {k: v.copy() for k, v in model.params.items()}
    best, best_loss = params, math.inf

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.learning_rate * cfg.decay_rate**epoch
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
        losses = []
        for b in _batches(order, cfg.batch_size):
            with np.errstate(over="ignore", invalid="ignore"):  # checked explicitly below
                img, txt = model.embed(params, tr_feats, b)
                ui, ni = _normalize_with_jacobian(img)
                ut, nt = _normalize_with_jacobian(txt)
            if not all(np.isfinite(a).all() and np.isfinite(n).all() and (n > 0).all() for a, n in ((ui, ni), (ut, nt))):
                raise FloatingPointError(f"non-finite embeddings at epoch {epoch}")
            value, (gi, gt) = loss_and_gradient(EmbeddingBatch(ui, ut), cfg.loss)
            if not np.isfinite(value.total):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            grads = model.backprop(params, tr_feats, b, _through_normalization(gi, ui, ni),
                                   _through_normalization(gt, ut, nt))
            for k, g in grads.items():
                if not np.isfinite(g).all():
                    raise FloatingPointError(f"non-finite gradient for {k} at epoch {epoch}")
                params[k] = params[k] - lr * g
            losses.append(value.total)
        train_loss = float(np.mean(losses))
        val_loss = _mean_loss(model, params, va_feats, np.arange(len(validation)), cfg) if va_feats else float("nan")
        log_.add(epoch, train_loss, val_loss, lr, time.perf_counter() - t0)
        log.info("epoch %d train %.5f val %.5f lr %.3g", epoch, train_loss, val_loss, lr)

        score = val_loss if math.isfinite(val_loss) else train_loss
        if score < best_loss:
            best_loss = score
            best = {k: v.copy() for k, v in params.items()}
        if checkpoint_dir is not None:
            save_checkpoint(Path(checkpoint_dir) / f"ckpt_epoch_{epoch}", params, {
                "epoch": epoch, "val_loss": val_loss, "train_loss": train_loss, "lr": lr,
                "loss_variant": cfg.loss.variant,
            })

    return model.with_parameters(best).handle(), log_
