"""Weakly supervised training on pseudo-labels with checkpoint ensembling.

Training runs ``E`` epochs split into ``D`` cycles of ``E/D`` epochs. The
learning rate follows a cosine from ``lr_max`` to ``lr_min`` inside each cycle
and restarts at the next; the last ``G_d`` epochs of every cycle are kept as
snapshots. Predictions average the snapshots' class probabilities and the
spread is summarized by the per-pixel entropy.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .toynet import ToySegNet


@dataclass(frozen=True)
class PseudoDataset:
    pairs: list  # (pixels H x W x 3, bool mask H x W)
    provenance: str = ""

    def __post_init__(self):
        for i, (x, y) in enumerate(self.pairs):
            if np.shape(x)[:2] != np.shape(y):
                raise ValueError(f"pair {i}: image {np.shape(x)} and mask {np.shape(y)} disagree")

    def __len__(self):
        return len(self.pairs)


@dataclass(frozen=True)
class CycleSchedule:
    total_epochs: int
    cycles: int
    checkpoints_per_cycle: int
    lr_max: float = 0.01
    lr_min: float = 1e-6

    def __post_init__(self):
        if self.total_epochs < 1 or self.cycles < 1:
            raise ValueError("total_epochs and cycles must be >= 1")
        if self.total_epochs % self.cycles:
            raise ValueError(f"cycles ({self.cycles}) must divide total_epochs ({self.total_epochs})")
        if not 1 <= self.checkpoints_per_cycle <= self.epochs_per_cycle:
            raise ValueError("checkpoints_per_cycle must be in [1, epochs_per_cycle]")
        if not 0 <= self.lr_min <= self.lr_max:
            raise ValueError("need 0 <= lr_min <= lr_max")

    @property
    def epochs_per_cycle(self):
        return self.total_epochs // self.cycles

    @property
    def total_checkpoints(self):
        return self.cycles * self.checkpoints_per_cycle

    def is_checkpoint_epoch(self, epoch):
        return epoch % self.epochs_per_cycle >= self.epochs_per_cycle - self.checkpoints_per_cycle


def cyclical_lr(epoch: int, sched: CycleSchedule) -> float:
    if not 0 <= epoch < sched.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {sched.total_epochs})")
    ed = sched.epochs_per_cycle
    if ed == 1:
        return sched.lr_max
    phase = (epoch % ed) / (ed - 1)
    return sched.lr_min + 0.5 * (sched.lr_max - sched.lr_min) * (1.0 + math.cos(math.pi * phase))


@dataclass
class Checkpoint:
    cycle: int
    index: int  # position within the cycle
    epoch: int
    lr: float
    params: dict
    loss: float = float("nan")


@dataclass
class CheckpointEnsemble:
    checkpoints: list
    schedule: Optional[CycleSchedule] = None
    factory: Optional[Callable] = None  # params -> model with .predict
    first_epoch: Optional[Checkpoint] = None

    def __len__(self):
        return len(self.checkpoints)

    def models(self):
        if self.factory is None:
            raise ValueError("ensemble has no model factory")
        return [self.factory(c.params) for c in self.checkpoints]


def train_weak(model, data: PseudoDataset, sched: CycleSchedule, seed: int = 0, batch_size: int = 4,
               checkpoint_dir=None) -> CheckpointEnsemble:
    """Train ``model`` (``update``/``snapshot``/``with_params``) with the cyclical schedule."""
    if len(data) == 0:
        raise ValueError("empty training set")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    images = np.stack([np.asarray(x, dtype=np.float64) for x, _ in data.pairs])
    masks = np.stack([np.asarray(y, dtype=bool) for _, y in data.pairs])
    ens = CheckpointEnsemble([], sched, model.with_params)
    ed = sched.epochs_per_cycle
    for epoch in range(sched.total_epochs):
        lr = cyclical_lr(epoch, sched)
        order = np.random.default_rng([seed, epoch]).permutation(len(data))
        losses = []
        for s in range(0, len(order), batch_size):
            b = order[s : s + batch_size]
            loss = model.update(images[b], masks[b], lr)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            losses.append(loss)
        mean_loss = float(np.mean(losses))
        if epoch == 0:
            ens.first_epoch = Checkpoint(0, -1, 0, lr, model.snapshot(), mean_loss)
        if sched.is_checkpoint_epoch(epoch):
            cycle = epoch // ed
            index = epoch % ed - (ed - sched.checkpoints_per_cycle)
            ens.checkpoints.append(Checkpoint(cycle, index, epoch, lr, model.snapshot(), mean_loss))
    if checkpoint_dir is not None:
        save_ensemble(ens, checkpoint_dir)
    return ens


def _predict_one(model, pixels):
    p = np.asarray(model.predict(pixels), dtype=np.float64)
    if p.ndim != 3:
        raise ValueError("predict must return an (H, W, R) probability map")
    return p


def ensemble_predict(ens: CheckpointEnsemble, pixels, workers: int = 1) -> np.ndarray:
    """Mean of the checkpoints' (H, W, R) class probabilities, summed in checkpoint order."""
    if len(ens) == 0:
        raise ValueError("empty ensemble")
    models = ens.models()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            preds = list(pool.map(lambda m: _predict_one(m, pixels), models))
    else:
        preds = [_predict_one(m, pixels) for m in models]
    total = np.zeros_like(preds[0])
    for p in preds:
        total += p
    return total / len(preds)


def binarize_final(prob, threshold: float = 0.5) -> np.ndarray:
    """Foreground where the foreground probability is >= ``threshold``.

    ``prob`` is either an (H, W) foreground map or (H, W, R) with foreground last.
    """
    p = np.asarray(prob, dtype=np.float64)
    if p.ndim == 3:
        p = p[..., -1]
    return p >= threshold


@dataclass(frozen=True)
class UncertaintyMap:
    entropy: np.ndarray
    class_count: int


def entropy_uncertainty(prob, R: Optional[int] = None) -> UncertaintyMap:
    """Per-pixel Shannon entropy (nats) of an (H, W, R) class distribution; 0 log 0 = 0."""
    p = np.asarray(prob, dtype=np.float64)
    if p.ndim != 3:
        raise ValueError("expected an (H, W, R) probability map")
    R = p.shape[-1] if R is None else int(R)
    if p.shape[-1] != R or R < 2:
        raise ValueError(f"class count mismatch: map has {p.shape[-1]}, R={R}")
    if (p < 0).any():
        raise ValueError("negative probabilities")
    if np.abs(p.sum(axis=-1) - 1.0).max() > 1e-6:
        raise ValueError("class probabilities must sum to 1 per pixel")
    safe = np.where(p > 0, p, 1.0)
    h = -(p * np.log(safe)).sum(axis=-1)
    return UncertaintyMap(np.clip(h, 0.0, math.log(R)), R)


# ---------------------------------------------------------------- persistence


@dataclass(frozen=True)
class WeakConfig:
    epochs: int = 6
    cycles: int = 3
    checkpoints_per_cycle: int = 2
    lr_max: float = 0.01
    lr_min: float = 1e-6
    threshold: float = 0.5
    seed: int = 0
    batch_size: int = 4
    channels: int = 8

    def schedule(self):
        return CycleSchedule(self.epochs, self.cycles, self.checkpoints_per_cycle, self.lr_max, self.lr_min)

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        names = cls.__dataclass_fields__
        unknown = set(obj) - set(names)
        if unknown:
            raise ValueError(f"unknown trainer config keys: {sorted(unknown)}")
        return cls(**obj)


def _write_params(path, params):
    with open(path, "wb") as fh:
        np.savez(fh, **{k: params[k] for k in sorted(params)})


def _read_params(path):
    with np.load(path) as z:
        return {k: z[k] for k in z.files}


def save_ensemble(ens: CheckpointEnsemble, root, extra: Optional[dict] = None):
    """``root/cycle_{d}/ckpt_{g}/params.bin`` + ``meta.json``, and ``root/ensemble.json``."""
    root = Path(root)
    entries = []
    for c in ens.checkpoints:
        d = root / f"cycle_{c.cycle}" / f"ckpt_{c.index}"
        d.mkdir(parents=True, exist_ok=True)
        _write_params(d / "params.bin", c.params)
        meta = {"cycle": c.cycle, "index": c.index, "epoch": c.epoch, "lr": c.lr, "loss": c.loss}
        (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        entries.append(str(d.relative_to(root)))
    manifest = {"checkpoints": entries, **(extra or {})}
    if ens.schedule is not None:
        manifest["schedule"] = asdict(ens.schedule)
    (root / "ensemble.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_ensemble(root, factory=None) -> CheckpointEnsemble:
    root = Path(root)
    manifest = json.loads((root / "ensemble.json").read_text())
    ckpts = []
    for rel in manifest["checkpoints"]:
        d = root / rel
        meta = json.loads((d / "meta.json").read_text())
        ckpts.append(Checkpoint(meta["cycle"], meta["index"], meta["epoch"], meta["lr"],
                                _read_params(d / "params.bin"), meta.get("loss", float("nan"))))
    sched = CycleSchedule(**manifest["schedule"]) if "schedule" in manifest else None
    if factory is None:
        channels = int(manifest.get("channels", 8))
        factory = lambda p: ToySegNet(channels=channels, params=p)  # noqa: E731
    return CheckpointEnsemble(ckpts, sched, factory)
