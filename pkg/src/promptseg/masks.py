"""Saliency map -> coarse mask -> visual prompts -> refined zero-shot mask.

Coordinates are ``(row, col)`` everywhere; boxes are inclusive
``(row_min, col_min, row_max, col_max)``. Conversion to an external
segmenter's exclusive ``(x_min, y_min, x_max, y_max)`` happens only in
:func:`box_to_xyxy`.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from . import kernels
from .attribution import BottleneckConfig, SaliencyMap, compute_saliency
from .embedding import EncoderHandle, ImageTensor
from .imaging import read_mask, write_mask, write_rgb

N_BINS = 256
PROMPT_MODES = ("boxes", "points", "boxes+points")


class PipelineError(RuntimeError):
    """A zero-shot stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


class OtsuResult(NamedTuple):
    mask: np.ndarray
    threshold: float  # on the min-max normalized map
    degenerate: bool


@dataclass
class ComponentSet:
    labels: np.ndarray
    confidences: dict = field(default_factory=dict)
    threshold: float = None
    kept_ids: frozenset = frozenset()
    fallback: bool = False

    @property
    def count(self):
        return int(self.labels.max()) if self.labels.size else 0

    @property
    def ids(self):
        return list(range(1, self.count + 1))

    def coarse_mask(self):
        if not self.kept_ids:
            return np.zeros(self.labels.shape, dtype=bool)
        return np.isin(self.labels, sorted(self.kept_ids))


@dataclass(frozen=True)
class VisualPromptSet:
    boxes: tuple = ()
    points: tuple = ()  # (row, col, label); label 1 = foreground
    mode: str = "boxes"

    def to_json(self):
        return {
            "boxes": [list(b) for b in self.boxes],
            "points": [[p[0], p[1]] for p in self.points],
            "mode": self.mode,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            boxes=tuple(tuple(int(v) for v in b) for b in obj.get("boxes", [])),
            points=tuple((int(p[0]), int(p[1]), 1) for p in obj.get("points", [])),
            mode=obj.get("mode", "boxes"),
        )


def box_to_xyxy(box):
    """Inclusive (r0, c0, r1, c1) -> exclusive (x_min, y_min, x_max, y_max)."""
    r0, c0, r1, c1 = box
    return (c0, r0, c1 + 1, r1 + 1)


@dataclass(frozen=True)
class RefinerHandle:
    refine: Callable
    name: str = "refiner"


@dataclass(frozen=True)
class PipelineConfig:
    eta_c: float = 0.5
    mode: str = "boxes"
    points_per_component: int = 1
    seed: int = 0
    box_margin: int = 0
    min_component_size: int = 1

    def __post_init__(self):
        if self.mode not in PROMPT_MODES:
            raise ValueError(f"prompt mode must be one of {PROMPT_MODES}")
        if self.points_per_component < 1 or self.box_margin < 0 or self.min_component_size < 1:
            raise ValueError("invalid pipeline configuration")


def _values(sal):
    return np.asarray(sal.values if isinstance(sal, SaliencyMap) else sal, dtype=np.float64)


def normalize_saliency(sal):
    v = _values(sal)
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def saliency_bins(sal):
    """Bin index in [0, 255] of every pixel of the min-max normalized map."""
    return np.minimum(np.floor(normalize_saliency(sal) * N_BINS), N_BINS - 1).astype(np.int64)


def otsu_binarize(sal) -> OtsuResult:
    v = _values(sal)
    if not np.isfinite(v).all():
        raise ValueError("saliency map contains non-finite values")
    if v.max() <= v.min():
        return OtsuResult(np.ones(v.shape, dtype=bool), 0.0, True)
    bins = saliency_bins(v)
    t = kernels.otsu_bin(np.bincount(bins.ravel(), minlength=N_BINS))
    if t < 0:
        return OtsuResult(np.ones(v.shape, dtype=bool), 0.0, True)
    # bin >= t  <=>  normalized value >= t / 256
    return OtsuResult(bins >= t, t / N_BINS, False)


def connected_components(mask, min_size: int = 1) -> ComponentSet:
    """8-connected components, ids ordered by the raster position of their first pixel."""
    mask = np.asarray(mask, dtype=bool)
    labels, n = kernels.label8(mask)
    if min_size > 1 and n:
        sizes = np.bincount(labels.ravel(), minlength=n + 1)
        keep = sizes >= min_size
        keep[0] = False
        remap = np.zeros(n + 1, dtype=np.int32)
        remap[keep] = np.arange(1, int(keep.sum()) + 1, dtype=np.int32)
        labels = remap[labels]
    return ComponentSet(labels=np.asarray(labels, dtype=np.int32))


def score_components(comps: ComponentSet, sal) -> ComponentSet:
    """Confidence = mean normalized saliency over each component's pixels."""
    v = _values(sal)
    if v.shape != comps.labels.shape:
        raise ValueError(f"shape mismatch: labels {comps.labels.shape} vs saliency {v.shape}")
    p = normalize_saliency(v)
    n = comps.count
    flat = comps.labels.ravel()
    sums = np.bincount(flat, weights=p.ravel(), minlength=n + 1)
    counts = np.bincount(flat, minlength=n + 1)
    conf = {i: float(np.clip(sums[i] / counts[i], 0.0, 1.0)) for i in range(1, n + 1)}
    return ComponentSet(comps.labels, conf, comps.threshold, comps.kept_ids, comps.fallback)


def filter_components(comps: ComponentSet, eta_c: float = 0.5) -> ComponentSet:
    if comps.count and len(comps.confidences) != comps.count:
        raise ValueError("components must be scored before filtering")
    kept = frozenset(i for i, c in comps.confidences.items() if c > eta_c)
    fallback = False
    if not kept and comps.count:
        best = max(comps.ids, key=lambda i: (comps.confidences[i], -i))
        kept, fallback = frozenset([best]), True
    return ComponentSet(comps.labels, comps.confidences, comps.threshold, kept, fallback)


def extract_prompts(comps: ComponentSet, mode: str = "boxes", points_per_component: int = 1, seed: int = 0,
                    box_margin: int = 0) -> VisualPromptSet:
    if mode not in PROMPT_MODES:
        raise ValueError(f"prompt mode must be one of {PROMPT_MODES}")
    if not comps.kept_ids:
        raise ValueError("no kept components to prompt from")
    h, w = comps.labels.shape
    rng = np.random.default_rng(seed)
    boxes, points = [], []
    for cid in sorted(comps.kept_ids):
        pix = np.argwhere(comps.labels == cid)
        if mode in ("boxes", "boxes+points"):
            r0, c0 = pix.min(axis=0)
            r1, c1 = pix.max(axis=0)
            boxes.append((
                int(max(r0 - box_margin, 0)), int(max(c0 - box_margin, 0)),
                int(min(r1 + box_margin, h - 1)), int(min(c1 + box_margin, w - 1)),
            ))
        if mode in ("points", "boxes+points"):
            k = points_per_component
            if k > len(pix):
                warnings.warn(f"component {cid} has {len(pix)} pixels, fewer than {k} requested points",
                              stacklevel=2)
                k = len(pix)
            for idx in rng.choice(len(pix), size=k, replace=False):
                points.append((int(pix[idx, 0]), int(pix[idx, 1]), 1))
    return VisualPromptSet(tuple(boxes), tuple(points), mode)


# ---------------------------------------------------------------- refiners


def _mock_refine(image, prompts: VisualPromptSet, coarse):
    coarse = np.asarray(coarse, dtype=bool)
    out = np.zeros(coarse.shape, dtype=bool)
    if prompts.boxes:
        inside = np.zeros(coarse.shape, dtype=bool)
        for r0, c0, r1, c1 in prompts.boxes:
            inside[r0 : r1 + 1, c0 : c1 + 1] = True
        out |= coarse & inside
    if prompts.points:
        labels, _ = kernels.label8(coarse)
        hit = {int(labels[r, c]) for r, c, _ in prompts.points} - {0}
        if hit:
            out |= np.isin(labels, sorted(hit))
    return out


def make_mock_refiner() -> RefinerHandle:
    """Stand-in segmenter: keeps coarse pixels inside boxes and the coarse
    components touched by points."""
    return RefinerHandle(refine=_mock_refine, name="mock")


def make_external_refiner(command, name="external") -> RefinerHandle:
    """Adapter for a refiner executable.

    The command is invoked as ``<command> IMAGE.png PROMPTS.json COARSE.png OUT.png``;
    the prompt JSON carries our boxes plus ``boxes_xyxy`` in exclusive
    (x_min, y_min, x_max, y_max) form. The executable writes the mask PNG to OUT.
    """
    argv = shlex.split(command) if isinstance(command, str) else list(command)

    def refine(image: ImageTensor, prompts: VisualPromptSet, coarse):
        with tempfile.TemporaryDirectory(prefix="promptseg-refine-") as tmp:
            tmp = Path(tmp)
            px = image.pixels
            if image.normalized:
                lo, hi = px.min(), px.max()
                px = (px - lo) / (hi - lo) if hi > lo else np.zeros_like(px)
            write_rgb(tmp / "image.png", px)
            payload = prompts.to_json()
            payload["boxes_xyxy"] = [list(box_to_xyxy(b)) for b in prompts.boxes]
            (tmp / "prompts.json").write_text(json.dumps(payload))
            write_mask(tmp / "coarse.png", coarse)
            out = tmp / "out.png"
            proc = subprocess.run(argv + [str(tmp / "image.png"), str(tmp / "prompts.json"),
                                          str(tmp / "coarse.png"), str(out)],
                                  capture_output=True, text=True, check=False)
            if proc.returncode != 0 or not out.exists():
                raise RuntimeError(f"external refiner {name!r} failed ({proc.returncode}): {proc.stderr.strip()}")
            mask = read_mask(out)
        if mask.shape != np.shape(coarse):
            raise RuntimeError(f"external refiner {name!r} returned shape {mask.shape}, expected {np.shape(coarse)}")
        return mask

    return RefinerHandle(refine=refine, name=name)


# ---------------------------------------------------------------- orchestration


@dataclass
class ZeroShotResult:
    mask: np.ndarray
    components: ComponentSet
    saliency: SaliencyMap
    otsu: OtsuResult
    coarse: np.ndarray
    prompts: VisualPromptSet


def zero_shot_segment(image: ImageTensor, enc: EncoderHandle, text_embedding, btl_cfg: BottleneckConfig = None,
                      pipeline_cfg: PipelineConfig = None, refiner: RefinerHandle = None,
                      prompt_id: str = "") -> ZeroShotResult:
    btl_cfg = btl_cfg or BottleneckConfig()
    cfg = pipeline_cfg or PipelineConfig()
    refiner = refiner or make_mock_refiner()

    def stage(name, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except Exception as exc:  # tag and re-raise
            raise PipelineError(name, exc) from exc

    sal = stage("saliency", compute_saliency, enc, image, text_embedding, btl_cfg, prompt_id=prompt_id)
    otsu = stage("otsu", otsu_binarize, sal)
    comps = stage("components", connected_components, otsu.mask, cfg.min_component_size)
    comps.threshold = otsu.threshold
    comps = stage("confidence", score_components, comps, sal)
    comps = stage("filter", filter_components, comps, cfg.eta_c)
    coarse = comps.coarse_mask()
    prompts = stage("prompts", extract_prompts, comps, cfg.mode, cfg.points_per_component, cfg.seed, cfg.box_margin)
    mask = stage("refine", refiner.refine, image, prompts, coarse)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != coarse.shape:
        raise PipelineError("refine", f"refiner returned shape {mask.shape}, expected {coarse.shape}")
    return ZeroShotResult(mask, comps, sal, otsu, coarse, prompts)
