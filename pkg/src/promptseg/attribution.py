"""Text-conditioned saliency through a per-patch information bottleneck.

A mask ``lam`` in [0, 1] (one value per patch, ``sigmoid`` of free logits)
blends the encoder's patch embeddings with Gaussian noise fitted to their
per-dimension statistics::

    Z = lam * E + (1 - lam) * eps,    eps ~ N(mu, sigma^2)

and is optimized by gradient ascent on

    J(lam) = cos(pool(Z), t) / temperature  -  gamma * mean KL(Z | E  ||  N(mu, sigma^2))

The first term rewards keeping what aligns with the text embedding ``t``,
the second charges for every nat of image information let through.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embedding import EncoderHandle, ImageTensor
from .imaging import resize_bilinear


@dataclass(frozen=True)
class BottleneckConfig:
    gamma: float = 0.1
    steps: int = 10
    step_size: float = 1.0
    noise_samples: int = 10
    seed: int = 0
    init_logit: float = 5.0
    temperature: float = 0.01
    # accept a step only if the objective (on a fixed noise bank) does not drop
    line_search: bool = False

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.steps < 1 or self.noise_samples < 1:
            raise ValueError("steps and noise_samples must be >= 1")
        if self.step_size <= 0 or self.temperature <= 0:
            raise ValueError("step_size and temperature must be positive")


@dataclass
class SaliencyMap:
    values: np.ndarray
    prompt_id: str = ""
    gamma: float = 0.1
    steps: int = 10
    seed: int = 0
    patch_values: np.ndarray = None
    history: list = field(default_factory=list)

    @property
    def shape(self):
        return self.values.shape


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x):
    return np.logaddexp(0.0, x)


class _Objective:
    def __init__(self, enc, patches, text, cfg):
        self.enc = enc
        self.cfg = cfg
        self.E = patches
        self.mu = patches.mean(axis=0)
        self.sigma = patches.std(axis=0) + 1e-8
        self.r = (patches - self.mu) / self.sigma
        self.r2 = (self.r**2).mean(axis=1)
        self.t = text

    def value_and_grad(self, x, noise):
        """Objective and its gradient w.r.t. the logits ``x`` for a noise bank (S, P, d)."""
        cfg = self.cfg
        lam = _sigmoid(x)
        keep = lam[None, :, None]
        zs = keep * self.r[None] + (1.0 - keep) * noise
        Z = self.mu + self.sigma * zs
        pooled = self.enc.pool(Z)
        norm = np.linalg.norm(pooled, axis=-1, keepdims=True)
        unit = pooled / norm
        cos = unit @ self.t
        relevance = cos.mean() / cfg.temperature

        # d cos / d pooled, per noise sample
        g_pooled = (self.t[None] - cos[:, None] * unit) / norm / cfg.temperature / noise.shape[0]
        g_Z = self.enc.pool_vjp(Z, g_pooled)
        g_lam_rel = (g_Z * self.sigma * (self.r[None] - noise)).sum(axis=(0, 2))

        # KL(N(lam r, (1-lam)^2) || N(0, 1)) per patch and dim, averaged;
        # log(1 - lam) = -softplus(x) keeps lam -> 1 finite
        one_m = 1.0 - lam
        kl = _softplus(x) + 0.5 * (one_m**2 + lam**2 * self.r2) - 0.5
        compression = kl.mean()
        P = lam.shape[0]
        dlam = lam * one_m
        g_x_comp = (lam - one_m * dlam + lam * self.r2 * dlam) / P

        value = relevance - cfg.gamma * compression
        g_x = g_lam_rel * dlam - cfg.gamma * g_x_comp
        return value, g_x


def compute_saliency(enc: EncoderHandle, image: ImageTensor, text_embedding, cfg: BottleneckConfig = None,
                     prompt_id: str = "") -> SaliencyMap:
    """Optimize the bottleneck mask for ``text_embedding`` and return it at image resolution."""
    cfg = cfg or BottleneckConfig()
    if enc.pool is None or enc.pool_vjp is None:
        raise ValueError("attribution requires patch-level features")
    patches, _ = enc.image_encoder(image)
    if patches is None:
        raise ValueError("attribution requires patch-level features")
    patches = np.asarray(patches, dtype=np.float64)
    rows, cols = enc.patch_grid
    if patches.ndim != 2 or patches.shape[0] != rows * cols:
        raise ValueError("attribution requires patch-level features")
    t = np.asarray(text_embedding, dtype=np.float64)
    if t.shape != (patches.shape[1],):
        raise ValueError(f"text embedding has shape {t.shape}, encoder dim is {patches.shape[1]}")
    if abs(np.linalg.norm(t) - 1.0) > 1e-6:
        raise ValueError("text embedding must be unit-norm")

    obj = _Objective(enc, patches, t, cfg)
    rng = np.random.default_rng(cfg.seed)
    shape = (cfg.noise_samples,) + patches.shape
    x = np.full(patches.shape[0], float(cfg.init_logit))
    history = []

    if cfg.line_search:
        bank = rng.standard_normal(shape)
        value, grad = obj.value_and_grad(x, bank)
        history.append(float(value))
        for _ in range(cfg.steps):
            step = cfg.step_size
            for _ in range(30):
                cand = x + step * grad
                c_value, c_grad = obj.value_and_grad(cand, bank)
                if np.isfinite(c_value) and c_value >= value:
                    x, value, grad = cand, c_value, c_grad
                    history.append(float(value))
                    break
                step *= 0.5
            else:
                break
    else:
        for _ in range(cfg.steps):
            value, grad = obj.value_and_grad(x, rng.standard_normal(shape))
            if not np.isfinite(value):
                raise FloatingPointError("bottleneck objective became non-finite")
            history.append(float(value))
            x = x + cfg.step_size * grad

    lam = _sigmoid(x).reshape(rows, cols)
    h, w = image.shape
    return SaliencyMap(
        values=saliency_to_image_space(lam, h, w),
        prompt_id=prompt_id,
        gamma=cfg.gamma,
        steps=cfg.steps,
        seed=cfg.seed,
        patch_values=lam,
        history=history,
    )


def saliency_to_image_space(patch_mask, H: int, W: int) -> np.ndarray:
    """Bilinear upsampling of a patch-grid mask to pixels, kept inside [0, 1]."""
    patch_mask = np.asarray(patch_mask, dtype=np.float64)
    if patch_mask.ndim != 2 or min(patch_mask.shape) < 1:
        raise ValueError("patch mask must be a non-empty 2-D grid")
    return np.clip(resize_bilinear(patch_mask, H, W), 0.0, 1.0)


__all__ = ["BottleneckConfig", "SaliencyMap", "compute_saliency", "saliency_to_image_space"]
