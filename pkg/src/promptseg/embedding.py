"""Image/text tensors, preprocessing, the encoder abstraction and prompt ensembles.

Encoders are consumed through :class:`EncoderHandle`. A deterministic
synthetic encoder (:func:`make_synthetic_encoder`) stands in for pretrained
vision-language checkpoints in tests; external checkpoints plug in through
:func:`register_encoder`.
"""

from __future__ import annotations

import csv
import hashlib
import importlib
import json
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .imaging import read_rgb, resize_bilinear

CLIP_MEAN = np.array([0.48145466, 0.4578275, 0.40821073])
CLIP_STD = np.array([0.26862954, 0.26130258, 0.27577711])

PROMPT_CONFIGS = ("P0", "P1", "P2", "P3", "P4", "P5")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MIN_CAPTION_LENGTH = 20

_KEEP_PUNCT = set(".,;:()%-/ ")
_TOKEN = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class ImageTensor:
    pixels: np.ndarray
    source_path: Optional[str] = None
    # True once channel-standardized by preprocess_image
    normalized: bool = False

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"image must be H x W x C, got shape {px.shape}")
        if not np.isfinite(px).all():
            raise ValueError("image contains non-finite values")
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self):
        return self.pixels.shape[:2]


@dataclass(frozen=True)
class TextPrompt:
    text: str
    class_label: Optional[str] = None
    config_id: str = "P0"

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("prompt text is empty")
        if self.config_id not in PROMPT_CONFIGS:
            raise ValueError(f"unknown prompt configuration {self.config_id!r}")


@dataclass(frozen=True)
class EmbeddingBatch:
    image_embeddings: np.ndarray
    text_embeddings: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        img = np.asarray(self.image_embeddings, dtype=np.float64)
        txt = np.asarray(self.text_embeddings, dtype=np.float64)
        if img.ndim != 2 or txt.ndim != 2 or img.shape != txt.shape:
            raise ValueError(f"embedding matrices must share shape B x d, got {img.shape} and {txt.shape}")
        if img.shape[1] < 2:
            raise ValueError("embedding dimension must be at least 2")
        if self.normalized:
            for name, m in (("image", img), ("text", txt)):
                if np.abs(np.linalg.norm(m, axis=1) - 1.0).max(initial=0.0) > 1e-6:
                    raise ValueError(f"{name} embeddings are flagged normalized but rows are not unit norm")
        object.__setattr__(self, "image_embeddings", img)
        object.__setattr__(self, "text_embeddings", txt)

    @property
    def size(self):
        return self.image_embeddings.shape[0]

    @classmethod
    def from_raw(cls, images, texts):
        return cls(_unit_rows(images), _unit_rows(texts), normalized=True)


def mean_pool(patches):
    """Mean over the patch axis; accepts (P, d) or stacked (S, P, d)."""
    return np.asarray(patches).mean(axis=-2)


def mean_pool_vjp(patches, grad_pooled):
    patches = np.asarray(patches)
    g = np.asarray(grad_pooled)[..., None, :] / patches.shape[-2]
    return np.broadcast_to(g, patches.shape).copy()


@dataclass(frozen=True)
class EncoderHandle:
    """A vision-language encoder pair sharing an embedding space of size ``dim``.

    ``image_encoder`` maps a preprocessed :class:`ImageTensor` to
    ``(patch_embeddings[P, d], pooled[d])``; ``pool``/``pool_vjp`` describe how
    patch embeddings at the attribution insertion point reduce to the pooled
    embedding. ``trainable`` exposes parameters for fine-tuning (optional).
    """

    image_encoder: Callable
    text_encoder: Callable
    params_version: str
    patch_grid: tuple
    dim: int
    input_side: int
    pool: Optional[Callable] = mean_pool
    pool_vjp: Optional[Callable] = mean_pool_vjp
    trainable: object = None
    name: str = "encoder"

    @property
    def num_patches(self):
        return int(self.patch_grid[0] * self.patch_grid[1])


def _unit_rows(x):
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot normalize a zero embedding")
    return x / norms


def unit(v):
    return _unit_rows(v)


# ---------------------------------------------------------------- preprocessing


def preprocess_image(raw: ImageTensor, side: int = 224) -> ImageTensor:
    """Resize to ``side`` x ``side`` (bilinear) and standardize channels."""
    if side < 16:
        raise ValueError(f"side must be >= 16, got {side}")
    if raw.pixels.shape[2] != 3:
        raise ValueError(f"channel mismatch: expected 3 channels, got {raw.pixels.shape[2]}")
    if raw.normalized:
        if raw.shape == (side, side):
            return raw
        return replace(raw, pixels=resize_bilinear(raw.pixels, side, side))
    px = resize_bilinear(raw.pixels, side, side)
    px = (px - CLIP_MEAN) / CLIP_STD
    return ImageTensor(px, source_path=raw.source_path, normalized=True)


def clean_caption(text: str) -> Optional[str]:
    """Strip special characters and surrounding whitespace; None if too short."""
    text = "".join(" " if ch.isspace() else ch for ch in text)
    kept = "".join(ch for ch in text if ch.isalnum() or ch in _KEEP_PUNCT).strip()
    if len(kept) < MIN_CAPTION_LENGTH:
        return None
    return kept


# ---------------------------------------------------------------- encoding


def encode_batch(enc: EncoderHandle, images, prompts) -> EmbeddingBatch:
    if len(images) != len(prompts):
        raise ValueError(f"got {len(images)} images but {len(prompts)} prompts")
    if not images:
        raise ValueError("encode_batch needs at least one pair")
    pooled = np.stack([np.asarray(enc.image_encoder(im)[1], dtype=np.float64) for im in images])
    texts = np.stack([np.asarray(enc.text_encoder(p), dtype=np.float64) for p in prompts])
    if pooled.shape[1] != texts.shape[1]:
        raise ValueError(f"encoder dimension mismatch: image {pooled.shape[1]} vs text {texts.shape[1]}")
    return EmbeddingBatch.from_raw(pooled, texts)


def ensemble_prompt_embedding(enc: EncoderHandle, prompts) -> np.ndarray:
    """Unit-length mean of the prompts' unit text embeddings."""
    if not prompts:
        raise ValueError("prompt ensemble is empty")
    rows = _unit_rows(np.stack([enc.text_encoder(p) for p in prompts]))
    # sort rows so the reduction order, and hence the result, ignores input order
    rows = rows[np.lexsort(rows.T[::-1])]
    return _unit_rows(rows.mean(axis=0))


# ---------------------------------------------------------------- synthetic encoder


def _seeded_rng(*parts):
    digest = hashlib.blake2b("\x1f".join(map(str, parts)).encode(), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def tokenize(text):
    return _TOKEN.findall(text.lower())


@dataclass(frozen=True)
class PlantedRegion:
    """A rectangle of patches (top, left, height, width in patch units) carrying
    a constant signature colour, plus the prompt whose embedding matches it."""

    top: int
    left: int
    height: int
    width: int
    prompt: str = "planted target region"
    color: tuple = (0.8, 0.2, 0.2)

    def patch_mask(self, grid):
        m = np.zeros(grid, dtype=bool)
        m[self.top : self.top + self.height, self.left : self.left + self.width] = True
        return m

    def pixel_mask(self, grid, side):
        ps = side // grid[0]
        return np.kron(self.patch_mask(grid), np.ones((ps, ps), dtype=bool))


@dataclass(frozen=True)
class SyntheticWorld:
    """Deterministic word-to-texture renderer shared by the toy corpus and the
    ``render`` text mode of the synthetic encoder."""

    seed: int = 0
    side: int = 32
    class_words: tuple = ("lesion", "effusion")
    class_amp: float = 0.6
    word_amp: float = 0.45

    def pattern(self, word):
        amp = self.class_amp if word in self.class_words else self.word_amp
        return amp * _seeded_rng("pattern", self.seed, word).normal(size=(self.side, self.side, 3))

    def render(self, words, noise=None):
        field_ = np.zeros((self.side, self.side, 3))
        for w in words:
            field_ += self.pattern(w)
        if noise is not None:
            field_ += noise
        return 0.5 + 0.5 * np.tanh(field_)


class SyntheticEncoder:
    """Linear-projection toy encoder.

    Image path: patches -> fixed random projection -> tanh -> trainable
    ``W_img``; pooled embedding is the mean patch embedding. Text path
    (``hash`` mode): mean of hashed token vectors -> trainable ``W_txt``.
    In ``render`` mode captions are drawn with :class:`SyntheticWorld` and go
    through the image path, so matched pairs embed identically.
    """

    def __init__(self, seed, dim, side=224, patch=16, width=256, planted=None, text_mode="hash",
                 world=None, params=None):
        if dim < 4:
            raise ValueError("synthetic encoder needs dim >= 4")
        if side % patch:
            raise ValueError("side must be a multiple of the patch size")
        if text_mode not in ("hash", "render"):
            raise ValueError(f"unknown text mode {text_mode!r}")
        self.seed = int(seed)
        self.dim = int(dim)
        self.side = int(side)
        self.patch = int(patch)
        self.width = int(width)
        self.planted = planted
        self.text_mode = text_mode
        self.world = world if world is not None else SyntheticWorld(seed=seed, side=side)
        rng = np.random.default_rng(self.seed)
        fan_in = patch * patch * 3
        self.proj = rng.normal(scale=1.0 / np.sqrt(fan_in), size=(self.width, fan_in))
        if params is None:
            params = {
                "W_img": rng.normal(scale=1.0 / np.sqrt(self.width), size=(self.dim, self.width)),
                "W_txt": rng.normal(scale=1.0 / np.sqrt(self.width), size=(self.dim, self.width)),
            }
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    # -- structure
    @property
    def grid(self):
        n = self.side // self.patch
        return (n, n)

    def config(self):
        return {
            "kind": "synthetic",
            "seed": self.seed,
            "dim": self.dim,
            "side": self.side,
            "patch": self.patch,
            "width": self.width,
            "text_mode": self.text_mode,
            "planted": None if self.planted is None else {
                "top": self.planted.top, "left": self.planted.left,
                "height": self.planted.height, "width": self.planted.width,
                "prompt": self.planted.prompt, "color": list(self.planted.color),
            },
        }

    def version(self):
        h = hashlib.sha1()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()[:16]

    def with_parameters(self, params):
        return SyntheticEncoder(self.seed, self.dim, self.side, self.patch, self.width, self.planted,
                                self.text_mode, self.world, params)

    def handle(self):
        return EncoderHandle(
            image_encoder=self.encode_image,
            text_encoder=self.encode_text,
            params_version=self.version(),
            patch_grid=self.grid,
            dim=self.dim,
            input_side=self.side,
            trainable=self,
            name="synthetic",
        )

    # -- features (parameter-free part)
    def patch_tokens(self, pixels):
        px = np.asarray(pixels, dtype=np.float64)
        if px.shape != (self.side, self.side, 3):
            raise ValueError(f"synthetic encoder expects {self.side}x{self.side}x3 input, got {px.shape}")
        n, p = self.side // self.patch, self.patch
        flat = px.reshape(n, p, n, p, 3).transpose(0, 2, 1, 3, 4).reshape(n * n, p * p * 3)
        return np.tanh(flat @ self.proj.T)

    def image_features(self, image: ImageTensor):
        return self.patch_tokens(image.pixels).mean(axis=0)

    def _planted_tokens(self):
        color = (np.asarray(self.planted.color, dtype=np.float64) - CLIP_MEAN) / CLIP_STD
        px = np.broadcast_to(color, (self.side, self.side, 3))
        return self.patch_tokens(px)[0]

    def text_features(self, prompt: TextPrompt):
        """Returns (kind, features); kind says which weight matrix applies."""
        if self.planted is not None and _norm_text(prompt.text) == _norm_text(self.planted.prompt):
            return "W_img", self._planted_tokens()
        words = tokenize(prompt.text)
        if self.text_mode == "render":
            raw = ImageTensor(self.world.render(words))
            return "W_img", self.image_features(preprocess_image(raw, self.side))
        if not words:
            words = ["<empty>"]
        vecs = [_seeded_rng("token", self.seed, w).normal(size=self.width) for w in words]
        return "W_txt", np.mean(vecs, axis=0)

    # -- encoder functions
    def encode_image(self, image: ImageTensor):
        patches = self.patch_tokens(image.pixels) @ self.params["W_img"].T
        return patches, patches.mean(axis=0)

    def encode_text(self, prompt: TextPrompt):
        kind, feats = self.text_features(prompt)
        return self.params[kind] @ feats

    # -- fine-tuning protocol: prepare / embed / backprop
    def prepare(self, pairs):
        img = np.stack([self.image_features(im) for im, _ in pairs])
        kinds, txt = zip(*(self.text_features(p) for _, p in pairs))
        return {"img": img, "txt": np.stack(txt), "kinds": np.array(kinds)}

    def embed(self, params, feats, idx):
        """Unnormalized (image, text) embeddings for rows ``idx``."""
        img = feats["img"][idx] @ params["W_img"].T
        txt = np.empty((len(idx), self.dim))
        kinds = feats["kinds"][idx]
        for name in ("W_img", "W_txt"):
            sel = kinds == name
            if sel.any():
                txt[sel] = feats["txt"][idx][sel] @ params[name].T
        return img, txt

    def backprop(self, params, feats, idx, g_img, g_txt):
        grads = {"W_img": g_img.T @ feats["img"][idx], "W_txt": np.zeros_like(params["W_txt"])}
        kinds = feats["kinds"][idx]
        for name in ("W_img", "W_txt"):
            sel = kinds == name
            if sel.any():
                grads[name] = grads[name] + g_txt[sel].T @ feats["txt"][idx][sel]
        return grads


def _norm_text(text):
    return " ".join(tokenize(text))


def make_synthetic_encoder(seed: int = 0, d: int = 32, planted: Optional[PlantedRegion] = None, **kwargs) -> EncoderHandle:
    return SyntheticEncoder(seed, d, planted=planted, **kwargs).handle()


def render_planted_image(planted: PlantedRegion, side, grid, seed, texture=0.5):
    """Raw [0, 1] image: textured background patches around mid-grey, and the
    planted rectangle filled with its signature colour."""
    rng = np.random.default_rng(seed)
    ps = side // grid[0]
    base = rng.uniform(0.45, 0.55, size=tuple(grid) + (3,))
    px = np.kron(base, np.ones((ps, ps, 1)))
    px = np.clip(px + rng.uniform(-texture, texture, size=px.shape), 0.0, 1.0)
    px[planted.pixel_mask(grid, side)] = planted.color
    return ImageTensor(px)


def make_two_cluster_corpus(n, seed=0, world=None, n_words=30, words_per_caption=3, noise=0.05):
    """Toy paired corpus: each image renders its caption's words.

    Captions are ``"<class word> <w1> <w2> <w3> ..."``; half the pairs use each
    class word, so image and text embeddings form two clusters. Word sets are
    unique across the corpus.
    """
    world = world if world is not None else SyntheticWorld(seed=seed)
    rng = np.random.default_rng(seed + 7919)
    vocab = [f"finding{i:02d}" for i in range(n_words)]
    seen = set()
    pairs = []
    while len(pairs) < n:
        cls = world.class_words[len(pairs) % len(world.class_words)]
        picks = tuple(sorted(rng.choice(n_words, size=words_per_caption, replace=False).tolist()))
        if (cls, picks) in seen:
            continue
        seen.add((cls, picks))
        words = [cls] + [vocab[i] for i in picks]
        eps = rng.normal(scale=noise, size=(world.side, world.side, 3)) if noise > 0 else None
        img = ImageTensor(world.render(words, eps))
        pairs.append((img, TextPrompt(" ".join(words), class_label=cls)))
    return pairs


# ---------------------------------------------------------------- external adapters

_ENCODER_FACTORIES = {}


def register_encoder(name, factory):
    """Register ``factory(config: dict) -> EncoderHandle`` under ``external:<name>``."""
    _ENCODER_FACTORIES[name] = factory


def load_encoder(spec, config=None, params_path=None) -> EncoderHandle:
    """Resolve ``synthetic`` or ``external:<name>`` into an encoder handle.

    ``external:<name>`` looks up :func:`register_encoder` first, then treats
    ``name`` as ``package.module:factory``.
    """
    config = dict(config or {})
    if spec == "synthetic":
        planted = config.get("planted")
        if planted is not None:
            planted = PlantedRegion(**{**planted, "color": tuple(planted.get("color", (0.8, 0.2, 0.2)))})
        kw = {k: config[k] for k in ("side", "patch", "width", "text_mode") if k in config}
        world = config.get("world")
        if world is not None:
            kw["world"] = SyntheticWorld(**{**world, "class_words": tuple(world.get("class_words", ("lesion", "effusion")))})
        enc = SyntheticEncoder(config.get("seed", 0), config.get("dim", 32), planted=planted, **kw)
        if params_path is not None:
            with np.load(params_path) as z:
                enc = enc.with_parameters({k: z[k] for k in z.files})
        return enc.handle()
    if spec.startswith("external:"):
        name = spec.split(":", 1)[1]
        if name in _ENCODER_FACTORIES:
            return _ENCODER_FACTORIES[name](config)
        if ":" in name:
            mod, attr = name.split(":", 1)
            try:
                factory = getattr(importlib.import_module(mod), attr)
            except (ImportError, AttributeError) as exc:
                raise LookupError(f"external encoder {name!r} not importable: {exc}") from exc
            return factory(config)
        raise LookupError(f"no external encoder registered as {name!r}")
    raise LookupError(f"unknown encoder selection {spec!r}")


# ---------------------------------------------------------------- file ingestion


def load_image(path) -> ImageTensor:
    return ImageTensor(read_rgb(path), source_path=str(path))


def list_images(directory):
    d = Path(directory)
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_captions(path):
    """Read ``filename<TAB>caption`` lines into a dict."""
    out = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE):
            if len(row) >= 2 and row[0].strip():
                out[row[0].strip()] = "\t".join(row[1:])
    return out


def load_pairs(root, side=None):
    """Image/caption pairs from ``root/images`` and ``root/captions.tsv``.

    Captions are cleaned; pairs whose caption is filtered out are dropped.
    """
    root = Path(root)
    caps = load_captions(root / "captions.tsv")
    pairs = []
    for path in list_images(root / "images"):
        if path.name not in caps:
            continue
        text = clean_caption(caps[path.name])
        if text is None:
            continue
        img = load_image(path)
        if side is not None:
            img = preprocess_image(img, side)
        pairs.append((img, TextPrompt(text)))
    return pairs


def load_prompt_file(path):
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise ValueError(f"prompt file {path} has no prompts")
    return lines


def load_prompt_manifest(path):
    """``{config_id: {class_label: prompt_file}}`` with paths resolved against the manifest."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    out = {}
    for cfg, classes in raw.items():
        if cfg not in PROMPT_CONFIGS:
            raise ValueError(f"manifest {path}: unknown configuration {cfg!r}")
        out[cfg] = {label: (path.parent / f).resolve() for label, f in classes.items()}
    return out


def prompts_for(manifest, config_id, class_label):
    try:
        file = manifest[config_id][class_label]
    except KeyError:
        raise KeyError(f"no prompts for configuration {config_id} / class {class_label!r}") from None
    return [TextPrompt(t, class_label=class_label, config_id=config_id) for t in load_prompt_file(file)]

