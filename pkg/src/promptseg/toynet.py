"""A tiny three-level encoder-decoder CNN with hand-written backprop.

Stands in for a full segmentation network in the weak-supervision trainer.
Layout (c = ``channels``)::

    x -> conv(3, c) -> h1 ------------------------------> cat -> conv(2c, c) -> d1 -> 1x1 -> logits
           pool                                            ^ up
           conv(c, 2c) -> h2 -------------> cat -> conv(4c, c) -> d2
             pool                            ^ up
             conv(2c, 2c) -> h3 -------------+

All hidden convolutions are 3x3 with ReLU; pooling is 2x2 average, upsampling
nearest-neighbour. Training minimizes pixelwise cross-entropy plus soft Dice
on the foreground channel, equal weights, with SGD + momentum.
"""

from __future__ import annotations

import numpy as np

from . import kernels

N_CLASSES = 2


def _pool(x):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _pool_back(g):
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0


def _up(x):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def _up_back(g):
    n, c, h, w = g.shape
    return g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def softmax_channels(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def init_params(channels=8, seed=0):
    rng = np.random.default_rng(seed)
    c = channels
    shapes = {
        "c1": (c, 3, 3), "c2": (2 * c, c, 3), "c3": (2 * c, 2 * c, 3),
        "d2": (c, 4 * c, 3), "d1": (c, 2 * c, 3), "out": (N_CLASSES, c, 1),
    }
    params = {}
    for name, (o, i, k) in shapes.items():
        # He init
        params[name + ".w"] = rng.normal(scale=np.sqrt(2.0 / (i * k * k)), size=(o, i, k, k))
        params[name + ".b"] = np.zeros(o)
    return params


def _to_nchw(images):
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ValueError(f"expected (N, H, W, 3) images, got {x.shape}")
    if x.shape[1] % 4 or x.shape[2] % 4:
        raise ValueError("image sides must be multiples of 4")
    return x.transpose(0, 3, 1, 2) - 0.5


def forward(params, x):
    """Logits (N, 2, H, W) plus the cache needed by :func:`backward`."""
    cache = {"x": x}

    def conv_relu(name, inp):
        pre = kernels.conv2d_forward(inp, params[name + ".w"], params[name + ".b"])
        cache[name] = (inp, pre)
        return np.maximum(pre, 0.0)

    h1 = conv_relu("c1", x)
    h2 = conv_relu("c2", _pool(h1))
    h3 = conv_relu("c3", _pool(h2))
    d2 = conv_relu("d2", np.concatenate([_up(h3), h2], axis=1))
    d1 = conv_relu("d1", np.concatenate([_up(d2), h1], axis=1))
    logits = kernels.conv2d_forward(d1, params["out.w"], params["out.b"])
    cache["out"] = (d1, None)
    cache["split"] = (h3.shape[1], d2.shape[1])
    return logits, cache


def backward(params, cache, g_logits):
    grads = {}

    def conv_back(name, g_out, relu=True):
        inp, pre = cache[name]
        if relu:
            g_out = g_out * (pre > 0)
        dx, dw, db = kernels.conv2d_backward(inp, params[name + ".w"], g_out)
        grads[name + ".w"], grads[name + ".b"] = dw, db
        return dx

    n3, n2 = cache["split"]
    g_d1 = conv_back("out", g_logits, relu=False)
    g_cat1 = conv_back("d1", g_d1)
    g_d2, g_h1 = _up_back(g_cat1[:, :n2]), g_cat1[:, n2:]
    g_cat2 = conv_back("d2", g_d2)
    g_h3, g_h2 = _up_back(g_cat2[:, :n3]), g_cat2[:, n3:]
    g_h2 = g_h2 + _pool_back(conv_back("c3", g_h3))
    g_h1 = g_h1 + _pool_back(conv_back("c2", g_h2))
    conv_back("c1", g_h1)
    return grads


def composite_loss(logits, target, smooth=1.0):
    """Cross-entropy + (1 - soft Dice), both means over the batch; returns (loss, dL/dlogits)."""
    y = np.asarray(target, dtype=np.float64)
    n = logits.shape[0]
    prob = softmax_channels(logits)
    onehot = np.stack([1.0 - y, y], axis=1)
    count = y.size
    ce = -np.sum(onehot * np.log(np.clip(prob, 1e-300, None))) / count
    g = (prob - onehot) / count

    p1 = prob[:, 1]
    inter = (p1 * y).sum(axis=(1, 2))
    denom = p1.sum(axis=(1, 2)) + y.sum(axis=(1, 2)) + smooth
    dsc = (2.0 * inter + smooth) / denom
    dice_loss = float(np.mean(1.0 - dsc))
    # d(1 - dsc)/dp1, averaged over the batch
    g_p1 = -(2.0 * y * denom[:, None, None] - (2.0 * inter + smooth)[:, None, None]) / denom[:, None, None] ** 2 / n
    # through the 2-class softmax: dp1/dz1 = p1 p0, dp1/dz0 = -p1 p0
    s = g_p1 * p1 * prob[:, 0]
    g = g + np.stack([-s, s], axis=1)
    return ce + dice_loss, g


class ToySegNet:
    """Trainable model exposing ``predict`` / ``update`` / ``params`` for the weak trainer."""

    def __init__(self, channels=8, seed=0, momentum=0.9, clip_norm=1.0, params=None):
        self.channels = int(channels)
        self.seed = int(seed)
        self.momentum = float(momentum)
        self.clip_norm = clip_norm
        self.params = params if params is not None else init_params(channels, seed)
        self.velocity = {k: np.zeros_like(v) for k, v in self.params.items()}

    def snapshot(self):
        return {k: v.copy() for k, v in self.params.items()}

    def with_params(self, params):
        params = {k: v.copy() for k, v in params.items()}
        return ToySegNet(self.channels, self.seed, self.momentum, self.clip_norm, params)

    def predict(self, pixels):
        """(H, W, 3) image -> (H, W, 2) class probabilities."""
        logits, _ = forward(self.params, _to_nchw(pixels))
        return softmax_channels(logits)[0].transpose(1, 2, 0)

    def loss_and_grads(self, images, masks):
        logits, cache = forward(self.params, _to_nchw(images))
        loss, g = composite_loss(logits, masks)
        return loss, backward(self.params, cache, g)

    def update(self, images, masks, lr):
        loss, grads = self.loss_and_grads(images, masks)
        if not np.isfinite(loss):
            raise FloatingPointError("segmentation loss is not finite")
        if self.clip_norm:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > self.clip_norm:
                grads = {k: g * (self.clip_norm / norm) for k, g in grads.items()}
        for k, g in grads.items():
            v = self.momentum * self.velocity[k] - lr * g
            self.velocity[k] = v
            self.params[k] = self.params[k] + v
        return loss


def planted_shape_dataset(n, side=16, seed=0, noise=0.15):
    """Noisy images with one bright ellipse each; returns a list of (pixels, mask)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    out = []
    for _ in range(n):
        cy, cx = rng.uniform(side * 0.3, side * 0.7, size=2)
        ry, rx = rng.uniform(side * 0.15, side * 0.3, size=2)
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        img = np.full((side, side, 3), 0.3) + rng.normal(scale=noise, size=(side, side, 3))
        img[mask] += np.array([0.4, 0.3, 0.2])
        out.append((np.clip(img, 0.0, 1.0), mask))
    return out
