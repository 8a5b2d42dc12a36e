"""Uncertainty estimation network: encoder branches, mixture head, decoder.

Three parallel branches (kernel sizes 3, 5, 7) each run::

    conv(k, stride 2) -> relu -> conv(k, stride 2) -> relu -> up x2
    -> conv(k) -> relu -> up x2 -> conv(k) -> relu

Their outputs are concatenated and a shared 1x1 convolution maps them to the
10K-channel feature map ``z`` that holds the per-pixel mixture parameters.
A two-layer 3x3 decoder maps ``z`` back to an RGB reconstruction ``o``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import dml
from .erasing import EraseStrategy, build_mask, format_strategy, parse_strategy
from .seeding import make_rng
from .tensor import (
    ConvParams,
    ShapeError,
    concat_channels,
    conv2d_backward,
    conv2d_forward,
    conv2d_forward_cached,
    relu,
    relu_backward,
    split_channels,
    tanh,
    tanh_backward,
    upsample_nearest,
    upsample_nearest_backward,
)

log = logging.getLogger(__name__)

RECON_SIGMA = 0.1  # Gaussian surrogate width for surround pixels in heatmaps


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes NaN or infinite."""


@dataclass
class UenConfig:
    k_mixture: int = 10
    lam: float = 0.8
    lr: float = 1e-5
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    branch_widths: tuple[int, ...] = (32, 64, 32, 16)
    branch_kernels: tuple[int, ...] = (3, 5, 7)
    decoder_width: int = 32
    strategy: str = "center"
    patience: int = 5
    min_rel_improvement: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.branch_widths = tuple(int(v) for v in self.branch_widths)
        self.branch_kernels = tuple(int(v) for v in self.branch_kernels)
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.k_mixture < 1:
            raise ValueError("k_mixture must be >= 1")
        if len(self.branch_widths) != 4:
            raise ValueError("branch_widths needs four entries (one per branch layer)")
        if any(k % 2 == 0 for k in self.branch_kernels):
            raise ValueError("branch kernels must be odd")
        parse_strategy(self.strategy)

    @property
    def z_channels(self) -> int:
        return dml.n_channels(self.k_mixture)

    def strategies(self) -> list[EraseStrategy]:
        return parse_strategy(self.strategy)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    c_out: int
    c_in: int
    k: int
    stride: int
    padding: int


def architecture(cfg: UenConfig) -> list[LayerSpec]:
    """Ordered layer list; this order is also the checkpoint payload order."""
    w1, w2, w3, w4 = cfg.branch_widths
    layers = []
    for k in cfg.branch_kernels:
        p = k // 2
        layers += [
            LayerSpec(f"branch{k}.conv1", w1, 3, k, 2, p),
            LayerSpec(f"branch{k}.conv2", w2, w1, k, 2, p),
            LayerSpec(f"branch{k}.conv3", w3, w2, k, 1, p),
            LayerSpec(f"branch{k}.conv4", w4, w3, k, 1, p),
        ]
    layers.append(LayerSpec("head", cfg.z_channels, w4 * len(cfg.branch_kernels), 1, 1, 0))
    layers.append(LayerSpec("decoder.conv1", cfg.decoder_width, cfg.z_channels, 3, 1, 1))
    layers.append(LayerSpec("decoder.conv2", 3, cfg.decoder_width, 3, 1, 1))
    return layers


@dataclass
class UenWeights:
    config: UenConfig
    params: dict[str, ConvParams] = field(default_factory=dict)

    def copy(self) -> "UenWeights":
        return UenWeights(
            replace(self.config),
            {n: ConvParams(p.kernel.copy(), p.bias.copy(), p.stride, p.padding) for n, p in self.params.items()},
        )

    def astype(self, dtype) -> "UenWeights":
        return UenWeights(
            replace(self.config),
            {n: ConvParams(p.kernel.astype(dtype), p.bias.astype(dtype), p.stride, p.padding)
             for n, p in self.params.items()},
        )

    def arrays(self):
        """Yield ``(name, array)`` for every parameter tensor in payload order."""
        for spec in architecture(self.config):
            p = self.params[spec.name]
            yield spec.name + ".kernel", p.kernel
            yield spec.name + ".bias", p.bias

    def n_parameters(self) -> int:
        return sum(a.size for _, a in self.arrays())


def init_weights(cfg: UenConfig, dtype=np.float32) -> UenWeights:
    """He-uniform kernels, zero biases, drawn from the config seed."""
    rng = make_rng(cfg.seed, "init")
    params = {}
    for spec in architecture(cfg):
        fan_in = spec.c_in * spec.k * spec.k
        bound = math.sqrt(6.0 / fan_in)
        kernel = rng.uniform(-bound, bound, size=(spec.c_out, spec.c_in, spec.k, spec.k)).astype(dtype)
        params[spec.name] = ConvParams(kernel, np.zeros(spec.c_out, dtype=dtype), spec.stride, spec.padding)
    return UenWeights(cfg, params)


def zero_weights(cfg: UenConfig, dtype=np.float32) -> UenWeights:
    params = {
        s.name: ConvParams(np.zeros((s.c_out, s.c_in, s.k, s.k), dtype), np.zeros(s.c_out, dtype), s.stride, s.padding)
        for s in architecture(cfg)
    }
    return UenWeights(cfg, params)


# ---------------------------------------------------------------------------
# image plumbing


def normalize(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 [0, 255] -> [-1, 1]."""
    x = images.astype(dtype)
    return x / x.dtype.type(127.5) - x.dtype.type(1)


def erased_input(images: np.ndarray, masks: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Zero the erased region in the raw domain, then normalize (erased -> -1).

    ``masks`` is (N, H, W) or (H, W) with 1 on kept pixels.
    """
    m = masks if masks.ndim == 3 else np.broadcast_to(masks, (images.shape[0], *masks.shape))
    return normalize(images * m[:, None].astype(images.dtype), dtype)


# ---------------------------------------------------------------------------
# forward / backward


def _check_input(w: UenWeights, x: np.ndarray) -> None:
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"UEN input must be N x 3 x H x W, got {x.shape}")
    if x.shape[2] % 4 or x.shape[3] % 4:
        raise ShapeError(f"spatial dims {x.shape[2:]} must be divisible by 4")


def _conv(w: UenWeights, name: str, x: np.ndarray, cache: dict | None) -> np.ndarray:
    p = w.params[name]
    if cache is None:
        return conv2d_forward(x, p)
    y, cols = conv2d_forward_cached(x, p)
    cache[name] = (x, cols)
    return y


def encode(w: UenWeights, x_r: np.ndarray, cache: dict | None = None) -> np.ndarray:
    """Surround image (normalized) -> feature map z."""
    _check_input(w, x_r)
    outs = []
    for k in w.config.branch_kernels:
        h = relu(_conv(w, f"branch{k}.conv1", x_r, cache))
        h = relu(_conv(w, f"branch{k}.conv2", h, cache))
        h = relu(_conv(w, f"branch{k}.conv3", upsample_nearest(h, 2), cache))
        h = relu(_conv(w, f"branch{k}.conv4", upsample_nearest(h, 2), cache))
        if cache is not None:
            cache[f"branch{k}.out"] = h
        outs.append(h)
    z = _conv(w, "head", concat_channels(outs), cache)
    if z.shape[2:] != x_r.shape[2:]:
        raise ShapeError(f"feature map {z.shape[2:]} does not match input {x_r.shape[2:]}")
    return z


def decode(w: UenWeights, z: np.ndarray, cache: dict | None = None) -> np.ndarray:
    h = relu(_conv(w, "decoder.conv1", z, cache))
    o = tanh(_conv(w, "decoder.conv2", h, cache))
    if cache is not None:
        cache["decoder.out"] = o
    return o


def forward(w: UenWeights, x_r: np.ndarray, cache: dict | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(z, o)`` for a normalized surround batch."""
    z = encode(w, x_r, cache)
    return z, decode(w, z, cache)


def _conv_back(w: UenWeights, name: str, g: np.ndarray, cache: dict, grads: dict, need_x: bool = True):
    x, cols = cache[name]
    gx, gk, gb = conv2d_backward(x, w.params[name], g, cols=cols, need_grad_x=need_x)
    grads[name] = (gk, gb)
    return gx


def backward(w: UenWeights, cache: dict, dz: np.ndarray, do: np.ndarray | None) -> dict[str, tuple]:
    """Parameter gradients given upstream gradients on ``z`` and ``o``."""
    grads: dict[str, tuple] = {}
    dz = dz.copy()
    if do is not None:
        o = cache["decoder.out"]
        g = tanh_backward(o, do)
        g = _conv_back(w, "decoder.conv2", g, cache, grads)
        g = relu_backward(cache["decoder.conv2"][0], g)
        dz += _conv_back(w, "decoder.conv1", g, cache, grads)
    else:
        for name in ("decoder.conv1", "decoder.conv2"):
            p = w.params[name]
            grads[name] = (np.zeros_like(p.kernel), np.zeros_like(p.bias))

    g_cat = _conv_back(w, "head", dz, cache, grads)
    widths = [cache[f"branch{k}.out"].shape[1] for k in w.config.branch_kernels]
    for k, g in zip(w.config.branch_kernels, split_channels(g_cat, widths)):
        g = relu_backward(cache[f"branch{k}.out"], g)
        g = _conv_back(w, f"branch{k}.conv4", g, cache, grads)
        g = upsample_nearest_backward(g, 2)
        # conv4 saw up(relu(conv3 out)); the relu mask is its input subsampled
        g = relu_backward(cache[f"branch{k}.conv4"][0][:, :, ::2, ::2], g)
        g = _conv_back(w, f"branch{k}.conv3", g, cache, grads)
        g = upsample_nearest_backward(g, 2)
        g = relu_backward(cache[f"branch{k}.conv3"][0][:, :, ::2, ::2], g)
        g = _conv_back(w, f"branch{k}.conv2", g, cache, grads)
        g = relu_backward(cache[f"branch{k}.conv2"][0], g)
        _conv_back(w, f"branch{k}.conv1", g, cache, grads, need_x=False)
    return grads


# ---------------------------------------------------------------------------
# losses


def loss_r_per_sample(o: np.ndarray, x: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Mean squared error over kept pixels and channels, per sample."""
    m = masks if masks.ndim == 3 else np.broadcast_to(masks, (o.shape[0], *masks.shape))
    n_r = m.reshape(m.shape[0], -1).sum(axis=1)
    if np.any(n_r == 0):
        raise ValueError("mask keeps no pixels (N_r = 0)")
    diff = x.astype(np.float64) - o.astype(np.float64)
    sq = (diff * diff * m[:, None]).sum(axis=(1, 2, 3))
    return sq / (n_r * o.shape[1])


def loss_r(o: np.ndarray, x: np.ndarray, mask) -> float:
    """Reconstruction loss on the surround, batch mean."""
    m = np.asarray(getattr(mask, "m", mask))
    return float(np.mean(loss_r_per_sample(o, x, m)))


def _loss_r_grad(o, x, masks):
    n = o.shape[0]
    n_r = masks.reshape(n, -1).sum(axis=1)
    scale = (2.0 / (n * n_r * o.shape[1]))[:, None, None, None]
    return ((o.astype(np.float64) - x) * masks[:, None] * scale).astype(o.dtype)


@dataclass
class LossParts:
    total: float
    recon: float
    gen: float


def combine(lam: float, l_r: float, l_e: float) -> float:
    return lam * l_r + (1.0 - lam) * l_e


def loss_and_grads(w: UenWeights, images: np.ndarray, masks: np.ndarray, with_grads: bool = True):
    """Total loss on a uint8 batch with per-sample masks (N, H, W).

    Returns ``(LossParts, grads)``; ``grads`` is None when not requested.
    """
    cfg = w.config
    dtype = w.params["head"].kernel.dtype
    x = normalize(images, dtype)
    x_r = erased_input(images, masks, dtype)
    cache = {} if with_grads else None
    z, o = forward(w, x_r, cache)
    le_ps, dz = dml.loss_and_grad(z, x, masks, cfg.k_mixture)
    lr_ps = loss_r_per_sample(o, x, masks)
    l_r, l_e = float(lr_ps.mean()), float(le_ps.mean())
    parts = LossParts(combine(cfg.lam, l_r, l_e), l_r, l_e)
    if not with_grads:
        return parts, None
    do = cfg.lam * _loss_r_grad(o, x, masks)
    grads = backward(w, cache, (1.0 - cfg.lam) * dz, do)
    return parts, grads


def loss_total(x: np.ndarray, mask, w: UenWeights) -> LossParts:
    """``(L_total, L_r, L_e)`` for a uint8 batch under one shared mask."""
    m = np.asarray(getattr(mask, "m", mask))
    masks = np.broadcast_to(m, (x.shape[0], *m.shape)) if m.ndim == 2 else m
    return loss_and_grads(w, x, masks, with_grads=False)[0]


# ---------------------------------------------------------------------------
# training


class Adam:
    def __init__(self, weights: UenWeights, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {n: (np.zeros_like(p.kernel), np.zeros_like(p.bias)) for n, p in weights.params.items()}
        self.v = {n: (np.zeros_like(p.kernel), np.zeros_like(p.bias)) for n, p in weights.params.items()}

    def step(self, weights: UenWeights, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in weights.params.items():
            for slot, (param, g) in enumerate(((p.kernel, grads[name][0]), (p.bias, grads[name][1]))):
                m = self.m[name][slot]
                v = self.v[name][slot]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
                param -= update.astype(param.dtype)


@dataclass
class EpochLog:
    epoch: int
    total: float
    recon: float
    gen: float


def draw_masks(strategies: list[EraseStrategy], n: int, h: int, w: int, rng) -> np.ndarray:
    """One mask per sample; a variant is drawn uniformly when there are several."""
    stack = np.stack([build_mask(s, h, w).m for s in strategies])
    if len(strategies) == 1:
        return np.broadcast_to(stack[0], (n, h, w)).copy()
    return stack[rng.integers(0, len(strategies), size=n)]


def _plateaued(history: list[EpochLog], patience: int, tol: float) -> bool:
    if patience <= 0 or len(history) <= patience:
        return False
    old, new = history[-1 - patience].total, history[-1].total
    return (old - new) / max(abs(old), 1e-12) < tol


def train(config: UenConfig, images: np.ndarray, weights: UenWeights | None = None,
          progress=None) -> tuple[UenWeights, list[EpochLog]]:
    """Fit the network on a uint8 (N, 3, H, W) dataset.

    Deterministic for a given config: weights come from the ``init`` stream
    of the seed and each epoch shuffles with its own stream.  Only full
    batches are used.  Stops early when the epoch loss improves by less than
    ``min_rel_improvement`` over ``patience`` epochs.
    """
    n = images.shape[0]
    if n < config.batch_size:
        raise ValueError(f"dataset has {n} images, fewer than batch_size={config.batch_size}")
    strategies = config.strategies()
    w = init_weights(config) if weights is None else weights.copy()
    w.config = config
    opt = Adam(w, config.lr, config.beta1, config.beta2, config.adam_eps)
    history: list[EpochLog] = []
    h, wd = images.shape[2:]
    for epoch in range(config.epochs):
        rng = make_rng(config.seed, "epoch", epoch)
        order = rng.permutation(n)
        sums = np.zeros(3)
        n_batches = n // config.batch_size
        for b in range(n_batches):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            masks = draw_masks(strategies, len(idx), h, wd, rng)
            try:
                parts, grads = loss_and_grads(w, images[idx], masks)
            except FloatingPointError as e:
                raise TrainingDivergedError(f"non-finite values at epoch {epoch + 1}, batch {b}: {e}") from e
            if not math.isfinite(parts.total):
                raise TrainingDivergedError(f"loss became non-finite at epoch {epoch + 1}, batch {b}")
            opt.step(w, grads)
            sums += (parts.total, parts.recon, parts.gen)
        mean = sums / n_batches
        history.append(EpochLog(epoch + 1, *(float(v) for v in mean)))
        log.info("epoch %d: L_total=%.5f L_r=%.5f L_e=%.5f", epoch + 1, *mean)
        if progress is not None:
            progress(history[-1])
        if _plateaued(history, config.patience, config.min_rel_improvement):
            log.info("loss plateaued after %d epochs; stopping", epoch + 1)
            break
    for name, arr in w.arrays():
        if not np.all(np.isfinite(arr)):
            raise TrainingDivergedError(f"parameter {name} became non-finite")
    return w, history


def evaluate(w: UenWeights, images: np.ndarray, strategy: EraseStrategy | str = "center",
             batch_size: int = 64) -> LossParts:
    """Dataset-mean losses under a fixed strategy variant."""
    s = parse_strategy(strategy)[0] if isinstance(strategy, str) else strategy
    h, wd = images.shape[2:]
    m = build_mask(s, h, wd).m
    totals = np.zeros(3)
    for start in range(0, len(images), batch_size):
        batch = images[start:start + batch_size]
        parts = loss_total(batch, m, w)
        totals += np.array([parts.total, parts.recon, parts.gen]) * len(batch)
    t, r, g = totals / len(images)
    return LossParts(t, r, g)


# ---------------------------------------------------------------------------
# scoring and inspection


def _strategy_list(strategy) -> list[EraseStrategy]:
    if isinstance(strategy, str):
        return parse_strategy(strategy)
    if isinstance(strategy, EraseStrategy):
        return [strategy]
    return list(strategy)


def score_dataset(w: UenWeights, images: np.ndarray, strategy="center", batch_size: int = 64) -> np.ndarray:
    """Per-image generation loss (bits per erased sub-pixel).

    Multi-variant strategies score each image under every variant and
    average.  Weights are not modified.
    """
    strategies = _strategy_list(strategy)
    dtype = w.params["head"].kernel.dtype
    h, wd = images.shape[2:]
    scores = np.zeros(len(images))
    for s in strategies:
        m = build_mask(s, h, wd).m
        for start in range(0, len(images), batch_size):
            batch = images[start:start + batch_size]
            z = encode(w, erased_input(batch, m, dtype))
            field_ = dml.params_from_features(z, w.config.k_mixture)
            scores[start:start + len(batch)] += dml.generation_loss_per_sample(field_, normalize(batch, np.float64), m)
    return scores / len(strategies)


def pixel_log2_likelihood(w: UenWeights, images: np.ndarray, strategy: EraseStrategy) -> np.ndarray:
    """(N, H, W) map: mixture log2-likelihood on erased pixels, Gaussian
    surrogate around the reconstruction on kept pixels (mean over channels)."""
    dtype = w.params["head"].kernel.dtype
    h, wd = images.shape[2:]
    m = build_mask(strategy, h, wd).m
    z, o = forward(w, erased_input(images, m, dtype))
    x = normalize(images, np.float64)
    field_ = dml.params_from_features(z, w.config.k_mixture)
    erased_lp = dml.log_prob_pixel(field_, x).mean(axis=1)
    sig = RECON_SIGMA
    diff = x - o.astype(np.float64)
    gauss = -0.5 * (diff / sig) ** 2 - np.log(sig * np.sqrt(2 * np.pi)) + np.log(2 * dml.HALF_BIN)
    kept_lp = (gauss / dml.LN2).mean(axis=1)
    return np.where(m == 0, erased_lp, kept_lp)


def likelihood_heatmap(w: UenWeights, images: np.ndarray, strategy="center", batch_size: int = 64) -> np.ndarray:
    """Mean per-pixel log2-likelihood over a dataset, (H, W).

    For multi-variant strategies the per-variant maps are averaged.
    """
    if len(images) == 0:
        raise ValueError("cannot build a heatmap from an empty dataset")
    strategies = _strategy_list(strategy)
    acc = np.zeros(images.shape[2:])
    for s in strategies:
        for start in range(0, len(images), batch_size):
            acc += pixel_log2_likelihood(w, images[start:start + batch_size], s).sum(axis=0)
    return acc / (len(images) * len(strategies))


def export_features(w: UenWeights, images: np.ndarray, strategy="center", batch_size: int = 64) -> np.ndarray:
    """Flattened feature maps, one float32 row of length 10K*H*W per image."""
    strategies = _strategy_list(strategy)
    if len(strategies) != 1:
        raise ValueError(f"feature export needs a single strategy variant, got {format_strategy(strategies)}")
    dtype = w.params["head"].kernel.dtype
    h, wd = images.shape[2:]
    m = build_mask(strategies[0], h, wd).m
    rows = [
        encode(w, erased_input(images[s:s + batch_size], m, dtype)).reshape(len(images[s:s + batch_size]), -1)
        for s in range(0, len(images), batch_size)
    ]
    if not rows:
        return np.zeros((0, w.config.z_channels * h * wd), dtype=np.float32)
    return np.concatenate(rows).astype(np.float32)


def config_dict(cfg: UenConfig) -> dict:
    d = asdict(cfg)
    d["branch_widths"] = list(cfg.branch_widths)
    d["branch_kernels"] = list(cfg.branch_kernels)
    return d
