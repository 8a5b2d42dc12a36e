"""Discretized mixture of logistics over 8-bit RGB pixels.

The 10K-channel feature map is sliced in this fixed order::

    [0, K)      mixture logits
    [K, 4K)     means          (colour-major: channel c, component k -> K + c*K + k)
    [4K, 7K)    log scales     (clamped at -7)
    [7K, 10K)   coupling coefficients (tanh-bounded; c0, c1, c2)

Pixel values live on the 256-level grid mapped to [-1, 1], so a bin has
half-width 1/255.  Each colour channel gets its own mixture over the shared
weights; green and blue means are shifted linearly by the true red (and
green) values.  All likelihood arithmetic runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_softmax, logsumexp, softmax

HALF_BIN = 1.0 / 255.0
LOG_SCALE_MIN = -7.0
DENSITY_FLOOR = 1e-12
LN2 = np.log(2.0)
N_PARAM_GROUPS = 10  # logits + 3 means + 3 log scales + 3 coefficients


def n_channels(k: int) -> int:
    return N_PARAM_GROUPS * k


@dataclass
class MixtureField:
    """Per-pixel mixture parameters with arbitrary leading pixel axes.

    ``logits`` is (..., K); ``means``, ``log_scales`` and ``coeffs`` are
    (..., 3, K).  ``scale_active`` marks log scales that were not clamped.
    """

    logits: np.ndarray
    means: np.ndarray
    log_scales: np.ndarray
    coeffs: np.ndarray
    scale_active: np.ndarray

    @property
    def k(self) -> int:
        return self.logits.shape[-1]

    @property
    def weights(self) -> np.ndarray:
        return softmax(self.logits, axis=-1)


def _as_rows(z: np.ndarray) -> np.ndarray:
    # (N, C, H, W) -> (N, H, W, C); already channel-last arrays pass through
    if z.ndim == 4:
        return np.moveaxis(z, 1, -1)
    return z


def params_from_features(z: np.ndarray, k: int = 10) -> MixtureField:
    """Slice a (N, 10K, H, W) map (or (..., 10K) rows) into a MixtureField."""
    rows = _as_rows(np.asarray(z, dtype=np.float64))
    if rows.shape[-1] != n_channels(k):
        raise ValueError(f"feature map has {rows.shape[-1]} channels, expected {n_channels(k)} for K={k}")
    lead = rows.shape[:-1]
    logits = rows[..., :k]
    means = rows[..., k:4 * k].reshape(*lead, 3, k)
    ls_raw = rows[..., 4 * k:7 * k].reshape(*lead, 3, k)
    coeffs = np.tanh(rows[..., 7 * k:10 * k].reshape(*lead, 3, k))
    return MixtureField(
        logits=logits,
        means=means,
        log_scales=np.maximum(ls_raw, LOG_SCALE_MIN),
        coeffs=coeffs,
        scale_active=ls_raw >= LOG_SCALE_MIN,
    )


def _coupled_means(field: MixtureField, x: np.ndarray) -> np.ndarray:
    """x is (..., 3) normalized; returns (..., 3, K)."""
    mu = field.means.copy()
    xr = x[..., 0, None]
    xg = x[..., 1, None]
    mu[..., 1, :] += field.coeffs[..., 0, :] * xr
    mu[..., 2, :] += field.coeffs[..., 1, :] * xr + field.coeffs[..., 2, :] * xg
    return mu


def _log_sigmoid(t):
    return -np.logaddexp(0.0, -t)


def _component_terms(field: MixtureField, x: np.ndarray):
    """Per-component log bin probabilities (natural log), shape (..., 3, K).

    Also returns the intermediates the backward pass needs.
    """
    xk = x[..., None]
    centered = xk - _coupled_means(field, x)
    inv = np.exp(-field.log_scales)
    a = inv * (centered + HALF_BIN)
    b = inv * (centered - HALF_BIN)
    d = 2.0 * HALF_BIN * inv  # a - b
    log_delta = _log_sigmoid(a) + _log_sigmoid(-b) + np.log(-np.expm1(-d))
    mid = inv * centered
    log_pdf_bin = mid - field.log_scales - 2.0 * np.logaddexp(0.0, mid) + np.log(2.0 * HALF_BIN)

    left = np.broadcast_to(xk < -0.999, a.shape)
    right = np.broadcast_to(xk > 0.999, a.shape)
    tiny = ~left & ~right & (log_delta < np.log(DENSITY_FLOOR))
    lp = np.where(left, _log_sigmoid(a), np.where(right, _log_sigmoid(-b), np.where(tiny, log_pdf_bin, log_delta)))
    return lp, dict(a=a, b=b, d=d, mid=mid, inv=inv, left=left, right=right, tiny=tiny)


def log_prob_components(field: MixtureField, x: np.ndarray) -> np.ndarray:
    """Natural-log bin probability of each mixture component, (..., 3, K)."""
    return _component_terms(field, x)[0]


def _check_x(field: MixtureField, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != 3 or x.shape[:-1] != field.logits.shape[:-1]:
        raise ValueError(f"pixel values of shape {x.shape} do not match field pixels {field.logits.shape[:-1]}")
    return x


def _check_field(field: MixtureField) -> None:
    for name in ("logits", "means", "log_scales", "coeffs"):
        if not np.all(np.isfinite(getattr(field, name))):
            raise FloatingPointError(f"non-finite mixture {name}")


def log_prob_rows(field: MixtureField, x: np.ndarray) -> np.ndarray:
    """log2 P(x | field) for channel-last pixel values x of shape (..., 3)."""
    _check_field(field)
    x = _check_x(field, x)
    lp, _ = _component_terms(field, x)
    log_pi = log_softmax(field.logits, axis=-1)[..., None, :]
    return logsumexp(log_pi + lp, axis=-1) / LN2


def log_prob_pixel(field: MixtureField, x: np.ndarray) -> np.ndarray:
    """Per-pixel, per-channel log2 likelihoods.

    ``field`` built from a (N, 10K, H, W) map and ``x`` a (N, 3, H, W)
    normalized image give an (N, 3, H, W) result.  Channel-last rows
    ``x`` of shape (..., 3) give (..., 3).
    """
    x = np.asarray(x)
    if x.ndim == 4 and field.logits.ndim == 4:
        return np.moveaxis(log_prob_rows(field, np.moveaxis(x, 1, -1)), -1, 1)
    return log_prob_rows(field, x)


def _erased_bool(mask, n: int) -> np.ndarray:
    """Accept an EraseMask, an (H, W) or (N, H, W) mask array; return (N, H, W) erased flags."""
    m = getattr(mask, "m", mask)
    m = np.asarray(m)
    if m.ndim == 2:
        m = np.broadcast_to(m, (n, *m.shape))
    return m == 0


def generation_loss_per_sample(field: MixtureField, x: np.ndarray, mask) -> np.ndarray:
    """Bits per erased sub-pixel for each sample.

    ``field`` is built from an (N, 10K, H, W) map, ``x`` is the (N, 3, H, W)
    normalized image (only erased pixels are read), ``mask`` is 1 on kept
    pixels and 0 on erased ones.
    """
    lp = log_prob_pixel(field, x)
    erased = _erased_bool(mask, lp.shape[0])
    n_f = erased.sum(axis=(1, 2))
    if np.any(n_f == 0):
        raise ValueError("mask erases no pixels (N_f = 0)")
    total = np.where(erased[:, None], lp, 0.0).sum(axis=(1, 2, 3))
    return -total / (n_f * lp.shape[1])


def generation_loss(field: MixtureField, x: np.ndarray, mask) -> float:
    """Batch mean of :func:`generation_loss_per_sample`."""
    return float(np.mean(generation_loss_per_sample(field, x, mask)))


def _forward_rows(field: MixtureField, x: np.ndarray):
    """log2 p of shape (..., 3) plus what :func:`_rows_backward` needs."""
    lp, t = _component_terms(field, x)
    log_pi = log_softmax(field.logits, axis=-1)
    joint = log_pi[..., None, :] + lp
    lse = logsumexp(joint, axis=-1, keepdims=True)
    t["resp"] = np.exp(joint - lse)
    t["log_pi"] = log_pi
    return lse[..., 0] / LN2, t


def _rows_backward(field: MixtureField, x: np.ndarray, g_lp2: np.ndarray, t: dict) -> np.ndarray:
    """Gradient w.r.t. raw feature rows given d(loss)/d(log2 p) of shape (..., 3)."""
    log_pi, resp = t["log_pi"], t["resp"]
    dlp = (g_lp2 / LN2)[..., None] * resp  # d/d component log-prob, (..., 3, K)

    dlogpi = dlp.sum(axis=-2)
    pi = np.exp(log_pi)
    dlogits = dlogpi - pi * dlogpi.sum(axis=-1, keepdims=True)

    a, b, d, mid, inv = t["a"], t["b"], t["d"], t["mid"], t["inv"]
    sa, sb = expit(-a), expit(b)  # sigma(-a), sigma(b)
    inv_em = 1.0 / np.expm1(d)
    dc_reg = inv * (sa - sb)
    dls_reg = -a * sa + b * sb - d * inv_em
    s_mid = 1.0 - 2.0 * expit(mid)
    dc = np.where(t["left"], inv * sa, np.where(t["right"], -inv * sb, np.where(t["tiny"], inv * s_mid, dc_reg)))
    dls = np.where(t["left"], -a * sa, np.where(t["right"], b * sb, np.where(t["tiny"], -mid * s_mid - 1.0, dls_reg)))
    dc *= dlp
    dls *= dlp

    dmu = -dc
    xr = x[..., 0, None]
    xg = x[..., 1, None]
    dcoef = np.zeros_like(dmu)
    dcoef[..., 0, :] = dmu[..., 1, :] * xr
    dcoef[..., 1, :] = dmu[..., 2, :] * xr
    dcoef[..., 2, :] = dmu[..., 2, :] * xg
    dcoef_raw = dcoef * (1.0 - field.coeffs ** 2)
    dls_raw = dls * field.scale_active

    lead = dlogits.shape[:-1]
    k = field.k
    return np.concatenate(
        [dlogits, dmu.reshape(*lead, 3 * k), dls_raw.reshape(*lead, 3 * k), dcoef_raw.reshape(*lead, 3 * k)],
        axis=-1,
    )


def loss_and_grad(z: np.ndarray, x: np.ndarray, mask, k: int = 10):
    """Per-sample generation loss and the gradient of its batch mean w.r.t. ``z``.

    Only erased pixels are evaluated.  ``z`` is (N, 10K, H, W) in any float
    dtype; the returned gradient has the same dtype and shape.
    """
    n = z.shape[0]
    erased = _erased_bool(mask, n)
    n_f = erased.sum(axis=(1, 2))
    if np.any(n_f == 0):
        raise ValueError("mask erases no pixels (N_f = 0)")
    zr = np.moveaxis(z, 1, -1)[erased].astype(np.float64)  # (P, 10K)
    xr = np.moveaxis(x, 1, -1)[erased].astype(np.float64)  # (P, 3)
    field = params_from_features(zr, k)
    _check_field(field)
    lp2, terms = _forward_rows(field, xr)  # (P, 3)
    sample_of_row = np.nonzero(erased)[0]
    per_sample = -np.bincount(sample_of_row, weights=lp2.sum(axis=1), minlength=n) / (n_f * 3)
    # d(mean_n L_e[n]) / d lp2
    g = np.broadcast_to((-1.0 / (n * n_f * 3))[sample_of_row, None], lp2.shape)
    drows = _rows_backward(field, xr, g, terms)
    dz = np.zeros((n, z.shape[2], z.shape[3], z.shape[1]), dtype=np.float64)
    dz[erased] = drows
    return per_sample, np.ascontiguousarray(np.moveaxis(dz, -1, 1)).astype(z.dtype)


def log_prob_grad(field_or_z: np.ndarray, x: np.ndarray, mask, k: int = 10) -> np.ndarray:
    """Gradient of the batch-mean generation loss w.r.t. every raw mixture entry.

    The result has the layout of the feature map, so it slices into the same
    [logits | means | log_scales | coeffs] blocks.
    """
    return loss_and_grad(field_or_z, x, mask, k)[1]


def split_blocks(z_like: np.ndarray, k: int = 10) -> dict[str, np.ndarray]:
    """Slice a (N, 10K, H, W) array into its named raw blocks."""
    return {
        "logits": z_like[:, :k],
        "means": z_like[:, k:4 * k],
        "log_scales": z_like[:, 4 * k:7 * k],
        "coeffs": z_like[:, 7 * k:10 * k],
    }
