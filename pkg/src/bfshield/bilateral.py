"""Edge-aware bilateral filtering, as a plain function and as a differentiable graph.

The filter output at pixel p is a convex combination of the K x K window
around p: weights are the product of a spatial Gaussian in pixel distance
and a range Gaussian in (joint, over channels) intensity distance, divided
by their sum. Window positions falling outside the image are dropped and
the weights renormalized over the surviving window, which keeps the
convex-combination property and avoids border darkening.

`bilateral_filter` is the vectorized numpy implementation used for batch
evaluation; `bilateral_filter_node` builds the identical computation from
graph primitives so gradients flow to the image (and optionally to the
sigmas) for counter-attacks and end-to-end training. The two paths perform
the same floating-point operations in the same order, so in float64 mode
their outputs agree bit for bit (with fixed sigmas).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError

__all__ = ["FilterParams", "bilateral_filter", "bilateral_filter_node", "sobel_gradients"]


@dataclass(frozen=True)
class FilterParams:
    """Window width K (odd), spatial stddev in pixels, range stddev in [-1,1] units."""

    k: int
    sigma_s: float
    sigma_r: float

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise ConfigError(f"K must be odd and >= 1, got {self.k}")
        if not (self.sigma_s > 0 and np.isfinite(self.sigma_s)):
            raise ConfigError(f"sigma_s must be positive, got {self.sigma_s}")
        if not (self.sigma_r > 0 and np.isfinite(self.sigma_r)):
            raise ConfigError(f"sigma_r must be positive, got {self.sigma_r}")

    def as_tuple(self):
        return (self.k, float(self.sigma_s), float(self.sigma_r))


def _window_offsets(k: int):
    m = k // 2
    return [(dy, dx) for dy in range(-m, m + 1) for dx in range(-m, m + 1)], m


def _spatial_mask_weights(k, h, w, sigma_s, dtype):
    """Per-offset spatial weight times inside-image mask, shape (1, H, W, 1) each."""
    offsets, _ = _window_offsets(k)
    inv2ss = 1.0 / (2.0 * float(sigma_s) ** 2)
    out = []
    for dy, dx in offsets:
        ws = np.exp(np.asarray(-(dy * dy + dx * dx) * inv2ss, dtype=dtype))
        mask = np.zeros((1, h, w, 1), dtype=dtype)
        mask[:, max(0, -dy) : h - max(0, dy), max(0, -dx) : w - max(0, dx), :] = 1.0
        out.append(ws * mask)
    return offsets, out


def _check_window(k, h, w):
    if k > h and k > w:
        raise ShapeError(f"window K={k} exceeds both image dimensions {h}x{w}")


def bilateral_filter(image: np.ndarray, params: FilterParams, validate_range: bool = True) -> np.ndarray:
    """Apply the bilateral filter to one image (H,W,C) or a batch (N,H,W,C).

    Values must lie in [-1, 1]; the output stays in range because every
    output pixel is a convex combination of window values.
    """
    if not isinstance(params, FilterParams):
        params = FilterParams(*params)
    x = np.asarray(image)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"expected (H,W,C) or (N,H,W,C) image, got shape {x.shape}")
    n, h, w, c = x.shape
    _check_window(params.k, h, w)
    if validate_range and (x.min() < -1.0 - 1e-6 or x.max() > 1.0 + 1e-6):
        raise ConfigError("image values outside [-1, 1]")

    dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    x = x.astype(dtype, copy=False)
    m = params.k // 2
    inv2sr = np.asarray(1.0 / (2.0 * float(params.sigma_r) ** 2), dtype=dtype)
    xp = np.pad(x, ((0, 0), (m, m), (m, m), (0, 0)))
    offsets, ws_mask = _spatial_mask_weights(params.k, h, w, params.sigma_s, dtype)

    num = [None] * c
    den = None
    for (dy, dx), wm in zip(offsets, ws_mask):
        shifted = xp[:, m + dy : m + dy + h, m + dx : m + dx + w, :]
        d = shifted - x
        sq = d * d
        sqsum = sq[..., 0:1]
        for ch in range(1, c):
            sqsum = sqsum + sq[..., ch : ch + 1]
        wgt = np.exp(sqsum * (-inv2sr)) * wm
        den = wgt if den is None else den + wgt
        for ch in range(c):
            term = wgt * shifted[..., ch : ch + 1]
            num[ch] = term if num[ch] is None else num[ch] + term
    recip = np.reciprocal(den)
    out = np.concatenate([num[ch] * recip for ch in range(c)], axis=-1)
    return out[0] if single else out


def bilateral_filter_node(
    image_node: ad.Node,
    params: FilterParams,
    trainable_sigmas: bool = False,
    sigma_stores: dict | None = None,
) -> ad.Node:
    """Build the filter as a subgraph of primitive ops over an NHWC image node.

    K is structural (fixed at build time). With `trainable_sigmas`,
    `sigma_stores` must hold ParamStores "log_sigma_s"/"log_sigma_r" (the
    sigmas are exp(u) so they stay positive) and gradients flow to them;
    otherwise the sigmas are folded into constants and the node's forward
    matches `bilateral_filter` exactly.
    """
    if not isinstance(params, FilterParams):
        params = FilterParams(*params)
    if len(image_node.shape) != 4:
        raise ShapeError(f"expected NHWC image node, got shape {image_node.shape}")
    n, h, w, c = image_node.shape
    _check_window(params.k, h, w)
    m = params.k // 2
    offsets, _ = _window_offsets(params.k)

    padded = ad.pad_nd(image_node, ((0, 0), (m, m), (m, m), (0, 0))) if m else image_node
    center = [ad.slice_nd(image_node, (0, 0, 0, ch), (n, h, w, 1)) for ch in range(c)]

    if trainable_sigmas:
        if sigma_stores is None or "log_sigma_s" not in sigma_stores or "log_sigma_r" not in sigma_stores:
            raise ConfigError("trainable_sigmas requires sigma_stores with log_sigma_s and log_sigma_r")
        u_s = ad.parameter(sigma_stores["log_sigma_s"])
        u_r = ad.parameter(sigma_stores["log_sigma_r"])
        # 1/(2 sigma^2) = 0.5 * exp(-2u)
        half_inv_ss = ad.mul(ad.exp(ad.mul(u_s, -2.0)), 0.5)
        half_inv_sr = ad.mul(ad.exp(ad.mul(u_r, -2.0)), 0.5)
        masks = []
        for dy, dx in offsets:
            mask = np.zeros((h, w), dtype=np.float64)
            mask[max(0, -dy) : h - max(0, dy), max(0, -dx) : w - max(0, dx)] = 1.0
            masks.append(ad.constant(np.broadcast_to(mask[None, :, :, None], (n, h, w, 1))))
    else:
        inv2sr = 1.0 / (2.0 * float(params.sigma_r) ** 2)
        _, ws_mask64 = _spatial_mask_weights(params.k, h, w, params.sigma_s, np.float64)
        wm_consts = [ad.constant(np.broadcast_to(wm, (n, h, w, 1))) for wm in ws_mask64]

    num = [None] * c
    den = None
    for i, (dy, dx) in enumerate(offsets):
        shifted = [
            ad.slice_nd(padded, (0, m + dy, m + dx, ch), (n, h, w, 1)) if m else center[ch]
            for ch in range(c)
        ]
        sqsum = None
        for ch in range(c):
            d = ad.sub(shifted[ch], center[ch])
            sq = ad.mul(d, d)
            sqsum = sq if sqsum is None else ad.add(sqsum, sq)
        if trainable_sigmas:
            e_r = ad.exp(ad.neg(ad.mul(sqsum, half_inv_sr)))
            e_s = ad.exp(ad.neg(ad.mul(half_inv_ss, float(dy * dy + dx * dx))))
            wgt = ad.mul(ad.mul(e_r, e_s), masks[i])
        else:
            wgt = ad.mul(ad.exp(ad.mul(sqsum, -inv2sr)), wm_consts[i])
        den = wgt if den is None else ad.add(den, wgt)
        for ch in range(c):
            term = ad.mul(wgt, shifted[ch])
            num[ch] = term if num[ch] is None else ad.add(num[ch], term)
    recip = ad.reciprocal(den)
    outs = [ad.mul(num[ch], recip) for ch in range(c)]
    return ad.concat_depth(outs) if c > 1 else outs[0]


def sobel_gradients(image: np.ndarray) -> np.ndarray:
    """Per-channel Sobel x/y responses, depth-concatenated (..., 2*C).

    The x kernel is [[-1,0,1],[-2,0,2],[-1,0,1]] (correlation); the y kernel
    is its transpose. Edge-replicated padding keeps the spatial extent.
    Accepts (H,W,C) or (N,H,W,C).
    """
    x = np.asarray(image)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"expected (H,W,C) or (N,H,W,C) image, got shape {x.shape}")
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="edge")

    def win(a, b):
        return xp[:, a : a + h, b : b + w, :]

    # paired differences keep constant regions at exactly zero
    gx = (win(0, 2) - win(0, 0)) + 2.0 * (win(1, 2) - win(1, 0)) + (win(2, 2) - win(2, 0))
    gy = (win(2, 0) - win(0, 0)) + 2.0 * (win(2, 1) - win(0, 1)) + (win(2, 2) - win(0, 2))
    out = np.concatenate([gx, gy], axis=-1)
    return out[0] if single else out
