"""Image similarity metrics and the reversibility score.

SSIM is implemented directly (windowed Gaussian statistics) because the
de-anonymization loss needs its analytic gradient, not just the value.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True)
class SsimConfig:
    """Windowed SSIM parameters; defaults are the common Gaussian-window setup."""

    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    def validate(self) -> None:
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ValueError(f"window_size must be odd and >= 1, got {self.window_size}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.data_range <= 0:
            raise ValueError(f"data_range must be positive, got {self.data_range}")


@lru_cache(maxsize=16)
def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    t = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return w / w.sum()


def _pad_reflect(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    spec = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    return np.pad(x, spec, mode="reflect")


def _pad_reflect_adjoint(g: np.ndarray, pad: int) -> np.ndarray:
    """Transpose of reflect padding: fold border gradients back onto the core."""
    if pad == 0:
        return g
    out = g
    for axis in (-2, -1):
        out = np.moveaxis(out, axis, -1)
        n = out.shape[-1] - 2 * pad
        core = out[..., pad : pad + n].copy()
        core[..., 1 : pad + 1] += out[..., :pad][..., ::-1]
        core[..., n - pad - 1 : n - 1] += out[..., pad + n :][..., ::-1]
        out = np.moveaxis(core, -1, axis)
    return out


def _corr1d_valid(x: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    windows = sliding_window_view(x, kernel.size, axis=axis)
    return windows @ kernel


def _corr_valid(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return _corr1d_valid(_corr1d_valid(x, kernel, -2), kernel, -1)


def _corr_valid_adjoint(g: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # Adjoint of valid correlation: zero-pad by K-1 per side, correlate with the
    # reversed kernel.  The Gaussian window is symmetric, so no flip is needed.
    k = kernel.size
    if k == 1:
        return g * kernel[0]
    spec = [(0, 0)] * (g.ndim - 2) + [(k - 1, k - 1), (k - 1, k - 1)]
    return _corr_valid(np.pad(g, spec), kernel)


def _ssim_map(x: np.ndarray, y: np.ndarray, cfg: SsimConfig):
    """SSIM map plus the intermediates the backward pass reuses.

    x and y carry any leading batch axes; the last two axes are spatial.
    """
    w = _gaussian_window(cfg.window_size, cfg.sigma)
    pad = cfg.window_size // 2
    xp = _pad_reflect(np.asarray(x, dtype=np.float64), pad)
    yp = _pad_reflect(np.asarray(y, dtype=np.float64), pad)
    u1 = _corr_valid(xp, w)
    u2 = _corr_valid(yp, w)
    s11 = _corr_valid(xp * xp, w) - u1 * u1
    s22 = _corr_valid(yp * yp, w) - u2 * u2
    s12 = _corr_valid(xp * yp, w) - u1 * u2
    c1 = (cfg.k1 * cfg.data_range) ** 2
    c2 = (cfg.k2 * cfg.data_range) ** 2
    a1 = 2.0 * u1 * u2 + c1
    a2 = 2.0 * s12 + c2
    b1 = u1 * u1 + u2 * u2 + c1
    b2 = s11 + s22 + c2
    smap = (a1 * a2) / (b1 * b2)
    return smap, (xp, yp, u1, u2, a1, a2, b1, b2, w, pad)


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def ssim(a: np.ndarray, b: np.ndarray, config: SsimConfig | None = None) -> float:
    """Mean SSIM between two images of shape (H, W) or (H, W, C)."""
    cfg = config or SsimConfig()
    cfg.validate()
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    if a.ndim == 3:
        a = np.moveaxis(a, -1, 0)
        b = np.moveaxis(b, -1, 0)
    elif a.ndim != 2:
        raise ValueError(f"expected 2-D or 3-D image, got shape {a.shape}")
    smap, _ = _ssim_map(a, b, cfg)
    return float(smap.mean())


def ssim_batch(x: np.ndarray, y: np.ndarray, config: SsimConfig | None = None) -> np.ndarray:
    """Per-image mean SSIM for stacks shaped (N, C, H, W)."""
    cfg = config or SsimConfig()
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_pair(x, y)
    if x.ndim != 4:
        raise ValueError(f"expected (N, C, H, W), got shape {x.shape}")
    smap, _ = _ssim_map(x, y, cfg)
    return smap.mean(axis=(1, 2, 3))


def ssim_grad(
    pred: np.ndarray, target: np.ndarray, config: SsimConfig | None = None
) -> tuple[float, np.ndarray]:
    """Mean SSIM over all entries and its gradient with respect to ``pred``.

    Works on any (..., H, W) stack; the mean runs over every axis, which for a
    batch of equally sized images equals the mean of per-image SSIM values.
    """
    cfg = config or SsimConfig()
    cfg.validate()
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_pair(pred, target)
    smap, (xp, yp, u1, u2, a1, a2, b1, b2, w, pad) = _ssim_map(pred, target, cfg)
    value = float(smap.mean())

    gs = 1.0 / smap.size
    inv_b = 1.0 / (b1 * b2)
    g_s12 = gs * 2.0 * a1 * inv_b
    g_s11 = gs * (-smap / b2)
    g_u1 = gs * (2.0 * u2 * a2 * inv_b - 2.0 * u1 * smap / b1)
    # Fold the -u1^2 and -u1*u2 terms of the covariances into the mean gradient.
    g_u1 = g_u1 - 2.0 * u1 * g_s11 - u2 * g_s12

    gxp = _corr_valid_adjoint(g_u1, w)
    gxp += 2.0 * xp * _corr_valid_adjoint(g_s11, w)
    gxp += yp * _corr_valid_adjoint(g_s12, w)
    return value, _pad_reflect_adjoint(gxp, pad)


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    d = a - b
    return float(np.mean(d * d))


def mae(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    return float(np.mean(np.abs(a - b)))


IRREVERSIBLE = "irreversible"
PARTIALLY_REVERSIBLE = "partially reversible"
HIGHLY_REVERSIBLE = "highly reversible"


def reversibility(acc_clear: float, acc_naive: float, acc_deanon: float) -> float:
    """Fraction of the naive-to-clear accuracy gap recovered by de-anonymization.

    Clamped to [0, 1]; requires a strictly positive gap between the clear
    baseline and naive accuracy, otherwise the score is undefined.
    """
    if acc_clear <= acc_naive:
        raise ValueError(
            f"degenerate baseline: clear accuracy {acc_clear} <= naive accuracy {acc_naive}"
        )
    score = (acc_deanon - acc_naive) / (acc_clear - acc_naive)
    return float(min(1.0, max(0.0, score)))


def reversibility_category(score: float) -> str:
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"score must lie in [0, 1], got {score}")
    if score < 0.2:
        return IRREVERSIBLE
    if score < 0.8:
        return PARTIALLY_REVERSIBLE
    return HIGHLY_REVERSIBLE
