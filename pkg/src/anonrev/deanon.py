"""Specialized de-anonymization attacks.

Non-learned reversal strategies: known-plaintext permutation recovery,
neighbor interpolation for salt-style noise, resolution-search resampling,
and Wiener / Richardson-Lucy deconvolution with a grid-searched Gaussian
point-spread function.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .anonymizers import GRAY, pixelate, pixelation_grid
from .metrics import ssim

RESAMPLE_MODES = ("linear", "bicubic")
PSF_SIGMAS = tuple(0.5 * i for i in range(1, 17))
BALANCES = tuple(float(b) for b in np.logspace(-4.0, -1.0, 7))
RL_ITERATIONS = (10, 30, 50)


# ---------------------------------------------------------------------------
# Permutation recovery
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PermutationMap:
    """Learned inverse pixel shuffle.

    ``mapping[i]`` is the input position whose pixel belongs at output
    position ``i``; always a bijection.  ``confidence`` is the fraction of
    positions matched by a unique color signature (ties and fallbacks count
    against it); None when reloaded from the index-only serialized form.
    """

    mapping: np.ndarray
    confidence: float | None

    def __post_init__(self):
        m = np.asarray(self.mapping, dtype=np.int64)
        if np.any(np.sort(m) != np.arange(m.size)):
            raise ValueError("mapping is not a bijection")
        object.__setattr__(self, "mapping", m)

    def to_json(self) -> list[int]:
        return [int(i) for i in self.mapping]

    @classmethod
    def from_json(cls, indices, confidence: float | None = None) -> "PermutationMap":
        return cls(np.asarray(indices, dtype=np.int64), confidence)


def _signatures(images: list[np.ndarray]) -> np.ndarray:
    """Per-position byte signature: the 8-bit color sequence across images."""
    stacked = [np.rint(np.asarray(im, dtype=np.float64) * 255.0).astype(np.uint8) for im in images]
    # (HW, n_images * 3) uint8, then one void row per position
    flat = np.concatenate([im.reshape(-1, 3) for im in stacked], axis=1)
    flat = np.ascontiguousarray(flat)
    return flat.view([("sig", f"V{flat.shape[1]}")]).reshape(-1)["sig"]


def learn_permutation(pairs: list[tuple[np.ndarray, np.ndarray]]) -> PermutationMap:
    """Recover a fixed pixel permutation from (clear, anonymized) pairs.

    Positions whose quantized color sequence across the pair set is unique on
    both sides are matched exactly.  Colliding signatures are paired in index
    order, and positions left without a counterpart fall back to the identity
    (then to index order), so the result is always a bijection; every
    non-unique resolution lowers ``confidence``.
    """
    if not pairs:
        raise ValueError("need at least one (clear, anonymized) pair")
    shape = np.asarray(pairs[0][0]).shape
    for clear, anon in pairs:
        if np.asarray(clear).shape != shape or np.asarray(anon).shape != shape:
            raise ValueError("all pair images must share one shape")
    clear_sig = _signatures([c for c, _ in pairs])
    anon_sig = _signatures([a for _, a in pairs])
    n = clear_sig.size

    anon_groups: dict[bytes, list[int]] = {}
    for j in range(n):
        anon_groups.setdefault(anon_sig[j].tobytes(), []).append(j)

    clear_counts: dict[bytes, int] = {}
    for i in range(n):
        key = clear_sig[i].tobytes()
        clear_counts[key] = clear_counts.get(key, 0) + 1

    mapping = np.full(n, -1, dtype=np.int64)
    taken = np.zeros(n, dtype=bool)
    unique_matches = 0
    leftover_clear: list[int] = []
    for i in range(n):
        key = clear_sig[i].tobytes()
        group = anon_groups.get(key)
        if not group:
            leftover_clear.append(i)
            continue
        # A confident match pairs a signature unique on both sides.
        if clear_counts[key] == 1 and len(group) == 1:
            unique_matches += 1
        j = group.pop(0)
        mapping[i] = j
        taken[j] = True

    if leftover_clear:
        free = [j for j in range(n) if not taken[j]]
        free_set = set(free)
        rest_clear = []
        for i in leftover_clear:
            if i in free_set:
                mapping[i] = i
                free_set.discard(i)
            else:
                rest_clear.append(i)
        free = sorted(free_set)
        for i, j in zip(rest_clear, free):
            mapping[i] = j

    return PermutationMap(mapping, unique_matches / n)


def apply_permutation(pmap: PermutationMap, img: np.ndarray) -> np.ndarray:
    """Gather pixels: output position i takes input pixel ``mapping[i]``."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if h * w != pmap.mapping.size:
        raise ValueError(f"map covers {pmap.mapping.size} positions, image has {h * w}")
    flat = img.reshape(h * w, -1)
    return flat[pmap.mapping].reshape(img.shape)


# ---------------------------------------------------------------------------
# Gray-pixel interpolation (salt-noise reversal)
# ---------------------------------------------------------------------------


def interpolate_gray(img: np.ndarray) -> np.ndarray:
    """Replace every exactly-gray pixel (127/255 in all channels) with the
    mean of its non-gray 8-neighbors, repeating passes (at most 100) until
    isolated gray regions are filled from their rims inward."""
    out = np.asarray(img, dtype=np.float64).copy()
    gray = np.all(out == GRAY, axis=-1)
    if bool(np.all(gray)):
        raise ValueError("nothing to interpolate from: image is entirely gray")
    h, w = gray.shape
    for _ in range(100):
        if not gray.any():
            break
        vals = np.where(gray[..., None], 0.0, out)
        cnt = (~gray).astype(np.float64)
        pad_v = np.pad(vals, ((1, 1), (1, 1), (0, 0)))
        pad_c = np.pad(cnt, 1)
        nb_sum = np.zeros_like(vals)
        nb_cnt = np.zeros_like(cnt)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy == 0 and dx == 0:
                    continue
                nb_sum += pad_v[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
                nb_cnt += pad_c[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        fill = gray & (nb_cnt > 0)
        out[fill] = nb_sum[fill] / nb_cnt[fill][:, None]
        gray[fill] = False
    return out


# ---------------------------------------------------------------------------
# Resampling search (pixelation reversal)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResampleResult:
    resolution: int
    mode: str
    # (candidate resolution, mean SSIM) in sweep order
    scores: tuple[tuple[int, float], ...]


def _pil_mode(mode: str):
    if mode == "linear":
        return Image.Resampling.BILINEAR
    if mode == "bicubic":
        return Image.Resampling.BICUBIC
    raise ValueError(f"mode must be one of {RESAMPLE_MODES}, got {mode}")


def _resize(img: np.ndarray, size: tuple[int, int], resampling) -> np.ndarray:
    channels = [
        np.asarray(
            Image.fromarray(img[:, :, c].astype(np.float32), mode="F").resize(size, resampling),
            dtype=np.float64,
        )
        for c in range(img.shape[2])
    ]
    return np.stack(channels, axis=-1)


def apply_resample(img: np.ndarray, resolution: int, mode: str) -> np.ndarray:
    """Project through resolution x resolution and back up.

    When the input is exactly constant on the target cell grid (a pixelated
    image at its own grid size) the down-step reads the cell values directly
    instead of resampling them.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    resampling = _pil_mode(mode)
    if np.array_equal(pixelate(img, resolution), img):
        down = pixelation_grid(img, resolution)
    else:
        down = _resize(img, (resolution, resolution), resampling)
    up = _resize(down, (w, h), resampling)
    return np.clip(up, 0.0, 1.0)


def resample_search(pairs: list[tuple[np.ndarray, np.ndarray]], mode: str) -> ResampleResult:
    """Sweep intermediate resolutions {2, 4, ...}; keep the one whose
    down-up projection of the anonymized images scores the highest mean SSIM
    against the clear ones (ties go to the larger resolution)."""
    if not pairs:
        raise ValueError("need at least one (clear, anonymized) pair")
    _pil_mode(mode)
    h, w = np.asarray(pairs[0][0]).shape[:2]
    best_r = 0
    best_score = -np.inf
    scores: list[tuple[int, float]] = []
    for r in range(2, min(h, w) + 1, 2):
        total = 0.0
        for clear, anon in pairs:
            total += ssim(apply_resample(anon, r, mode), np.asarray(clear, dtype=np.float64))
        score = total / len(pairs)
        scores.append((r, score))
        if score >= best_score:
            best_score = score
            best_r = r
    return ResampleResult(best_r, mode, tuple(scores))


# ---------------------------------------------------------------------------
# Deconvolution (blur / noise reversal)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeconvParams:
    psf_sigma: float
    balance: float = 1e-3
    iterations: int = 30

    def validate(self) -> "DeconvParams":
        if self.psf_sigma <= 0:
            raise ValueError(f"psf_sigma must be > 0, got {self.psf_sigma}")
        if self.balance < 0:
            raise ValueError(f"balance must be >= 0, got {self.balance}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        return self

    def to_json(self) -> dict:
        return {
            "psf_sigma": self.psf_sigma,
            "balance": self.balance,
            "iterations": self.iterations,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DeconvParams":
        return cls(obj["psf_sigma"], obj["balance"], obj["iterations"]).validate()


def _gaussian_otf(shape: tuple[int, int], sigma: float) -> np.ndarray:
    """FFT of a unit-sum circular Gaussian PSF centered at the origin."""
    h, w = shape
    dy = np.minimum(np.arange(h), h - np.arange(h)).astype(np.float64)
    dx = np.minimum(np.arange(w), w - np.arange(w)).astype(np.float64)
    d2 = dy[:, None] ** 2 + dx[None, :] ** 2
    psf = np.exp(-d2 / (2.0 * sigma * sigma))
    psf /= psf.sum()
    return np.fft.fft2(psf)


def _laplacian_power(shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    lap = np.zeros(shape)
    lap[0, 0] = -4.0
    lap[0, 1] = lap[0, -1] = lap[1 % h, 0] = lap[-1, 0] = 1.0
    return np.abs(np.fft.fft2(lap)) ** 2


def wiener_deconv(img: np.ndarray, params: DeconvParams) -> np.ndarray:
    """Frequency-domain Wiener deconvolution per channel.

    The regularizer is the discrete Laplacian, which vanishes at zero
    frequency, so the image mean passes through untouched at any balance.
    """
    params.validate()
    img = np.asarray(img, dtype=np.float64)
    shape = img.shape[:2]
    otf = _gaussian_otf(shape, params.psf_sigma)
    filt = np.conj(otf) / (np.abs(otf) ** 2 + params.balance * _laplacian_power(shape))
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[:, :, c] = np.real(np.fft.ifft2(np.fft.fft2(img[:, :, c]) * filt))
    return np.clip(out, 0.0, 1.0)


def richardson_lucy(img: np.ndarray, params: DeconvParams) -> np.ndarray:
    """Multiplicative Richardson-Lucy with a circular Gaussian PSF; the
    estimate is clamped to [1e-6, 1] after every update."""
    params.validate()
    return _rl_sweep(img, params.psf_sigma, (params.iterations,))[0]


def _rl_sweep(img: np.ndarray, sigma: float, capture: tuple[int, ...]) -> list[np.ndarray]:
    """Run RL to max(capture) iterations, snapshotting each capture point."""
    img = np.asarray(img, dtype=np.float64)
    otf = _gaussian_otf(img.shape[:2], sigma)
    otf_conj = np.conj(otf)
    est = np.clip(img, 1e-6, 1.0)
    snaps: list[np.ndarray] = []
    want = sorted(capture)
    for it in range(1, max(want) + 1):
        for c in range(img.shape[2]):
            denom = np.real(np.fft.ifft2(np.fft.fft2(est[:, :, c]) * otf))
            ratio = img[:, :, c] / np.maximum(denom, 1e-12)
            est[:, :, c] *= np.real(np.fft.ifft2(np.fft.fft2(ratio) * otf_conj))
        est = np.clip(est, 1e-6, 1.0)
        if it in want:
            snaps.append(est.copy())
    return [snaps[want.index(it)] for it in capture]


def grid_search_deconv(
    pairs: list[tuple[np.ndarray, np.ndarray]], method: str
) -> DeconvParams:
    """Pick PSF sigma (and balance or iteration count) by exhaustive sweep,
    maximizing mean SSIM of the deconvolved anonymized images against their
    clear counterparts.  Ties keep the first grid point visited."""
    if not pairs:
        raise ValueError("need at least one (clear, anonymized) pair")
    if method not in ("wiener", "rl"):
        raise ValueError(f"method must be wiener or rl, got {method}")
    best: DeconvParams | None = None
    best_score = -np.inf
    for sigma in PSF_SIGMAS:
        if method == "wiener":
            for balance in BALANCES:
                params = DeconvParams(sigma, balance, 1)
                total = 0.0
                for clear, anon in pairs:
                    total += ssim(wiener_deconv(anon, params), np.asarray(clear, dtype=np.float64))
                score = total / len(pairs)
                if score > best_score:
                    best_score = score
                    best = params
        else:
            sweeps = [_rl_sweep(anon, sigma, RL_ITERATIONS) for _, anon in pairs]
            for pos, iterations in enumerate(RL_ITERATIONS):
                params = DeconvParams(sigma, 0.0, iterations)
                total = 0.0
                for (clear, _), snaps in zip(pairs, sweeps):
                    total += ssim(snaps[pos], np.asarray(clear, dtype=np.float64))
                score = total / len(pairs)
                if score > best_score:
                    best_score = score
                    best = params
    assert best is not None
    return best
