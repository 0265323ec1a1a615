"""The anonymization methods under evaluation.

Every randomized method is deterministic given (spec params, noise seed or
key, image key), so pipelines can be replayed byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dataio import LabeledImage, require_image
from .metrics import _corr1d_valid
from .recognition import PcaModel, embed, fit_pca, reconstruct
from .seeds import derive_seed, rng_for

GRAY = 127.0 / 255.0

METHOD_PARAMS: dict[str, tuple[str, ...]] = {
    "eye_mask": (),
    "block_permute": ("block_size",),
    "pixel_relocate": ("steps",),
    "gaussian_noise": ("sigma",),
    "gaussian_blur": ("kernel",),
    "pixelate": ("size",),
    "k_rtio": ("k",),
    "dp_pix": ("epsilon", "b", "m"),
    "dp_snow": ("delta",),
    "dp_samp": ("epsilon", "k", "m"),
    "k_same_pixel": ("k",),
    "k_same_eigen": ("k",),
}


@dataclass(frozen=True)
class AnonymizerSpec:
    """Method name plus parameters; ``key`` seeds permutations/PRFs and
    ``noise_seed`` seeds stochastic noise, both independent of image order."""

    method: str
    params: dict = field(default_factory=dict)
    key: int = 0
    noise_seed: int = 0

    def validate(self) -> "AnonymizerSpec":
        if self.method not in METHOD_PARAMS:
            raise ValueError(f"unknown anonymizer method: {self.method}")
        expected = set(METHOD_PARAMS[self.method])
        got = set(self.params)
        if got != expected:
            raise ValueError(
                f"{self.method} expects params {sorted(expected)}, got {sorted(got)}"
            )
        return self

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "params": dict(sorted(self.params.items())),
            "key": self.key,
            "noise_seed": self.noise_seed,
        }

    @staticmethod
    def from_json(obj: dict) -> "AnonymizerSpec":
        return AnonymizerSpec(
            method=obj["method"],
            params=dict(obj.get("params", {})),
            key=int(obj.get("key", 0)),
            noise_seed=int(obj.get("noise_seed", 0)),
        ).validate()


# ---------------------------------------------------------------------------
# Stateless methods
# ---------------------------------------------------------------------------


def eye_mask(img: np.ndarray) -> np.ndarray:
    """Zero the fixed eye band: rows [0.30H, 0.45H), cols [0.15W, 0.85W)."""
    img = require_image(img)
    h, w = img.shape[:2]
    out = img.copy()
    out[int(0.30 * h) : int(0.45 * h), int(0.15 * w) : int(0.85 * w), :] = 0.0
    return out


def block_permutation(grid_shape: tuple[int, int], key: int) -> np.ndarray:
    """Permutation over the full-block grid; depends only on key and grid."""
    gh, gw = grid_shape
    return rng_for(key, "block_permute", gh, gw).permutation(gh * gw)


def block_permute(
    img: np.ndarray, block_size: int, key: int, permutation: np.ndarray | None = None
) -> np.ndarray:
    """Rearrange full blocks by a key-seeded permutation; margins that do not
    fill a block stay in place.  ``permutation`` overrides the key (test hook)."""
    img = require_image(img)
    h, w = img.shape[:2]
    if block_size < 1 or block_size > min(h, w):
        raise ValueError(f"block size {block_size} exceeds image {h}x{w}")
    gh, gw = h // block_size, w // block_size
    perm = block_permutation((gh, gw), key) if permutation is None else np.asarray(permutation)
    if perm.shape != (gh * gw,) or sorted(perm.tolist()) != list(range(gh * gw)):
        raise ValueError(f"invalid permutation for a {gh}x{gw} grid")
    out = img.copy()
    core = img[: gh * block_size, : gw * block_size]
    blocks = core.reshape(gh, block_size, gw, block_size, 3).transpose(0, 2, 1, 3, 4)
    blocks = blocks.reshape(gh * gw, block_size, block_size, 3)
    shuffled = blocks[perm].reshape(gh, gw, block_size, block_size, 3)
    out[: gh * block_size, : gw * block_size] = shuffled.transpose(0, 2, 1, 3, 4).reshape(
        gh * block_size, gw * block_size, 3
    )
    return out


def pixel_permutation(height: int, width: int, key: int) -> np.ndarray:
    """Single-step pixel permutation for this key and shape."""
    return rng_for(key, "pixel_relocate", height, width).permutation(height * width)


def pixel_relocate(
    img: np.ndarray, steps: int, key: int, permutation: np.ndarray | None = None
) -> np.ndarray:
    """Apply the key-seeded pixel permutation ``steps`` times (whole pixels
    move; channels stay together)."""
    img = require_image(img)
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    h, w = img.shape[:2]
    perm = pixel_permutation(h, w, key) if permutation is None else np.asarray(permutation)
    composed = perm
    for _ in range(steps - 1):
        composed = perm[composed]
    flat = img.reshape(h * w, 3)
    return flat[composed].reshape(h, w, 3)


def gaussian_noise_field(shape: tuple[int, ...], sigma: float, noise_seed: int) -> np.ndarray:
    """The additive noise before clamping; sigma is in 8-bit units."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return rng_for(noise_seed, "gaussian_noise").normal(0.0, sigma / 255.0, shape)


def gaussian_noise(img: np.ndarray, sigma: float, noise_seed: int) -> np.ndarray:
    img = require_image(img)
    return np.clip(img + gaussian_noise_field(img.shape, sigma, noise_seed), 0.0, 1.0)


def gaussian_blur_kernel(kernel: int) -> tuple[np.ndarray, float]:
    """Normalized 1-D weights and the sigma implied by the kernel size."""
    if kernel < 3 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd and >= 3, got {kernel}")
    sigma = 0.3 * ((kernel - 1) / 2.0 - 1.0) + 0.8
    t = np.arange(kernel, dtype=np.float64) - (kernel - 1) / 2.0
    w = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return w / w.sum(), sigma


def gaussian_blur(img: np.ndarray, kernel: int) -> np.ndarray:
    """Separable Gaussian blur with reflect padding."""
    img = require_image(img)
    w, _ = gaussian_blur_kernel(kernel)
    pad = kernel // 2
    h, wd = img.shape[:2]
    if pad >= min(h, wd):
        raise ValueError(f"kernel {kernel} too large for image {h}x{wd}")
    stack = np.moveaxis(img, -1, 0)
    padded = np.pad(stack, [(0, 0), (pad, pad), (pad, pad)], mode="reflect")
    blurred = _corr1d_valid(_corr1d_valid(padded, w, -2), w, -1)
    return np.clip(np.moveaxis(blurred, 0, -1), 0.0, 1.0)


def _cell_starts(n: int, cells: int) -> np.ndarray:
    # Contiguous tiling; cell sizes differ by at most one pixel.
    return (np.arange(cells, dtype=np.int64) * n) // cells


def _cell_mean_expand(img: np.ndarray, starts_r: np.ndarray, starts_c: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    sums = np.add.reduceat(np.add.reduceat(img, starts_r, axis=0), starts_c, axis=1)
    len_r = np.diff(np.append(starts_r, h))
    len_c = np.diff(np.append(starts_c, w))
    means = sums / (len_r[:, None] * len_c[None, :])[:, :, None]
    return np.repeat(np.repeat(means, len_r, axis=0), len_c, axis=1), means, (len_r, len_c)


def pixelate(img: np.ndarray, size: int) -> np.ndarray:
    """Replace each cell of a size x size grid by its mean; the output keeps
    the input resolution."""
    img = require_image(img)
    h, w = img.shape[:2]
    if size < 1 or size > min(h, w):
        raise ValueError(f"size must lie in [1, {min(h, w)}], got {size}")
    out, _, _ = _cell_mean_expand(img, _cell_starts(h, size), _cell_starts(w, size))
    return out


def pixelation_grid(img: np.ndarray, size: int) -> np.ndarray:
    """The size x size cell means of an image (the low-resolution content)."""
    img = require_image(img)
    h, w = img.shape[:2]
    _, means, _ = _cell_mean_expand(img, _cell_starts(h, size), _cell_starts(w, size))
    return means


def dp_pix(img: np.ndarray, epsilon: float, b: float, m: int, noise_seed: int) -> np.ndarray:
    """Pixelate into cells of m x m pixels, then add per-cell Laplace noise of
    scale m / (b^2 * epsilon) per channel."""
    img = require_image(img)
    if epsilon <= 0 or b < 1 or m < 1:
        raise ValueError(f"need epsilon > 0, b >= 1, m >= 1; got {epsilon}, {b}, {m}")
    h, w = img.shape[:2]
    starts_r = np.arange(0, h, m, dtype=np.int64)
    starts_c = np.arange(0, w, m, dtype=np.int64)
    _, means, (len_r, len_c) = _cell_mean_expand(img, starts_r, starts_c)
    scale = m / (b * b * epsilon)
    noisy = means + rng_for(noise_seed, "dp_pix").laplace(0.0, scale, means.shape)
    out = np.repeat(np.repeat(noisy, len_r, axis=0), len_c, axis=1)
    return np.clip(out, 0.0, 1.0)


def dp_snow(img: np.ndarray, delta: float, noise_seed: int) -> np.ndarray:
    """Set exactly round(delta * H * W) uniformly chosen pixels to mid-gray."""
    img = require_image(img)
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    h, w = img.shape[:2]
    count = int(round(delta * h * w))
    out = img.copy().reshape(h * w, 3)
    if count:
        positions = rng_for(noise_seed, "dp_snow").choice(h * w, size=count, replace=False)
        out[positions] = GRAY
    return out.reshape(h, w, 3)


def _kmeans_colors(pixels: np.ndarray, k: int, rng: np.random.Generator):
    """Seeded k-means++ with at most 50 Lloyd iterations; assignment ties go to
    the lowest cluster index and empty clusters keep their previous center."""
    n = pixels.shape[0]
    centers = np.empty((k, 3))
    first = int(rng.integers(n))
    centers[0] = pixels[first]
    d2 = np.sum((pixels - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers[i:] = centers[0]
            break
        probs = d2 / total
        pick = int(rng.choice(n, p=probs))
        centers[i] = pixels[pick]
        d2 = np.minimum(d2, np.sum((pixels - centers[i]) ** 2, axis=1))
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(50):
        dists = np.sum((pixels[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_assign = np.argmin(dists, axis=1)
        for i in range(k):
            members = new_assign == i
            if members.any():
                centers[i] = pixels[members].mean(axis=0)
        if np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign
    return centers, assign


def dp_samp(img: np.ndarray, epsilon: float, k: int, m: float, noise_seed: int) -> np.ndarray:
    """Cluster colors, sample each cluster proportionally to its share of the
    privacy budget, and interpolate the unsampled pixels.

    Budget share follows cluster fitness f_i (pixels within L2 color distance
    m/255 of the cluster mean): eps_i = epsilon * f_i / sum(f), giving a
    sampled fraction p_i = min(1, eps_i / epsilon).  Unsampled pixels become
    the inverse-distance-weighted average of their 4 nearest sampled pixels
    (same cluster when it has samples, otherwise any sampled pixel).
    """
    img = require_image(img)
    if epsilon <= 0 or k < 1:
        raise ValueError(f"need epsilon > 0 and k >= 1; got {epsilon}, {k}")
    h, w = img.shape[:2]
    n = h * w
    pixels = img.reshape(n, 3)
    rng = rng_for(noise_seed, "dp_samp")
    centers, assign = _kmeans_colors(pixels, min(k, n), rng)

    dist_to_center = np.sqrt(np.sum((pixels[:, None, :] - centers[None, :, :]) ** 2, axis=2))
    fitness = (dist_to_center < m / 255.0).sum(axis=0).astype(np.float64)
    total_fitness = fitness.sum()
    if total_fitness <= 0:
        raise ValueError("empty sample: no pixel lies within the fitness threshold")
    p = np.minimum(1.0, fitness / total_fitness)

    sampled = np.zeros(n, dtype=bool)
    for i in range(centers.shape[0]):
        members = np.flatnonzero(assign == i)
        take = int(round(p[i] * members.size))
        if take > 0:
            sampled[rng.choice(members, size=take, replace=False)] = True
    if not sampled.any():
        raise ValueError("empty sample: sampling produced no pixels")

    rows, cols = np.divmod(np.arange(n), w)
    coords = np.stack([rows, cols], axis=1).astype(np.float64)
    out = pixels.copy()
    sampled_any = np.flatnonzero(sampled)
    for i in range(centers.shape[0]):
        members = np.flatnonzero(assign == i)
        todo = members[~sampled[members]]
        if todo.size == 0:
            continue
        sources = members[sampled[members]]
        if sources.size == 0:
            sources = sampled_any
        d = np.sqrt(
            np.sum((coords[todo][:, None, :] - coords[sources][None, :, :]) ** 2, axis=2)
        )
        order = np.argsort(d, axis=1, kind="stable")[:, :4]
        nd = np.take_along_axis(d, order, axis=1)
        weights = 1.0 / np.maximum(nd, 1e-12)
        weights /= weights.sum(axis=1, keepdims=True)
        vals = pixels[sources][order]  # (todo, <=4, 3)
        out[todo] = np.einsum("tk,tkc->tc", weights, vals)
    return out.reshape(h, w, 3)


# ---------------------------------------------------------------------------
# Background-database methods (k-Same family)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BackgroundDb:
    """One PCA plus one record (first image) per background identity."""

    pca: PcaModel
    identity_ids: tuple[str, ...]
    coords: np.ndarray  # (n_identities, C)
    images: np.ndarray  # (n_identities, H, W, 3)


def build_background_db(background: list[LabeledImage], components: int) -> BackgroundDb:
    identities = sorted({li.identity_id for li in background})
    if len(identities) < 2:
        raise ValueError(f"need >= 2 background identities, got {len(identities)}")
    ordered = sorted(background, key=lambda li: (li.identity_id, li.image_id))
    pca = fit_pca([li.image for li in ordered], components)
    firsts = {}
    for li in ordered:
        firsts.setdefault(li.identity_id, li)
    records = [firsts[ident] for ident in identities]
    coords = np.stack([embed(pca, li.image) for li in records])
    images = np.stack([li.image for li in records])
    return BackgroundDb(pca, tuple(identities), coords, images)


def _nearest_records(db: BackgroundDb, img: np.ndarray, count: int) -> np.ndarray:
    if count > len(db.identity_ids):
        raise ValueError(
            f"k requires {count} background identities, db has {len(db.identity_ids)}"
        )
    probe = embed(db.pca, img)
    diff = db.coords - probe
    dist = np.einsum("ij,ij->i", diff, diff)
    return np.argsort(dist, kind="stable")[:count]


def k_same_pixel(img: np.ndarray, db: BackgroundDb, k: int) -> np.ndarray:
    """Average the image with its k-1 nearest background identities in pixel
    space."""
    img = require_image(img)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    nearest = _nearest_records(db, img, k - 1)
    return (img + db.images[nearest].sum(axis=0)) / float(k)


def k_same_eigen(img: np.ndarray, db: BackgroundDb, k: int) -> np.ndarray:
    """Average PCA coefficients with the k-1 nearest background identities and
    reconstruct, clamped to [0, 1]."""
    img = require_image(img)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    nearest = _nearest_records(db, img, k - 1)
    mean_coords = (embed(db.pca, img) + db.coords[nearest].sum(axis=0)) / float(k)
    return np.clip(reconstruct(db.pca, mean_coords), 0.0, 1.0)


# ---------------------------------------------------------------------------
# Overlay method (k-RTIO)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OverlaySet:
    images: np.ndarray  # (n, H, W, 3)

    def __len__(self) -> int:
        return self.images.shape[0]


def make_overlay_set(images: list[np.ndarray]) -> OverlaySet:
    if not images:
        raise ValueError("overlay set must not be empty")
    stack = np.stack([require_image(im) for im in images])
    return OverlaySet(stack)


K_RTIO_BLOCK = 16
K_RTIO_ALPHA = 0.4


def k_rtio(
    img: np.ndarray,
    overlays: OverlaySet,
    k: int,
    key: int,
    image_key: str,
    alpha: float = K_RTIO_ALPHA,
) -> np.ndarray:
    """Blend the image with k block-permuted overlays chosen pseudo-randomly
    from (key, image_key): out = (1 - alpha) * img + alpha * mean(overlays)."""
    img = require_image(img)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if overlays.images.shape[1:] != img.shape:
        raise ValueError("overlay resolution does not match the image")
    rng = rng_for(key, "k_rtio", image_key)
    picks = rng.choice(len(overlays), size=k, replace=len(overlays) < k)
    block = min(K_RTIO_BLOCK, img.shape[0], img.shape[1])
    permuted = np.stack(
        [block_permute(overlays.images[i], block, key) for i in picks]
    )
    combined = permuted.mean(axis=0)
    return (1.0 - alpha) * img + alpha * combined


# ---------------------------------------------------------------------------
# Factory
# ---------------------------------------------------------------------------

Anonymizer = Callable[[np.ndarray, str], np.ndarray]


def make_anonymizer(
    spec: AnonymizerSpec,
    background_db: BackgroundDb | None = None,
    overlays: OverlaySet | None = None,
) -> Anonymizer:
    """Bind a spec to a callable(image, "identity/image") -> image.  Noise
    seeds are derived per image key, so results do not depend on call order."""
    spec.validate()
    p = spec.params
    method = spec.method

    if method in ("k_same_pixel", "k_same_eigen") and background_db is None:
        raise ValueError(f"{method} requires a background database")
    if method == "k_rtio" and overlays is None:
        raise ValueError("k_rtio requires an overlay set")

    def per_image_seed(image_key: str) -> int:
        return derive_seed(spec.noise_seed, "image-noise", image_key)

    if method == "eye_mask":
        return lambda img, image_key: eye_mask(img)
    if method == "block_permute":
        return lambda img, image_key: block_permute(img, int(p["block_size"]), spec.key)
    if method == "pixel_relocate":
        return lambda img, image_key: pixel_relocate(img, int(p["steps"]), spec.key)
    if method == "gaussian_noise":
        return lambda img, image_key: gaussian_noise(img, p["sigma"], per_image_seed(image_key))
    if method == "gaussian_blur":
        return lambda img, image_key: gaussian_blur(img, int(p["kernel"]))
    if method == "pixelate":
        return lambda img, image_key: pixelate(img, int(p["size"]))
    if method == "dp_pix":
        return lambda img, image_key: dp_pix(
            img, p["epsilon"], p["b"], int(p["m"]), per_image_seed(image_key)
        )
    if method == "dp_snow":
        return lambda img, image_key: dp_snow(img, p["delta"], per_image_seed(image_key))
    if method == "dp_samp":
        return lambda img, image_key: dp_samp(
            img, p["epsilon"], int(p["k"]), p["m"], per_image_seed(image_key)
        )
    if method == "k_same_pixel":
        return lambda img, image_key: k_same_pixel(img, background_db, int(p["k"]))
    if method == "k_same_eigen":
        return lambda img, image_key: k_same_eigen(img, background_db, int(p["k"]))
    if method == "k_rtio":
        return lambda img, image_key: k_rtio(img, overlays, int(p["k"]), spec.key, image_key)
    raise AssertionError(f"unhandled method {method}")
