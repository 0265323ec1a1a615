"""Image tensors, PNG round trips, dataset manifests, splits, and the
synthetic face corpus used for desk-scale experiments."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .seeds import derive_seed, rng_for

log = logging.getLogger(__name__)

MIN_SIDE = 8

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def require_image(img: np.ndarray) -> np.ndarray:
    """Validate the framework's image contract: float (H, W, 3) in [0, 1],
    both sides >= 8 and divisible by 4 (the autoencoder halves twice)."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {img.shape}")
    h, w = img.shape[:2]
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ValueError(f"image sides must be >= {MIN_SIDE}, got {h}x{w}")
    if h % 4 or w % 4:
        raise ValueError(f"image sides must be divisible by 4, got {h}x{w}")
    if not np.issubdtype(img.dtype, np.floating):
        raise ValueError(f"expected float image, got dtype {img.dtype}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return np.asarray(img, dtype=np.float64)


def read_png(path: str | Path) -> np.ndarray:
    """Read an 8-bit RGB PNG as a float image in [0, 1]."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(26)
    if len(head) < 26 or head[:8] != PNG_SIGNATURE:
        raise ValueError(f"undecodable file: {path}")
    depth, color_type = head[24], head[25]
    if depth != 8:
        raise ValueError(f"unsupported bit depth {depth}: {path}")
    if color_type != 2:
        raise ValueError(f"non-RGB PNG (color type {color_type}): {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return require_image(arr / 255.0)


def write_png(path: str | Path, img: np.ndarray) -> None:
    """Write a float image as an 8-bit RGB PNG (values rounded to 1/255 steps)."""
    img = require_image(img)
    quantized = np.rint(img * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantized, mode="RGB").save(path, format="PNG")


def quantize(img: np.ndarray) -> np.ndarray:
    """The value grid a PNG round trip lands on."""
    return np.rint(np.asarray(img, dtype=np.float64) * 255.0) / 255.0


@dataclass(frozen=True)
class LabeledImage:
    image: np.ndarray
    identity_id: str
    image_id: str


@dataclass(frozen=True)
class ManifestEntry:
    identity_id: str
    image_id: str
    path: str


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    source_tag: str = ""

    def identities(self) -> list[str]:
        return sorted({e.identity_id for e in self.entries})

    def by_identity(self) -> dict[str, list[ManifestEntry]]:
        out: dict[str, list[ManifestEntry]] = {}
        for e in self.entries:
            out.setdefault(e.identity_id, []).append(e)
        return out


def load_manifest(root: str | Path, source_tag: str = "") -> DatasetManifest:
    """Scan ``<root>/<identity_id>/<image_id>.png`` into a manifest.

    Identities with fewer than two images are dropped with a warning; an empty
    tree is an error.
    """
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"missing directory: {root}")
    entries: list[ManifestEntry] = []
    for ident_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(ident_dir.glob("*.png"))
        good: list[ManifestEntry] = []
        for f in files:
            try:
                with Image.open(f) as im:
                    im.verify()
            except Exception as err:
                raise ValueError(f"undecodable file: {f}") from err
            good.append(ManifestEntry(ident_dir.name, f.stem, str(f)))
        if len(good) < 2:
            log.warning("dropping identity %s: %d image(s), need >= 2", ident_dir.name, len(good))
            continue
        entries.extend(good)
    if not entries:
        raise ValueError(f"no identities found under {root}")
    return DatasetManifest(tuple(entries), source_tag or str(root))


def save_manifest_csv(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["identity_id", "image_id", "path"])
        for e in manifest.entries:
            writer.writerow([e.identity_id, e.image_id, e.path])


def load_manifest_csv(path: str | Path, source_tag: str = "") -> DatasetManifest:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["identity_id", "image_id", "path"]:
            raise ValueError(f"bad manifest header in {path}: {header}")
        entries = tuple(ManifestEntry(*row) for row in reader)
    if not entries:
        raise ValueError(f"no identities found in {path}")
    return DatasetManifest(entries, source_tag or str(path))


def load_labeled(manifest: DatasetManifest) -> list[LabeledImage]:
    """Decode every manifest entry, ordered by (identity_id, image_id)."""
    out = []
    for e in sorted(manifest.entries, key=lambda e: (e.identity_id, e.image_id)):
        out.append(LabeledImage(read_png(e.path), e.identity_id, e.image_id))
    return out


@dataclass(frozen=True)
class SplitAssignment:
    """Four-way split: background / training / eval, with the eval identities'
    images divided into enrollment and test subsets."""

    seed: int
    background_ids: tuple[str, ...]
    training_ids: tuple[str, ...]
    eval_ids: tuple[str, ...]
    enrollment: dict[str, tuple[str, ...]] = field(default_factory=dict)
    test: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "seed": self.seed,
            "background_ids": list(self.background_ids),
            "training_ids": list(self.training_ids),
            "eval_ids": list(self.eval_ids),
            "enrollment": {k: list(v) for k, v in sorted(self.enrollment.items())},
            "test": {k: list(v) for k, v in sorted(self.test.items())},
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "SplitAssignment":
        d = json.loads(text)
        return SplitAssignment(
            seed=d["seed"],
            background_ids=tuple(d["background_ids"]),
            training_ids=tuple(d["training_ids"]),
            eval_ids=tuple(d["eval_ids"]),
            enrollment={k: tuple(v) for k, v in d["enrollment"].items()},
            test={k: tuple(v) for k, v in d["test"].items()},
        )


def split_dataset(
    manifest: DatasetManifest,
    background_count: int,
    test_identity_count: int,
    enroll_fraction: float = 0.5,
    seed: int = 0,
) -> SplitAssignment:
    """Seeded identity-level split; eval identities get ceil(fraction * n)
    enrollment images each, the rest become test probes."""
    if not 0.0 < enroll_fraction < 1.0:
        raise ValueError(f"enroll_fraction must lie in (0, 1), got {enroll_fraction}")
    identities = manifest.identities()
    if background_count < 0 or test_identity_count <= 0:
        raise ValueError("background_count must be >= 0 and test_identity_count >= 1")
    if background_count + test_identity_count >= len(identities):
        raise ValueError(
            f"split needs background ({background_count}) + test ({test_identity_count}) "
            f"< identity count ({len(identities)})"
        )
    rng = rng_for(seed, "split")
    order = [identities[i] for i in rng.permutation(len(identities))]
    background = tuple(sorted(order[:background_count]))
    eval_ids = tuple(sorted(order[background_count : background_count + test_identity_count]))
    training = tuple(sorted(order[background_count + test_identity_count :]))

    by_ident = manifest.by_identity()
    enrollment: dict[str, tuple[str, ...]] = {}
    test: dict[str, tuple[str, ...]] = {}
    for ident in eval_ids:
        image_ids = sorted(e.image_id for e in by_ident[ident])
        n = len(image_ids)
        n_enroll = math.ceil(enroll_fraction * n)
        if n_enroll >= n:
            raise ValueError(f"enroll_fraction {enroll_fraction} leaves no test images for {ident}")
        picks = rng.permutation(n)
        enrollment[ident] = tuple(sorted(image_ids[i] for i in picks[:n_enroll]))
        test[ident] = tuple(sorted(image_ids[i] for i in picks[n_enroll:]))
    return SplitAssignment(seed, background, training, eval_ids, enrollment, test)


# ---------------------------------------------------------------------------
# Synthetic face corpus
# ---------------------------------------------------------------------------

BACKGROUND_COLOR = np.array([0.13, 0.14, 0.17])

# Per-image jitter bounds.  Translation stays within 3% of the width.
TRANSLATION_JITTER = 0.03
BRIGHTNESS_JITTER = 0.10
NOISE_SIGMA = 0.005


@dataclass(frozen=True)
class FaceLatent:
    """Identity-level appearance parameters, all in normalized coordinates."""

    skin: tuple[float, float, float]
    face_rx: float
    face_ry: float
    eye_y: float
    eye_dx: float
    eye_r: float
    eye_color: tuple[float, float, float]
    nose_len: float
    mouth_y: float
    mouth_hw: float
    mouth_hh: float
    mouth_color: tuple[float, float, float]


def identity_latent(seed: int, index: int) -> FaceLatent:
    """Deterministic latent for one identity; independent of image counts."""
    rng = rng_for(seed, "identity", index)
    u = rng.random(16)
    skin_r = 0.45 + 0.47 * u[0]
    skin_g = skin_r * (0.62 + 0.30 * u[1])
    skin_b = skin_g * (0.55 + 0.38 * u[2])
    return FaceLatent(
        skin=(skin_r, skin_g, skin_b),
        face_rx=0.26 + 0.18 * u[3],
        face_ry=0.32 + 0.16 * u[4],
        eye_y=0.32 + 0.09 * u[5],
        eye_dx=0.12 + 0.10 * u[6],
        eye_r=0.040 + 0.045 * u[7],
        eye_color=(0.05 + 0.90 * u[8], 0.05 + 0.90 * u[9], 0.05 + 0.90 * u[10]),
        nose_len=0.08 + 0.18 * u[11],
        mouth_y=0.62 + 0.12 * u[12],
        mouth_hw=0.08 + 0.14 * u[13],
        mouth_hh=0.015 + 0.035 * u[14],
        mouth_color=(0.40 + 0.55 * u[15], 0.05 + 0.40 * u[1] * u[8], 0.08 + 0.40 * u[2] * u[9]),
    )


def _soft_mask(d: np.ndarray, width: float) -> np.ndarray:
    return np.clip((1.0 - d) / width, 0.0, 1.0)


def render_face(latent: FaceLatent, resolution: int, dx: float = 0.0, dy: float = 0.0) -> np.ndarray:
    """Paint one face; dx/dy translate every feature (normalized units)."""
    r = resolution
    coords = (np.arange(r, dtype=np.float64) + 0.5) / r
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    img = np.tile(BACKGROUND_COLOR, (r, r, 1))

    cx, cy = 0.5 + dx, 0.52 + dy

    def paint(mask: np.ndarray, color) -> None:
        m = mask[:, :, None]
        img[:] = img * (1.0 - m) + np.asarray(color, dtype=np.float64) * m

    d_face = ((xx - cx) / latent.face_rx) ** 2 + ((yy - cy) / latent.face_ry) ** 2
    paint(_soft_mask(d_face, 0.15), latent.skin)

    nose_color = tuple(0.78 * c for c in latent.skin)
    ny0 = latent.eye_y + dy + 0.07
    d_nose = (np.abs(xx - cx) / 0.020) ** 2
    in_rows = ((yy >= ny0) & (yy <= ny0 + latent.nose_len)).astype(np.float64)
    paint(_soft_mask(d_nose, 0.60) * in_rows, nose_color)

    my = latent.mouth_y + dy
    d_mouth = ((xx - cx) / latent.mouth_hw) ** 2 + ((yy - my) / latent.mouth_hh) ** 2
    paint(_soft_mask(d_mouth, 0.45), latent.mouth_color)

    ey = latent.eye_y + dy
    for ex in (cx - latent.eye_dx, cx + latent.eye_dx):
        d_eye = ((xx - ex) ** 2 + (yy - ey) ** 2) / latent.eye_r**2
        paint(_soft_mask(d_eye, 0.65), latent.eye_color)
        d_pupil = ((xx - ex) ** 2 + (yy - ey) ** 2) / (0.45 * latent.eye_r) ** 2
        paint(_soft_mask(d_pupil, 0.80), tuple(0.30 * c for c in latent.eye_color))

    return img


def generate_synthetic_faces(
    identity_count: int,
    images_per_identity: int,
    resolution: int,
    seed: int,
    out_dir: str | Path,
) -> DatasetManifest:
    """Render a labeled corpus to ``out_dir/<identity>/<image>.png``.

    Identity appearance is fixed by (seed, identity index); each image adds
    translation, brightness, and Gaussian pixel noise jitter (see the module
    constants) before 8-bit quantization.
    """
    if identity_count < 1 or images_per_identity < 2:
        raise ValueError("need >= 1 identity and >= 2 images per identity")
    if resolution < MIN_SIDE or resolution % 4:
        raise ValueError(f"resolution must be >= {MIN_SIDE} and divisible by 4, got {resolution}")
    out_dir = Path(out_dir)
    width = len(str(max(identity_count - 1, 1)))
    iwidth = len(str(max(images_per_identity - 1, 1)))
    entries: list[ManifestEntry] = []
    for i in range(identity_count):
        latent = identity_latent(seed, i)
        ident = f"id_{i:0{max(width, 3)}d}"
        for j in range(images_per_identity):
            rng = rng_for(seed, "image", i, j)
            dx, dy = rng.uniform(-TRANSLATION_JITTER, TRANSLATION_JITTER, 2)
            brightness = 1.0 + rng.uniform(-BRIGHTNESS_JITTER, BRIGHTNESS_JITTER)
            img = render_face(latent, resolution, dx, dy)
            img = img * brightness + rng.normal(0.0, NOISE_SIGMA, img.shape)
            img = np.clip(img, 0.0, 1.0)
            image_id = f"img_{j:0{max(iwidth, 3)}d}"
            path = out_dir / ident / f"{image_id}.png"
            write_png(path, img)
            entries.append(ManifestEntry(ident, image_id, str(path)))
    tag = f"synthetic:{identity_count}x{images_per_identity}@{resolution}/seed={seed}"
    manifest = DatasetManifest(tuple(entries), tag)
    save_manifest_csv(manifest, out_dir / "manifest.csv")
    return manifest
