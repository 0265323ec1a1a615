"""Eigenface recognition: PCA embedding, 1-NN identification, attacker
protocols (naive / parrot / reversal), and per-identity accuracy summaries."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .dataio import LabeledImage

PROTOCOLS = ("clear_baseline", "naive", "parrot", "reversal")

# De-anonymizers map an image to an image; enrollment anonymizers additionally
# see "identity_id/image_id" so per-image noise stays deterministic.
Deanonymizer = Callable[[np.ndarray], np.ndarray]
EnrollAnonymizer = Callable[[np.ndarray, str], np.ndarray]


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray                 # (d,)
    components: np.ndarray           # (C, d), orthonormal rows
    explained_variance: np.ndarray   # (C,)
    image_shape: tuple[int, int, int]

    @property
    def n_components(self) -> int:
        return self.components.shape[0]


def fit_pca(images: Iterable[np.ndarray], components: int, seed: int = 0) -> PcaModel:
    """Mean-centered PCA via the small-side eigendecomposition.

    With n samples of dimension d the Gram matrix (n x n) is decomposed when
    n <= d, otherwise the d x d covariance.  Components whose eigenvalue is
    numerically zero are dropped, so the returned model may have fewer than
    ``components`` directions.  Each component is sign-fixed so its
    largest-magnitude entry is positive.  ``seed`` is accepted for interface
    stability; the decomposition itself is deterministic.
    """
    del seed
    stack = [np.asarray(im, dtype=np.float64) for im in images]
    if not stack:
        raise ValueError("need at least one training image")
    shape = stack[0].shape
    arr = np.stack([im.ravel() for im in stack])
    n, d = arr.shape
    if components < 1:
        raise ValueError(f"components must be >= 1, got {components}")
    if components > n:
        raise ValueError(f"components ({components}) exceed sample count ({n})")
    mean = arr.mean(axis=0)
    xc = arr - mean
    if n <= d:
        gram = xc @ xc.T
        evals, evecs = np.linalg.eigh(gram)
        evals = evals[::-1]
        evecs = evecs[:, ::-1]
        tol = max(float(evals[0]), 0.0) * 1e-10
        rank = int(np.sum(evals > tol))
        c = min(components, rank)
        lam = evals[:c]
        basis = ((xc.T @ evecs[:, :c]) / np.sqrt(lam)).T
        explained = lam / max(n - 1, 1)
    else:
        cov = (xc.T @ xc) / (n - 1)
        evals, evecs = np.linalg.eigh(cov)
        evals = evals[::-1]
        evecs = evecs[:, ::-1]
        tol = max(float(evals[0]), 0.0) * 1e-10
        rank = int(np.sum(evals > tol))
        c = min(components, rank)
        basis = evecs[:, :c].T.copy()
        explained = evals[:c]
    flip_at = np.argmax(np.abs(basis), axis=1)
    signs = np.where(basis[np.arange(c), flip_at] < 0.0, -1.0, 1.0)
    basis = basis * signs[:, None]
    return PcaModel(mean, basis, np.asarray(explained), tuple(shape))


def embed(pca: PcaModel, img: np.ndarray) -> np.ndarray:
    flat = np.asarray(img, dtype=np.float64).ravel()
    if flat.size != pca.mean.size:
        raise ValueError(f"image size {flat.size} does not match model ({pca.mean.size})")
    return pca.components @ (flat - pca.mean)


def reconstruct(pca: PcaModel, coords: np.ndarray) -> np.ndarray:
    flat = pca.mean + np.asarray(coords, dtype=np.float64) @ pca.components
    return flat.reshape(pca.image_shape)


@dataclass(frozen=True)
class Gallery:
    """Enrollment embeddings, sorted by (identity_id, image_id) so that 1-NN
    ties resolve to the lexicographically smallest identity."""

    identity_ids: tuple[str, ...]
    image_ids: tuple[str, ...]
    embeddings: np.ndarray  # (m, C)


def build_gallery(pca: PcaModel, enrolled: list[LabeledImage]) -> Gallery:
    if not enrolled:
        raise ValueError("empty enrollment set")
    ordered = sorted(enrolled, key=lambda li: (li.identity_id, li.image_id))
    emb = np.stack([embed(pca, li.image) for li in ordered])
    return Gallery(
        tuple(li.identity_id for li in ordered),
        tuple(li.image_id for li in ordered),
        emb,
    )


def identify(pca: PcaModel, gallery: Gallery, img: np.ndarray) -> str:
    """1-NN under squared L2 in PCA space; exact ties pick the first (and thus
    lexicographically smallest) gallery identity."""
    probe = embed(pca, img)
    diff = gallery.embeddings - probe
    best = int(np.argmin(np.einsum("ij,ij->i", diff, diff)))
    return gallery.identity_ids[best]


@dataclass(frozen=True)
class RecognitionOutcome:
    protocol: str
    # (identity_id, image_id, predicted_id) per probe
    records: tuple[tuple[str, str, str], ...]


@dataclass(frozen=True)
class OutcomeSummary:
    mean_accuracy: float
    ci_half_width: float
    per_identity: dict[str, float]
    n_identities: int


def run_protocol(
    protocol: str,
    clear_enroll: list[LabeledImage],
    probes: list[LabeledImage],
    pca: PcaModel,
    deanonymizer: Deanonymizer | None = None,
    enroll_anonymizer: EnrollAnonymizer | None = None,
) -> RecognitionOutcome:
    """Score probes against an enrollment gallery.

    naive / clear_baseline enroll the clear images as given; parrot re-enrolls
    them through ``enroll_anonymizer``; reversal keeps the clear gallery and
    runs every probe through ``deanonymizer`` first.  The same fitted PCA is
    used for every protocol.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol: {protocol}")
    enroll_ids = {li.identity_id for li in clear_enroll}
    probe_ids = {li.identity_id for li in probes}
    if enroll_ids != probe_ids:
        raise ValueError(
            f"identity sets mismatch: enrollment {sorted(enroll_ids)} vs probes {sorted(probe_ids)}"
        )
    gallery_images = clear_enroll
    if protocol == "parrot":
        if enroll_anonymizer is None:
            raise ValueError("parrot protocol requires an enrollment anonymizer")
        gallery_images = [
            LabeledImage(
                enroll_anonymizer(li.image, f"{li.identity_id}/{li.image_id}"),
                li.identity_id,
                li.image_id,
            )
            for li in clear_enroll
        ]
    gallery = build_gallery(pca, gallery_images)

    records = []
    for li in sorted(probes, key=lambda li: (li.identity_id, li.image_id)):
        img = li.image
        if protocol == "reversal":
            if deanonymizer is None:
                raise ValueError("reversal protocol requires a deanonymizer")
            img = deanonymizer(img)
        records.append((li.identity_id, li.image_id, identify(pca, gallery, img)))
    return RecognitionOutcome(protocol, tuple(records))


def summarize(outcome: RecognitionOutcome) -> OutcomeSummary:
    """Mean accuracy over identities with a 1.96 * s / sqrt(n) half-width."""
    hits: dict[str, list[int]] = {}
    for true_id, _image_id, predicted in outcome.records:
        hits.setdefault(true_id, []).append(int(predicted == true_id))
    if len(hits) < 2:
        raise ValueError("confidence interval undefined for fewer than two identities")
    per_identity = {ident: float(np.mean(v)) for ident, v in sorted(hits.items())}
    values = np.array(list(per_identity.values()))
    n = values.size
    mean = float(values.mean())
    ci = 1.96 * float(values.std(ddof=1)) / math.sqrt(n)
    return OutcomeSummary(mean, ci, per_identity, n)


def outcome_csv(outcome: RecognitionOutcome) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["image_id", "true_id", "predicted_id"])
    for true_id, image_id, predicted in outcome.records:
        writer.writerow([image_id, true_id, predicted])
    return buf.getvalue()


def summary_json(summary: OutcomeSummary) -> str:
    return json.dumps(
        {
            "mean_accuracy": summary.mean_accuracy,
            "ci_half_width": summary.ci_half_width,
            "n_identities": summary.n_identities,
            "per_identity": summary.per_identity,
        },
        indent=2,
        sort_keys=True,
    )
