"""Experiment orchestration.

Stages one anonymization/reversal experiment end to end: dataset -> split ->
anonymize -> fit de-anonymizer -> de-anonymize -> recognition protocols ->
metrics -> report.  Anonymized image trees and fitted de-anonymizers are
cached content-addressed (hash of the producing config plus input data
fingerprint), so reruns and suites reuse work and stay byte-reproducible.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import shutil
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .anonymizers import (
    AnonymizerSpec,
    BackgroundDb,
    OverlaySet,
    build_background_db,
    make_anonymizer,
    make_overlay_set,
)
from .autoencoder import (
    AeHyperparams,
    ae_apply,
    ae_train,
    load_checkpoint,
    save_checkpoint,
)
from .dataio import (
    DatasetManifest,
    LabeledImage,
    generate_synthetic_faces,
    load_manifest,
    quantize,
    read_png,
    split_dataset,
    write_png,
)
from .deanon import (
    DeconvParams,
    PermutationMap,
    apply_permutation,
    apply_resample,
    grid_search_deconv,
    interpolate_gray,
    learn_permutation,
    resample_search,
    richardson_lucy,
    wiener_deconv,
)
from .metrics import reversibility, reversibility_category, ssim
from .recognition import (
    PROTOCOLS,
    fit_pca,
    outcome_csv,
    run_protocol,
    summarize,
)
from .seeds import derive_seed

log = logging.getLogger(__name__)

DEANON_KINDS = (
    "none",
    "autoencoder",
    "learn_permutation",
    "interpolate_gray",
    "resample",
    "wiener",
    "richardson_lucy",
)
# Kinds fitted on (anonymized, clear) training pairs before use.
FITTED_KINDS = ("autoencoder", "learn_permutation", "resample", "wiener", "richardson_lucy")

METRICS_HEADER = ("anonymizer", "deanonymizer", "protocol", "mean_acc", "ci", "ssim", "reversibility")


class ConfigError(ValueError):
    """Invalid experiment or suite configuration."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, cause: str):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetConfig:
    kind: str  # synthetic | manifest
    identity_count: int = 0
    images_per_identity: int = 0
    resolution: int = 0
    seed: int = 0
    root: str = ""

    def validate(self) -> "DatasetConfig":
        if self.kind == "synthetic":
            if self.identity_count < 1 or self.images_per_identity < 2 or self.resolution < 8:
                raise ConfigError(f"bad synthetic dataset parameters: {self}")
        elif self.kind == "manifest":
            if not self.root:
                raise ConfigError("manifest dataset needs a root path")
        else:
            raise ConfigError(f"dataset kind must be synthetic or manifest, got {self.kind}")
        return self

    def to_json(self) -> dict:
        if self.kind == "synthetic":
            return {
                "kind": "synthetic",
                "identity_count": self.identity_count,
                "images_per_identity": self.images_per_identity,
                "resolution": self.resolution,
                "seed": self.seed,
            }
        return {"kind": "manifest", "root": self.root}

    @classmethod
    def from_json(cls, obj: dict, root_seed: int) -> "DatasetConfig":
        kind = obj.get("kind", "synthetic")
        if kind == "synthetic":
            seed = obj.get("seed")
            if seed is None:
                seed = derive_seed(root_seed, "dataset")
            return cls(
                "synthetic",
                identity_count=obj.get("identity_count", 0),
                images_per_identity=obj.get("images_per_identity", 0),
                resolution=obj.get("resolution", 0),
                seed=seed,
            ).validate()
        return cls(kind, root=obj.get("root", "")).validate()


@dataclass(frozen=True)
class SplitConfig:
    background_count: int
    test_identity_count: int
    enroll_fraction: float = 0.5
    seed: int = 0

    def to_json(self) -> dict:
        return {
            "background_count": self.background_count,
            "test_identity_count": self.test_identity_count,
            "enroll_fraction": self.enroll_fraction,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict, root_seed: int) -> "SplitConfig":
        seed = obj.get("seed")
        if seed is None:
            seed = derive_seed(root_seed, "split")
        return cls(
            background_count=obj["background_count"],
            test_identity_count=obj["test_identity_count"],
            enroll_fraction=obj.get("enroll_fraction", 0.5),
            seed=seed,
        )


@dataclass(frozen=True)
class DeanonConfig:
    kind: str
    params: dict

    def validate(self) -> "DeanonConfig":
        if self.kind not in DEANON_KINDS:
            raise ConfigError(f"deanonymizer kind must be one of {DEANON_KINDS}, got {self.kind}")
        if self.kind == "resample" and self.params.get("mode", "bicubic") not in ("linear", "bicubic"):
            raise ConfigError(f"resample mode must be linear or bicubic: {self.params}")
        if self.kind == "autoencoder":
            allowed = set(AeHyperparams.__dataclass_fields__)
            extra = set(self.params) - allowed
            if extra:
                raise ConfigError(f"unknown autoencoder parameters: {sorted(extra)}")
        return self

    def to_json(self) -> dict:
        return {"kind": self.kind, "params": dict(sorted(self.params.items()))}

    @classmethod
    def from_json(cls, obj: dict, root_seed: int) -> "DeanonConfig":
        kind = obj.get("kind", "none")
        params = dict(obj.get("params", {}))
        if kind == "autoencoder" and "seed" not in params:
            params["seed"] = derive_seed(root_seed, "autoencoder")
        return cls(kind, params).validate()

    def hyperparams(self) -> AeHyperparams:
        return AeHyperparams(**self.params).validate()

    def label(self) -> str:
        if self.kind == "autoencoder":
            if not self.params.get("with_linear", True):
                return "autoencoder_conv"
            return "autoencoder"
        if self.kind == "resample":
            return f"resample_{self.params.get('mode', 'bicubic')}"
        return self.kind


def anonymizer_label(spec: AnonymizerSpec) -> str:
    inner = ";".join(f"{k}={spec.params[k]}" for k in sorted(spec.params))
    return f"{spec.method}({inner})"


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    dataset: DatasetConfig
    split: SplitConfig
    anonymizer: AnonymizerSpec
    deanonymizer: DeanonConfig
    protocols: tuple[str, ...]
    train_anonymizer_override: AnonymizerSpec | None = None
    train_dataset_override: DatasetConfig | None = None
    pca_components: int = 64
    background_components: int = 32
    seed: int = 0

    def validate(self) -> "ExperimentConfig":
        if not self.name or not all(c.isalnum() or c in "_.-" for c in self.name):
            raise ConfigError(f"experiment name must be non-empty and filesystem-safe: {self.name!r}")
        if not self.protocols:
            raise ConfigError("at least one protocol is required")
        for p in self.protocols:
            if p not in PROTOCOLS:
                raise ConfigError(f"unknown protocol {p}; choose from {PROTOCOLS}")
        if "reversal" in self.protocols and self.deanonymizer.kind == "none":
            raise ConfigError("the reversal protocol requires a deanonymizer")
        if (self.train_anonymizer_override or self.train_dataset_override) and "reversal" not in self.protocols:
            raise ConfigError("training overrides are only valid with the reversal protocol")
        if self.pca_components < 1 or self.background_components < 1:
            raise ConfigError("pca_components and background_components must be >= 1")
        try:
            self.anonymizer.validate()
            if self.train_anonymizer_override is not None:
                self.train_anonymizer_override.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.dataset.validate()
        self.deanonymizer.validate()
        return self

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "dataset": self.dataset.to_json(),
            "split": self.split.to_json(),
            "anonymizer": self.anonymizer.to_json(),
            "deanonymizer": self.deanonymizer.to_json(),
            "protocols": list(self.protocols),
            "train_anonymizer_override": (
                self.train_anonymizer_override.to_json() if self.train_anonymizer_override else None
            ),
            "train_dataset_override": (
                self.train_dataset_override.to_json() if self.train_dataset_override else None
            ),
            "pca_components": self.pca_components,
            "background_components": self.background_components,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        try:
            root_seed = obj.get("seed", 0)
            anon = dict(obj["anonymizer"])
            if anon.get("key") is None:
                anon["key"] = derive_seed(root_seed, "anonymizer-key")
            if anon.get("noise_seed") is None:
                anon["noise_seed"] = derive_seed(root_seed, "anonymizer-noise")
            override = obj.get("train_anonymizer_override")
            if override is not None:
                override = dict(override)
                if override.get("key") is None:
                    override["key"] = derive_seed(root_seed, "train-anonymizer-key")
                if override.get("noise_seed") is None:
                    override["noise_seed"] = derive_seed(root_seed, "train-anonymizer-noise")
                override = AnonymizerSpec.from_json(override)
            ds_override = obj.get("train_dataset_override")
            if ds_override is not None:
                ds_override = DatasetConfig.from_json(ds_override, derive_seed(root_seed, "train-dataset"))
            return cls(
                name=obj["name"],
                dataset=DatasetConfig.from_json(obj["dataset"], root_seed),
                split=SplitConfig.from_json(obj["split"], root_seed),
                anonymizer=AnonymizerSpec.from_json(anon),
                deanonymizer=DeanonConfig.from_json(obj.get("deanonymizer", {"kind": "none"}), root_seed),
                protocols=tuple(obj["protocols"]),
                train_anonymizer_override=override,
                train_dataset_override=ds_override,
                pca_components=obj.get("pca_components", 64),
                background_components=obj.get("background_components", 32),
                seed=root_seed,
            ).validate()
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed experiment config: {exc}") from exc


# ---------------------------------------------------------------------------
# Content-addressed cache
# ---------------------------------------------------------------------------


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _publish_dir(tmp: str, final: Path) -> None:
    """Atomically move a fully built directory into the cache."""
    final.parent.mkdir(parents=True, exist_ok=True)
    try:
        os.replace(tmp, final)
    except OSError:
        # Lost a race with a concurrent builder; theirs is equivalent.
        shutil.rmtree(tmp, ignore_errors=True)


def dataset_fingerprint(config: DatasetConfig, manifest: DatasetManifest) -> str:
    if config.kind == "synthetic":
        return config_hash(config.to_json())
    digest = hashlib.sha256()
    for entry in sorted(manifest.entries, key=lambda e: (e.identity_id, e.image_id)):
        digest.update(f"{entry.identity_id}/{entry.image_id}\n".encode("utf-8"))
        digest.update(hashlib.sha256(Path(entry.path).read_bytes()).digest())
    return digest.hexdigest()[:16]


def materialize_dataset(config: DatasetConfig, cache_dir: Path) -> tuple[DatasetManifest, str]:
    """Load or deterministically generate the dataset; returns its manifest
    and content fingerprint."""
    if config.kind == "manifest":
        manifest = load_manifest(config.root)
        return manifest, dataset_fingerprint(config, manifest)
    fingerprint = config_hash(config.to_json())
    root = cache_dir / "datasets" / fingerprint
    if not root.exists():
        cache_dir.mkdir(parents=True, exist_ok=True)
        tmp = tempfile.mkdtemp(dir=cache_dir, prefix="dataset-")
        generate_synthetic_faces(
            config.identity_count,
            config.images_per_identity,
            config.resolution,
            config.seed,
            tmp,
        )
        _publish_dir(tmp, root)
        log.info("dataset %s: generated", fingerprint)
    else:
        log.info("dataset %s: cache hit", fingerprint)
    return load_manifest(root), fingerprint


def _load_images(
    manifest: DatasetManifest, wanted: dict[str, tuple[str, ...]]
) -> list[LabeledImage]:
    """Read the requested identity -> image-id subsets, sorted."""
    by_id = manifest.by_identity()
    out = []
    for identity in sorted(wanted):
        entries = {e.image_id: e for e in by_id[identity]}
        for image_id in sorted(wanted[identity]):
            out.append(LabeledImage(read_png(entries[image_id].path), identity, image_id))
    return out


def _tree_digest(root: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*.png")):
        digest.update(str(path.relative_to(root)).encode("utf-8"))
        digest.update(hashlib.sha256(path.read_bytes()).digest())
    return digest.hexdigest()[:16]


@dataclass
class _AnonContext:
    """Everything an anonymizer spec needs beyond the image itself."""

    spec: AnonymizerSpec
    background_db: BackgroundDb | None = None
    overlays: OverlaySet | None = None

    def function(self):
        return make_anonymizer(self.spec, background_db=self.background_db, overlays=self.overlays)


def _anon_context(
    spec: AnonymizerSpec,
    manifest: DatasetManifest,
    background_ids,
    background_components: int,
) -> tuple[_AnonContext, dict]:
    """Build k-Same / overlay context when the method needs it, plus the
    extra cache-key material describing that context."""
    extra: dict = {}
    ctx = _AnonContext(spec)
    if spec.method in ("k_same_pixel", "k_same_eigen", "k_rtio"):
        by_id = manifest.by_identity()
        wanted = {i: tuple(e.image_id for e in by_id[i]) for i in background_ids}
        background = _load_images(manifest, wanted)
        extra["background_ids"] = sorted(background_ids)
        if spec.method == "k_rtio":
            firsts = {}
            for li in background:
                firsts.setdefault(li.identity_id, li.image)
            ctx.overlays = make_overlay_set([firsts[i] for i in sorted(firsts)])
        else:
            ctx.background_db = build_background_db(background, background_components)
            extra["background_components"] = background_components
    return ctx, extra


def anonymize_tree(
    ctx: _AnonContext,
    manifest: DatasetManifest,
    wanted: dict[str, tuple[str, ...]],
    dataset_fp: str,
    role: str,
    cache_dir: Path,
    extra_key: dict,
) -> tuple[Path, bool]:
    """Anonymize a dataset subset into a cached PNG tree; returns its root
    and whether the cache already held it."""
    key = {
        "anonymizer": ctx.spec.to_json(),
        "dataset": dataset_fp,
        "role": role,
        "subset": {i: sorted(wanted[i]) for i in sorted(wanted)},
        **extra_key,
    }
    tree_hash = config_hash(key)
    root = cache_dir / "anonymized" / tree_hash
    if root.exists():
        log.info("anonymize[%s] %s: cache hit", role, tree_hash)
        return root, True
    fn = ctx.function()
    tmp = tempfile.mkdtemp(dir=cache_dir, prefix="anon-")
    for li in _load_images(manifest, wanted):
        out = fn(li.image, f"{li.identity_id}/{li.image_id}")
        write_png(Path(tmp) / li.identity_id / f"{li.image_id}.png", out)
    _publish_dir(tmp, root)
    log.info("anonymize[%s] %s: built", role, tree_hash)
    return root, False


def _read_tree(root: Path) -> list[LabeledImage]:
    out = []
    for ident_dir in sorted(p for p in Path(root).iterdir() if p.is_dir()):
        for png in sorted(ident_dir.glob("*.png")):
            out.append(LabeledImage(read_png(png), ident_dir.name, png.stem))
    return out


# ---------------------------------------------------------------------------
# De-anonymizer fitting
# ---------------------------------------------------------------------------


@dataclass
class FittedDeanonymizer:
    kind: str
    apply: object  # Callable[[np.ndarray], np.ndarray]
    details: dict
    cache_hit: bool


def _fit_artifacts(
    config: DeanonConfig,
    pairs: list[tuple[np.ndarray, np.ndarray]],
    identities: list[str],
    out: Path,
) -> dict:
    """Fit on (anonymized, clear) pairs and write artifacts into ``out``."""
    if config.kind == "autoencoder":
        model, train_log = ae_train(pairs, config.hyperparams(), identities)
        save_checkpoint(model, out / "model.ckpt")
        (out / "training_log.csv").write_text(train_log.to_csv())
        return {"best_epoch": train_log.best_epoch, "best_val_loss": train_log.best_val_loss}
    # Specialized fits take (clear, anonymized) pairs.
    flipped = [(clear, anon) for anon, clear in pairs]
    if config.kind == "learn_permutation":
        pmap = learn_permutation(flipped)
        (out / "permutation.json").write_text(json.dumps(pmap.to_json()))
        return {"confidence": pmap.confidence}
    if config.kind == "resample":
        result = resample_search(flipped, config.params.get("mode", "bicubic"))
        return {
            "resolution": result.resolution,
            "mode": result.mode,
            "scores": [[r, s] for r, s in result.scores],
        }
    method = "wiener" if config.kind == "wiener" else "rl"
    params = grid_search_deconv(flipped, method)
    return {"deconv": params.to_json()}


def _load_fitted(config: DeanonConfig, out: Path, details: dict, cache_hit: bool) -> FittedDeanonymizer:
    """Reconstruct the apply function from on-disk artifacts.  Models always
    round-trip through their checkpoint so warm and cold runs share the same
    float32 weight grid."""
    if config.kind == "autoencoder":
        model = load_checkpoint(out / "model.ckpt")
        return FittedDeanonymizer("autoencoder", lambda img: ae_apply(model, img), details, cache_hit)
    if config.kind == "learn_permutation":
        pmap = PermutationMap.from_json(
            json.loads((out / "permutation.json").read_text()), details.get("confidence")
        )
        return FittedDeanonymizer(
            "learn_permutation", lambda img: apply_permutation(pmap, img), details, cache_hit
        )
    if config.kind == "resample":
        r, mode = details["resolution"], details["mode"]
        return FittedDeanonymizer("resample", lambda img: apply_resample(img, r, mode), details, cache_hit)
    params = DeconvParams.from_json(details["deconv"])
    fn = wiener_deconv if config.kind == "wiener" else richardson_lucy
    return FittedDeanonymizer(config.kind, lambda img: fn(img, params), details, cache_hit)


def fit_deanonymizer(
    config: DeanonConfig,
    train_tree: Path,
    clear_train: list[LabeledImage],
    cache_dir: Path,
) -> FittedDeanonymizer:
    if config.kind == "interpolate_gray":
        return FittedDeanonymizer("interpolate_gray", interpolate_gray, {}, False)
    key = {"deanonymizer": config.to_json(), "train_tree": _tree_digest(train_tree)}
    model_hash = config_hash(key)
    out = cache_dir / "models" / model_hash
    if out.exists():
        details = json.loads((out / "details.json").read_text())
        log.info("train_deanon %s: cache hit", model_hash)
        return _load_fitted(config, out, details, True)

    anon_train = {(li.identity_id, li.image_id): li.image for li in _read_tree(train_tree)}
    keys = sorted(anon_train)
    clear_by_key = {(li.identity_id, li.image_id): li.image for li in clear_train}
    missing = [k for k in keys if k not in clear_by_key]
    if missing:
        raise ValueError(f"training tree has no clear counterpart for {missing[:3]}")
    pairs = [(anon_train[k], clear_by_key[k]) for k in keys]
    identities = [ident for ident, _ in keys]

    tmp = tempfile.mkdtemp(dir=cache_dir, prefix="model-")
    details = _fit_artifacts(config, pairs, identities, Path(tmp))
    Path(tmp, "details.json").write_text(json.dumps(details, sort_keys=True, indent=2))
    _publish_dir(tmp, out)
    log.info("train_deanon %s: fitted", model_hash)
    return _load_fitted(config, out, json.loads((out / "details.json").read_text()), False)


# ---------------------------------------------------------------------------
# Experiment runner
# ---------------------------------------------------------------------------


def _split_for(manifest: DatasetManifest, split: SplitConfig):
    return split_dataset(
        manifest,
        background_count=split.background_count,
        test_identity_count=split.test_identity_count,
        enroll_fraction=split.enroll_fraction,
        seed=split.seed,
    )


def _training_materials(
    config: ExperimentConfig, cache_dir: Path
) -> tuple[DatasetManifest, dict[str, tuple[str, ...]], Path, bool]:
    """Materialize the training-side dataset (the override one for
    cross-dataset experiments), split it, and anonymize its training
    identities with the training-side anonymizer spec."""
    ds_config = config.train_dataset_override or config.dataset
    train_manifest, train_fp = materialize_dataset(ds_config, cache_dir)
    train_split = _split_for(train_manifest, config.split)
    train_spec = config.train_anonymizer_override or config.anonymizer
    ctx, extra = _anon_context(
        train_spec, train_manifest, train_split.background_ids, config.background_components
    )
    by_id = train_manifest.by_identity()
    train_wanted = {
        i: tuple(e.image_id for e in by_id[i]) for i in sorted(train_split.training_ids)
    }
    tree, hit = anonymize_tree(
        ctx, train_manifest, train_wanted, train_fp, "train", cache_dir, extra
    )
    return train_manifest, train_wanted, tree, hit


def train_deanonymizer(config: ExperimentConfig, cache_dir) -> FittedDeanonymizer:
    """Run just the training-side stages: dataset -> split -> anonymize ->
    fit.  Shares the experiment cache, so a later run_experiment reuses the
    result."""
    config.validate()
    if config.deanonymizer.kind not in FITTED_KINDS:
        raise ConfigError(f"deanonymizer {config.deanonymizer.kind} has nothing to fit")
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    train_manifest, train_wanted, train_tree, _ = _training_materials(config, cache_dir)
    clear_train = _load_images(train_manifest, train_wanted)
    return fit_deanonymizer(config.deanonymizer, train_tree, clear_train, cache_dir)


def _stage(timings: dict, name: str):
    class _Timer:
        def __enter__(self):
            self.start = time.perf_counter()
            return self

        def __exit__(self, exc_type, exc, tb):
            timings[name] = time.perf_counter() - self.start
            if exc is not None and not isinstance(exc, StageError):
                raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
            return False

    return _Timer()


def _mean_ssim(probes: list[LabeledImage], clear: dict[tuple[str, str], np.ndarray]) -> float:
    values = [ssim(li.image, clear[(li.identity_id, li.image_id)]) for li in probes]
    return float(np.mean(values))


def run_experiment(config: ExperimentConfig, cache_dir, out_dir=None) -> dict:
    """Execute one experiment; returns (and optionally writes) its report."""
    config.validate()
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}
    wants_reversal = "reversal" in config.protocols
    # The reversibility score needs all three accuracies.
    run_protocols = set(config.protocols)
    if wants_reversal:
        run_protocols.update(("clear_baseline", "naive"))

    with _stage(timings, "dataset"):
        manifest, dataset_fp = materialize_dataset(config.dataset, cache_dir)

    with _stage(timings, "split"):
        split = _split_for(manifest, config.split)

    by_id = manifest.by_identity()
    test_wanted = {i: split.test[i] for i in sorted(split.eval_ids)}
    cache_flags: dict[str, bool] = {}

    with _stage(timings, "anonymize"):
        ctx, extra = _anon_context(
            config.anonymizer, manifest, split.background_ids, config.background_components
        )
        test_tree, hit = anonymize_tree(
            ctx, manifest, test_wanted, dataset_fp, "test", cache_dir, extra
        )
        cache_flags["anonymized_test"] = hit
        train_materials = None
        if wants_reversal and config.deanonymizer.kind in FITTED_KINDS:
            train_materials = _training_materials(config, cache_dir)
            cache_flags["anonymized_train"] = train_materials[3]

    fitted: FittedDeanonymizer | None = None
    if wants_reversal:
        with _stage(timings, "train_deanon"):
            if train_materials is not None:
                train_manifest, train_wanted, train_tree, _ = train_materials
                clear_train = _load_images(train_manifest, train_wanted)
                fitted = fit_deanonymizer(config.deanonymizer, train_tree, clear_train, cache_dir)
                cache_flags["model"] = fitted.cache_hit
            else:
                # interpolate_gray is the only reversal method with no fit.
                fitted = FittedDeanonymizer(config.deanonymizer.kind, interpolate_gray, {}, False)

    with _stage(timings, "recognition"):
        clear_enroll = _load_images(manifest, {i: split.enrollment[i] for i in sorted(split.eval_ids)})
        clear_test = _load_images(manifest, test_wanted)
        clear_by_key = {(li.identity_id, li.image_id): li.image for li in clear_test}
        anon_probes = _read_tree(test_tree)
        probe_tree_sha = _tree_digest(test_tree)

        training_images = [
            li.image
            for li in _load_images(
                manifest, {i: tuple(e.image_id for e in by_id[i]) for i in sorted(split.training_ids)}
            )
        ]
        pca = fit_pca(training_images, config.pca_components)

        deanon_probes: list[LabeledImage] | None = None
        deanonymize = None
        if wants_reversal:
            # Reversal consumes the very same anonymized files as naive.
            assert _tree_digest(test_tree) == probe_tree_sha
            deanonymize = lambda img: quantize(fitted.apply(img))  # noqa: E731
            deanon_probes = [
                LabeledImage(deanonymize(li.image), li.identity_id, li.image_id)
                for li in anon_probes
            ]

        anon_fn = ctx.function()
        outcomes = {}
        for protocol in sorted(run_protocols):
            if protocol == "clear_baseline":
                outcomes[protocol] = run_protocol(protocol, clear_enroll, clear_test, pca)
            elif protocol in ("naive", "parrot"):
                outcomes[protocol] = run_protocol(
                    protocol,
                    clear_enroll,
                    anon_probes,
                    pca,
                    enroll_anonymizer=lambda img, key: quantize(anon_fn(img, key)),
                )
            else:
                outcomes[protocol] = run_protocol(
                    protocol, clear_enroll, anon_probes, pca, deanonymizer=deanonymize
                )

    with _stage(timings, "metrics"):
        summaries = {p: summarize(o) for p, o in outcomes.items()}
        ssim_by_protocol = {}
        for protocol in run_protocols:
            if protocol == "clear_baseline":
                ssim_by_protocol[protocol] = 1.0
            elif protocol in ("naive", "parrot"):
                ssim_by_protocol[protocol] = _mean_ssim(anon_probes, clear_by_key)
            else:
                ssim_by_protocol[protocol] = _mean_ssim(deanon_probes, clear_by_key)

        rev: dict | None = None
        if wants_reversal:
            try:
                score = reversibility(
                    summaries["clear_baseline"].mean_accuracy,
                    summaries["naive"].mean_accuracy,
                    summaries["reversal"].mean_accuracy,
                )
                rev = {"score": score, "category": reversibility_category(score)}
            except ValueError as exc:
                rev = {"error": str(exc)}

        anon_label = anonymizer_label(config.anonymizer)
        deanon_label = config.deanonymizer.label()
        rows = []
        for protocol in PROTOCOLS:
            if protocol not in config.protocols:
                continue
            s = summaries[protocol]
            rev_cell = ""
            if protocol == "reversal" and rev is not None and "score" in rev:
                rev_cell = repr(rev["score"])
            rows.append(
                [
                    anon_label,
                    deanon_label if protocol == "reversal" else "none",
                    protocol,
                    repr(float(s.mean_accuracy)),
                    repr(float(s.ci_half_width)),
                    repr(float(ssim_by_protocol[protocol])),
                    rev_cell,
                ]
            )

    report = {
        "name": config.name,
        "tool_version": __version__,
        "config": config.to_json(),
        "seeds": {
            "root": config.seed,
            "dataset": config.dataset.seed if config.dataset.kind == "synthetic" else None,
            "split": config.split.seed,
            "anonymizer_key": config.anonymizer.key,
            "anonymizer_noise": config.anonymizer.noise_seed,
            "autoencoder": (
                config.deanonymizer.params.get("seed")
                if config.deanonymizer.kind == "autoencoder"
                else None
            ),
        },
        "split": split.to_json(),
        "protocols": {
            p: {
                "mean_accuracy": summaries[p].mean_accuracy,
                "ci_half_width": summaries[p].ci_half_width,
                "n_identities": summaries[p].n_identities,
                "per_identity": summaries[p].per_identity,
                "mean_ssim": ssim_by_protocol[p],
            }
            for p in sorted(run_protocols)
        },
        "mean_ssim_deanonymized": ssim_by_protocol.get("reversal"),
        "reversibility": rev,
        "deanon_fit": (fitted.details if fitted is not None else None),
        "cache": cache_flags,
        "probe_tree_sha256": probe_tree_sha,
        "rows": rows,
        "timings": timings,
    }

    if out_dir is not None:
        try:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            emit_report(report, "json", out_dir)
            emit_report(report, "csv", out_dir)
            (out_dir / "outcomes").mkdir(exist_ok=True)
            for protocol, outcome in outcomes.items():
                (out_dir / "outcomes" / f"{protocol}.csv").write_text(outcome_csv(outcome))
        except OSError as exc:
            raise StageError("report", f"{type(exc).__name__}: {exc}") from exc
    return report


def metrics_csv(rows: list[list[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    writer.writerows(rows)
    return buf.getvalue()


def emit_report(report: dict, fmt: str, out_dir) -> Path:
    """Write the report as report.json or metrics.csv (deterministic bytes;
    timings live only in the JSON)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        path = out_dir / "report.json"
        path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
        return path
    if fmt == "csv":
        path = out_dir / "metrics.csv"
        path.write_text(metrics_csv(report["rows"]))
        return path
    raise ConfigError(f"report format must be json or csv, got {fmt}")


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------


def _run_suite_entry(obj: dict, cache_dir: str, out_dir: str) -> tuple[str, dict | None, dict | None]:
    name = obj.get("name", "unnamed")
    try:
        config = ExperimentConfig.from_json(obj)
        report = run_experiment(config, cache_dir, Path(out_dir) / config.name)
        return name, report, None
    except StageError as exc:
        return name, None, {"name": name, "stage": exc.stage, "cause": exc.cause}
    except Exception as exc:  # noqa: BLE001 - suite must continue past any failure
        stage = "config" if isinstance(exc, ConfigError) else "unknown"
        return name, None, {"name": name, "stage": stage, "cause": str(exc)}


def run_suite(suite: dict | str | Path, cache_dir, out_dir, jobs: int = 1) -> dict:
    """Run every experiment in the suite, sharing one cache.

    Failures are recorded per experiment and do not stop the suite.  Writes
    aggregate.csv (one row per requested protocol of each successful
    experiment, in suite order) and suite_report.json under ``out_dir``.
    """
    if not isinstance(suite, dict):
        suite = json.loads(Path(suite).read_text())
    experiments = suite.get("experiments", [])
    if not experiments:
        raise ConfigError("suite contains no experiments")
    names = [e.get("name") for e in experiments]
    if len(set(names)) != len(names):
        raise ConfigError("experiment names within a suite must be unique")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)

    results: list[tuple[str, dict | None, dict | None]] = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(_run_suite_entry, obj, str(cache_dir), str(out_dir))
                for obj in experiments
            ]
            results = [f.result() for f in futures]
    else:
        results = [_run_suite_entry(obj, str(cache_dir), str(out_dir)) for obj in experiments]

    rows: list[list[str]] = []
    reports = []
    failures = []
    for name, report, failure in results:
        if failure is not None:
            failures.append(failure)
            log.warning("experiment %s failed at stage %s: %s", name, failure["stage"], failure["cause"])
            continue
        reports.append(report)
        rows.extend(report["rows"])

    (out_dir / "aggregate.csv").write_text(metrics_csv(rows))
    suite_report = {
        "tool_version": __version__,
        "n_experiments": len(experiments),
        "n_failed": len(failures),
        "failures": failures,
        "experiments": [r["name"] for r in reports],
    }
    (out_dir / "suite_report.json").write_text(json.dumps(suite_report, sort_keys=True, indent=2) + "\n")
    return {"reports": reports, "failures": failures, "aggregate_csv": str(out_dir / "aggregate.csv")}


# ---------------------------------------------------------------------------
# Default suite: the full in-scope anonymizer x attack matrix
# ---------------------------------------------------------------------------

_DEFAULT_ANONYMIZERS: tuple[tuple[str, dict], ...] = (
    ("eye_mask", {}),
    ("block_permute", {"block_size": 8}),
    ("pixel_relocate", {"steps": 50}),
    ("gaussian_noise", {"sigma": 200}),
    ("gaussian_blur", {"kernel": 9}),
    ("pixelate", {"size": 8}),
    ("dp_pix", {"epsilon": 5, "b": 2, "m": 4}),
    ("dp_snow", {"delta": 0.5}),
    ("dp_samp", {"epsilon": 25, "k": 8, "m": 12}),
    ("k_same_pixel", {"k": 10}),
    ("k_same_eigen", {"k": 10}),
    ("k_rtio", {"k": 3}),
)

# Specialized attacks apply only where their mechanism matches the anonymizer.
_SPECIALIZED_CELLS: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("learn_permutation", ("block_permute", "pixel_relocate")),
    ("resample", ("gaussian_noise", "gaussian_blur", "pixelate", "dp_pix", "dp_snow")),
    ("wiener", ("gaussian_noise", "gaussian_blur", "pixelate", "dp_pix", "dp_snow")),
    ("richardson_lucy", ("gaussian_noise", "gaussian_blur", "dp_pix", "dp_snow")),
    ("interpolate_gray", ("dp_snow",)),
)

# MSE training keeps the model near-passthrough on inputs unlike anything it
# was trained on (cross-method and cross-dataset cells); quality is still
# reported as SSIM.
AE_DESK_PARAMS = {
    "features": 16,
    "loss": "mse",
    "learning_rate": 1e-3,
    "batch_size": 32,
    "max_epochs": 120,
}


def default_suite(dataset: dict, split: dict, seed: int = 0) -> dict:
    """One experiment per in-scope anonymizer/attack combination: the trained
    autoencoder (with and without the linear layer) against every anonymizer,
    plus each specialized attack against the anonymizers it targets."""
    experiments = []

    def add(name: str, method: str, params: dict, deanon: dict) -> None:
        experiments.append(
            {
                "name": name,
                "seed": seed,
                "dataset": dataset,
                "split": split,
                "anonymizer": {"method": method, "params": params},
                "deanonymizer": deanon,
                "protocols": ["reversal"],
            }
        )

    for method, params in _DEFAULT_ANONYMIZERS:
        add(f"{method}--autoencoder", method, params, {"kind": "autoencoder", "params": dict(AE_DESK_PARAMS)})
        add(
            f"{method}--autoencoder_conv",
            method,
            params,
            {"kind": "autoencoder", "params": {**AE_DESK_PARAMS, "with_linear": False}},
        )
    by_method = dict(_DEFAULT_ANONYMIZERS)
    for attack, targets in _SPECIALIZED_CELLS:
        for method in targets:
            deanon = {"kind": attack, "params": {}}
            if attack == "resample":
                deanon["params"] = {"mode": "bicubic"}
            add(f"{method}--{attack}", method, by_method[method], deanon)
    return {"experiments": experiments}
