"""End-to-end acceptance checks on the standard synthetic fixture.

Each test covers one numbered criterion: it runs the real pipeline (no mocks,
no seams), measures against the pinned tolerance, and reports a single
verdict line that conftest prints at the end of the session.  The heavyweight
criteria share one session cache, so a model trained for one criterion is
reused wherever another criterion needs the identical training task.

The full module trains several autoencoders from scratch; expect roughly an
hour on one core for a cold run.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from anonrev import metrics
from anonrev.anonymizers import GRAY, AnonymizerSpec, dp_pix, dp_snow, gaussian_noise_field, make_anonymizer
from anonrev.autoencoder import AeHyperparams, ae_gradient_check, ae_init
from anonrev.dataio import (
    BRIGHTNESS_JITTER,
    NOISE_SIGMA,
    TRANSLATION_JITTER,
    generate_synthetic_faces,
    identity_latent,
    load_labeled,
    quantize,
    render_face,
    split_dataset,
    write_png,
)
from anonrev.deanon import apply_permutation, learn_permutation
from anonrev.harness import ExperimentConfig, run_experiment, run_suite
from anonrev.recognition import embed, fit_pca, reconstruct
from anonrev.seeds import rng_for

SEED = 7
DATASET = {"kind": "synthetic", "identity_count": 50, "images_per_identity": 10,
           "resolution": 32, "seed": SEED}
DATASET_FAMILY2 = dict(DATASET, seed=1007)
SPLIT = {"background_count": 10, "test_identity_count": 10, "seed": SEED}
# k-Same needs a background pool well above k, otherwise the k-1 neighbor
# sets of all probes nearly coincide and the method degenerates.
SPLIT_WIDE = {"background_count": 20, "test_identity_count": 10, "seed": SEED}
AE = {"features": 16, "loss": "mse", "learning_rate": 1e-3, "batch_size": 32,
      "max_epochs": 120, "seed": 5}
AE_LONG = {**AE, "max_epochs": 200}


@pytest.fixture(scope="session")
def cache(tmp_path_factory):
    return tmp_path_factory.mktemp("cache")


@pytest.fixture(scope="session")
def outdir(tmp_path_factory):
    return tmp_path_factory.mktemp("out")


@pytest.fixture
def verdict(request):
    def _record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:02d}: {'pass' if ok else 'FAIL'}  {detail}"
        request.config._acceptance_lines.append(line)
        print(line)

    return _record


def _experiment(name, method, params, deanon, protocols=("clear_baseline", "naive", "reversal"),
                split=SPLIT, **extra):
    obj = {
        "name": name,
        "seed": SEED,
        "dataset": dict(DATASET),
        "split": dict(split),
        "anonymizer": {"method": method, "params": params, "key": 11, "noise_seed": 11},
        "deanonymizer": deanon,
        "protocols": list(protocols),
    }
    obj.update(extra)
    return obj


def _run(cache, outdir, obj):
    config = ExperimentConfig.from_json(obj)
    return run_experiment(config, cache, outdir / obj["name"])


def _acc(report, protocol):
    return report["protocols"][protocol]["mean_accuracy"]


def _ci(report, protocol):
    return report["protocols"][protocol]["ci_half_width"]


# ---------------------------------------------------------------------------
# 1: learned permutations restore the exact images
# ---------------------------------------------------------------------------


def test_criterion_01_permutations_reverse_exactly(cache, outdir, tmp_path, verdict):
    started = time.perf_counter()
    cells = {"block_permute": {"block_size": 8}, "pixel_relocate": {"steps": 50}}

    pipeline_ok = True
    for method, params in cells.items():
        report = _run(cache, outdir, _experiment(
            f"c1-{method}", method, params, {"kind": "learn_permutation", "params": {}}))
        pipeline_ok = pipeline_ok and (
            _acc(report, "reversal") == _acc(report, "clear_baseline")
            and report["reversibility"]["score"] == 1.0
        )

    # Bit-exactness, checked against the library directly: learn the map from
    # the training split and undo every anonymized test probe.
    manifest = generate_synthetic_faces(
        DATASET["identity_count"], DATASET["images_per_identity"],
        DATASET["resolution"], DATASET["seed"], tmp_path / "faces")
    split = split_dataset(manifest, SPLIT["background_count"],
                          SPLIT["test_identity_count"], seed=SPLIT["seed"])
    labeled = load_labeled(manifest)
    exact_ok = True
    for method, params in cells.items():
        anonymize = make_anonymizer(AnonymizerSpec(method, params, key=11, noise_seed=11))
        pairs = [(li.image, anonymize(li.image, f"{li.identity_id}/{li.image_id}"))
                 for li in labeled if li.identity_id in split.training_ids]
        learned = learn_permutation(pairs)
        for li in labeled:
            if li.image_id not in split.test.get(li.identity_id, ()):
                continue
            anon = anonymize(li.image, f"{li.identity_id}/{li.image_id}")
            restored = quantize(apply_permutation(learned, anon))
            exact_ok = exact_ok and np.array_equal(restored, li.image)

    elapsed = time.perf_counter() - started
    ok = pipeline_ok and exact_ok and elapsed < 60
    verdict(1, ok, f"bit-exact={exact_ok} reversal==clear&score==1={pipeline_ok} {elapsed:.1f}s (<60s)")
    assert ok


# ---------------------------------------------------------------------------
# 2: the linear layer is what makes permutation reversal work
# ---------------------------------------------------------------------------


def test_criterion_02_linear_layer_necessity(cache, outdir, verdict):
    started = time.perf_counter()
    params = {"block_size": 4}
    full = _run(cache, outdir, _experiment(
        "c2-linear", "block_permute", params,
        {"kind": "autoencoder", "params": dict(AE_LONG)}))
    ablated = _run(cache, outdir, _experiment(
        "c2-conv", "block_permute", params,
        {"kind": "autoencoder", "params": {**AE_LONG, "with_linear": False}}))
    elapsed = time.perf_counter() - started

    ssim_gap = full["protocols"]["reversal"]["mean_ssim"] - ablated["protocols"]["reversal"]["mean_ssim"]
    acc_gap = _acc(full, "reversal") - _acc(ablated, "reversal")
    ok = ssim_gap >= 0.1 and acc_gap >= 0.15 and elapsed < 1800
    verdict(2, ok, f"ssim_gap={ssim_gap:.3f} (>=0.1) acc_gap={acc_gap:.2f} (>=0.15) {elapsed:.0f}s (<1800s)")
    assert ok


# ---------------------------------------------------------------------------
# 3: averaging-based anonymization stays irreversible
# ---------------------------------------------------------------------------


def test_criterion_03_k_same_irreversible(cache, outdir, verdict):
    clauses = []
    for method in ("k_same_pixel", "k_same_eigen"):
        report = _run(cache, outdir, _experiment(
            f"c3-{method}", method, {"k": 10},
            {"kind": "autoencoder", "params": dict(AE)}, split=SPLIT_WIDE))
        gain = _acc(report, "reversal") - _acc(report, "naive")
        category = report["reversibility"]["category"]
        clauses.append((method, gain, category))
    ok = all(gain <= 0.10 and category == metrics.IRREVERSIBLE for _, gain, category in clauses)
    detail = " ".join(f"{m}: gain={g:.2f} (<=0.10) {c}" for m, g, c in clauses)
    verdict(3, ok, detail)
    assert ok


# ---------------------------------------------------------------------------
# 4: noise/smoothing methods are partially reversible
# ---------------------------------------------------------------------------


def test_criterion_04_partial_reversibility(cache, outdir, verdict):
    cells = {
        "gaussian_blur": {"kernel": 9},
        "pixelate": {"size": 8},
        "gaussian_noise": {"sigma": 200},
        "dp_snow": {"delta": 0.5},
    }
    rows = []
    for method, params in cells.items():
        report = _run(cache, outdir, _experiment(
            f"c4-{method}", method, params, {"kind": "autoencoder", "params": dict(AE)}))
        rev, naive, clear = _acc(report, "reversal"), _acc(report, "naive"), _acc(report, "clear_baseline")
        rows.append((method, rev, naive, clear, rev > naive + 0.05 and rev < clear))
    ok = all(r[4] for r in rows)
    detail = " ".join(f"{m}:{rev:.2f}>{naive:.2f}+0.05<{clear:.2f}={'y' if good else 'N'}"
                      for m, rev, naive, clear, good in rows)
    verdict(4, ok, detail)
    assert ok


# ---------------------------------------------------------------------------
# 5: gray-speckle interpolation nearly restores the original
# ---------------------------------------------------------------------------


def test_criterion_05_snow_interpolation_near_perfect(cache, outdir, verdict):
    started = time.perf_counter()
    report = _run(cache, outdir, _experiment(
        "c5-interp", "dp_snow", {"delta": 0.5}, {"kind": "interpolate_gray", "params": {}}))
    elapsed = time.perf_counter() - started
    mean_ssim = report["protocols"]["reversal"]["mean_ssim"]
    score = report["reversibility"]["score"]
    ok = mean_ssim >= 0.90 and score >= 0.8 and elapsed < 60
    verdict(5, ok, f"ssim={mean_ssim:.4f} (>=0.90) score={score:.3f} (>=0.8) {elapsed:.1f}s (<60s)")
    assert ok


# ---------------------------------------------------------------------------
# 6: reversal quality tracks how closely training matched the test
# ---------------------------------------------------------------------------


def _blur_test_cell(cache, outdir, name, train_method, train_params):
    override = {"method": train_method, "params": train_params, "key": 11, "noise_seed": 11}
    return _run(cache, outdir, _experiment(
        name, "gaussian_blur", {"kernel": 9},
        {"kind": "autoencoder", "params": dict(AE)},
        train_anonymizer_override=override))


def test_criterion_06_training_mismatch_degrades(cache, outdir, verdict):
    acc, ci = {}, {}
    for kernel in (5, 7, 9, 11, 13):
        report = _blur_test_cell(cache, outdir, f"c6-kernel{kernel}", "gaussian_blur", {"kernel": kernel})
        acc[kernel], ci[kernel] = _acc(report, "reversal"), _ci(report, "reversal")
        naive, ci_naive = _acc(report, "naive"), _ci(report, "naive")

    matched_is_max = acc[9] >= max(acc.values())

    # Walk outward from the matched kernel; a single increase is tolerated
    # when it stays inside the farther cell's confidence interval.
    inversions = []  # one flag per adjacent increase: was it within CI?
    for chain in ((9, 7, 5), (9, 11, 13)):
        for nearer, farther in zip(chain, chain[1:]):
            if acc[farther] > acc[nearer]:
                inversions.append(acc[farther] - acc[nearer] <= ci[farther])
    monotone_ok = len(inversions) == 0 or (len(inversions) == 1 and inversions[0])

    mismatch = {}
    for name, method, params in (("c6-snowtrain", "dp_snow", {"delta": 0.5}),
                                 ("c6-pixtrain", "pixelate", {"size": 8})):
        report = _blur_test_cell(cache, outdir, name, method, params)
        mismatch[method] = _acc(report, "reversal")
    cross_ok = all(abs(a - naive) <= ci_naive for a in mismatch.values())

    ok = matched_is_max and monotone_ok and cross_ok
    ladder = " ".join(f"k{k}={acc[k]:.2f}" for k in (5, 7, 9, 11, 13))
    cross = " ".join(f"{m}={a:.2f}" for m, a in mismatch.items())
    verdict(6, ok, f"{ladder} max@9={matched_is_max} monotone={monotone_ok} "
                   f"cross[{cross}] within {naive:.2f}+-{ci_naive:.2f}={cross_ok}")
    assert ok


# ---------------------------------------------------------------------------
# 7: training on a second identity family transfers back
# ---------------------------------------------------------------------------


def test_criterion_07_cross_family_transfer(cache, outdir, verdict):
    rows = []
    for method, params in (("gaussian_blur", {"kernel": 9}), ("gaussian_noise", {"sigma": 200})):
        same = _run(cache, outdir, _experiment(
            f"c7-{method}-same", method, params, {"kind": "autoencoder", "params": dict(AE)}))
        other = _run(cache, outdir, _experiment(
            f"c7-{method}-family2", method, params, {"kind": "autoencoder", "params": dict(AE)},
            train_dataset_override=dict(DATASET_FAMILY2)))
        gap = abs(_acc(other, "reversal") - _acc(same, "reversal"))
        rows.append((method, _acc(same, "reversal"), _acc(other, "reversal"), gap))
    ok = all(gap <= 0.15 for *_, gap in rows)
    detail = " ".join(f"{m}: same={s:.2f} other={o:.2f} gap={g:.2f} (<=0.15)" for m, s, o, g in rows)
    verdict(7, ok, detail)
    assert ok


# ---------------------------------------------------------------------------
# 8: the 1/k ceiling shows up once every probe shares its neighbor pool
# ---------------------------------------------------------------------------


def _shared_neighbor_corpus(root: Path) -> Path:
    """Standard corpus, but every background identity is re-rendered as a
    jittered copy of one extra latent, so each probe's k-1 nearest records
    are interchangeable."""
    manifest = generate_synthetic_faces(30, 10, 32, SEED, root)
    split = split_dataset(manifest, 10, 10, seed=SEED)
    base = identity_latent(SEED + 1000, 0)
    by_id = manifest.by_identity()
    for ident in split.background_ids:
        for k, entry in enumerate(sorted(by_id[ident], key=lambda e: e.image_id)):
            rng = rng_for(SEED, "shared-bg", ident, k)
            dx, dy = rng.uniform(-TRANSLATION_JITTER, TRANSLATION_JITTER, 2)
            brightness = 1.0 + rng.uniform(-BRIGHTNESS_JITTER, BRIGHTNESS_JITTER)
            img = render_face(base, 32, dx, dy)
            img = np.clip(img * brightness + rng.normal(0.0, NOISE_SIGMA, img.shape), 0.0, 1.0)
            write_png(entry.path, img)
    return root


def test_criterion_08_k_anonymity_bound(cache, outdir, tmp_path_factory, verdict):
    corpus = _shared_neighbor_corpus(tmp_path_factory.mktemp("shared-bg"))
    rows = []
    for k in (2, 5, 10):
        obj = _experiment(f"c8-k{k}", "k_same_pixel", {"k": k}, {"kind": "none"},
                          protocols=("clear_baseline", "naive"))
        obj["dataset"] = {"kind": "manifest", "root": str(corpus)}
        report = _run(cache, outdir, obj)
        naive, ci_naive = _acc(report, "naive"), _ci(report, "naive")
        rows.append((k, naive, 1.0 / k + ci_naive))
    ok = all(naive <= bound for _, naive, bound in rows)
    detail = " ".join(f"k={k}: naive={naive:.2f}<=1/k+ci={bound:.2f}" for k, naive, bound in rows)
    verdict(8, ok, detail)
    assert ok


# ---------------------------------------------------------------------------
# 9: numerical core
# ---------------------------------------------------------------------------


def test_criterion_09_numerical_core(verdict):
    started = time.perf_counter()
    checks = {}

    # Gradients, on a tiny kink-free instance (see test_neural for why these
    # seeds are frozen).
    x = np.random.default_rng(106).uniform(0.1, 0.9, (8, 8, 3))
    y = np.random.default_rng(206).uniform(0.1, 0.9, (8, 8, 3))
    err_mse = ae_gradient_check(ae_init(AeHyperparams(features=2, seed=6), 8, 8), (x, y))
    err_ssim = ae_gradient_check(
        ae_init(AeHyperparams(features=2, loss="ssim", seed=6), 8, 8), (x, y))
    checks["grad_mse"] = err_mse <= 1e-4
    checks["grad_ssim"] = err_ssim <= 1e-3

    img = np.random.default_rng(3).uniform(0.0, 1.0, (17, 19, 3))
    checks["ssim_self"] = abs(metrics.ssim(img, img) - 1.0) <= 1e-12

    # Laplace scale for 1x1 cells: mean |noise| estimates the scale.
    flat = np.full((64, 64, 3), 0.5)
    noise = dp_pix(flat, epsilon=5.0, b=2.0, m=1, noise_seed=4) - flat
    checks["dp_pix_scale"] = abs(np.abs(noise).mean() / (1.0 / (2.0 * 2.0 * 5.0)) - 1.0) <= 0.10

    field = gaussian_noise_field((60, 60, 3), 200.0, noise_seed=5)
    checks["noise_scale"] = abs(field.std() / (200.0 / 255.0) - 1.0) <= 0.10

    dark = quantize(np.random.default_rng(8).uniform(0.0, 0.4, (32, 32, 3)))
    snowed = dp_snow(dark, 0.5, noise_seed=9)
    checks["snow_count"] = int(np.all(snowed == GRAY, axis=2).sum()) == round(0.5 * 32 * 32)

    samples = [np.random.default_rng(100 + i).uniform(0.0, 1.0, (8, 8, 3)) for i in range(12)]
    pca = fit_pca(samples, components=12)
    worst = max(float(np.abs(reconstruct(pca, embed(pca, s)) - s).max()) for s in samples)
    checks["pca_round_trip"] = worst <= 1e-5

    elapsed = time.perf_counter() - started
    ok = all(checks.values()) and elapsed < 120
    failed = [name for name, good in checks.items() if not good]
    verdict(9, ok, f"grad_mse={err_mse:.1e} grad_ssim={err_ssim:.1e} pca={worst:.1e} "
                   f"failed={failed or 'none'} {elapsed:.0f}s (<120s)")
    assert ok


# ---------------------------------------------------------------------------
# 10: the same root seed reproduces metric CSVs byte for byte
# ---------------------------------------------------------------------------


def test_criterion_10_reproducibility(tmp_path, verdict):
    small_dataset = {"kind": "synthetic", "identity_count": 14, "images_per_identity": 4,
                     "resolution": 16, "seed": 3}
    small_split = {"background_count": 4, "test_identity_count": 4, "seed": 3}

    def cell(name, method, params, deanon, protocols):
        return {
            "name": name, "seed": 3, "dataset": small_dataset, "split": small_split,
            "anonymizer": {"method": method, "params": params, "key": 11, "noise_seed": 11},
            "deanonymizer": deanon, "protocols": protocols,
            "pca_components": 16, "background_components": 4,
        }

    suite = {"experiments": [
        cell("perm", "block_permute", {"block_size": 4},
             {"kind": "learn_permutation", "params": {}}, ["clear_baseline", "naive", "reversal"]),
        cell("snow", "dp_snow", {"delta": 0.5},
             {"kind": "interpolate_gray", "params": {}}, ["clear_baseline", "naive", "reversal"]),
        cell("mask", "eye_mask", {}, {"kind": "none"}, ["clear_baseline", "naive", "parrot"]),
        cell("tiny-ae", "pixelate", {"size": 4},
             {"kind": "autoencoder",
              "params": {"features": 4, "loss": "mse", "learning_rate": 1e-3,
                         "batch_size": 8, "max_epochs": 6, "seed": 5}},
             ["clear_baseline", "naive", "reversal"]),
    ]}

    outputs = []
    for run in ("one", "two"):
        run_suite(suite, tmp_path / f"cache-{run}", tmp_path / f"suite-{run}")
        agg = (tmp_path / f"suite-{run}" / "aggregate.csv").read_bytes()
        cells = {obj["name"]: (tmp_path / f"suite-{run}" / obj["name"] / "metrics.csv").read_bytes()
                 for obj in suite["experiments"]}
        outputs.append((agg, cells))

    ok = outputs[0] == outputs[1]
    verdict(10, ok, f"fresh-cache reruns byte-identical={ok} "
                    f"({len(suite['experiments'])} experiments, aggregate + per-cell CSVs)")
    assert ok
