"""Trainable de-anonymization autoencoder.

Two strided-pool conv layers, an optional fully connected bottleneck (the
component that lets the model undo global pixel rearrangements), and a
transposed-conv decoder.  Forward, backward, and the Adam updates are all
plain numpy; training is bitwise deterministic for a fixed seed and data
order.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nn
from .metrics import ssim_grad
from .seeds import rng_for

MAGIC = b"ANAE"
FORMAT_VERSION = 1

LOSSES = ("ssim", "mse", "mae")


@dataclass(frozen=True)
class AeHyperparams:
    features: int = 16
    with_linear: bool = True
    loss: str = "ssim"
    learning_rate: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 200
    plateau_patience: int = 5
    plateau_factor: float = 0.75
    early_stop_patience: int = 20
    leaky_slope: float = 0.01
    validation_fraction: float = 0.1
    seed: int = 0
    linear_param_cap: int = 2**28

    def validate(self) -> "AeHyperparams":
        if self.features < 1:
            raise ValueError(f"features must be >= 1, got {self.features}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss}")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("learning_rate, batch_size, and max_epochs must be positive")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError(f"validation_fraction must lie in (0, 1), got {self.validation_fraction}")
        return self


@dataclass
class AutoencoderModel:
    hyper: AeHyperparams
    height: int
    width: int
    weights: dict[str, np.ndarray]


@dataclass(frozen=True)
class TrainingLog:
    # rows of (epoch, train_loss, val_loss, lr)
    rows: tuple[tuple[int, float, float, float], ...]
    best_epoch: int
    best_val_loss: float

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,lr"]
        for epoch, train_loss, val_loss, lr in self.rows:
            lines.append(f"{epoch},{train_loss!r},{val_loss!r},{lr!r}")
        return "\n".join(lines) + "\n"


def _weight_shapes(hyper: AeHyperparams, height: int, width: int) -> list[tuple[str, tuple[int, ...]]]:
    f = hyper.features
    d = f * (height // 4) * (width // 4)
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("enc1_w", (f, 3, 3, 3)),
        ("enc1_b", (f,)),
        ("enc2_w", (f, f, 3, 3)),
        ("enc2_b", (f,)),
    ]
    if hyper.with_linear:
        shapes += [("lin_w", (d, d)), ("lin_b", (d,))]
    shapes += [
        ("dec1_w", (f, f, 4, 4)),
        ("dec1_b", (f,)),
        ("dec2_w", (f, f, 4, 4)),
        ("dec2_b", (f,)),
        ("out_w", (3, f, 3, 3)),
        ("out_b", (3,)),
    ]
    return shapes


def ae_init(hyper: AeHyperparams, height: int, width: int) -> AutoencoderModel:
    """Seeded He-style uniform init (bound sqrt(6 / fan_in)); zero biases."""
    hyper.validate()
    if height % 4 or width % 4 or height < 8 or width < 8:
        raise ValueError(f"resolution must be >= 8 and divisible by 4, got {height}x{width}")
    if hyper.with_linear:
        d = hyper.features * (height // 4) * (width // 4)
        if d * d + d > hyper.linear_param_cap:
            raise ValueError(
                f"linear layer would need {d * d + d} parameters, cap is {hyper.linear_param_cap}"
            )
    rng = rng_for(hyper.seed, "ae-init")
    weights: dict[str, np.ndarray] = {}
    for name, shape in _weight_shapes(hyper, height, width):
        if name.endswith("_b"):
            weights[name] = np.zeros(shape)
            continue
        if name == "lin_w":
            fan_in = shape[0]
        elif name.startswith("dec"):
            fan_in = shape[0] * shape[2] * shape[3]  # (Ci, Co, KH, KW)
        else:
            fan_in = shape[1] * shape[2] * shape[3]  # (Co, Ci, KH, KW)
        bound = np.sqrt(6.0 / fan_in)
        weights[name] = rng.uniform(-bound, bound, shape)
    return AutoencoderModel(hyper, height, width, weights)


def parameter_count(model: AutoencoderModel) -> int:
    return sum(w.size for w in model.weights.values())


def ae_forward(model: AutoencoderModel, x: np.ndarray):
    """x is (N, 3, H, W) in [0, 1]; returns (reconstruction, cache)."""
    w = model.weights
    slope = model.hyper.leaky_slope
    cache: list = []

    h1, c = nn.conv2d_forward(x, w["enc1_w"], w["enc1_b"])
    cache.append(("conv", "enc1", c))
    h1, c = nn.leaky_relu_forward(h1, slope)
    cache.append(("lrelu", None, c))
    h1, c = nn.maxpool2_forward(h1)
    cache.append(("pool", None, c))

    h2, c = nn.conv2d_forward(h1, w["enc2_w"], w["enc2_b"])
    cache.append(("conv", "enc2", c))
    h2, c = nn.leaky_relu_forward(h2, slope)
    cache.append(("lrelu", None, c))
    h2, c = nn.maxpool2_forward(h2)
    cache.append(("pool", None, c))

    if model.hyper.with_linear:
        shape = h2.shape
        flat = h2.reshape(shape[0], -1)
        z, c = nn.linear_forward(flat, w["lin_w"], w["lin_b"])
        cache.append(("linear", "lin", c))
        z, c = nn.leaky_relu_forward(z, slope)
        cache.append(("lrelu_lin", shape, c))
        h2 = z.reshape(shape)

    d1, c = nn.tconv2d_forward(h2, w["dec1_w"], w["dec1_b"])
    cache.append(("tconv", "dec1", c))
    d1, c = nn.leaky_relu_forward(d1, slope)
    cache.append(("lrelu", None, c))

    d2, c = nn.tconv2d_forward(d1, w["dec2_w"], w["dec2_b"])
    cache.append(("tconv", "dec2", c))
    d2, c = nn.leaky_relu_forward(d2, slope)
    cache.append(("lrelu", None, c))

    y, c = nn.conv2d_forward(d2, w["out_w"], w["out_b"])
    cache.append(("conv", "out", c))
    y, c = nn.sigmoid_forward(y)
    cache.append(("sigmoid", None, c))
    return y, cache


def ae_backward(model: AutoencoderModel, cache: list, gy: np.ndarray) -> dict[str, np.ndarray]:
    grads: dict[str, np.ndarray] = {}
    g = gy
    for kind, name, c in reversed(cache):
        if kind == "sigmoid":
            g = nn.sigmoid_backward(g, c)
        elif kind == "lrelu":
            g = nn.leaky_relu_backward(g, c)
        elif kind == "lrelu_lin":
            g = nn.leaky_relu_backward(g.reshape(g.shape[0], -1), c)
        elif kind == "conv":
            g, gw, gb = nn.conv2d_backward(g, c)
            grads[f"{name}_w"], grads[f"{name}_b"] = gw, gb
        elif kind == "tconv":
            g, gw, gb = nn.tconv2d_backward(g, c)
            grads[f"{name}_w"], grads[f"{name}_b"] = gw, gb
        elif kind == "linear":
            g, gw, gb = nn.linear_backward(g, c)
            grads[f"{name}_w"], grads[f"{name}_b"] = gw, gb
            # The next cache entry upstream is the pre-flatten pool output.
            n = g.shape[0]
            f = model.hyper.features
            g = g.reshape(n, f, model.height // 4, model.width // 4)
        elif kind == "pool":
            g = nn.maxpool2_backward(g, c)
        else:
            raise AssertionError(kind)
    return grads


def loss_and_grad(kind: str, pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if kind == "mse":
        diff = pred - target
        return float(np.mean(diff * diff)), (2.0 / diff.size) * diff
    if kind == "mae":
        diff = pred - target
        return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size
    if kind == "ssim":
        value, grad = ssim_grad(pred, target)
        return 1.0 - value, -grad
    raise ValueError(f"unknown loss: {kind}")


def _to_batch(images: list[np.ndarray]) -> np.ndarray:
    return np.stack([np.moveaxis(np.asarray(im, dtype=np.float64), -1, 0) for im in images])


def ae_apply_batch(model: AutoencoderModel, images: list[np.ndarray]) -> list[np.ndarray]:
    if not images:
        return []
    out, _ = ae_forward(model, _to_batch(images))
    return [np.moveaxis(img, 0, -1) for img in out]


def ae_apply(model: AutoencoderModel, img: np.ndarray) -> np.ndarray:
    """De-anonymize one (H, W, 3) image."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape != (model.height, model.width, 3):
        raise ValueError(f"expected {(model.height, model.width, 3)}, got {img.shape}")
    return ae_apply_batch(model, [img])[0]


@dataclass
class _Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, weights: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name in weights:
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * (g * g)
            mhat = self.m[name] / (1 - self.beta1**self.t)
            vhat = self.v[name] / (1 - self.beta2**self.t)
            weights[name] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _validation_split(
    n_pairs: int, identities: list[str] | None, fraction: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Seeded split into (train_idx, val_idx); identity-disjoint when labels
    are available for more than one identity."""
    rng = rng_for(seed, "ae-val-split")
    if identities is not None and len(identities) == n_pairs and len(set(identities)) >= 2:
        unique = sorted(set(identities))
        order = [unique[i] for i in rng.permutation(len(unique))]
        n_val = max(1, int(np.ceil(fraction * len(unique))))
        if n_val >= len(unique):
            n_val = len(unique) - 1
        val_ids = set(order[:n_val])
        idx = np.arange(n_pairs)
        mask = np.array([ident in val_ids for ident in identities])
        return idx[~mask], idx[mask]
    order = rng.permutation(n_pairs)
    n_val = max(1, int(np.ceil(fraction * n_pairs)))
    if n_val >= n_pairs:
        n_val = n_pairs - 1
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _dataset_loss(model: AutoencoderModel, x: np.ndarray, y: np.ndarray, batch: int) -> float:
    total = 0.0
    for start in range(0, x.shape[0], batch):
        xb = x[start : start + batch]
        yb = y[start : start + batch]
        pred, _ = ae_forward(model, xb)
        value, _ = loss_and_grad(model.hyper.loss, pred, yb)
        total += value * xb.shape[0]
    return total / x.shape[0]


def ae_train(
    pairs: list[tuple[np.ndarray, np.ndarray]],
    hyper: AeHyperparams,
    identities: list[str] | None = None,
) -> tuple[AutoencoderModel, TrainingLog]:
    """Train on (anonymized, clear) pairs; returns the weights of the best
    validation epoch plus the per-epoch log.

    The validation split (``validation_fraction``, default 10%) is identity
    disjoint when ``identities`` labels the pairs.  The learning rate shrinks
    by ``plateau_factor`` after ``plateau_patience`` epochs without validation
    improvement, and training stops early after ``early_stop_patience``.
    """
    hyper.validate()
    if len(pairs) < 2:
        raise ValueError(f"need at least two training pairs, got {len(pairs)}")
    anon = _to_batch([p[0] for p in pairs])
    clear = _to_batch([p[1] for p in pairs])
    if anon.shape != clear.shape:
        raise ValueError(f"pair shape mismatch: {anon.shape} vs {clear.shape}")
    height, width = anon.shape[2], anon.shape[3]

    model = ae_init(hyper, height, width)
    train_idx, val_idx = _validation_split(
        len(pairs), identities, hyper.validation_fraction, hyper.seed
    )
    x_train, y_train = anon[train_idx], clear[train_idx]
    x_val, y_val = anon[val_idx], clear[val_idx]

    optimizer = _Adam(lr=hyper.learning_rate)
    best_val = np.inf
    best_weights = {k: v.copy() for k, v in model.weights.items()}
    best_epoch = 0
    plateau = 0
    stale = 0
    rows: list[tuple[int, float, float, float]] = []

    for epoch in range(1, hyper.max_epochs + 1):
        order = rng_for(hyper.seed, "ae-epoch", epoch).permutation(x_train.shape[0])
        total = 0.0
        for start in range(0, order.size, hyper.batch_size):
            batch = order[start : start + hyper.batch_size]
            xb, yb = x_train[batch], y_train[batch]
            pred, cache = ae_forward(model, xb)
            value, gpred = loss_and_grad(hyper.loss, pred, yb)
            if not np.isfinite(value):
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch}, batch start {start}"
                )
            grads = ae_backward(model, cache, gpred)
            optimizer.step(model.weights, grads)
            total += value * xb.shape[0]
        train_loss = total / x_train.shape[0]
        val_loss = _dataset_loss(model, x_val, y_val, hyper.batch_size)
        if not np.isfinite(val_loss):
            raise RuntimeError(f"non-finite validation loss at epoch {epoch}")
        rows.append((epoch, train_loss, val_loss, optimizer.lr))

        if val_loss < best_val:
            best_val = val_loss
            best_weights = {k: v.copy() for k, v in model.weights.items()}
            best_epoch = epoch
            plateau = 0
            stale = 0
        else:
            plateau += 1
            stale += 1
            if plateau >= hyper.plateau_patience:
                optimizer.lr *= hyper.plateau_factor
                plateau = 0
            if stale >= hyper.early_stop_patience:
                break

    model.weights = best_weights
    return model, TrainingLog(tuple(rows), best_epoch, float(best_val))


def ae_gradient_check(
    model: AutoencoderModel,
    pair: tuple[np.ndarray, np.ndarray],
    h: float = 1e-4,
) -> float:
    """Max relative error between analytic and central-difference gradients
    over every weight entry.  Only sensible for tiny models; cost is two
    forward passes per parameter."""
    x = _to_batch([pair[0]])
    y = _to_batch([pair[1]])
    pred, cache = ae_forward(model, x)
    _, gpred = loss_and_grad(model.hyper.loss, pred, y)
    analytic = ae_backward(model, cache, gpred)

    def loss_now() -> float:
        p, _ = ae_forward(model, x)
        value, _ = loss_and_grad(model.hyper.loss, p, y)
        return value

    worst = 0.0
    for name, w in model.weights.items():
        flat = w.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = loss_now()
            flat[i] = keep - h
            down = loss_now()
            flat[i] = keep
            numeric = (up - down) / (2.0 * h)
            err = abs(ga[i] - numeric) / max(abs(ga[i]), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Checkpoints: versioned binary, JSON header + little-endian float32 blobs
# ---------------------------------------------------------------------------


def save_checkpoint(model: AutoencoderModel, path) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "hyper": asdict(model.hyper),
        "height": model.height,
        "width": model.width,
        "weights": [
            {"name": name, "shape": list(model.weights[name].shape)}
            for name, _ in _weight_shapes(model.hyper, model.height, model.width)
        ],
    }
    blob = io.BytesIO()
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blob.write(MAGIC)
    blob.write(struct.pack("<I", FORMAT_VERSION))
    blob.write(struct.pack("<Q", len(head)))
    blob.write(head)
    for entry in header["weights"]:
        blob.write(model.weights[entry["name"]].astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(blob.getvalue())


def load_checkpoint(path) -> AutoencoderModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError(f"not a model checkpoint: {path}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<Q", data, 8)
    header = json.loads(data[16 : 16 + header_len].decode("utf-8"))
    hyper = AeHyperparams(**header["hyper"])
    offset = 16 + header_len
    weights: dict[str, np.ndarray] = {}
    for entry in header["weights"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        weights[entry["name"]] = arr.astype(np.float64).reshape(shape)
        offset += count * 4
    return AutoencoderModel(hyper, header["height"], header["width"], weights)


def quantize_weights(model: AutoencoderModel) -> AutoencoderModel:
    """Round weights through the checkpoint's float32 grid (what a save/load
    round trip produces) without touching disk."""
    weights = {k: v.astype("<f4").astype(np.float64) for k, v in model.weights.items()}
    return AutoencoderModel(replace(model.hyper), model.height, model.width, weights)
