"""Evaluation: cross-part prediction consistency, linear probing on frozen
features, held-out reconstruction error and reconstruction export."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import rng
from .errors import IncompatibleCheckpoint, InvalidConfiguration
from .losses import denormalize, reconstruction_target
from .masking import SingleRandom, generate_ablation_masks, generate_partition, pair_indices
from .model import MaskedAutoencoder, patchify_array, unpatchify_array
from .train import load_model

_CONSISTENCY_TAG = 0xC0C0
_ACROSS_TAG = 0xC0C1
_RECON_TAG = 0xEC0


def _resolve_model(model, cfg=None):
    if isinstance(model, MaskedAutoencoder):
        return model
    return load_model(model, cfg)[0]


def _images(dataset):
    return dataset.images if hasattr(dataset, "images") else np.asarray(dataset, dtype=np.float64)


def _check_compatible(model, images):
    mc = model.config
    if images.shape[1:] != (mc.image_size, mc.image_size, mc.channels):
        raise IncompatibleCheckpoint(
            f"images of shape {images.shape[1:]} do not fit the model "
            f"(N={mc.n_patches}, S={mc.patch_dim} from {mc.image_size}x{mc.image_size}x{mc.channels}, P={mc.patch_size})"
        )


def _batched(n, size):
    for start in range(0, n, size):
        yield np.arange(start, min(start + size, n))


@dataclass
class ConsistencyReport:
    mean_pairwise_l1: float
    per_position_variance: float
    across_seed_l1: float
    n_images: int
    n_draws: int

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def measure_consistency(model, dataset, k_parts=4, n_images=None, seed=0, n_draws=2, batch_size=64, cfg=None):
    """Disagreement between parts that predict the same positions.

    For each image one partition is drawn; ``mean_pairwise_l1`` averages
    ``|pred_i - pred_j|`` over every pair's shared masked positions and
    feature dims, ``per_position_variance`` is the variance across the K-1
    predictions of each position. ``across_seed_l1`` compares part ``i`` of
    ``n_draws`` independent partitions on commonly masked positions.
    """
    if k_parts < 3:
        raise InvalidConfiguration(f"consistency needs k_parts >= 3, got {k_parts}")
    model = _resolve_model(model, cfg)
    images = _images(dataset)
    if n_images is not None:
        images = images[:n_images]
    _check_compatible(model, images)
    n_img = images.shape[0]
    patches = patchify_array(images, model.config.patch_size)
    n = model.n_patches
    ii, jj = pair_indices(k_parts)

    pair_sum, var_sum, across_sum = 0.0, 0.0, 0.0
    with ad.no_grad():
        for idx in _batched(n_img, batch_size):
            draws = []
            for r in range(max(n_draws, 1)):
                parts = [generate_partition(n, k_parts, rng.hash_seed(seed, _CONSISTENCY_TAG, r, int(i))) for i in idx]
                visible = [np.stack([p.parts[k] for p in parts]) for k in range(k_parts)]
                masks = np.stack([p.masks for p in parts]).astype(np.float64)  # [B, K, N]
                preds = model.forward_draws(patches[idx], visible).data  # [B, K, N, S]
                draws.append((preds, masks))

            preds, masks = draws[0]
            ov = masks[:, ii] * masks[:, jj]  # [B, P, N]
            diff = np.abs(preds[:, ii] - preds[:, jj]).mean(axis=-1)
            per_pair = (diff * ov).sum(axis=-1) / ov.sum(axis=-1)
            pair_sum += per_pair.mean(axis=1).sum()

            # population variance over the K-1 predictions of each position,
            # via pairwise differences so identical predictions give exactly 0
            cnt = masks.sum(axis=1)  # [B, N] = K-1 everywhere
            sq = ((preds[:, ii] - preds[:, jj]) ** 2 * ov[..., None]).sum(axis=1)
            var = sq / (cnt ** 2)[..., None]
            var_sum += var.mean(axis=(1, 2)).sum()

            if n_draws >= 2:
                acc = []
                for a in range(n_draws):
                    for b in range(a + 1, n_draws):
                        (pa, ma), (pb, mb) = draws[a], draws[b]
                        both = ma * mb  # [B, K, N]
                        d = np.abs(pa - pb).mean(axis=-1)
                        acc.append(((d * both).sum(axis=-1) / np.maximum(both.sum(axis=-1), 1)).mean(axis=1))
                across_sum += np.mean(acc, axis=0).sum()

    return ConsistencyReport(
        float(pair_sum / n_img),
        float(var_sum / n_img),
        float(across_sum / n_img) if n_draws >= 2 else 0.0,
        n_img,
        n_draws,
    )


def pooled_features(model, images, batch_size=128):
    """Mean over patches of the unmasked encoder output, ``[n, D_enc]``."""
    patches = patchify_array(images, model.config.patch_size)
    out = []
    with ad.no_grad():
        for idx in _batched(patches.shape[0], batch_size):
            out.append(model.encode_features(patches[idx]).data.mean(axis=-2))
    return np.concatenate(out, axis=0)


@dataclass
class ProbeResult:
    accuracy: float
    train_accuracy: float
    losses: list


def linear_probe(model, train_set, test_set, epochs=50, lr=1e-2, seed=0, cfg=None) -> ProbeResult:
    """Softmax-regression probe on frozen, standardised, mean-pooled encoder features.

    Full-batch gradient descent; the standardisation statistics come from the
    training split only.
    """
    model = _resolve_model(model, cfg)
    if train_set.header.n_classes != test_set.header.n_classes:
        raise InvalidConfiguration(
            f"class count mismatch: train has {train_set.header.n_classes}, test has {test_set.header.n_classes}"
        )
    n_classes = train_set.header.n_classes
    for ds in (train_set, test_set):
        _check_compatible(model, ds.images)
    f_train = pooled_features(model, train_set.images)
    f_test = pooled_features(model, test_set.images)
    return fit_probe(f_train, train_set.labels, f_test, test_set.labels, n_classes, epochs, lr, seed)


def fit_probe(f_train, y_train, f_test, y_test, n_classes, epochs=50, lr=1e-2, seed=0) -> ProbeResult:
    mu = f_train.mean(axis=0)
    sd = f_train.std(axis=0) + 1e-6
    x_train = (f_train - mu) / sd
    x_test = (f_test - mu) / sd
    d = x_train.shape[1]
    g = rng.stream(seed, 0x9808E)
    w = ad.parameter(g.normal(0.0, 0.01, size=(d, n_classes)))
    b = ad.parameter(np.zeros(n_classes))
    onehot = np.eye(n_classes)[np.asarray(y_train)]
    losses = []
    for _ in range(epochs):
        logp = ad.log_softmax(ad.linear(x_train, w, b))
        loss = -ad.mean(ad.sum_(ad.mul(logp, onehot), axis=-1))
        loss.backward()
        w.data -= lr * w.grad
        b.data -= lr * b.grad
        losses.append(loss.item())

    def acc(x, y):
        return float(np.mean(np.argmax(x @ w.data + b.data, axis=1) == np.asarray(y)))

    return ProbeResult(acc(x_test, y_test), acc(x_train, y_train), losses)


def reconstruction_error(model, dataset, ratio=0.75, seed=0, normalize_target=True, batch_size=64, cfg=None):
    """Masked-patch MSE of plain random masking at ``ratio`` on held-out images."""
    model = _resolve_model(model, cfg)
    images = _images(dataset)
    _check_compatible(model, images)
    patches = patchify_array(images, model.config.patch_size)
    target = reconstruction_target(patches, normalize_target)
    n = model.n_patches
    total = 0.0
    with ad.no_grad():
        for idx in _batched(patches.shape[0], batch_size):
            draws = [generate_ablation_masks(SingleRandom(ratio), n, rng.hash_seed(seed, _RECON_TAG, int(i)))[0] for i in idx]
            vis = np.stack([d[0] for d in draws])
            mask = np.stack([d[1] for d in draws]).astype(np.float64)
            pred = model.forward_visible(patches[idx], vis).data
            err = ((pred - target[idx]) ** 2).mean(axis=-1)
            total += ((err * mask).sum(axis=-1) / mask.sum(axis=-1)).sum()
    return float(total / patches.shape[0])


# ---------------------------------------------------------------------------
# Reconstruction export


def write_ppm(path, image_u8):
    img = np.asarray(image_u8, dtype=np.uint8)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[-1] == 1:
        img = np.repeat(img, 3, axis=-1)
    if img.shape[-1] != 3:
        raise InvalidConfiguration(f"PPM output needs 1 or 3 channels, got {img.shape[-1]}")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_ppm(path):
    """Parse a binary P6 file into ``uint8 [H, W, 3]``."""
    blob = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    pos += 1
    if tokens[0] != b"P6":
        raise InvalidConfiguration(f"not a P6 file: magic {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise InvalidConfiguration(f"unsupported maxval {maxval}")
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    if len(blob) - pos != w * h * 3:
        raise InvalidConfiguration(f"P6 payload is {len(blob) - pos} bytes, expected {w * h * 3}")
    return data.reshape(h, w, 3)


def _to_u8(img):
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def reconstruct(model, image, k_parts=4, seed=0, out_dir=None, normalize_target=True, cfg=None):
    """Per-part reconstructions of one image.

    ``image`` is ``uint8 [H, W, C]`` (or floats in [0, 1]). Each composite
    keeps the part's visible patches from the source and fills masked
    positions with the (de-normalised) prediction. Returns a dict with the
    composite and prediction images and, when ``out_dir`` is set, the paths
    of the written P6 files.
    """
    model = _resolve_model(model, cfg)
    image = np.asarray(image)
    src_u8 = image if image.dtype == np.uint8 else _to_u8(image)
    src = src_u8.astype(np.float64) / 255.0
    _check_compatible(model, src[None])
    mc = model.config
    shape = (mc.image_size, mc.image_size, mc.channels)
    patches = patchify_array(src, mc.patch_size)
    src_patches_u8 = patchify_array(src_u8, mc.patch_size)
    part = generate_partition(model.n_patches, k_parts, seed)
    with ad.no_grad():
        preds = model.forward_draws(patches[None], [p[None] for p in part.parts]).data[0]
    if normalize_target:
        preds = denormalize(preds, patches[None])

    composites, predictions, paths = [], [], []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_ppm(out / "source.ppm", src_u8)
    for i in range(k_parts):
        pred_u8 = _to_u8(preds[i])
        comp = np.where(part.masks[i][:, None].astype(bool), pred_u8, src_patches_u8)
        composites.append(unpatchify_array(comp, shape, mc.patch_size))
        predictions.append(unpatchify_array(pred_u8, shape, mc.patch_size))
        if out is not None:
            for kind, img in (("composite", composites[-1]), ("prediction", predictions[-1])):
                p = out / f"part{i}_{kind}.ppm"
                write_ppm(p, img)
                paths.append(p)
    return {"partition": part, "composites": composites, "predictions": predictions, "paths": paths}
