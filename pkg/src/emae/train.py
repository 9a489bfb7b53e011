"""Pretraining loop: AdamW with decoupled weight decay, warmup + cosine schedule,
per-image mask draws, JSONL metrics and EMAECKPT checkpoints."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import data as data_io
from . import rng
from .errors import InvalidConfiguration, NumericAbort
from .losses import LossMode, reconstruction_target, total_loss
from .masking import generate_ablation_masks, parse_strategy
from .model import MaskedAutoencoder, ModelConfig, infer_config, patchify_array


@dataclass
class TrainConfig:
    k_parts: int = 4
    batch_size: int = 64
    epochs: int = 30
    warmup_epochs: int = 2
    base_lr: float = 1.5e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    seed: int = 0
    loss_mode: str = "full"
    normalize_target: bool = True
    deterministic: bool = True
    mask_strategy: str = "parallel"
    strategy_times: int = 4
    strategy_ratio: float = 0.0  # 0 selects the strategy's default ratio
    whole_weight: float = 1.0
    consistency_weight: float = 1.0
    grad_clip: float = 0.0  # 0 disables clipping
    dataset: str = ""
    checkpoint_interval: int = 0  # in steps; 0 writes only the final checkpoint
    max_steps: int = 0  # 0 runs the full schedule
    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    enc_dim: int = 64
    enc_depth: int = 2
    enc_heads: int = 4
    dec_dim: int = 32
    dec_depth: int = 1
    dec_heads: int = 2
    mlp_ratio: int = 4

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.epochs < 1:
            raise InvalidConfiguration(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise InvalidConfiguration(
                f"warmup_epochs={self.warmup_epochs} must be in [0, epochs={self.epochs})"
            )
        if self.base_lr <= 0:
            raise InvalidConfiguration(f"base_lr must be > 0, got {self.base_lr}")
        for name in ("beta1", "beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise InvalidConfiguration(f"{name} must be in (0, 1), got {getattr(self, name)}")
        if self.batch_size < 1:
            raise InvalidConfiguration(f"batch_size must be >= 1, got {self.batch_size}")
        LossMode.parse(self.loss_mode)
        self.strategy()
        self.model_config()

    def strategy(self):
        ratio = self.strategy_ratio if self.strategy_ratio > 0 else None
        return parse_strategy(self.mask_strategy, self.k_parts, self.strategy_times, ratio)

    def model_config(self) -> ModelConfig:
        keys = ModelConfig.field_names()
        return ModelConfig(**{k: getattr(self, k) for k in keys})

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    # -- text form -------------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> int:
        return int.from_bytes(hashlib.blake2b(self.to_text().encode(), digest_size=8).digest(), "little")

    @classmethod
    def from_mapping(cls, values: dict):
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.strip().replace("-", "_")
            if key not in known:
                raise InvalidConfiguration(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw, type(known[key].default))
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str, **overrides):
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidConfiguration(f"config line {lineno}: expected 'key = value', got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
        values.update(overrides)
        return cls.from_mapping(values)

    @classmethod
    def from_file(cls, path, **overrides):
        return cls.from_text(Path(path).read_text(), **overrides)


def _coerce(key, raw, typ):
    if isinstance(raw, typ) and not (typ is int and isinstance(raw, bool)):
        return raw
    s = str(raw).strip()
    try:
        if typ is bool:
            low = s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if typ is int:
            return int(s)
        if typ is float:
            return float(s)
    except ValueError:
        raise InvalidConfiguration(f"config key {key!r}: cannot parse {s!r} as {typ.__name__}") from None
    return s


# ---------------------------------------------------------------------------
# Schedule and optimizer


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warmup from 0 to ``base_lr``, then half-cosine decay to 0 at the last step."""
    warmup = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warmup:
        return cfg.base_lr * step / warmup
    progress = min((step - warmup) / max(total - warmup, 1), 1.0)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def to_table(self):
        out = {}
        for name in self.m:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
        return out

    @classmethod
    def from_table(cls, table, step):
        m = {k[2:]: v for k, v in table.items() if k.startswith("m/")}
        v = {k[2:]: val for k, val in table.items() if k.startswith("v/")}
        return cls(m, v, step)


def optimizer_step(params, grads, state: OptimState, lr, cfg: TrainConfig, no_decay=()):
    """One AdamW update, in place on the arrays in ``params``.

    ``params`` maps names to float arrays; ``grads`` maps the same names to
    gradients (``None`` counts as zero). Weight decay is applied as
    ``p *= 1 - lr*wd`` before the adaptive step, except for names in ``no_decay``.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericAbort(f"non-finite gradient in parameter {name!r}", name)
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if cfg.weight_decay and name not in no_decay:
            p *= 1.0 - lr * cfg.weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
    return params, state


# ---------------------------------------------------------------------------
# Training loop


METRIC_FIELDS = ("step", "epoch", "lr", "l_whole", "l_consistency", "l_total", "wall_ms")


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    lr: float
    l_whole: float
    l_consistency: float
    l_total: float
    wall_ms: float

    def to_json(self):
        return json.dumps({k: getattr(self, k) for k in METRIC_FIELDS})


@dataclass(eq=False)
class TrainResult:
    model: MaskedAutoencoder
    state: OptimState
    metrics: list
    run_dir: Path | None
    checkpoint_path: Path | None
    patch_embeds_per_image: list  # encoder patch embeddings per image, per step


def draw_batch_masks(strategy, n_patches, seed, epoch, indices):
    """Visible index sets ``[B, T_d]`` per draw and masks ``[B, D, N]`` for a batch."""
    per_image = [generate_ablation_masks(strategy, n_patches, rng.hash_seed(seed, epoch, int(i))) for i in indices]
    n_draws = len(per_image[0])
    visible = [np.stack([img[d][0] for img in per_image]) for d in range(n_draws)]
    masks = np.stack([np.stack([d[1] for d in img]) for img in per_image])
    return visible, masks


def steps_per_epoch(n_images, batch_size):
    return -(-n_images // batch_size)


def no_decay_names(params):
    return {name for name, p in params.items() if p.ndim < 2}


def make_checkpoint(model, state, cfg):
    return ckpt_io.Checkpoint(model.state_arrays(), state.to_table(), state.step, cfg.config_hash())


def run_dir_for(cfg: TrainConfig, root) -> Path:
    return Path(root) / f"run-{cfg.config_hash():016x}"


def _as_dataset(dataset, cfg):
    if dataset is None:
        if not cfg.dataset:
            raise InvalidConfiguration("no dataset given")
        dataset = cfg.dataset
    if isinstance(dataset, (str, os.PathLike)):
        dataset = data_io.load(dataset)
    return dataset


def train(cfg: TrainConfig, dataset=None, run_dir=None, model=None, log=None) -> TrainResult:
    """Pretrain a masked autoencoder on ``dataset`` (a ``Dataset`` or a file path).

    With ``run_dir`` set, writes ``config.txt``, ``metrics.jsonl`` and
    checkpoints there. ``log`` is an optional callable receiving each record.
    """
    ds = _as_dataset(dataset, cfg)
    mcfg = cfg.model_config()
    h = ds.header
    if (h.height, h.width, h.channels) != (mcfg.image_size, mcfg.image_size, mcfg.channels):
        raise InvalidConfiguration(
            f"dataset images are {h.height}x{h.width}x{h.channels}, model expects "
            f"{mcfg.image_size}x{mcfg.image_size}x{mcfg.channels}"
        )
    model = model or MaskedAutoencoder(mcfg, seed=cfg.seed)
    strategy = cfg.strategy()
    mode = LossMode.parse(cfg.loss_mode)
    state = OptimState()
    skip_decay = no_decay_names(model.params)
    patches_all = patchify_array(ds.images, mcfg.patch_size)
    targets_all = reconstruction_target(patches_all, cfg.normalize_target)
    n = len(ds)
    spe = steps_per_epoch(n, cfg.batch_size)
    total_steps = cfg.epochs * spe
    if cfg.max_steps:
        total_steps = min(total_steps, cfg.max_steps)

    metrics, utilisation = [], []
    metrics_fh = None
    ckpt_path = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.txt").write_text(cfg.to_text())
        metrics_fh = open(run_dir / "metrics.jsonl", "w")

    try:
        step = 0
        for epoch in range(cfg.epochs):
            order = rng.stream(cfg.seed, 0x0BD, epoch).permutation(n)
            for b in range(spe):
                if step >= total_steps:
                    break
                t0 = time.perf_counter()
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                visible, masks = draw_batch_masks(strategy, mcfg.n_patches, cfg.seed, epoch, idx)
                before = model.patch_embed_count
                preds = model.forward_draws(patches_all[idx], visible)
                utilisation.append((model.patch_embed_count - before) / len(idx))
                br = total_loss(
                    preds, targets_all[idx], masks, mode, cfg.whole_weight, cfg.consistency_weight
                )
                if not np.isfinite(br.l_total):
                    raise NumericAbort(f"non-finite loss at step {step + 1}")
                lr = lr_at(step, cfg, spe)
                br.objective.backward()
                grads = {k: p.grad for k, p in model.params.items()}
                if cfg.grad_clip > 0:
                    _clip(grads, cfg.grad_clip)
                optimizer_step(model.state_arrays(), grads, state, lr, cfg, skip_decay)
                step += 1
                wall = 0.0 if cfg.deterministic else (time.perf_counter() - t0) * 1e3
                rec = MetricsRecord(step, epoch, lr, br.l_whole, br.l_consistency, br.l_total, wall)
                metrics.append(rec)
                if metrics_fh:
                    metrics_fh.write(rec.to_json() + "\n")
                if log:
                    log(rec)
                if run_dir is not None and cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
                    ckpt_io.save(run_dir / f"ckpt-{step:06d}.emaeckpt", make_checkpoint(model, state, cfg))
        if run_dir is not None:
            ckpt_path = run_dir / "final.emaeckpt"
            ckpt_io.save(ckpt_path, make_checkpoint(model, state, cfg))
    except NumericAbort:
        # parameters are untouched by the failing step, so they are the last good state
        if run_dir is not None:
            ckpt_io.save(run_dir / "last-good.emaeckpt", make_checkpoint(model, state, cfg))
        raise
    finally:
        if metrics_fh:
            metrics_fh.close()
    return TrainResult(model, state, metrics, run_dir, ckpt_path, utilisation)


def _clip(grads, max_norm):
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values() if g is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            if g is not None:
                g *= scale


def load_model(path, cfg: TrainConfig | None = None):
    """Rebuild a model (and optimizer state) from a checkpoint file."""
    ck = ckpt_io.load(path)
    kw = {}
    if cfg is not None:
        mc = cfg.model_config()
        kw = dict(image_size=mc.image_size, channels=mc.channels, patch_size=mc.patch_size,
                  enc_heads=mc.enc_heads, dec_heads=mc.dec_heads)
    mcfg = infer_config(ck.params, **kw)
    model = MaskedAutoencoder.from_arrays(mcfg, ck.params)
    return model, OptimState.from_table(ck.optimizer, ck.step), ck
