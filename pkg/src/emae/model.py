"""Patchification and the asymmetric ViT encoder-decoder.

The encoder sees only the visible patches of one mask draw (each with the
positional embedding of its absolute patch index). The decoder receives the
encoded tokens scattered back to their positions, a shared learned mask token
everywhere else, and predicts pixel values for all ``N`` positions.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy.stats import truncnorm

from . import autodiff as ad
from . import rng
from .autodiff import Tensor
from .errors import InvalidConfiguration, ShapeError
from .masking import MaskPartition


# ---------------------------------------------------------------------------
# Patches


@dataclass(frozen=True, eq=False)
class PatchGrid:
    image_size: tuple  # (H, W, C)
    patch_size: int
    patches: np.ndarray  # [N, S]

    @property
    def n_patches(self):
        return self.patches.shape[0]

    @property
    def patch_dim(self):
        return self.patches.shape[1]

    @property
    def grid_shape(self):
        h, w, _ = self.image_size
        return h // self.patch_size, w // self.patch_size


def patchify_array(images, patch_size):
    """``[..., H, W, C] -> [..., N, P*P*C]`` in raster order of the patch grid."""
    images = np.asarray(images)
    *lead, h, w, c = images.shape
    p = patch_size
    if p <= 0 or h % p or w % p:
        raise InvalidConfiguration(f"patch size {p} does not divide image {h}x{w}")
    gh, gw = h // p, w // p
    x = images.reshape(*lead, gh, p, gw, p, c)
    x = np.moveaxis(x, -4, -3)  # [..., gh, gw, p, p, c]
    return x.reshape(*lead, gh * gw, p * p * c)


def unpatchify_array(patches, image_size, patch_size):
    h, w, c = image_size
    p = patch_size
    gh, gw = h // p, w // p
    patches = np.asarray(patches)
    *lead, n, s = patches.shape
    if n != gh * gw or s != p * p * c:
        raise ShapeError(f"patches of shape {patches.shape} do not match image {image_size}, P={p}")
    x = patches.reshape(*lead, gh, gw, p, p, c)
    x = np.moveaxis(x, -3, -4)  # [..., gh, p, gw, p, c]
    return x.reshape(*lead, h, w, c)


def patchify(image, patch_size) -> PatchGrid:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    return PatchGrid(tuple(image.shape), patch_size, patchify_array(image, patch_size))


def unpatchify(grid: PatchGrid) -> np.ndarray:
    return unpatchify_array(grid.patches, grid.image_size, grid.patch_size)


# ---------------------------------------------------------------------------
# Positional tables


def _sincos_1d(dim, pos):
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_2d(dim, grid_h, grid_w):
    """Fixed 2-D sine-cosine table of shape ``[grid_h*grid_w, dim]``."""
    if dim % 4:
        raise InvalidConfiguration(f"positional embedding width must be divisible by 4, got {dim}")
    gy, gx = np.meshgrid(np.arange(grid_h, dtype=np.float64), np.arange(grid_w, dtype=np.float64), indexing="ij")
    return np.concatenate([_sincos_1d(dim // 2, gy), _sincos_1d(dim // 2, gx)], axis=1)


# ---------------------------------------------------------------------------
# Model


@dataclass(frozen=True)
class ModelConfig:
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
        if self.image_size % self.patch_size:
            raise InvalidConfiguration(
                f"patch_size={self.patch_size} does not divide image_size={self.image_size}"
            )
        for dim, heads in ((self.enc_dim, self.enc_heads), (self.dec_dim, self.dec_heads)):
            if dim % heads:
                raise InvalidConfiguration(f"width {dim} not divisible by {heads} heads")

    @property
    def grid_side(self):
        return self.image_size // self.patch_size

    @property
    def n_patches(self):
        return self.grid_side ** 2

    @property
    def patch_dim(self):
        return self.patch_size ** 2 * self.channels

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def expected_parameter_count(cfg: ModelConfig) -> int:
    """Closed-form trainable parameter count (positional tables are fixed)."""
    def block(d):
        hidden = cfg.mlp_ratio * d
        return 4 * (d * d + d) + (d * hidden + hidden) + (hidden * d + d) + 4 * d

    s, de, dd = cfg.patch_dim, cfg.enc_dim, cfg.dec_dim
    return (
        s * de + de
        + cfg.enc_depth * block(de) + 2 * de
        + de * dd + dd
        + dd
        + cfg.dec_depth * block(dd) + 2 * dd
        + dd * s + s
    )


def _trunc_normal(gen, shape, std=0.02):
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=gen)


def _block_shapes(prefix, d, hidden):
    return [
        (f"{prefix}.norm1.weight", (d,), "ones"),
        (f"{prefix}.norm1.bias", (d,), "zeros"),
        (f"{prefix}.attn.q.weight", (d, d), "normal"),
        (f"{prefix}.attn.q.bias", (d,), "zeros"),
        (f"{prefix}.attn.k.weight", (d, d), "normal"),
        (f"{prefix}.attn.k.bias", (d,), "zeros"),
        (f"{prefix}.attn.v.weight", (d, d), "normal"),
        (f"{prefix}.attn.v.bias", (d,), "zeros"),
        (f"{prefix}.attn.out.weight", (d, d), "normal"),
        (f"{prefix}.attn.out.bias", (d,), "zeros"),
        (f"{prefix}.norm2.weight", (d,), "ones"),
        (f"{prefix}.norm2.bias", (d,), "zeros"),
        (f"{prefix}.mlp.fc1.weight", (d, hidden), "normal"),
        (f"{prefix}.mlp.fc1.bias", (hidden,), "zeros"),
        (f"{prefix}.mlp.fc2.weight", (hidden, d), "normal"),
        (f"{prefix}.mlp.fc2.bias", (d,), "zeros"),
    ]


def parameter_layout(cfg: ModelConfig):
    """Ordered ``(name, shape, init)`` triples for every trainable tensor."""
    s, de, dd = cfg.patch_dim, cfg.enc_dim, cfg.dec_dim
    layout = [
        ("patch_embed.weight", (s, de), "normal"),
        ("patch_embed.bias", (de,), "zeros"),
    ]
    for b in range(cfg.enc_depth):
        layout += _block_shapes(f"encoder.{b}", de, cfg.mlp_ratio * de)
    layout += [
        ("encoder.norm.weight", (de,), "ones"),
        ("encoder.norm.bias", (de,), "zeros"),
        ("decoder_embed.weight", (de, dd), "normal"),
        ("decoder_embed.bias", (dd,), "zeros"),
        ("mask_token", (dd,), "normal"),
    ]
    for b in range(cfg.dec_depth):
        layout += _block_shapes(f"decoder.{b}", dd, cfg.mlp_ratio * dd)
    layout += [
        ("decoder.norm.weight", (dd,), "ones"),
        ("decoder.norm.bias", (dd,), "zeros"),
        ("head.weight", (dd, s), "normal"),
        ("head.bias", (s,), "zeros"),
    ]
    return layout


def init_params(cfg: ModelConfig, seed: int = 0) -> dict:
    params = {}
    for idx, (name, shape, kind) in enumerate(parameter_layout(cfg)):
        if kind == "normal":
            data = _trunc_normal(rng.stream(seed, 0x1417, idx), shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = ad.parameter(data, name=name)
    return params


@dataclass(eq=False)
class PartPrediction:
    part: int
    pred: Tensor  # [N, S]
    valid_mask: np.ndarray  # 1 where the prediction is scored


class MaskedAutoencoder:
    """ViT encoder-decoder operating on patch arrays.

    ``patch_embed_count`` counts patch embeddings computed by the encoder
    (one per visible patch per forward); the trainer uses it to report data
    utilisation.
    """

    def __init__(self, config: ModelConfig | None = None, params: dict | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        cfg = self.config
        self.params = init_params(cfg, seed) if params is None else params
        self._check_params()
        g = cfg.grid_side
        self.enc_pos = sincos_2d(cfg.enc_dim, g, g)
        self.dec_pos = sincos_2d(cfg.dec_dim, g, g)
        self.patch_embed_count = 0

    def _check_params(self):
        layout = parameter_layout(self.config)
        names = [n for n, _, _ in layout]
        if list(self.params) != names:
            missing = sorted(set(names) - set(self.params))
            extra = sorted(set(self.params) - set(names))
            raise ShapeError(f"parameter set mismatch: missing={missing} unexpected={extra}")
        for name, shape, _ in layout:
            if self.params[name].shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {self.params[name].shape}")

    @property
    def n_patches(self):
        return self.config.n_patches

    @property
    def patch_dim(self):
        return self.config.patch_dim

    def parameter_count(self):
        return sum(p.size for p in self.params.values())

    # -- building blocks -----------------------------------------------------
    def _block(self, x, prefix, heads):
        p = self.params
        h = ad.layer_norm(x, p[f"{prefix}.norm1.weight"], p[f"{prefix}.norm1.bias"])
        x = x + self._attention(h, f"{prefix}.attn", heads)
        h = ad.layer_norm(x, p[f"{prefix}.norm2.weight"], p[f"{prefix}.norm2.bias"])
        h = ad.gelu(ad.linear(h, p[f"{prefix}.mlp.fc1.weight"], p[f"{prefix}.mlp.fc1.bias"]))
        return x + ad.linear(h, p[f"{prefix}.mlp.fc2.weight"], p[f"{prefix}.mlp.fc2.bias"])

    def _attention(self, x, prefix, heads):
        p = self.params
        *lead, t, d = x.shape
        dh = d // heads

        def split(name):
            y = ad.linear(x, p[f"{prefix}.{name}.weight"], p[f"{prefix}.{name}.bias"])
            y = y.reshape(*lead, t, heads, dh)
            return ad.transpose(y, tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2))

        q, k, v = split("q"), split("k"), split("v")
        att = ad.softmax(ad.matmul(q, ad.transpose(k)) * (1.0 / np.sqrt(dh)))
        y = ad.matmul(att, v)
        nl = len(lead)
        y = ad.transpose(y, tuple(range(nl)) + (nl + 1, nl, nl + 2)).reshape(*lead, t, d)
        return ad.linear(y, p[f"{prefix}.out.weight"], p[f"{prefix}.out.bias"])

    def _encode(self, patches, ids):
        """Embed and encode ``patches`` [B, T, S] sitting at positions ``ids`` [B, T]."""
        p, cfg = self.params, self.config
        self.patch_embed_count += int(np.prod(patches.shape[:-1]))
        x = ad.linear(patches, p["patch_embed.weight"], p["patch_embed.bias"])
        x = x + self.enc_pos[ids]
        for b in range(cfg.enc_depth):
            x = self._block(x, f"encoder.{b}", cfg.enc_heads)
        return ad.layer_norm(x, p["encoder.norm.weight"], p["encoder.norm.bias"])

    def _decode(self, latent, ids):
        p, cfg = self.params, self.config
        n = cfg.n_patches
        y = ad.linear(latent, p["decoder_embed.weight"], p["decoder_embed.bias"])
        full = ad.scatter_rows(y, ids, n)
        masked = np.ones(ids.shape[:-1] + (n,))
        np.put_along_axis(masked, ids, 0.0, axis=-1)
        full = full + ad.mul(masked[..., None], p["mask_token"]) + self.dec_pos
        for b in range(cfg.dec_depth):
            full = self._block(full, f"decoder.{b}", cfg.dec_heads)
        full = ad.layer_norm(full, p["decoder.norm.weight"], p["decoder.norm.bias"])
        return ad.linear(full, p["head.weight"], p["head.bias"])

    # -- public forwards -----------------------------------------------------
    def forward_visible(self, patches, visible_ids):
        """Predict all positions from the visible subset.

        ``patches``: ``[..., N, S]`` array; ``visible_ids``: ``[..., T]``.
        Returns a ``[..., N, S]`` Tensor.
        """
        patches = np.asarray(patches, dtype=np.float64)
        ids = np.asarray(visible_ids, dtype=np.int64)
        if patches.shape[-2:] != (self.n_patches, self.patch_dim):
            raise ShapeError(
                f"patches {patches.shape} do not match model (N={self.n_patches}, S={self.patch_dim})"
            )
        ids = np.broadcast_to(ids, patches.shape[:-2] + ids.shape[-1:])
        visible = np.take_along_axis(patches, ids[..., None], axis=-2)
        return self._decode(self._encode(visible, ids), ids)

    def forward_draws(self, patches, visible_sets):
        """Run every mask draw on every image.

        ``patches``: ``[B, N, S]``; ``visible_sets``: list of ``D`` index arrays
        of shape ``[B, T_d]``. Draws with equal ``T_d`` are batched together.
        Returns a ``[B, D, N, S]`` Tensor.
        """
        patches = np.asarray(patches, dtype=np.float64)
        sizes = {v.shape[-1] for v in visible_sets}
        if len(sizes) == 1:
            ids = np.stack([np.asarray(v) for v in visible_sets], axis=1)  # [B, D, T]
            rep = np.broadcast_to(patches[:, None], (patches.shape[0], len(visible_sets)) + patches.shape[1:])
            return self.forward_visible(rep, ids)
        outs = [self.forward_visible(patches, v) for v in visible_sets]
        return ad.stack(outs, axis=1)

    def forward_part(self, grid: PatchGrid, partition: MaskPartition, i: int) -> PartPrediction:
        self._check_grid(grid, partition)
        if not 0 <= i < partition.k_parts:
            raise InvalidConfiguration(f"part index {i} out of range for K={partition.k_parts}")
        pred = self.forward_visible(grid.patches, partition.parts[i])
        return PartPrediction(i, pred, partition.masks[i])

    def forward_all_parts(self, grid: PatchGrid, partition: MaskPartition) -> list:
        """All K parts in one batched forward; equals K ``forward_part`` calls."""
        self._check_grid(grid, partition)
        k = partition.k_parts
        rep = np.broadcast_to(grid.patches, (k,) + grid.patches.shape)
        preds = self.forward_visible(rep, partition.parts)
        return [PartPrediction(i, preds[i], partition.masks[i]) for i in range(k)]

    def encode_features(self, patches):
        """Encoder applied to every patch (no masking): ``[..., N, D_enc]``."""
        if isinstance(patches, PatchGrid):
            patches = patches.patches
        patches = np.asarray(patches, dtype=np.float64)
        ids = np.broadcast_to(np.arange(self.n_patches), patches.shape[:-1])
        return self._encode(patches, ids)

    def _check_grid(self, grid, partition):
        if partition.n_patches != grid.n_patches:
            raise ShapeError(
                f"partition has N={partition.n_patches} but grid has N={grid.n_patches}"
            )

    def state_arrays(self):
        return {k: v.data for k, v in self.params.items()}

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict):
        params = {k: ad.parameter(np.array(v, dtype=np.float64), name=k) for k, v in arrays.items()}
        return cls(config, params)


def infer_config(arrays: dict, **kw) -> ModelConfig:
    """Recover architecture sizes from checkpoint tensor shapes.

    Head counts cannot be read off shapes and come from ``kw`` (defaults otherwise).
    """
    s, de = arrays["patch_embed.weight"].shape
    dd = arrays["decoder_embed.weight"].shape[1]
    enc_depth = len({k.split(".")[1] for k in arrays if k.startswith("encoder.") and k.split(".")[1].isdigit()})
    dec_depth = len({k.split(".")[1] for k in arrays if k.startswith("decoder.") and k.split(".")[1].isdigit()})
    hidden = arrays["encoder.0.mlp.fc1.weight"].shape[1] if enc_depth else 4 * de
    base = dict(
        enc_dim=de, dec_dim=dd, enc_depth=enc_depth, dec_depth=dec_depth, mlp_ratio=hidden // de,
    )
    base.update(kw)
    cfg = ModelConfig(**base)
    if cfg.patch_dim != s:
        raise ShapeError(f"checkpoint patch dim {s} does not match config patch dim {cfg.patch_dim}")
    return cfg
