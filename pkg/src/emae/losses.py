"""Training objectives: masked reconstruction, stop-gradient self-consistency, totals.

All losses accept predictions with arbitrary leading batch dimensions and
average over them, so a batch of images gives the mean of the per-image
losses.
"""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidConfiguration
from .masking import pair_indices

NORM_EPS = 1e-6


class LossMode(enum.Enum):
    FULL = "full"
    PIXEL_ONLY = "pixel-only"
    CONSISTENCY_ONLY = "consistency-only"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("_", "-")
        for m in cls:
            if m.value == key:
                return m
        raise InvalidConfiguration(f"unknown loss mode {value!r}; expected one of {[m.value for m in cls]}")


def patch_stats(patches):
    p = np.asarray(patches, dtype=np.float64)
    return p.mean(axis=-1, keepdims=True), p.var(axis=-1, keepdims=True)


def reconstruction_target(patches, normalize_per_patch=True):
    """Pixel target: raw patches, or each patch standardised over its values."""
    p = np.asarray(patches, dtype=np.float64)
    if not normalize_per_patch:
        return p.copy()
    mu, var = patch_stats(p)
    return (p - mu) / np.sqrt(var + NORM_EPS)


def denormalize(pred, patches):
    """Map normalised predictions back to pixel space using ``patches``' own statistics."""
    mu, var = patch_stats(patches)
    return np.asarray(pred) * np.sqrt(var + NORM_EPS) + mu


def _pred_tensor(pred):
    return pred.pred if hasattr(pred, "pred") else ad.as_tensor(pred)


def _masked_mean(values, weights_mask):
    """Mean over the positions where ``weights_mask`` is 1 (and over the last
    axis), then over every leading axis. Items whose mask is empty count as 0.

    ``values``: Tensor ``[..., N, S]``; ``weights_mask``: array ``[..., N]``.
    """
    mask = np.asarray(weights_mask, dtype=np.float64)
    s = values.shape[-1]
    count = mask.sum(axis=-1, keepdims=True)
    w = np.divide(mask, count * s, out=np.zeros_like(mask), where=count > 0)
    n_items = int(np.prod(values.shape[:-2])) if values.ndim > 2 else 1
    return ad.sum_(ad.mul(values, w[..., None])) * (1.0 / n_items)


def part_recon_loss(pred, target, mask):
    """Mean squared error over the masked positions of one part."""
    pred = _pred_tensor(pred)
    mask = np.asarray(mask)
    if not np.all(mask.sum(axis=-1) > 0):
        raise InvalidConfiguration("reconstruction loss needs at least one masked position")
    diff = ad.sub(pred, np.asarray(target, dtype=np.float64))
    return _masked_mean(ad.square(diff), np.broadcast_to(mask, pred.shape[:-1]))


def _stack_preds(preds):
    if isinstance(preds, (list, tuple)):
        return ad.stack([_pred_tensor(p) for p in preds], axis=-3)
    return ad.as_tensor(preds)


def whole_loss(preds, target, masks):
    """Unweighted mean of the per-part reconstruction losses.

    ``preds``: list of K predictions or a Tensor ``[..., K, N, S]``;
    ``target``: ``[..., N, S]``; ``masks``: ``[..., K, N]``.
    """
    p = _stack_preds(preds)
    target = np.asarray(target, dtype=np.float64)[..., None, :, :]
    return part_recon_loss(p, target, np.broadcast_to(np.asarray(masks), p.shape[:-1]))


def _symmetric_sg_l1(pi, pj):
    return ad.add(
        ad.abs_(ad.sub(ad.stop_gradient(pi), pj)),
        ad.abs_(ad.sub(pi, ad.stop_gradient(pj))),
    )


def pair_consistency_loss(pred_i, pred_j, overlap):
    """Symmetric stop-gradient L1 between two parts on their shared masked positions.

    ``overlap`` is an ``OverlapSet`` or a binary ``[..., N]`` array.
    """
    positions = getattr(overlap, "positions", overlap)
    positions = np.asarray(positions)
    pi, pj = _pred_tensor(pred_i), _pred_tensor(pred_j)
    if not np.any(positions):
        warnings.warn("empty overlap: consistency term is 0", RuntimeWarning, stacklevel=2)
    return _masked_mean(_symmetric_sg_l1(pi, pj), np.broadcast_to(positions, pi.shape[:-1]))


def _pairwise_terms(preds, masks):
    p = _stack_preds(preds)
    k = p.shape[-3]
    ii, jj = pair_indices(k)
    masks = np.broadcast_to(np.asarray(masks), p.shape[:-1]).astype(np.uint8)
    if len(ii) == 0:
        return None, None, masks[..., :0, :]
    pi = ad.index_select(p, ii, axis=p.ndim - 3)
    pj = ad.index_select(p, jj, axis=p.ndim - 3)
    overlaps = masks[..., ii, :] & masks[..., jj, :]
    return pi, pj, overlaps


def consistency_loss(preds, masks):
    """Unweighted mean of the pair losses over all unordered pairs ``i < j``.

    Returns a zero Tensor (with a warning) when no pair shares a masked position.
    """
    pi, pj, overlaps = _pairwise_terms(preds, masks)
    if pi is None or not np.any(overlaps):
        warnings.warn("no overlapping masked positions: consistency term is 0", RuntimeWarning, stacklevel=2)
        return Tensor(0.0)
    return _masked_mean(_symmetric_sg_l1(pi, pj), overlaps)


@dataclass
class LossBreakdown:
    l_whole: float
    l_consistency: float
    l_total: float
    per_part: np.ndarray
    per_pair: np.ndarray
    objective: Tensor  # differentiable l_total


def _per_group(values, mask):
    """Per-group masked means (numpy only), groups along axis -2 of ``mask``."""
    mask = np.asarray(mask, dtype=np.float64)
    count = mask.sum(axis=-1) * values.shape[-1]
    tot = (values * mask[..., None]).sum(axis=(-1, -2))
    per = np.divide(tot, count, out=np.zeros_like(tot), where=count > 0)
    return per.reshape(-1, per.shape[-1]).mean(axis=0) if per.ndim > 1 else per


def total_loss(preds, target, masks, mode=LossMode.FULL, whole_weight=1.0, consistency_weight=1.0):
    """Combined objective. Both components are always reported; ``mode`` picks
    which enter the differentiable total."""
    mode = LossMode.parse(mode)
    p = _stack_preds(preds)
    masks = np.broadcast_to(np.asarray(masks), p.shape[:-1])
    lw = whole_loss(p, target, masks)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        lc = consistency_loss(p, masks)

    if mode is LossMode.FULL:
        obj = ad.add(ad.mul(lw, whole_weight), ad.mul(lc, consistency_weight))
    elif mode is LossMode.PIXEL_ONLY:
        obj = ad.mul(lw, whole_weight)
    else:
        obj = ad.mul(lc, consistency_weight)

    t = np.asarray(target, dtype=np.float64)[..., None, :, :]
    per_part = _per_group((p.data - t) ** 2, masks)
    pi, pj, overlaps = _pairwise_terms(p, masks)
    per_pair = (
        np.zeros(0) if pi is None else _per_group(2.0 * np.abs(pi.data - pj.data), overlaps)
    )
    return LossBreakdown(lw.item(), lc.item(), obj.item(), per_part, per_pair, obj)
