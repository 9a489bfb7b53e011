"""Finite-difference test suites for the autodiff ops, the losses and the model.

Each suite returns a list of ``CheckResult`` (one per op or parameter group)
holding the worst relative error seen over all random draws.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import rng
from .autodiff import grad_check
from .losses import LossMode, _masked_mean, _pairwise_terms, reconstruction_target, total_loss, whole_loss
from .masking import generate_partition, pair_indices
from .model import MaskedAutoencoder, ModelConfig, patchify_array


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    checked: int
    passed: bool


def _shape(g, rank, lo=1, hi=6):
    return tuple(int(v) for v in g.integers(lo, hi + 1, size=rank))


def _op_cases():
    """name -> (build, make); ``build(gen, make)`` returns ``(f, x0)``."""

    def weighted(fn):
        # f(x) = sum(fn(x) * w) with a fixed random readout w
        def build(g, make):
            x0, extra = make(g)
            out = fn(ad.Tensor(x0), *extra)
            w = g.normal(size=out.shape)
            return lambda t: ad.sum_(ad.mul(fn(t, *extra), w)), x0
        return build

    def mat(g):
        return g.normal(size=_shape(g, 2)), ()

    cases = {}

    def binary(op):
        def make(g):
            x = g.normal(size=_shape(g, 2))
            return x, (ad.Tensor(g.normal(size=x.shape)),)
        return weighted(op), make

    def bcast(op):
        def make(g):
            x = g.normal(size=_shape(g, 2))
            return x, (ad.Tensor(g.normal(size=(1, x.shape[1]))),)
        return weighted(op), make

    cases["add"] = bcast(ad.add)
    cases["sub"] = binary(ad.sub)
    cases["mul"] = bcast(ad.mul)
    cases["mul_rhs"] = binary(lambda x, y: ad.mul(y, x))

    def mm_make(g):
        a, b, c = _shape(g, 3)
        return g.normal(size=(a, b)), (ad.Tensor(g.normal(size=(b, c))),)

    cases["matmul"] = weighted(ad.matmul), mm_make

    def mm_rhs_make(g):
        a, b, c = _shape(g, 3)
        return g.normal(size=(b, c)), (ad.Tensor(g.normal(size=(2, a, b))),)

    cases["matmul_batched_rhs"] = weighted(lambda x, a: ad.matmul(a, x)), mm_rhs_make
    cases["transpose"] = weighted(ad.transpose), mat

    def rs_make(g):
        a, b = _shape(g, 2)
        return g.normal(size=(a, b)), ((b, a),)

    cases["reshape"] = weighted(ad.reshape), rs_make

    def gather_make(g):
        n, d = _shape(g, 2)
        idx = g.integers(0, n, size=(2, 3))
        return g.normal(size=(2, n, d)), (idx,)

    cases["gather_rows"] = weighted(ad.gather_rows), gather_make

    def scatter_make(g):
        n, d = _shape(g, 2, lo=2)
        t = int(g.integers(1, n + 1))
        idx = np.stack([g.permutation(n)[:t] for _ in range(2)])
        return g.normal(size=(2, t, d)), (idx, n)

    cases["scatter_rows"] = weighted(ad.scatter_rows), scatter_make

    def isel_make(g):
        a, b = _shape(g, 2)
        return g.normal(size=(a, b)), (g.integers(0, b, size=4), 1)

    cases["index_select"] = weighted(ad.index_select), isel_make
    cases["sum"] = weighted(lambda x: ad.sum_(x, axis=0)), mat
    cases["mean"] = weighted(lambda x: ad.mean(x, axis=-1, keepdims=True)), mat
    cases["mean_all"] = weighted(lambda x: ad.mean(x)), mat
    cases["softmax"] = weighted(ad.softmax), mat
    cases["log_softmax"] = weighted(ad.log_softmax), mat

    def ln_make(g):
        # width 2 rows normalise to +-1 whatever the input, leaving only rounding noise
        a, b = _shape(g, 2, lo=3)
        return g.normal(size=(a, b)), (ad.Tensor(g.normal(size=b)), ad.Tensor(g.normal(size=b)))

    cases["layer_norm"] = weighted(lambda x, w, b: ad.layer_norm(x, w, b)), ln_make
    cases["gelu"] = weighted(ad.gelu), mat
    cases["abs"] = weighted(ad.abs_), mat
    cases["square"] = weighted(ad.square), mat
    cases["exp"] = weighted(ad.exp), mat

    def pos_make(g):
        return g.uniform(0.5, 2.0, size=_shape(g, 2)), ()

    cases["log"] = weighted(ad.log), pos_make

    def cat_make(g):
        a, b = _shape(g, 2)
        return g.normal(size=(a, b)), (ad.Tensor(g.normal(size=(a, 2))),)

    cases["concat"] = weighted(lambda x, y: ad.concat([x, y, x], axis=1)), cat_make

    def slice_make(g):
        a, b = _shape(g, 2, lo=2)
        return g.normal(size=(a, b)), ((slice(None), slice(1, None)),)

    cases["slice"] = weighted(ad.slice_), slice_make
    cases["stack"] = weighted(lambda x: ad.stack([x, ad.square(x)], axis=-1)), mat
    return cases


OP_NAMES = tuple(_op_cases())


def run_op_suite(tol=1e-5, draws=10, h=1e-5, seed=0, names=None):
    results = []
    for name, (build, make) in _op_cases().items():
        if names and name not in names:
            continue
        worst, checked = 0.0, 0
        for d in range(draws):
            g = rng.stream(seed, 0x0F5, OP_NAMES.index(name), d)
            f, x0 = build(g, make)
            if name == "abs":
                # keep every element well away from the kink at 0
                x0 = np.where(np.abs(x0) < 10 * h, x0 + np.sign(x0 + 0.5) * 0.5, x0)
            rep = grad_check(f, x0, h=h, tol=tol)
            worst = max(worst, rep.max_rel_error)
            checked += rep.rel_errors.size
        results.append(CheckResult(name, worst, checked, worst < tol))
    return results


# ---------------------------------------------------------------------------
# Loss / model level


def tiny_config():
    return ModelConfig(image_size=2, channels=1, patch_size=1, enc_dim=4, enc_depth=1, enc_heads=1,
                       dec_dim=4, dec_depth=1, dec_heads=1, mlp_ratio=2)


def _toy_batch(cfg, k_parts, n_images, seed):
    g = rng.stream(seed, 0xBA7C)
    images = g.uniform(size=(n_images, cfg.image_size, cfg.image_size, cfg.channels))
    patches = patchify_array(images, cfg.patch_size)
    parts = [generate_partition(cfg.n_patches, k_parts, seed, i) for i in range(n_images)]
    visible = [np.stack([p.parts[k] for p in parts]) for k in range(k_parts)]
    masks = np.stack([p.masks for p in parts])
    return patches, visible, masks


def _rescale_params(model, g):
    """Redraw parameters at fan-in scale.

    The training init makes every part predict nearly the same values, which
    parks the L1 terms on their kinks and shrinks gradients to the rounding
    floor; a generic point in parameter space avoids both.
    """
    for name, t in model.params.items():
        if t.data.ndim >= 2:
            t.data[...] = g.normal(0.0, 1.0 / np.sqrt(t.data.shape[-2]), size=t.data.shape)
        elif name.endswith("weight"):
            t.data[...] = 1.0 + 0.1 * g.normal(size=t.data.shape)
        else:
            t.data[...] = 0.1 * g.normal(size=t.data.shape)


def frozen_objective(preds, frozen, target, masks, mode=LossMode.FULL, whole_weight=1.0, consistency_weight=1.0):
    """``total_loss`` with every stop-gradient operand replaced by the constant ``frozen``.

    At ``preds.data == frozen`` the value equals the real objective, and its
    plain derivative is what the stop-gradient backward pass computes, so
    finite differences of this function are the oracle for the real one.
    """
    mode = LossMode.parse(mode)
    lw = whole_loss(preds, target, masks)
    pi, pj, overlaps = _pairwise_terms(preds, masks)
    if pi is None or not np.any(overlaps):
        lc = ad.Tensor(0.0)
    else:
        ci, cj, _ = _pairwise_terms(ad.Tensor(frozen), masks)
        lc = _masked_mean(ad.add(ad.abs_(ad.sub(ci.data, pj)), ad.abs_(ad.sub(pi, cj.data))), overlaps)
    if mode is LossMode.PIXEL_ONLY:
        return ad.mul(lw, whole_weight)
    if mode is LossMode.CONSISTENCY_ONLY:
        return ad.mul(lc, consistency_weight)
    return ad.add(ad.mul(lw, whole_weight), ad.mul(lc, consistency_weight))


def check_model_loss(cfg: ModelConfig, k_parts=4, n_images=1, draws=10, coords=4, tol=1e-3, h=1e-5,
                     seed=0, mode=LossMode.FULL, normalize=True, floor=1e-6):
    """Finite-difference check of ``total_loss`` w.r.t. every parameter tensor.

    Per draw, a fresh random model and batch are built; ``coords`` random
    coordinates of each parameter tensor are checked. Coordinates whose
    perturbation crosses an L1 kink of the surrogate are resampled. The analytic gradient comes from
    ``total_loss``; the numeric one from ``frozen_objective`` with the
    stopped operands held at the unperturbed predictions. ``floor`` bounds the
    relative-error denominator: some gradients are exactly zero (key biases
    cancel in the softmax) and their differences are pure rounding.
    """
    worst = {}
    counts = {}
    for d in range(draws):
        model = MaskedAutoencoder(cfg, seed=rng.hash_seed(seed, d))
        _rescale_params(model, rng.stream(seed, 0x5CA1E, d))
        patches, visible, masks = _toy_batch(cfg, k_parts, n_images, rng.hash_seed(seed, d, 1))
        target = reconstruction_target(patches, normalize)
        g = rng.stream(seed, 0xC00D, d)
        ii, jj = pair_indices(k_parts)
        overlap = masks[:, ii] & masks[:, jj]

        with ad.no_grad():
            base_preds = model.forward_draws(patches, visible).data

        for name in list(model.params):
            original = model.params[name]

            def f(t, name=name):
                model.params[name] = t
                try:
                    return total_loss(model.forward_draws(patches, visible), target, masks, mode).objective
                finally:
                    model.params[name] = original

            def ref(t, name=name):
                model.params[name] = t
                try:
                    return frozen_objective(model.forward_draws(patches, visible), base_preds, target, masks, mode)
                finally:
                    model.params[name] = original

            def signs(x, name=name):
                model.params[name] = ad.Tensor(x)
                try:
                    with ad.no_grad():
                        preds = model.forward_draws(patches, visible).data
                finally:
                    model.params[name] = original
                # kinks of the frozen surrogate: pred_j against frozen pred_i and vice versa
                ov = overlap[..., None]
                return np.concatenate([
                    np.sign(base_preds[:, ii] - preds[:, jj]) * ov,
                    np.sign(preds[:, ii] - base_preds[:, jj]) * ov,
                ])

            x0 = original.data.copy()
            chosen = []
            base = signs(x0)
            for idx in g.permutation(x0.size):
                if len(chosen) == min(coords, x0.size):
                    break
                xp = x0.copy().reshape(-1)
                xp[idx] += h
                xm = x0.copy().reshape(-1)
                xm[idx] -= h
                if np.array_equal(signs(xp.reshape(x0.shape)), base) and np.array_equal(signs(xm.reshape(x0.shape)), base):
                    chosen.append(idx)
            rep = grad_check(f, x0, h=h, tol=tol, indices=np.array(chosen, dtype=np.int64), reference=ref,
                             floor=floor)
            worst[name] = max(worst.get(name, 0.0), rep.max_rel_error)
            counts[name] = counts.get(name, 0) + len(chosen)
    return [CheckResult(n, w, counts[n], w < tol) for n, w in worst.items()]


def run_loss_suite(tol=1e-3, draws=10, seed=0):
    """Total loss through a tiny model (N=4, one-pixel patches, width 4)."""
    out = []
    for k in (2, 4):
        for r in check_model_loss(tiny_config(), k_parts=k, n_images=2, draws=draws, coords=3, tol=tol,
                                  seed=seed, normalize=False):
            r.name = f"K={k}:{r.name}"
            out.append(r)
    return out


def run_model_suite(tol=1e-3, draws=10, coords=2, seed=0):
    """Total loss (full objective) through the default toy model."""
    return check_model_loss(ModelConfig(), k_parts=4, n_images=1, draws=draws, coords=coords, tol=tol, seed=seed)


def format_report(results):
    width = max(len(r.name) for r in results)
    lines = [
        f"{r.name:<{width}}  max_rel_err={r.max_rel_error:.3e}  n={r.checked:<5d} {'ok' if r.passed else 'FAIL'}"
        for r in results
    ]
    return "\n".join(lines)
