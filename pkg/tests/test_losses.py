import warnings

import numpy as np
import pytest

from emae import autodiff as ad
from emae import losses as L
from emae.errors import InvalidConfiguration
from emae.masking import generate_partition, overlap
import oracles


def random_instance(g, n=16, k=4, s=12):
    part = generate_partition(n, k, int(g.integers(2**31)))
    preds = [g.normal(size=(n, s)) for _ in range(k)]
    return part, preds, g.normal(size=(n, s))


def test_target_normalization():
    p = np.random.default_rng(0).random((5, 48))
    t = L.reconstruction_target(p, True)
    assert np.all(np.abs(t.mean(axis=-1)) < 1e-9)
    assert np.all(np.abs(t.var(axis=-1) - 1) < 1e-3)
    assert np.array_equal(L.reconstruction_target(p, False), p)
    assert np.array_equal(L.reconstruction_target(np.full((1, 4), 0.3), True), np.zeros((1, 4)))


def test_part_recon_hand_value():
    pred = np.array([[3.0], [7.0]])
    target = np.array([[1.0], [0.0]])
    assert L.part_recon_loss(pred, target, np.array([1, 0])).item() == 4.0


def test_part_recon_ignores_visible_positions():
    g = np.random.default_rng(1)
    target = g.normal(size=(16, 12))
    mask = generate_partition(16, 4, 0).masks[0]
    pred = np.where(mask[:, None] == 1, target, 99.0)
    assert L.part_recon_loss(pred, target, mask).item() == 0.0
    other = pred.copy()
    other[mask == 0] = -5.0
    assert L.part_recon_loss(other, target, mask).item() == 0.0


def test_part_recon_empty_mask():
    with pytest.raises(InvalidConfiguration):
        L.part_recon_loss(np.zeros((4, 2)), np.zeros((4, 2)), np.zeros(4))


def test_whole_loss_hand_value():
    target = np.zeros((2, 1))
    masks = np.array([[1, 0], [0, 1]])
    preds = [np.array([[1.0], [9.0]]), np.array([[9.0], [np.sqrt(3.0)]])]
    assert np.isclose(L.whole_loss(preds, target, masks).item(), 2.0, atol=1e-15)


def test_pair_hand_value():
    v = L.pair_consistency_loss(np.array([[1.0]]), np.array([[4.0]]), np.array([1])).item()
    assert v == 6.0


def test_pair_symmetry_and_zero():
    g = np.random.default_rng(2)
    a, b = g.normal(size=(8, 3)), g.normal(size=(8, 3))
    ov = np.array([1, 0, 1, 1, 0, 0, 1, 0])
    assert L.pair_consistency_loss(a, b, ov).item() == L.pair_consistency_loss(b, a, ov).item()
    b2 = np.where(ov[:, None] == 1, a, b)
    assert L.pair_consistency_loss(a, b2, ov).item() == 0.0


def test_pair_empty_overlap_warns():
    with pytest.warns(RuntimeWarning):
        v = L.pair_consistency_loss(np.ones((2, 1)), np.zeros((2, 1)), np.zeros(2))
    assert v.item() == 0.0


def test_consistency_hand_value():
    # K=3 on N=3 positions: each pair shares exactly one masked position
    masks = np.array([[0, 1, 1], [1, 0, 1], [1, 1, 0]])
    preds = [np.zeros((3, 1)) for _ in range(3)]
    preds[1][2, 0] = 0.5   # pair (0,1) shares position 2 -> 2*0.5 = 1
    preds[2][1, 0] = 1.0   # pair (0,2) shares position 1 -> 2
    preds[2][0, 0] = 1.5   # pair (1,2) shares position 0 -> 3
    assert L.consistency_loss(preds, masks).item() == 2.0


def test_consistency_k2_is_zero():
    part = generate_partition(8, 2, 0)
    with pytest.warns(RuntimeWarning):
        v = L.consistency_loss([np.ones((8, 2)), np.zeros((8, 2))], part.masks)
    assert v.item() == 0.0


def test_oracles_on_random_instances():
    g = np.random.default_rng(3)
    for _ in range(100):
        part, preds, target = random_instance(g)
        for i in range(4):
            got = L.part_recon_loss(preds[i], target, part.masks[i]).item()
            assert abs(got - oracles.masked_mse(preds[i], target, part.masks[i])) < 1e-12
        assert abs(L.whole_loss(preds, target, part.masks).item() - oracles.whole(preds, target, part.masks)) < 1e-12
        ov = overlap(part, 0, 2)
        pair = L.pair_consistency_loss(preds[0], preds[2], ov).item()
        assert abs(pair - oracles.pair_l1(preds[0], preds[2], ov.positions)) < 1e-12
        mean_l1 = np.abs(preds[0] - preds[2])[ov.positions.astype(bool)].mean()
        assert abs(pair - 2 * mean_l1) < 1e-12
        assert abs(L.consistency_loss(preds, part.masks).item() - oracles.consistency(preds, part.masks)) < 1e-12


def test_batched_loss_is_mean_of_items():
    g = np.random.default_rng(4)
    items = [random_instance(g) for _ in range(3)]
    preds = np.stack([np.stack(p) for _, p, _ in items])
    target = np.stack([t for _, _, t in items])
    masks = np.stack([part.masks for part, _, _ in items])
    got = L.total_loss(preds, target, masks)
    want_w = np.mean([oracles.whole(p, t, part.masks) for part, p, t in items])
    want_c = np.mean([oracles.consistency(p, part.masks) for part, p, _ in items])
    assert abs(got.l_whole - want_w) < 1e-12
    assert abs(got.l_consistency - want_c) < 1e-12


def test_stop_gradient_routing():
    g = np.random.default_rng(5)
    ov = np.array([1, 1, 0, 1])
    a0, b0 = g.normal(size=(4, 2)), g.normal(size=(4, 2))
    a, b = ad.parameter(a0), ad.parameter(b0)
    L.pair_consistency_loss(a, b, ov).backward()
    # d/da of mean|a - c| with c frozen at b
    want = np.sign(a0 - b0) * ov[:, None] / (ov.sum() * 2)
    assert np.allclose(a.grad, want, atol=1e-15)
    assert np.allclose(b.grad, -want, atol=1e-15)

    a = ad.parameter(a0)
    L.pair_consistency_loss(a, ad.stop_gradient(ad.parameter(b0)), ov).backward()
    assert np.allclose(a.grad, want, atol=1e-15)


def test_pair_gradient_matches_frozen_finite_differences():
    g = np.random.default_rng(6)
    ov = np.array([1, 0, 1, 1, 1])
    c = g.normal(size=(5, 3))
    x0 = c + np.where(g.random((5, 3)) < 0.5, -1, 1) * g.uniform(0.1, 1.0, size=(5, 3))

    rep = ad.grad_check(
        lambda t: L.pair_consistency_loss(t, ad.Tensor(c), ov),
        x0, tol=1e-4,
        reference=lambda t: L._masked_mean(ad.abs_(ad.sub(t, c)), ov),
    )
    assert rep.passed


def test_total_loss_modes():
    g = np.random.default_rng(7)
    part, preds, target = random_instance(g)
    full = L.total_loss(preds, target, part.masks, "full")
    pix = L.total_loss(preds, target, part.masks, L.LossMode.PIXEL_ONLY)
    cons = L.total_loss(preds, target, part.masks, "consistency-only")
    assert full.l_total == pytest.approx(full.l_whole + full.l_consistency, abs=1e-14)
    assert pix.l_total == L.whole_loss(preds, target, part.masks).item()
    assert cons.l_total == cons.l_consistency
    assert full.per_part.shape == (4,) and full.per_pair.shape == (6,)
    assert full.l_whole == pytest.approx(full.per_part.mean(), abs=1e-14)
    assert full.l_consistency == pytest.approx(full.per_pair.mean(), abs=1e-14)
    with pytest.raises(InvalidConfiguration):
        L.LossMode.parse("perceptual")


def test_consistency_only_trains_encoder():
    from emae.model import MaskedAutoencoder, patchify_array
    m = MaskedAutoencoder(seed=1)
    imgs = np.random.default_rng(8).random((2, 32, 32, 3))
    parts = [generate_partition(16, 4, s) for s in range(2)]
    visible = [np.stack([p.parts[k] for p in parts]) for k in range(4)]
    masks = np.stack([p.masks for p in parts])
    patches = patchify_array(imgs, 8)
    out = L.total_loss(m.forward_draws(patches, visible), L.reconstruction_target(patches), masks, "consistency-only")
    out.objective.backward()
    assert np.linalg.norm(m.params["encoder.0.attn.v.weight"].grad) > 0


def test_losses_nonnegative():
    g = np.random.default_rng(9)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for _ in range(20):
            part, preds, target = random_instance(g)
            b = L.total_loss(preds, target, part.masks)
            assert b.l_whole >= 0 and b.l_consistency >= 0
