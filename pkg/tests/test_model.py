import numpy as np
import pytest

from emae import model as M
from emae.errors import InvalidConfiguration, ShapeError
from emae.masking import generate_partition

TOY = M.ModelConfig(image_size=8, channels=3, patch_size=4, enc_dim=8, enc_depth=2, enc_heads=2,
                    dec_dim=8, dec_depth=1, dec_heads=2, mlp_ratio=2)


def random_model(cfg=M.ModelConfig(), seed=0):
    """Model with O(1) weights so that tests are not dominated by the tiny init."""
    m = M.MaskedAutoencoder(cfg, seed=seed)
    g = np.random.default_rng(seed)
    for t in m.params.values():
        t.data[...] = g.normal(0.0, 0.5, size=t.shape)
    return m


def test_patchify_paper_geometry():
    grid = M.patchify(np.zeros((224, 224, 3)), 16)
    assert grid.n_patches == 196 and grid.patch_dim == 768
    assert grid.grid_shape == (14, 14)


def test_patchify_pixels_and_order():
    img = np.arange(4.0).reshape(2, 2, 1)
    grid = M.patchify(img, 1)
    assert grid.patches.ravel().tolist() == [0.0, 1.0, 2.0, 3.0]
    img = np.arange(4 * 4 * 2.0).reshape(4, 4, 2)
    p = M.patchify(img, 2).patches
    # second patch is the top-right 2x2 block, read as (row, col, channel)
    assert p[1].tolist() == img[0:2, 2:4].reshape(-1).tolist()


def test_patchify_roundtrip_bit_exact():
    img = np.random.default_rng(0).random((32, 32, 3))
    assert np.array_equal(M.unpatchify(M.patchify(img, 8)), img)
    batch = np.random.default_rng(1).random((5, 32, 32, 3))
    assert np.array_equal(M.unpatchify_array(M.patchify_array(batch, 8), (32, 32, 3), 8), batch)


def test_patchify_rejects_indivisible():
    with pytest.raises(InvalidConfiguration):
        M.patchify(np.zeros((10, 10, 3)), 4)
    with pytest.raises(InvalidConfiguration):
        M.ModelConfig(image_size=30, patch_size=8)


def test_parameter_count_closed_form():
    for cfg in (M.ModelConfig(), TOY, M.ModelConfig(enc_depth=3, dec_dim=16, dec_heads=4)):
        m = M.MaskedAutoencoder(cfg)
        assert m.parameter_count() == M.expected_parameter_count(cfg)
    assert M.expected_parameter_count(M.ModelConfig()) == 133664


def test_sincos_table_is_fixed_and_distinct():
    t = M.sincos_2d(16, 4, 4)
    assert t.shape == (16, 16)
    assert len({tuple(np.round(r, 12)) for r in t}) == 16
    m = M.MaskedAutoencoder()
    assert not any("pos" in name for name in m.params)


def test_forward_shapes_and_determinism():
    m = random_model(TOY)
    grid = M.patchify(np.random.default_rng(0).random((8, 8, 3)), 4)
    part = generate_partition(4, 2, 0)
    a = m.forward_part(grid, part, 1)
    b = m.forward_part(grid, part, 1)
    assert a.pred.shape == (4, 48)
    assert np.array_equal(a.pred.data, b.pred.data)
    assert np.array_equal(a.valid_mask, part.masks[1])
    with pytest.raises(InvalidConfiguration):
        m.forward_part(grid, part, 2)


def test_one_visible_patch_per_part():
    m = random_model(TOY)
    grid = M.patchify(np.random.default_rng(0).random((8, 8, 3)), 4)
    part = generate_partition(4, 4, 3)
    preds = m.forward_all_parts(grid, part)
    assert len(preds) == 4
    assert all(p.pred.shape == (4, 48) and p.valid_mask.sum() == 3 for p in preds)


def test_zero_head_predicts_bias():
    m = M.MaskedAutoencoder(TOY)
    m.params["head.weight"].data[...] = 0.0
    bias = np.random.default_rng(0).normal(size=48)
    m.params["head.bias"].data[...] = bias
    grid = M.patchify(np.random.default_rng(1).random((8, 8, 3)), 4)
    pred = m.forward_part(grid, generate_partition(4, 2, 0), 0).pred.data
    assert np.array_equal(pred, np.broadcast_to(bias, pred.shape))


def test_all_parts_equal_sequential():
    m = random_model(M.ModelConfig())
    grid = M.patchify(np.random.default_rng(2).random((32, 32, 3)), 8)
    part = generate_partition(16, 4, 5)
    batched = m.forward_all_parts(grid, part)
    for i in range(4):
        seq = m.forward_part(grid, part, i)
        assert np.max(np.abs(batched[i].pred.data - seq.pred.data)) < 1e-12


def test_positional_injectivity():
    m = random_model(M.ModelConfig())
    patches = np.random.default_rng(3).random((16, 192))
    ids = np.array([3, 9, 0, 14])
    perm = np.array([2, 0, 3, 1])
    a = m.forward_visible(patches, ids).data
    b = m.forward_visible(patches, ids[perm]).data
    assert np.max(np.abs(a - b)) < 1e-10


def test_each_patch_embedded_once_per_iteration():
    m = M.MaskedAutoencoder()
    grid = M.patchify(np.zeros((32, 32, 3)), 8)
    m.forward_all_parts(grid, generate_partition(16, 4, 0))
    assert m.patch_embed_count == 16


def test_encode_features():
    m = random_model(M.ModelConfig())
    img = np.random.default_rng(4).random((32, 32, 3))
    f1 = m.encode_features(M.patchify(img, 8)).data
    assert f1.shape == (16, 64)
    assert np.array_equal(f1, m.encode_features(M.patchify(img, 8)).data)
    img2 = img.copy()
    img2[:8, :8] = 0.0
    f2 = m.encode_features(M.patchify(img2, 8)).data
    assert not np.allclose(f1.mean(axis=0), f2.mean(axis=0))


def test_partition_grid_mismatch():
    m = M.MaskedAutoencoder()
    grid = M.patchify(np.zeros((32, 32, 3)), 8)
    with pytest.raises(ShapeError):
        m.forward_part(grid, generate_partition(8, 4, 0), 0)


def test_infer_config_roundtrip():
    cfg = M.ModelConfig(enc_depth=3, dec_dim=16, dec_heads=4)
    m = M.MaskedAutoencoder(cfg)
    assert M.infer_config(m.state_arrays(), dec_heads=4) == cfg
