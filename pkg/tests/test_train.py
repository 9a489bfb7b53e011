import json
import math

import numpy as np
import pytest

from emae import checkpoint, data, train
from emae.errors import InvalidConfiguration, NumericAbort

SMALL = dict(batch_size=8, epochs=2, warmup_epochs=1)


def test_lr_endpoints_and_midpoint():
    cfg = train.TrainConfig(epochs=10, warmup_epochs=2, base_lr=0.1)
    spe = 5
    assert train.lr_at(0, cfg, spe) == 0.0
    assert train.lr_at(10, cfg, spe) == 0.1
    assert abs(train.lr_at(30, cfg, spe) - 0.05) < 1e-12
    assert abs(train.lr_at(50, cfg, spe)) < 1e-15


def test_lr_matches_closed_form():
    cfg = train.TrainConfig(epochs=10, warmup_epochs=2, base_lr=1.0)
    spe, warm, total = 5, 10, 50
    for s in range(total + 1):
        want = s / warm if s < warm else 0.5 * (1 + math.cos(math.pi * (s - warm) / (total - warm)))
        assert abs(train.lr_at(s, cfg, spe) - want) < 1e-15


def test_lr_continuous_at_boundary():
    cfg = train.TrainConfig(epochs=10, warmup_epochs=2, base_lr=1.0)
    spe = 1000
    a, b = train.lr_at(1999, cfg, spe), train.lr_at(2000, cfg, spe)
    assert abs(a - b) < 1e-3


def _cfg(**kw):
    return train.TrainConfig(weight_decay=kw.pop("wd", 0.0), **kw)


def test_adamw_first_step():
    p = {"w": np.array([[0.0]])}
    train.optimizer_step(p, {"w": np.array([[1.0]])}, train.OptimState(), 0.1, _cfg())
    assert abs(p["w"][0, 0] + 0.1) < 1e-8


def test_adamw_zero_gradient_is_noop():
    p = {"w": np.array([[1.5, -2.0]])}
    train.optimizer_step(p, {"w": np.zeros((1, 2))}, train.OptimState(), 0.1, _cfg())
    assert np.array_equal(p["w"], [[1.5, -2.0]])


def test_adamw_decoupled_decay():
    p = {"w": np.array([[2.0]])}
    train.optimizer_step(p, {"w": np.zeros((1, 1))}, train.OptimState(), 0.1, _cfg(wd=0.05))
    assert p["w"][0, 0] == 2.0 * (1 - 0.1 * 0.05)


def test_adamw_nonfinite_names_parameter():
    p = {"a": np.zeros(2), "b": np.zeros(2)}
    with pytest.raises(NumericAbort) as exc:
        train.optimizer_step(p, {"a": np.zeros(2), "b": np.array([0.0, np.nan])}, train.OptimState(), 0.1, _cfg())
    assert exc.value.name == "b"


def test_config_text_roundtrip_and_errors(tmp_path):
    cfg = train.TrainConfig(k_parts=8, loss_mode="pixel-only", normalize_target=False)
    again = train.TrainConfig.from_text(cfg.to_text())
    assert again == cfg and again.config_hash() == cfg.config_hash()
    path = tmp_path / "c.txt"
    path.write_text("# comment\nk_parts = 2\nbase_lr = 0.01  # trailing\n")
    assert train.TrainConfig.from_file(path).k_parts == 2
    with pytest.raises(InvalidConfiguration, match="unknown"):
        train.TrainConfig.from_text("learning_rate = 1\n")
    with pytest.raises(InvalidConfiguration):
        train.TrainConfig.from_text("epochs = many\n")
    with pytest.raises(InvalidConfiguration):
        train.TrainConfig(epochs=2, warmup_epochs=2)
    with pytest.raises(InvalidConfiguration):
        train.TrainConfig(beta2=1.0)


def test_training_reduces_loss(small_dataset):
    # l_total averaged over the first and last few steps, over three seeds
    first, last = [], []
    for seed in range(3):
        cfg = train.TrainConfig(batch_size=8, epochs=13, warmup_epochs=1, base_lr=5e-3, seed=seed, max_steps=50)
        res = train.train(cfg, small_dataset)
        assert len(res.metrics) == 50
        first.append(res.metrics[0].l_total)
        last.append(res.metrics[-1].l_total)
    assert np.mean(last) < np.mean(first)


def test_deterministic_runs_are_byte_identical(small_dataset, tmp_path):
    cfg = train.TrainConfig(checkpoint_interval=4, **SMALL)
    a = train.train(cfg, small_dataset, run_dir=tmp_path / "a")
    b = train.train(cfg, small_dataset, run_dir=tmp_path / "b")
    for name in ("metrics.jsonl", "final.emaeckpt", "ckpt-000004.emaeckpt", "config.txt"):
        assert (a.run_dir / name).read_bytes() == (b.run_dir / name).read_bytes()
    lines = (a.run_dir / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 8
    assert all(list(json.loads(line)) == list(train.METRIC_FIELDS) for line in lines)
    assert [json.loads(line)["step"] for line in lines] == list(range(1, 9))


def test_checkpoint_resave_is_byte_identical(small_dataset, tmp_path):
    res = train.train(train.TrainConfig(**SMALL), small_dataset, run_dir=tmp_path)
    model, state, ck = train.load_model(res.checkpoint_path)
    again = train.make_checkpoint(model, state, train.TrainConfig(**SMALL))
    checkpoint.save(tmp_path / "again.emaeckpt", again)
    assert (tmp_path / "again.emaeckpt").read_bytes() == res.checkpoint_path.read_bytes()
    assert ck.step == 8 and ck.config_hash == train.TrainConfig(**SMALL).config_hash()


def test_baseline_reports_zero_consistency(small_dataset):
    cfg = train.TrainConfig(loss_mode="pixel-only", mask_strategy="single-random", max_steps=2, **SMALL)
    res = train.train(cfg, small_dataset)
    assert all(r.l_consistency == 0.0 for r in res.metrics)
    assert all(r.l_total == r.l_whole for r in res.metrics)


def test_utilisation_counters(small_dataset):
    par = train.train(train.TrainConfig(max_steps=1, **SMALL), small_dataset)
    single = train.train(train.TrainConfig(max_steps=1, mask_strategy="single-random", **SMALL), small_dataset)
    assert par.patch_embeds_per_image == [16.0]
    assert single.patch_embeds_per_image == [4.0]


def test_nan_loss_aborts_and_keeps_last_good(small_dataset, tmp_path):
    cfg = train.TrainConfig(checkpoint_interval=1, **SMALL)
    model = train.MaskedAutoencoder(cfg.model_config())
    model.params["head.bias"].data[0] = np.nan
    with pytest.raises(NumericAbort):
        train.train(cfg, small_dataset, run_dir=tmp_path, model=model)
    assert (tmp_path / "last-good.emaeckpt").exists()
    assert not (tmp_path / "final.emaeckpt").exists()


def test_dataset_shape_mismatch(tmp_path):
    path = tmp_path / "d.bin"
    data.generate(data.SynthSpec(n_images=4, image_size=16), path)
    with pytest.raises(InvalidConfiguration):
        train.train(train.TrainConfig(**SMALL), path)


def test_run_dir_named_by_hash(tmp_path):
    cfg = train.TrainConfig()
    assert train.run_dir_for(cfg, tmp_path).name == f"run-{cfg.config_hash():016x}"
    assert train.run_dir_for(cfg.replace(seed=1), tmp_path) != train.run_dir_for(cfg, tmp_path)
