import json
import math
from pathlib import Path

import numpy as np
import pytest
import torch

from patchreg import cascade as casc
from patchreg import geometry as geo
from patchreg import trainer as tr
from patchreg import volumes as vol
from patchreg.diffcore import load_checkpoint, save_checkpoint
from patchreg.errors import NonFiniteLoss, ParseError
from patchreg.losses import LossConfig


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------


def test_lr_schedule_endpoints():
    assert tr.lr_schedule(0, 100) == pytest.approx(1e-3)
    assert tr.lr_schedule(100, 100) == pytest.approx(1e-5)
    # cosine midpoint sits exactly halfway between the endpoints
    assert tr.lr_schedule(50, 100) == pytest.approx(0.5 * (1e-3 + 1e-5))


def test_lr_schedule_monotone_decreasing():
    values = [tr.lr_schedule(s, 200) for s in range(201)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_lr_schedule_clamps_out_of_range():
    assert tr.lr_schedule(-5, 100) == pytest.approx(1e-3)
    assert tr.lr_schedule(500, 100) == pytest.approx(1e-5)


# ---------------------------------------------------------------------------
# config text format
# ---------------------------------------------------------------------------

GOOD_CONFIG = """
# training recipe
version = 1
seed = 11
n_scales = 5
patch_size = 16
lr = 0.002          # peak learning rate
final_iters = 123
desk_scale = 0.5
similarity = mi
w_bending = 0.02
moving_rot_deg = 10
moving_shift_mm = 5
"""


def test_parse_config_round_trip():
    values = tr.parse_config_text(GOOD_CONFIG)
    cfg, sched_args = tr.config_from_values(values)
    assert cfg.seed == 11
    assert cfg.lr == pytest.approx(0.002)
    assert cfg.final_iters == 123
    assert cfg.desk_scale == pytest.approx(0.5)
    assert sched_args == {"n_scales": 5, "patch_size": 16, "all_affine": False}
    assert cfg.loss.similarity == "mi"
    assert cfg.loss.w_global == pytest.approx(0.5)
    assert cfg.loss.w_bending == pytest.approx(0.02)
    assert cfg.moving_aug.rot_deg == pytest.approx(10)
    assert cfg.moving_aug.shift_mm == pytest.approx(5)
    # untouched moving-aug fields keep their defaults
    assert cfg.moving_aug.scale_lo == pytest.approx(0.8)


def test_parse_config_rejects_unknown_key():
    with pytest.raises(ParseError, match="unknown key"):
        tr.parse_config_text("version = 1\nlearning_rate = 0.1\n")


def test_parse_config_requires_version():
    with pytest.raises(ParseError, match="version"):
        tr.parse_config_text("seed = 3\n")
    with pytest.raises(ParseError, match="version"):
        tr.parse_config_text("version = 2\nseed = 3\n")


def test_parse_config_rejects_bad_value():
    with pytest.raises(ParseError, match="bad value"):
        tr.parse_config_text("version = 1\nseed = eleven\n")


def test_parse_config_rejects_missing_equals():
    with pytest.raises(ParseError, match="key = value"):
        tr.parse_config_text("version = 1\njust some words\n")


def test_load_train_config_from_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("version = 1\nseed = 4\nall_affine = true\n")
    cfg, sched_args = tr.load_train_config(p)
    assert cfg.seed == 4
    assert sched_args["all_affine"] is True


def test_train_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(desk_scale=0.0)
    with pytest.raises(ValueError):
        tr.TrainConfig(desk_scale=1.5)
    with pytest.raises(ValueError):
        tr.TrainConfig(final_iters=0)
    with pytest.raises(ValueError):
        tr.TrainConfig(grad_clip=-1.0)


def test_desk_scale_shrinks_iteration_counts():
    cfg = tr.TrainConfig(iters_per_new_scale=10_000, final_iters=40_000, desk_scale=0.001)
    assert cfg.scaled_iters_per_new_scale == 10
    assert cfg.scaled_final_iters == 40
    tiny = tr.TrainConfig(iters_per_new_scale=3, final_iters=3, desk_scale=0.01)
    assert tiny.scaled_iters_per_new_scale == 1  # never rounds to zero
    assert tiny.scaled_final_iters == 1


# ---------------------------------------------------------------------------
# curriculum plan
# ---------------------------------------------------------------------------


def test_iteration_plan_curriculum():
    cfg = tr.TrainConfig(iters_per_new_scale=2, final_iters=3)
    plan = list(tr._iteration_plan(cfg, n_scales=3))
    actives = [a for _, a, _ in plan]
    assert actives == [1, 1, 2, 2, 3, 3, 3, 3, 3]
    lrs = [lr for _, _, lr in plan]
    # constant peak lr while scales are being added
    assert lrs[:6] == [cfg.lr] * 6
    # cosine decay over the final phase, ending at lr_end
    assert lrs[6] == pytest.approx(cfg.lr)
    assert lrs[-1] == pytest.approx(cfg.lr_end)
    assert lrs[6] > lrs[7] > lrs[8]
    iters = [i for i, _, _ in plan]
    assert iters == list(range(9))
    assert tr._total_iters(cfg, 3) == 9


# ---------------------------------------------------------------------------
# dataset preparation
# ---------------------------------------------------------------------------


def test_prepare_dataset_crops_centers_and_mirrors():
    rng = np.random.default_rng(3)
    data = np.zeros((20, 18, 16), dtype=np.float32)
    data[4:45, 2:12, 3:13] = rng.random((16, 10, 10)).astype(np.float32) + 0.1
    img = vol.ImageStack(data, geo.translate(np.array([5.0, -3.0, 2.0])))
    out = tr.prepare_dataset([img])
    assert len(out) == 2
    base, mirrored = out
    assert base.data.shape == (16, 10, 10)  # zero margin cropped away
    np.testing.assert_allclose(base.center_world(), 0.0, atol=1e-9)
    np.testing.assert_allclose(mirrored.center_world(), 0.0, atol=1e-6)
    # the mirror is a relabeling of the same voxels
    assert base.data.sum() == pytest.approx(mirrored.data.sum())
    assert not np.allclose(base.data, mirrored.data)


# ---------------------------------------------------------------------------
# heads and model files
# ---------------------------------------------------------------------------


def _tiny_schedule(n_scales=3):
    return casc.ScaleSchedule(
        patch_size=16,
        voxel_size_mm=tuple(np.linspace(3.0, 1.0, n_scales)),
        head_group=tuple(3 * t // n_scales for t in range(n_scales)),
    )


def test_build_heads_matches_schedule_kinds():
    heads = tr.build_heads(_tiny_schedule(), seed=0)
    assert sorted(heads) == [0, 1, 2]
    assert type(heads[0]).__name__ == "AffineHead"
    assert type(heads[1]).__name__ == "AffineHead"
    assert type(heads[2]).__name__ == "DenseHead"


def test_build_heads_deterministic():
    a = tr.build_heads(_tiny_schedule(), seed=9)
    b = tr.build_heads(_tiny_schedule(), seed=9)
    for g in a:
        for (n1, p1), (n2, p2) in zip(a[g].state_dict().items(), b[g].state_dict().items()):
            assert n1 == n2
            assert torch.equal(p1, p2)


def test_save_load_model_round_trip(tmp_path):
    sched = _tiny_schedule()
    heads = tr.build_heads(sched, seed=5)
    path = tmp_path / "m.ckpt"
    tr.save_model(path, heads, sched, {"iteration": 42})
    loaded, sched2, meta = tr.load_model(path)
    assert sched2 == sched
    assert meta["iteration"] == 42
    for g in heads:
        ref = heads[g].state_dict()
        got = loaded[g].state_dict()
        assert set(ref) == set(got)
        for name in ref:
            assert torch.equal(ref[name], got[name]), name
        assert not loaded[g].training  # ready for inference


def test_load_model_rejects_foreign_checkpoint(tmp_path):
    path = tmp_path / "other.ckpt"
    save_checkpoint(path, {"x": torch.zeros(3)}, {"format": "something-else"})
    with pytest.raises(ParseError):
        tr.load_model(path)


# ---------------------------------------------------------------------------
# training loop behaviour (tiny synthetic runs)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_dataset():
    cases = [vol.synth_case(seed=s, size=40, warp_voxels=3.0) for s in (0, 1)]
    return tr.prepare_dataset([cases[0].fixed, cases[1].fixed])


def _quick_cfg(**kw):
    kw.setdefault("seed", 3)
    kw.setdefault("pairs_per_iter", 1)
    kw.setdefault("patches_per_pair", 3)
    kw.setdefault("iters_per_new_scale", 2)
    kw.setdefault("final_iters", 2)
    kw.setdefault(
        "moving_aug", geo.AugmentationRanges(rot_deg=10.0, scale_lo=0.95, scale_hi=1.05, shift_mm=3.0)
    )
    return tr.TrainConfig(**kw)


def test_train_writes_model_and_log(tmp_path, tiny_dataset):
    sched = casc.build_schedule(tiny_dataset, n_scales=2, patch_size=16)
    path = tr.train(_quick_cfg(), tiny_dataset, sched, tmp_path / "run")
    assert path.exists()
    records = [json.loads(line) for line in (tmp_path / "run" / "train_log.jsonl").read_text().splitlines()]
    assert len(records) == tr._total_iters(_quick_cfg(), 2)
    for rec in records:
        assert set(rec) >= {"iter", "active_scales", "lr", "loss", "grad_norm_raw", "grad_norm", "terms"}
        assert math.isfinite(rec["loss"])
        # clipping can only shrink the gradient
        assert rec["grad_norm"] <= rec["grad_norm_raw"] + 1e-6
    heads, sched2, meta = tr.load_model(path)
    assert sched2 == sched
    assert meta["iteration"] == len(records)


def test_train_is_bit_identical_across_runs(tmp_path, tiny_dataset):
    sched = casc.build_schedule(tiny_dataset, n_scales=2, patch_size=16)
    p1 = tr.train(_quick_cfg(), tiny_dataset, sched, tmp_path / "a")
    p2 = tr.train(_quick_cfg(), tiny_dataset, sched, tmp_path / "b")
    assert p1.read_bytes() == p2.read_bytes()


def test_gradient_clip_is_enforced(tmp_path, tiny_dataset):
    sched = casc.build_schedule(tiny_dataset, n_scales=2, patch_size=16)
    records = []
    cfg = _quick_cfg(grad_clip=0.05)
    tr.train(cfg, tiny_dataset, sched, tmp_path / "clip", step_callback=lambda r, h: records.append(r))
    assert any(r["grad_norm_raw"] > 0.05 for r in records)  # clip actually engaged
    assert all(r["grad_norm"] <= 0.05 + 1e-6 for r in records)


def test_curriculum_leaves_inactive_groups_at_init(tmp_path, tiny_dataset):
    sched = casc.build_schedule(tiny_dataset, n_scales=3, patch_size=16)
    init = {g: [p.detach().clone() for p in h.parameters()] for g, h in tr.build_heads(sched, 3).items()}
    snapshots = []

    def watch(record, heads):
        if record["active_scales"] == 1 or not snapshots:
            snapshots.append(
                {g: [p.detach().clone() for p in h.parameters()] for g, h in heads.items()}
            )

    cfg = _quick_cfg(iters_per_new_scale=2, final_iters=1)
    tr.train(cfg, tiny_dataset, sched, tmp_path / "cur", step_callback=watch)
    last_single_scale = snapshots[-1]
    # group 0 trains from the first iteration; groups 1 and 2 wait for their scales
    assert any(not torch.equal(a, b) for a, b in zip(init[0], last_single_scale[0]))
    for g in (1, 2):
        for a, b in zip(init[g], last_single_scale[g]):
            assert torch.equal(a, b)


def test_checkpoint_every_writes_intermediate_files(tmp_path, tiny_dataset):
    sched = casc.build_schedule(tiny_dataset, n_scales=2, patch_size=16)
    cfg = _quick_cfg(checkpoint_every=3)
    tr.train(cfg, tiny_dataset, sched, tmp_path / "ck")
    ckpts = sorted((tmp_path / "ck").glob("ckpt_*.ckpt"))
    assert [p.name for p in ckpts] == ["ckpt_000003.ckpt", "ckpt_000006.ckpt"]
    _, _, meta = tr.load_model(ckpts[0])
    assert meta["iteration"] == 3


def test_non_finite_loss_dumps_diagnostics(tmp_path, tiny_dataset):
    sched = casc.build_schedule(tiny_dataset, n_scales=2, patch_size=16)

    def sabotage(record, heads):
        with torch.no_grad():
            for p in heads[0].parameters():
                p.fill_(float("nan"))

    out = tmp_path / "boom"
    with pytest.raises(NonFiniteLoss):
        tr.train(_quick_cfg(), tiny_dataset, sched, out, step_callback=sabotage)
    assert (out / "crash.ckpt").exists()
    info = json.loads((out / "crash.json").read_text())
    assert info["iteration"] >= 1


def test_short_training_reduces_loss(tmp_path, tiny_dataset):
    """A brief coarse-scale run on misaligned pairs should visibly learn."""
    sched = casc.build_schedule(tiny_dataset, n_scales=2, patch_size=16)
    records = []
    cfg = tr.TrainConfig(
        seed=0,
        pairs_per_iter=1,
        patches_per_pair=5,
        iters_per_new_scale=50,
        final_iters=1,
        moving_aug=geo.AugmentationRanges(rot_deg=20.0, scale_lo=0.85, scale_hi=1.15, shift_mm=8.0),
    )
    tr.train(cfg, tiny_dataset, sched, tmp_path / "learn", step_callback=lambda r, h: records.append(r))
    # adding a scale changes what the loss averages over, so compare within phase 1
    losses = [r["loss"] for r in records if r["active_scales"] == 1]
    assert len(losses) == 50
    head = float(np.mean(losses[:10]))
    tail = float(np.mean(losses[-10:]))
    assert tail < head - 0.02, f"no learning: first-10 mean {head:.4f}, last-10 mean {tail:.4f}"
