import json
from pathlib import Path

import numpy as np
import pytest

from patchreg import cli
from patchreg import geometry as geo
from patchreg import inference as inf
from patchreg import trainer as tr
from patchreg import volumes as vol

TINY_CONFIG = """
version = 1
seed = 5
n_scales = 2
patch_size = 16
pairs_per_iter = 1
patches_per_pair = 2
iters_per_new_scale = 1
final_iters = {final_iters}
"""


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synthdata")
    assert cli.main(["synth", str(d), "--n", "2", "--size", "24", "--seed", "3"]) == 0
    return d


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, synth_dir):
    run = tmp_path_factory.mktemp("trainrun")
    cfg = run / "train.cfg"
    cfg.write_text(TINY_CONFIG.format(final_iters=1))
    assert cli.main(["train", str(cfg), str(synth_dir), str(run)]) == 0
    return run


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def test_synth_writes_case_files_and_manifest(synth_dir):
    for stem in ("fixed", "moving", "fixed_labels", "moving_labels", "true_field"):
        assert (synth_dir / f"case000_{stem}.nii").exists()
        assert (synth_dir / f"case001_{stem}.nii").exists()
    manifest = json.loads((synth_dir / "manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["seed"] == 3
    assert len(manifest["artifacts"]) == 10
    assert "patchreg" in manifest["versions"]


def test_synth_is_reproducible(tmp_path, synth_dir):
    again = tmp_path / "again"
    assert cli.main(["synth", str(again), "--n", "1", "--size", "24", "--seed", "3"]) == 0
    a = (synth_dir / "case000_fixed.nii").read_bytes()
    b = (again / "case000_fixed.nii").read_bytes()
    assert a == b


def test_synth_labels_cover_foreground(synth_dir):
    img = vol.load_image(synth_dir / "case000_fixed.nii")
    labels = vol.load_labels(synth_dir / "case000_fixed_labels.nii")
    fg = img.data > 0
    covered = (labels.data > 0) & fg
    assert covered.sum() / fg.sum() > 0.10


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def test_train_writes_model_log_and_manifest(trained_dir):
    assert (trained_dir / "model.ckpt").exists()
    heads, schedule, meta = tr.load_model(trained_dir / "model.ckpt")
    assert schedule.n_scales == 2
    assert meta["iteration"] == 3  # 2 scales x 1 iter + 1 final
    log = (trained_dir / "train_log.jsonl").read_text().splitlines()
    assert len(log) == 3
    manifest = json.loads((trained_dir / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["config"]["version"] == 1
    # the data inputs are digested for replay
    assert any(k.endswith("_fixed.nii") for k in manifest["inputs"])


def test_train_resume_continues_iteration_count(tmp_path, synth_dir, trained_dir):
    cfg = tmp_path / "longer.cfg"
    cfg.write_text(TINY_CONFIG.format(final_iters=3))
    out = tmp_path / "resumed"
    rc = cli.main(
        ["train", str(cfg), str(synth_dir), str(out), "--resume", str(trained_dir / "model.ckpt")]
    )
    assert rc == 0
    _, _, meta = tr.load_model(out / "model.ckpt")
    assert meta["iteration"] == 5  # 2 + 3, continued past the first run's 3
    records = [json.loads(l) for l in (out / "train_log.jsonl").read_text().splitlines()]
    assert [r["iter"] for r in records] == [3, 4]


def test_train_missing_data_dir(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY_CONFIG.format(final_iters=1))
    assert cli.main(["train", str(cfg), str(tmp_path / "nowhere"), str(tmp_path / "out")]) == 3
    assert "not found" in capsys.readouterr().err


def test_train_rejects_bad_config(tmp_path, synth_dir):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("version = 1\nnot_a_key = 2\n")
    assert cli.main(["train", str(cfg), str(synth_dir), str(tmp_path / "out")]) == 3


# ---------------------------------------------------------------------------
# register
# ---------------------------------------------------------------------------


def test_register_writes_field_and_manifest(tmp_path, synth_dir, trained_dir):
    out = tmp_path / "ddf.nii"
    rc = cli.main(
        [
            "register", str(trained_dir / "model.ckpt"),
            str(synth_dir / "case000_fixed.nii"), str(synth_dir / "case000_moving.nii"),
            str(out), "--seed", "7",
        ]
    )
    assert rc == 0
    field = vol.load_field(out)
    assert field.data.shape[-1] == 3
    manifest = json.loads((tmp_path / "ddf.manifest.json").read_text())
    assert manifest["command"] == "register"
    assert manifest["seed"] == 7
    assert set(manifest["inputs"]) == {"model", "fixed", "moving"}


def test_register_same_seed_bit_identical(tmp_path, synth_dir, trained_dir):
    paths = [tmp_path / "a.nii", tmp_path / "b.nii"]
    for p in paths:
        rc = cli.main(
            [
                "register", str(trained_dir / "model.ckpt"),
                str(synth_dir / "case000_fixed.nii"), str(synth_dir / "case000_moving.nii"),
                str(p), "--seed", "11",
            ]
        )
        assert rc == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_register_repeat_finest_and_canvas_scale(tmp_path, synth_dir, trained_dir):
    out = tmp_path / "hi.nii"
    rc = cli.main(
        [
            "register", str(trained_dir / "model.ckpt"),
            str(synth_dir / "case000_fixed.nii"), str(synth_dir / "case000_moving.nii"),
            str(out), "--repeat-finest", "2", "--canvas-scale", "2",
        ]
    )
    assert rc == 0
    base = tmp_path / "base.nii"
    cli.main(
        [
            "register", str(trained_dir / "model.ckpt"),
            str(synth_dir / "case000_fixed.nii"), str(synth_dir / "case000_moving.nii"),
            str(base),
        ]
    )
    hi = vol.load_field(out)
    lo = vol.load_field(base)
    assert all(a == 2 * b - 1 for a, b in zip(hi.data.shape[:3], lo.data.shape[:3]))


def test_register_missing_model_is_data_error(tmp_path, synth_dir):
    rc = cli.main(
        [
            "register", str(tmp_path / "no.ckpt"),
            str(synth_dir / "case000_fixed.nii"), str(synth_dir / "case000_moving.nii"),
            str(tmp_path / "out.nii"),
        ]
    )
    assert rc == 3


# ---------------------------------------------------------------------------
# warp
# ---------------------------------------------------------------------------


def _zero_ddf_file(path, like: vol.ImageStack):
    grid = inf.ddf_grid(geo.make_canvas(like), 2.0)
    vol.save_field(path, grid.to_field())
    return path


def test_warp_zero_field_identity(tmp_path, synth_dir):
    moving = vol.load_image(synth_dir / "case000_moving.nii")
    ddf = _zero_ddf_file(tmp_path / "zero.nii", moving)
    out = tmp_path / "warped.nii"
    rc = cli.main(
        ["warp", str(ddf), str(synth_dir / "case000_moving.nii"), str(out),
         "--like", str(synth_dir / "case000_moving.nii")]
    )
    assert rc == 0
    warped = vol.load_image(out)
    np.testing.assert_array_equal(warped.data, moving.data)
    assert (tmp_path / "warped.manifest.json").exists()


def test_warp_labels_nearest(tmp_path, synth_dir):
    labels = vol.load_labels(synth_dir / "case000_moving_labels.nii")
    ddf = _zero_ddf_file(tmp_path / "zero.nii", vol.load_image(synth_dir / "case000_moving.nii"))
    out = tmp_path / "warped_labels.nii"
    rc = cli.main(
        ["warp", str(ddf), str(synth_dir / "case000_moving_labels.nii"), str(out),
         "--labels", "--like", str(synth_dir / "case000_moving_labels.nii")]
    )
    assert rc == 0
    warped = vol.load_labels(out)
    np.testing.assert_array_equal(warped.data, labels.data)


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def test_evaluate_true_field_beats_baseline(tmp_path, synth_dir, capsys):
    manifest = tmp_path / "eval.json"
    manifest.write_text(
        json.dumps(
            {
                "cases": [
                    {
                        "name": "case000",
                        "fixed": str(synth_dir / "case000_fixed.nii"),
                        "fixed_labels": str(synth_dir / "case000_fixed_labels.nii"),
                        "moving_labels": str(synth_dir / "case000_moving_labels.nii"),
                        "ddf": str(synth_dir / "case000_true_field.nii"),
                    }
                ]
            }
        )
    )
    out = tmp_path / "report.jsonl"
    rc = cli.main(["evaluate", str(manifest), "--out", str(out)])
    assert rc == 0
    table = capsys.readouterr().out
    assert "dice_avg_after" in table and "case000" in table
    rec = json.loads(out.read_text().splitlines()[0])
    assert rec["dice_avg_after"] > rec["dice_avg_before"]
    assert rec["dice_avg_after"] > 0.8  # the true warp nearly recovers the labels
    assert (tmp_path / "report.manifest.json").exists()


def test_evaluate_self_pair_is_perfect(tmp_path, synth_dir, capsys):
    moving = vol.load_image(synth_dir / "case000_fixed.nii")
    zero = _zero_ddf_file(tmp_path / "zero.nii", moving)
    manifest = tmp_path / "eval.json"
    manifest.write_text(
        json.dumps(
            {
                "cases": [
                    {
                        "fixed_labels": str(synth_dir / "case000_fixed_labels.nii"),
                        "moving_labels": str(synth_dir / "case000_fixed_labels.nii"),
                        "ddf": str(zero),
                    }
                ]
            }
        )
    )
    assert cli.main(["evaluate", str(manifest)]) == 0
    out = capsys.readouterr().out
    assert "1.0" in out


def test_evaluate_empty_manifest_is_data_error(tmp_path, capsys):
    manifest = tmp_path / "empty.json"
    manifest.write_text(json.dumps({"cases": []}))
    assert cli.main(["evaluate", str(manifest)]) == 3
    assert "no cases" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# exit codes / plumbing
# ---------------------------------------------------------------------------


def test_usage_error_exits_two():
    with pytest.raises(SystemExit) as exc:
        cli.main(["register"])  # missing required arguments
    assert exc.value.code == 2


def test_unknown_command_exits_two():
    with pytest.raises(SystemExit) as exc:
        cli.main(["transmogrify"])
    assert exc.value.code == 2
