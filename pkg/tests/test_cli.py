import subprocess
import sys

import numpy as np
import pytest

from condnerf.checkpoint import load_checkpoint, save_checkpoint
from condnerf.cli import build_parser, main
from condnerf.dataset import load_dataset, read_manifest

TINY_TRAIN = [
    "--iterations", "2", "--batch", "2", "--patch", "8", "--disc-widths", "4,8", "--width", "8", "--depth", "2",
    "--latent-dim", "4", "--position-freqs", "2", "--direction-freqs", "1", "--n-coarse", "4", "--n-fine", "2",
    "--lambda-cls", "0", "--lambda-sty", "0",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["dataset", "--out", str(root / "data"), "--classes", "2", "--styles", "2", "--poses", "2",
                 "--size", "8", "--seed", "1"]) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"), *TINY_TRAIN]) == 0
    return root


def _render(workspace, out, *extra):
    return main(["render", "--checkpoint", str(workspace / "run" / "field.ckpt"), "--out", str(out), "--size", "8",
                 *extra])


@pytest.mark.parametrize("command", ["dataset", "pretrain", "train", "render", "eval"])
def test_help_exits_zero_and_lists_every_flag(command, capsys):
    assert main([command, "--help"]) == 0
    text = capsys.readouterr().out
    sub = build_parser()._subparsers._group_actions[0].choices[command]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in text


def test_module_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "condnerf.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "render" in proc.stdout


def test_flag_errors_exit_two(tmp_path, workspace):
    assert main([]) == 2
    assert main(["dataset"]) == 2
    assert main(["dataset", "--out", str(tmp_path), "--poses", "many"]) == 2
    assert main(["dataset", "--out", str(tmp_path / "d"), "--classes", "5"]) == 2
    assert _render(workspace, tmp_path / "r", "--sweep", "color-interp") == 2  # needs --from/--to
    assert _render(workspace, tmp_path / "r", "--sweep", "color-interp", "--from", "0", "--to", "1",
                   "--lambdas", "0,1.5") == 2
    assert _render(workspace, tmp_path / "r", "--values", "1,2") == 2
    # classifier losses without a classifier
    args = [a for a in TINY_TRAIN if a not in ("--lambda-cls", "--lambda-sty", "0")]
    assert main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "t"), *args]) == 2


def test_io_errors_exit_three(tmp_path, workspace, capsys):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o"), *TINY_TRAIN]) == 3
    data = (workspace / "run" / "field.ckpt").read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(data[:-4])
    (tmp_path / "magic.ckpt").write_bytes(b"XXXX0001" + data[8:])
    for name in ("cut.ckpt", "magic.ckpt"):
        assert main(["render", "--checkpoint", str(tmp_path / name), "--out", str(tmp_path / "r")]) == 3
    assert main(["dataset", "--out", str(tmp_path), "--config", str(tmp_path / "nope.cfg")]) == 3
    capsys.readouterr()


def test_concurrent_trainer_is_refused(tmp_path, workspace):
    (tmp_path / "run").mkdir()
    (tmp_path / "run" / "train.lock").write_text("1")
    assert main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "run"), *TINY_TRAIN]) == 3


def test_numeric_abort_exits_four_with_replay(tmp_path, workspace, capsys):
    code = main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "run"), *TINY_TRAIN,
                 "--iterations", "20", "--lr-g", "1e30"])
    err = capsys.readouterr().err
    assert code == 4
    replay = err.split("replay state: ")[1].strip()
    assert replay.endswith(".json") and (tmp_path / "run").joinpath(replay.split("/")[-1]).exists()


def test_checkpoint_round_trip_is_byte_identical(tmp_path, workspace):
    src = workspace / "run" / "field.ckpt"
    save_checkpoint(tmp_path / "again.ckpt", load_checkpoint(src))
    assert (tmp_path / "again.ckpt").read_bytes() == src.read_bytes()


def test_train_writes_metrics_log(workspace):
    lines = (workspace / "run" / "metrics.tsv").read_text().splitlines()
    assert len(lines) == 3 and lines[0] == "iter\tl_adv\tl_cls\tl_sty\tr1\ttotal\tseconds"


@pytest.mark.parametrize("sweep,values,count", [("depth", "3.5,4.0,4.5,5.0", 4), ("shift", "-1.0,0,1.0", 3)])
def test_pose_sweeps_write_indexed_frames(sweep, values, count, tmp_path, workspace):
    assert _render(workspace, tmp_path / sweep, "--sweep", sweep, "--values", values) == 0
    rows = read_manifest(tmp_path / sweep / "manifest.tsv")
    assert [r.path for r in rows] == [f"images/{k:03d}.ppm" for k in range(count)]
    field = "radius" if sweep == "depth" else "shift"
    assert [getattr(r, field) for r in rows] == [float(v) for v in values.split(",")]
    assert load_dataset(tmp_path / sweep).images.shape == (count, 8, 8, 3)


def test_color_interp_at_zero_equals_plain_render(tmp_path, workspace):
    assert _render(workspace, tmp_path / "plain", "--style", "0") == 0
    assert _render(workspace, tmp_path / "mix", "--sweep", "color-interp", "--from", "0", "--to", "1",
                   "--lambdas", "0,0.5,1") == 0
    plain = (tmp_path / "plain" / "images" / "000.ppm").read_bytes()
    assert (tmp_path / "mix" / "images" / "000.ppm").read_bytes() == plain
    assert len(read_manifest(tmp_path / "mix" / "manifest.tsv")) == 3


def test_other_sweeps_use_defaults(tmp_path, workspace):
    assert _render(workspace, tmp_path / "yaw", "--sweep", "yaw-turntable") == 0
    assert len(read_manifest(tmp_path / "yaw" / "manifest.tsv")) == 8
    assert _render(workspace, tmp_path / "dens", "--sweep", "density-interp", "--from", "0", "--to", "1",
                   "--lambdas", "0,1") == 0
    assert len(read_manifest(tmp_path / "dens" / "manifest.tsv")) == 2


def test_config_file_defaults_and_flag_precedence(tmp_path):
    cfg = tmp_path / "gen.cfg"
    cfg.write_text("# desk defaults\nposes=3\nsize = 8\nclasses=1\nstyles=1\nno-shading=true\n")
    assert main(["dataset", "--out", str(tmp_path / "a"), "--config", str(cfg)]) == 0
    assert len(load_dataset(tmp_path / "a")) == 3
    assert main(["dataset", "--out", str(tmp_path / "b"), "--config", str(cfg), "--poses", "2"]) == 0
    assert len(load_dataset(tmp_path / "b")) == 2
    cfg.write_text(f"out={tmp_path / 'c'}\nposes=1\nsize=8\nclasses=1\nstyles=1\n")
    assert main(["dataset", "--config", str(cfg)]) == 0
    (tmp_path / "bad.cfg").write_text("colour=red\n")
    assert main(["dataset", "--out", str(tmp_path / "d"), "--config", str(tmp_path / "bad.cfg")]) == 2
    (tmp_path / "bad2.cfg").write_text("poses=lots\n")
    assert main(["dataset", "--out", str(tmp_path / "d"), "--config", str(tmp_path / "bad2.cfg")]) == 2


def test_seed_gives_bitwise_reproducible_outputs(tmp_path, workspace):
    for name in ("a", "b"):
        assert main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / name), *TINY_TRAIN,
                     "--seed", "5"]) == 0
        assert _render(workspace, tmp_path / f"r{name}", "--seed", "5", "--sweep", "depth") == 0
    assert (tmp_path / "a" / "field.ckpt").read_bytes() == (tmp_path / "b" / "field.ckpt").read_bytes()
    for k in range(4):
        assert (tmp_path / "ra" / "images" / f"{k:03d}.ppm").read_bytes() == \
            (tmp_path / "rb" / "images" / f"{k:03d}.ppm").read_bytes()
    assert main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "c"), *TINY_TRAIN,
                 "--seed", "6"]) == 0
    assert (tmp_path / "c" / "field.ckpt").read_bytes() != (tmp_path / "a" / "field.ckpt").read_bytes()


def test_pretrain_and_eval(tmp_path, workspace, capsys):
    clf = tmp_path / "clf.ckpt"
    assert main(["dataset", "--out", str(tmp_path / "data"), "--classes", "2", "--styles", "2", "--poses", "4",
                 "--size", "8"]) == 0
    assert main(["pretrain", "--data", str(tmp_path / "data"), "--out", str(clf), "--steps", "3",
                 "--resolution", "16", "--batch", "4", "--holdout", "0.25"]) == 0
    out = capsys.readouterr().out
    assert "heldout_class_accuracy" in out and load_checkpoint(clf).meta["kind"] == "classifier"
    assert main(["eval", "--real", str(workspace / "data"), "--generated", str(workspace / "data"),
                 "--classifier", str(clf), "--out", str(tmp_path / "report.tsv")]) == 0
    report = dict(line.split("\t") for line in (tmp_path / "report.tsv").read_text().splitlines()[1:])
    assert float(report["fid"]) <= 1e-6 and float(report["psnr"]) == np.inf
    assert float(report["ssim"]) == pytest.approx(1.0, abs=1e-9)
    # a field checkpoint is not a classifier
    assert main(["eval", "--real", str(workspace / "data"), "--generated", str(workspace / "data"),
                 "--classifier", str(workspace / "run" / "field.ckpt")]) == 2


def test_reconstruction_and_ablation_runs(tmp_path, workspace):
    assert main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "rec"), *TINY_TRAIN,
                 "--mode", "reconstruction", "--fine-network"]) == 0
    assert load_checkpoint(tmp_path / "rec" / "field.ckpt").meta["mode"] == "reconstruction"
    assert _render_from(tmp_path / "rec" / "field.ckpt", tmp_path / "recr") == 0
    for which in ("no_label_input", "no_array_output"):
        assert main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / which), *TINY_TRAIN,
                     "--ablation", which]) == 0
        assert _render_from(tmp_path / which / "field.ckpt", tmp_path / f"{which}_r") == 0


def _render_from(ckpt, out):
    return main(["render", "--checkpoint", str(ckpt), "--out", str(out), "--size", "8"])
