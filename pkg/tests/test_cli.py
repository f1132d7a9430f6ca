import csv
import os

import numpy as np
import pytest

from transfusor import checkpoint as K
from transfusor import diffusion
from transfusor import tensor as T
from transfusor.cli import main
from transfusor.data import read_corpus, read_trajectories


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("--out", root / "raw", "--no-figures", "synth", "--count", 3) == 0
    assert run("--out", root / "corpus", "--no-figures", "extract", root / "raw" / "tracks.csv") == 0
    assert run("--out", root / "model", "--no-figures", "train", root / "corpus", "--epochs", 2,
               "--checkpoint-every", 1) == 0
    return root


def test_synth_and_extract_agree_with_ground_truth(workspace):
    with open(workspace / "raw" / "ground_truth.csv") as fh:
        truth = list(csv.DictReader(fh))
    corpus = read_corpus(workspace / "corpus")
    assert len(truth) == len(corpus) == 36
    by_vehicle = {t.vehicle_id: t for t in corpus.trajectories}
    for row in truth:
        t = by_vehicle[int(row["vehicle_id"])]
        assert t.cbt_frame == int(row["cbt_frame"])
        assert t.label.direction == row["label"].split("/")[1]
        assert len(t.points) == 15


def test_synth_seed_determinism(tmp_path):
    for name in ("a", "b"):
        assert run("--out", tmp_path / name, "--seed", 4, "synth", "--count", 1) == 0
    assert (tmp_path / "a" / "tracks.csv").read_bytes() == (tmp_path / "b" / "tracks.csv").read_bytes()


def test_synth_bad_spec(tmp_path):
    spec = tmp_path / "spec.txt"
    spec.write_text("count = 0\n")
    assert run("--out", tmp_path, "synth", "--spec", spec) == 2
    spec.write_text("colour = red\n")
    assert run("--out", tmp_path, "synth", "--spec", spec) == 2


def test_single_track_fixture_gives_one_trajectory(tmp_path):
    rows = ["frame,id,x,y,xVelocity,yVelocity,laneId,drivingDirection,vehicleClass"]
    for f in range(150):
        lane = 2 if f >= 75 else 1
        rows.append(f"{f},1,{f:.1f},{0.01 * f:.2f},25.0,0.25,{lane},1,car")
    (tmp_path / "t.csv").write_text("\n".join(rows) + "\n")
    assert run("--out", tmp_path / "c", "--no-figures", "extract", tmp_path / "t.csv") == 0
    corpus = read_corpus(tmp_path / "c")
    assert len(corpus) == 1 and corpus.trajectories[0].points.shape == (15, 2)


def test_extract_unreadable(tmp_path, capsys):
    assert run("--out", tmp_path, "extract", tmp_path / "missing.csv") != 0
    assert "missing.csv" in capsys.readouterr().err


def test_extract_malformed_reports_line(tmp_path, capsys):
    (tmp_path / "t.csv").write_text("frame,id,x,y,xVelocity,yVelocity,laneId,drivingDirection,vehicleClass\n"
                                    "0,1,0,0,25,0,1,1,car\n1,1,zero,0,25,0,1,1,car\n")
    assert run("--out", tmp_path / "c", "extract", tmp_path / "t.csv") == 1
    err = capsys.readouterr().err
    assert "line 3" in err and "'x'" in err


def test_stats(workspace, tmp_path, capsys):
    assert run("--out", tmp_path, "stats", workspace / "corpus") == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("method,direction,vehicle")
    assert lines[-1].split(",")[5] == "36"


def test_train_outputs_and_determinism(workspace, tmp_path):
    ckpt = K.load(workspace / "model" / "model.trsf")
    assert ckpt.kind == "transfusor" and ckpt.metadata["epochs"] == "2"
    log = (workspace / "model" / "loss.csv").read_text().splitlines()
    assert log[0] == "epoch,loss" and len(log) == 3
    assert run("--out", tmp_path, "--no-figures", "train", workspace / "corpus", "--epochs", 2) == 0
    assert (tmp_path / "loss.csv").read_text() == (workspace / "model" / "loss.csv").read_text()
    config = (workspace / "model" / "run_config.txt").read_text()
    assert "epochs = 2" in config and "corpus_fingerprint = " in config


def test_train_cvae(workspace, tmp_path):
    assert run("--out", tmp_path, "--no-figures", "train", workspace / "corpus", "--model", "cvae",
               "--epochs", 1) == 0
    assert K.load(tmp_path / "model.trsf").kind == "cvae"


def test_nan_loss_keeps_last_good_checkpoint(workspace, tmp_path, monkeypatch):
    real = diffusion.training_loss
    calls = []

    def flaky(*args, **kw):
        calls.append(1)
        loss = real(*args, **kw)
        return loss * float("nan") if len(calls) > 1 else loss

    monkeypatch.setattr(diffusion, "training_loss", flaky)
    code = run("--out", tmp_path, "--no-figures", "train", workspace / "corpus", "--epochs", 3,
               "--checkpoint-every", 1)
    assert code == 1
    ckpt = K.load(tmp_path / "model.trsf")
    assert ckpt.metadata["epochs"] == "1"
    assert all(np.all(np.isfinite(v)) for v in ckpt.params.values())


def test_generate_layouts(workspace, tmp_path):
    model = workspace / "model" / "model.trsf"
    assert run("--out", tmp_path / "all", "--no-figures", "generate", model, "-n", 2) == 0
    items = read_trajectories(tmp_path / "all" / "generated.csv")
    assert len(items) == 24 and sorted({c for _, c, _ in items}) == list(range(12))
    assert all(p.shape == (15, 2) for _, _, p in items)
    assert run("--out", tmp_path / "zero", "generate", model, "-n", 0) == 0
    assert (tmp_path / "zero" / "generated.csv").read_text() == "traj_id,category_index,point_index,x,y\n"


def test_generate_reproducible(workspace, tmp_path):
    model = workspace / "model" / "model.trsf"
    for name in ("a", "b"):
        assert run("--out", tmp_path / name, "--no-figures", "--seed", 9, "generate", model,
                   "--category", "truck/right/over", "-n", 3) == 0
    assert (tmp_path / "a" / "generated.csv").read_bytes() == (tmp_path / "b" / "generated.csv").read_bytes()


def test_generate_bad_category(workspace, tmp_path, capsys):
    assert run("--out", tmp_path, "generate", workspace / "model" / "model.trsf", "--category", "bus/left/low") == 2
    assert "car/left/low" in capsys.readouterr().err


def test_evaluate_reports(workspace, tmp_path):
    assert run("--out", workspace / "cvae", "--no-figures", "train", workspace / "corpus", "--model", "cvae",
               "--epochs", 1) == 0
    assert run("--out", tmp_path, "--no-figures", "evaluate", workspace / "corpus",
               "--checkpoint", workspace / "model" / "model.trsf",
               "--checkpoint", workspace / "cvae" / "model.trsf", "--n-gen", 4) == 0
    with open(tmp_path / "coverage.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 48
    assert {r["method"] for r in rows} == {"transfusor", "cvae"}
    assert {r["threshold_m"] for r in rows} == {"0.5", "1"}
    for a, b in zip(rows[0::2], rows[1::2]):
        assert float(a["c1"]) <= float(b["c1"]) and float(a["c2"]) <= float(b["c2"])


def test_evaluate_refuses_foreign_corpus(workspace, tmp_path, capsys):
    assert run("--out", tmp_path / "raw", "--seed", 1, "synth", "--count", 2) == 0
    assert run("--out", tmp_path / "other", "--no-figures", "extract", tmp_path / "raw" / "tracks.csv") == 0
    code = run("--out", tmp_path, "evaluate", tmp_path / "other", "--checkpoint", workspace / "model" / "model.trsf")
    assert code == 2 and "trained on corpus" in capsys.readouterr().err


def test_viz_defaults(workspace, tmp_path):
    assert run("--out", tmp_path, "viz", workspace / "model" / "model.trsf", "-n", 8) == 0
    names = sorted(os.listdir(tmp_path))
    assert [n for n in names if n.startswith("kde_step")] == [f"kde_step{k:03d}.csv" for k in (0, 20, 40, 60, 80, 100)]
    assert "kde_ladder.png" in names
    with open(tmp_path / "kde_step040.csv") as fh:
        lines = fh.read().splitlines()
    assert lines[1] == "step,k,x,y,density" and lines[2].startswith("3,40,")


def test_viz_step_zero_matches_generate(workspace, tmp_path):
    model = workspace / "model" / "model.trsf"
    assert run("--out", tmp_path / "v", "--no-figures", "--seed", 3, "viz", model, "--steps", "0", "-n", 4) == 0
    assert run("--out", tmp_path / "g", "--no-figures", "--seed", 3, "generate", model,
               "--category", "car/left/normal", "-n", 4) == 0
    snap = read_trajectories(tmp_path / "v" / "snapshot_step000.csv")
    gen = read_trajectories(tmp_path / "g" / "generated.csv")
    assert all(np.array_equal(a[2], b[2]) for a, b in zip(snap, gen))


def test_viz_step_out_of_range(workspace, tmp_path):
    assert run("--out", tmp_path, "viz", workspace / "model" / "model.trsf", "--steps", "101") == 2


def test_viz_needs_transfusor(workspace, tmp_path):
    assert run("--out", tmp_path / "c", "--no-figures", "train", workspace / "corpus", "--model", "cvae",
               "--epochs", 1) == 0
    assert run("--out", tmp_path, "viz", tmp_path / "c" / "model.trsf") == 2


def test_config_file_and_override(workspace, tmp_path):
    cfg = tmp_path / "run.txt"
    cfg.write_text("n = 2\ncategory = 5\nseed = 7\n")
    assert run("--config", cfg, "--out", tmp_path / "o", "--no-figures", "generate",
               workspace / "model" / "model.trsf", "-n", 1) == 0
    items = read_trajectories(tmp_path / "o" / "generated.csv")
    assert len(items) == 1 and items[0][1] == 5
    echoed = (tmp_path / "o" / "run_config.txt").read_text()
    assert "seed = 7" in echoed and "n = 1" in echoed


def test_bad_config_key(tmp_path):
    cfg = tmp_path / "run.txt"
    cfg.write_text("epoch = 3\n")
    assert run("--config", cfg, "--out", tmp_path, "synth", "--count", 1) == 2


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("TRANSFUSOR_OUT", str(tmp_path / "envout"))
    assert run("synth", "--count", 1) == 0
    assert (tmp_path / "envout" / "tracks.csv").exists()


def test_figures_rendered_by_default(workspace, tmp_path):
    assert run("--out", tmp_path, "generate", workspace / "model" / "model.trsf", "-n", 2) == 0
    assert (tmp_path / "generated.png").read_bytes()[:4] == b"\x89PNG"


def test_sampling_uses_loaded_parameters(workspace):
    model, _ = K.load_model(workspace / "model" / "model.trsf")
    out = diffusion.sample_trajectories(model, 0, 2, T.SeededRng(0))
    assert out.shape == (2, 14, 2) and np.all(np.isfinite(out))
