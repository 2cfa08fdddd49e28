"""Command-line surface: exit codes, manifests, reproducible outputs, and
the synth/train/summarize/eval flow on a miniature dataset."""

import json

import pytest

from videograph import cli
from videograph import data as d

CFG_TEXT = """
model.frames = 12
model.objects = 3
model.d_obj = 16
model.d_embed = 8
model.d_model = 8
model.heads = 2
model.d_head = 4
model.gcn_layers = 1
model.refine_iters = 1
model.lambda_frame = 2.0
model.query_mode = word
model.words = 2
model.d_word = 4

train.clip_frames = 12
train.epochs = 2
train.lr = 0.001
train.seed = 5
"""


@pytest.fixture()
def mini(tmp_path):
    cfg = tmp_path / "mini.cfg"
    cfg.write_text(CFG_TEXT)
    data_dir = tmp_path / "data"
    rc = cli.main([
        "synth", "--out", str(data_dir), "--videos", "4", "--frames", "12",
        "--objects", "3", "--events", "2", "--d-obj", "16", "--d-word", "4",
        "--seed", "5",
    ])
    assert rc == 0
    return {"cfg": cfg, "data": data_dir, "tmp": tmp_path}


def test_synth_outputs_and_determinism(mini, tmp_path):
    files = sorted(p.name for p in mini["data"].glob("*.vgf"))
    assert len(files) == 4
    assert (mini["data"] / "split.txt").exists()
    assert (mini["data"] / "manifest-synth.json").exists()
    other = tmp_path / "data2"
    rc = cli.main([
        "synth", "--out", str(other), "--videos", "4", "--frames", "12",
        "--objects", "3", "--events", "2", "--d-obj", "16", "--d-word", "4",
        "--seed", "5",
    ])
    assert rc == 0
    for name in files:
        assert (mini["data"] / name).read_bytes() == (other / name).read_bytes()


def test_synth_rejects_single_event(tmp_path, capsys):
    rc = cli.main(["synth", "--out", str(tmp_path / "x"), "--events", "1"])
    assert rc == 2
    assert "usage error" in capsys.readouterr().err


def test_train_summarize_eval_flow(mini, capsys):
    run = mini["tmp"] / "run"
    rc = cli.main([
        "train", "--data", str(mini["data"]), "--out", str(run),
        "--config", str(mini["cfg"]), "--mode", "sup-bin",
    ])
    assert rc == 0
    out = capsys.readouterr().out
    assert "epoch" in out and "val_f" in out
    assert (run / "checkpoint.vgck").exists()
    assert (run / "history.json").exists()
    assert (run / "manifest-train.json").exists()

    preds = mini["tmp"] / "preds"
    split = d.read_split(mini["data"] / "split.txt")
    for vid in split.test:
        rc = cli.main([
            "summarize", "--checkpoint", str(run / "checkpoint.vgck"),
            "--container", str(mini["data"] / f"{vid}.vgf"),
            "--out", str(preds), "--config", str(mini["cfg"]), "--plot-data",
        ])
        assert rc == 0
        payload = json.loads((preds / f"{vid}.summary.json").read_text())
        assert len(payload["scores"]) == 12
        assert set(payload["keyshot"]) <= {0, 1}
        assert (preds / f"{vid}.dominance.txt").exists()
        assert (preds / f"{vid}.plot.txt").exists()

    rc = cli.main([
        "eval", "--pred", str(preds), "--gt", str(mini["data"]),
        "--aggregation", "mean",
    ])
    assert rc == 0
    report = json.loads((preds / "report.json").read_text())
    assert set(report["videos"]) == set(split.test)
    assert 0.0 <= report["mean"]["f_score"] <= 1.0
    text = (preds / "report.txt").read_text()
    assert "mean.f_score=" in text


def test_eval_perfect_predictions_score_one(mini, tmp_path):
    # summaries crafted from the groundtruth itself must score F=1, tau=rho=1
    import numpy as np

    from videograph import evaluation as ev

    preds = tmp_path / "perfect"
    preds.mkdir()
    split = d.read_split(mini["data"] / "split.txt")
    for vid in split.test:
        fs = d.read_features(mini["data"] / f"{vid}.vgf")
        scores = fs.gt_scores[0].astype(float)
        summary = ev.scores_to_keyshots(
            scores, features=fs.frame_features(), budget_ratio=0.3,
            picks=fs.picks.astype(np.int64), n_frames_original=fs.n_frames_original,
        )
        assert summary.vector.sum() > 0
        (preds / f"{vid}.summary.json").write_text(json.dumps({
            "video_id": vid,
            "scores": [float(s) for s in scores],
            "picks": [int(p) for p in fs.picks],
            "keyshot": [int(v) for v in summary.vector],
            "n_frames_original": fs.n_frames_original,
            "budget_ratio": 0.3,
            "selected_segments": summary.selected_segments,
        }))
    rc = cli.main(["eval", "--pred", str(preds), "--gt", str(mini["data"])])
    assert rc == 0
    report = json.loads((preds / "report.json").read_text())
    assert report["mean"]["f_score"] == pytest.approx(1.0)
    assert report["mean"]["kendall_tau"] == pytest.approx(1.0)
    assert report["mean"]["spearman_rho"] == pytest.approx(1.0)


def test_summarize_budget_zero_empty_summary(mini):
    run = mini["tmp"] / "run0"
    assert cli.main([
        "train", "--data", str(mini["data"]), "--out", str(run),
        "--config", str(mini["cfg"]), "--mode", "sup-bin", "--epochs", "1",
    ]) == 0
    split = d.read_split(mini["data"] / "split.txt")
    vid = split.test[0]
    out = mini["tmp"] / "zero"
    rc = cli.main([
        "summarize", "--checkpoint", str(run / "checkpoint.vgck"),
        "--container", str(mini["data"] / f"{vid}.vgf"),
        "--out", str(out), "--config", str(mini["cfg"]), "--budget", "0.0",
    ])
    assert rc == 0
    payload = json.loads((out / f"{vid}.summary.json").read_text())
    assert sum(payload["keyshot"]) == 0


def test_summarize_unknown_query_word_falls_back(mini):
    run = mini["tmp"] / "runq"
    assert cli.main([
        "train", "--data", str(mini["data"]), "--out", str(run),
        "--config", str(mini["cfg"]), "--mode", "sup-bin", "--epochs", "1",
    ]) == 0
    split = d.read_split(mini["data"] / "split.txt")
    vid = split.test[0]
    out = mini["tmp"] / "qout"
    with pytest.warns(UserWarning, match="null query"):
        rc = cli.main([
            "summarize", "--checkpoint", str(run / "checkpoint.vgck"),
            "--container", str(mini["data"] / f"{vid}.vgf"),
            "--out", str(out), "--config", str(mini["cfg"]),
            "--query", "zeppelin,unicorn",
        ])
    assert rc == 0


def test_train_corrupt_container_exits_one(mini, capsys):
    split = d.read_split(mini["data"] / "split.txt")
    victim = mini["data"] / f"{split.train[0]}.vgf"
    victim.write_bytes(victim.read_bytes()[:20])
    rc = cli.main([
        "train", "--data", str(mini["data"]), "--out", str(mini["tmp"] / "bad"),
        "--config", str(mini["cfg"]), "--mode", "sup-bin",
    ])
    assert rc == 1
    assert "error" in capsys.readouterr().err


def test_unknown_flag_exits_two(mini):
    with pytest.raises(SystemExit) as err:
        cli.main(["train", "--data", str(mini["data"]), "--qux", "1"])
    assert err.value.code == 2


def test_eval_all_missing_groundtruth_fails(mini, tmp_path):
    preds = tmp_path / "orphan"
    preds.mkdir()
    (preds / "ghost.summary.json").write_text(json.dumps({
        "video_id": "ghost", "scores": [0.5], "picks": [0], "keyshot": [1],
        "n_frames_original": 1, "budget_ratio": 0.15, "selected_segments": [0],
    }))
    rc = cli.main(["eval", "--pred", str(preds), "--gt", str(tmp_path / "nowhere")])
    assert rc == 1


def test_gradcheck_passes_and_respects_tolerance(capsys):
    assert cli.main(["gradcheck", "--frames", "4", "--objects", "3",
                     "--iterations", "1"]) == 0
    out = capsys.readouterr().out
    assert "full_model" in out and "FAIL" not in out
    # an absurd tolerance flags every check
    assert cli.main(["gradcheck", "--frames", "4", "--objects", "3",
                     "--iterations", "1", "--tolerance", "1e-18"]) == 1


def test_manifest_contents(mini):
    manifest = json.loads((mini["data"] / "manifest-synth.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["seed"] == 5
    assert manifest["config"]["frames"] == 12
    assert any(path.endswith("split.txt") for path in manifest["outputs"])
    assert "git_describe" in manifest


def test_config_file_parsing(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("model.frames = 24\n# comment\ntrain.lr = 0.5\nloss.rho = 2.5\n")
    values = cli.read_config_file(cfg)
    assert values == {"model.frames": "24", "train.lr": "0.5", "loss.rho": "2.5"}
    bad = tmp_path / "bad.cfg"
    bad.write_text("model.frames 24\n")
    from videograph.errors import ConfigError
    with pytest.raises(ConfigError):
        cli.read_config_file(bad)
