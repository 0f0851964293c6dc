import csv
import json

import numpy as np
import pytest

from daf import cli, synthworld as sw
from daf.tensor import read_checkpoint_header

from pipeline import output_files, run, run_pipeline, write_config


@pytest.fixture(scope="module")
def pipeline_dirs(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("pipeline"))


# ---------------------------------------------------------------- config handling

def test_parse_config_text():
    raw = cli.parse_config_text("# comment\nseed = 4  # trailing\n\nepisodes=10\n")
    assert raw == {"seed": "4", "episodes": "10"}
    with pytest.raises(cli.UsageError, match="duplicate"):
        cli.parse_config_text("seed = 1\nseed = 2\n")
    with pytest.raises(cli.UsageError, match=":1:"):
        cli.parse_config_text("seed 1\n")


def test_resolve_config_defaults_and_override():
    cfg = cli.resolve_config("synth", {"episodes": "12"}, seed=9)
    assert cfg["episodes"] == 12 and cfg["seed"] == 9 and cfg["types"] == 10
    with pytest.raises(cli.UsageError, match="colour"):
        cli.resolve_config("synth", {"colour": "red"})
    with pytest.raises(cli.UsageError, match="'dataset'"):
        cli.resolve_config("train", {})
    with pytest.raises(cli.UsageError, match="'episodes'"):
        cli.resolve_config("synth", {"episodes": "many"})


def test_format_config_roundtrip():
    cfg = cli.resolve_config("navigate", {"dataset": "d", "checkpoint": "c", "trajectories": "no"})
    again = cli.resolve_config("navigate", cli.parse_config_text(cli.format_config(cfg)))
    assert again == cfg


# ---------------------------------------------------------------- exit codes

def test_usage_errors_exit_1(tmp_path, capsys):
    assert cli.main(["synth", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)]) == 1
    assert "config file not found" in capsys.readouterr().err
    cfg = write_config(tmp_path / "bad.cfg", episodes=5, colour="red")
    assert run("synth", cfg, tmp_path / "o1") == 1
    assert "colour" in capsys.readouterr().err
    assert cli.main(["frobnicate", "--config", str(cfg)]) == 1
    capsys.readouterr()


def test_synth_rejects_single_type(tmp_path, capsys):
    cfg = write_config(tmp_path / "t.cfg", types=1, episodes=5)
    assert run("synth", cfg, tmp_path / "out") == 1
    assert "types" in capsys.readouterr().err


def test_runtime_error_exit_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "t.cfg", dataset=tmp_path / "absent.dafset")
    assert run("train", cfg, tmp_path / "out") == 2
    err = capsys.readouterr().err
    assert "absent.dafset" in err
    assert (tmp_path / "out" / "config.resolved").exists()


def test_report_missing_run_names_path(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    missing.mkdir()
    cfg = write_config(tmp_path / "r.cfg", runs=missing)
    assert run("report", cfg, tmp_path / "out") == 2
    assert str(missing) in capsys.readouterr().err


def test_empty_selection_is_usage_error(pipeline_dirs, tmp_path, capsys):
    data = pipeline_dirs["synth"] / "dataset.dafset"
    small = tmp_path / "tiny"
    assert run("synth", write_config(tmp_path / "s.cfg", seed=3, episodes=5), small) == 0
    cfg = write_config(tmp_path / "e.cfg", dataset=small / "dataset.dafset", epochs=1,
                       train_class="kitchen", test_class="study")
    assert run("eval-props", cfg, tmp_path / "out") == 1
    assert "no kitchen test episodes" in capsys.readouterr().err
    assert data.exists()


def test_lossmap_episode_out_of_range(pipeline_dirs, tmp_path, capsys):
    data = pipeline_dirs["synth"] / "dataset.dafset"
    cfg = write_config(tmp_path / "l.cfg", dataset=data, mode="oracle", episode=999)
    assert run("lossmap", cfg, tmp_path / "out") == 1
    assert "episode" in capsys.readouterr().err


# ---------------------------------------------------------------- outputs

def test_config_resolved_echo(pipeline_dirs):
    text = (pipeline_dirs["synth"] / "config.resolved").read_text()
    cfg = cli.parse_config_text(text)
    assert cfg["seed"] == "4" and cfg["episodes"] == "30" and cfg["types"] == "10"
    assert (pipeline_dirs["synth"] / "run.log").exists()


def test_synth_output_readable(pipeline_dirs):
    ds = sw.Dataset(pipeline_dirs["synth"] / "dataset.dafset")
    assert len(ds) == 30 and ds.n_types == 10 and ds.n_materials == 5


def test_train_outputs(pipeline_dirs):
    with open(pipeline_dirs["train"] / "losses.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["epoch"]) for r in rows] == [1, 2]
    assert all(np.isfinite(float(r["total"])) for r in rows)
    header = read_checkpoint_header(pipeline_dirs["train"] / "model.ckpt")
    assert header["arch"]["target"] == "psd"


def test_train_target_flag_changes_generator(pipeline_dirs, tmp_path):
    data = pipeline_dirs["synth"] / "dataset.dafset"
    cfg = write_config(tmp_path / "t.cfg", dataset=data, epochs=1)
    shapes = {}
    for target in ("psd", "stft"):
        out = tmp_path / target
        assert cli.main(["train", "--config", str(cfg), "--out", str(out), "--target", target]) == 0
        header = read_checkpoint_header(out / "model.ckpt")
        shapes[target] = dict(header["tensors"])["gen2.w"]
    assert shapes["psd"][-1] == 258 and shapes["stft"][-1] == 1024


def test_eval_props_outputs(pipeline_dirs):
    props = json.loads((pipeline_dirs["eval"] / "props.json").read_text())
    assert props["episodes"] == 30
    assert 0 <= props["top1_acc"] <= props["top3_acc"] <= 1
    cross = json.loads((pipeline_dirs["cross"] / "props.json").read_text())
    assert cross["train_class"] == "kitchen" and cross["test_class"] == "study"
    assert {"same_class", "cross_class"} <= set(cross)


def test_lossmap_outputs_consistent(pipeline_dirs):
    for name in ("lossmap", "oracle_map"):
        d = pipeline_dirs[name]
        img = cli.read_pgm(d / "lossmap.pgm")
        assert img.shape == (100, 100)
        with open(d / "lossmap.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 10_000
        best = min(rows, key=lambda r: float(r["value"]))
        i, j = int(best["row"]), int(best["col"])
        # image row 0 is ego y = +4.95, image column is ego x
        assert img[99 - j, i] == 0 == img.min()
        summary = json.loads((d / "lossmap.json").read_text())
        np.testing.assert_allclose(summary["argmin_ego"], [float(best["x_ego"]), float(best["y_ego"])])


def test_pgm_roundtrip(tmp_path):
    img = np.arange(100 * 60, dtype=np.uint8).reshape(60, 100)
    cli.write_pgm(tmp_path / "a.pgm", img)
    np.testing.assert_array_equal(cli.read_pgm(tmp_path / "a.pgm"), img)
    v = np.zeros((100, 100))
    v[3, 7] = 1.0
    out = cli.lossmap_image(v)
    assert out[92, 3] == 255 and out.sum() == 255


def test_navigate_outputs(pipeline_dirs):
    d = pipeline_dirs["navigate"]
    metrics = json.loads((d / "metrics.json").read_text())
    assert set(metrics) == {"full", "no-lossmap", "random", "oracle"}
    for policy, m in metrics.items():
        res = json.loads((d / f"results_{policy}.json").read_text())
        assert len(res["episodes"]) == m["episodes"] == 2
        assert 0 <= m["spl"] <= m["sr"] <= 1 and 0 <= m["sna"] <= m["sr"]
        assert len(list((d / "trajectories" / policy).glob("episode_*.csv"))) == 2


def test_report_numbers_match_sources(pipeline_dirs):
    text = (pipeline_dirs["report"] / "report.md").read_text()
    metrics = json.loads((pipeline_dirs["navigate"] / "metrics.json").read_text())
    for m in metrics.values():
        assert f"{m['sr']:.3f} | {m['spl']:.3f} | {m['sna']:.3f}" in text
    props = json.loads((pipeline_dirs["eval"] / "props.json").read_text())
    assert f"{props['position_error_m']:.3f} | {props['top1_acc']:.3f}" in text


def test_cli_determinism(pipeline_dirs, tmp_path):
    root = pipeline_dirs["synth"].parent
    again = run_pipeline(tmp_path / "second")
    a, b = output_files(root), output_files(again["synth"].parent)
    # paths embedded in report/config echoes differ between roots; compare with the root swapped
    assert sorted(a) == sorted(b)
    for name in a:
        assert a[name].replace(str(root).encode(), b"ROOT") == \
            b[name].replace(str(again["synth"].parent).encode(), b"ROOT"), name
