import json

import numpy as np
import pytest

from distilled_replay import cli, harness
from distilled_replay.config import PRESETS, ConfigError, load_config, parse_config
from distilled_replay.distillation import DistilledMemory, save_memory
from distilled_replay.evaluation import read_csv

TINY = """
[run]
name = tiny
seeds = 0, 1
strategies = naive, distilled_replay
sequential = true

[scenario]
kind = split
dataset = blobs
classes_per_exp = 2
blob_classes = 4
blob_train_per_class = 40
blob_test_per_class = 20
blob_dim = 2
blob_spread = 0.3

[model]
kind = tiny-mlp
hidden = 8

[train]
lr = 0.5
batch_size = 8

[distill]
S = 3
R = 4
"""


@pytest.fixture
def tiny_ini(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return path


def test_presets_parse():
    for name in PRESETS:
        cfg = load_config(name)
        assert cfg.distill.eta == cfg.train.lr
        assert cfg.name == name
    desk = load_config("split-mnist-desk")
    assert desk.scenario.downscale == 2 and desk.scenario.train_per_class <= 1000
    assert (desk.distill.R, desk.distill.S, desk.train.per_class) == (40, 10, 1)
    assert load_config("permuted-mnist-desk").scenario.T == 5


def test_config_errors():
    with pytest.raises(ConfigError):
        parse_config(TINY + "\n[bogus]\nx = 1\n")
    with pytest.raises(ConfigError):
        parse_config(TINY.replace("S = 3", "S = 3\neta = 0.2"))
    with pytest.raises(ConfigError):
        parse_config(TINY.replace("hidden = 8", "hidden = 8\ncolour = red"))
    with pytest.raises(ConfigError):
        parse_config(TINY.replace("S = 3", "S = 0"))
    with pytest.raises(ConfigError):
        parse_config(TINY.replace("strategies = naive", "strategies = ewc"))
    with pytest.raises(ConfigError):
        load_config("no-such-file.ini")


def test_config_hash_ignores_output_location():
    a = parse_config(TINY)
    b = parse_config(TINY.replace("sequential = true", "sequential = true\noutput_dir = elsewhere"))
    c = parse_config(TINY.replace("R = 4", "R = 5"))
    assert a.hash() == b.hash() != c.hash()


def test_run_writes_all_outputs(tmp_path, tiny_ini):
    cfg = load_config(tiny_ini)
    res = harness.run(cfg, tmp_path / "out")
    out = res.output_dir
    for name in ("results.csv", "config.ini", "config.json", "summary.json", "timings.json"):
        assert (out / name).exists()
    assert (out / "config.ini").read_text() == TINY
    matrices = read_csv(out / "results.csv")
    run_id = f"tiny-{cfg.hash()[:12]}"
    assert set(matrices) == {(run_id, s, k) for s in ("naive", "distilled_replay") for k in (0, 1)}
    summary = json.loads((out / "summary.json").read_text())
    dr = summary["strategies"]["distilled_replay"]
    assert summary["config_hash"] == cfg.hash()
    assert all(v["distillations"] == 1 for v in dr["seeds"].values())
    assert len(list((out / "memories").glob("distilled_replay_*.drb"))) == 4
    assert len(list((out / "params").glob("*.drb"))) == 4


def test_cli_run_is_byte_identical(tmp_path, tiny_ini, capsys):
    for k in (1, 2):
        assert cli.main(["run", str(tiny_ini), "--output-dir", str(tmp_path / f"r{k}")]) == 0
    a = (tmp_path / "r1" / "results.csv").read_bytes()
    assert a == (tmp_path / "r2" / "results.csv").read_bytes()
    assert "distilled_replay" in capsys.readouterr().out


def test_cli_seed_override(tmp_path, tiny_ini):
    assert cli.main(["run", str(tiny_ini), "--seeds", "7", "--output-dir", str(tmp_path / "o")]) == 0
    assert {k[2] for k in read_csv(tmp_path / "o" / "results.csv")} == {7}


def test_cli_exit_codes(tmp_path, tiny_ini, capsys, monkeypatch):
    monkeypatch.delenv("DISTILLED_REPLAY_DATA", raising=False)
    bad = tmp_path / "bad.ini"
    bad.write_text(TINY.replace("lr = 0.5", "lr = -1"))
    assert cli.main(["run", str(bad)]) == cli.EXIT_CONFIG
    assert cli.main(["run", str(tmp_path / "missing.ini")]) == cli.EXIT_CONFIG
    images = tmp_path / "img.ini"
    images.write_text(TINY.replace("dataset = blobs", f"dataset = mnist\ndata_dir = {tmp_path / 'nothing'}"))
    assert cli.main(["run", str(images), "--output-dir", str(tmp_path / "x")]) == cli.EXIT_DATA
    assert cli.main(["export-buffer", str(tmp_path / "none"), str(tmp_path / "e")]) == cli.EXIT_DATA
    corrupt = tmp_path / "corrupt.drb"
    corrupt.write_bytes(b"nope")
    assert cli.main(["export-buffer", str(corrupt), str(tmp_path / "e")]) == cli.EXIT_DATA
    assert "error:" in capsys.readouterr().err


def test_validate_config(tiny_ini, capsys):
    assert cli.main(["validate-config", str(tiny_ini)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["config"]["distill"]["eta"] == 0.5
    assert len(out["config_hash"]) == 64


def test_export_pixel_values(tmp_path):
    samples = np.linspace(-0.5, 1.7, 10 * 16).reshape(10, 16)
    samples[0, :3] = [0.0, 0.5, 1.7]
    mem = DistilledMemory(samples, np.eye(10), source_experience=3)
    save_memory(tmp_path / "m.drb", mem)
    files = harness.export_buffer(tmp_path / "m.drb", tmp_path / "img")
    assert len(files) == 10
    assert files[0].name == "m_exp03_class0_0.pgm"
    raw = files[0].read_bytes()
    header = b"P5\n4 4\n255\n"
    assert raw.startswith(header)
    pixels = np.frombuffer(raw[len(header):], dtype=np.uint8)
    assert pixels[:3].tolist() == [0, 128, 255]
    assert harness.to_u8(np.array([-3.0, 0.5, 1.0, 1.7])).tolist() == [0, 128, 255, 255]


def test_export_png(tmp_path):
    pytest.importorskip("PIL")
    mem = DistilledMemory(np.full((2, 9), 0.5), np.eye(2), 1)
    save_memory(tmp_path / "m.drb", mem)
    assert cli.main(["export-buffer", str(tmp_path / "m.drb"), str(tmp_path / "o"), "--png"]) == 0
    assert len(list((tmp_path / "o").glob("*.png"))) == 2


def test_export_from_run_directory(tmp_path, tiny_ini):
    res = harness.run(load_config(tiny_ini), tmp_path / "out")
    files = harness.export_buffer(res.output_dir, tmp_path / "img")
    assert len(files) == 2 * 2 * 2  # seeds x experiences x classes per experience


def test_distill_command(tmp_path, tiny_ini):
    out = tmp_path / "one.drb"
    assert cli.main(["distill", str(tiny_ini), "--experience", "2", "--seed", "1", "--output", str(out)]) == 0
    assert out.exists()


def test_ablation_arms_differ_in_two_fields(tmp_path, tiny_ini):
    report = harness.ablation(load_config(tiny_ini), tmp_path / "abl")
    arms = report["results"]
    a, b = (arms[k].config.distill.to_dict() for k in ("buffer_distillation", "dataset_distillation"))
    assert {k for k in a if a[k] != b[k]} == {"loss_mode", "lr_mode"}
    assert (tmp_path / "abl" / "ablation.csv").exists()
    assert report["arms"]["buffer_distillation"]["R"] == report["arms"]["dataset_distillation"]["R"]


def test_timing_report(tmp_path):
    text = TINY + "\n[timing]\ns_grid = 1, 2\nr_grid = 1, 2\nfixed_R = 2\nfixed_S = 2\nrepeats = 3\n"
    report = harness.timing(parse_config(text), tmp_path / "t")
    assert [r["axis"] for r in report["rows"]] == ["S", "S", "R", "R"]
    assert all(r["repeats"] == 3 for r in report["rows"])
    assert (tmp_path / "t" / "timing.csv").read_text().startswith("axis,value,S,R,mean_seconds")
    assert len(report["r_doubling_ratios"]) == 1


def test_linear_fit_r2():
    assert harness.linear_fit_r2([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert harness.linear_fit_r2([1, 2, 3, 4], [1, 3, 1, 3]) < 0.5
