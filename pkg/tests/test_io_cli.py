import json
import os

import numpy as np
import pytest

from popmap.cli import main
from popmap.errors import InputError
from popmap.io import export_csv, export_pgm16, read_cube, read_cube_frames, read_pgm16, write_cube
from popmap.preprocess import PopCube, hourly_timestamps, read_gridmap_csv

FAST = {
    "srcnn": {"iterations": 10},
    "temporal": {"iterations": 10, "hidden": 8},
    "baselines": {"forest_trees": 4, "mlp_iterations": 10},
}


@pytest.fixture
def fast_config(tmp_path):
    p = tmp_path / "fast.json"
    p.write_text(json.dumps(FAST))
    return str(p)


def _frames(t=24, h=5, w=6, seed=0):
    return np.random.default_rng(seed).gamma(2.0, 80.0, size=(t, h, w))


# -- cube and exports ----------------------------------------------------------------


def test_cube_roundtrip(tmp_path):
    f = _frames()
    write_cube(tmp_path / "a.pcb", f)
    np.testing.assert_array_equal(read_cube_frames(tmp_path / "a.pcb"), f)
    raw = (tmp_path / "a.pcb").read_bytes()
    assert raw[:4] == b"PCB1"
    assert int.from_bytes(raw[4:12], "little") == 24
    assert len(raw) == 4 + 24 + 8 * f.size


def test_cube_corruption_detected(tmp_path):
    write_cube(tmp_path / "a.pcb", _frames())
    raw = (tmp_path / "a.pcb").read_bytes()
    (tmp_path / "b.pcb").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(InputError):
        read_cube_frames(tmp_path / "b.pcb")
    (tmp_path / "c.pcb").write_bytes(raw[:-8])
    with pytest.raises(InputError):
        read_cube_frames(tmp_path / "c.pcb")
    with pytest.raises(InputError):
        read_cube(tmp_path / "a.pcb", np.ones((4, 4), bool))
    with pytest.raises(InputError):
        write_cube(tmp_path / "d.pcb", np.zeros((3, 3)))


def test_pgm16_export(tmp_path):
    f = _frames()
    paths = export_pgm16(f, tmp_path / "pgm")
    assert len(paths) == 24
    side = json.loads((tmp_path / "pgm" / "scale.json").read_text())
    pix = np.stack([read_pgm16(p) for p in paths])
    assert pix.shape == f.shape and pix.max() == 65535
    assert abs(pix.max() * side["scale"] - f.max()) <= 1e-4 * f.max()
    np.testing.assert_allclose(pix * side["scale"], f, atol=side["scale"])


def test_pgm16_header(tmp_path):
    export_pgm16(np.ones((1, 2, 3)), tmp_path)
    raw = (tmp_path / "frame_000.pgm").read_bytes()
    assert raw.startswith(b"P5\n3 2\n65535\n")
    assert len(raw) == len(b"P5\n3 2\n65535\n") + 2 * 6


def test_csv_export_roundtrip(tmp_path):
    f = _frames(t=48)
    mask = np.ones(f.shape[1:], bool)
    mask[0, 0] = False
    f[:, 0, 0] = 0
    cube = PopCube(f, hourly_timestamps(2), "fine", mask)
    paths = export_csv(cube, tmp_path)
    assert len(paths) == 48
    grid, day, hour = read_gridmap_csv(paths[30])
    assert (day, hour) == (1, 6)
    np.testing.assert_allclose(grid.values, f[30], rtol=1e-9)


# -- command line --------------------------------------------------------------------


def test_gen_creates_artifacts_and_is_idempotent(tmp_path, fast_config, capsys):
    out = tmp_path / "run"
    assert main(["gen", "--config", fast_config, "--out", str(out)]) == 0
    for name in ("city.json", "truth.pcb", "manifest.json", "config.json"):
        assert (out / name).exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["stages"]["gen"]["status"] == "complete"
    assert set(manifest["stages"]["gen"]["artifacts"]) == {"city.json", "truth.pcb", "config.json"}
    before = (out / "truth.pcb").stat().st_mtime_ns
    capsys.readouterr()
    assert main(["gen", "--config", fast_config, "--out", str(out)]) == 0
    assert "skipped" in capsys.readouterr().out
    assert (out / "truth.pcb").stat().st_mtime_ns == before
    assert main(["gen", "--config", fast_config, "--out", str(out), "--force"]) == 0
    assert "done" in capsys.readouterr().out
    assert not (out / "run.lock").exists()


def test_seed_changes_hash(tmp_path, fast_config):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["gen", "--config", fast_config, "--out", str(a)])
    main(["gen", "--config", fast_config, "--out", str(b), "--seed", "3"])
    ha = json.loads((a / "manifest.json").read_text())["config_hash"]
    hb = json.loads((b / "manifest.json").read_text())["config_hash"]
    assert ha != hb
    assert json.loads((b / "manifest.json").read_text())["config"]["srcnn"]["seed"] == 3


def test_eval_without_models(tmp_path, fast_config, capsys):
    out = tmp_path / "run"
    main(["gen", "--config", fast_config, "--out", str(out)])
    capsys.readouterr()
    assert main(["pipeline", "--config", fast_config, "--out", str(out), "--stages", "eval"]) == 1
    assert "train-spatial artifacts missing" in capsys.readouterr().err


def test_lock_blocks_second_process(tmp_path, fast_config, capsys):
    out = tmp_path / "run"
    out.mkdir()
    (out / "run.lock").write_text("12345")
    assert main(["gen", "--config", fast_config, "--out", str(out)]) == 1
    assert "locked" in capsys.readouterr().err
    assert (out / "run.lock").exists()


def test_bad_inputs_exit_codes(tmp_path, fast_config):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"no_such_key": 1}))
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert main(["pipeline", "--config", fast_config, "--out", str(tmp_path / "y"), "--stages", "bogus"]) == 2
    write_cube(tmp_path / "c.pcb", _frames())
    assert main(["export", str(tmp_path / "c.pcb"), "--format", "png", "--out", str(tmp_path / "e")]) == 2
    assert main(["report", "--out", str(tmp_path / "nowhere")]) == 1


def test_full_pipeline_and_export(tmp_path, fast_config, capsys):
    out = tmp_path / "run"
    assert main(["pipeline", "--config", fast_config, "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert all(manifest["stages"][s]["status"] == "complete" for s in manifest["stages"])
    for rel, digest in manifest["stages"]["eval"]["artifacts"].items():
        assert (out / rel).exists()
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert header.split(",")[-4:] == ["RMSE", "NRMSE", "Corr", "MAE"]
    capsys.readouterr()
    assert main(["report", "--out", str(out)]) == 0
    assert "RMSE" in capsys.readouterr().out
    assert main(["pipeline", "--config", fast_config, "--out", str(out)]) == 0
    assert capsys.readouterr().out.count("skipped") == 6
    assert main(["export", str(out / "truth.pcb"), "--format", "pgm16", "--out", str(tmp_path / "pgm")]) == 0
    n_frames = len(read_cube_frames(out / "truth.pcb"))
    assert len(list((tmp_path / "pgm").glob("*.pgm"))) == n_frames
    assert main(["export", str(out / "truth.pcb"), "--format", "csv", "--out", str(tmp_path / "csv")]) == 0
    assert len(list((tmp_path / "csv").glob("frame_[0-9][0-9][0-9].csv"))) == n_frames


def test_tampered_artifact_reruns_stage(tmp_path, fast_config, capsys):
    out = tmp_path / "run"
    main(["gen", "--config", fast_config, "--out", str(out)])
    (out / "city.json").write_text("{}")
    capsys.readouterr()
    main(["gen", "--config", fast_config, "--out", str(out)])
    assert "done" in capsys.readouterr().out


def test_paper_scale_preset_recorded(tmp_path):
    out = tmp_path / "large"
    assert main(["gen", "--preset", "paper-scale", "--out", str(out)]) == 0
    cfg = json.loads((out / "manifest.json").read_text())["config"]
    assert (cfg["city"]["grid_h"], cfg["city"]["grid_w"]) == (83, 114)
    assert cfg["srcnn"]["iterations"] == 100_000
    assert cfg["srcnn"]["batch_size"] == 512
    assert (cfg["srcnn"]["lr_features"], cfg["srcnn"]["lr_output"]) == (1e-4, 1e-5)
    assert read_cube_frames(out / "truth.pcb").shape[1:] == (83, 114)
    assert list(json.loads((out / "manifest.json").read_text())["stages"]) == ["gen"]


def test_threads_env_does_not_change_hash(tmp_path, fast_config, monkeypatch):
    main(["gen", "--config", fast_config, "--out", str(tmp_path / "a")])
    monkeypatch.setitem(os.environ, "POPMAP_THREADS", "2")
    main(["gen", "--config", fast_config, "--out", str(tmp_path / "b")])
    ha = json.loads((tmp_path / "a" / "manifest.json").read_text())["config_hash"]
    hb = json.loads((tmp_path / "b" / "manifest.json").read_text())["config_hash"]
    assert ha == hb
