import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from madl.config import ConfigError, load_config, parse_config
from madl.labels import read_label_file, read_mask_png
from madl.pipeline import parse_frames, run_pipeline

from conftest import make_config


def madl(*args, env=None):
    return subprocess.run([sys.executable, "-m", "madl.cli", *map(str, args)], capture_output=True, text=True,
                          env=env, timeout=600)


def write_cfg(path: Path, input_dir, output_dir, extra=""):
    path.write_text(f"[run]\ninput = {input_dir}\noutput = {output_dir}\n{extra}")
    return path


# -- config and frame ranges ------------------------------------------------------------


def test_parse_frames():
    assert parse_frames("3..7") == (3, 7)
    assert parse_frames("4") == (4, 4)
    assert parse_frames(None) is None
    for bad in ("7..3", "a..b", "-1..2"):
        with pytest.raises(ConfigError):
            parse_frames(bad)


@pytest.mark.parametrize("text", [
    "[ground]\ndist_threshold = -1\n",
    "[gpr]\nmax_iterations = 0\n",
    "[mapping]\nvoxel_size = abc\n",
    "[nonsense]\nx = 1\n",
    "[curb]\nunknown_key = 1\n",
    "not an ini file",
])
def test_bad_config_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_config_hash_tracks_content(tmp_path):
    a = make_config(tmp_path, tmp_path / "o")
    b = make_config(tmp_path, tmp_path / "o", "[ground]\ndist_threshold = 0.25\n")
    assert a.hash() != b.hash()
    assert make_config(tmp_path, tmp_path / "o").hash() == a.hash()


def test_paths_resolve_relative_to_config(tmp_path):
    (tmp_path / "c").mkdir()
    p = write_cfg(tmp_path / "c" / "madl.ini", "data", "out")
    cfg = load_config(p)
    assert cfg.input_dir == (tmp_path / "c" / "data").resolve()


# -- end to end ----------------------------------------------------------------------------


def test_manifest_accounts_for_every_frame(pipeline_run):
    cfg, manifest, _ = pipeline_run
    doc = json.loads((cfg.output_dir / "manifest.json").read_text())
    assert sorted(doc["frames"]) == [f"{i:06d}" for i in range(50)]
    counts = manifest.counts()
    assert sum(counts.values()) == 50
    assert counts.get("labeled", 0) >= 45 and counts.get("error", 0) == 0
    assert doc["config_hash"] == cfg.hash()
    retained = json.loads((cfg.output_dir / "retained.json").read_text())
    assert len(retained["retained"]) + len(retained["quarantined"]) == 50


def test_missing_scans_is_startup_error(tmp_path):
    out = tmp_path / "out"
    cfg = make_config(tmp_path / "nowhere", out)
    with pytest.raises(ConfigError):
        run_pipeline(cfg)
    assert not out.exists()


def test_inputs_not_mutated(pipeline_run):
    cfg, _, _ = pipeline_run
    inputs = sorted(p.relative_to(cfg.input_dir) for p in cfg.input_dir.rglob("*") if p.is_file())
    assert all(not str(p).startswith(("masks", "labels", "curbs", "map")) for p in inputs)


def _find(root: Path, sub: str, name: str) -> Path:
    for cand in (root / sub / name, root / "quarantine" / sub / name):
        if cand.exists():
            return cand
    raise AssertionError(f"{sub}/{name} missing under {root}")


def test_stagewise_cli_equals_monolithic_run(bundled_root, tmp_path):
    mono, staged = tmp_path / "mono", tmp_path / "staged"
    run_pipeline(make_config(bundled_root, mono), (20, 24), evaluate=False)
    cfg = write_cfg(tmp_path / "c.ini", bundled_root, staged)
    for stage in ("detect", "map", "localize", "label"):
        res = madl(stage, "--config", cfg, "--frames", "20..24")
        assert res.returncode == 0, res.stderr
        json.loads(res.stdout)
    assert (mono / "map.ply").read_bytes() == (staged / "map.ply").read_bytes()
    assert (mono / "poses_refined.txt").read_bytes() == (staged / "poses_refined.txt").read_bytes()
    for i in range(20, 25):
        n = f"{i:06d}"
        for sub, ext in (("masks", ".png"), ("labels", ".label"), ("curbs", ".json")):
            a = _find(mono, sub, n + ext).read_bytes()
            assert a == (staged / sub / (n + ext)).read_bytes(), (sub, n)


def test_detect_delegation(bundled_root, tmp_path):
    cfg = write_cfg(tmp_path / "c.ini", bundled_root, tmp_path / "out")
    res = madl("detect", "--config", cfg, "--frames", "7")
    assert res.returncode == 0, res.stderr
    files = sorted(p.name for p in (tmp_path / "out" / "detections").iterdir())
    assert files == ["000007.json", "000007.label"]
    doc = json.loads((tmp_path / "out" / "detections" / "000007.json").read_text())
    assert doc["frame_id"] == 7 and len(doc["left"]) > 0 and len(doc["right"]) > 0
    labels = read_label_file(tmp_path / "out" / "detections" / "000007.label")
    assert len(labels) * 16 == (bundled_root / "scans" / "000007.bin").stat().st_size


def test_eval_delegation(tmp_path):
    # Reproduce the pooled-count example through the CLI.
    seq = tmp_path / "seq"
    out = tmp_path / "out"
    from madl.labels import LabelMask, write_mask_png
    from madl.synthetic import SceneSpec, write_sequence
    from madl.geometry import LidarGeometry

    geom = LidarGeometry(1.73, np.radians(1.0), tuple(np.radians(np.linspace(-25, 3, 8))))
    write_sequence(seq, SceneSpec(num_frames=2), geom)
    (out / "masks").mkdir(parents=True)
    rows = {"000000": ([1, 1, 1, 1, 1, 0, 0, 0, 0, 0], [1, 1, 1, 0, 0, 0, 0, 0, 0, 0]),
            "000001": ([1, 1, 1, 0, 0, 0, 0, 0, 0, 0], [1, 1, 1, 1, 1, 0, 0, 0, 0, 0])}
    for name, (p, t) in rows.items():
        write_mask_png(out / "masks" / f"{name}.png", LabelMask(np.array([p], np.uint8) * 255))
        write_mask_png(seq / "truth_masks" / f"{name}.png", LabelMask(np.array([t], np.uint8) * 255))
    cfg = write_cfg(tmp_path / "c.ini", seq, out, "[projection]\nimage_width = 10\nimage_height = 1\n")
    res = madl("eval", "--config", cfg)
    assert res.returncode == 0, res.stderr
    rep = json.loads((out / "report.json").read_text())
    assert rep["micro"]["precision"] == pytest.approx(0.75)


def test_cli_config_error_exit_code(tmp_path):
    cfg = write_cfg(tmp_path / "c.ini", tmp_path / "missing", tmp_path / "out")
    res = madl("run", "--config", cfg)
    assert res.returncode == 2
    err = json.loads(res.stderr.strip().splitlines()[-1])
    assert err["error"] == "ConfigError" and "scans" in err["message"]
    assert not (tmp_path / "out").exists()


def test_cli_bad_frames(tmp_path, bundled_root):
    cfg = write_cfg(tmp_path / "c.ini", bundled_root, tmp_path / "out")
    res = madl("detect", "--config", cfg, "--frames", "9..3")
    assert res.returncode != 0 and "error" in json.loads(res.stderr.strip().splitlines()[-1])


def test_cli_missing_config_file(tmp_path):
    res = madl("map", "--config", tmp_path / "nope.ini")
    assert res.returncode != 0
    assert json.loads(res.stderr.strip().splitlines()[-1])["error"]


def test_cli_synth(tmp_path):
    cfg = write_cfg(tmp_path / "c.ini", tmp_path / "seq", tmp_path / "out",
                    "[synth]\nnum_frames = 2\nlength = 60\nstraight_length = 60\ncurvature = 0\nobstacles =\n")
    res = madl("synth", "--config", cfg)
    assert res.returncode == 0, res.stderr
    assert sorted(p.name for p in (tmp_path / "seq" / "scans").iterdir()) == ["000000.bin", "000001.bin"]


def test_default_config_parses(tmp_path):
    res = madl("default-config")
    assert res.returncode == 0
    cfg = parse_config(res.stdout)
    assert cfg.mapping.voxel_size > 0


def test_rerun_same_manifest_modulo_timings(bundled_root, tmp_path):
    cfg = make_config(bundled_root, tmp_path / "o")
    a = run_pipeline(cfg, (30, 32)).as_dict()
    b = run_pipeline(cfg, (30, 32)).as_dict()
    a.pop("timings"), b.pop("timings")
    assert a == b
    masks = tmp_path / "o" / "masks"
    for p in masks.glob("*.png"):
        assert read_mask_png(p).values.any()
