import hashlib
import json
import shutil
import subprocess
import sys
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from scenario_forge import cli, diffusion, vae
from scenario_forge.scene import read_scenario

SVG = "{http://www.w3.org/2000/svg}"

TINY_CONFIG = {
    "vae": {"latent_dim": 4, "cond_dim": 8, "hidden_dim": 16, "mp_rounds": 1, "epochs": 2},
    "diffusion": {"hidden_dim": 16, "time_dim": 8, "epochs": 2, "samples": 3},
    "seed": 0,
}


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _tree_digest(root: Path, skip=("timings.json",)) -> dict:
    return {str(p.relative_to(root)): _digest(p) for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


def _write_config(base: Path, **overrides) -> Path:
    cfg = json.loads(json.dumps(TINY_CONFIG))
    cfg["paths"] = {"data_dir": str(base / "data"), "checkpoint_dir": str(base / "ckpt"), "output_dir": str(base / "runs")}
    for section, values in overrides.items():
        cfg.setdefault(section, {}).update(values)
    path = base / "config.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Tiny corpus plus trained checkpoints shared by the simulate/evaluate/render tests."""
    base = tmp_path_factory.mktemp("pipeline")
    cfg = str(_write_config(base))
    assert cli.main(["gen-data", "--config", cfg, "--scenes", "30"]) == 0
    assert cli.main(["train", "vae", "--config", cfg]) == 0
    assert cli.main(["train", "ldm", "--config", cfg]) == 0
    return base, cfg


# --------------------------------------------------------------------------
# gen-data


def test_gen_data_counts_and_manifest(tmp_path):
    cfg = _write_config(tmp_path)
    assert cli.main(["gen-data", "--config", str(cfg), "--scenes", "1000"]) == 0
    data = tmp_path / "data"
    n_train, n_val = len(list((data / "train").glob("*.json"))), len(list((data / "val").glob("*.json")))
    assert n_train + n_val == 1000
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["train"]["count"] == n_train and manifest["val"]["count"] == n_val
    assert manifest["seed"] == 0
    train_seeds = set(range(*manifest["train"]["seeds"]))
    val_seeds = set(range(*manifest["val"]["seeds"]))
    assert not train_seeds & val_seeds


def test_gen_data_is_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    for base in (a, b):
        assert cli.main(["gen-data", "--config", str(_write_config(base)), "--scenes", "20"]) == 0
    assert _tree_digest(a / "data") == _tree_digest(b / "data")
    c = tmp_path / "c"
    c.mkdir()
    assert cli.main(["gen-data", "--config", str(_write_config(c)), "--scenes", "20", "--seed", "1"]) == 0
    assert _tree_digest(c / "data") != _tree_digest(a / "data")


# --------------------------------------------------------------------------
# train


def test_ldm_without_vae_is_missing_dependency(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    assert cli.main(["gen-data", "--config", str(cfg), "--scenes", "10"]) == 0
    assert cli.main(["train", "ldm", "--config", str(cfg)]) == 3
    assert "VAE checkpoint" in capsys.readouterr().err


def test_ldm_training_leaves_vae_untouched(pipeline, tmp_path):
    base, _ = pipeline
    shutil.copytree(base / "data", tmp_path / "data")
    shutil.copytree(base / "ckpt", tmp_path / "ckpt")
    (tmp_path / "ckpt" / "ldm.ckpt").unlink()
    cfg = _write_config(tmp_path)
    before = _digest(tmp_path / "ckpt" / "vae.ckpt")
    assert cli.main(["train", "ldm", "--config", str(cfg)]) == 0
    assert _digest(tmp_path / "ckpt" / "vae.ckpt") == before
    lines = (tmp_path / "ckpt" / "ldm_loss.csv").read_text().splitlines()
    assert lines[0].startswith("epoch") and len(lines) == 3


@pytest.mark.parametrize("stage", ["vae", "ldm"])
def test_resumed_training_matches_uninterrupted(pipeline, tmp_path, stage):
    base, _ = pipeline
    straight, resumed = tmp_path / "straight", tmp_path / "resumed"
    for d in (straight, resumed):
        d.mkdir()
        shutil.copytree(base / "data", d / "data")
        if stage == "ldm":
            (d / "ckpt").mkdir()
            shutil.copy(base / "ckpt" / "vae.ckpt", d / "ckpt" / "vae.ckpt")
    section = "vae" if stage == "vae" else "diffusion"
    assert cli.main(["train", stage, "--config", str(_write_config(straight, **{section: {"epochs": 3}}))]) == 0
    assert cli.main(["train", stage, "--config", str(_write_config(resumed, **{section: {"epochs": 1}}))]) == 0
    assert cli.main(["train", stage, "--config", str(_write_config(resumed, **{section: {"epochs": 3}}))]) == 0
    loader = vae.load_params if stage == "vae" else diffusion.load_params
    name = f"{stage}.ckpt"
    p1, h1, _ = loader(straight / "ckpt" / name)
    p2, h2, _ = loader(resumed / "ckpt" / name)
    assert h1["epoch"] == h2["epoch"] == 3
    assert [r["loss"] for r in h1["history"]] == [r["loss"] for r in h2["history"]]
    assert _digest(straight / "ckpt" / name) == _digest(resumed / "ckpt" / name)


def test_architecture_mismatch_fails_fast(pipeline, tmp_path, capsys):
    base, _ = pipeline
    shutil.copytree(base / "data", tmp_path / "data")
    shutil.copytree(base / "ckpt", tmp_path / "ckpt")
    cfg = _write_config(tmp_path, vae={"hidden_dim": 24, "epochs": 4})
    assert cli.main(["train", "vae", "--config", str(cfg)]) == 2
    assert "mismatch" in capsys.readouterr().err


# --------------------------------------------------------------------------
# simulate / evaluate


def test_replay_touches_no_checkpoints(pipeline, tmp_path):
    base, cfg = pipeline
    missing = tmp_path / "no_checkpoints"
    out = tmp_path / "replay"
    assert cli.main(["simulate", "--config", cfg, "--mode", "replay", "--scenes", "3", "--checkpoint", str(missing), "--out", str(out)]) == 0
    assert not missing.exists()
    run = json.loads((out / "run.json").read_text())
    assert run["mode"] == "replay" and run["scenes"] == 3
    for k in range(3):
        d = out / f"scene_{k:05d}"
        assert _digest(d / "selected.json") == _digest(d / "ground_truth.json")


def test_guided_without_checkpoint_is_missing_dependency(pipeline, tmp_path):
    _, cfg = pipeline
    assert cli.main(["simulate", "--config", cfg, "--scenes", "1", "--checkpoint", str(tmp_path), "--out", str(tmp_path / "o")]) == 3


def test_guided_with_zero_scale_equals_unguided(pipeline, tmp_path):
    base, _ = pipeline
    unguided, zero = tmp_path / "unguided", tmp_path / "zero"
    cfg = _write_config(base)
    assert cli.main(["simulate", "--config", str(cfg), "--mode", "unguided", "--scenes", "3", "--out", str(unguided)]) == 0
    cfg0 = tmp_path / "s0.json"
    data = json.loads(cfg.read_text())
    data["guidance"] = {"scale": 0.0}
    cfg0.write_text(json.dumps(data))
    assert cli.main(["simulate", "--config", str(cfg0), "--mode", "guided", "--scenes", "3", "--out", str(zero)]) == 0
    skip = ("timings.json", "run.json")
    assert _tree_digest(unguided, skip) == _tree_digest(zero, skip)


def test_simulate_outputs_candidates_and_selection(pipeline, tmp_path):
    _, cfg = pipeline
    out = tmp_path / "guided"
    assert cli.main(["simulate", "--config", cfg, "--scenes", "3", "--samples", "4", "--out", str(out)]) == 0
    rows = (out / "candidates.csv").read_text().splitlines()
    assert rows[0] == "scene,candidate_index,j_br,j_ar,j_adv,phi,C,selected"
    assert len(rows) == 1 + 3 * 4
    events = [json.loads(line) for line in (out / "events.jsonl").read_text().splitlines()]
    assert len(events) == 3
    timings = json.loads((out / "timings.json").read_text())
    assert sorted(timings) == [f"scene_{k:05d}" for k in range(3)]
    for k in range(3):
        d = out / f"scene_{k:05d}"
        cand = json.loads((d / "candidates.json").read_text())
        gt = read_scenario(d / "ground_truth.json")
        futures = np.array(cand["futures"])
        assert futures.shape == (4, len(gt.agents) - 1, gt.t_future, 4)
        assert 0 <= cand["selected"] < 4
        assert json.loads((d / "rollout.json").read_text())["selected"] == cand["selected"]
        best = min(cand["scores"], key=lambda s: (s["C"], s["candidate_index"]))
        assert best["candidate_index"] == cand["selected"]


def test_simulate_is_reproducible_and_thread_independent(pipeline, tmp_path, monkeypatch):
    _, cfg = pipeline
    digests = []
    for threads in ("1", "1", "3"):
        out = tmp_path / f"run{len(digests)}"
        monkeypatch.setenv("SCENARIO_FORGE_THREADS", threads)
        monkeypatch.setattr(cli.os, "cpu_count", lambda: 4)
        assert cli.main(["simulate", "--config", cfg, "--scenes", "4", "--out", str(out)]) == 0
        digests.append(_tree_digest(out))
    assert digests[0] == digests[1] == digests[2]


def test_bad_thread_count_is_config_error(pipeline, tmp_path, monkeypatch):
    _, cfg = pipeline
    monkeypatch.setenv("SCENARIO_FORGE_THREADS", "zero")
    assert cli.main(["simulate", "--config", cfg, "--mode", "replay", "--scenes", "1", "--out", str(tmp_path)]) == 2


def test_evaluate_writes_metrics_and_ablation(pipeline, tmp_path):
    _, cfg = pipeline
    dirs = []
    for mode in ("replay", "unguided", "guided"):
        out = tmp_path / mode
        assert cli.main(["simulate", "--config", cfg, "--mode", mode, "--scenes", "3", "--out", str(out)]) == 0
        dirs.append(str(out))
    assert cli.main(["evaluate", dirs[0]]) == 0
    summary = json.loads((tmp_path / "replay" / "metrics_summary.json").read_text())
    assert summary["ade"] == 0.0 and summary["fde"] == 0.0
    per_scene = (tmp_path / "replay" / "metrics.csv").read_text().splitlines()
    assert len(per_scene) == 1 + 3 + 1 and per_scene[-1].startswith("aggregate,")
    report = tmp_path / "report"
    assert cli.main(["evaluate", *dirs, "--out", str(report)]) == 0
    table = (report / "ablation.csv").read_text().splitlines()
    assert [line.split(",")[0] for line in table[1:]] == ["replay", "unguided", "guided"]
    guided = json.loads((report / "guided_summary.json").read_text())
    assert guided["fdd"] >= 0.0 and np.isfinite(guided["min_sfde"])


def test_evaluate_missing_run_dir(tmp_path):
    assert cli.main(["evaluate", str(tmp_path)]) == 3


# --------------------------------------------------------------------------
# render


def test_render_frames_are_deterministic(pipeline, tmp_path):
    base, _ = pipeline
    scene = sorted((base / "data" / "val").glob("*.json"))[0]
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["render", str(scene), "--out", str(a)]) == 0
    assert cli.main(["render", str(scene), "--out", str(b)]) == 0
    frames = sorted(a.glob("*.svg"))
    assert len(frames) == read_scenario(scene).t_future
    assert _tree_digest(a) == _tree_digest(b)
    root = ET.parse(frames[0]).getroot()
    assert root.find(f".//{SVG}polyline[@class='centerline']") is not None


def test_render_simulated_scene_colors_roles(pipeline, tmp_path):
    _, cfg = pipeline
    run = tmp_path / "run"
    assert cli.main(["simulate", "--config", cfg, "--mode", "replay", "--scenes", "1", "--out", str(run)]) == 0
    assert cli.main(["render", str(run / "scene_00000"), "--out", str(tmp_path / "f")]) == 0
    root = ET.parse(tmp_path / "f" / "frame_001.svg").getroot()
    fills = {r.get("class"): r.get("fill") for r in root.iter(f"{SVG}rect") if (r.get("class") or "").startswith("agent")}
    assert {"agent ego", "agent adversary"} <= set(fills)
    assert len({fills["agent ego"], fills["agent adversary"]}) == 2


def test_render_marks_collision_step(tmp_path):
    from conftest import make_scene

    from scenario_forge.closed_loop import run_closed_loop
    from scenario_forge.scene import write_scenario

    sc = make_scene([(0, "ego", 0.0, 0.0, 2.0), (1, "adversary", 20.0, 0.0, 2.0)])
    fut = np.zeros((12, 4))
    fut[:, 0] = np.linspace(16.0, 0.0, 12)
    fut[:, 2] = np.pi
    fut[:, 3] = 2.0
    res = run_closed_loop(sc, {1: fut})
    first = res.events.adv_ego_first
    assert first is not None
    scene_dir = tmp_path / "scene_00000"
    write_scenario(scene_dir / "selected.json", sc)
    (scene_dir / "rollout.json").write_text(json.dumps({"states": res.states.tolist()}))
    out = tmp_path / "frames"
    assert cli.main(["render", str(scene_dir), "--out", str(out)]) == 0
    marked = [int(p.stem.split("_")[1]) for p in sorted(out.glob("*.svg")) if ET.parse(p).getroot().find(f".//{SVG}circle[@class='collision']") is not None]
    assert marked and marked[0] == first
    assert set(marked) == {k for _, _, k in res.events.collisions}


def test_render_missing_input(tmp_path):
    assert cli.main(["render", str(tmp_path / "nope.json"), "--out", str(tmp_path / "f")]) == 3


# --------------------------------------------------------------------------
# configuration and entry point


def test_bad_mode_and_config_exit_2(tmp_path):
    assert cli.main(["simulate", "--mode", "chaotic"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"vae": {"latent_dims": 3}}')
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 2
    bad.write_text("{not json")
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert cli.main(["gen-data", "--scenes", "0", "--out", str(tmp_path)]) == 2
    assert cli.main(["simulate", "--samples", "0"]) == 2


def test_console_script_runs(tmp_path):
    exe = shutil.which("scenario-forge")
    cmd = [exe] if exe else [sys.executable, "-m", "scenario_forge.cli"]
    proc = subprocess.run(cmd + ["gen-data", "--scenes", "5", "--out", str(tmp_path / "d")], capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 0, proc.stderr
    assert "wrote 4 train and 1 val" in proc.stdout
    proc = subprocess.run(cmd + ["--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "simulate" in proc.stdout
