"""Command-line interface: ``scenario-forge {gen-data,train,simulate,evaluate,render}``.

Exit codes: 0 success, 2 configuration error, 3 missing dependency (data or
checkpoint), 4 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import diffusion, vae
from .checkpoint import CheckpointError, atomic_write_bytes
from .closed_loop import EventLog, SimulationResult, derive_events, run_closed_loop
from .config import ConfigError, RunConfig
from .generation import encode_corpus, generate, prepare_scenario
from .metrics import METRIC_FIELDS, MetricsReport, compute_metrics, fdd, metrics_csv, min_sfde
from .nn import Adam
from .render import render_frames, write_frames
from .scene import Scenario, read_scenario, write_scenario
from .synthetic import GeneratorConfig, generate_synthetic_scenario

logger = logging.getLogger("scenario_forge")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4
MODES = ("replay", "unguided", "guided")


class MissingDependency(RuntimeError):
    """A required input (data split, checkpoint) does not exist."""


def worker_count() -> int:
    raw = os.environ.get("SCENARIO_FORGE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"SCENARIO_FORGE_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError("SCENARIO_FORGE_THREADS must be >= 1")
    return min(n, os.cpu_count() or 1)


def _pmap(fn, items):
    """Ordered map, parallel across up to ``SCENARIO_FORGE_THREADS`` workers."""
    n = worker_count()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _write_json(path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# data


def _split_seeds(cfg: RunConfig, total: int) -> tuple[range, range]:
    n_val = int(round(total * cfg.generator.val_fraction))
    n_train = total - n_val
    base = cfg.seed * 1_000_000
    return range(base, base + n_train), range(base + 500_000, base + 500_000 + n_val)


def _generator_config(cfg: RunConfig) -> GeneratorConfig:
    g = cfg.generator
    return GeneratorConfig(layout=g.layout, n_agents=tuple(g.n_agents), dt=g.dt, t_hist=g.t_hist, t_future=g.t_future, resolution=g.resolution)


def cmd_gen_data(cfg: RunConfig, out: Path, scenes: int) -> dict:
    """Write ``scenes`` synthetic scenarios split into ``train/`` and ``val/`` plus a manifest."""
    gcfg = _generator_config(cfg)
    train, val = _split_seeds(cfg, scenes)
    for split, seeds in (("train", train), ("val", val)):
        split_dir = out / split
        split_dir.mkdir(parents=True, exist_ok=True)

        def one(seed, split_dir=split_dir):
            write_scenario(split_dir / f"scene_{seed:09d}.json", generate_synthetic_scenario(gcfg, seed))

        _pmap(one, list(seeds))
    manifest = {
        "seed": cfg.seed,
        "total": scenes,
        "train": {"count": len(train), "seeds": [train.start, train.stop]},
        "val": {"count": len(val), "seeds": [val.start, val.stop]},
        "generator": cfg.to_dict()["generator"],
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def _intern_maps(scenarios: list[Scenario]) -> list[Scenario]:
    """Share identical maps between scenarios (keeps batched map lookups cheap)."""
    pool, out = {}, []
    for sc in scenarios:
        m = sc.map
        key = (m.origin, m.resolution, m.sdf.shape, hashlib.sha1(m.sdf.tobytes()).hexdigest())
        shared = pool.setdefault(key, m)
        out.append(sc if shared is m else replace(sc, map=shared))
    return out


def load_split(data_dir: Path, split: str, limit: int | None = None) -> list[Scenario]:
    split_dir = Path(data_dir) / split
    files = sorted(split_dir.glob("scene_*.json")) if split_dir.is_dir() else []
    if not files:
        raise MissingDependency(f"no scenarios found in {split_dir} (run gen-data first)")
    if limit is not None:
        files = files[:limit]
    return _intern_maps([read_scenario(f) for f in files])


# --------------------------------------------------------------------------
# training


def _loss_csv(history: list[dict]) -> str:
    if not history:
        return ""
    buf = io.StringIO()
    keys = list(history[0])
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(keys)
    for rec in history:
        writer.writerow([repr(rec[k]) if isinstance(rec[k], float) else rec[k] for k in keys])
    return buf.getvalue()


def cmd_train_vae(cfg: RunConfig, ckpt_dir: Path) -> Path:
    v = cfg.vae
    g = cfg.generator
    hyper = vae.VaeHyper(v.latent_dim, v.cond_dim, v.hidden_dim, v.mp_rounds, g.t_hist, g.t_future, g.dt)
    train = load_split(Path(cfg.paths.data_dir), "train")
    path = ckpt_dir / "vae.ckpt"
    params, opt, start, history = None, None, 0, []
    if path.exists():
        params, header, opt_arrays = vae.load_params(path, expect=hyper)
        start = int(header.get("epoch", 0))
        history = list(header.get("history", []))
        opt = Adam(v.learning_rate)
        opt.load_state(header.get("adam_t", 0), opt_arrays)
        logger.info("resuming VAE training from epoch %d", start)
    settings = {"epochs": v.epochs, "batch_size": v.batch_size, "learning_rate": v.learning_rate, "beta_kl": v.beta_kl, "kl_warmup": v.kl_warmup, "seed": cfg.seed}

    def save(rec, p, o):
        history.append(rec)
        vae.save_params(path, p, {"epoch": rec["epoch"], "history": history, "train": settings}, optimizer=o)
        _write_text(ckpt_dir / "vae_loss.csv", _loss_csv(history))

    if start < v.epochs:
        vae.train_vae(
            train,
            hyper,
            epochs=v.epochs,
            batch_size=v.batch_size,
            learning_rate=v.learning_rate,
            beta_kl=v.beta_kl,
            kl_warmup=v.kl_warmup,
            grad_clip=v.grad_clip,
            seed=cfg.seed,
            params=params,
            optimizer=opt,
            start_epoch=start,
            callback=save,
        )
    return path


def cmd_train_ldm(cfg: RunConfig, ckpt_dir: Path) -> Path:
    vae_path = ckpt_dir / "vae.ckpt"
    if not vae_path.exists():
        raise MissingDependency(f"latent diffusion training needs a VAE checkpoint at {vae_path} (run 'train vae' first)")
    vae_hash = _sha256(vae_path)
    vae_params, _, _ = vae.load_params(vae_path)
    d = cfg.diffusion
    hyper = cfg.denoiser_hyper()
    train = load_split(Path(cfg.paths.data_dir), "train")
    data = encode_corpus(train, vae_params)
    path = ckpt_dir / "ldm.ckpt"
    params, opt, start, history = None, None, 0, []
    if path.exists():
        params, header, opt_arrays = diffusion.load_params(path, expect=hyper)
        if header.get("vae_sha256") != vae_hash:
            raise ConfigError("existing denoiser checkpoint was trained against a different VAE")
        start = int(header.get("epoch", 0))
        history = list(header.get("history", []))
        opt = Adam(d.learning_rate)
        opt.load_state(header.get("adam_t", 0), opt_arrays)
        logger.info("resuming denoiser training from epoch %d", start)

    def save(rec, p, o):
        history.append(rec)
        diffusion.save_params(path, p, {"epoch": rec["epoch"], "history": history, "vae_sha256": vae_hash}, optimizer=o)
        _write_text(ckpt_dir / "ldm_loss.csv", _loss_csv(history))

    if start < d.epochs:
        diffusion.train_denoiser(
            data,
            hyper,
            epochs=d.epochs,
            batch_size=d.batch_size,
            learning_rate=d.learning_rate,
            seed=cfg.seed,
            params=params,
            optimizer=opt,
            start_epoch=start,
            callback=save,
        )
    if _sha256(vae_path) != vae_hash:  # pragma: no cover - defensive
        raise RuntimeError("VAE checkpoint changed during denoiser training")
    return path


def load_models(ckpt_dir: Path):
    vae_path, ldm_path = ckpt_dir / "vae.ckpt", ckpt_dir / "ldm.ckpt"
    for p in (vae_path, ldm_path):
        if not p.exists():
            raise MissingDependency(f"missing checkpoint {p}")
    vae_params, _, _ = vae.load_params(vae_path)
    ldm_params, header, _ = diffusion.load_params(ldm_path)
    if header.get("vae_sha256") not in (None, _sha256(vae_path)):
        raise ConfigError(f"{ldm_path} was trained against a different VAE than {vae_path}")
    return vae_params, ldm_params


# --------------------------------------------------------------------------
# simulation and evaluation


def _states_json(states: np.ndarray) -> list:
    return np.asarray(states).tolist()


def cmd_simulate(cfg: RunConfig, mode: str, out: Path, scenes: int | None, samples: int, ckpt_dir: Path) -> dict:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    val = load_split(Path(cfg.paths.data_dir), "val", scenes)
    models = None if mode == "replay" else load_models(ckpt_dir)
    guidance = cfg.guidance if mode == "guided" else cfg.guidance.with_scale(0.0)

    def one(item):
        i, sc = item
        sc = prepare_scenario(sc)
        if mode == "replay":
            t0 = time.perf_counter()
            result = run_closed_loop(sc, None, cfg.planner)
            return i, sc, None, result, time.perf_counter() - t0
        gen = generate(
            sc, models[0], models[1], guidance, cfg.selection, cfg.limits, samples, cfg.diffusion.ddim_steps, cfg.seed + 1000 * i, cfg.planner
        )
        result = run_closed_loop(sc, gen.candidate_futures(gen.selected), cfg.planner, gen.elapsed, gen.selected)
        return i, sc, gen, result, gen.elapsed

    out.mkdir(parents=True, exist_ok=True)
    rows, events, timings = [], [], {}
    for i, sc, gen, result, elapsed in _pmap(one, list(enumerate(val))):
        scene_dir = out / f"scene_{i:05d}"
        write_scenario(scene_dir / "ground_truth.json", sc)
        rollout = {"states": _states_json(result.states), "planner_failed": result.planner_failed, "events": result.events.to_dict()}
        if gen is None:
            write_scenario(scene_dir / "selected.json", sc)
            rollout["selected"] = 0
        else:
            write_scenario(scene_dir / "selected.json", gen.selected_scenario)
            rollout["selected"] = gen.selected
            _write_json(
                scene_dir / "candidates.json",
                {
                    "selected": gen.selected,
                    "futures": _states_json(gen.futures),
                    "scores": [{"candidate_index": s.candidate_index, "j_br": s.j_br, "j_ar": s.j_ar, "j_adv": s.j_adv, "phi": s.phi, "C": s.score} for s in gen.scores],
                },
            )
            for s in gen.scores:
                rows.append([i, s.candidate_index, repr(s.j_br), repr(s.j_ar), repr(s.j_adv), s.phi, repr(s.score), int(s.candidate_index == gen.selected)])
        _write_json(scene_dir / "rollout.json", rollout)
        events.append(result.event_record(scene=i))
        timings[f"scene_{i:05d}"] = elapsed
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["scene", "candidate_index", "j_br", "j_ar", "j_adv", "phi", "C", "selected"])
    writer.writerows(rows)
    _write_text(out / "candidates.csv", buf.getvalue())
    _write_text(out / "events.jsonl", "".join(json.dumps(e, sort_keys=True) + "\n" for e in events))
    run = {"mode": mode, "scenes": len(val), "samples": 1 if mode == "replay" else samples, "seed": cfg.seed, "config": cfg.to_dict()}
    _write_json(out / "run.json", run)
    _write_json(out / "timings.json", timings)
    return run


def load_results(results_dir: Path):
    """Ground truths, closed-loop results and candidate futures of a simulate run."""
    results_dir = Path(results_dir)
    run_file = results_dir / "run.json"
    if not run_file.exists():
        raise MissingDependency(f"{results_dir} is not a simulate output (no run.json)")
    run = json.loads(run_file.read_text())
    timings_file = results_dir / "timings.json"
    timings = json.loads(timings_file.read_text()) if timings_file.exists() else {}
    gts, results, candidates = [], [], []
    for scene_dir in sorted(results_dir.glob("scene_*")):
        gt = read_scenario(scene_dir / "ground_truth.json")
        roll = json.loads((scene_dir / "rollout.json").read_text())
        states = np.array(roll["states"], dtype=np.float64)
        result = SimulationResult(gt, states, derive_events(states, gt), roll["planner_failed"], timings.get(scene_dir.name, float("nan")), roll["selected"])
        cand_file = scene_dir / "candidates.json"
        cands = np.array(json.loads(cand_file.read_text())["futures"]) if cand_file.exists() else None
        gts.append(gt)
        results.append(result)
        candidates.append(cands)
    return run, gts, results, candidates


def evaluate_run(results_dir: Path) -> tuple[str, MetricsReport, list[tuple[str, MetricsReport]]]:
    run, gts, results, candidates = load_results(results_dir)
    if not gts:
        raise MissingDependency(f"no scenes in {results_dir}")

    def report(idx) -> MetricsReport:
        rep = compute_metrics([results[i] for i in idx], [gts[i] for i in idx], 1, diversity=False)
        sets = [(gts[i], candidates[i]) for i in idx if candidates[i] is not None and len(candidates[i]) >= 2]
        if sets:
            truths = [np.array([g.agents[j].future for j in g.non_ego_indices]) for g, _ in sets]
            rep.min_sfde = float(np.mean([min_sfde(c, t) for (_, c), t in zip(sets, truths)]))
            rep.fdd = float(np.mean([fdd(c) for _, c in sets]))
        return rep

    per_scene = [(f"scene_{i:05d}", report([i])) for i in range(len(gts))]
    return run["mode"], report(range(len(gts))), per_scene


def cmd_evaluate(result_dirs: list[Path], out: Path | None) -> dict:
    summaries = {}
    for rd in result_dirs:
        mode, agg, per_scene = evaluate_run(rd)
        target = out or Path(rd)
        label = mode if out is not None and len(result_dirs) > 1 else "metrics"
        _write_text(target / f"{label}.csv", metrics_csv(per_scene + [("aggregate", agg)]))
        _write_text(target / f"{label}_summary.json", agg.to_json() + "\n")
        summaries[mode if mode not in summaries else f"{mode}_{len(summaries)}"] = agg
    if len(result_dirs) > 1:
        target = out or Path(result_dirs[0]).parent
        _write_text(target / "ablation.csv", metrics_csv(list(summaries.items())))
    return summaries


def cmd_render(path: Path, out: Path) -> int:
    path = Path(path)
    if path.is_dir():
        sc_file = path / "selected.json"
        if not sc_file.exists():
            raise MissingDependency(f"{path} has no selected.json")
        sc = read_scenario(sc_file)
        roll_file = path / "rollout.json"
        states = np.array(json.loads(roll_file.read_text())["states"]) if roll_file.exists() else None
    elif path.exists():
        sc, states = read_scenario(path), None
    else:
        raise MissingDependency(f"{path} does not exist")
    frames = render_frames(sc, states)
    write_frames(out, frames)
    return len(frames)


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run configuration JSON")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--checkpoint", type=Path, help="checkpoint directory")
    common.add_argument("--scenes", type=int, help="number of scenes")
    common.add_argument("--samples", type=int, help="candidates per scene (M)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="scenario-forge", description="Guided latent-diffusion traffic scenario generation.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic train/val corpus")
    p = sub.add_parser("train", parents=[common], help="train the VAE or the latent denoiser")
    p.add_argument("stage", choices=("vae", "ldm"))
    p = sub.add_parser("simulate", parents=[common], help="generate and roll out scenarios")
    p.add_argument("--mode", choices=MODES, default="guided")
    p = sub.add_parser("evaluate", parents=[common], help="compute metrics for simulate outputs")
    p.add_argument("results", nargs="+", type=Path)
    p = sub.add_parser("render", parents=[common], help="render SVG frames")
    p.add_argument("input", type=Path, help="scenario JSON or a simulate scene directory")
    return parser


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.samples is not None:
        if args.samples < 1:
            raise ConfigError("--samples must be >= 1")
        cfg = cfg.with_overrides(diffusion={"samples": args.samples})
    if args.scenes is not None and args.scenes < 1:
        raise ConfigError("--scenes must be >= 1")
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        ckpt_dir = Path(args.checkpoint or cfg.paths.checkpoint_dir)
        if args.command == "gen-data":
            out = Path(args.out or cfg.paths.data_dir)
            manifest = cmd_gen_data(cfg, out, args.scenes or 1000)
            print(f"wrote {manifest['train']['count']} train and {manifest['val']['count']} val scenarios to {out}")
        elif args.command == "train":
            if args.out is not None:
                ckpt_dir = Path(args.out)
            path = cmd_train_vae(cfg, ckpt_dir) if args.stage == "vae" else cmd_train_ldm(cfg, ckpt_dir)
            print(f"checkpoint: {path}")
        elif args.command == "simulate":
            out = Path(args.out or Path(cfg.paths.output_dir) / args.mode)
            run = cmd_simulate(cfg, args.mode, out, args.scenes, cfg.diffusion.samples, ckpt_dir)
            print(f"simulated {run['scenes']} scenes ({args.mode}) into {out}")
        elif args.command == "evaluate":
            summaries = cmd_evaluate(args.results, args.out)
            for mode, rep in summaries.items():
                print(f"{mode}: adv-ego collision {rep.adv_ego_coll_rate:.2f}%  adv off-road {rep.adv_offroad_rate:.2f}%  ADE {rep.ade:.3f} m")
        elif args.command == "render":
            out = Path(args.out or "frames")
            n = cmd_render(args.input, out)
            print(f"wrote {n} frames to {out}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingDependency, FileNotFoundError) as exc:
        print(f"missing dependency: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if "mismatch" in str(exc) else EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - map any failure to the runtime exit code
        logger.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
