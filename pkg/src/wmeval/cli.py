"""``wmeval`` command line: gen-data, train, eval, oracle-check."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from wmeval import env, io
from wmeval.config import SPLITS, ConfigError, RunConfig, load_config, policy_text
from wmeval.diffusion import DecodeConfig, lr_at, make_schedule, stack_sequences, train_step
from wmeval.metrics import FrameDistance, correlation_study
from wmeval.neural import AdamW, CheckpointError, ModelConfig, TrainingError, WorldModelNet, load_checkpoint, save_checkpoint
from wmeval.tokens import Vocabulary, make_layout

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 2, 3
PROTOCOLS = ("controllability", "progress", "roundtrip", "shuffle", "corruption", "correlation")
LOSS_COLUMNS = ["step", "loss", "lam_mean", "mask_fraction"]

log = logging.getLogger("wmeval")


class UsageError(ValueError):
    pass


def set_threads() -> None:
    n = os.environ.get("WMEVAL_THREADS")
    if n:
        try:
            torch.set_num_threads(max(1, int(n)))
        except ValueError:
            raise UsageError(f"WMEVAL_THREADS must be an integer, got {n!r}") from None


# ---------------------------------------------------------------------------
# data


def split_seed(cfg: RunConfig, split: str, group: int) -> int:
    return cfg.data.seed * 1000 + SPLITS.index(split) * 100 + group


def cmd_gen_data(cfg: RunConfig) -> dict:
    out = cfg.path("data_dir")
    manifest = {"config_hash": cfg.hash, "width": cfg.env.width, "height": cfg.env.height, "chunk_size": cfg.env.chunk_size, "splits": {}}
    for split in SPLITS:
        trajs, groups = [], []
        for g, (spec, n) in enumerate(cfg.split_groups(split)):
            seed = split_seed(cfg, split, g)
            part = env.collect_trajectories(
                spec, n, cfg.env.chunk_size, cfg.data.max_steps, seed, cfg.env.width, cfg.env.height, cfg.data.linger_chunks
            )
            groups.append(
                {
                    "policy": policy_text(spec),
                    "seed": seed,
                    "start": len(trajs),
                    "count": n,
                    "success_rate": env.success_rate(part) if part else None,
                }
            )
            trajs += part
        path = out / f"{split}.jsonl"
        env.write_jsonl(trajs, path)
        manifest["splits"][split] = {
            "file": path.name,
            "sha256": io.file_hash(path),
            "episodes": len(trajs),
            "success_rate": env.success_rate(trajs) if trajs else None,
            "groups": groups,
        }
    io.write_json(out / "manifest.json", manifest)
    return manifest


def load_manifest(cfg: RunConfig) -> dict:
    path = cfg.path("data_dir") / "manifest.json"
    if not path.exists():
        raise UsageError(f"no dataset at {path.parent}; run gen-data first")
    man = json.loads(path.read_text())
    if (man["width"], man["height"], man["chunk_size"]) != (cfg.env.width, cfg.env.height, cfg.env.chunk_size):
        raise UsageError("dataset was generated with a different env section")
    return man


def load_split(cfg: RunConfig, split: str) -> tuple[list[env.Trajectory], list[dict]]:
    man = load_manifest(cfg)
    info = man["splits"][split]
    path = cfg.path("data_dir") / info["file"]
    if io.file_hash(path) != info["sha256"]:
        raise UsageError(f"{path} does not match its manifest")
    trajs = env.read_jsonl(path, cfg.env.width, cfg.env.height)
    for grp in info["groups"]:
        for t in trajs[grp["start"] : grp["start"] + grp["count"]]:
            t.policy = grp["policy"]
    return trajs, info["groups"]


# ---------------------------------------------------------------------------
# training


def build_model(cfg: RunConfig, vocab: Vocabulary) -> WorldModelNet:
    layout = make_layout(cfg.env.width, cfg.env.height, cfg.model.memory_capacity, cfg.env.chunk_size)
    mc = ModelConfig.for_layout(
        vocab,
        layout,
        d_model=cfg.model.d_model,
        n_layers=cfg.model.n_layers,
        n_heads=cfg.model.n_heads,
        ff_mult=cfg.model.ff_mult,
        init_scale=cfg.model.init_scale,
        seed=cfg.model.seed,
    )
    return WorldModelNet(mc, layout, vocab.pad_id)


def checkpoint_path(cfg: RunConfig, step: int | None = None) -> Path:
    run = cfg.path("run_dir")
    return run / ("model.ckpt" if step is None else f"step_{step:07d}.ckpt")


def latest_checkpoint(cfg: RunConfig) -> Path | None:
    found = sorted(cfg.path("run_dir").glob("step_*.ckpt"))
    return found[-1] if found else None


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def cmd_train(cfg: RunConfig, resume: bool = False, steps: int | None = None) -> dict:
    man = load_manifest(cfg)
    trajs, _ = load_split(cfg, "train")
    vocab = Vocabulary()
    total = cfg.train.steps if steps is None else steps
    model = build_model(cfg, vocab)
    opt = AdamW(model, cfg.train.lr, weight_decay=cfg.train.weight_decay)
    rng = np.random.default_rng(cfg.train.seed)
    rows: list[dict] = []
    start = 0
    data_hash = io.stable_hash(man)
    if resume:
        ck = latest_checkpoint(cfg)
        if ck is None:
            raise UsageError("--resume given but no checkpoint found")
        model, _, header, opt = load_checkpoint(ck)
        extra = header["extra"]
        if extra.get("config_hash") != cfg.hash:
            raise UsageError(f"{ck} was written under a different config")
        start = extra["step"]
        rows = extra["loss_rows"]
        rng.bit_generator.state = extra["rng_state"]
        log.info("resumed from %s at step %d", ck, start)
    clean = stack_sequences(trajs, vocab, model.layout)
    if len(clean) == 0:
        raise UsageError("training split is empty")
    schedule = make_schedule()
    out_dir = cfg.path("run_dir")

    def extra_for(step: int) -> dict:
        return {
            "config_hash": cfg.hash,
            "dataset_manifest_hash": data_hash,
            "step": step,
            "rng_state": _rng_state(rng),
            "loss_rows": rows,
        }

    t0 = time.perf_counter()
    for i in range(start, total):
        idx = rng.integers(len(clean), size=cfg.train.batch_size)
        lr = lr_at(i, total, cfg.train.lr, cfg.train.lr_schedule)
        try:
            st = train_step(model, opt, clean[idx], vocab, schedule, rng, cfg.train.w_vis, cfg.train.w_score, lr)
        except TrainingError as exc:
            raise TrainingError(f"step {i + 1}: {exc}") from None
        step = i + 1
        if step % cfg.train.log_every == 0 or step == total:
            rows.append({"step": step, "loss": st.loss, "lam_mean": st.lam_mean, "mask_fraction": st.mask_fraction})
            log.info("step %d loss %.4f (%.0fs)", step, st.loss, time.perf_counter() - t0)
        if cfg.train.checkpoint_every and step % cfg.train.checkpoint_every == 0 and step != total:
            save_checkpoint(checkpoint_path(cfg, step), model, vocab, opt, extra_for(step))
    save_checkpoint(checkpoint_path(cfg, total), model, vocab, opt, extra_for(total))
    save_checkpoint(checkpoint_path(cfg), model, vocab, None, extra_for(total))
    io.write_csv(out_dir / "loss.csv", rows, LOSS_COLUMNS, cfg.hash)
    return {"steps": total, "final_loss": rows[-1]["loss"] if rows else None}


# ---------------------------------------------------------------------------
# evaluation


def make_predictor(cfg: RunConfig, oracle_model: bool, use_memory: bool = True):
    from wmeval.rollout import SimulatorPredictor, WorldModelPredictor

    if oracle_model:
        return SimulatorPredictor()
    path = checkpoint_path(cfg)
    if not path.exists():
        raise UsageError(f"no trained model at {path}; run train first")
    model, vocab, header, _ = load_checkpoint(path)
    if vocab.hash() != Vocabulary().hash():
        raise CheckpointError("checkpoint vocabulary does not match this build")
    if model.layout.width != cfg.env.width or model.layout.chunk_size != cfg.env.chunk_size:
        raise UsageError("checkpoint layout does not match the config")
    dc = DecodeConfig(steps=cfg.decode.steps, temperature=cfg.decode.temperature, seed=cfg.decode.seed)
    return WorldModelPredictor(model, vocab, dc, use_memory=use_memory, batch_size=cfg.eval.batch_size)


def eval_subsets(cfg: RunConfig) -> dict[str, list[env.Trajectory]]:
    """Held-out successful expert runs and failed noisy runs."""
    trajs, _ = load_split(cfg, "test")
    succ = [t for t in trajs if t.success and t.policy == "expert"]
    fail = [t for t in trajs if not t.success and t.policy != "expert"]
    if not succ or not fail:
        raise UsageError(f"test split needs successful expert and failed noisy runs (got {len(succ)}, {len(fail)})")
    return {"D_succ": succ, "D_fail": fail}


def _mean(xs):
    return float(np.mean(xs)) if len(xs) else None


def run_protocol(cfg: RunConfig, protocol: str, oracle_model: bool = False, horizons=None, p_values=None, seed=None) -> tuple[list[dict], list[str], dict]:
    from wmeval import rollout

    base = FrameDistance(cfg.eval.base_distance)
    W, H, D, K = cfg.env.width, cfg.env.height, cfg.env.chunk_size, cfg.model.memory_capacity
    seed = cfg.eval.seed if seed is None else seed
    predictor = make_predictor(cfg, oracle_model)
    if protocol == "controllability":
        reps = rollout.controllability_eval(predictor, eval_subsets(cfg), base, W, H, K)
        rows = []
        for rep in reps.values():
            rows += rep.rows
            rows.append({"subset": rep.name, "trajectory": "all", "chunk": "all", "dist": rep.dist, "delta_dist": rep.delta_dist, "mismatch": rep.mismatch})
        agg = {
            name: {"n_trajectories": r.n_trajectories, "n_transitions": r.n_transitions, "dist": r.dist, "delta_dist": r.delta_dist, "mismatch": r.mismatch}
            for name, r in reps.items()
        }
        succ = reps["D_succ"].delta_dist
        agg["fail_over_succ"] = reps["D_fail"].delta_dist / succ if succ > 0 else None
        cols = ["subset", "trajectory", "chunk", "dist", "delta_dist", "mismatch", "pred_progress", "true_progress", "terminal"]
        return rows, cols, agg
    if protocol == "progress":
        subsets = eval_subsets(cfg)
        trajs, _ = load_split(cfg, "test")
        acc, rows = rollout.progress_agreement(predictor, trajs, W, H, K)
        return rows, ["trajectory", "pred_progress", "success", "agree"], {"accuracy": acc, "n": len(rows), "n_succ": len(subsets["D_succ"]), "n_fail": len(subsets["D_fail"])}
    if protocol == "roundtrip":
        horizons = horizons or cfg.eval.horizon_list
        seeds = env.episode_seeds(seed, cfg.eval.episodes)
        rows = []
        agg = {}
        variants = [("full", predictor)]
        variants.append(("no_memory", predictor if oracle_model else make_predictor(cfg, False, use_memory=False)))
        for cond, pred in variants:
            part = rollout.roundtrip_eval(pred, horizons, seeds, D, W, H, base, K)
            for r in part:
                r["condition"] = cond
            rows += part
            means = {h: _mean([r["distance"] for r in part if r["H"] == h]) for h in sorted(set(horizons))}
            rows += [{"condition": cond, "H": h, "seed": "mean", "distance": m} for h, m in means.items()]
            agg[cond] = {str(h): m for h, m in means.items()}
        return rows, ["condition", "H", "seed", "distance"], agg
    if protocol in ("shuffle", "corruption"):
        ps = p_values or ([0.0, 1.0] if protocol == "shuffle" else cfg.eval.p_list)
        subsets = eval_subsets(cfg)
        samples = rollout.teacher_forced_samples(subsets["D_succ"] + subsets["D_fail"], W, H, K)
        rows = rollout.shuffle_eval(predictor, samples, ps, seed, base)
        agg = {"p": [r["p"] for r in rows], "corrupted_delta_dist": [r["corrupted_delta_dist"] for r in rows], "aligned_delta_dist": rows[0]["aligned_delta_dist"]}
        return rows, ["p", "aligned_delta_dist", "corrupted_delta_dist", "n_swapped", "n"], agg
    if protocol == "correlation":
        seeds = env.episode_seeds(seed, cfg.eval.episodes)
        rep = correlation_study(predictor, cfg.eval.policy_list, seeds, cfg.eval.max_chunks, D, W, H, K)
        agg = rep.aggregate()
        if rep.notes:
            agg["notes"] = rep.notes
        return rep.scatter_rows(), ["policy_id", "real_rate", "imagined_rate"], agg
    raise UsageError(f"unknown protocol {protocol!r}; choose from {', '.join(PROTOCOLS)}")


def render_svg(protocol: str, rows: list[dict]) -> str | None:
    from wmeval import svg

    if protocol == "roundtrip":
        series = {}
        for r in rows:
            if r["seed"] == "mean":
                series.setdefault(r["condition"], []).append((r["H"], r["distance"]))
        return svg.line_chart(series, "round-trip distance", "H (chunks)", "distance")
    if protocol in ("shuffle", "corruption"):
        return svg.line_chart(
            {"corrupted": [(r["p"], r["corrupted_delta_dist"]) for r in rows], "aligned": [(r["p"], r["aligned_delta_dist"]) for r in rows]},
            "action corruption",
            "swap probability p",
            "delta distance",
        )
    if protocol == "correlation":
        return svg.scatter_chart(
            [(r["real_rate"], r["imagined_rate"]) for r in rows], [r["policy_id"] for r in rows], "real vs imagined success", "real", "imagined"
        )
    if protocol == "controllability":
        agg = [r for r in rows if r["trajectory"] == "all"]
        return svg.line_chart({"delta_dist": [(i, r["delta_dist"]) for i, r in enumerate(agg)]}, "controllability (0=D_succ, 1=D_fail)", "subset", "delta distance")
    return None


def cmd_eval(cfg: RunConfig, protocol: str, oracle_model: bool = False, emit_svg: bool = False, horizons=None, p_values=None, seed=None) -> dict:
    rows, cols, agg = run_protocol(cfg, protocol, oracle_model, horizons, p_values, seed)
    out = cfg.path("out_dir")
    stem = protocol + ("_oracle" if oracle_model else "")
    io.write_csv(out / f"{stem}.csv", rows, cols, cfg.hash)
    agg = {"protocol": protocol, "config_hash": cfg.hash, "oracle_model": oracle_model, **agg}
    io.write_json(out / f"{stem}.json", agg)
    if emit_svg:
        text = render_svg(protocol, rows)
        if text is not None:
            io.atomic_write_text(out / f"{stem}.svg", text)
    return agg


def cmd_oracle_check(mutate_gradient: bool = False, only: list[str] | None = None) -> bool:
    from wmeval.oracles import run_all

    t0 = time.perf_counter()
    ok = True
    for r in run_all(mutate_gradient, only):
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<16} {r.seconds:6.1f}s  {r.detail}", flush=True)
        ok &= r.passed
    print(f"{'all oracles passed' if ok else 'oracle failure'} in {time.perf_counter() - t0:.1f}s")
    return ok


# ---------------------------------------------------------------------------


def _csv_list(kind):
    def parse(text: str):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {text!r}") from None

    return parse


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wmeval", description="Masked-diffusion world model: data, training and evaluation.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train", "eval"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--seed", type=int, default=None, help="override the command's primary seed")
        p.add_argument("-v", "--verbose", action="store_true")
    tr = sub.choices["train"]
    tr.add_argument("--resume", action="store_true", help="continue from the newest periodic checkpoint")
    tr.add_argument("--steps", type=int, default=None)
    ev = sub.choices["eval"]
    ev.add_argument("--protocol", required=True, choices=PROTOCOLS)
    ev.add_argument("--svg", action="store_true")
    ev.add_argument("--H", type=_csv_list(int), default=None, help="round-trip horizons, e.g. 5,10,15,20")
    ev.add_argument("--p", type=_csv_list(float), default=None, help="swap probabilities, e.g. 0,0.5,1")
    ev.add_argument("--oracle-model", action="store_true", help="use the true simulator as the predictor")
    oc = sub.add_parser("oracle-check")
    oc.add_argument("--mutate-gradient", action="store_true", help="corrupt analytic gradients (negative control)")
    oc.add_argument("--only", type=_csv_list(str), default=None)
    oc.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        set_threads()
        if args.command == "oracle-check":
            return EXIT_OK if cmd_oracle_check(args.mutate_gradient, args.only) else EXIT_FAILED
        cfg = load_config(args.config)
        if args.command == "gen-data":
            if args.seed is not None:
                cfg.data.seed = args.seed
            man = cmd_gen_data(cfg)
            print(json.dumps({s: {"episodes": v["episodes"], "success_rate": v["success_rate"]} for s, v in man["splits"].items()}, sort_keys=True))
        elif args.command == "train":
            if args.seed is not None:
                cfg.train.seed = args.seed
            print(json.dumps(cmd_train(cfg, args.resume, args.steps), sort_keys=True))
        else:
            agg = cmd_eval(cfg, args.protocol, args.oracle_model, args.svg, args.H, args.p, args.seed)
            print(json.dumps(agg, sort_keys=True))
    except (ConfigError, UsageError, CheckpointError, ValueError, OSError) as exc:
        print(f"wmeval: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TrainingError as exc:
        print(f"wmeval: training failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
