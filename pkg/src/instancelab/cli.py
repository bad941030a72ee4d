"""Command-line entry point.

Commands map the package's verifications and experiments onto reproducible
runs: every command reads one TOML config, derives all randomness from the
run seed, writes its outputs plus a run manifest into the output directory,
and uses the exit-code contract 0 = pass, 1 = scientific failure or runtime
error, 2 = usage/configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, iape, learner, metrics, plots, rng
from .config import RunConfig, dump_defaults, load_config, config_from_dict
from .env import PomdpModel
from .errors import InstanceLabError, ModelValidationError, UsageError
from .instance import Instance, instance_seeds
from .policies import run_instance_episode
from .verification import run_verify_target

TRAIN_LOG_COLUMNS = ("step", "algo", "seed", "train_return_mean",
                     "test_return_mean", "l_V", "l_pi", "grad_norm")
CONTINUAL_COLUMNS = ("step", "old_train", "new_train", "test", "algo", "seed")


def _write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for row in rows:
            w.writerow([row.get(c, "") for c in columns])


def _write_json(path, doc) -> None:
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


class Manifest:
    def __init__(self, command: str, cfg: RunConfig, out_dir: Path, args: dict):
        self.doc = {
            "artifact_version": __version__,
            "command": command,
            "args": args,
            "config": cfg.to_dict(),
            "seed": cfg.seed,
            "out_dir": str(out_dir),
            "started_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "outputs": [],
            "results": {},
        }
        self.out_dir = out_dir

    def add_output(self, name: str):
        self.doc["outputs"].append(name)
        return self.out_dir / name

    def finish(self, results: dict) -> None:
        self.doc["results"] = results
        self.doc["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%SZ",
                                                time.gmtime())
        _write_json(self.out_dir / "run.json", self.doc)


def _prepare(args, command: str) -> tuple:
    cfg = getattr(args, "_cfg", None)
    if cfg is None:
        cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    if args.workers is not None:
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        cfg.workers = args.workers
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(command, cfg, out_dir,
                        {k: v for k, v in vars(args).items()
                         if k not in ("func", "config", "_cfg")})
    return cfg, out_dir, manifest


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_verify(args) -> int:
    cfg, out_dir, manifest = _prepare(args, "verify")
    kwargs = {}
    if args.target == "lemma1":
        kwargs["n_instances"] = cfg.verify["n_instances"]
    elif args.target == "lemma2":
        kwargs["n_sets"] = cfg.verify["n_sets"]
    elif args.target == "lemma3":
        kwargs["n_seeds"] = cfg.verify["n_seeds"]
    report = run_verify_target(args.target, seed=cfg.seed, **kwargs)
    report.save(manifest.add_output(f"verify_{args.target}.json"))
    manifest.finish({"target": args.target, "pass": report.passed,
                     "value": report.value, "tolerance": report.tolerance})
    print(f"{args.target}: {'PASS' if report.passed else 'FAIL'} "
          f"(value={report.value:.6g}, tolerance={report.tolerance:.6g})")
    return 0 if report.passed else 1


def _save_checkpoint(path, result: iape.TrainResult) -> None:
    with open(path, "w") as f:
        f.write(learner.checkpoint_to_json(result.theta, result.heads,
                                           result.adam, result.meta))
        f.write("\n")


def _load_checkpoint(path, model: PomdpModel) -> iape.TrainResult:
    theta, heads, adam, meta = learner.checkpoint_from_json(
        Path(path).read_text())
    if meta.get("model") != model.name:
        raise UsageError(f"checkpoint was trained on {meta.get('model')!r}, "
                         f"config builds {model.name!r}")
    if meta.get("algo") != "inf":
        seeds = instance_seeds(meta["instance_set_seed"],
                               meta["num_subsets"]
                               * meta["instances_per_subset"])
        per = meta["instances_per_subset"]
        pools = [[Instance(model, s) for s in seeds[m * per:(m + 1) * per]]
                 for m in range(meta["num_subsets"])]
    else:
        pools = [[]]
    return iape.TrainResult(theta, heads, adam, meta, [], pools)


def cmd_train(args) -> int:
    cfg, out_dir, manifest = _prepare(args, "train")
    model = cfg.build_model()
    result = iape.train(cfg.train, model)
    _write_csv(manifest.add_output("run_log.csv"), TRAIN_LOG_COLUMNS,
               result.log_rows)
    _save_checkpoint(manifest.add_output("checkpoint.json"), result)
    last = result.log_rows[-1] if result.log_rows else {}
    manifest.finish({"env_steps": result.meta["env_steps"],
                     "final_train_return": last.get("train_return_mean"),
                     "final_test_return": last.get("test_return_mean")})
    print(f"trained {cfg.train.algo} for {result.meta['env_steps']} steps; "
          f"final test return "
          f"{last.get('test_return_mean', float('nan')):.4f}")
    return 0


def _parse_checkpoint_args(pairs) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise UsageError(f"--checkpoint expects label=path, got {pair!r}")
        label, path = pair.split("=", 1)
        if label in out:
            raise UsageError(f"duplicate checkpoint label {label!r}")
        out[label] = path
    if not out:
        raise UsageError("at least one --checkpoint label=path is required")
    return out


def _build_eval_pools(cfg: RunConfig, model: PomdpModel) -> dict:
    t = cfg.train
    train_seeds = instance_seeds(t.instance_set_seed,
                                 t.num_subsets * t.instances_per_subset)
    test_seeds = instance_seeds(cfg.eval["test_pool_seed"],
                                cfg.eval["test_pool_size"])
    return {"train": [Instance(model, s) for s in train_seeds],
            "test": [Instance(model, s) for s in test_seeds]}


def _pool_returns(model, policy, pool, episodes, seed, split) -> list:
    vals = []
    for i, inst in enumerate(pool):
        per = []
        for e in range(episodes):
            stream = rng.stream(seed, f"ret-{split}", i * episodes + e)
            per.append(run_instance_episode(inst, policy, stream)
                       .discounted_return(model.discount))
        vals.append(float(np.mean(per)))
    return vals


def cmd_evaluate(args) -> int:
    cfg, out_dir, manifest = _prepare(args, "evaluate")
    model = cfg.build_model()
    checkpoints = _parse_checkpoint_args(args.checkpoint)
    results = {label: _load_checkpoint(path, model)
               for label, path in checkpoints.items()}
    if args.base is not None and args.base not in results:
        raise UsageError(f"--base {args.base!r} is not a checkpoint label")
    if args.reference is not None and args.reference not in results:
        raise UsageError(f"--reference {args.reference!r} is not a "
                         "checkpoint label")
    pools = _build_eval_pools(cfg, model)
    policies = {label: iape.ConsensusPolicy(r.theta, r.heads)
                for label, r in results.items()}
    eval_seed = rng.derive_seed(cfg.seed, "evaluate")
    sig_seed = cfg.eval["signature_seed"]
    episodes = cfg.eval["episodes_per_instance"]

    signatures = {}
    if args.reference is not None:
        for split, pool in pools.items():
            ref_pol = policies[args.reference]
            signatures[split] = [
                metrics.time_averaged_policy(
                    ref_pol, inst, seed=sig_seed,
                    episodes=cfg.eval["signature_episodes"], instance_id=i)
                for i, inst in enumerate(pool)]

    rows = []
    summary = {}
    for label, result in results.items():
        policy = policies[label]
        heads = result.heads
        for split, pool in pools.items():
            returns = _pool_returns(model, policy, pool, episodes, eval_seed,
                                    split)
            row = {"label": label, "split": split,
                   "return_mean": float(np.mean(returns)),
                   "return_sd": float(np.std(returns, ddof=1))}
            if args.base is not None and label != args.base:
                dt = metrics.delta_time_to_reward(
                    policy, policies[args.base], pool, model.max_reward,
                    seed=eval_seed, episodes=episodes)
                row["dt_vs_base_mean"] = dt["mean"]
                row["dt_vs_base_sd"] = dt["sd"]
                row["dt_count"] = dt["count"]
                plots.histogram_svg(
                    manifest.add_output(f"dt_{label}_{split}.svg"),
                    dt["deltas"], title=f"time-to-reward delta: {label} vs "
                    f"{args.base} ({split})", x_label="delta steps")
            if args.reference is not None and label != args.reference:
                kls = []
                for i, inst in enumerate(pool):
                    sig = metrics.time_averaged_policy(
                        policy, inst, seed=sig_seed,
                        episodes=cfg.eval["signature_episodes"], instance_id=i)
                    kls.append(metrics.kl_divergence(
                        signatures[split][i].distribution, sig.distribution))
                finite = [k for k in kls if np.isfinite(k)]
                row["kl_to_reference_mean"] = (float(np.mean(finite))
                                               if finite else None)
                row["kl_to_reference_sd"] = (float(np.std(finite, ddof=1))
                                             if len(finite) > 1 else None)
                plots.histogram_svg(
                    manifest.add_output(f"kl_{label}_{split}.svg"), kls,
                    title=f"policy divergence from {args.reference}: {label} "
                    f"({split})", x_label="KL (nats)")
            rows.append(row)
        if heads.num_subsets >= 2:
            sim = metrics.cosine_similarity_heads(heads)
            summary[label] = {
                "policy_head_cosine_median":
                    metrics.median_offdiagonal(sim["policy"]),
                "value_head_cosine_median":
                    metrics.median_offdiagonal(sim["value"]),
                "ensemble_agreement": metrics.ensemble_agreement(
                    result.theta, heads, pools["test"], seed=sig_seed),
            }
            with open(manifest.add_output(f"cosine_{label}.csv"), "w",
                      newline="") as f:
                w = csv.writer(f)
                w.writerow(["kind"] + [f"head{j}"
                                       for j in range(heads.num_subsets)])
                for kind in ("policy", "value"):
                    for j, r in enumerate(sim[kind]):
                        w.writerow([f"{kind}{j}"] + [repr(x) for x in r])

    columns = ["label", "split", "return_mean", "return_sd",
               "dt_vs_base_mean", "dt_vs_base_sd", "dt_count",
               "kl_to_reference_mean", "kl_to_reference_sd"]
    _write_csv(manifest.add_output("evaluation.csv"), columns, rows)
    manifest.finish({"rows": len(rows), "head_geometry": summary})
    print(f"evaluated {len(results)} checkpoint(s) on "
          f"{len(pools['train'])}+{len(pools['test'])} instances")
    return 0


def cmd_continual(args) -> int:
    cfg, out_dir, manifest = _prepare(args, "continual")
    model = cfg.build_model()
    result = _load_checkpoint(args.checkpoint, model)
    shifted = iape.continual_shift(result, model, cfg.train)
    rows = shifted.log_rows
    _write_csv(manifest.add_output("continual_log.csv"), CONTINUAL_COLUMNS,
               [dict(r, old_train=r.get("old_train"),
                     new_train=r.get("new_train"),
                     test=r.get("test_return_mean")) for r in rows])
    steps = [r["step"] for r in rows]
    plots.lines_svg(
        manifest.add_output("continual.svg"), steps,
        {"old_train": [r.get("old_train") for r in rows],
         "new_train": [r.get("new_train") for r in rows],
         "test": [r.get("test_return_mean") for r in rows]},
        title="continual shift", y_label="return")
    _save_checkpoint(manifest.add_output("checkpoint.json"), shifted)
    manifest.finish({"rows": len(rows),
                     "env_steps": shifted.meta["env_steps"]})
    print(f"continual shift ran to {shifted.meta['env_steps']} steps")
    return 0


def cmd_dump_model(args) -> int:
    cfg, out_dir, manifest = _prepare(args, "dump-model")
    model = cfg.build_model()
    _write_json(manifest.add_output("model.json"), model.to_json_dict())
    manifest.finish({"model": model.name})
    print(f"wrote model.json for {model.name}")
    return 0


def cmd_dump_tree(args) -> int:
    cfg, out_dir, manifest = _prepare(args, "dump-tree")
    model = cfg.build_model()
    inst = Instance(model, args.instance_seed)
    _write_json(manifest.add_output("tree.json"),
                inst.to_tree_dict(args.depth))
    manifest.finish({"instance_seed": args.instance_seed,
                     "depth": args.depth})
    print(f"wrote tree.json (depth {args.depth})")
    return 0


def cmd_replay(args) -> int:
    doc = json.loads(Path(args.manifest).read_text())
    replay_args = argparse.Namespace(**doc["args"])
    replay_args.config = None
    replay_args.out = args.out
    replay_args.seed = None
    replay_args.workers = None
    replay_args._cfg = config_from_dict(doc["config"])
    handler = {"verify": cmd_verify, "train": cmd_train,
               "evaluate": cmd_evaluate, "continual": cmd_continual,
               "dump-model": cmd_dump_model, "dump-tree": cmd_dump_tree}.get(
                   doc["command"])
    if handler is None:
        raise UsageError(f"manifest command {doc['command']!r} is not "
                         "replayable")
    return handler(replay_args)


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="instancelab",
        description="Instance-reuse laboratory for tabular POMDPs.")
    parser.add_argument("--dump-defaults", action="store_true",
                        help="print the default TOML config and exit")
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--config", default=None,
                       help="TOML config path or packaged preset name")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("verify", help="run a quantitative verification target")
    p.add_argument("target", choices=sorted(
        ("lemma1", "corollary1", "lemma2", "lemma3", "lemma4", "gradcheck",
         "eq15-degenerate")))
    common(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("train", help="train one algorithm variant")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="compare trained checkpoints")
    common(p)
    p.add_argument("--checkpoint", action="append", default=[],
                   metavar="LABEL=PATH")
    p.add_argument("--base", default=None,
                   help="label used as the time-to-reward baseline")
    p.add_argument("--reference", default=None,
                   help="label used as the divergence reference policy")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("continual", help="resume a checkpoint on fresh sets")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_continual)

    p = sub.add_parser("dump-model", help="write the model tables as JSON")
    common(p)
    p.set_defaults(func=cmd_dump_model)

    p = sub.add_parser("dump-tree", help="write one instance tree as JSON")
    common(p)
    p.add_argument("--instance-seed", type=int, required=True)
    p.add_argument("--depth", type=int, default=3)
    p.set_defaults(func=cmd_dump_tree)

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.dump_defaults:
        print(dump_defaults())
        return 0
    if getattr(args, "func", None) is None:
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except (UsageError, ModelValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except InstanceLabError as e:
        print(f"failure: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
