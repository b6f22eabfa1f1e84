"""Experiment driver.

Verbs: gen, affinity, train, eval, robust, analyze, table, gradcheck.
Exit codes: 0 success, 2 usage/config error, 3 runtime/data error.
All outputs land under the config's output directory and embed the resolved
config digest plus the seed; reruns with identical inputs are byte-identical
(figures excluded).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, config_digest, load_config
from .evaluation import (
    EvalReport,
    MajorityVoteActor,
    OracleActor,
    RandomActor,
    TopKActor,
    UniformMixActor,
    evaluate,
    gate_analytics,
    robustness_drop,
)
from .fusion import FusionPolicy, load_policy, seed_seq
from .gridworld import OBJECT_CLASSES, EnvBundle, load_map, save_map
from .losses import AffinityMatrix, estimate_affinity, policy_grad_check
from .percept import BankConfig, register_default_bank
from .train import TrainConfig, build_dataset, curve_to_csv, make_suite, rank_branches, train_policy
from . import viz

RULES = ("greedy", "majority", "uniform_mix", "top_k", "random", "oracle")


class DataError(RuntimeError):
    """Missing or inconsistent inputs on disk; maps to exit code 3."""


def fmt(x: float) -> str:
    return repr(float(x))


def write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(v) if isinstance(v, float) else str(v)
                              for v in row))
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# suite IO
# ---------------------------------------------------------------------------

def suite_paths(cfg: ExperimentConfig) -> tuple[Path, Path]:
    out = Path(cfg.out)
    return out / "envs", out / "envs" / "manifest.json"


def cmd_gen(cfg: ExperimentConfig) -> int:
    env_dir, manifest_path = suite_paths(cfg)
    train_envs, test_envs = make_suite(cfg.env, cfg.suite.n_train,
                                       cfg.suite.n_test, cfg.seed)
    manifest = {"format": "sitfuse-suite-v1", "seed": cfg.seed,
                "config_digest": config_digest(cfg), "train": [], "test": []}
    for split, envs in (("train", train_envs), ("test", test_envs)):
        for env in envs:
            rel = f"{env.env_id}.json"
            save_map(env.gmap, env_dir / rel)
            manifest[split].append(rel)
    write_json(manifest_path, manifest)
    print(f"wrote {len(train_envs)} train + {len(test_envs)} test environments "
          f"to {env_dir}")
    return 0


def load_suite(cfg: ExperimentConfig) -> tuple[list[EnvBundle], list[EnvBundle]]:
    env_dir, manifest_path = suite_paths(cfg)
    if not manifest_path.exists():
        raise DataError(f"no environment suite at {manifest_path}; run 'gen' first")
    manifest = json.loads(manifest_path.read_text())
    suites = []
    for split in ("train", "test"):
        bundles = []
        for rel in manifest[split]:
            path = env_dir / rel
            if not path.exists():
                raise DataError(f"suite file {path} is missing")
            bundles.append(EnvBundle.create(Path(rel).stem, load_map(path)))
        suites.append(bundles)
    train_ids = {e.env_id for e in suites[0]}
    test_ids = {e.env_id for e in suites[1]}
    if train_ids & test_ids:
        raise DataError(f"suite splits overlap: {sorted(train_ids & test_ids)}")
    return suites[0], suites[1]


# ---------------------------------------------------------------------------
# affinity
# ---------------------------------------------------------------------------

def affinity_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out) / "affinity.json"


def cmd_affinity(cfg: ExperimentConfig) -> int:
    train_envs, _ = load_suite(cfg)
    bank = register_default_bank(cfg.bank)
    per_env = -(-cfg.affinity_samples // len(train_envs))  # ceil division
    dataset = build_dataset(train_envs, bank, cfg.bank, per_env,
                            seed_int(cfg.seed, "affinity"),
                            goal_radius=cfg.eval.goal_radius)
    matrix = estimate_affinity(bank, dataset.reps, dataset.row_env.tolist())
    doc = matrix.to_json()
    doc["config_digest"] = config_digest(cfg)
    doc["seed"] = cfg.seed
    write_json(affinity_path(cfg), doc)
    print(f"wrote affinity matrix over {dataset.size} states to "
          f"{affinity_path(cfg)}")
    return 0


def seed_int(seed: int, tag: str) -> int:
    return int(seed_seq(seed, tag).generate_state(1)[0])


def load_affinity(cfg: ExperimentConfig) -> AffinityMatrix:
    if cfg.affinity_file:
        override = Path(cfg.affinity_file)
        if not override.exists():
            raise DataError(f"affinity_file {override} does not exist")
        return AffinityMatrix.from_json(json.loads(override.read_text()))
    path = affinity_path(cfg)
    if not path.exists():
        raise DataError(f"no affinity matrix at {path}; run 'affinity' first")
    return AffinityMatrix.from_json(json.loads(path.read_text()))


# ---------------------------------------------------------------------------
# train / eval / robust / analyze
# ---------------------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig, model_name: str) -> int:
    if model_name not in cfg.models:
        raise ConfigError(f"unknown model {model_name!r}; configured models: "
                          f"{sorted(cfg.models)}")
    model = cfg.models[model_name]
    train_envs, _ = load_suite(cfg)
    bank = register_default_bank(cfg.bank)
    dataset = build_dataset(train_envs, bank, cfg.bank, cfg.dataset_per_env,
                            cfg.seed, goal_radius=cfg.eval.goal_radius)
    train_cfg = TrainConfig(
        scheme=model.scheme, iterations=cfg.train.iterations,
        batch_size=cfg.train.batch_size, base_lr=cfg.train.base_lr,
        decay_milestones=cfg.train.decay_milestones,
        decay_factor=cfg.train.decay_factor, lam_lbl=model.lam_lbl,
        lam_aff=model.lam_aff, seed=cfg.train.seed,
        joint_backprop=model.joint_backprop, lbl_variant=model.lbl_variant,
        gate_input=cfg.train.gate_input, log_every=cfg.train.log_every)
    affinity = load_affinity(cfg) if model.lam_aff else None
    stem = Path(cfg.out) / "checkpoints" / model_name
    policy, curve = train_policy(
        dataset, train_cfg, affinity=affinity, checkpoint_stem=stem,
        extra_manifest={"model": model_name, "config_digest": config_digest(cfg)})
    curve_path = Path(cfg.out) / "curves" / f"{model_name}.csv"
    curve_path.parent.mkdir(parents=True, exist_ok=True)
    curve_to_csv(curve, curve_path)
    viz.save_loss_curve(curve, curve_path.with_suffix(".png"), title=model_name)
    print(f"trained {model_name} ({model.scheme}) for {train_cfg.iterations} "
          f"iterations; final total loss {curve[-1]['total']:.4f}")
    print(f"checkpoint at {stem}.json/.bin, curve at {curve_path}")
    return 0


def load_checkpoint_policy(path: str) -> tuple[FusionPolicy, dict]:
    stem = Path(path)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    if not stem.with_suffix(".json").exists():
        raise DataError(f"no checkpoint at {stem}.json")
    return load_policy(stem)


def report_paths(cfg: ExperimentConfig, name: str) -> tuple[Path, Path]:
    base = Path(cfg.out) / "reports"
    return base / f"{name}.json", base / f"{name}.csv"


def write_report(cfg: ExperimentConfig, report: EvalReport) -> None:
    json_path, csv_path = report_paths(cfg, report.name)
    write_json(json_path, report.to_json())
    rows = [[cls, report.per_task[cls]] for cls in OBJECT_CLASSES]
    rows.append(["average", report.average])
    write_csv(csv_path, ["task", "success_rate"], rows)


def cmd_eval(cfg: ExperimentConfig, checkpoint: str, rule: str,
             k: int | None, name: str | None) -> int:
    if rule not in RULES:
        raise ConfigError(f"unknown rule {rule!r}; choose from {RULES}")
    _, test_envs = load_suite(cfg)
    eval_cfg = cfg.eval
    if rule == "random":
        report, _ = evaluate(lambda env, target, rng: RandomActor(rng),
                             test_envs, eval_cfg, name=name or "random")
    elif rule == "oracle":
        report, _ = evaluate(
            lambda env, target, rng: OracleActor(env, target, eval_cfg.goal_radius),
            test_envs, eval_cfg, name=name or "oracle")
    else:
        policy, doc = load_checkpoint_policy(checkpoint)
        default_name = doc.get("model", Path(checkpoint).stem)
        if rule == "greedy":
            report, _ = evaluate(policy, test_envs, eval_cfg,
                                 name=name or default_name)
        elif rule == "majority":
            report, _ = evaluate(lambda env, target, rng: MajorityVoteActor(policy),
                                 test_envs, eval_cfg,
                                 name=name or f"{default_name}_majority")
        elif rule == "uniform_mix":
            report, _ = evaluate(lambda env, target, rng: UniformMixActor(policy),
                                 test_envs, eval_cfg,
                                 name=name or f"{default_name}_uniform_mix")
        else:  # top_k
            if k is None:
                raise ConfigError("--k is required for rule top_k")
            ranked = rank_branches(policy, test_envs, eval_cfg)
            order = [i for i, _ in ranked]
            rank_rows = [[i, rate] for i, rate in ranked]
            write_csv(Path(cfg.out) / "reports" / f"{name or default_name}_branches.csv",
                      ["branch", "success_rate"], rank_rows)
            report, _ = evaluate(lambda env, target, rng: TopKActor(policy, order, k),
                                 test_envs, eval_cfg,
                                 name=name or f"{default_name}_top{k}")
    write_report(cfg, report)
    json_path, _ = report_paths(cfg, report.name)
    per_task = " ".join(f"{c}={report.per_task[c]:.3f}" for c in OBJECT_CLASSES)
    print(f"{report.name}: average={report.average:.3f} {per_task}")
    print(f"report at {json_path}")
    return 0


def cmd_robust(cfg: ExperimentConfig, checkpoint: str, mode: str,
               ks: str | None, name: str | None) -> int:
    policy, doc = load_checkpoint_policy(checkpoint)
    _, test_envs = load_suite(cfg)
    if ks:
        try:
            k_list = sorted({int(x) for x in ks.split(",")})
        except ValueError:
            raise ConfigError(f"--ks must be comma-separated ints, got {ks!r}")
    else:
        n = policy.n
        k_list = sorted({0, n // 4, (n + 1) // 2, max(0, n - 2)})
    rows = robustness_drop(policy, test_envs, k_list, mode, cfg.eval,
                           name=name or doc.get("model", Path(checkpoint).stem))
    base = name or doc.get("model", Path(checkpoint).stem)
    out_csv = Path(cfg.out) / "robust" / f"{base}_{mode}.csv"
    header = ["mode", "k", "remaining", "average"] + \
        [f"task_{c}" for c in OBJECT_CLASSES]
    write_csv(out_csv, header, [[r["mode"], r["k"], r["remaining"], r["average"],
                                 *[r[f"task_{c}"] for c in OBJECT_CLASSES]]
                                for r in rows])
    write_json(out_csv.with_suffix(".json"),
               {"format": "sitfuse-robust-v1", "name": base, "mode": mode,
                "config_digest": config_digest(cfg), "seed": cfg.seed,
                "rows": rows})
    viz.save_robustness_curve(rows, out_csv.with_suffix(".png"),
                              title=f"{base} ({mode})")
    for r in rows:
        print(f"k={r['k']} remaining={r['remaining']} average={r['average']:.3f}")
    print(f"curve at {out_csv}")
    return 0


def cmd_analyze(cfg: ExperimentConfig, checkpoint: str, name: str | None) -> int:
    policy, doc = load_checkpoint_policy(checkpoint)
    _, test_envs = load_suite(cfg)
    analytics = gate_analytics(policy, test_envs, cfg.analytics_samples,
                               cfg.eval.seed)
    base = name or doc.get("model", Path(checkpoint).stem)
    out_csv = Path(cfg.out) / "analytics" / f"{base}_shares.csv"
    rows = [[band, dom, share] for band, shares in sorted(analytics.bands.items())
            for dom, share in sorted(shares.items())]
    write_csv(out_csv, ["openness_band", "domain", "share"], rows)
    write_json(out_csv.with_suffix(".json"),
               {"format": "sitfuse-analytics-v1", "name": base,
                "config_digest": config_digest(cfg), "seed": cfg.seed,
                "samples": analytics.samples,
                "band_counts": analytics.band_counts,
                "bands": analytics.bands, "extremes": analytics.extremes})
    viz.save_gate_shares(analytics.bands, out_csv.with_suffix(".png"), title=base)
    for band in ("1", "2", "3", "4+"):
        if band in analytics.bands:
            shares = " ".join(f"{d}={v:.2f}"
                              for d, v in sorted(analytics.bands[band].items()))
            print(f"openness {band}: {shares} ({analytics.band_counts[band]} states)")
    print(f"analytics at {out_csv}")
    return 0


def cmd_table(cfg: ExperimentConfig, report_files: list[str],
              out_name: str) -> int:
    reports = []
    for path in report_files:
        p = Path(path)
        if not p.exists():
            raise DataError(f"report {p} does not exist")
        reports.append(EvalReport.from_json(json.loads(p.read_text())))
    tasks = set(tuple(sorted(r.per_task)) for r in reports)
    if len(tasks) != 1:
        raise DataError("reports cover different task sets; cannot tabulate")
    columns = [r.name for r in reports]
    rows = []
    for cls in OBJECT_CLASSES:
        rows.append([cls] + [r.per_task[cls] for r in reports])
    rows.append(["average"] + [r.average for r in reports])
    out_csv = Path(cfg.out) / "tables" / f"{out_name}.csv"
    write_csv(out_csv, ["task"] + columns, rows)
    widths = [max(len("task"), *(len(str(r[0])) for r in rows))]
    widths += [max(len(c), 6) for c in columns]
    lines = ["  ".join(h.ljust(w) for h, w in zip(["task"] + columns, widths))]
    for row in rows:
        cells = [str(row[0]).ljust(widths[0])]
        cells += [f"{v:.3f}".rjust(w) for v, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells))
    text = "\n".join(lines)
    out_txt = out_csv.with_suffix(".txt")
    out_txt.write_text(text + "\n")
    viz.save_comparison(columns,
                        {cls: [r.per_task[cls] for r in reports]
                         for cls in OBJECT_CLASSES},
                        [r.average for r in reports],
                        out_csv.with_suffix(".png"), title=out_name)
    print(text)
    print(f"table at {out_csv}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def cmd_gradcheck(trials: int, tolerance: float = 1e-4) -> int:
    """Randomized configurations over every scheme and regularizer mix."""
    rng = np.random.default_rng(20_240_501)
    tiny = BankConfig(n=6, window=3, proj_dim=3, ray_cap=4, vis_radius=4)
    worst = 0.0
    failures = 0
    for trial in range(trials):
        scheme = ("blackbox", "concat", "feature_fusion",
                  "action_fusion")[trial % 4]
        gated = scheme in ("feature_fusion", "action_fusion")
        lam_lbl = float(rng.choice([0.0, 0.1, 1.0])) if gated else 0.0
        lam_aff = float(rng.choice([0.0, 0.1, 1.0])) if gated else 0.0
        joint = bool(rng.integers(0, 2)) if scheme == "action_fusion" else False
        variant = ["batch_mean", "per_example"][int(rng.integers(0, 2))]
        bank = register_default_bank(tiny)
        policy = FusionPolicy.create(
            scheme, bank, tiny, seed=int(rng.integers(0, 2**31)),
            lam_lbl=lam_lbl, lam_aff=lam_aff, hidden_branch=4, hidden_gate=5,
            hidden_head=4, hidden_box=(5,))
        b = int(rng.integers(2, 6))
        reps = {s.name: rng.normal(size=(b, s.dim)) for s in bank}
        raw = rng.normal(size=(b, tiny.raw_dim))
        labels = rng.integers(0, 9, size=b)
        affinity = None
        if lam_aff:
            a = rng.uniform(0, 1, size=(len(bank), len(bank)))
            values = (a + a.T) / 2
            np.fill_diagonal(values, 1.0)
            affinity = AffinityMatrix(tuple(s.name for s in bank), values)
        err = policy_grad_check(policy, reps, raw, labels, affinity=affinity,
                                joint=joint, lbl_variant=variant)
        worst = max(worst, err)
        status = "ok" if err < tolerance else "FAIL"
        if err >= tolerance:
            failures += 1
        print(f"[{trial + 1:02d}/{trials}] {scheme:<15} lbl={lam_lbl:<4} "
              f"aff={lam_aff:<4} joint={int(joint)} {variant:<11} "
              f"max_rel_err={err:.2e} {status}")
    print(f"worst relative error {worst:.2e} over {trials} configurations")
    if failures:
        print(f"{failures} configuration(s) exceeded tolerance {tolerance}")
        return 3
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sitfuse",
        description="Situational fusion of perception representations for "
                    "grid navigation: generate environments, train fusion "
                    "policies, evaluate, and analyze.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (defaults built in)")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VAL",
                       help="override one config value by dotted path")

    common(sub.add_parser("gen", help="generate the environment suite"))
    common(sub.add_parser("affinity", help="estimate the affinity matrix"))

    p = sub.add_parser("train", help="train one configured model")
    p.add_argument("model", help="model name from the config's models table")
    common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test suite")
    p.add_argument("checkpoint", nargs="?", default="",
                   help="checkpoint stem or .json path (unused for "
                        "random/oracle rules)")
    p.add_argument("--rule", default="greedy", choices=RULES)
    p.add_argument("--k", type=int, help="branch count for rule top_k")
    p.add_argument("--name", help="report name (defaults to the model name)")
    common(p)

    p = sub.add_parser("robust", help="success under per-step representation drops")
    p.add_argument("checkpoint")
    p.add_argument("--mode", required=True, choices=["renormalize", "zero_noise"])
    p.add_argument("--ks", help="comma-separated drop counts (default spread)")
    p.add_argument("--name")
    common(p)

    p = sub.add_parser("analyze", help="gate weight distribution analytics")
    p.add_argument("checkpoint")
    p.add_argument("--name")
    common(p)

    p = sub.add_parser("table", help="tabulate evaluation reports side by side")
    p.add_argument("reports", nargs="+", help="report JSON files, column order")
    p.add_argument("--out-name", default="comparison")
    common(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of all schemes")
    p.add_argument("--trials", type=int, default=24)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args.trials)
        cfg = load_config(args.config, args.set, args.seed, args.out)
        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "affinity":
            return cmd_affinity(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.model)
        if args.command == "eval":
            if args.rule not in ("random", "oracle") and not args.checkpoint:
                raise ConfigError("eval needs a checkpoint unless the rule is "
                                  "random or oracle")
            return cmd_eval(cfg, args.checkpoint, args.rule, args.k, args.name)
        if args.command == "robust":
            return cmd_robust(cfg, args.checkpoint, args.mode, args.ks, args.name)
        if args.command == "analyze":
            return cmd_analyze(cfg, args.checkpoint, args.name)
        if args.command == "table":
            return cmd_table(cfg, args.reports, args.out_name)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
