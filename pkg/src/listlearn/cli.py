"""Command-line driver: ``listlearn train | compare | weights``.

Every command writes its artifacts to ``--out-dir`` together with a
``manifest.json`` that lists them (written even when the run fails).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from listlearn import __version__
from listlearn.errors import ConfigurationError, ContractViolation, ListLearnError
from listlearn.experiment import (
    DatasetParams,
    ExperimentConfig,
    evaluate_offline,
    ground_truth_weights,
    random_ranking_baseline,
    run_online,
    t_test_two_tailed,
    weight_distance,
)
from listlearn.learners import Learner, LearnerKind

log = logging.getLogger("listlearn")

SIGNIFICANCE = 0.05
COMPARE_HEADER = [
    "configuration", "learner", "epsilon", "k", "feedback", "seeds",
    "offline_mean", "offline_std", "online_mean", "online_std",
    "p_value_vs_best", "significant_loss",
    "online_p_value_vs_best", "online_significant_loss",
]
PAIRWISE_HEADER = ["configuration_a", "configuration_b", "p_value", "significant"]
WEIGHTS_HEADER = ["position", "learned", "ground_truth"]


class UsageError(ListLearnError):
    pass


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _build_id() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5, cwd=Path(__file__).parent,
        )
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


class Manifest:
    def __init__(self, out_dir: Path, command: str):
        self.out_dir = out_dir
        self.data = {"command": command, "build": _build_id(), "files": [], "error": None}
        self.start = time.perf_counter()

    def add(self, path: Path):
        self.data["files"].append(str(path))

    def write(self):
        self.data["wall_clock_seconds"] = time.perf_counter() - self.start
        path = self.out_dir / "manifest.json"
        with open(path, "w") as fh:
            json.dump(self.data, fh, indent=2)
        return path


# -- argument parsing ------------------------------------------------------------


def _experiment_flags(p: argparse.ArgumentParser, with_learner: bool = True):
    if with_learner:
        p.add_argument("--learner", choices=[k.value for k in LearnerKind], default="reglearn")
        p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--feedback", choices=["ndcg", "clicks"], default="ndcg")
    p.add_argument("--click-config", choices=["perfect", "locating", "entertaining"], default="perfect")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--batches", type=int, default=5000)
    p.add_argument("--batch-size", type=int, default=100)
    p.add_argument("--pool-size", type=int, default=20)
    p.add_argument("--learning-rate", type=float, default=ExperimentConfig.learning_rate)
    p.add_argument("--weight-learning-rate", type=float, default=None)
    p.add_argument("--hidden", type=int, nargs="+", default=list(ExperimentConfig.hidden))
    p.add_argument("--reward-baseline", action="store_true", help="subtract the running mean reward (PGLearn)")
    p.add_argument("--eval-batches", type=int, default=150)
    p.add_argument("--data-seed", type=int, default=None)
    d = DatasetParams()
    p.add_argument("--num-queries", type=int, default=d.num_queries)
    p.add_argument("--num-items", type=int, default=d.num_items)
    p.add_argument("--dim", type=int, default=d.dim)
    p.add_argument("--noise", type=float, default=d.noise)
    p.add_argument("--multi-prob", type=float, default=d.multi_relevance_prob)
    p.add_argument("--config", type=Path, default=None,
                   help="JSON config (or a summary.json) whose values override the flags")
    p.add_argument("--out-dir", type=Path, default=Path("runs"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="listlearn", description="Online learning to rank from list-level feedback")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run online training and offline evaluation")
    _experiment_flags(train)
    train.add_argument("--seed", type=int, default=1)

    compare = sub.add_parser("compare", help="compare configurations over shared seeds")
    _experiment_flags(compare, with_learner=False)
    compare.add_argument("--run", action="append", default=[], metavar="LEARNER:EPSILON",
                         help="configuration to run, e.g. reglearn:0.1 (repeatable)")
    compare.add_argument("--summaries", nargs="+", type=Path, default=[],
                         help="summary.json files of finished runs, grouped by configuration")
    compare.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])

    weights = sub.add_parser("weights", help="learned position weights against ground truth")
    weights.add_argument("--checkpoint", type=Path, default=None)
    _experiment_flags(weights)
    weights.add_argument("--seed", type=int, default=1)
    return parser


def config_from_args(args, learner: str | None = None, epsilon: float | None = None,
                     seed: int | None = None) -> ExperimentConfig:
    values = dict(
        learner=learner if learner is not None else args.learner,
        epsilon=epsilon if epsilon is not None else args.epsilon,
        k=args.k,
        feedback=args.feedback,
        click_config=args.click_config,
        pool_size=args.pool_size,
        batch_size=args.batch_size,
        num_batches=args.batches,
        seed=seed if seed is not None else args.seed,
        data_seed=args.data_seed,
        learning_rate=args.learning_rate,
        weight_learning_rate=args.weight_learning_rate,
        hidden=tuple(args.hidden),
        use_reward_baseline=args.reward_baseline,
        eval_batches=args.eval_batches,
        dataset=DatasetParams(
            num_queries=args.num_queries,
            num_items=args.num_items,
            dim=args.dim,
            noise=args.noise,
            multi_relevance_prob=args.multi_prob,
        ),
    )
    cfg = ExperimentConfig(**values)
    if args.config is not None:
        with open(args.config) as fh:
            override = json.load(fh)
        override = override.get("config", override)
        merged = cfg.to_dict()
        dataset = {**merged.pop("dataset"), **override.pop("dataset", {})}
        merged.update(override)
        merged["dataset"] = dataset
        cfg = ExperimentConfig.from_dict(merged)
    return cfg


# -- train ---------------------------------------------------------------------------


def _write_weights_csv(path: Path, learned, truth):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(WEIGHTS_HEADER)
        for i, gt in enumerate(truth):
            w.writerow([i + 1, "" if learned is None else _fmt(learned[i]), _fmt(gt)])


def train_and_evaluate(cfg: ExperimentConfig, out_dir: Path | None = None, manifest: Manifest | None = None) -> dict:
    """Run one configuration end to end; returns the summary dict."""
    result = run_online(cfg)
    ev_seed = cfg.seed
    offline = evaluate_offline(result.learner, result.dataset, cfg.k, cfg.pool_size, ev_seed,
                               cfg.eval_batches, cfg.eval_batch_size)
    rand = random_ranking_baseline(result.dataset, "test", cfg.k, cfg.pool_size, ev_seed,
                                   cfg.eval_batches, cfg.eval_batch_size)
    learned = result.learner.weights.w if result.learner.weights is not None else None
    truth = cfg.ground_truth_weights()
    summary = {
        "config": cfg.to_dict(),
        "online_final_running_ndcg": result.log.running_ndcg[-1] if len(result.log) else None,
        "batches_completed": len(result.log),
        "explored_fraction": result.log.explored / result.log.interactions if result.log.interactions else None,
        "offline_mean": offline.mean,
        "offline_batch_means": offline.batch_means.tolist(),
        "random_baseline_mean": rand.mean,
        "t_test_vs_random": {
            "p_value": t_test_two_tailed(offline.batch_means, rand.batch_means)
            if len(offline.batch_means) > 1 else None,
            "significance_level": SIGNIFICANCE,
        },
        "weights": weight_distance(learned, truth).to_dict() if learned is not None else None,
        "error": result.log.error,
    }
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        files = [
            result.log.to_csv(out_dir / "learning_curve.csv"),
            out_dir / "weights.csv",
            out_dir / "checkpoint.npz",
            out_dir / "summary.json",
        ]
        _write_weights_csv(files[1], learned, truth)
        result.learner.save(files[2], {"feedback": cfg.feedback, "config": cfg.to_dict()})
        with open(files[3], "w") as fh:
            json.dump(summary, fh, indent=2)
        if manifest is not None:
            for f in files:
                manifest.add(f)
    return summary


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    manifest = Manifest(args.out_dir, "train")
    manifest.data["config"] = cfg.to_dict()
    manifest.data["seeds"] = {"seed": cfg.seed, "data_seed": cfg.effective_data_seed}
    try:
        summary = train_and_evaluate(cfg, args.out_dir, manifest)
    except Exception as exc:  # surfaced through the manifest and exit code
        manifest.data["error"] = f"{type(exc).__name__}: {exc}"
        manifest.write()
        log.error("training failed: %s", exc)
        return 1
    manifest.data["error"] = summary["error"]
    manifest.write()
    print(json.dumps({
        "offline_mean": summary["offline_mean"],
        "random_baseline_mean": summary["random_baseline_mean"],
        "online_final_running_ndcg": summary["online_final_running_ndcg"],
        "out_dir": str(args.out_dir),
    }))
    return 1 if summary["error"] else 0


# -- compare ---------------------------------------------------------------------------


def _config_name(cfg: dict) -> str:
    name = f"{cfg['learner']}_eps{cfg['epsilon']:g}_k{cfg['k']}_{cfg['feedback']}"
    if cfg["feedback"] == "clicks":
        name += f"-{cfg['click_config']}"
    return name


def compare_summaries(groups: dict[str, list[dict]]) -> tuple[list[dict], list[dict]]:
    """Per-configuration stats and Welch p-values.

    Offline tests pool the per-batch test means of all seeds; online tests use
    one final running average per seed and need at least two seeds.
    """
    ks = {s["config"]["k"] for runs in groups.values() for s in runs}
    if len(ks) != 1:
        raise UsageError(f"cannot compare runs with different list sizes k: {sorted(ks)}")
    rows = []
    samples, online_samples = {}, {}
    for name, runs in groups.items():
        offline = np.concatenate([np.asarray(s["offline_batch_means"], dtype=np.float64) for s in runs])
        online = np.array([s["online_final_running_ndcg"] for s in runs if s["online_final_running_ndcg"] is not None])
        samples[name] = offline
        online_samples[name] = online
        c = runs[0]["config"]
        rows.append({
            "configuration": name,
            "learner": c["learner"],
            "epsilon": c["epsilon"],
            "k": c["k"],
            "feedback": c["feedback"] if c["feedback"] == "ndcg" else f"clicks-{c['click_config']}",
            "seeds": " ".join(str(s["config"]["seed"]) for s in runs),
            "offline_mean": float(offline.mean()),
            "offline_std": float(offline.std(ddof=1)) if offline.size > 1 else 0.0,
            "online_mean": float(online.mean()) if online.size else None,
            "online_std": float(online.std(ddof=1)) if online.size > 1 else None,
        })
    best = max(rows, key=lambda r: r["offline_mean"])["configuration"]
    for r in rows:
        if r["configuration"] == best:
            r["p_value_vs_best"] = None
            r["significant_loss"] = False
        else:
            p = t_test_two_tailed(samples[r["configuration"]], samples[best])
            r["p_value_vs_best"] = p
            r["significant_loss"] = p < SIGNIFICANCE
    _online_tests(rows, online_samples)
    names = list(groups)
    pairs = []
    for i, a in enumerate(names):
        for b in names[i:]:
            if a == b and len(names) > 1:
                continue
            p = t_test_two_tailed(samples[a], samples[b])
            pairs.append({"configuration_a": a, "configuration_b": b, "p_value": p, "significant": p < SIGNIFICANCE})
    return rows, pairs


def _online_tests(rows: list[dict], samples: dict[str, np.ndarray]):
    usable = [r for r in rows if r["online_mean"] is not None]
    for r in rows:
        r["online_p_value_vs_best"] = None
        r["online_significant_loss"] = False
    if not usable:
        return
    best = max(usable, key=lambda r: r["online_mean"])["configuration"]
    for r in usable:
        name = r["configuration"]
        if name == best:
            continue
        try:
            p = t_test_two_tailed(samples[name], samples[best])
        except ContractViolation:  # fewer than two seeds or zero spread
            continue
        r["online_p_value_vs_best"] = p
        r["online_significant_loss"] = p < SIGNIFICANCE


def write_compare(out_dir: Path, rows: list[dict], pairs: list[dict]) -> tuple[Path, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    table, pairwise = out_dir / "compare.csv", out_dir / "pairwise.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(COMPARE_HEADER)
        for r in rows:
            w.writerow([
                r["configuration"], r["learner"], repr(float(r["epsilon"])), r["k"], r["feedback"], r["seeds"],
                _fmt(r["offline_mean"]), _fmt(r["offline_std"]), _fmt(r["online_mean"]), _fmt(r["online_std"]),
                _fmt(r["p_value_vs_best"]), "*" if r["significant_loss"] else "",
                _fmt(r["online_p_value_vs_best"]), "*" if r["online_significant_loss"] else "",
            ])
    with open(pairwise, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(PAIRWISE_HEADER)
        for p in pairs:
            w.writerow([p["configuration_a"], p["configuration_b"], _fmt(p["p_value"]), "*" if p["significant"] else ""])
    return table, pairwise


def format_table(rows: list[dict]) -> str:
    """Offline and online nDCG per configuration as mean(std); '*' marks significant losses."""
    lines = [f"{'configuration':<40} {'offline nDCG@k':<16} online nDCG@k"]
    for r in rows:
        off = f"{r['offline_mean']:.3f}({r['offline_std']:.2f}){'*' if r['significant_loss'] else ' '}"
        if r["online_mean"] is None:
            on = "-"
        else:
            std = "" if r["online_std"] is None else f"({r['online_std']:.2f})"
            on = f"{r['online_mean']:.3f}{std}{'*' if r['online_significant_loss'] else ''}"
        lines.append(f"{r['configuration']:<40} {off:<16} {on}")
    return "\n".join(lines)


def cmd_compare(args) -> int:
    if len(args.summaries) + len(args.run) < 2:
        raise UsageError("compare needs at least two configurations or summary files (--run / --summaries)")
    groups: dict[str, list[dict]] = {}
    for path in args.summaries:
        with open(path) as fh:
            s = json.load(fh)
        name, n = _config_name(s["config"]), 1
        # the same run listed twice becomes its own group, e.g. a self-comparison
        while any(r["config"]["seed"] == s["config"]["seed"] for r in groups.get(name, [])):
            n += 1
            name = f"{_config_name(s['config'])}#{n}"
        groups.setdefault(name, []).append(s)
    specs = []
    for entry in args.run:
        learner, _, eps = entry.partition(":")
        try:
            specs.append((LearnerKind.parse(learner).value, float(eps) if eps else 0.1))
        except (ConfigurationError, ValueError) as exc:
            raise UsageError(f"bad --run {entry!r}: {exc}") from None
    configs = [config_from_args(args, learner=l, epsilon=e, seed=seed) for l, e in specs for seed in args.seeds]
    manifest = Manifest(args.out_dir, "compare")
    manifest.data["seeds"] = args.seeds
    manifest.data["configs"] = [c.to_dict() for c in configs]
    try:
        for cfg in configs:
            name = _config_name(cfg.to_dict())
            run_dir = args.out_dir / name / f"seed{cfg.seed}"
            log.info("running %s seed %d", name, cfg.seed)
            groups.setdefault(name, []).append(train_and_evaluate(cfg, run_dir, manifest))
        rows, pairs = compare_summaries(groups)
        for f in write_compare(args.out_dir, rows, pairs):
            manifest.add(f)
    except UsageError:
        manifest.data["error"] = "usage error"
        manifest.write()
        raise
    except Exception as exc:
        manifest.data["error"] = f"{type(exc).__name__}: {exc}"
        manifest.write()
        log.error("compare failed: %s", exc)
        return 1
    manifest.write()
    print(format_table(rows))
    return 0


# -- weights -----------------------------------------------------------------------------


def cmd_weights(args) -> int:
    args.out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(args.out_dir, "weights")
    if args.checkpoint is not None:
        learner, meta = Learner.load(args.checkpoint)
        feedback = meta.get("feedback", args.feedback)
        manifest.data["checkpoint"] = str(args.checkpoint)
    else:
        cfg = config_from_args(args)
        if cfg.kind is not LearnerKind.REG:
            raise UsageError(f"weights needs a reglearn run, got {cfg.learner}")
        manifest.data["config"] = cfg.to_dict()
        learner = run_online(cfg).learner
        feedback = cfg.feedback
    if learner.kind is not LearnerKind.REG:
        raise UsageError(f"weights needs a reglearn checkpoint, got {learner.kind.value}")
    truth = ground_truth_weights(feedback, learner.config.k)
    report = weight_distance(learner.weights.w, truth)
    path = args.out_dir / "weights.csv"
    _write_weights_csv(path, report.learned, truth)
    manifest.add(path)
    report_path = args.out_dir / "weights_report.json"
    with open(report_path, "w") as fh:
        json.dump({"feedback": feedback, **report.to_dict()}, fh, indent=2)
    manifest.add(report_path)
    manifest.write()
    print(json.dumps({"feedback": feedback, **report.to_dict()}))
    return 0


COMMANDS = {"train": cmd_train, "compare": cmd_compare, "weights": cmd_weights}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    for name in ("batches", "batch_size", "pool_size", "k", "eval_batches"):
        value = getattr(args, name, None)
        if value is not None and value < (0 if name == "batches" else 1):
            parser.error(f"--{name.replace('_', '-')} must be {'non-negative' if name == 'batches' else 'positive'}")
    try:
        if getattr(args, "out_dir", None) is not None:
            args.out_dir.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args)
    except (ConfigurationError, UsageError) as exc:
        parser.error(str(exc))
    return 2  # pragma: no cover


if __name__ == "__main__":
    sys.exit(main())
