"""Command-line entry point (``fewbase <subcommand>``)."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adapters import MODES, FinetuneConfig, finetune_two_step
from .classifiers import LinearHead, fit_linear_head, predict_softmax
from .datastore import class_centroids, load_feature_set, load_semantic
from .episodes import MdConfig, SamplerSpec, episode_stream, load_episodes, save_episodes
from .heuristics import HeuristicKind, SelectionContext, select_extractor
from .library import ClassPartition, ExtractorLibrary, build_class_representation, build_library, random_partition, ward_cluster
from .selection import ClassSubset, UotParams, select_aa, select_uot
from .synthbench import UniverseConfig, generate_universe, write_universe
from .training import TrainConfig
from .workflows import EXIT_CONFIG, WORKFLOWS, ConfigError, RunConfig, run_workflow

log = logging.getLogger("fewbase")


def _default_seed() -> int:
    value = os.environ.get("FFW_SEED")
    return int(value) if value else 0


def _sampler(args: argparse.Namespace) -> SamplerSpec:
    if args.sampler == "md":
        return SamplerSpec("md", md=MdConfig())
    return SamplerSpec("uniform", args.ways, args.shots, args.queries)


def _add_sampler_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sampler", choices=("uniform", "md"), default=None)
    p.add_argument("--ways", type=int, default=5)
    p.add_argument("--shots", type=int, default=5)
    p.add_argument("--queries", type=int, default=15)


def cmd_synthetic(args) -> int:
    cfg = UniverseConfig()
    if args.config:
        cfg = UniverseConfig.from_dict(json.loads(Path(args.config).read_text()))
    if args.seed is not None:
        cfg = UniverseConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    paths = write_universe(generate_universe(cfg), args.out_dir)
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=2))
    return 0


def cmd_sample_episodes(args) -> int:
    fs = load_feature_set(args.features)
    args.sampler = args.sampler or "uniform"
    sampler = _sampler(args)
    episodes = episode_stream(fs, args.seed, args.count, sampler)
    save_episodes(episodes, args.out, {"master_seed": args.seed, "sampler": sampler.to_dict(), "count": args.count})
    return 0


def cmd_fit_head(args) -> int:
    fs = load_feature_set(args.features)
    cfg = TrainConfig(
        optimizer=args.optimizer,
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        max_examples=args.max_examples,
        seed=args.seed,
    )
    head = fit_linear_head(fs, cfg)
    head.save(args.out)
    acc = float(np.mean(head.logits(fs.features).argmax(axis=1) == fs.labels))
    print(json.dumps({"train_accuracy": acc, "final_loss": head.loss_history[-1]}))
    return 0


def cmd_predict(args) -> int:
    head = LinearHead.load(args.head)
    fs = load_feature_set(args.features)
    probs = predict_softmax(head, fs.features)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["row", "label", "predicted", "confidence"])
        for i, row in enumerate(probs):
            k = int(row.argmax())
            writer.writerow([i, int(fs.labels[i]), k, repr(float(row[k]))])
    finally:
        if args.out:
            out.close()
    return 0


def cmd_select_aa(args) -> int:
    pool = load_feature_set(args.features)
    subset = select_aa(pool.features, LinearHead.load(args.head), args.m)
    _emit_json(subset.to_json(), args.out)
    return 0


def cmd_select_uot(args) -> int:
    target, base = load_feature_set(args.target), load_feature_set(args.base)
    params = UotParams(args.epsilon, args.tau, args.max_iters, args.tol)
    subset = select_uot(class_centroids(target).centroids, class_centroids(base).centroids, params, args.m)
    _emit_json(subset.to_json(), args.out)
    return 0


def cmd_cluster(args) -> int:
    base = load_feature_set(args.base)
    if args.mode == "R":
        partition = random_partition(base.num_classes, args.L, args.seed)
        dendrogram = None
    else:
        semantic = load_semantic(args.semantic, base.class_names) if args.semantic else None
        rep = build_class_representation(args.mode, class_centroids(base), semantic)
        dendrogram, partition = ward_cluster(rep, args.L, args.mode)
    _emit_json(partition.to_json(), args.out)
    if dendrogram is not None and args.dendrogram:
        dendrogram.to_csv(args.dendrogram)
    return 0


def _finetune_config(args) -> FinetuneConfig:
    cfg = FinetuneConfig(seed=args.seed, subset_cap=args.subset_cap, standardize=args.standardize)
    if args.step2_lr is not None:
        cfg = cfg.with_(step2=cfg.step2.with_(learning_rate=args.step2_lr))
    if args.step2_epochs is not None:
        cfg = cfg.with_(step2=cfg.step2.with_(epochs=args.step2_epochs))
    if args.step2_as_steps:
        cfg = cfg.with_(step2=cfg.step2.with_(steps_mode=True))
    return cfg


def _add_finetune_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=MODES, default="square_residual")
    p.add_argument("--subset-cap", type=int, default=10_000)
    p.add_argument("--step2-lr", type=float, default=None)
    p.add_argument("--step2-epochs", type=int, default=None)
    p.add_argument("--step2-as-steps", action="store_true", help="count step-2 epochs as single gradient steps")
    p.add_argument("--standardize", action="store_true", help="prepend subset standardisation to the adapter")


def cmd_finetune(args) -> int:
    base = load_feature_set(args.base)
    subset = ClassSubset.load(args.subset)
    adapter, head = finetune_two_step(base, subset, args.mode, _finetune_config(args))
    adapter.save(args.out)
    if args.head_out:
        head.save(args.head_out)
    print(json.dumps({"train_rows": adapter.meta["train_rows"], "final_loss": head.loss_history[-1]}))
    return 0


def cmd_build_library(args) -> int:
    base = load_feature_set(args.base)
    partition = ClassPartition.from_json(json.loads(Path(args.partition).read_text()))
    head = LinearHead.load(args.base_head) if args.base_head else None
    library = build_library(base, partition, args.mode, _finetune_config(args), head, args.jobs)
    print(library.save(args.out_dir))
    return 0


def cmd_heuristics(args) -> int:
    library = ExtractorLibrary.load(args.library)
    target = load_feature_set(args.features)
    base = load_feature_set(args.base) if args.base else None
    episodes = load_episodes(args.episodes, target)
    kinds = [HeuristicKind.parse(k) for k in args.kinds.split(",")]
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["episode", "heuristic", "entry", "score", "query_acc", "selected"])
        for i, ep in enumerate(episodes):
            ctx = SelectionContext(ep, library, base)
            for kind in kinds:
                report = select_extractor(kind, ep, library, base, ctx)
                for e in range(len(library)):
                    writer.writerow(
                        [i, kind.name, e, repr(float(report.scores[e])), repr(float(report.entry_accuracies[e])), int(e == report.selected)]
                    )
    finally:
        if args.out:
            out.close()
    return 0


def _run_config(args, methods: list[str]) -> RunConfig:
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    cfg = RunConfig.from_dict(raw)
    overrides = {}
    for name in ("manifest", "library", "base_head", "out_dir", "classifier", "episodes_file"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if methods:
        overrides["methods"] = methods
        overrides["workflow"] = methods[0]
    if args.count is not None:
        overrides["episodes"] = args.count
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    elif "master_seed" not in raw:
        overrides["master_seed"] = _default_seed()
    if args.m is not None:
        overrides["m"] = args.m
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    if args.heuristics:
        overrides["heuristics"] = args.heuristics.split(",")
    if args.sampler is not None:
        overrides["sampler"] = _sampler(args)
    if args.no_cache:
        overrides["reuse_cache"] = False
    if args.l2_normalize:
        overrides["l2_normalize"] = True
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON RunConfig; flags override its fields")
    p.add_argument("--manifest")
    p.add_argument("--library")
    p.add_argument("--base-head")
    p.add_argument("--episodes", dest="episodes_file", help="episode JSON from sample-episodes")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--mode", choices=MODES, default=None)
    p.add_argument("--heuristics", default=None, help="comma list used by UI")
    p.add_argument("--classifier", choices=("ncm", "logreg"), default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--no-cache", action="store_true", help="disable fine-tune memoisation (--reuse-cache off)")
    p.add_argument("--l2-normalize", action="store_true")
    p.add_argument("--out-dir", default=None)
    _add_sampler_args(p)


def _finish_run(cfg: RunConfig) -> int:
    code, paths = run_workflow(cfg)
    if paths:
        print(json.dumps({k: str(v) for k, v in paths.items()}, indent=2))
    return code


def cmd_run(args) -> int:
    return _finish_run(_run_config(args, [args.workflow]))


def cmd_evaluate(args) -> int:
    return _finish_run(_run_config(args, [m.strip() for m in args.methods.split(",") if m.strip()]))


def cmd_report(args) -> int:
    summary = json.loads(Path(args.summary).read_text())
    print(f"{'method':<14} {'episodes':>8} {'delta (pts)':>18} {'accuracy':>10}")
    for row in summary["methods"]:
        delta = f"{100 * row['mean_delta']:+.2f} ± {100 * row['paired_half_width']:.2f}"
        print(f"{row['method']:<14} {row['episodes']:>8} {delta:>18} {100 * row['mean_accuracy']:>9.2f}%")
    return 0


def _emit_json(obj: dict, path: str | None) -> None:
    text = json.dumps(obj, indent=2)
    if path:
        Path(path).write_text(text)
    else:
        print(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewbase", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthetic", help="generate a synthetic benchmark")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synthetic)

    p = sub.add_parser("sample-episodes", help="sample a fixed episode list")
    p.add_argument("--features", required=True)
    p.add_argument("--count", type=int, default=600)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--out", required=True)
    _add_sampler_args(p)
    p.set_defaults(func=cmd_sample_episodes)

    p = sub.add_parser("fit-head", help="train a softmax head on a feature set")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--optimizer", choices=("adam", "sgd_nesterov"), default="adam")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--max-examples", type=int, default=None)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.set_defaults(func=cmd_fit_head)

    p = sub.add_parser("predict", help="softmax predictions of a head")
    p.add_argument("--head", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("select-aa", help="average-activation class selection")
    p.add_argument("--features", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--m", type=int, default=50)
    p.add_argument("--out")
    p.set_defaults(func=cmd_select_aa)

    p = sub.add_parser("select-uot", help="unbalanced-OT class selection")
    p.add_argument("--target", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--m", type=int, default=50)
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--max-iters", type=int, default=1000)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--out")
    p.set_defaults(func=cmd_select_uot)

    p = sub.add_parser("cluster", help="partition base classes")
    p.add_argument("--base", required=True)
    p.add_argument("--mode", choices=("V", "Se", "X", "R"), default="V")
    p.add_argument("--L", type=int, default=11)
    p.add_argument("--semantic", help="FFS file with one vector per class name")
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--dendrogram", help="write merge list CSV here")
    p.add_argument("--out")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("finetune", help="two-step adapter fine-tuning on a class subset")
    p.add_argument("--base", required=True)
    p.add_argument("--subset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--head-out")
    p.add_argument("--seed", type=int, default=_default_seed())
    _add_finetune_args(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("build-library", help="fine-tune one adapter per cluster")
    p.add_argument("--base", required=True)
    p.add_argument("--partition", required=True)
    p.add_argument("--base-head")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=_default_seed())
    _add_finetune_args(p)
    p.set_defaults(func=cmd_build_library)

    p = sub.add_parser("heuristics", help="score library entries per episode")
    p.add_argument("--library", required=True)
    p.add_argument("--episodes", required=True)
    p.add_argument("--features", required=True, help="feature set the episodes index into")
    p.add_argument("--base", help="base feature set (needed by FIM)")
    p.add_argument("--kinds", default="ssa")
    p.add_argument("--out")
    p.set_defaults(func=cmd_heuristics)

    p = sub.add_parser("run", help="run one workflow with paired evaluation")
    p.add_argument("--workflow", required=True, help=f"one of {', '.join(WORKFLOWS)} or UI-<heuristic>")
    _add_run_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="paired evaluation of several methods")
    p.add_argument("--methods", default="baseline")
    _add_run_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="print a summary table")
    p.add_argument("--summary", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
