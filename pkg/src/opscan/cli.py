"""Command-line pipeline: extract histograms, rank prominent opcodes,
train/evaluate/sweep classifiers and scan unknown apps.

Exit codes: 0 success (or benign verdict), 10 malware verdict, 2
operational error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .classifiers import (
    KIND_DECISION_TREE,
    KIND_NAIVE_BAYES_TREE,
    KIND_RANDOM_FOREST,
    SUPPORTED_KINDS,
    Dataset,
    SelectionProvenance,
    count_leaves,
    predict,
    train_classifier,
)
from .corpus import Label, build_histogram_set, load_histogram_set, load_manifest
from .errors import InvalidParam, OpscanError
from .evaluation import (
    ClassifierConfig,
    confusion,
    cross_validate,
    feature_sweep,
    generate_synthetic_corpus,
    grid_counts,
    metrics,
    write_fold_csv,
    write_sweep_csv,
)
from .extraction import Diagnostics, detect_artifact_kind, extract_artifact, write_histograms_csv
from .features import (
    NormalizationMode,
    compute_class_means,
    project,
    project_set,
    rank_features,
    read_ranking_csv,
    write_ranking_csv,
)
from .model_io import load_model, save_model

EXIT_OK = 0
EXIT_ERROR = 2
EXIT_MALWARE = 10

_GLOBAL_DEFAULTS = {
    "seed": 0,
    "mode": "raw",
    "paper_faithful": False,
    "jobs": 1,
}


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master RNG seed (default 0)")
    common.add_argument("--mode", choices=["raw", "relative"], default=None,
                        help="histogram normalization: raw class-mean counts or "
                             "per-app relative frequencies (default raw)")
    common.add_argument("--paper-faithful", action="store_const", const=True, default=None,
                        help="compute feature selection on all data instead of the "
                             "training partition only")
    common.add_argument("--jobs", type=int, default=None,
                        help="parallel workers for extraction and sweep cells (default 1)")
    common.add_argument("--config", type=Path, default=None,
                        help="JSON config file; flags override file values")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="opscan",
        description="Detect Android malicious apps from Dalvik opcode "
                    "occurrence features.")
    parser.add_argument("--version", action="version", version=f"opscan {__version__}")
    common = _common_flags()
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", parents=[common],
                       help="extract opcode histograms for a labeled manifest")
    p.add_argument("--manifest", type=Path, required=True,
                   help="CSV with header app_id,path,label")
    p.add_argument("--cache-dir", type=Path, required=True,
                   help="directory for histograms.csv + cache_index.csv")
    p.add_argument("--on-error", choices=["abort", "skip"], default="abort")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("synth", parents=[common],
                       help="generate a labeled synthetic corpus cache")
    p.add_argument("--benign", type=int, default=100)
    p.add_argument("--malware", type=int, default=100)
    p.add_argument("--separation", type=float, default=0.7,
                   help="0 = identical class profiles, 1 = disjoint dominant opcodes")
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("rank", parents=[common],
                       help="rank prominent opcodes by class-mean difference")
    p.add_argument("--cache", type=Path, required=True,
                   help="cache directory or histograms.csv")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--out", type=Path, default=Path("ranking.csv"))
    p.add_argument("--no-figures", action="store_true",
                   help="skip the dominant-opcodes chart")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("train", parents=[common], help="train a classifier")
    p.add_argument("--cache", type=Path, required=True)
    p.add_argument("--classifier", required=True,
                   help=f"one of: {', '.join(SUPPORTED_KINDS)}")
    p.add_argument("--n", type=int, default=20, help="number of prominent features")
    p.add_argument("--ranking", type=Path, default=None,
                   help="reuse a ranking CSV instead of recomputing top-n")
    p.add_argument("--model-out", type=Path, default=Path("model.json"))
    _add_hyperparams(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common],
                       help="k-fold cross-validation or held-out evaluation")
    p.add_argument("--cache", type=Path, required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--n", type=int, default=20)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--kfold", type=int, default=None, help="fold count (default 10)")
    group.add_argument("--holdout", type=float, default=None,
                       help="held-out test fraction, e.g. 0.2")
    p.add_argument("--out", type=Path, default=Path("evaluation.csv"))
    _add_hyperparams(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", parents=[common],
                       help="accuracy/TP/TN/FN/FP across the prominent-feature grid")
    p.add_argument("--cache", type=Path, required=True)
    p.add_argument("--classifiers", default="dt,rf,nbt",
                   help="comma-separated classifier ids (default dt,rf,nbt)")
    p.add_argument("--grid-start", type=int, default=20)
    p.add_argument("--grid-stop", type=int, default=200)
    p.add_argument("--grid-step", type=int, default=20)
    p.add_argument("--holdout", type=float, default=0.2)
    p.add_argument("--out", type=Path, default=Path("sweep.csv"))
    p.add_argument("--figures-dir", type=Path, default=None,
                   help="directory for rendered charts (default: next to --out)")
    p.add_argument("--no-figures", action="store_true")
    _add_hyperparams(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("scan", parents=[common],
                       help="classify one unknown app with a trained model")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("app", type=Path, help="APK, DEX file or smali directory")
    p.set_defaults(func=cmd_scan)
    return parser


def _add_hyperparams(p: argparse.ArgumentParser) -> None:
    p.add_argument("--trees", type=int, default=100, help="forest size (rf)")
    p.add_argument("--mtry", type=int, default=None,
                   help="features sampled per node (rf; default floor(log2(m))+1)")
    p.add_argument("--min-leaf", type=int, default=None,
                   help="minimum leaf size (dt default 2, rf default 1)")
    p.add_argument("--max-depth", type=int, default=None)
    p.add_argument("--min-leaf-nb", type=int, default=30,
                   help="smallest node still split by the naive-Bayes tree")
    p.add_argument("--no-bootstrap", action="store_true",
                   help="train forest trees on the full sample (rf)")


def _load_config_file(path: Path | None) -> dict:
    if path is None:
        return {}
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise InvalidParam(f"{path}: config file must hold a JSON object")
    return data


def _resolve_globals(args) -> dict:
    """Flags > config file > defaults."""
    file_cfg = _load_config_file(args.config)
    resolved = {}
    for key, default in _GLOBAL_DEFAULTS.items():
        flag = getattr(args, key)
        if flag is not None:
            resolved[key] = flag
        elif key in file_cfg:
            resolved[key] = file_cfg[key]
        else:
            resolved[key] = default
    return resolved


def _echo_config(config: dict) -> None:
    print("config: " + json.dumps(config, sort_keys=True, default=str), file=sys.stderr)


def _classifier_params(kind: str, args) -> dict:
    if kind == KIND_RANDOM_FOREST:
        params = {"n_trees": args.trees,
                  "min_leaf": 1 if args.min_leaf is None else args.min_leaf,
                  "max_depth": args.max_depth, "bootstrap": not args.no_bootstrap}
        if args.mtry is not None:
            params["mtry"] = args.mtry
        return params
    if kind == KIND_DECISION_TREE:
        return {"min_leaf": 2 if args.min_leaf is None else args.min_leaf,
                "max_depth": args.max_depth}
    if kind == KIND_NAIVE_BAYES_TREE:
        return {"min_leaf_for_nb": args.min_leaf_nb, "max_depth": args.max_depth}
    raise InvalidParam(
        f"unsupported classifier {kind!r}; supported: {', '.join(SUPPORTED_KINDS)}")


def cmd_extract(args) -> int:
    g = _resolve_globals(args)
    config = {"command": "extract", "manifest": str(args.manifest),
              "cache_dir": str(args.cache_dir), "on_error": args.on_error, **g}
    _echo_config(config)
    manifest = load_manifest(args.manifest)
    hist_set, report = build_histogram_set(manifest, args.cache_dir,
                                           on_error=args.on_error, jobs=g["jobs"],
                                           config=config)
    for app_id, status, n_unknown, n_unmatched in report.app_events:
        if n_unknown or n_unmatched:
            print(f"  {app_id}: {status}, {n_unknown} unknown opcodes, "
                  f"{n_unmatched} unmatched tokens")
    for app_id, reason in report.failures:
        print(f"  {app_id}: FAILED ({reason})")
    print(f"{report.extracted} extracted, {report.cached} cached, "
          f"{len(report.failures)} failed; {len(hist_set)} apps "
          f"({hist_set.n_benign} benign, {hist_set.n_malware} malware)")
    print(f"cache written to {args.cache_dir}")
    return EXIT_ERROR if report.failures else EXIT_OK


def cmd_synth(args) -> int:
    g = _resolve_globals(args)
    config = {"command": "synth", "benign": args.benign, "malware": args.malware,
              "separation": args.separation, "out_dir": str(args.out_dir), **g}
    _echo_config(config)
    corpus = generate_synthetic_corpus(args.benign, args.malware, args.separation,
                                       g["seed"])
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_histograms_csv(out_dir / "histograms.csv",
                         [(h, lab.value) for h, lab in corpus.histograms.rows],
                         config=config)
    planted_path = out_dir / "planted_opcodes.csv"
    with open(planted_path, "w", encoding="utf-8") as fh:
        fh.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
        fh.write("opcode_hex,favored_class\n")
        for op in corpus.benign_favored:
            fh.write(f"0x{op:02x},benign\n")
        for op in corpus.malware_favored:
            fh.write(f"0x{op:02x},malware\n")
    print(f"{args.benign} benign + {args.malware} malware apps written to {out_dir}")
    return EXIT_OK


def cmd_rank(args) -> int:
    g = _resolve_globals(args)
    mode = NormalizationMode.from_string(g["mode"])
    config = {"command": "rank", "cache": str(args.cache), "n": args.n,
              "out": str(args.out), **g}
    _echo_config(config)
    hist_set = load_histogram_set(args.cache)
    profile = compute_class_means(hist_set, mode)
    ranking = rank_features(profile, args.n)
    if len(ranking) < args.n:
        print(f"warning: only {len(ranking)} opcodes exist; n={args.n} truncated",
              file=sys.stderr)
    write_ranking_csv(args.out, ranking, profile, config=config)
    print(f"{len(ranking)} ranked opcodes written to {args.out}")
    if not args.no_figures:
        from .figures import render_ranking_figure
        fig_path = Path(args.out).with_name("dominant_opcodes.png")
        render_ranking_figure(ranking, fig_path, config=config)
        print(f"figure written to {fig_path}")
    return EXIT_OK


def _ranking_for(args, hist_set, mode):
    """Top-n ranking from the cache, or a reused ranking CSV."""
    if args.ranking is not None:
        ranking, embedded = read_ranking_csv(args.ranking)
        if embedded and "mode" in embedded and args.mode is None:
            mode = NormalizationMode.from_string(embedded["mode"])
        return ranking, mode
    profile = compute_class_means(hist_set, mode)
    return rank_features(profile, args.n), mode


def cmd_train(args) -> int:
    g = _resolve_globals(args)
    mode = NormalizationMode.from_string(g["mode"])
    kind = args.classifier
    params = _classifier_params(kind, args)
    hist_set = load_histogram_set(args.cache)
    ranking, mode = _ranking_for(args, hist_set, mode)
    config = {"command": "train", "cache": str(args.cache), "classifier": kind,
              "n": args.n, "params": params, "model_out": str(args.model_out),
              "ranking_file": str(args.ranking) if args.ranking else None, **g}
    config["mode"] = mode.value  # a reused ranking CSV may pin the mode
    _echo_config(config)
    x, y = project_set(hist_set, ranking, mode)
    data = Dataset.from_arrays(x, y, ranking.feature_names())
    model = train_classifier(kind, data, seed=g["seed"],
                             selection=SelectionProvenance(ranking=ranking, mode=mode),
                             **params)
    save_model(model, args.model_out, config=config)
    train_cm = confusion(model, data)
    train_acc = metrics(train_cm).accuracy_pct
    print(f"trained {kind} on {data.n} apps x {data.m} features: "
          f"{len(model.trees)} tree(s), {count_leaves(model)} leaves, "
          f"training accuracy {train_acc:.2f}%")
    print(f"model written to {args.model_out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    g = _resolve_globals(args)
    mode = NormalizationMode.from_string(g["mode"])
    kind = args.classifier
    params = _classifier_params(kind, args)
    use_holdout = args.holdout is not None
    k = args.kfold if args.kfold is not None else 10
    config = {"command": "evaluate", "cache": str(args.cache), "classifier": kind,
              "n": args.n, "params": params,
              "protocol": f"holdout:{args.holdout}" if use_holdout else f"kfold:{k}",
              "out": str(args.out), **g}
    _echo_config(config)
    hist_set = load_histogram_set(args.cache)
    cfg = ClassifierConfig(kind=kind, params=params)
    rows = []
    if use_holdout:
        report = feature_sweep(hist_set, [cfg], feature_counts=(args.n,), mode=mode,
                               test_fraction=args.holdout, seed=g["seed"],
                               paper_faithful=g["paper_faithful"], jobs=1)
        row = report.rows[0]
        if row.error is not None:
            raise InvalidParam(f"evaluation failed: {row.error}")
        rows.append(("holdout", kind, args.n, g["seed"], row.cm, row.metrics))
        print(f"holdout {args.holdout}: accuracy {row.metrics.accuracy_pct:.2f}%  "
              f"TPR {row.metrics.tpr:.4f}  TNR {row.metrics.tnr:.4f}")
    else:
        result = cross_validate(hist_set, cfg, args.n, mode=mode, k=k, seed=g["seed"],
                                paper_faithful=g["paper_faithful"])
        print(f"{'fold':>9}  {'acc%':>7}  {'TP':>5} {'FN':>5} {'TN':>5} {'FP':>5}")
        for fold in result.folds:
            rows.append((str(fold.fold), kind, args.n, g["seed"], fold.cm, fold.metrics))
            print(f"{fold.fold:>9}  {fold.metrics.accuracy_pct:>7.2f}  "
                  f"{fold.cm.tp:>5} {fold.cm.fn:>5} {fold.cm.tn:>5} {fold.cm.fp:>5}")
        agg = result.aggregate_cm
        rows.append(("aggregate", kind, args.n, g["seed"], agg, result.aggregate_metrics))
        print(f"{'aggregate':>9}  {result.aggregate_metrics.accuracy_pct:>7.2f}  "
              f"{agg.tp:>5} {agg.fn:>5} {agg.tn:>5} {agg.fp:>5}")
    write_fold_csv(args.out, rows, config=config)
    print(f"report written to {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    g = _resolve_globals(args)
    mode = NormalizationMode.from_string(g["mode"])
    kinds = [k.strip() for k in args.classifiers.split(",") if k.strip()]
    configs = [ClassifierConfig(kind=k, params=_classifier_params(k, args))
               for k in kinds]
    counts = grid_counts(args.grid_start, args.grid_stop, args.grid_step)
    config = {"command": "sweep", "cache": str(args.cache), "classifiers": kinds,
              "grid": list(counts), "holdout": args.holdout, "out": str(args.out), **g}
    _echo_config(config)
    hist_set = load_histogram_set(args.cache)
    report = feature_sweep(hist_set, configs, feature_counts=counts, mode=mode,
                           test_fraction=args.holdout, seed=g["seed"],
                           paper_faithful=g["paper_faithful"], jobs=g["jobs"])
    write_sweep_csv(args.out, report, config=config)
    failed = [r for r in report.rows if r.error is not None]
    print(f"{len(report.rows)} cells ({len(failed)} failed) written to {args.out}")
    for row in failed:
        print(f"  {row.classifier} n={row.n_features}: {row.error}")
    stats = report.summarize()
    for s in stats:
        print(f"  {s.classifier}: best accuracy {s.best_accuracy:.2f}% at n={s.best_n}, "
              f"accuracy std across n = {s.accuracy_std:.3f}")
    winner = report.least_fluctuation()
    if winner is not None:
        print(f"  least fluctuation across feature counts: {winner}")
    if not args.no_figures:
        from .figures import render_sweep_figures
        fig_dir = args.figures_dir if args.figures_dir is not None else Path(args.out).parent
        written = render_sweep_figures(report, fig_dir, config=config)
        print(f"{len(written)} figures written to {fig_dir}")
    return EXIT_OK if len(failed) < len(report.rows) else EXIT_ERROR


def cmd_scan(args) -> int:
    g = _resolve_globals(args)
    config = {"command": "scan", "model": str(args.model), "app": str(args.app), **g}
    _echo_config(config)
    model = load_model(args.model)
    if model.selection is None:
        raise InvalidParam(f"{args.model}: model carries no feature provenance; "
                           "retrain with a ranking")
    artifact = detect_artifact_kind(args.app)
    diag = Diagnostics()
    hist = extract_artifact(artifact, diagnostics=diag)
    vector = project(hist, model.selection.ranking, model.selection.mode)
    result = predict(model, vector)
    print(f"{hist.app_id}\t{result.label.value}\t{result.score:.6f}")
    return EXIT_MALWARE if result.label is Label.MALWARE else EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except OpscanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
