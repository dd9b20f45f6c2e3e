"""Command-line front end.

Exit codes: 0 success, 1 configuration/usage problems, 2 data or format
problems, 3 sweep finished but at least one cut-point failed.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from .data import (
    DatasetManifest,
    ManifestRecord,
    generate_synthetic,
    iter_samples,
    load_manifest,
    load_split_file,
    split_by_subject,
)
from .errors import ConfigError, CutprobeError
from .features import DEFAULT_BUDGET, cache_read, cache_write, extract_features_multi
from .graph import (
    BUNDLED_GRAPHS,
    bundled_graph,
    count_params,
    generate_random_weights,
    load_graph,
    load_weights,
    truncate_at,
)
from .probe import TrainConfig, config_metadata, evaluate, save_probe, train_probe
from .runner import (
    aggregates_from_runs,
    emit_report,
    load_config,
    read_runs_csv,
    run_sweep,
)


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 means data errors here, so remap.
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _resolve_graph(spec: str):
    path = Path(spec)
    if path.exists():
        return load_graph(path)
    if spec in BUNDLED_GRAPHS:
        return bundled_graph(spec)
    raise ConfigError(
        f"'{spec}' is neither a graph file nor a bundled graph name "
        f"(bundled: {sorted(BUNDLED_GRAPHS)})"
    )


def _resolve_store(graph, weights_path: str | None, random_seed: int | None):
    if (weights_path is None) == (random_seed is None):
        raise ConfigError("exactly one of --weights / --random-seed is required")
    if weights_path is not None:
        return load_weights(Path(weights_path).read_bytes(), graph)
    return generate_random_weights(graph, seed=random_seed)


def _cmd_sweep(args) -> int:
    config = load_config(args.config)
    report = run_sweep(config, progress=lambda msg: print(msg, file=sys.stderr))
    paths = emit_report(report, config.output_dir)
    for stat in report.aggregates:
        print(
            f"{stat.cut_point}: mean={stat.mean_accuracy:.4f} std={stat.std_accuracy:.4f} "
            f"({stat.runs} runs, {stat.feature_length} features)"
        )
    for failure in report.failures:
        print(f"FAILED {failure.cut_point} [{failure.stage}]: {failure.message}", file=sys.stderr)
    print(f"report written to {paths['summary'].parent}")
    return 3 if report.failures else 0


def _cmd_extract(args) -> int:
    graph = _resolve_graph(args.graph)
    store = _resolve_store(graph, args.weights, args.random_seed)
    manifest = load_manifest(args.manifest)
    cuts = args.cut or list(graph.cut_points)
    samples = iter_samples(manifest, tuple(graph.input_shape))
    by_cut = extract_features_multi(graph, store, cuts, samples, budget=args.budget)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for cut in cuts:
        path = out_dir / f"{graph.name}_{cut}.cpfc"
        cache_write(path, graph.name, cut, by_cut[cut])
        print(f"{cut}: {len(by_cut[cut])} records -> {path}")
    return 0


def _manifest_from_records(records) -> DatasetManifest:
    """Wrap feature records so the subject splitter can run without images."""
    labels = sorted({r.label for r in records})
    recs = [
        ManifestRecord(Path(r.image_id), r.image_id, r.subject_id, str(r.label))
        for r in records
    ]
    return DatasetManifest(recs, [str(v) for v in labels], Path("."))


def _cmd_train_probe(args) -> int:
    import numpy as np

    cache = cache_read(args.features)
    records = cache.records
    if args.split_file:
        by_subject = load_split_file(args.split_file)
    else:
        shim = _manifest_from_records(records)
        by_subject = split_by_subject(shim, tuple(args.fractions), args.split_seed).by_subject
    buckets = {"train": ([], []), "eval": ([], []), "test": ([], [])}
    for rec in records:
        split = by_subject.get(rec.subject_id)
        if split is None:
            raise ConfigError(f"subject '{rec.subject_id}' missing from split")
        buckets[split][0].append(rec.vector)
        buckets[split][1].append(rec.label)
    sets = {}
    for name, (xs, ys) in buckets.items():
        if not xs:
            raise ConfigError(f"split '{name}' is empty")
        sets[name] = (np.stack(xs), np.asarray(ys, dtype=np.int64))
    cfg = TrainConfig(
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        max_epochs=args.epochs,
        seed=args.seed,
        momentum=args.momentum,
        standardize=args.standardize,
    )
    model, trace = train_probe(sets["train"], sets["eval"], cfg)
    test_acc, confusion = evaluate(model, sets["test"])
    print(f"selected epoch: {trace.selected_epoch}")
    print(f"eval accuracy: {trace.eval_accuracy[trace.selected_epoch]:.4f}")
    print(f"test accuracy: {test_acc:.4f}")
    print(f"confusion:\n{confusion}")
    if args.out:
        meta = config_metadata(cfg)
        meta.update({"model": cache.model_name, "cut_point": cache.cut_point})
        save_probe(args.out, model, meta)
        print(f"probe saved to {args.out}")
    return 0


def _cmd_split(args) -> int:
    manifest = load_manifest(args.manifest)
    assignment = split_by_subject(manifest, tuple(args.fractions), args.seed)
    lines = ["subject_id,split"]
    lines += [f"{s},{assignment.by_subject[s]}" for s in manifest.subjects()]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"split written to {args.out}")
    else:
        print(text, end="")
    for name, frac in assignment.achieved_fractions.items():
        print(f"# {name}: {frac:.4f}", file=sys.stderr)
    return 0


def _cmd_count_params(args) -> int:
    graph = _resolve_graph(args.graph)
    total = count_params(graph)
    if args.cut:
        sub = truncate_at(graph, args.cut)
        learned = count_params(sub)
        print(f"{graph.name}@{args.cut}: {learned} learned parameters "
              f"({learned / total:.4f} of full model)")
    else:
        print(f"{graph.name}: {total} learned parameters")
    return 0


def _cmd_gen_synthetic(args) -> int:
    manifest = generate_synthetic(
        args.out,
        subjects=args.subjects,
        images_per_subject=args.images_per_subject,
        size=args.size,
        seed=args.seed,
        total_images=args.total_images,
    )
    print(f"manifest written to {manifest}")
    return 0


def _cmd_report(args) -> int:
    runs = read_runs_csv(args.runs)
    stats = aggregates_from_runs(runs)
    from .runner import SweepReport

    report = SweepReport(
        graph_name="",
        class_names=[],
        split_sizes={},
        cut_points=[s.cut_point for s in stats],
        runs_per_layer=max((s.runs for s in stats), default=0),
        runs=runs,
        aggregates=stats,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = emit_report(report, out_dir)
    print(f"aggregate written to {paths['aggregate']}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="cutprobe", description="Layer sweep probing toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sweep", help="run a full layer sweep from a config file")
    p.add_argument("--config", required=True, help="TOML or JSON experiment config")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("extract", help="extract pooled features at cut-points")
    p.add_argument("--graph", required=True, help="bundled graph name or graph file")
    p.add_argument("--weights", help="weight container file")
    p.add_argument("--random-seed", type=int, help="generate seeded random weights instead")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cut", action="append", help="cut-point label (repeatable; default all)")
    p.add_argument("--budget", type=int, default=DEFAULT_BUDGET)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("train-probe", help="train a probe on an extracted feature file")
    p.add_argument("--features", required=True, help="feature cache file")
    p.add_argument("--split-file", help="subject_id,split CSV; default greedy split")
    p.add_argument("--fractions", type=float, nargs=3, default=[0.83, 0.07, 0.10])
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--learning-rate", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="save the trained probe here")
    p.set_defaults(func=_cmd_train_probe)

    p = sub.add_parser("split", help="compute a subject-disjoint split for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--fractions", type=float, nargs=3, default=[0.83, 0.07, 0.10])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("count-params", help="count learned parameters of a (truncated) graph")
    p.add_argument("--graph", required=True)
    p.add_argument("--cut")
    p.set_defaults(func=_cmd_count_params)

    p = sub.add_parser("gen-synthetic", help="generate the synthetic texture dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=11)
    p.add_argument("--images-per-subject", type=int, default=30)
    p.add_argument("--total-images", type=int, default=None)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_synthetic)

    p = sub.add_parser("report", help="recompute aggregate files from a runs.csv")
    p.add_argument("--runs", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except CutprobeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
