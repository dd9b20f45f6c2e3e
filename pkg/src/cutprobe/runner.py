"""Sweep orchestration: run the probe protocol at every cut-off layer,
several seeded runs each, and aggregate accuracy per layer.

Reports are split into two groups. runs.csv, aggregate.csv, plot.csv and
summary.json are byte-identical across repeated invocations of the same
config. Wall-clock timings and cache statistics change between invocations
by nature, so they go to diagnostics.json and nowhere else.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from .data import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    SPLIT_NAMES,
    apply_split,
    iter_samples,
    load_manifest,
    load_split_file,
    split_by_subject,
)
from .errors import ConfigError, CutprobeError, DataError
from .features import (
    DEFAULT_BUDGET,
    cache_read,
    cache_write,
    extract_features_multi,
    feature_length,
)
from .graph import (
    bundled_graph,
    count_params,
    generate_random_weights,
    load_graph,
    load_weights,
    truncate_at,
)
from .probe import TrainConfig, evaluate, train_probe

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class SyntheticSpec:
    out_dir: Path | None = None
    subjects: int = 11
    images_per_subject: int = 30
    size: int = 64
    seed: int = 0
    total_images: int | None = None


@dataclass
class ExperimentConfig:
    output_dir: Path
    graph_bundled: str | None = None
    graph_path: Path | None = None
    weights_path: Path | None = None
    weights_seed: int | None = None
    manifest_path: Path | None = None
    synthetic: SyntheticSpec | None = None
    class_names: list[str] | None = None
    split_fractions: tuple[float, float, float] = (0.83, 0.07, 0.10)
    split_seed: int = 0
    split_file: Path | None = None
    cut_points: list[str] | None = None
    runs_per_layer: int = 10
    budget: int = DEFAULT_BUDGET
    learning_rate: float = 0.01
    batch_size: int = 64
    max_epochs: int = 50
    momentum: float = 0.9
    standardize: bool = False
    base_seed: int = 0
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        if (self.graph_bundled is None) == (self.graph_path is None):
            raise ConfigError("exactly one of graph.bundled / graph.path is required")
        if (self.weights_path is None) == (self.weights_seed is None):
            raise ConfigError("exactly one of weights.path / weights.random_seed is required")
        if (self.manifest_path is None) == (self.synthetic is None):
            raise ConfigError("exactly one of dataset.manifest / dataset.synthetic is required")
        if self.runs_per_layer < 1:
            raise ConfigError(f"runs_per_layer must be >= 1, got {self.runs_per_layer}")
        if self.budget < 1:
            raise ConfigError(f"budget must be >= 1, got {self.budget}")


def _expect_table(obj, name: str) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"config section '{name}' must be a table, got {type(obj).__name__}")
    return obj


def _take(table: dict, name: str, section: str, kinds, default=None, required=False):
    if name not in table:
        if required:
            raise ConfigError(f"config section '{section}' is missing '{name}'")
        return default
    value = table.pop(name)
    kinds_tuple = kinds if isinstance(kinds, tuple) else (kinds,)
    # bool subclasses int; reject true/false where a number is expected
    if not isinstance(value, kinds_tuple) or (
        isinstance(value, bool) and bool not in kinds_tuple
    ):
        raise ConfigError(f"config field '{section}.{name}' has wrong type {type(value).__name__}")
    return value


def _reject_unknown(table: dict, section: str):
    if table:
        raise ConfigError(f"unknown config fields in '{section}': {sorted(table)}")


def _triple(value, name: str) -> tuple[float, float, float]:
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        raise ConfigError(f"config field '{name}' must be a list of 3 numbers")
    try:
        return tuple(float(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config field '{name}' must be numeric: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    """Parse a TOML (default) or JSON experiment config.

    Relative paths inside the file resolve against the file's directory.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config '{path}': {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            doc = json.loads(raw.decode("utf-8"))
        else:
            doc = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config '{path}': {exc}") from exc
    doc = _expect_table(doc, "<root>")
    base = path.parent

    def resolve(p):
        return None if p is None else (base / p)

    graph_tbl = _expect_table(doc.pop("graph", {}), "graph")
    graph_bundled = _take(graph_tbl, "bundled", "graph", str)
    graph_path = _take(graph_tbl, "path", "graph", str)
    _reject_unknown(graph_tbl, "graph")

    weights_tbl = _expect_table(doc.pop("weights", {}), "weights")
    weights_path = _take(weights_tbl, "path", "weights", str)
    weights_seed = _take(weights_tbl, "random_seed", "weights", int)
    _reject_unknown(weights_tbl, "weights")

    dataset_tbl = _expect_table(doc.pop("dataset", {}), "dataset")
    manifest = _take(dataset_tbl, "manifest", "dataset", str)
    class_names = _take(dataset_tbl, "class_names", "dataset", list)
    synthetic_tbl = dataset_tbl.pop("synthetic", None)
    synthetic = None
    if synthetic_tbl is not None:
        synthetic_tbl = _expect_table(synthetic_tbl, "dataset.synthetic")
        out = _take(synthetic_tbl, "out_dir", "dataset.synthetic", str)
        synthetic = SyntheticSpec(
            out_dir=resolve(out),
            subjects=_take(synthetic_tbl, "subjects", "dataset.synthetic", int, 11),
            images_per_subject=_take(
                synthetic_tbl, "images_per_subject", "dataset.synthetic", int, 30
            ),
            size=_take(synthetic_tbl, "size", "dataset.synthetic", int, 64),
            seed=_take(synthetic_tbl, "seed", "dataset.synthetic", int, 0),
            total_images=_take(synthetic_tbl, "total_images", "dataset.synthetic", int),
        )
        _reject_unknown(synthetic_tbl, "dataset.synthetic")
    _reject_unknown(dataset_tbl, "dataset")

    split_tbl = _expect_table(doc.pop("split", {}), "split")
    fractions = _take(split_tbl, "fractions", "split", list, [0.83, 0.07, 0.10])
    split_seed = _take(split_tbl, "seed", "split", int, 0)
    split_file = _take(split_tbl, "file", "split", str)
    _reject_unknown(split_tbl, "split")

    train_tbl = _expect_table(doc.pop("train", {}), "train")
    train = dict(
        learning_rate=float(_take(train_tbl, "learning_rate", "train", (int, float), 0.01)),
        batch_size=_take(train_tbl, "batch_size", "train", int, 64),
        max_epochs=_take(train_tbl, "max_epochs", "train", int, 50),
        momentum=float(_take(train_tbl, "momentum", "train", (int, float), 0.9)),
        standardize=_take(train_tbl, "standardize", "train", bool, False),
        base_seed=_take(train_tbl, "base_seed", "train", int, 0),
    )
    _reject_unknown(train_tbl, "train")

    pre_tbl = _expect_table(doc.pop("preprocess", {}), "preprocess")
    mean = _take(pre_tbl, "mean", "preprocess", list, list(IMAGENET_MEAN))
    std = _take(pre_tbl, "std", "preprocess", list, list(IMAGENET_STD))
    _reject_unknown(pre_tbl, "preprocess")

    output_dir = _take(doc, "output_dir", "<root>", str, required=True)
    cut_points = _take(doc, "cut_points", "<root>", list)
    runs_per_layer = _take(doc, "runs_per_layer", "<root>", int, 10)
    budget = _take(doc, "budget", "<root>", int, DEFAULT_BUDGET)
    _reject_unknown(doc, "<root>")

    if cut_points is not None and not all(isinstance(c, str) for c in cut_points):
        raise ConfigError("config field 'cut_points' must be a list of strings")
    if class_names is not None and not all(isinstance(c, str) for c in class_names):
        raise ConfigError("config field 'dataset.class_names' must be a list of strings")

    return ExperimentConfig(
        output_dir=base / output_dir,
        graph_bundled=graph_bundled,
        graph_path=resolve(graph_path),
        weights_path=resolve(weights_path),
        weights_seed=weights_seed,
        manifest_path=resolve(manifest),
        synthetic=synthetic,
        class_names=class_names,
        split_fractions=_triple(fractions, "split.fractions"),
        split_seed=split_seed,
        split_file=resolve(split_file),
        cut_points=list(cut_points) if cut_points is not None else None,
        runs_per_layer=runs_per_layer,
        budget=budget,
        mean=_triple(mean, "preprocess.mean"),
        std=_triple(std, "preprocess.std"),
        **train,
    )


@dataclass
class RunResult:
    cut_point: str
    run_index: int
    seed: int
    eval_accuracy: float
    test_accuracy: float
    selected_epoch: int
    feature_length: int
    learned_params: int
    param_ratio: float
    wall_time: float


@dataclass
class LayerStats:
    cut_point: str
    runs: int
    mean_accuracy: float
    std_accuracy: float
    min_accuracy: float
    max_accuracy: float
    feature_length: int
    learned_params: int
    param_ratio: float


@dataclass
class SweepFailure:
    cut_point: str
    stage: str
    message: str


@dataclass
class SweepReport:
    graph_name: str
    class_names: list[str]
    split_sizes: dict[str, int]
    cut_points: list[str]
    runs_per_layer: int
    runs: list[RunResult] = field(default_factory=list)
    aggregates: list[LayerStats] = field(default_factory=list)
    failures: list[SweepFailure] = field(default_factory=list)
    cache_hits: int = 0
    cache_misses: int = 0
    wall_time: float = 0.0


def aggregate_stats(values) -> tuple[float, float, float, float]:
    """(mean, sample std, min, max) with extended-precision accumulation.

    A single value has std 0 by convention.
    """
    vals = [float(v) for v in values]
    if not vals:
        raise DataError("aggregate_stats needs at least one value")
    n = len(vals)
    mean = math.fsum(vals) / n
    if n == 1:
        std = 0.0
    else:
        std = math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / (n - 1))
    return mean, std, min(vals), max(vals)


def _weights_identity(config: ExperimentConfig) -> str:
    if config.weights_seed is not None:
        return f"seed:{config.weights_seed}"
    digest = hashlib.sha256(config.weights_path.read_bytes()).hexdigest()
    return f"file:{digest}"


def _cache_key(
    graph, cut_point: str, config: ExperimentConfig, weights_id: str, manifest_digest: str
) -> str:
    payload = json.dumps(
        {
            "graph": graph.name,
            "input_shape": list(graph.input_shape),
            "cut_point": cut_point,
            "budget": config.budget,
            "mean": list(config.mean),
            "std": list(config.std),
            "weights": weights_id,
            "manifest": manifest_digest,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def _split_arrays(records, by_subject, num_classes: int):
    """Cache records -> {split: (X float32, y int64)} in record order."""
    buckets = {name: ([], []) for name in SPLIT_NAMES}
    for rec in records:
        split = by_subject.get(rec.subject_id)
        if split is None:
            raise DataError(f"subject '{rec.subject_id}' has no split assignment")
        xs, ys = buckets[split]
        xs.append(rec.vector)
        ys.append(rec.label)
    out = {}
    for name, (xs, ys) in buckets.items():
        if not xs:
            raise DataError(f"split '{name}' received no images")
        x = np.stack(xs).astype(np.float32, copy=False)
        y = np.asarray(ys, dtype=np.int64)
        if y.min() < 0 or y.max() >= num_classes:
            raise DataError(f"split '{name}' has labels outside [0, {num_classes})")
        out[name] = (x, y)
    return out


def run_sweep(config: ExperimentConfig, progress=None) -> SweepReport:
    """Execute the full layer sweep described by ``config``.

    One cut-point failing (recorded in ``report.failures``) does not stop
    the others. Feature extraction shares a single forward pass per image
    across all cut-points that miss the cache.
    """
    t_start = time.perf_counter()
    say = progress or (lambda msg: None)

    if config.graph_bundled is not None:
        graph = bundled_graph(config.graph_bundled)
    else:
        graph = load_graph(config.graph_path)

    if config.weights_seed is not None:
        store = generate_random_weights(graph, seed=config.weights_seed)
    else:
        store = load_weights(Path(config.weights_path).read_bytes(), graph)

    if config.synthetic is not None:
        spec = config.synthetic
        out_dir = spec.out_dir or (config.output_dir / "synthetic")
        manifest_path = data_mod.generate_synthetic(
            out_dir,
            subjects=spec.subjects,
            images_per_subject=spec.images_per_subject,
            size=spec.size,
            seed=spec.seed,
            total_images=spec.total_images,
        )
        say(f"synthetic dataset at {manifest_path}")
    else:
        manifest_path = config.manifest_path
    manifest = load_manifest(manifest_path, class_names=config.class_names)

    if config.split_file is not None:
        assignment = apply_split(manifest, load_split_file(config.split_file))
    else:
        assignment = split_by_subject(manifest, config.split_fractions, config.split_seed)
    split_sizes = {name: 0 for name in SPLIT_NAMES}
    for rec in manifest.records:
        split_sizes[assignment.split_of(rec)] += 1
    for name, size in split_sizes.items():
        if size == 0:
            raise DataError(f"split '{name}' is empty; dataset too small for these fractions")

    cuts = config.cut_points if config.cut_points is not None else list(graph.cut_points)
    unknown = [c for c in cuts if c not in graph.cut_points]
    if unknown:
        raise ConfigError(
            f"cut points {unknown} not defined by graph '{graph.name}' "
            f"(valid: {list(graph.cut_points)})"
        )
    if len(set(cuts)) != len(cuts):
        raise ConfigError(f"cut_points contains duplicates: {cuts}")

    report = SweepReport(
        graph_name=graph.name,
        class_names=list(manifest.class_names),
        split_sizes=split_sizes,
        cut_points=list(cuts),
        runs_per_layer=config.runs_per_layer,
    )

    weights_id = _weights_identity(config)
    manifest_digest = hashlib.sha256(Path(manifest_path).read_bytes()).hexdigest()
    cache_dir = config.output_dir / "cache"
    cache_dir.mkdir(parents=True, exist_ok=True)
    cache_paths = {
        c: cache_dir / f"{graph.name}_{c}_{_cache_key(graph, c, config, weights_id, manifest_digest)}.cpfc"
        for c in cuts
    }

    failed: dict[str, SweepFailure] = {}
    missing = [c for c in cuts if not cache_paths[c].exists()]
    report.cache_hits = len(cuts) - len(missing)
    report.cache_misses = len(missing)

    def extract(cut_list):
        samples = iter_samples(manifest, tuple(graph.input_shape), config.mean, config.std)
        by_cut = extract_features_multi(graph, store, cut_list, samples, budget=config.budget)
        for c in cut_list:
            cache_write(cache_paths[c], graph.name, c, by_cut[c])

    if missing:
        say(f"extracting features for {missing}")
        try:
            extract(missing)
        except CutprobeError:
            # One bad cut must not sink the batch: retry each alone.
            for c in missing:
                try:
                    extract([c])
                except CutprobeError as exc:
                    failed[c] = SweepFailure(c, "extract", str(exc))

    num_classes = len(manifest.class_names)
    full_params = count_params(graph)
    for cut in cuts:
        if cut in failed:
            report.failures.append(failed[cut])
            continue
        try:
            cached = cache_read(cache_paths[cut])
            if cached.model_name != graph.name or cached.cut_point != cut:
                raise DataError(
                    f"cache file {cache_paths[cut]} holds "
                    f"{cached.model_name}/{cached.cut_point}, expected {graph.name}/{cut}"
                )
            arrays = _split_arrays(cached.records, assignment.by_subject, num_classes)
            feat_len = arrays["train"][0].shape[1]
            learned = count_params(truncate_at(graph, cut))
            ratio = learned / full_params
            accs = []
            for run_idx in range(config.runs_per_layer):
                seed = config.base_seed + run_idx
                t0 = time.perf_counter()
                train_cfg = TrainConfig(
                    learning_rate=config.learning_rate,
                    batch_size=config.batch_size,
                    max_epochs=config.max_epochs,
                    seed=seed,
                    momentum=config.momentum,
                    standardize=config.standardize,
                )
                model, trace = train_probe(
                    arrays["train"], arrays["eval"], train_cfg, num_classes=num_classes
                )
                test_acc, _ = evaluate(model, arrays["test"])
                report.runs.append(
                    RunResult(
                        cut_point=cut,
                        run_index=run_idx,
                        seed=seed,
                        eval_accuracy=float(trace.eval_accuracy[trace.selected_epoch]),
                        test_accuracy=float(test_acc),
                        selected_epoch=trace.selected_epoch,
                        feature_length=feat_len,
                        learned_params=learned,
                        param_ratio=ratio,
                        wall_time=time.perf_counter() - t0,
                    )
                )
                accs.append(float(test_acc))
            mean, std, lo, hi = aggregate_stats(accs)
            report.aggregates.append(
                LayerStats(cut, len(accs), mean, std, lo, hi, feat_len, learned, ratio)
            )
            say(f"{cut}: mean test accuracy {mean:.4f} over {len(accs)} runs")
        except CutprobeError as exc:
            report.failures.append(SweepFailure(cut, "train", str(exc)))
    report.wall_time = time.perf_counter() - t_start
    return report


_RUNS_HEADER = [
    "cut_point",
    "run_index",
    "seed",
    "eval_accuracy",
    "test_accuracy",
    "selected_epoch",
    "feature_length",
    "learned_params",
    "param_ratio",
]

_AGG_HEADER = [
    "cut_point",
    "runs",
    "mean_accuracy",
    "std_accuracy",
    "min_accuracy",
    "max_accuracy",
    "feature_length",
    "learned_params",
    "param_ratio",
]


def _fmt(value) -> str:
    # repr() of a float is its shortest round-trip form: stable across runs.
    return repr(float(value)) if isinstance(value, float) else str(value)


def _write_csv(path: Path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")


def aggregates_from_runs(runs: list[RunResult]) -> list[LayerStats]:
    """Recompute per-layer statistics from raw run rows.

    Cut order follows first appearance so a rewrite of aggregate.csv from
    runs.csv reproduces the original file byte for byte.
    """
    order: list[str] = []
    grouped: dict[str, list[RunResult]] = {}
    for run in runs:
        if run.cut_point not in grouped:
            order.append(run.cut_point)
            grouped[run.cut_point] = []
        grouped[run.cut_point].append(run)
    stats = []
    for cut in order:
        rs = grouped[cut]
        mean, std, lo, hi = aggregate_stats([r.test_accuracy for r in rs])
        stats.append(
            LayerStats(
                cut, len(rs), mean, std, lo, hi,
                rs[0].feature_length, rs[0].learned_params, rs[0].param_ratio,
            )
        )
    return stats


def read_runs_csv(path) -> list[RunResult]:
    path = Path(path)
    try:
        rows = list(csv.reader(io.StringIO(path.read_text(encoding="utf-8"))))
    except OSError as exc:
        raise DataError(f"cannot read runs file '{path}': {exc}") from exc
    if not rows or rows[0] != _RUNS_HEADER:
        raise DataError(f"runs file '{path}': unexpected header {rows[0] if rows else '<empty>'}")
    runs = []
    for row_no, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(_RUNS_HEADER):
            raise DataError(f"runs file row {row_no}: expected {len(_RUNS_HEADER)} fields")
        try:
            runs.append(
                RunResult(
                    cut_point=row[0],
                    run_index=int(row[1]),
                    seed=int(row[2]),
                    eval_accuracy=float(row[3]),
                    test_accuracy=float(row[4]),
                    selected_epoch=int(row[5]),
                    feature_length=int(row[6]),
                    learned_params=int(row[7]),
                    param_ratio=float(row[8]),
                    wall_time=0.0,
                )
            )
        except ValueError as exc:
            raise DataError(f"runs file row {row_no}: {exc}") from exc
    return runs


def emit_report(report: SweepReport, output_dir) -> dict[str, Path]:
    """Write all report files; returns {name: path}.

    Everything except diagnostics.json is a pure function of the sweep
    results and therefore byte-identical across reruns.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    paths = {}

    paths["runs"] = output_dir / "runs.csv"
    _write_csv(
        paths["runs"],
        _RUNS_HEADER,
        [
            (r.cut_point, r.run_index, r.seed, r.eval_accuracy, r.test_accuracy,
             r.selected_epoch, r.feature_length, r.learned_params, r.param_ratio)
            for r in report.runs
        ],
    )

    paths["aggregate"] = output_dir / "aggregate.csv"
    _write_csv(
        paths["aggregate"],
        _AGG_HEADER,
        [
            (a.cut_point, a.runs, a.mean_accuracy, a.std_accuracy, a.min_accuracy,
             a.max_accuracy, a.feature_length, a.learned_params, a.param_ratio)
            for a in report.aggregates
        ],
    )

    paths["plot"] = output_dir / "plot.csv"
    _write_csv(
        paths["plot"],
        ["cut_point", "mean_accuracy", "std_accuracy"],
        [(a.cut_point, a.mean_accuracy, a.std_accuracy) for a in report.aggregates],
    )

    summary = {
        "graph": report.graph_name,
        "class_names": report.class_names,
        "split_sizes": report.split_sizes,
        "cut_points": report.cut_points,
        "runs_per_layer": report.runs_per_layer,
        "aggregates": [
            {
                "cut_point": a.cut_point,
                "runs": a.runs,
                "mean_accuracy": a.mean_accuracy,
                "std_accuracy": a.std_accuracy,
                "min_accuracy": a.min_accuracy,
                "max_accuracy": a.max_accuracy,
                "feature_length": a.feature_length,
                "learned_params": a.learned_params,
                "param_ratio": a.param_ratio,
            }
            for a in report.aggregates
        ],
        "failures": [
            {"cut_point": f.cut_point, "stage": f.stage, "message": f.message}
            for f in report.failures
        ],
    }
    paths["summary"] = output_dir / "summary.json"
    paths["summary"].write_text(
        json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )

    diagnostics = {
        "wall_time_total": report.wall_time,
        "cache_hits": report.cache_hits,
        "cache_misses": report.cache_misses,
        "run_wall_times": [
            {"cut_point": r.cut_point, "run_index": r.run_index, "wall_time": r.wall_time}
            for r in report.runs
        ],
    }
    paths["diagnostics"] = output_dir / "diagnostics.json"
    paths["diagnostics"].write_text(
        json.dumps(diagnostics, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    return paths
