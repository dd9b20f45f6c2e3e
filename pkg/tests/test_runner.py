import json
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
import cutprobe.runner as runner_mod
from cutprobe.errors import ConfigError, CutprobeError
from cutprobe.runner import (
    ExperimentConfig,
    RunResult,
    SweepReport,
    SyntheticSpec,
    aggregate_stats,
    aggregates_from_runs,
    emit_report,
    load_config,
    read_runs_csv,
    run_sweep,
)


def desk_config(tmp_path, **overrides):
    """A tiny but complete sweep config over the bundled small graph."""
    base = dict(
        output_dir=tmp_path / "out",
        graph_bundled="smallnet",
        weights_seed=7,
        synthetic=SyntheticSpec(subjects=5, images_per_subject=9, size=64, seed=3),
        cut_points=["A_S", "B_S"],
        runs_per_layer=2,
        max_epochs=4,
        batch_size=16,
        split_fractions=(0.6, 0.2, 0.2),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


class TestConfigValidation:
    def test_requires_exactly_one_graph_source(self, tmp_path):
        with pytest.raises(ConfigError, match="graph"):
            ExperimentConfig(output_dir=tmp_path, weights_seed=0, synthetic=SyntheticSpec())
        with pytest.raises(ConfigError, match="graph"):
            ExperimentConfig(
                output_dir=tmp_path,
                graph_bundled="smallnet",
                graph_path=tmp_path / "g.json",
                weights_seed=0,
                synthetic=SyntheticSpec(),
            )

    def test_requires_exactly_one_weights_source(self, tmp_path):
        with pytest.raises(ConfigError, match="weights"):
            ExperimentConfig(output_dir=tmp_path, graph_bundled="smallnet", synthetic=SyntheticSpec())

    def test_requires_exactly_one_dataset_source(self, tmp_path):
        with pytest.raises(ConfigError, match="dataset"):
            ExperimentConfig(output_dir=tmp_path, graph_bundled="smallnet", weights_seed=0)

    def test_run_count_and_budget_bounds(self, tmp_path):
        with pytest.raises(ConfigError, match="runs_per_layer"):
            desk_config(tmp_path, runs_per_layer=0)
        with pytest.raises(ConfigError, match="budget"):
            desk_config(tmp_path, budget=0)


class TestLoadConfig:
    def toml_text(self):
        return """
output_dir = "out"
runs_per_layer = 2
cut_points = ["A_S"]

[graph]
bundled = "smallnet"

[weights]
random_seed = 7

[dataset.synthetic]
subjects = 4
images_per_subject = 6
size = 32
seed = 1

[train]
max_epochs = 3
batch_size = 8
"""

    def test_toml_with_relative_paths(self, tmp_path):
        cfg_path = tmp_path / "exp.toml"
        cfg_path.write_text(self.toml_text())
        cfg = load_config(cfg_path)
        assert cfg.output_dir == tmp_path / "out"
        assert cfg.graph_bundled == "smallnet"
        assert cfg.weights_seed == 7
        assert cfg.synthetic.subjects == 4
        assert cfg.max_epochs == 3

    def test_json_equivalent(self, tmp_path):
        cfg_path = tmp_path / "exp.json"
        cfg_path.write_text(
            json.dumps(
                {
                    "output_dir": "out",
                    "cut_points": ["A_S"],
                    "graph": {"bundled": "smallnet"},
                    "weights": {"random_seed": 7},
                    "dataset": {"synthetic": {"subjects": 4}},
                }
            )
        )
        cfg = load_config(cfg_path)
        assert cfg.graph_bundled == "smallnet"
        assert cfg.synthetic.subjects == 4

    def test_unknown_key_rejected(self, tmp_path):
        cfg_path = tmp_path / "exp.toml"
        cfg_path.write_text(
            self.toml_text().replace("max_epochs = 3", "max_epochs = 3\nweight_decay = 0.01")
        )
        with pytest.raises(ConfigError, match="weight_decay"):
            load_config(cfg_path)

    def test_wrong_type_rejected(self, tmp_path):
        cfg_path = tmp_path / "exp.toml"
        cfg_path.write_text(self.toml_text().replace('bundled = "smallnet"', "bundled = 3"))
        with pytest.raises(ConfigError, match="graph.bundled"):
            load_config(cfg_path)

    def test_bool_is_not_a_number(self, tmp_path):
        cfg_path = tmp_path / "exp.toml"
        cfg_path.write_text(self.toml_text().replace("max_epochs = 3", "max_epochs = true"))
        with pytest.raises(ConfigError, match="max_epochs"):
            load_config(cfg_path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.toml")


class TestAggregateStats:
    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0, 1, allow_nan=False, width=32), min_size=1, max_size=15))
    def test_matches_exact_rational_oracle(self, values):
        mean, std, lo, hi = aggregate_stats(values)
        e_mean, e_std, e_lo, e_hi = oracles.stats_naive(values)
        assert mean == pytest.approx(e_mean, abs=1e-12)
        assert std == pytest.approx(e_std, abs=1e-9)
        assert lo == e_lo and hi == e_hi

    def test_single_value_has_zero_std(self):
        assert aggregate_stats([0.7]) == (0.7, 0.0, 0.7, 0.7)

    def test_empty_rejected(self):
        with pytest.raises(CutprobeError):
            aggregate_stats([])


def fake_runs():
    rows = []
    for cut, flen, params in (("B_S", 7744, 5000), ("A_S", 7688, 1000)):
        for i in range(3):
            rows.append(
                RunResult(
                    cut_point=cut,
                    run_index=i,
                    seed=100 + i,
                    eval_accuracy=0.5 + 0.1 * i,
                    test_accuracy=0.6 + 0.05 * i,
                    selected_epoch=i,
                    feature_length=flen,
                    learned_params=params,
                    param_ratio=params / 10000,
                    wall_time=1.25,
                )
            )
    return rows


class TestReport:
    def test_aggregates_follow_first_appearance_order(self):
        stats = aggregates_from_runs(fake_runs())
        assert [s.cut_point for s in stats] == ["B_S", "A_S"]
        assert stats[0].runs == 3
        assert stats[0].mean_accuracy == pytest.approx((0.6 + 0.65 + 0.7) / 3)
        assert stats[0].feature_length == 7744

    def test_runs_csv_round_trip(self, tmp_path):
        report = SweepReport(
            graph_name="smallnet",
            class_names=["a", "b"],
            split_sizes={"train": 10, "eval": 2, "test": 3},
            cut_points=["B_S", "A_S"],
            runs_per_layer=3,
            runs=fake_runs(),
            aggregates=aggregates_from_runs(fake_runs()),
        )
        paths = emit_report(report, tmp_path)
        back = read_runs_csv(paths["runs"])
        # wall_time is diagnostics-only, never serialized to runs.csv
        import dataclasses

        expect = [dataclasses.replace(r, wall_time=0.0) for r in report.runs]
        assert back == expect

    def test_report_rewrite_is_byte_identical(self, tmp_path):
        runs = fake_runs()
        report = SweepReport(
            graph_name="smallnet",
            class_names=["a"],
            split_sizes={},
            cut_points=["B_S", "A_S"],
            runs_per_layer=3,
            runs=runs,
            aggregates=aggregates_from_runs(runs),
        )
        p1 = emit_report(report, tmp_path / "one")
        rebuilt = SweepReport(
            graph_name="smallnet",
            class_names=["a"],
            split_sizes={},
            cut_points=["B_S", "A_S"],
            runs_per_layer=3,
            runs=read_runs_csv(p1["runs"]),
            aggregates=aggregates_from_runs(read_runs_csv(p1["runs"])),
        )
        p2 = emit_report(rebuilt, tmp_path / "two")
        for name in ("runs", "aggregate", "plot"):
            assert p1[name].read_bytes() == p2[name].read_bytes(), name

    def test_empty_report_writes_headers_only(self, tmp_path):
        report = SweepReport(
            graph_name="g", class_names=[], split_sizes={}, cut_points=[], runs_per_layer=0
        )
        paths = emit_report(report, tmp_path)
        assert paths["runs"].read_text().count("\n") == 1
        assert paths["aggregate"].read_text().count("\n") == 1
        summary = json.loads(paths["summary"].read_text())
        assert summary["aggregates"] == []

    def test_runs_csv_rejects_foreign_header(self, tmp_path):
        bad = tmp_path / "runs.csv"
        bad.write_text("a,b,c\n1,2,3\n")
        from cutprobe.errors import DataError

        with pytest.raises(DataError, match="header"):
            read_runs_csv(bad)


class TestSweep:
    def test_small_sweep_end_to_end(self, tmp_path):
        cfg = desk_config(tmp_path)
        report = run_sweep(cfg)
        assert [s.cut_point for s in report.aggregates] == ["A_S", "B_S"]
        assert len(report.runs) == 4
        assert not report.failures
        for run in report.runs:
            assert 0.0 <= run.test_accuracy <= 1.0
            assert run.feature_length in (7688, 7744)
            assert run.learned_params > 0
            assert 0 < run.param_ratio <= 1
        seeds = {r.seed for r in report.runs if r.cut_point == "A_S"}
        assert seeds == {cfg.base_seed, cfg.base_seed + 1}

    def test_cache_reused_on_second_sweep(self, tmp_path):
        cfg = desk_config(tmp_path)
        first = run_sweep(cfg)
        assert first.cache_hits == 0
        assert first.cache_misses == 2
        second = run_sweep(desk_config(tmp_path))
        assert second.cache_hits == 2
        assert second.cache_misses == 0
        assert [r.test_accuracy for r in first.runs] == [r.test_accuracy for r in second.runs]

    def test_unknown_cut_point_is_config_error(self, tmp_path):
        cfg = desk_config(tmp_path, cut_points=["A_S", "Z_9"])
        with pytest.raises(ConfigError, match="Z_9"):
            run_sweep(cfg)

    def test_training_failure_isolated_per_cut(self, tmp_path, monkeypatch):
        real_train = runner_mod.train_probe

        def sabotaged(train_set, eval_set, config, **kwargs):
            if train_set[0].shape[1] == 7744:  # B_S feature length
                raise CutprobeError("synthetic failure for test")
            return real_train(train_set, eval_set, config, **kwargs)

        monkeypatch.setattr(runner_mod, "train_probe", sabotaged)
        report = run_sweep(desk_config(tmp_path))
        assert [f.cut_point for f in report.failures] == ["B_S"]
        assert report.failures[0].stage == "train"
        assert {r.cut_point for r in report.runs} == {"A_S"}
        assert [s.cut_point for s in report.aggregates] == ["A_S"]

    def test_aggregate_rows_match_surviving_cuts(self, tmp_path):
        report = run_sweep(desk_config(tmp_path, cut_points=["C_S"]))
        assert len(report.aggregates) == 1
        assert report.aggregates[0].runs == report.runs_per_layer
