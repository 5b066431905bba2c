"""Config parsing, experiment orchestration, report emission."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from fedfair import harness
from fedfair.data import SyntheticConfig, generate_synthetic, split_dataset, write_dataset
from fedfair.errors import ParseError, ValidationError
from fedfair.federated import ROUND_CSV_HEADER, Strategy, parse_strategy
from fedfair.metrics import GroupedPredictions, gap_worst_report

SMALL_TEXT = """
# two tiny clients, three classes
data.num_clients = 2
data.client_sizes = 24,18
data.num_classes = 3
data.feature_dim = 4
fl.rounds = 2
fl.local_epochs = 1
fl.batch_size = 8
fl.base_lr = 0.05
post_fl.epochs = 3
strategies = fedavg, qffl(q=0), qffl(q=1)
seeds = 0,1
"""


def small_config(**overrides):
    cfg = harness.parse_config_text(SMALL_TEXT)
    if overrides:
        from dataclasses import replace

        cfg = replace(cfg, **overrides)
    return cfg


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def tree_bytes(root):
    out = {}
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root))] = path.read_bytes()
    return out


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------


def test_parse_minimal_config_applies_defaults():
    cfg = harness.parse_config_text("seeds = 3")
    assert cfg.data == SyntheticConfig()
    assert cfg.fl.rounds == 100
    assert cfg.fl.local_epochs == 5
    assert cfg.fl.batch_size == 128
    assert cfg.fl.base_lr == 1e-4
    assert cfg.fl.optimizer == "adam"
    assert cfg.fl.rebalance is True
    assert cfg.post_fl_enabled is True
    assert cfg.post_fl_epochs == 100
    assert cfg.post_fl_delta == 0.05
    assert cfg.post_fl_eval_every == 1
    assert cfg.post_fl_base_lr is None
    assert cfg.seeds == (3,)
    assert cfg.output_dir == "results"
    assert cfg.scaling_factor_study is False
    assert cfg.desk_scale is False
    labels = [s.label() for s in cfg.strategies]
    assert labels == [
        "fedavg",
        "fedequal",
        "fedloss",
        "fedexp_m1",
        "qffl_q0",
        "qffl_q1",
        "qffl_q5",
        "fedauto_Q1.5_M3",
    ]


def test_parse_comments_and_blank_lines_ignored():
    cfg = harness.parse_config_text("\n# comment\nseeds = 1  # trailing\n\n")
    assert cfg.seeds == (1,)


def test_parse_unknown_key_names_key_and_line():
    with pytest.raises(ParseError) as err:
        harness.parse_config_text("seeds = 0\nfl.velocity = 3\n")
    assert "fl.velocity" in str(err.value)
    assert "line 2" in str(err.value)


def test_parse_duplicate_key_rejected():
    with pytest.raises(ParseError) as err:
        harness.parse_config_text("seeds = 0\nseeds = 1\n")
    assert "duplicate" in str(err.value)
    assert "line 2" in str(err.value)


def test_parse_missing_equals_rejected():
    with pytest.raises(ParseError) as err:
        harness.parse_config_text("just some words\n")
    assert "key = value" in str(err.value)


def test_parse_type_error_names_key():
    with pytest.raises(ParseError) as err:
        harness.parse_config_text("fl.rounds = soon\n")
    assert "fl.rounds" in str(err.value)
    assert "integer" in str(err.value)


def test_parse_bad_strategy_parameter_rejected():
    with pytest.raises(ParseError) as err:
        harness.parse_config_text("strategies = fedauto(Q=0.5)\n")
    assert "exceed 1" in str(err.value)


def test_parse_duplicate_strategy_labels_rejected():
    with pytest.raises(ParseError) as err:
        harness.parse_config_text("strategies = fedavg, fedavg\n")
    assert "duplicate" in str(err.value)


def test_parse_negative_seed_rejected():
    with pytest.raises(ParseError) as err:
        harness.parse_config_text("seeds = 0,-2\n")
    assert "seeds" in str(err.value)


def test_parse_sizes_required_for_nonstandard_client_count():
    with pytest.raises(ParseError) as err:
        harness.parse_config_text("data.num_clients = 3\n")
    assert "client_sizes" in str(err.value)


def test_parse_num_clients_inferred_from_sizes():
    cfg = harness.parse_config_text("data.client_sizes = 30,20,10\ndata.num_classes = 2\n")
    assert cfg.data.num_clients == 3
    assert cfg.data.client_noise_scales == (1.0, 1.4, 1.8)


def test_parse_data_validation_becomes_parse_error():
    with pytest.raises(ParseError) as err:
        harness.parse_config_text("data.client_sizes = 4,4,4,4,4,4\n")
    assert "data config invalid" in str(err.value)


def test_desk_preset_fills_only_unset_keys():
    cfg = harness.parse_config_text("desk_scale = true\nfl.rounds = 7\n")
    assert cfg.desk_scale is True
    assert cfg.fl.rounds == 7  # explicit key wins
    assert cfg.fl.local_epochs == 3
    assert cfg.fl.batch_size == 32
    assert cfg.fl.base_lr == 0.03
    assert cfg.post_fl_base_lr == 0.003
    assert cfg.hidden_dims == ()


def test_desk_scale_flag_forces_preset():
    cfg = harness.parse_config_text("seeds = 0", desk_scale=True)
    assert cfg.desk_scale is True
    assert cfg.fl.rounds == 30


def test_serialize_config_round_trips():
    cfg = harness.parse_config_text(SMALL_TEXT)
    assert harness.parse_config_text(harness.serialize_config(cfg)) == cfg


def test_serialize_desk_config_round_trips():
    cfg = harness.parse_config_text("strategies = fedauto(Q=2.5,M=4)\nseeds = 2", desk_scale=True)
    again = harness.parse_config_text(harness.serialize_config(cfg))
    assert again == cfg


def test_strategy_spec_inverts_parse_strategy():
    for text in ("fedavg", "fedequal", "fedloss", "fedexp(m=3)", "qffl(q=0.5)",
                 "fedauto(Q=1.5,M=3)"):
        strategy = parse_strategy(text)
        assert parse_strategy(harness.strategy_spec(strategy)) == strategy


# ---------------------------------------------------------------------------
# experiment execution
# ---------------------------------------------------------------------------


def test_run_experiment_row_count_and_artifacts(tmp_path):
    cfg = small_config()
    summary = harness.run_experiment(cfg, out_dir=tmp_path)
    assert len(summary.results) == 3 * 2  # strategies x seeds
    for result in summary.results:
        run_dir = tmp_path / "runs" / result.label / f"seed_{result.seed}"
        rounds = read_csv(run_dir / "rounds.csv")
        assert rounds[0] == ROUND_CSV_HEADER
        assert len(rounds) == 1 + cfg.fl.rounds * cfg.data.num_clients
        assert (run_dir / "fairness_in_fl.csv").exists()
        assert (run_dir / "fairness_in_fl.json").exists()
        assert (run_dir / "checkpoints.csv").exists()
        assert (run_dir / "selection.csv").exists()
        assert (run_dir / "fairness_post_fl.csv").exists()
        assert result.post_fl is not None
        assert len(result.client_accuracies) == cfg.data.num_clients


def test_run_experiment_post_fl_disabled(tmp_path):
    cfg = small_config(post_fl_enabled=False)
    summary = harness.run_experiment(cfg, out_dir=tmp_path)
    for result in summary.results:
        assert result.post_fl is None
        run_dir = tmp_path / "runs" / result.label / f"seed_{result.seed}"
        assert not (run_dir / "checkpoints.csv").exists()


def test_qffl_zero_rows_match_fedavg(tmp_path):
    summary = harness.run_experiment(small_config(), out_dir=tmp_path)
    for seed in (0, 1):
        avg = [r for r in summary.rows_for("fedavg") if r.seed == seed][0]
        q0 = [r for r in summary.rows_for("qffl_q0") if r.seed == seed][0]
        assert avg.report.accuracy == q0.report.accuracy
        assert avg.client_accuracies == q0.client_accuracies


def test_dataset_from_file_is_used(tmp_path):
    ds = generate_synthetic(SyntheticConfig(
        num_clients=2, num_classes=3, feature_dim=4, client_sizes=(24, 18),
        client_noise_scales=(1.0, 1.3), seed=5))
    split_dataset(ds, seed=5)
    path = tmp_path / "data.csv"
    write_dataset(ds, path)
    cfg = small_config(data_path=str(path))
    loaded = harness.dataset_for_seed(cfg, seed=0)
    assert loaded == ds


def test_effective_strategies_dedups_study_grid():
    cfg = small_config(
        strategies=(parse_strategy("fedauto(Q=1.5,M=3)"),),
        scaling_factor_study=True,
    )
    labels = [s.label() for s in harness.effective_strategies(cfg)]
    assert labels == [
        "fedauto_Q1.5_M3",
        "fedexp_m2",
        "fedexp_m3",
        "fedexp_m4",
        "fedauto_Q1.5_M2",
        "fedauto_Q1.5_M4",
    ]
    assert len(set(labels)) == len(labels)


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_summary(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    summary = harness.run_experiment(small_config(), out_dir=out)
    harness.emit_reports(summary, out)
    return summary, out


def test_in_fl_comparison_layout(small_summary):
    summary, out = small_summary
    rows = read_csv(out / "in_fl_comparison.csv")
    assert rows[0] == harness.IN_FL_BASE_COLUMNS + ["acc_client_0", "acc_client_1"]
    # per label: one row per seed plus a median row; then one qffl average row
    assert len(rows) == 1 + 3 * (2 + 1) + 1
    assert [r[0] for r in rows[1:4]] == ["fedavg"] * 3
    assert rows[3][1] == "median"
    assert rows[-1][0] == "qffl_average"
    for row in rows[1:]:
        for cell in row[2:]:
            float(cell)  # every metric cell parses as a number


def test_median_row_is_columnwise_median(small_summary):
    summary, out = small_summary
    rows = read_csv(out / "in_fl_comparison.csv")
    fedavg = [r for r in rows if r[0] == "fedavg"]
    per_seed = np.array([[float(v) for v in r[2:]] for r in fedavg[:-1]])
    median = np.array([float(v) for v in fedavg[-1][2:]])
    assert np.allclose(median, np.median(per_seed, axis=0), atol=0, rtol=0)


def test_gap_worst_layout(small_summary):
    summary, out = small_summary
    rows = read_csv(out / "gap_worst.csv")
    assert rows[0] == harness.GAP_WORST_HEADER
    # 6 runs x 2 stages x 2 groups
    assert len(rows) == 1 + 6 * 2 * 2
    assert {r[2] for r in rows[1:]} == {"in_fl", "post_fl"}


def test_selection_report_layout(small_summary):
    summary, out = small_summary
    rows = read_csv(out / "selection.csv")
    assert rows[0] == harness.SELECTION_REPORT_HEADER
    assert len(rows) == 1 + 6 * 2  # one row per run per client
    for row in rows[1:]:
        assert float(row[4]) <= float(row[3]) + 1e-12  # selected <= best


def test_summary_text_mentions_each_strategy(small_summary):
    summary, out = small_summary
    text = (out / "summary.txt").read_text()
    for label in summary.labels():
        assert label in text
    assert "post-FL personalization" in text


def test_scaling_study_has_exactly_six_rows(tmp_path):
    cfg = small_config(
        strategies=(parse_strategy("fedavg"),),
        seeds=(0,),
        scaling_factor_study=True,
        post_fl_enabled=False,
    )
    summary = harness.run_experiment(cfg, out_dir=tmp_path)
    harness.emit_reports(summary, tmp_path)
    rows = read_csv(tmp_path / "scaling_factor_study.csv")
    assert rows[0] == harness.SCALING_STUDY_HEADER
    assert len(rows) == 7
    assert [r[0] for r in rows[1:]] == [
        "fedexp_m2",
        "fedexp_m3",
        "fedexp_m4",
        "fedauto_Q1.5_M2",
        "fedauto_Q1.5_M3",
        "fedauto_Q1.5_M4",
    ]
    for row in rows[1:4]:
        assert float(row[3]) == float(row[0].rsplit("m", 1)[1])  # fixed m echoed


def test_no_scaling_study_file_when_disabled(small_summary):
    summary, out = small_summary
    assert not (out / "scaling_factor_study.csv").exists()


def test_emit_reports_rejects_empty_summary(tmp_path):
    summary = harness.ExperimentSummary(config=small_config())
    with pytest.raises(ValidationError):
        harness.emit_reports(summary, tmp_path)


def test_rerun_is_byte_identical(tmp_path):
    cfg = small_config()
    for sub in ("a", "b"):
        summary = harness.run_experiment(cfg, out_dir=tmp_path / sub)
        harness.emit_reports(summary, tmp_path / sub)
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


# ---------------------------------------------------------------------------
# external prediction logs
# ---------------------------------------------------------------------------


def write_predictions(path, rows, header=None):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header or harness.PREDICTIONS_CSV_HEADER)
        writer.writerows(rows)


def test_read_predictions_round_trip(tmp_path):
    path = tmp_path / "preds.csv"
    rows = [[0, 1, 1], [0, 2, 1], [1, 0, 0], [1, 1, 0]]
    write_predictions(path, rows)
    preds = harness.read_predictions(path)
    assert preds.groups.tolist() == [0, 0, 1, 1]
    assert preds.y_true.tolist() == [1, 2, 0, 1]
    assert preds.y_pred.tolist() == [1, 1, 0, 0]


def test_read_predictions_rejects_bad_header(tmp_path):
    path = tmp_path / "preds.csv"
    write_predictions(path, [[0, 0, 0]], header=["a", "b", "c"])
    with pytest.raises(ParseError) as err:
        harness.read_predictions(path)
    assert "header" in str(err.value)


def test_read_predictions_rejects_non_integer_with_line(tmp_path):
    path = tmp_path / "preds.csv"
    write_predictions(path, [[0, 1, 1], [0, "x", 1]])
    with pytest.raises(ParseError) as err:
        harness.read_predictions(path)
    assert "line 3" in str(err.value)


def test_read_predictions_rejects_short_row(tmp_path):
    path = tmp_path / "preds.csv"
    write_predictions(path, [[0, 1]])
    with pytest.raises(ParseError) as err:
        harness.read_predictions(path)
    assert "3 fields" in str(err.value)


def test_read_predictions_rejects_empty_and_header_only(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(ParseError):
        harness.read_predictions(empty)
    header_only = tmp_path / "header.csv"
    write_predictions(header_only, [])
    with pytest.raises(ParseError):
        harness.read_predictions(header_only)


def test_evaluate_predictions_writes_reports(tmp_path):
    preds = GroupedPredictions(
        np.array([0, 0, 0, 0, 0, 1, 1, 1, 1, 1]),
        np.array([1, 1, 1, 1, 0, 1, 0, 0, 0, 0]),
        np.array([1, 1, 1, 1, 1, 0, 0, 0, 0, 0]),
    )
    fairness = harness.evaluate_predictions(preds, tmp_path)
    expected = gap_worst_report(preds)
    assert fairness.accuracy == expected.accuracy
    assert (tmp_path / "fairness.csv").exists()
    payload = json.loads((tmp_path / "fairness.json").read_text())
    assert payload["overall_accuracy"] == expected.overall_accuracy
