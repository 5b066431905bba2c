"""Experiment orchestration: config files, strategy comparisons, reports.

A config file is flat ``key = value`` text with dotted section prefixes
(``data.*``, ``model.*``, ``fl.*``, ``post_fl.*``) plus top-level keys for
the run matrix (``strategies``, ``seeds``, ``output_dir``,
``scaling_factor_study``, ``desk_scale``). Unknown keys, type mismatches and
constraint violations are rejected with the offending key and line number.

run_experiment executes every (strategy, seed) pair on a shared per-seed
dataset: federated training, test-split evaluation, and (when enabled) the
post-training fine-tune/select stage, writing per-run CSV artifacts as each
run finishes. emit_reports then writes the comparison files:

    in_fl_comparison.csv     one row per (strategy, seed) plus a median row
                             per strategy and an average row over the qffl
                             variants when several q values ran
    scaling_factor_study.csv fixed exponent m in {2,3,4} vs automatic with
                             cap in {2,3,4} (exactly six rows, medians)
    gap_worst.csv            per-group fairness rows per run and stage
    selection.csv            per-client personalization outcomes
    summary.txt              plain-text digest (no timestamps)

Every emitted byte is a deterministic function of (config, seeds).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .data import (
    Dataset,
    SyntheticConfig,
    generate_synthetic,
    partitions_from_tags,
    read_dataset,
    split_dataset,
)
from .errors import ParseError, ValidationError
from .federated import (
    FlConfig,
    Strategy,
    build_clients,
    parse_strategy,
    run_in_fl,
    write_round_records,
)
from .metrics import (
    ClassificationReport,
    FairnessReport,
    GroupedPredictions,
    classification_report,
    confusion_matrix,
    gap_worst_report,
    write_fairness_csv,
    write_fairness_json,
)
from .personalize import (
    FinetuneConfig,
    SelectionResult,
    fine_tune_all,
    select_personalized_models,
    write_checkpoints,
    write_selection,
)

OUTPUT_DIR_ENV = "FEDFAIR_OUTPUT_DIR"

PREDICTIONS_CSV_HEADER = ["group", "true_label", "predicted_label"]

IN_FL_BASE_COLUMNS = [
    "strategy",
    "seed",
    "accuracy",
    "precision",
    "recall",
    "f1",
    "variance",
    "mean_gap",
    "mean_worst",
]
SCALING_STUDY_HEADER = ["strategy", "accuracy", "variance", "final_m"]
GAP_WORST_HEADER = ["strategy", "seed", "stage", "group", "accuracy", "gap", "worst"]
SELECTION_REPORT_HEADER = [
    "strategy",
    "seed",
    "client_id",
    "best_accuracy",
    "selected_accuracy",
    "selected_epoch",
]

# scaling-factor study grid: fixed exponents vs automatic caps
STUDY_FIXED_M = (2, 3, 4)
STUDY_AUTO_CAPS = (2, 3, 4)

DESK_PRESET = {
    "fl.rounds": "30",
    "fl.local_epochs": "3",
    "fl.batch_size": "32",
    "fl.base_lr": "0.03",
    "post_fl.base_lr": "0.003",
    "data.feature_dim": "16",
    "model.hidden_dims": "",
}

DEFAULT_STRATEGIES = (
    "fedavg",
    "fedequal",
    "fedloss",
    "fedexp(m=1)",
    "qffl(q=0)",
    "qffl(q=1)",
    "qffl(q=5)",
    "fedauto(Q=1.5,M=3)",
)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a full comparison run needs."""

    data: SyntheticConfig
    data_path: str | None
    hidden_dims: tuple[int, ...]
    fl: FlConfig  # template; strategy and seed are overridden per run
    post_fl_enabled: bool
    post_fl_epochs: int
    post_fl_delta: float
    post_fl_eval_every: int
    # None = fine-tune at the federated learning rate.
    post_fl_base_lr: float | None
    strategies: tuple[Strategy, ...]
    seeds: tuple[int, ...]
    output_dir: str
    scaling_factor_study: bool
    desk_scale: bool

    def __post_init__(self):
        if not self.strategies:
            raise ValidationError("at least one strategy is required")
        if not self.seeds:
            raise ValidationError("at least one seed is required")
        labels = [s.label() for s in self.strategies]
        if len(set(labels)) != len(labels):
            raise ValidationError(f"duplicate strategies: {labels}")
        if not self.post_fl_delta > 0:
            raise ValidationError(f"post_fl.delta must be positive, got {self.post_fl_delta}")


# ---------------------------------------------------------------------------
# config file parsing


def _convert_int(key, raw, line, minimum):
    try:
        value = int(raw)
    except ValueError:
        raise ParseError(f"{key}: expected an integer, got {raw!r}", line=line) from None
    if value < minimum:
        raise ParseError(f"{key}: must be >= {minimum}, got {value}", line=line)
    return value


def _convert_float(key, raw, line, minimum, exclusive=False, maximum=None):
    try:
        value = float(raw)
    except ValueError:
        raise ParseError(f"{key}: expected a number, got {raw!r}", line=line) from None
    if math.isnan(value):
        raise ParseError(f"{key}: must not be NaN", line=line)
    if value < minimum or (exclusive and value == minimum):
        bound = f"> {minimum}" if exclusive else f">= {minimum}"
        raise ParseError(f"{key}: must be {bound}, got {value}", line=line)
    if maximum is not None and value > maximum:
        raise ParseError(f"{key}: must be <= {maximum}, got {value}", line=line)
    return value


def _convert_bool(key, raw, line):
    lowered = raw.strip().lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ParseError(f"{key}: expected true or false, got {raw!r}", line=line)


def _split_top_level(text: str) -> list[str]:
    """Split on commas outside parentheses (strategy specs contain commas)."""
    parts, cur, depth = [], [], 0
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth = max(0, depth - 1)
        if ch == "," and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    parts.append("".join(cur))
    return [p.strip() for p in parts if p.strip()]


def _convert_int_list(key, raw, line, minimum, allow_empty=True):
    items = _split_top_level(raw)
    if not items and not allow_empty:
        raise ParseError(f"{key}: needs at least one value", line=line)
    return tuple(_convert_int(key, item, line, minimum) for item in items)


def _convert_float_list(key, raw, line, minimum, exclusive=False):
    items = _split_top_level(raw)
    return tuple(_convert_float(key, item, line, minimum, exclusive) for item in items)


def _convert_strategies(key, raw, line):
    specs = _split_top_level(raw)
    if not specs:
        raise ParseError(f"{key}: needs at least one strategy", line=line)
    out = []
    for spec in specs:
        try:
            out.append(parse_strategy(spec))
        except ValidationError as exc:
            raise ParseError(f"{key}: {exc}", line=line) from None
    return tuple(out)


_CONFIG_KEYS = {
    "data.num_clients": lambda k, v, n: _convert_int(k, v, n, 1),
    "data.num_classes": lambda k, v, n: _convert_int(k, v, n, 2),
    "data.feature_dim": lambda k, v, n: _convert_int(k, v, n, 1),
    "data.client_sizes": lambda k, v, n: _convert_int_list(k, v, n, 1, allow_empty=False),
    "data.client_shift_scale": lambda k, v, n: _convert_float(k, v, n, 0.0),
    "data.client_noise_scales": lambda k, v, n: _convert_float_list(k, v, n, 0.0, exclusive=True),
    "data.seed": lambda k, v, n: _convert_int(k, v, n, 0),
    "data.path": lambda k, v, n: v,
    "model.hidden_dims": lambda k, v, n: _convert_int_list(k, v, n, 1),
    "fl.rounds": lambda k, v, n: _convert_int(k, v, n, 1),
    "fl.local_epochs": lambda k, v, n: _convert_int(k, v, n, 1),
    "fl.batch_size": lambda k, v, n: _convert_int(k, v, n, 1),
    "fl.base_lr": lambda k, v, n: _convert_float(k, v, n, 0.0),
    "fl.client_fraction": lambda k, v, n: _convert_float(k, v, n, 0.0, exclusive=True, maximum=1.0),
    "fl.optimizer": lambda k, v, n: v,
    "fl.rebalance": _convert_bool,
    "fl.allow_m_decrease": _convert_bool,
    "post_fl.enabled": _convert_bool,
    "post_fl.epochs": lambda k, v, n: _convert_int(k, v, n, 1),
    "post_fl.delta": lambda k, v, n: _convert_float(k, v, n, 0.0, exclusive=True),
    "post_fl.eval_every": lambda k, v, n: _convert_int(k, v, n, 1),
    "post_fl.base_lr": lambda k, v, n: _convert_float(k, v, n, 0.0),
    "strategies": _convert_strategies,
    "seeds": lambda k, v, n: _convert_int_list(k, v, n, 0, allow_empty=False),
    "output_dir": lambda k, v, n: v,
    "scaling_factor_study": _convert_bool,
    "desk_scale": _convert_bool,
}


def parse_config_text(text: str, desk_scale: bool = False) -> ExperimentConfig:
    """Parse config text; desk_scale=True forces the desk preset on."""
    raw: dict[str, str] = {}
    lines: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ParseError(f"expected key = value, got {stripped!r}", line=lineno)
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ParseError(f"unknown key {key!r}", line=lineno)
        if key in raw:
            raise ParseError(f"duplicate key {key!r}", line=lineno)
        raw[key] = value
        lines[key] = lineno

    values = {key: _CONFIG_KEYS[key](key, raw[key], lines[key]) for key in raw}

    desk = desk_scale or values.get("desk_scale", False)
    if desk:
        for key, preset in DESK_PRESET.items():
            if key not in values:
                values[key] = _CONFIG_KEYS[key](key, preset, 0)

    def line_for(*keys):
        for key in keys:
            if key in lines:
                return lines[key]
        return 0

    num_clients = values.get("data.num_clients")
    sizes = values.get("data.client_sizes")
    if num_clients is None:
        num_clients = len(sizes) if sizes is not None else 6
    if sizes is None:
        if num_clients != 6:
            raise ParseError(
                "data.client_sizes: required when data.num_clients is not 6",
                line=line_for("data.num_clients"),
            )
        sizes = SyntheticConfig().client_sizes
    data_kwargs = {"num_clients": num_clients, "client_sizes": sizes}
    for cfg_key, field_name in (
        ("data.num_classes", "num_classes"),
        ("data.feature_dim", "feature_dim"),
        ("data.client_shift_scale", "client_shift_scale"),
        ("data.client_noise_scales", "client_noise_scales"),
        ("data.seed", "seed"),
    ):
        if cfg_key in values:
            data_kwargs[field_name] = values[cfg_key]
    try:
        data = SyntheticConfig(**data_kwargs)
    except ValidationError as exc:
        raise ParseError(f"data config invalid: {exc}", line=line_for("data.client_sizes", "data.num_clients")) from None

    optimizer = values.get("fl.optimizer", "adam")
    try:
        fl = FlConfig(
            rounds=values.get("fl.rounds", 100),
            local_epochs=values.get("fl.local_epochs", 5),
            batch_size=values.get("fl.batch_size", 128),
            base_lr=values.get("fl.base_lr", 1e-4),
            client_fraction=values.get("fl.client_fraction", 1.0),
            strategy=Strategy("fedauto"),
            optimizer=optimizer,
            rebalance=values.get("fl.rebalance", True),
            allow_m_decrease=values.get("fl.allow_m_decrease", False),
            seed=0,
        )
    except ValidationError as exc:
        raise ParseError(f"fl config invalid: {exc}", line=line_for("fl.optimizer", "fl.rounds")) from None

    strategies = values.get(
        "strategies", tuple(parse_strategy(s) for s in DEFAULT_STRATEGIES)
    )
    try:
        return ExperimentConfig(
            data=data,
            data_path=values.get("data.path"),
            hidden_dims=values.get("model.hidden_dims", ()),
            fl=fl,
            post_fl_enabled=values.get("post_fl.enabled", True),
            post_fl_epochs=values.get("post_fl.epochs", 100),
            post_fl_delta=values.get("post_fl.delta", 0.05),
            post_fl_eval_every=values.get("post_fl.eval_every", 1),
            post_fl_base_lr=values.get("post_fl.base_lr"),
            strategies=strategies,
            seeds=values.get("seeds", (0,)),
            output_dir=values.get("output_dir", "results"),
            scaling_factor_study=values.get("scaling_factor_study", False),
            desk_scale=desk,
        )
    except ValidationError as exc:
        raise ParseError(f"config invalid: {exc}", line=line_for("strategies", "seeds")) from None


def parse_config(path, desk_scale: bool = False) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config_text(fh.read(), desk_scale=desk_scale)


def strategy_spec(strategy: Strategy) -> str:
    """Parseable text form of a strategy (inverse of parse_strategy)."""
    if strategy.kind == "fedexp":
        return f"fedexp(m={strategy.m_fixed})"
    if strategy.kind == "qffl":
        return f"qffl(q={strategy.q!r})"
    if strategy.kind == "fedauto":
        return f"fedauto(Q={strategy.q_threshold!r},M={strategy.m_cap})"
    return strategy.kind


def serialize_config(cfg: ExperimentConfig) -> str:
    """Config text that parses back to an equal ExperimentConfig."""
    out = []
    out.append(f"data.num_clients = {cfg.data.num_clients}")
    out.append(f"data.num_classes = {cfg.data.num_classes}")
    out.append(f"data.feature_dim = {cfg.data.feature_dim}")
    out.append("data.client_sizes = " + ",".join(str(s) for s in cfg.data.client_sizes))
    out.append(f"data.client_shift_scale = {cfg.data.client_shift_scale!r}")
    out.append(
        "data.client_noise_scales = " + ",".join(repr(s) for s in cfg.data.client_noise_scales)
    )
    out.append(f"data.seed = {cfg.data.seed}")
    if cfg.data_path is not None:
        out.append(f"data.path = {cfg.data_path}")
    out.append("model.hidden_dims = " + ",".join(str(h) for h in cfg.hidden_dims))
    out.append(f"fl.rounds = {cfg.fl.rounds}")
    out.append(f"fl.local_epochs = {cfg.fl.local_epochs}")
    out.append(f"fl.batch_size = {cfg.fl.batch_size}")
    out.append(f"fl.base_lr = {cfg.fl.base_lr!r}")
    out.append(f"fl.client_fraction = {cfg.fl.client_fraction!r}")
    out.append(f"fl.optimizer = {cfg.fl.optimizer}")
    out.append(f"fl.rebalance = {str(cfg.fl.rebalance).lower()}")
    out.append(f"fl.allow_m_decrease = {str(cfg.fl.allow_m_decrease).lower()}")
    out.append(f"post_fl.enabled = {str(cfg.post_fl_enabled).lower()}")
    out.append(f"post_fl.epochs = {cfg.post_fl_epochs}")
    out.append(f"post_fl.delta = {cfg.post_fl_delta!r}")
    out.append(f"post_fl.eval_every = {cfg.post_fl_eval_every}")
    if cfg.post_fl_base_lr is not None:
        out.append(f"post_fl.base_lr = {cfg.post_fl_base_lr!r}")
    out.append("strategies = " + ", ".join(strategy_spec(s) for s in cfg.strategies))
    out.append("seeds = " + ",".join(str(s) for s in cfg.seeds))
    out.append(f"output_dir = {cfg.output_dir}")
    out.append(f"scaling_factor_study = {str(cfg.scaling_factor_study).lower()}")
    out.append(f"desk_scale = {str(cfg.desk_scale).lower()}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# experiment execution


@dataclass
class PostFlResult:
    """Outcome of fine-tuning plus selection for one run."""

    selection: SelectionResult
    baseline_val_accuracies: list[float]
    best_val_accuracies: list[float]  # peak over fine-tuned epochs (>= 1)
    test_accuracies: list[float]  # selected model on the client's own test split
    fairness: FairnessReport
    improved_clients: int


@dataclass
class RunResult:
    """Test-split evaluation of one (strategy, seed) training run."""

    strategy: Strategy
    seed: int
    label: str
    report: ClassificationReport
    client_accuracies: list[float]
    variance: float
    fairness: FairnessReport
    m_trajectory: list[int]
    post_fl: PostFlResult | None


@dataclass
class ExperimentSummary:
    config: ExperimentConfig
    results: list[RunResult] = field(default_factory=list)

    def rows_for(self, label: str) -> list[RunResult]:
        return [r for r in self.results if r.label == label]

    def labels(self) -> list[str]:
        seen = []
        for r in self.results:
            if r.label not in seen:
                seen.append(r.label)
        return seen


def effective_strategies(cfg: ExperimentConfig) -> list[Strategy]:
    """Configured strategies plus the scaling-study grid (deduplicated)."""
    out = list(cfg.strategies)
    if cfg.scaling_factor_study:
        labels = {s.label() for s in out}
        for extra in study_strategies():
            if extra.label() not in labels:
                out.append(extra)
                labels.add(extra.label())
    return out


def study_strategies() -> list[Strategy]:
    fixed = [Strategy("fedexp", m_fixed=m) for m in STUDY_FIXED_M]
    auto = [Strategy("fedauto", q_threshold=1.5, m_cap=cap) for cap in STUDY_AUTO_CAPS]
    return fixed + auto


def dataset_for_seed(cfg: ExperimentConfig, seed: int) -> Dataset:
    """Generate (or load) and split the dataset one run will train on."""
    if cfg.data_path is not None:
        ds = read_dataset(cfg.data_path)
        if not (np.any(ds.split == "val") or np.any(ds.split == "test")):
            split_dataset(ds, seed=seed)
        return ds
    ds = generate_synthetic(replace(cfg.data, seed=seed))
    split_dataset(ds, seed=seed)
    return ds


def _client_test_arrays(ds: Dataset) -> list[tuple[int, np.ndarray, np.ndarray]]:
    out = []
    for c in range(ds.num_clients):
        mine = ds.client_indices(c)
        test = mine[ds.split[mine] == "test"]
        if test.size == 0:
            raise ValidationError(f"client {c} has no test samples")
        out.append((c, ds.features[test], ds.labels[test]))
    return out


def _evaluate_global(ds: Dataset, params: nn.ModelParams) -> tuple[ClassificationReport, list[float], FairnessReport]:
    """Test-split metrics of a single shared model, grouped by client."""
    groups, y_true, y_pred, accs = [], [], [], []
    for cid, x, y in _client_test_arrays(ds):
        pred = nn.predict_labels(params, x)
        groups.append(np.full(y.shape[0], cid))
        y_true.append(y)
        y_pred.append(pred)
        accs.append(float(np.mean(pred == y)))
    grouped = GroupedPredictions(np.concatenate(groups), np.concatenate(y_true), np.concatenate(y_pred))
    cm = confusion_matrix(grouped.y_true, grouped.y_pred, ds.num_classes)
    return classification_report(cm), accs, gap_worst_report(grouped)


def _run_post_fl(
    ds: Dataset, cfg: ExperimentConfig, fl_cfg: FlConfig, global_params: nn.ModelParams, run_dir: Path
) -> PostFlResult:
    clients = build_clients(ds, partitions_from_tags(ds), fl_cfg)
    ft_cfg = FinetuneConfig(
        epochs=cfg.post_fl_epochs,
        batch_size=fl_cfg.batch_size,
        base_lr=fl_cfg.base_lr if cfg.post_fl_base_lr is None else cfg.post_fl_base_lr,
        eval_every=cfg.post_fl_eval_every,
        optimizer=fl_cfg.optimizer,
        seed=fl_cfg.seed,
    )
    histories = fine_tune_all(clients, global_params, ft_cfg, keep_params=True)
    selection = select_personalized_models(histories, cfg.post_fl_delta)
    write_checkpoints(histories, run_dir / "checkpoints.csv")
    write_selection(selection, run_dir / "selection.csv")

    baselines, bests = [], []
    for history in histories:
        baselines.append(history.accuracies[0])
        bests.append(max(acc for ep, acc in zip(history.epochs, history.accuracies) if ep > 0))
    improved = sum(1 for base, best in zip(baselines, bests) if best > base)

    # evaluate each client's selected checkpoint on that client's test split
    selected_params = {
        h.client_id: h.params_by_epoch[epoch]
        for h, epoch in zip(histories, selection.selected_epochs)
    }
    for history in histories:  # free unselected snapshots
        history.params_by_epoch = None
    groups, y_true, y_pred, test_accs = [], [], [], []
    for cid, x, y in _client_test_arrays(ds):
        pred = nn.predict_labels(selected_params[cid], x)
        groups.append(np.full(y.shape[0], cid))
        y_true.append(y)
        y_pred.append(pred)
        test_accs.append(float(np.mean(pred == y)))
    grouped = GroupedPredictions(np.concatenate(groups), np.concatenate(y_true), np.concatenate(y_pred))
    fairness = gap_worst_report(grouped)
    write_fairness_csv(fairness, run_dir / "fairness_post_fl.csv")

    return PostFlResult(
        selection=selection,
        baseline_val_accuracies=baselines,
        best_val_accuracies=bests,
        test_accuracies=test_accs,
        fairness=fairness,
        improved_clients=improved,
    )


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> ExperimentSummary:
    """Execute the full (strategy, seed) matrix, writing per-run artifacts."""
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    summary = ExperimentSummary(config=cfg)
    datasets: dict[int, Dataset] = {}
    for strategy in effective_strategies(cfg):
        for seed in cfg.seeds:
            if seed not in datasets:
                datasets[seed] = dataset_for_seed(cfg, seed)
            ds = datasets[seed]
            fl_cfg = replace(cfg.fl, strategy=strategy, seed=seed)
            spec = nn.ModelSpec(
                input_dim=ds.feature_dim,
                hidden_dims=cfg.hidden_dims,
                num_classes=ds.num_classes,
            )
            global_params, records = run_in_fl(ds, spec, fl_cfg)

            run_dir = out / "runs" / strategy.label() / f"seed_{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            write_round_records(records, run_dir / "rounds.csv")
            report, client_accs, fairness = _evaluate_global(ds, global_params)
            write_fairness_csv(fairness, run_dir / "fairness_in_fl.csv")
            write_fairness_json(fairness, run_dir / "fairness_in_fl.json")

            post = None
            if cfg.post_fl_enabled:
                post = _run_post_fl(ds, cfg, fl_cfg, global_params, run_dir)

            summary.results.append(
                RunResult(
                    strategy=strategy,
                    seed=seed,
                    label=strategy.label(),
                    report=report,
                    client_accuracies=client_accs,
                    variance=float(np.var(np.asarray(client_accs))),
                    fairness=fairness,
                    m_trajectory=[r.m for r in records],
                    post_fl=post,
                )
            )
    return summary


# ---------------------------------------------------------------------------
# report emission


def _fmt(x: float) -> str:
    return repr(float(x))


def _in_fl_row_values(result: RunResult) -> list[float]:
    return [
        result.report.accuracy,
        result.report.precision,
        result.report.recall,
        result.report.f1,
        result.variance,
        result.fairness.mean_gap,
        result.fairness.mean_worst,
        *result.client_accuracies,
    ]


def emit_reports(summary: ExperimentSummary, out_dir) -> None:
    """Write the comparison CSVs and the plain-text digest."""
    if not summary.results:
        raise ValidationError("summary has no results to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    num_clients = len(summary.results[0].client_accuracies)
    header = IN_FL_BASE_COLUMNS + [f"acc_client_{i}" for i in range(num_clients)]

    label_medians: dict[str, list[float]] = {}
    with open(out / "in_fl_comparison.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for label in summary.labels():
            rows = summary.rows_for(label)
            for result in rows:
                writer.writerow([label, result.seed] + [_fmt(v) for v in _in_fl_row_values(result)])
            median = [
                float(np.median([_in_fl_row_values(r)[i] for r in rows]))
                for i in range(len(header) - 2)
            ]
            label_medians[label] = median
            writer.writerow([label, "median"] + [_fmt(v) for v in median])
        qffl_labels = [l for l in summary.labels() if l.startswith("qffl_")]
        if len(qffl_labels) > 1:
            averaged = np.mean([label_medians[l] for l in qffl_labels], axis=0)
            writer.writerow(["qffl_average", "median"] + [_fmt(v) for v in averaged])

    if summary.config.scaling_factor_study:
        _emit_scaling_study(summary, label_medians, out / "scaling_factor_study.csv")

    with open(out / "gap_worst.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(GAP_WORST_HEADER)
        for result in summary.results:
            stages = [("in_fl", result.fairness)]
            if result.post_fl is not None:
                stages.append(("post_fl", result.post_fl.fairness))
            for stage, fairness in stages:
                for g, acc, gap, worst in zip(
                    fairness.groups, fairness.accuracy, fairness.gap, fairness.worst
                ):
                    writer.writerow(
                        [result.label, result.seed, stage, g, _fmt(acc), _fmt(gap), _fmt(worst)]
                    )

    with open(out / "selection.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SELECTION_REPORT_HEADER)
        for result in summary.results:
            if result.post_fl is None:
                continue
            sel = result.post_fl.selection
            for cid, best, acc, epoch in zip(
                sel.client_ids,
                result.post_fl.best_val_accuracies,
                sel.selected_accuracies,
                sel.selected_epochs,
            ):
                writer.writerow([result.label, result.seed, cid, _fmt(best), _fmt(acc), epoch])

    _emit_text_summary(summary, label_medians, out / "summary.txt")


def _emit_scaling_study(summary, label_medians, path) -> None:
    """Exactly one median row per study configuration (6 rows)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCALING_STUDY_HEADER)
        for strategy in study_strategies():
            label = strategy.label()
            rows = summary.rows_for(label)
            median = label_medians[label]
            final_m = float(np.median([r.m_trajectory[-1] for r in rows]))
            writer.writerow([label, _fmt(median[0]), _fmt(median[4]), _fmt(final_m)])


def _emit_text_summary(summary, label_medians, path) -> None:
    cfg = summary.config
    lines = ["experiment summary", "=================="]
    lines.append(
        f"clients: {cfg.data.num_clients}  classes: {cfg.data.num_classes}  "
        f"features: {cfg.data.feature_dim}"
    )
    lines.append(
        f"rounds: {cfg.fl.rounds}  local epochs: {cfg.fl.local_epochs}  "
        f"batch: {cfg.fl.batch_size}  lr: {cfg.fl.base_lr:g}  optimizer: {cfg.fl.optimizer}"
    )
    lines.append("seeds: " + ", ".join(str(s) for s in cfg.seeds))
    lines.append("")
    lines.append("in-FL test metrics, medians over seeds")
    lines.append(f"{'strategy':<24}{'accuracy':>10}{'variance':>12}{'mean_gap':>10}{'mean_worst':>12}")
    for label in summary.labels():
        med = label_medians[label]
        lines.append(f"{label:<24}{med[0]:>10.6f}{med[4]:>12.6f}{med[5]:>10.6f}{med[6]:>12.6f}")
    auto_rows = [r for r in summary.results if r.strategy.kind == "fedauto"]
    if auto_rows:
        lines.append("")
        lines.append("scaling factor trajectories")
        for result in auto_rows:
            lines.append(
                f"{result.label} seed {result.seed}: "
                + ",".join(str(m) for m in result.m_trajectory)
            )
    post_rows = [r for r in summary.results if r.post_fl is not None]
    if post_rows:
        lines.append("")
        lines.append("post-FL personalization")
        for result in post_rows:
            sel = result.post_fl.selection
            status = "feasible" if sel.feasible else "infeasible"
            lines.append(
                f"{result.label} seed {result.seed}: spread {sel.spread:.6f} ({status}), "
                f"improved {result.post_fl.improved_clients}/{len(sel.client_ids)} clients, "
                f"post-FL variance {result.post_fl.fairness.variance:.6f}"
            )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# external prediction logs (evaluate subcommand)


def read_predictions(path) -> GroupedPredictions:
    """Parse a (group, true_label, predicted_label) CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file", line=1)
    if rows[0] != PREDICTIONS_CSV_HEADER:
        raise ParseError(
            f"expected header {','.join(PREDICTIONS_CSV_HEADER)}, got {','.join(rows[0])}", line=1
        )
    groups, y_true, y_pred = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise ParseError(f"expected 3 fields, got {len(row)}", line=lineno)
        try:
            g, t, p = (int(v) for v in row)
        except ValueError:
            raise ParseError(f"non-integer field in {row}", line=lineno) from None
        if g < 0 or t < 0 or p < 0:
            raise ParseError("group and labels must be nonnegative", line=lineno)
        groups.append(g)
        y_true.append(t)
        y_pred.append(p)
    if not groups:
        raise ParseError("no prediction rows", line=2)
    return GroupedPredictions(np.array(groups), np.array(y_true), np.array(y_pred))


def evaluate_predictions(preds: GroupedPredictions, out_dir) -> FairnessReport:
    """Metrics for an external prediction log; writes fairness.csv/json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fairness = gap_worst_report(preds)
    write_fairness_csv(fairness, out / "fairness.csv")
    write_fairness_json(fairness, out / "fairness.json")
    return fairness
