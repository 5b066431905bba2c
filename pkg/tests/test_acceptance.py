"""Acceptance gate: nine end-to-end checks with pinned tolerances.

Each test prints one `criterion N: PASS/FAIL` line (visible without -s)
and then asserts, so a full run reads as a checklist. Oracles are
reimplemented here from first principles rather than imported from the
package under test.
"""

import csv
import math
import time
from itertools import product
from pathlib import Path

import numpy as np
import pytest

from fedfair import cli, harness, nn
from fedfair.data import SyntheticConfig, generate_synthetic, split_dataset
from fedfair.federated import (
    AdjusterState,
    FlConfig,
    Strategy,
    compute_aggregation_weights,
    run_in_fl,
    update_scaling_factor,
)
from fedfair.metrics import GroupedPredictions, accuracy_variance, gap_worst_report
from fedfair.personalize import CheckpointHistory, select_personalized_models


@pytest.fixture
def announce(capsys):
    def _report(num, ok, detail):
        line = f"criterion {num}: {'PASS' if ok else 'FAIL'} - {detail}"
        with capsys.disabled():
            print(line, flush=True)
        assert ok, line

    return _report


def tiny_split_dataset(seed=0):
    ds = generate_synthetic(SyntheticConfig(
        num_clients=2, num_classes=3, feature_dim=4, client_sizes=(24, 18),
        client_shift_scale=1.0, client_noise_scales=(1.0, 1.4), seed=seed))
    split_dataset(ds, seed=seed)
    return ds


def tree_bytes(root):
    out = {}
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root))] = path.read_bytes()
    return out


# ---------------------------------------------------------------------------
# 1. metric oracle against the published per-group accuracies
# ---------------------------------------------------------------------------


def test_criterion_1_variance_oracle(announce):
    value = accuracy_variance([0.611, 0.612, 0.658, 0.653, 0.535, 0.467])
    err = abs(value - 0.00461)
    announce(1, err <= 5e-5, f"accuracy_variance = {value:.6f}, |err| = {err:.2e} <= 5e-5")


# ---------------------------------------------------------------------------
# 2. weight-function property suite (1000 random loss vectors, < 10 s)
# ---------------------------------------------------------------------------


def test_criterion_2_weight_properties(announce):
    rng = np.random.default_rng(2024)
    start = time.monotonic()
    fedavg = Strategy("fedavg")
    qffl0 = Strategy("qffl", q=0.0)
    for trial in range(1000):
        c = int(rng.integers(1, 11))
        losses = np.zeros(c) if trial % 97 == 0 else rng.uniform(0.0, 4.0, size=c)
        counts = rng.integers(1, 300, size=c).astype(np.float64)
        adjuster = AdjusterState(m=int(rng.integers(1, 4)))
        strategies = [
            fedavg,
            Strategy("fedequal"),
            Strategy("fedloss"),
            Strategy("fedexp", m_fixed=1),
            Strategy("fedexp", m_fixed=2),
            Strategy("fedexp", m_fixed=3),
            qffl0,
            Strategy("qffl", q=1.0),
            Strategy("qffl", q=5.0),
            Strategy("fedauto"),
        ]
        perm = rng.permutation(c)
        for strategy in strategies:
            w = compute_aggregation_weights(strategy, losses, counts, adjuster)
            assert w.min() >= 0.0
            assert abs(w.sum() - 1.0) <= 1e-12
            w_perm = compute_aggregation_weights(
                strategy, losses[perm], counts[perm], adjuster)
            assert np.allclose(w_perm, w[perm], atol=1e-12)

        # loss-monotonicity with the count factor held equal; q = 0 is
        # deliberately loss-insensitive so it sits out
        ones = np.ones(c)
        loss_sensitive = [s for s in strategies[2:] if not (s.kind == "qffl" and s.q == 0.0)]
        for strategy in loss_sensitive:
            w = compute_aggregation_weights(strategy, losses, ones, adjuster)
            order = np.argsort(losses, kind="stable")
            assert np.all(np.diff(w[order]) >= -1e-15)
            if losses.max() > losses.min():
                assert w[order[-1]] > w[order[0]]

        # q = 0 degenerates to plain sample-count weighting, bit for bit
        assert np.array_equal(
            compute_aggregation_weights(qffl0, losses, counts),
            compute_aggregation_weights(fedavg, losses, counts),
        )
    elapsed = time.monotonic() - start
    announce(2, elapsed < 10.0,
             f"1000 loss vectors x 10 strategies satisfied all properties in {elapsed:.2f}s < 10s")


# ---------------------------------------------------------------------------
# 3. scaling-factor controller suite
# ---------------------------------------------------------------------------


def test_criterion_3_m_controller(announce):
    rng = np.random.default_rng(3)
    for _ in range(300):
        q = float(rng.uniform(1.05, 5.0))
        cap = int(rng.integers(1, 5))
        adjuster = AdjusterState()
        for _ in range(30):
            c = int(rng.integers(2, 9))
            losses = np.zeros(c) if rng.random() < 0.05 else rng.uniform(0.0, 3.0, size=c)
            before = adjuster.m
            adjuster = update_scaling_factor(adjuster, losses, q, cap)
            should = losses.max() > q * losses.min() and before < cap
            assert adjuster.m == before + (1 if should else 0)
            assert adjuster.m <= cap
            assert adjuster.m >= before

    # unreachable threshold = the controller never escalates, so the automatic
    # strategy must trace fedexp(m=1) bit for bit on the same seed
    ds = tiny_split_dataset()
    spec = nn.ModelSpec(4, (), 3)
    cfg = FlConfig(rounds=5, local_epochs=1, batch_size=8, base_lr=0.05,
                   strategy=Strategy("fedauto", q_threshold=np.inf, m_cap=3),
                   optimizer="sgd", seed=11)
    auto_params, auto_records = run_in_fl(ds, spec, cfg)
    cfg_exp = FlConfig(rounds=5, local_epochs=1, batch_size=8, base_lr=0.05,
                       strategy=Strategy("fedexp", m_fixed=1),
                       optimizer="sgd", seed=11)
    exp_params, exp_records = run_in_fl(ds, spec, cfg_exp)
    identical = all(
        np.array_equal(a.weights, e.weights) and np.array_equal(a.losses, e.losses)
        for a, e in zip(auto_records, exp_records)
    ) and all(
        np.array_equal(a, e)
        for a, e in zip(auto_params.arrays(), exp_params.arrays())
    )
    announce(3, identical,
             "300 random sequences obey the escalation rule; "
             "unreachable threshold matches fedexp(m=1) bit for bit")


# ---------------------------------------------------------------------------
# 4. aggregation against an elementwise brute force
# ---------------------------------------------------------------------------


def test_criterion_4_aggregation_oracle(announce):
    from fedfair.federated import aggregate_global

    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        dims = [int(rng.integers(1, 7))]
        if rng.random() < 0.5:
            dims.append(int(rng.integers(1, 6)))
        dims.append(int(rng.integers(1, 5)))
        c = int(rng.integers(1, 7))
        clients = [
            nn.ModelParams([
                (rng.normal(size=(dims[i], dims[i + 1])), rng.normal(size=dims[i + 1]))
                for i in range(len(dims) - 1)
            ])
            for _ in range(c)
        ]
        weights = rng.uniform(0.05, 1.0, size=c)
        weights = weights / weights.sum()
        result = aggregate_global(clients, weights)
        for arr_index, arr in enumerate(result.arrays()):
            client_arrays = [list(p.arrays())[arr_index] for p in clients]
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                expected = math.fsum(
                    w * a[idx] for w, a in zip(weights, client_arrays))
                worst = max(worst, abs(arr[idx] - expected))
    announce(4, worst <= 1e-12,
             f"100 random parameter sets, max elementwise error {worst:.2e} <= 1e-12")


# ---------------------------------------------------------------------------
# 5. analytic gradients against central finite differences
# ---------------------------------------------------------------------------


def test_criterion_5_gradient_check(announce):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        din = int(rng.integers(1, 9))
        classes = int(rng.integers(2, 6))
        hidden = (int(rng.integers(1, 7)),) if rng.random() < 0.5 else ()
        spec = nn.ModelSpec(din, hidden, classes)
        params = nn.init_params(spec, seed=int(rng.integers(0, 10_000)))
        n = int(rng.integers(1, 7))
        x = rng.normal(size=(n, din))
        targets = nn.one_hot(rng.integers(0, classes, size=n), classes)
        analytic, _ = nn.backward_grads(params, x, targets)
        numeric = nn.finite_diff_grad(params, x, targets, h=1e-5)
        for a, g in zip(analytic.arrays(), numeric.arrays()):
            rel = np.abs(a - g) / (np.abs(a) + np.abs(g) + 1e-8)
            worst = max(worst, float(rel.max()))
    announce(5, worst < 1e-4,
             f"100 random models, max relative gradient error {worst:.2e} < 1e-4")


# ---------------------------------------------------------------------------
# 6. desk-scale fairness trend (automatic weighting vs plain averaging)
# ---------------------------------------------------------------------------


def test_criterion_6_desk_scale_fairness(announce, tmp_path):
    start = time.monotonic()
    cfg = harness.parse_config_text(
        "strategies = fedavg, fedauto(Q=1.5,M=3)\n"
        "seeds = 0, 1, 2\n"
        "post_fl.enabled = false\n"
        "desk_scale = true\n"
    )
    summary = harness.run_experiment(cfg, out_dir=tmp_path)
    med = {}
    for label in ("fedavg", "fedauto_Q1.5_M3"):
        rows = summary.rows_for(label)
        assert len(rows) == 3
        med[label] = (
            float(np.median([r.variance for r in rows])),
            float(np.median([r.report.accuracy for r in rows])),
        )
    elapsed = time.monotonic() - start
    var_avg, acc_avg = med["fedavg"]
    var_auto, acc_auto = med["fedauto_Q1.5_M3"]
    ok = var_auto < var_avg and abs(acc_auto - acc_avg) <= 0.02 and elapsed < 300.0
    announce(6, ok,
             f"median variance {var_auto:.5f} < {var_avg:.5f}, "
             f"median accuracy {acc_auto:.4f} vs {acc_avg:.4f} "
             f"(|diff| = {abs(acc_auto - acc_avg):.4f} <= 0.02), {elapsed:.1f}s < 300s")


# ---------------------------------------------------------------------------
# 7. post-FL suite: fine-tune improvement, constrained selection, peak fallback
# ---------------------------------------------------------------------------


def brute_force_selection(histories, delta):
    """Exhaustive reference for the checkpoint selector (small instances)."""
    candidates = [list(zip(h.epochs, h.accuracies)) for h in histories]
    best_feasible = None  # (min, sum, -total_epochs)
    min_spread = None
    for combo in product(*candidates):
        accs = [acc for _, acc in combo]
        spread = max(accs) - min(accs)
        epochs_total = sum(epoch for epoch, _ in combo)
        if min_spread is None or spread < min_spread:
            min_spread = spread
        if spread <= delta:
            key = (min(accs), math.fsum(accs), -epochs_total)
            if best_feasible is None or key > best_feasible:
                best_feasible = key
    return best_feasible, min_spread


def test_criterion_7_post_fl_suite(announce, tmp_path):
    # (a) fine-tuning lifts validation accuracy for at least 5 of 6 clients
    cfg = harness.parse_config_text(
        "strategies = fedauto(Q=1.5,M=3)\nseeds = 0\ndesk_scale = true\n")
    summary = harness.run_experiment(cfg, out_dir=tmp_path)
    post = summary.results[0].post_fl
    improved = post.improved_clients
    part_a = improved >= 5

    # (b) selection is spread-feasible whenever possible and matches an
    # exhaustive search on every small instance
    rng = np.random.default_rng(7)
    part_b = True
    for _ in range(200):
        n_clients = int(rng.integers(1, 5))
        histories = []
        for cid in range(n_clients):
            k = int(rng.integers(1, 11))
            epochs = sorted(rng.choice(np.arange(0, 31), size=k, replace=False).tolist())
            accs = (rng.integers(0, 33, size=k) / 32.0).tolist()
            histories.append(CheckpointHistory(cid, epochs, accs))
        delta = float(rng.choice([1 / 32, 3 / 32, 0.05, 0.1]))
        result = select_personalized_models(histories, delta)
        best, min_spread = brute_force_selection(histories, delta)
        for h, epoch, acc in zip(histories, result.selected_epochs, result.selected_accuracies):
            assert (epoch, acc) in list(zip(h.epochs, h.accuracies))
        if best is not None:
            ok = (result.feasible
                  and result.spread <= delta + 1e-12
                  and min(result.selected_accuracies) == best[0]
                  and math.fsum(result.selected_accuracies) == best[1])
        else:
            ok = (not result.feasible) and result.spread == min_spread
        part_b = part_b and ok

    # (c) an unbounded band returns every client's peak checkpoint
    part_c = True
    for _ in range(50):
        histories = []
        for cid in range(int(rng.integers(1, 6))):
            k = int(rng.integers(1, 11))
            epochs = sorted(rng.choice(np.arange(0, 31), size=k, replace=False).tolist())
            accs = (rng.integers(0, 33, size=k) / 32.0).tolist()
            histories.append(CheckpointHistory(cid, epochs, accs))
        result = select_personalized_models(histories, delta=np.inf)
        for h, epoch, acc in zip(histories, result.selected_epochs, result.selected_accuracies):
            part_c = part_c and (epoch, acc) == h.peak()

    announce(7, part_a and part_b and part_c,
             f"fine-tuning improved {improved}/6 clients (>= 5); "
             "200 selection instances match brute force; "
             "unbounded band returns per-client peaks")


# ---------------------------------------------------------------------------
# 8. gap/worst fairness oracle
# ---------------------------------------------------------------------------


def test_criterion_8_fairness_oracle(announce):
    rng = np.random.default_rng(8)
    worst_err = 0.0
    for _ in range(100):
        n_groups = int(rng.integers(2, 7))
        sizes = rng.integers(2, 40, size=n_groups)
        groups = np.repeat(np.arange(n_groups), sizes)
        n = groups.shape[0]
        classes = int(rng.integers(2, 5))
        y_true = rng.integers(0, classes, size=n)
        y_pred = rng.integers(0, classes, size=n)
        report = gap_worst_report(GroupedPredictions(groups, y_true, y_pred))
        correct = (y_true == y_pred).astype(float)
        for i, g in enumerate(report.groups):
            inside = groups == g
            acc = math.fsum(correct[inside]) / inside.sum()
            rest = math.fsum(correct[~inside]) / (~inside).sum()
            worst_err = max(
                worst_err,
                abs(report.accuracy[i] - acc),
                abs(report.gap[i] - abs(acc - rest)),
                abs(report.worst[i] - min(acc, rest)),
            )

    # two-group closed form: accuracies 0.8 and 0.6
    groups = np.repeat([0, 1], 10)
    y_true = np.zeros(20, dtype=np.int64)
    y_pred = np.r_[np.zeros(8), np.ones(2), np.zeros(6), np.ones(4)].astype(np.int64)
    report = gap_worst_report(GroupedPredictions(groups, y_true, y_pred))
    closed_form = (
        abs(report.accuracy[0] - 0.8) <= 1e-12
        and abs(report.accuracy[1] - 0.6) <= 1e-12
        and abs(report.gap[0] - 0.2) <= 1e-12
        and abs(report.worst[0] - 0.6) <= 1e-12
    )
    announce(8, worst_err <= 1e-12 and closed_form,
             f"100 random fixtures, max |error| {worst_err:.2e} <= 1e-12; "
             "0.8/0.6 gives gap 0.2 and worst 0.6")


# ---------------------------------------------------------------------------
# 9. byte-level determinism of the CLI
# ---------------------------------------------------------------------------


def test_criterion_9_cli_determinism(announce, tmp_path):
    config = tmp_path / "fixed.cfg"
    config.write_text(
        "data.num_clients = 2\n"
        "data.client_sizes = 24,18\n"
        "data.num_classes = 3\n"
        "data.feature_dim = 4\n"
        "fl.rounds = 3\n"
        "fl.local_epochs = 1\n"
        "fl.batch_size = 8\n"
        "fl.base_lr = 0.05\n"
        "post_fl.epochs = 3\n"
        "strategies = fedavg, fedauto(Q=1.5,M=3)\n"
        "seeds = 0\n"
    )
    for sub in ("first", "second"):
        code = cli.main(["run", "--config", str(config),
                         "--out-dir", str(tmp_path / sub), "--seed", "7"])
        assert code == 0
    first = tree_bytes(tmp_path / "first")
    second = tree_bytes(tmp_path / "second")
    identical = first == second
    announce(9, identical,
             f"two `run --seed 7` invocations, {len(first)} files byte-identical")
