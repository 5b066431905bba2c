"""Post-training personalization: per-client fine-tuning and model selection.

After federated training every client fine-tunes the global model on its own
data, recording a validation-accuracy checkpoint trail (epoch 0 is the
untouched global model). Deploying each client's peak checkpoint maximizes
accuracy but lets the accuracy spread between clients grow; selection
instead picks one checkpoint per client so that all selected accuracies fit
inside a band of width delta, maximizing the worst client's accuracy within
that constraint.

Selection sweeps candidate bands anchored at every observed accuracy. For a
band [a, a + delta] each client contributes its best checkpoint inside the
band; a band covering every client is a feasible selection. Any selection
whose accuracies span at most delta fits in the band anchored at its own
minimum, so the sweep is exhaustive. Among feasible selections the sweep
maximizes the minimum accuracy, then the mean, then prefers fewer total
fine-tuning epochs. When no band covers every client the constraint is
unsatisfiable; the fallback returns the selection with the smallest
achievable spread and flags the result infeasible.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import TrainingDivergedError, ValidationError
from .federated import ClientState
from .rng import FINETUNE, substream

CHECKPOINT_CSV_HEADER = ["client_id", "epoch", "val_accuracy"]
SELECTION_CSV_HEADER = ["client_id", "selected_epoch", "selected_accuracy"]

_EDGE_TOL = 1e-12  # inclusive band edges under float noise


@dataclass(frozen=True)
class FinetuneConfig:
    """Per-client fine-tuning schedule."""

    epochs: int = 100
    batch_size: int = 128
    base_lr: float = 1e-4
    eval_every: int = 1
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValidationError("epochs, batch_size and eval_every must be >= 1")
        if self.base_lr < 0:
            raise ValidationError(f"base_lr must be nonnegative, got {self.base_lr}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.seed < 0:
            raise ValidationError("seed must be nonnegative")


@dataclass
class CheckpointHistory:
    """Validation accuracy at each recorded fine-tuning epoch for one client.

    Epoch 0, when present, is the incoming global model before any local
    steps. params_by_epoch optionally keeps a parameter snapshot per
    recorded epoch so a selected checkpoint can actually be deployed.
    """

    client_id: int
    epochs: list[int]
    accuracies: list[float]
    params_by_epoch: dict[int, nn.ModelParams] | None = None

    def __post_init__(self):
        if self.client_id < 0:
            raise ValidationError("client_id must be nonnegative")
        if not self.epochs or len(self.epochs) != len(self.accuracies):
            raise ValidationError("epochs and accuracies must be aligned and nonempty")
        if any(b <= a for a, b in zip(self.epochs, self.epochs[1:])):
            raise ValidationError("checkpoint epochs must be strictly increasing")
        if any(not 0.0 <= a <= 1.0 for a in self.accuracies):
            raise ValidationError("accuracies must lie in [0, 1]")
        if self.params_by_epoch is not None and sorted(self.params_by_epoch) != self.epochs:
            raise ValidationError("params_by_epoch keys must match the recorded epochs")

    @property
    def baseline_accuracy(self) -> float | None:
        """Accuracy of the global model before fine-tuning (epoch 0), if recorded."""
        return self.accuracies[0] if self.epochs[0] == 0 else None

    def peak(self) -> tuple[int, float]:
        """(epoch, accuracy) of the best checkpoint; earliest epoch on ties."""
        best = max(self.accuracies)
        return self.epochs[self.accuracies.index(best)], best


def fine_tune_client(
    client: ClientState,
    start_params: nn.ModelParams,
    cfg: FinetuneConfig,
    keep_params: bool = False,
) -> CheckpointHistory:
    """Train the global model on one client's data, checkpointing as we go.

    Mini-batch training with a cosine-decayed learning rate over the epoch
    budget. Validation accuracy is recorded at epoch 0, every eval_every
    epochs, and at the final epoch. The caller's start_params are not
    mutated.
    """
    rng = substream(cfg.seed, FINETUNE, client.client_id)
    params = start_params.copy()
    opt = nn.make_optimizer(cfg.optimizer, params)
    n = client.train_x.shape[0]
    batch = min(cfg.batch_size, n)

    epochs = [0]
    accs = [nn.accuracy_of(params, client.val_x, client.val_y)]
    snapshots = {0: params.copy()} if keep_params else None

    for epoch in range(1, cfg.epochs + 1):
        lr = nn.cosine_lr(epoch - 1, cfg.epochs, cfg.base_lr)
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            grads, loss = nn.backward_grads(params, client.train_x[idx], client.train_targets[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"client {client.client_id}: non-finite loss at fine-tune epoch {epoch}"
                )
            params = nn.optimizer_step(params, grads, opt, lr)
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            epochs.append(epoch)
            accs.append(nn.accuracy_of(params, client.val_x, client.val_y))
            if keep_params:
                snapshots[epoch] = params.copy()

    return CheckpointHistory(client.client_id, epochs, accs, snapshots)


def fine_tune_all(
    clients: list[ClientState],
    global_params: nn.ModelParams,
    cfg: FinetuneConfig,
    keep_params: bool = False,
) -> list[CheckpointHistory]:
    """Fine-tune every client from the same global model, in client-id order."""
    ordered = sorted(clients, key=lambda c: c.client_id)
    return [fine_tune_client(c, global_params, cfg, keep_params) for c in ordered]


@dataclass
class SelectionResult:
    """One selected checkpoint per client plus the resulting accuracy spread."""

    client_ids: list[int]
    selected_epochs: list[int]
    selected_accuracies: list[float]
    baseline_accuracies: list[float | None]
    spread: float
    feasible: bool
    delta: float


def _pick_in_band(history: CheckpointHistory, lo: float, hi: float) -> tuple[int, float] | None:
    """Best checkpoint with accuracy in [lo, hi]; earliest epoch on ties."""
    best = None
    for epoch, acc in zip(history.epochs, history.accuracies):
        if lo - _EDGE_TOL <= acc <= hi + _EDGE_TOL:
            if best is None or acc > best[1]:
                best = (epoch, acc)
    return best


def select_personalized_models(
    histories: list[CheckpointHistory], delta: float = 0.05
) -> SelectionResult:
    """Pick one checkpoint per client with accuracy spread at most delta.

    Maximizes the minimum selected accuracy, breaking ties by higher mean
    accuracy and then by fewer total selected epochs. If no selection can
    fit inside a band of width delta, returns the minimum-spread selection
    with feasible=False.
    """
    if not histories:
        raise ValidationError("at least one checkpoint history is required")
    ids = [h.client_id for h in histories]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate client ids in histories")
    if delta < 0:
        raise ValidationError(f"delta must be nonnegative, got {delta}")

    best_key, best_picks = None, None
    anchors = sorted({acc for h in histories for acc in h.accuracies})
    for anchor in anchors:
        picks = []
        for history in histories:
            pick = _pick_in_band(history, anchor, anchor + delta)
            if pick is None:
                picks = None
                break
            picks.append(pick)
        if picks is None:
            continue
        accs = [acc for _, acc in picks]
        key = (min(accs), sum(accs) / len(accs), -sum(ep for ep, _ in picks))
        if best_key is None or key > best_key:
            best_key, best_picks = key, picks

    feasible = best_picks is not None
    if not feasible:
        best_picks = _min_spread_picks(histories)

    accs = [acc for _, acc in best_picks]
    return SelectionResult(
        client_ids=ids,
        selected_epochs=[ep for ep, _ in best_picks],
        selected_accuracies=accs,
        baseline_accuracies=[h.baseline_accuracy for h in histories],
        spread=max(accs) - min(accs),
        feasible=feasible,
        delta=delta,
    )


def _min_spread_picks(histories: list[CheckpointHistory]) -> list[tuple[int, float]]:
    """Selection minimizing the accuracy spread (smallest covering band).

    Classic smallest-range scan over the merged, sorted checkpoint
    accuracies: every maximal band that still covers all clients is a
    candidate; picks inside a band follow the same best-accuracy rule as
    the feasible path. Ties prefer higher minimum, then higher mean, then
    fewer total epochs.
    """
    entries = sorted(
        (acc, idx)
        for idx, history in enumerate(histories)
        for acc in history.accuracies
    )
    coverage = Counter()
    covered = 0
    best_key, best_picks = None, None
    left = 0
    for right, (acc_hi, idx_hi) in enumerate(entries):
        coverage[idx_hi] += 1
        if coverage[idx_hi] == 1:
            covered += 1
        while covered == len(histories):
            lo, hi = entries[left][0], acc_hi
            picks = [_pick_in_band(h, lo, hi) for h in histories]
            accs = [acc for _, acc in picks]
            key = (
                max(accs) - min(accs),
                -min(accs),
                -(sum(accs) / len(accs)),
                sum(ep for ep, _ in picks),
            )
            if best_key is None or key < best_key:
                best_key, best_picks = key, picks
            idx_lo = entries[left][1]
            coverage[idx_lo] -= 1
            if coverage[idx_lo] == 0:
                covered -= 1
            left += 1
    return best_picks


def write_checkpoints(histories: list[CheckpointHistory], path) -> None:
    """One CSV row per recorded (client, epoch) checkpoint."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CHECKPOINT_CSV_HEADER)
        for history in histories:
            for epoch, acc in zip(history.epochs, history.accuracies):
                writer.writerow([history.client_id, epoch, repr(acc)])


def read_checkpoints(path) -> list[CheckpointHistory]:
    """Rebuild per-client histories (without parameter snapshots) from CSV."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CHECKPOINT_CSV_HEADER:
            raise ValidationError(f"bad checkpoint header in {path}")
        grouped: dict[int, list[tuple[int, float]]] = {}
        for row in reader:
            grouped.setdefault(int(row["client_id"]), []).append(
                (int(row["epoch"]), float(row["val_accuracy"]))
            )
    histories = []
    for cid in sorted(grouped):
        points = sorted(grouped[cid])
        histories.append(
            CheckpointHistory(cid, [ep for ep, _ in points], [acc for _, acc in points])
        )
    return histories


def write_selection(result: SelectionResult, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SELECTION_CSV_HEADER)
        for cid, epoch, acc in zip(
            result.client_ids, result.selected_epochs, result.selected_accuracies
        ):
            writer.writerow([cid, epoch, repr(acc)])


def read_selection(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SELECTION_CSV_HEADER:
            raise ValidationError(f"bad selection header in {path}")
        return [
            {
                "client_id": int(row["client_id"]),
                "selected_epoch": int(row["selected_epoch"]),
                "selected_accuracy": float(row["selected_accuracy"]),
            }
            for row in reader
        ]
