"""Federated training loop with loss-based aggregation weighting.

One round: every (selected) client copies the global model, trains E local
epochs on its own data, and reports back its updated parameters and final-
epoch mean training loss. The server turns the reported losses into
aggregation weights and forms the new global model as the weighted sum of
client parameters.

Weighting strategies:

    fedavg    w_c proportional to the client's (pre-resampling) sample count
    fedequal  uniform 1/|C|
    fedloss   w_c proportional to the reported loss
    fedexp    w_c proportional to exp(m * loss), fixed integer m
    qffl      w_c proportional to count * loss^q (static reweighting
              approximation of q-FFL; exact FedAvg at q = 0)
    fedauto   fedexp whose m starts at 1 and escalates by 1 whenever the
              round's max loss exceeds q_threshold times the min loss,
              capped at m_cap and never decreasing (optional decrease flag
              for exploration)

All stochasticity is drawn from streams keyed by (seed, purpose, round,
client), so client updates may run in any order, or concurrently, and still
reproduce bit-identical results; aggregation always reduces in ascending
client-id order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import Dataset, ClientPartition, partitions_from_tags, rebalance_by_resampling
from .errors import DimensionError, TrainingDivergedError, ValidationError
from .rng import LOCAL, SELECT, substream

STRATEGY_KINDS = ("fedavg", "fedequal", "fedloss", "fedexp", "qffl", "fedauto")

ROUND_CSV_HEADER = [
    "round",
    "strategy",
    "m",
    "client_id",
    "loss",
    "weight",
    "val_accuracy_client",
    "val_accuracy_global",
]


@dataclass(frozen=True)
class Strategy:
    """Which weighting rule the server applies, plus its hyperparameters."""

    kind: str = "fedauto"
    m_fixed: int = 1  # fedexp
    q: float = 1.0  # qffl
    q_threshold: float = 1.5  # fedauto: escalate when max > q_threshold * min
    m_cap: int = 3  # fedauto upper bound on m

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValidationError(f"unknown strategy {self.kind!r}, expected one of {STRATEGY_KINDS}")
        if self.m_fixed < 1:
            raise ValidationError(f"m_fixed must be >= 1, got {self.m_fixed}")
        if self.q < 0:
            raise ValidationError(f"q must be >= 0, got {self.q}")
        if not self.q_threshold > 1:
            raise ValidationError(f"q_threshold must exceed 1, got {self.q_threshold}")
        if self.m_cap < 1:
            raise ValidationError(f"m_cap must be >= 1, got {self.m_cap}")

    @property
    def needs_adjuster(self) -> bool:
        return self.kind == "fedauto"

    def label(self) -> str:
        """Stable filesystem-safe name, e.g. fedexp_m2, qffl_q0.5, fedauto_Q1.5_M3."""
        if self.kind == "fedexp":
            return f"fedexp_m{self.m_fixed}"
        if self.kind == "qffl":
            return f"qffl_q{self.q:g}"
        if self.kind == "fedauto":
            return f"fedauto_Q{self.q_threshold:g}_M{self.m_cap}"
        return self.kind


def parse_strategy(text: str) -> Strategy:
    """Parse 'fedexp(m=2)', 'qffl(q=5)', 'fedauto(Q=1.5,M=3)', or a bare name."""
    text = text.strip()
    name, args = text, ""
    if "(" in text:
        if not text.endswith(")"):
            raise ValidationError(f"unbalanced parentheses in strategy {text!r}")
        name, args = text[: text.index("(")], text[text.index("(") + 1 : -1]
    name = name.strip().lower()
    kwargs = {}
    key_map = {"m": None, "q": None, "Q": None, "M": None}
    for piece in filter(None, (p.strip() for p in args.split(","))):
        if "=" not in piece:
            raise ValidationError(f"expected key=value in strategy args, got {piece!r}")
        key, value = (s.strip() for s in piece.split("=", 1))
        if key not in key_map:
            raise ValidationError(f"unknown strategy parameter {key!r}")
        kwargs[key] = value
    try:
        if name == "fedexp":
            return Strategy("fedexp", m_fixed=int(kwargs.pop("m", 1)), **_no_extras(kwargs))
        if name == "qffl":
            return Strategy("qffl", q=float(kwargs.pop("q", 1.0)), **_no_extras(kwargs))
        if name == "fedauto":
            return Strategy(
                "fedauto",
                q_threshold=float(kwargs.pop("Q", 1.5)),
                m_cap=int(kwargs.pop("M", 3)),
                **_no_extras(kwargs),
            )
    except ValueError as exc:
        raise ValidationError(f"bad strategy parameter in {text!r}: {exc}") from None
    if name in STRATEGY_KINDS:
        if kwargs:
            raise ValidationError(f"strategy {name} takes no parameters, got {sorted(kwargs)}")
        return Strategy(name)
    raise ValidationError(f"unknown strategy {name!r}")


def _no_extras(kwargs: dict) -> dict:
    if kwargs:
        raise ValidationError(f"unexpected strategy parameters {sorted(kwargs)}")
    return {}


@dataclass(frozen=True)
class FlConfig:
    """Round count T, local epochs E, batch size B, and friends."""

    rounds: int = 100
    local_epochs: int = 5
    batch_size: int = 128
    base_lr: float = 1e-4
    client_fraction: float = 1.0
    strategy: Strategy = field(default_factory=Strategy)
    optimizer: str = "adam"
    rebalance: bool = True
    allow_m_decrease: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ValidationError("rounds, local_epochs and batch_size must be >= 1")
        if self.base_lr < 0:
            raise ValidationError(f"base_lr must be nonnegative, got {self.base_lr}")
        if not 0 < self.client_fraction <= 1:
            raise ValidationError(f"client_fraction must be in (0, 1], got {self.client_fraction}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.seed < 0:
            raise ValidationError("seed must be nonnegative")


@dataclass
class ClientState:
    """One client: its data views plus the latest local params and loss."""

    client_id: int
    partition: ClientPartition
    train_x: np.ndarray
    train_targets: np.ndarray  # one-hot
    val_x: np.ndarray
    val_y: np.ndarray
    sample_count: int  # pre-resampling train size (fedavg/qffl weighting)
    params: nn.ModelParams | None = None
    last_loss: float | None = None


def build_clients(ds: Dataset, partitions: list[ClientPartition], cfg: FlConfig) -> list[ClientState]:
    """Materialize per-client train/val arrays; oversamples train if configured."""
    clients = []
    for part in partitions:
        if part.train.size == 0 or part.val.size == 0:
            raise ValidationError(f"client {part.client_id} is missing a train or val split")
        n_before = int(part.train.size)
        used = rebalance_by_resampling(part, ds, seed=cfg.seed) if cfg.rebalance else part
        clients.append(
            ClientState(
                client_id=part.client_id,
                partition=used,
                train_x=ds.features[used.train],
                train_targets=nn.one_hot(ds.labels[used.train], ds.num_classes),
                val_x=ds.features[part.val],
                val_y=ds.labels[part.val],
                sample_count=n_before,
            )
        )
    return clients


def local_update(
    client: ClientState,
    global_params: nn.ModelParams,
    cfg: FlConfig,
    lr: float,
    rng: np.random.Generator,
) -> tuple[nn.ModelParams, float]:
    """E epochs of mini-batch training from the global model.

    Returns the updated parameters and the mean training loss over the
    final epoch (measured at each batch's forward pass). The caller's
    global params are never mutated.
    """
    params = global_params.copy()
    opt = nn.make_optimizer(cfg.optimizer, params)
    n = client.train_x.shape[0]
    batch = min(cfg.batch_size, n)
    epoch_loss = 0.0
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            grads, mean_loss = nn.backward_grads(params, client.train_x[idx], client.train_targets[idx])
            if not math.isfinite(mean_loss):
                raise TrainingDivergedError(f"client {client.client_id}: non-finite training loss")
            loss_sum += mean_loss * idx.size
            params = nn.optimizer_step(params, grads, opt, lr)
        epoch_loss = loss_sum / n
    return params, epoch_loss


@dataclass
class AdjusterState:
    """Current scaling factor m and its per-round history."""

    m: int = 1
    history: list[tuple[int, int]] = field(default_factory=list)  # (round, m)


def update_scaling_factor(
    adjuster: AdjusterState,
    losses,
    q_threshold: float,
    m_cap: int,
    allow_decrease: bool = False,
) -> AdjusterState:
    """Escalate m by one when the loss spread is wide: max > q_threshold * min.

    m never exceeds m_cap and (by default) never decreases. Returns a new
    state with the round appended to the history.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ValidationError("losses must be nonempty")
    if losses.min() < 0:
        raise ValidationError("losses must be nonnegative")
    spread_is_wide = (
        False if math.isinf(q_threshold) else bool(losses.max() > q_threshold * losses.min())
    )
    m = adjuster.m
    if spread_is_wide and m < m_cap:
        m += 1
    elif allow_decrease and not spread_is_wide and m > 1:
        m -= 1
    round_index = adjuster.history[-1][0] + 1 if adjuster.history else 1
    return AdjusterState(m=m, history=[*adjuster.history, (round_index, m)])


def compute_aggregation_weights(
    strategy: Strategy, losses, counts, adjuster: AdjusterState | None = None
) -> np.ndarray:
    """Per-client aggregation weights: nonnegative, summing to 1.

    fedloss and qffl fall back to uniform weights when every score is zero
    (all-zero losses), since the ratio is undefined there.
    """
    losses = np.asarray(losses, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.float64)
    if losses.size == 0 or losses.shape != counts.shape:
        raise ValidationError("losses and counts must be aligned and nonempty")
    if not np.isfinite(losses).all() or losses.min() < 0:
        raise ValidationError("losses must be finite and nonnegative")

    kind = strategy.kind
    if kind == "fedavg":
        scores = counts
    elif kind == "fedequal":
        scores = np.ones_like(losses)
    elif kind == "fedloss":
        scores = losses
    elif kind == "qffl":
        scores = counts * losses**strategy.q
    elif kind in ("fedexp", "fedauto"):
        if kind == "fedauto":
            if adjuster is None:
                raise ValidationError("fedauto needs an AdjusterState")
            m = adjuster.m
        else:
            m = strategy.m_fixed
        z = m * losses
        scores = np.exp(z - z.max())  # shift-invariant, overflow-safe
    else:  # pragma: no cover - Strategy validates kind
        raise ValidationError(f"unknown strategy kind {kind!r}")

    total = scores.sum()
    if total <= 0:
        scores = np.ones_like(losses)
        total = scores.sum()
    return scores / total


def aggregate_global(client_params: list[nn.ModelParams], weights) -> nn.ModelParams:
    """Weighted sum of client parameters, reduced in the given (client-id) order."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(client_params) != weights.shape[0]:
        raise DimensionError("one weight per client parameter set required")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValidationError(f"weights sum to {weights.sum()}, expected 1")
    return nn.linear_combination(list(zip(weights.tolist(), client_params)))


@dataclass
class RoundRecord:
    """Audit row for one round: losses, weights, m, validation snapshot."""

    round_index: int
    strategy_label: str
    m: int  # scaling factor in effect; 0 for strategies without one
    client_ids: list[int]
    losses: list[float]
    weights: list[float]
    val_accuracy_client: list[float]  # each local model on its own val split
    val_accuracy_global: list[float]  # new global model on each client's val split
    global_val_accuracy: float  # new global model on the pooled val split

    def __post_init__(self):
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValidationError("round weights must sum to 1")
        if any(w < 0 for w in self.weights):
            raise ValidationError("round weights must be nonnegative")


def run_in_fl(
    ds: Dataset, spec: nn.ModelSpec, cfg: FlConfig
) -> tuple[nn.ModelParams, list[RoundRecord]]:
    """Full federated training: returns the final global model and round history.

    The dataset must carry split tags. Each round uses the cosine-decayed
    learning rate for its (0-based) index, selects ceil(fraction * |C|)
    clients, trains them from the current global model, updates the scaling
    factor (fedauto only), and aggregates.
    """
    if ds.feature_dim != spec.input_dim or ds.num_classes != spec.num_classes:
        raise DimensionError(
            f"dataset ({ds.feature_dim} features, {ds.num_classes} classes) does not match "
            f"model spec ({spec.input_dim}, {spec.num_classes})"
        )
    partitions = partitions_from_tags(ds)
    clients = build_clients(ds, partitions, cfg)
    strategy = cfg.strategy

    val_mask = ds.split == "val"
    val_x, val_y = ds.features[val_mask], ds.labels[val_mask]

    global_params = nn.init_params(spec, cfg.seed)
    adjuster = AdjusterState() if strategy.needs_adjuster else None
    records: list[RoundRecord] = []

    n_selected = math.ceil(cfg.client_fraction * len(clients))
    for t in range(1, cfg.rounds + 1):
        lr = nn.cosine_lr(t - 1, cfg.rounds, cfg.base_lr)
        if n_selected == len(clients):
            selected = clients
        else:
            pick = substream(cfg.seed, SELECT, t).choice(len(clients), size=n_selected, replace=False)
            selected = [clients[i] for i in np.sort(pick)]

        losses, updated = [], []
        for client in selected:
            rng = substream(cfg.seed, LOCAL, t, client.client_id)
            try:
                params, loss = local_update(client, global_params, cfg, lr, rng)
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(f"round {t}: {exc}") from None
            client.params, client.last_loss = params, loss
            losses.append(loss)
            updated.append(params)

        if adjuster is not None:
            adjuster = update_scaling_factor(
                adjuster, losses, strategy.q_threshold, strategy.m_cap, cfg.allow_m_decrease
            )
        counts = [c.sample_count for c in selected]
        weights = compute_aggregation_weights(strategy, losses, counts, adjuster)
        global_params = aggregate_global(updated, weights)

        if strategy.kind == "fedauto":
            m_now = adjuster.m
        elif strategy.kind == "fedexp":
            m_now = strategy.m_fixed
        else:
            m_now = 0
        records.append(
            RoundRecord(
                round_index=t,
                strategy_label=strategy.label(),
                m=m_now,
                client_ids=[c.client_id for c in selected],
                losses=losses,
                weights=weights.tolist(),
                val_accuracy_client=[
                    nn.accuracy_of(c.params, c.val_x, c.val_y) for c in selected
                ],
                val_accuracy_global=[
                    nn.accuracy_of(global_params, c.val_x, c.val_y) for c in selected
                ],
                global_val_accuracy=nn.accuracy_of(global_params, val_x, val_y),
            )
        )
    return global_params, records


def write_round_records(records: list[RoundRecord], path) -> None:
    """One CSV row per (round, client)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ROUND_CSV_HEADER)
        for rec in records:
            for i, cid in enumerate(rec.client_ids):
                writer.writerow(
                    [
                        rec.round_index,
                        rec.strategy_label,
                        rec.m,
                        cid,
                        repr(rec.losses[i]),
                        repr(rec.weights[i]),
                        repr(rec.val_accuracy_client[i]),
                        repr(rec.val_accuracy_global[i]),
                    ]
                )


def read_round_records(path) -> list[dict]:
    """Parse a round-record CSV into one dict per row."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ROUND_CSV_HEADER:
            raise ValidationError(f"bad round-record header in {path}")
        out = []
        for row in reader:
            out.append(
                {
                    "round": int(row["round"]),
                    "strategy": row["strategy"],
                    "m": int(row["m"]),
                    "client_id": int(row["client_id"]),
                    "loss": float(row["loss"]),
                    "weight": float(row["weight"]),
                    "val_accuracy_client": float(row["val_accuracy_client"]),
                    "val_accuracy_global": float(row["val_accuracy_global"]),
                }
            )
    return out
