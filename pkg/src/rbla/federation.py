"""Round orchestration for heterogeneous-rank LoRA federated training.

One round is select -> distribute -> local train -> aggregate -> evaluate.
Methods ``rbla`` and ``zp`` train LoRA adapters over a frozen base shared by
every client and the server; ``fft`` trains and averages the full weights,
starting from the same base. The three methods share every code path except
the aggregation call.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import aggregate as agg
from .data import ClientPartition, Dataset, assign_ranks, staircase_partition
from .linalg import SeededRng
from .lora import FrozenBase, LoraAdapter, LoraDense, RankError, init_adapter, truncate
from .nn import RELU, SOFTMAX, DenseLayer, MlpModel, evaluate, init_mlp, mlp_shapes, train_epoch

log = logging.getLogger(__name__)

METHODS = ("rbla", "zp", "fft")
PARTICIPATION = ("full", "random")


@dataclass(frozen=True)
class RoundConfig:
    method: str = "rbla"
    rounds: int = 50
    local_epochs: int = 2
    batch_size: int = 64
    learning_rate: float = 0.01
    participation: str = "full"
    fraction: float = 0.2
    seed: int = 42
    n_clients: int = 10
    lora_scale: float = 1.0
    record_timing: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {', '.join(METHODS)}; got {self.method!r}")
        if self.participation not in PARTICIPATION:
            raise ValueError(f"participation must be one of {', '.join(PARTICIPATION)}; got {self.participation!r}")
        if not 0 < self.fraction <= 1:
            raise ValueError(f"fraction must lie in (0, 1], got {self.fraction}")
        if self.rounds < 0 or self.local_epochs < 0:
            raise ValueError("rounds and local_epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")

    @property
    def uses_lora(self) -> bool:
        return self.method != "fft"


@dataclass
class Client:
    partition: ClientPartition
    ranks: list[int]

    @property
    def client_id(self) -> int:
        return self.partition.client_id


@dataclass
class ServerState:
    bases: list[FrozenBase]
    biases: list[np.ndarray]
    adapters: list[LoraAdapter] | None = None  # LoRA methods, max configured rank per layer
    weights: list[np.ndarray] | None = None  # FFT
    round_index: int = 0

    def global_model(self, scale: float = 1.0) -> MlpModel:
        """Dense model with the merged effective weights."""
        n = len(self.bases)
        layers = []
        for k in range(n):
            if self.weights is not None:
                W = self.weights[k]
            else:
                ad = self.adapters[k]
                W = self.bases[k].W0 + scale * (ad.B @ ad.A)
            layers.append(DenseLayer(W, self.biases[k], SOFTMAX if k == n - 1 else RELU))
        return MlpModel(layers)


@dataclass
class RoundMetrics:
    round_index: int
    test_accuracy: float
    test_loss: float
    selected_clients: tuple[int, ...] = ()
    wall_millis: int = 0


@dataclass
class ExperimentResult:
    config: RoundConfig
    metrics: list[RoundMetrics]
    server: ServerState
    summary: dict = field(default_factory=dict)


def make_clients(train: Dataset, cfg: RoundConfig, shapes=None) -> list[Client]:
    shapes = shapes or mlp_shapes()
    parts = staircase_partition(train.labels, cfg.n_clients, SeededRng(cfg.seed))
    ranks = assign_ranks(parts, shapes)
    return [Client(p, ranks[p.client_id]) for p in parts]


def init_server(clients: list[Client], cfg: RoundConfig, shapes=None) -> ServerState:
    """Shared He-normal base and zero biases; global adapters at the max client rank."""
    shapes = shapes or mlp_shapes()
    root = SeededRng(cfg.seed)
    base_model = init_mlp(root, shapes)
    bases = [FrozenBase(layer.W) for layer in base_model.layers]
    biases = [np.zeros((1, n)) for _, n in shapes]
    if not cfg.uses_lora:
        return ServerState(bases, biases, weights=[b.W0.copy() for b in bases])
    adapters = []
    for k, (m, n) in enumerate(shapes):
        r_max = max(c.ranks[k] for c in clients)
        adapters.append(init_adapter(root.child("adapter", k), m, n, r_max))
    return ServerState(bases, biases, adapters=adapters)


def select_clients(client_ids, cfg: RoundConfig, rng: SeededRng) -> list[int]:
    ids = sorted(client_ids)
    if not ids:
        raise ValueError("no clients to select from")
    if cfg.participation == "full":
        return ids
    k = max(1, math.ceil(round(cfg.fraction * len(ids), 9)))
    chosen = rng.generator.choice(len(ids), size=k, replace=False)
    return sorted(ids[i] for i in chosen)


def distribute(server: ServerState, client: Client, cfg: RoundConfig) -> MlpModel:
    """Client model: global adapters truncated to the client's ranks (or full weights)."""
    n = len(server.bases)
    layers = []
    for k in range(n):
        act = SOFTMAX if k == n - 1 else RELU
        b = server.biases[k].copy()
        if server.weights is not None:
            layers.append(DenseLayer(server.weights[k].copy(), b, act))
            continue
        glob = server.adapters[k]
        r = client.ranks[k]
        if r > glob.rank:
            raise RankError(f"client {client.client_id} layer {k}: rank {r} exceeds global rank {glob.rank}")
        layers.append(LoraDense(server.bases[k], truncate(glob, r), b, act, cfg.lora_scale))
    return MlpModel(layers)


def local_train(model: MlpModel, client: Client, train: Dataset, cfg: RoundConfig,
                rng: SeededRng) -> agg.ClientUpdate | None:
    """``local_epochs`` of shuffled minibatch SGD on the client's samples.

    Returns ``None`` (with a warning) for a client without data.
    """
    idx = client.partition.sample_indices
    if len(idx) == 0:
        log.warning("client %d has no samples; skipped", client.client_id)
        return None
    losses = []
    for epoch in range(cfg.local_epochs):
        order = idx[rng.child("epoch", epoch).permutation(len(idx))]
        losses.append(train_epoch(model, train.images, train.labels, order,
                                  cfg.batch_size, cfg.learning_rate))
    if isinstance(model.layers[0], LoraDense):
        layers = [layer.adapter for layer in model.layers]
    else:
        layers = [layer.W for layer in model.layers]
    return agg.ClientUpdate(client.client_id, layers, [layer.b for layer in model.layers],
                            float(len(idx)), meta={"epoch_losses": losses})


def _pad_from(agged: LoraAdapter, previous: LoraAdapter) -> LoraAdapter:
    """Keep ``previous`` slices beyond the rank this round's aggregate covers."""
    if agged.rank >= previous.rank:
        return agged
    B = previous.B.copy()
    A = previous.A.copy()
    B[:, :agged.rank] = agged.B
    A[:agged.rank, :] = agged.A
    return LoraAdapter(B, A)


def aggregate_updates(server: ServerState, updates: list[agg.ClientUpdate], method: str) -> ServerState:
    """New server state from this round's updates; ``server`` is left untouched."""
    n = len(server.bases)
    biases = [agg.aggregate_biases(updates, k) for k in range(n)]
    if method == "fft":
        weights = [agg.fft_aggregate(updates, k) for k in range(n)]
        return replace(server, biases=biases, weights=weights, round_index=server.round_index + 1)
    adapters = []
    for k in range(n):
        prev = server.adapters[k]
        if method == "rbla":
            adapters.append(agg.rbla_aggregate(updates, k, target_rank=prev.rank, previous=prev))
        elif method == "zp":
            adapters.append(_pad_from(agg.zp_aggregate(updates, k), prev))
        else:
            raise ValueError(f"unknown method {method!r}")
    return replace(server, biases=biases, adapters=adapters, round_index=server.round_index + 1)


def run_round(server: ServerState, clients: list[Client], train: Dataset, test: Dataset,
              cfg: RoundConfig, rng: SeededRng):
    """Run one round and return ``(new_server, metrics)``.

    The input state is never mutated, so a failure anywhere leaves the
    caller's state as it was before the round.
    """
    t0 = time.perf_counter()
    rnd = server.round_index + 1
    by_id = {c.client_id: c for c in clients}
    selected = select_clients(by_id, cfg, rng.child("select", rnd))
    updates = []
    for cid in selected:
        model = distribute(server, by_id[cid], cfg)
        upd = local_train(model, by_id[cid], train, cfg, rng.child("train", cid, rnd))
        if upd is not None:
            updates.append(upd)
    if updates:
        new_server = aggregate_updates(server, updates, cfg.method)
    else:
        log.warning("round %d: no client produced an update", rnd)
        new_server = replace(server, round_index=rnd)
    acc, loss = evaluate(new_server.global_model(cfg.lora_scale), test.images, test.labels)
    wall = int(round((time.perf_counter() - t0) * 1000)) if cfg.record_timing else 0
    return new_server, RoundMetrics(rnd, acc, loss, tuple(u.client_id for u in updates), wall)


def run_experiment(cfg: RoundConfig, train: Dataset, test: Dataset, targets=(),
                   progress=None) -> ExperimentResult:
    """Round-0 evaluation followed by ``cfg.rounds`` rounds."""
    from .report import summarize

    shapes = mlp_shapes(train.images.shape[1])
    clients = make_clients(train, cfg, shapes)
    server = init_server(clients, cfg, shapes)
    rng = SeededRng(cfg.seed)
    t0 = time.perf_counter()
    acc, loss = evaluate(server.global_model(cfg.lora_scale), test.images, test.labels)
    wall = int(round((time.perf_counter() - t0) * 1000)) if cfg.record_timing else 0
    metrics = [RoundMetrics(0, acc, loss, (), wall)]
    if progress:
        progress(metrics[-1])
    for _ in range(cfg.rounds):
        server, m = run_round(server, clients, train, test, cfg, rng)
        metrics.append(m)
        log.info("%s round %d: acc=%.4f loss=%.4f", cfg.method, m.round_index, m.test_accuracy, m.test_loss)
        if progress:
            progress(m)
    return ExperimentResult(cfg, metrics, server, summarize(metrics, targets))
