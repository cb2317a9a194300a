"""Sample-weighted model fusion and the server round state machine. Local client training lives here too."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import models, nn
from .data import EnvironmentDataset
from .errors import ConfigError, IncompatibleArchitectureError, ProtocolError, StateError
from .models import ModelParams

log = logging.getLogger(__name__)

# Default schedule.
ROUNDS = 20
LOCAL_EPOCHS = 2
LR = 0.05
BATCH_SIZE = 32
CLIP_NORM = 1.0  # global gradient-norm cap; 0 disables


@dataclass
class ClientUpdate:
    client_id: str
    round: int
    sample_count: int
    params: ModelParams

    def __post_init__(self):
        if self.sample_count < 1:
            raise ConfigError("sample_count must be >= 1")
        if self.round < 0:
            raise ConfigError("round must be >= 0")


def fusion_weights(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    return counts / counts.sum()


def aggregate(updates: Iterable[ClientUpdate]) -> ModelParams:
    """FedAvg: sample-count-weighted mean of the client weight vectors.

    Summation runs in float64 in ascending ``client_id`` order, so the result
    does not depend on the order updates arrived in.
    """
    updates = sorted(updates, key=lambda u: u.client_id)
    if not updates:
        raise ProtocolError("cannot aggregate an empty update set")
    arch = updates[0].params.arch
    rnd = updates[0].round
    for u in updates:
        if u.params.arch.digest != arch.digest:
            raise IncompatibleArchitectureError(
                f"update from {u.client_id} has digest {u.params.arch.digest:#x}, expected {arch.digest:#x}"
            )
        if u.round != rnd:
            raise ProtocolError(f"mixed rounds in aggregation ({u.round} != {rnd})")
        if u.params.weights.size != updates[0].params.weights.size:
            raise IncompatibleArchitectureError("weight vectors differ in length")
    w = fusion_weights([u.sample_count for u in updates])
    acc = np.zeros(updates[0].params.weights.size, dtype=np.float64)
    for wk, u in zip(w, updates):
        acc += wk * u.params.weights.astype(np.float64)
    return ModelParams(arch, rnd + 1, acc.astype(np.float32))


# ---------------------------------------------------------------------------
# round state machine
# ---------------------------------------------------------------------------

PHASES = ("distributing", "collecting", "aggregating", "committed", "aborted")
_NEXT = {"distributing": "collecting", "collecting": "aggregating", "aggregating": "committed"}


@dataclass
class RoundState:
    round: int
    expected_clients: frozenset
    digest: int
    quorum: float = 1.0
    received: dict = field(default_factory=dict)
    phase: str = "distributing"
    rejected: list = field(default_factory=list)

    def __post_init__(self):
        self.expected_clients = frozenset(self.expected_clients)
        if not self.expected_clients:
            raise ConfigError("a round needs at least one expected client")
        if not 0.0 < self.quorum <= 1.0:
            raise ConfigError("quorum must be in (0, 1]")

    @property
    def quorum_count(self) -> int:
        return max(1, math.ceil(self.quorum * len(self.expected_clients) - 1e-9))

    def advance(self, phase: str) -> None:
        if phase == "aborted":
            if self.phase == "committed":
                raise StateError("a committed round cannot be aborted")
        elif _NEXT.get(self.phase) != phase:
            raise StateError(f"illegal phase transition {self.phase} -> {phase}")
        self.phase = phase

    def offer(self, u: ClientUpdate) -> tuple[bool, str]:
        """Validate and record one update. Returns ``(accepted, reason)``."""
        if self.phase != "collecting":
            reason = f"round {self.round} is {self.phase}"
        elif u.round != self.round:
            reason = f"update for round {u.round}, current round is {self.round}"
        elif u.params.arch.digest != self.digest:
            reason = "architecture digest mismatch"
        elif u.client_id not in self.expected_clients:
            reason = f"unexpected client {u.client_id!r}"
        elif u.client_id in self.received:
            reason = "duplicate update (first wins)"
        else:
            self.received[u.client_id] = u
            return True, "accepted"
        self.rejected.append((u.client_id, u.round, reason))
        return False, reason

    @property
    def complete(self) -> bool:
        return set(self.received) == set(self.expected_clients)

    @property
    def quorum_met(self) -> bool:
        return len(self.received) >= self.quorum_count


def new_round(rnd: int, clients, global_mp: ModelParams, quorum: float = 1.0) -> RoundState:
    return RoundState(rnd, frozenset(clients), global_mp.arch.digest, quorum)


def finish_round(state: RoundState, global_mp: ModelParams) -> ModelParams:
    """Aggregate if quorum is met (commit), otherwise abort and keep ``global_mp``."""
    if state.quorum_met:
        state.advance("aggregating")
        new = aggregate(state.received.values())
        state.advance("committed")
        return new
    state.advance("aborted")
    log.info("round %d aborted: %d/%d updates", state.round, len(state.received), state.quorum_count)
    return global_mp


def run_round(state: RoundState, global_mp: ModelParams, updates, deadline: float | None = None):
    """Drive one round over a stream of updates.

    ``updates`` yields ClientUpdates or ``(arrival_time, ClientUpdate)`` pairs.
    Collection stops when every expected client reported or an arrival lies
    past ``deadline``. Returns ``(new_global, state)``; on abort the global is
    returned unchanged.
    """
    if state.phase != "distributing":
        raise StateError(f"run_round needs a distributing round, got {state.phase}")
    if global_mp.arch.digest != state.digest:
        raise IncompatibleArchitectureError("global model does not match the round's architecture")
    state.advance("collecting")
    for item in updates:
        t, u = item if isinstance(item, tuple) else (None, item)
        if deadline is not None and t is not None and t > deadline:
            break
        state.offer(u)
        if state.complete:
            break
    return finish_round(state, global_mp), state


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def client_seed(seed: int, index: int) -> int:
    """Per-client training seed; client 0 shares the session seed."""
    return int(seed) + 7919 * int(index)


def train_epochs(layers, params, images, labels, epochs, lr, batch_size, seed, epoch_offset=0, clip_norm=CLIP_NORM):
    """Minibatch SGD on norm-clipped gradients.

    Epoch ``e`` shuffles with ``default_rng([seed, epoch_offset + e])``.
    """
    n = len(labels)
    for e in range(epochs):
        perm = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, epoch_offset + e]).permutation(n)
        for s in range(0, n, batch_size):
            idx = perm[s : s + batch_size]
            _, g = nn.loss_and_grads(layers, params, images[idx], labels[idx])
            params = nn.sgd_step(params, nn.clip_grad_norm(g, clip_norm), lr)
    return params


def local_train(
    global_mp: ModelParams,
    ds: EnvironmentDataset,
    epochs: int = LOCAL_EPOCHS,
    lr: float = LR,
    batch_size: int = BATCH_SIZE,
    seed: int = 0,
    client_id: str = "client",
    clip_norm: float = CLIP_NORM,
) -> ClientUpdate:
    """Train from the received global on local data and package the result.

    Shuffling continues the epoch count of earlier rounds (``version * epochs``)
    so a single client reproduces centralized training on the same data.
    """
    if len(ds) == 0:
        raise ConfigError("local dataset is empty")
    if ds.split != "train":
        raise ConfigError("local training needs a train split")
    if epochs < 0 or batch_size < 1:
        raise ConfigError("epochs must be >= 0 and batch_size >= 1")
    arch = global_mp.arch
    params = models.unflatten(global_mp)
    if epochs and lr:
        params = train_epochs(
            arch.layers, params, ds.images, ds.labels.astype(np.int64), epochs, lr, batch_size, seed,
            epoch_offset=global_mp.version * epochs, clip_norm=clip_norm,
        )
    trained = models.flatten(params, arch, global_mp.version)
    return ClientUpdate(client_id, global_mp.version, len(ds), trained)


@dataclass
class FederatedRun:
    globals: list  # ModelParams per committed version, starting with the initial model
    states: list  # RoundState per round


def run_federated(
    arch,
    client_sets: dict,
    rounds: int = ROUNDS,
    epochs: int = LOCAL_EPOCHS,
    lr: float = LR,
    batch_size: int = BATCH_SIZE,
    seed: int = 0,
    init: ModelParams | None = None,
    clip_norm: float = CLIP_NORM,
) -> FederatedRun:
    """Synchronous in-process FedAvg without any transport.

    ``client_sets`` maps client id to its train set; client ``i`` (in sorted
    id order) trains with :func:`client_seed` ``(seed, i)``.
    """
    if not client_sets:
        raise ConfigError("no clients")
    g = init if init is not None else models.initial_model(arch, seed)
    ids = sorted(client_sets)
    history, states = [g], []
    for _ in range(rounds):
        state = new_round(g.version, ids, g)
        ups = [
            local_train(g, client_sets[cid], epochs, lr, batch_size, client_seed(seed, i), cid, clip_norm)
            for i, cid in enumerate(ids)
        ]
        g, state = run_round(state, g, ups)
        history.append(g)
        states.append(state)
    return FederatedRun(history, states)


def train_centralized_params(arch, ds: EnvironmentDataset, total_epochs, lr, batch_size, seed, init=None,
                             clip_norm: float = CLIP_NORM) -> ModelParams:
    """Single model on pooled data, same shuffling scheme as a lone federated client."""
    if len(ds) == 0:
        raise ConfigError("empty training set")
    g = init if init is not None else models.initial_model(arch, seed)
    params = models.unflatten(g)
    if total_epochs and lr:
        params = train_epochs(arch.layers, params, ds.images, ds.labels.astype(np.int64), total_epochs, lr, batch_size,
                              seed, clip_norm=clip_norm)
    return models.flatten(params, arch, g.version)
