"""Simulated multi-user training: federated, centralized and non-collaborative.

Message exchange is modelled as value passing inside one process.  Each
user owns a :class:`~fedrec.nn.LocalTrainer` whose optimiser state and epoch
counter persist across rounds; the base station only ever sees parameter
deltas and returns the new global vector.

Seeds: every scheme initialises its first (or only) model from the stream
``(seed, "init", 0)`` and user ``u`` shuffles with ``derive_seed(seed,
"shuffle", u)``.  With one user, federated, centralized and local training
therefore see exactly the same random numbers.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .channel import PilotDataset
from .nn import LocalTrainer, ModelParams, TrainConfig, init_params, loss
from .rng import derive_seed, stream

__all__ = [
    "ProtocolError",
    "FedConfig",
    "OverheadReport",
    "RoundRecord",
    "FedResult",
    "aggregate_deltas",
    "fed_round",
    "fedrec_train",
    "centralized_train",
    "noncollab_train",
    "comm_overhead",
    "write_telemetry_csv",
]

SCHEMES = ("CL", "FedRec", "NL")


class ProtocolError(RuntimeError):
    """Users disagree on the shape of the model they exchange."""


@dataclass(frozen=True)
class FedConfig:
    U: int = 5
    rounds: int = 5
    local_epochs_per_round: int = 5
    train: TrainConfig = field(default_factory=TrainConfig)
    layer_dims: tuple[int, ...] = (2, 16)

    def __post_init__(self):
        if self.U < 1:
            raise ValueError("U must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.local_epochs_per_round < 1:
            raise ValueError("local_epochs_per_round must be >= 1")

    def tau(self, n_local: int) -> int:
        """Local optimiser iterations between two aggregations."""
        return self.local_epochs_per_round * math.ceil(n_local / self.train.batch_size)


@dataclass(frozen=True)
class OverheadReport:
    scheme: str
    ul_words: int
    dl_words: int


@dataclass(frozen=True)
class RoundRecord:
    round: int
    user: int
    local_loss_before: float
    local_loss_after: float
    delta_norm: float


@dataclass
class FedResult:
    params: ModelParams
    telemetry: list[RoundRecord]


def _user_cfg(cfg: TrainConfig, seed: int, user: int) -> TrainConfig:
    return replace(cfg, shuffle_seed=derive_seed(seed, "shuffle", user))


def aggregate_deltas(theta: np.ndarray, deltas: Sequence[np.ndarray]) -> np.ndarray:
    """``theta + (1/U) sum_u g_u``, reduced in user order."""
    acc = np.zeros_like(theta)
    for g in deltas:
        acc += g
    return theta + acc / len(deltas)


def fed_round(theta: ModelParams, users: Sequence[LocalTrainer], epochs: int,
              round_index: int = 0, workers: int = 1) -> tuple[ModelParams, list[RoundRecord]]:
    """Broadcast ``theta``, train every user for ``epochs``, average.

    All users start from the same point, so averaging their deltas equals
    averaging their end points; the latter is what is computed (in fixed
    user order), which keeps a single-user round bit-identical to plain
    local training.
    """
    if not users:
        raise ValueError("no users")
    for u in users:
        if u.params.layer_dims != theta.layer_dims:
            raise ProtocolError(f"user model {u.params.layer_dims} != global {theta.layer_dims}")

    def run(u: LocalTrainer):
        u.params = theta.copy()
        before = u.loss()
        u.run(epochs)
        return before, u.loss()

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            losses = list(ex.map(run, users))
    else:
        losses = [run(u) for u in users]

    ends = [u.params.flat for u in users]
    if any(e.shape != theta.flat.shape for e in ends):
        raise ProtocolError("parameter vector length changed during local training")
    acc = np.zeros_like(theta.flat)
    for e in ends:
        acc += e
    new = ModelParams(theta.layer_dims, acc / len(users))
    records = [
        RoundRecord(round_index, i, lb, la, float(np.linalg.norm(e - theta.flat)))
        for i, ((lb, la), e) in enumerate(zip(losses, ends))
    ]
    return new, records


def fedrec_train(datasets: Sequence[PilotDataset], cfg: FedConfig, seed: int,
                 workers: int = 1) -> FedResult:
    """Federated training: ``cfg.rounds`` rounds of ``cfg.local_epochs_per_round`` local epochs."""
    if not datasets:
        raise ValueError("no user datasets")
    if len({len(d) for d in datasets}) != 1:
        raise ValueError("federated users must hold equally sized datasets")
    theta = init_params(stream(seed, "init", 0), cfg.layer_dims)
    users = [LocalTrainer.from_data(theta, d, _user_cfg(cfg.train, seed, i)) for i, d in enumerate(datasets)]
    telemetry: list[RoundRecord] = []
    for r in range(cfg.rounds):
        theta, recs = fed_round(theta, users, cfg.local_epochs_per_round, r, workers)
        telemetry.extend(recs)
    return FedResult(theta, telemetry)


def _pool(datasets: Sequence[PilotDataset]) -> tuple[np.ndarray, np.ndarray]:
    if not datasets or sum(len(d) for d in datasets) == 0:
        raise ValueError("nothing to train on")
    return (np.concatenate([d.msgs for d in datasets]),
            np.concatenate([d.features() for d in datasets]))


def centralized_train(datasets: Sequence[PilotDataset], cfg: TrainConfig, seed: int,
                      layer_dims: Sequence[int] = (2, 16)) -> ModelParams:
    """All pilots pooled at the base station and trained on in one place."""
    msgs, feats = _pool(datasets)
    theta = init_params(stream(seed, "init", 0), layer_dims)
    return LocalTrainer(theta, msgs, feats, _user_cfg(cfg, seed, 0)).run(cfg.epochs)


def noncollab_train(datasets: Sequence[PilotDataset], cfg: TrainConfig, seed: int,
                    layer_dims: Sequence[int] = (2, 16)) -> list[ModelParams]:
    """Each user trains its own model on its own pilots only."""
    out = []
    for i, d in enumerate(datasets):
        theta = init_params(stream(seed, "init", i), layer_dims)
        out.append(LocalTrainer.from_data(theta, d, _user_cfg(cfg, seed, i)).run(cfg.epochs))
    return out


def pooled_loss(params: ModelParams, datasets: Sequence[PilotDataset]) -> float:
    msgs, feats = _pool(datasets)
    return loss(params, msgs, feats)


def comm_overhead(scheme: str, U: int, n_params: int, rounds: int, train_size: int) -> OverheadReport:
    """Training traffic in float32 words.

    CL uploads every received pilot (two reals each) and downloads the model
    once; FedRec uploads one delta per user per round and broadcasts one
    model per round; NL exchanges nothing.
    """
    if scheme == "CL":
        return OverheadReport(scheme, 2 * train_size, n_params)
    if scheme == "FedRec":
        return OverheadReport(scheme, rounds * U * n_params, rounds * n_params)
    if scheme == "NL":
        return OverheadReport(scheme, 0, 0)
    raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


TELEMETRY_COLUMNS = ["round", "user", "local_loss_before", "local_loss_after", "delta_norm"]


def write_telemetry_csv(records: Sequence[RoundRecord], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TELEMETRY_COLUMNS)
        for r in records:
            w.writerow([r.round, r.user, repr(r.local_loss_before), repr(r.local_loss_after), repr(r.delta_norm)])
    return path
