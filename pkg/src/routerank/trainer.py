"""Training loop: samples, day split, mini-batch Adam with exponential decay.

Only the chosen candidate of each record is a labelled sample.  The last
simulated day is held out for testing.  Batch order within an epoch comes
from the substream ``(seed, epoch)``, so a run resumed from a checkpoint
replays exactly the same updates as an uninterrupted one.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from routerank import nncore as nn
from routerank.model import R4Config, R4Model
from routerank.schema import Encoded, FeatureExtractor, FeatureSchema, Vocab, build_vocab, encode, fit_schema
from routerank.synthworld.network import RoadGraph
from routerank.synthworld.simulate import NavigationRecord

BATCH_SIZE = 512
DEFAULT_EPOCHS = 5


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = BATCH_SIZE
    lr0: float = nn.LR0
    decay_rate: float = nn.DECAY_RATE
    decay_steps: int = nn.DECAY_STEPS

    def lr(self, step: int) -> float:
        return nn.exp_decay(step, self.lr0, self.decay_rate, self.decay_steps)


def make_samples(records: list[NavigationRecord]) -> list[tuple[int, int, int]]:
    """One ``(record position, chosen index, label)`` triple per record."""
    return [(i, r.chosen_index, r.label_y) for i, r in enumerate(records)]


def split_by_day(records: list[NavigationRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Positions of training records (earlier days) and test records (last day)."""
    days = np.array([r.day for r in records])
    last = days.max()
    return np.flatnonzero(days < last), np.flatnonzero(days == last)


@dataclass
class PreparedData:
    """Encoded chosen-route samples for every record plus the split."""

    records: list[NavigationRecord]
    schema: FeatureSchema
    vocab: Vocab
    encoded: Encoded
    train_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def train(self) -> Encoded:
        return self.encoded.take(self.train_idx, trim=False)

    @property
    def test(self) -> Encoded:
        return self.encoded.take(self.test_idx, trim=False)


def prepare(graph: RoadGraph, records: list[NavigationRecord], min_frequency: int = 5) -> PreparedData:
    """Vocabulary and normalization from the training days; encode all records."""
    train_idx, test_idx = split_by_day(records)
    if len(train_idx) == 0:
        raise ValueError("training split is empty")
    raw = FeatureExtractor(graph).extract(records)
    vocab = build_vocab([records[i] for i in train_idx], min_frequency)
    train_raw = FeatureExtractor(graph).extract(records, [(i, records[i].chosen_index) for i in train_idx])
    schema = fit_schema(train_raw)
    return PreparedData(records, schema, vocab, encode(raw, schema, vocab), train_idx, test_idx)


@dataclass
class TrainState:
    params: nn.ModelParams
    adam: nn.AdamState
    step: int = 0
    epoch: int = 0
    batch: int = 0  # next batch within ``epoch``
    log: list[dict] = field(default_factory=list)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(
    model_cfg: R4Config,
    data: PreparedData,
    epochs: int = DEFAULT_EPOCHS,
    seed: int = 0,
    train_cfg: TrainConfig | None = None,
    *,
    state: TrainState | None = None,
    max_steps: int | None = None,
    log_path=None,
    verbose: bool = False,
) -> TrainState:
    """Minimize the cross-entropy on the training split.

    Pass ``state`` to resume.  ``max_steps`` stops early after that many
    optimizer steps in total (used to interrupt and resume runs).
    """
    tc = train_cfg or TrainConfig(epochs=epochs)
    model = R4Model(model_cfg, data.schema)
    train_enc = data.train
    n = len(train_enc)
    if n == 0:
        raise ValueError("training split is empty")
    if state is None:
        params = model.init(data.vocab.size, seed)
        state = TrainState(params, nn.AdamState.zeros(params))
    n_batches = math.ceil(n / tc.batch_size)
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        while state.epoch < epochs:
            order = epoch_order(n, seed, state.epoch)
            losses = []
            while state.batch < n_batches:
                if max_steps is not None and state.step >= max_steps:
                    return state
                idx = order[state.batch * tc.batch_size : (state.batch + 1) * tc.batch_size]
                batch = train_enc.take(idx)
                loss, grads = model.loss_and_grads(state.params, batch)
                lr = tc.lr(state.step)
                if not math.isfinite(loss):
                    norms = {k: float(np.linalg.norm(v)) for k, v in state.params.items()}
                    raise TrainingError(
                        f"non-finite loss at step {state.step} (epoch {state.epoch}, lr {lr:.3g}); "
                        f"largest parameter norm {max(norms.values()):.3g} in {max(norms, key=norms.get)}"
                    )
                nn.adam_step(state.params, grads, state.adam, lr)
                entry = {"step": state.step, "lr": lr, "loss": loss}
                state.log.append(entry)
                if log_fh:
                    log_fh.write(json.dumps(entry) + "\n")
                losses.append(loss)
                state.step += 1
                state.batch += 1
            if verbose:
                print(f"[{model_cfg.name}] epoch {state.epoch} loss {np.mean(losses) if losses else float('nan'):.5f}")
            state.epoch += 1
            state.batch = 0
    finally:
        if log_fh:
            log_fh.close()
    return state


def epoch_losses(state: TrainState, n_train: int, batch_size: int = BATCH_SIZE) -> list[float]:
    """Mean training loss per epoch from the step log."""
    per = math.ceil(n_train / batch_size)
    losses = [e["loss"] for e in state.log]
    return [float(np.mean(losses[i : i + per])) for i in range(0, len(losses), per)]


# ---------------------------------------------------------------- checkpoints


def to_checkpoint(state: TrainState, model_cfg: R4Config, data: PreparedData, seed: int, train_cfg=None) -> nn.Checkpoint:
    meta = {
        "model_config": model_cfg.to_dict(),
        "train_config": asdict(train_cfg or TrainConfig()),
        "schema": data.schema.to_dict(),
        "schema_hash": data.schema.digest(),
        "vocab": data.vocab.to_dict(),
        "seed": seed,
        "step": state.step,
        "epoch": state.epoch,
        "batch": state.batch,
    }
    return nn.Checkpoint(state.params, meta, state.adam)


def save(path, state: TrainState, model_cfg: R4Config, data: PreparedData, seed: int, train_cfg=None) -> str:
    ckpt = to_checkpoint(state, model_cfg, data, seed, train_cfg)
    nn.save_checkpoint(path, ckpt)
    return ckpt.model_hash


@dataclass
class LoadedModel:
    model: R4Model
    params: nn.ModelParams
    schema: FeatureSchema
    vocab: Vocab
    meta: dict
    model_hash: str
    adam: nn.AdamState | None = None

    def state(self) -> TrainState:
        adam = self.adam or nn.AdamState.zeros(self.params)
        return TrainState(self.params, adam, self.meta["step"], self.meta["epoch"], self.meta["batch"])


def load(path) -> LoadedModel:
    ckpt = nn.load_checkpoint(path)
    meta = ckpt.meta
    for key in ("model_config", "schema", "vocab"):
        if key not in meta:
            raise ValueError(f"{path}: checkpoint lacks {key!r}")
    schema = FeatureSchema.from_dict(meta["schema"])
    if schema.digest() != meta.get("schema_hash"):
        raise ValueError(f"{path}: schema hash mismatch")
    cfg = R4Config.from_dict(meta["model_config"])
    return LoadedModel(
        R4Model(cfg, schema), ckpt.params, schema, Vocab.from_dict(meta["vocab"]), meta, ckpt.model_hash, ckpt.adam
    )


def encode_for(loaded: LoadedModel, graph: RoadGraph, records, pairs=None) -> Encoded:
    """Encode ``pairs`` of (record position, candidate) with a checkpoint's schema and vocabulary."""
    raw = FeatureExtractor(graph).extract(records, pairs)
    return encode(raw, loaded.schema, loaded.vocab)


def write_log(state: TrainState, path) -> None:
    Path(path).write_text("".join(json.dumps(e) + "\n" for e in state.log), encoding="utf-8")
