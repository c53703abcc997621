import dataclasses
from types import SimpleNamespace

import numpy as np
import pytest

from routerank import nncore as nn
from routerank.model import R4Config, variant_config
from routerank.trainer import (
    TrainingError,
    epoch_losses,
    load,
    make_samples,
    save,
    split_by_day,
    train,
)


def subset(data, train_idx):
    return dataclasses.replace(data, train_idx=np.asarray(train_idx))


def test_make_samples():
    recs = [SimpleNamespace(chosen_index=i % 3, label_y=int(i == 4)) for i in range(10)]
    samples = make_samples(recs)
    assert len(samples) == 10
    assert samples[4] == (4, 1, 1)
    assert sum(s[2] for s in samples) == 1


def test_split_last_day(small_world):
    records = small_world[1]
    train_idx, test_idx = split_by_day(records)
    last = max(r.day for r in records)
    assert {records[i].day for i in test_idx} == {last}
    assert all(records[i].day < last for i in train_idx)
    assert len(train_idx) + len(test_idx) == len(records)


def test_one_step_per_512(small_data):
    state = train(R4Config.variant("Base"), subset(small_data, small_data.train_idx[:512]), epochs=1, seed=0)
    assert state.step == 1
    state = train(R4Config.variant("Base"), subset(small_data, small_data.train_idx[:513]), epochs=1, seed=0)
    assert state.step == 2  # last partial batch kept


def test_loss_decreases(small_data):
    firsts, lasts = [], []
    for seed in range(3):
        state = train(R4Config.variant("Base"), small_data, epochs=5, seed=seed)
        losses = epoch_losses(state, len(small_data.train_idx))
        firsts.append(losses[0])
        lasts.append(losses[-1])
    assert np.median(lasts) < np.median(firsts)


def test_overfit_small_set(small_data):
    cfg = variant_config("R4-WoDenseNet")
    data = subset(small_data, small_data.train_idx[:64])
    state = train(cfg, data, epochs=300, seed=0)
    assert np.mean([e["loss"] for e in state.log[-5:]]) < 0.05


def test_resume_bit_exact(small_data):
    cfg = R4Config.variant("R4-C")
    data = subset(small_data, small_data.train_idx[:1500])
    full = train(cfg, data, epochs=2, seed=3)
    part = train(cfg, data, epochs=2, seed=3, max_steps=4)
    assert part.step == 4 and part.epoch == 1 and part.batch == 1
    resumed = train(cfg, data, epochs=2, seed=3, state=part)
    assert resumed.params.digest() == full.params.digest()
    assert [e["loss"] for e in resumed.log] == [e["loss"] for e in full.log]


def test_resume_through_checkpoint(small_data, tmp_path):
    cfg = R4Config.variant("R4-C")
    data = subset(small_data, small_data.train_idx[:1500])
    full = train(cfg, data, epochs=2, seed=3)
    part = train(cfg, data, epochs=2, seed=3, max_steps=5)
    save(tmp_path / "p.npz", part, cfg, data, seed=3)
    resumed = train(cfg, data, epochs=2, seed=3, state=load(tmp_path / "p.npz").state())
    assert resumed.params.digest() == full.params.digest()


def test_nan_aborts(small_data):
    data = subset(small_data, small_data.train_idx[:600])
    bad = dataclasses.replace(data.encoded, usr_cont=data.encoded.usr_cont.copy())
    bad.usr_cont[data.train_idx[:600]] = np.nan
    with pytest.raises(TrainingError, match="non-finite loss at step 0"):
        train(R4Config.variant("Base"), dataclasses.replace(data, encoded=bad), epochs=1, seed=0)


def test_lr_schedule_logged(small_data):
    state = train(R4Config.variant("Base"), small_data, epochs=1, seed=0)
    assert state.log[0]["lr"] == 0.001
    assert all(e["lr"] == nn.exp_decay(e["step"]) for e in state.log)
