import dataclasses

import numpy as np
import pytest

from oracles import permute_links
from routerank import nncore as nn
from routerank.model import (
    R4Config,
    R4Model,
    base_forward,
    cross_network,
    dense_feature_map,
    dense_net_forward,
    rank_candidates,
    rank_scores,
    sparse_forward,
    user_forward,
    variant_config,
)
from routerank.trainer import encode_for, load, save, train


def perturbed(params, rng, scale=0.3):
    """Random non-zero values everywhere, including the zero-initialized layers."""
    return nn.ModelParams({k: v + rng.normal(0, scale, v.shape) for k, v in params.items()})


@pytest.fixture(scope="module")
def batch(small_data):
    return small_data.train.take(np.arange(40))


def test_output_in_unit_interval(small_data, batch, rng):
    model = R4Model(R4Config(resnet_depth=20), small_data.schema)
    params = perturbed(model.init(small_data.vocab.size, 0), rng, 0.01)
    p = model.predict(params, batch)
    assert ((p > 0) & (p < 1)).all() and p.std() > 0
    assert np.all(model.predict(model.init(small_data.vocab.size, 0), batch) == 0.5)


def test_sparse_single_link(small_data, batch, rng):
    cfg = R4Config()
    params = perturbed(R4Model(cfg, small_data.schema).init(small_data.vocab.size, 0), rng)
    one = batch.take([0], trim=False)
    one.mask = np.zeros_like(one.mask)
    one.mask[0, 0] = True
    out = sparse_forward(cfg, small_data.schema, params, one)[0]
    from routerank.schema import composite_forward

    fs = composite_forward(params, small_data.schema, "f_s", one)[0, 0]
    h = np.maximum(fs @ params["sparse/W1"] + params["sparse/b1"], 0) @ params["sparse/W2"] + params["sparse/b2"]
    assert out.shape == (1, 64)
    assert np.allclose(out[0], h, rtol=0, atol=1e-12)


def test_sparse_permutation_invariant(small_data, batch, rng):
    cfg = R4Config()
    params = perturbed(R4Model(cfg, small_data.schema).init(small_data.vocab.size, 0), rng)
    shuffled = permute_links(batch, lambda n: rng.permutation(n))
    a = sparse_forward(cfg, small_data.schema, params, batch)[0]
    b = sparse_forward(cfg, small_data.schema, params, shuffled)[0]
    assert np.array_equal(a, b)


def test_dense_order_sensitive(small_data, batch, rng):
    cfg = R4Config(resnet_depth=20)
    params = perturbed(R4Model(cfg, small_data.schema).init(small_data.vocab.size, 0), rng)
    i = int(np.argmax(batch.mask.sum(axis=1)))
    one = batch.take([i])
    rev = permute_links(one, lambda n: np.arange(n)[::-1])
    a = dense_net_forward(cfg, small_data.schema, params, one)[0]
    b = dense_net_forward(cfg, small_data.schema, params, rev)[0]
    assert not np.allclose(a, b)


def test_dense_zero_tail_sums_projection(small_data, batch):
    cfg = R4Config(resnet_depth=20)
    params = R4Model(cfg, small_data.schema).init(small_data.vocab.size, 3)
    fmap = dense_feature_map(cfg, small_data.schema, params, batch)
    from routerank.schema import composite_forward

    fd = composite_forward(params, small_data.schema, "f_d", batch)
    proj = (fd @ params["dense/Ws"] + params["dense/bs"]) * batch.mask[:, :, None]
    assert np.array_equal(fmap, proj)
    out = dense_net_forward(cfg, small_data.schema, params, batch)[0]
    assert np.array_equal(out, nn.sum_pool_forward(proj, batch.mask.astype(float))[0])


@pytest.mark.parametrize("trained", [False, True])
def test_dense_receptive_field(small_data, batch, rng, trained):
    cfg = R4Config(resnet_depth=20)
    params = R4Model(cfg, small_data.schema).init(small_data.vocab.size, 1)
    if trained:
        params = perturbed(params, rng)
    i = int(np.argmax(batch.mask.sum(axis=1)))
    one = batch.take([i])
    M = int(one.mask.sum())
    assert M >= 15
    pos = M // 2
    base = dense_feature_map(cfg, small_data.schema, params, one)[0, pos]
    for j in range(M):
        moved = dataclasses.replace(one, ls_cont=one.ls_cont.copy())
        moved.ls_cont[0, j] += 3.0
        out = dense_feature_map(cfg, small_data.schema, params, moved)[0, pos]
        if abs(j - pos) > 6:
            assert np.abs(out - base).max() <= (1e-9 if trained else 0.0)
        elif trained and abs(j - pos) == 6:
            assert np.abs(out - base).max() > 0


def test_user_empty_history_zero(small_data, batch, rng):
    cfg = R4Config()
    params = perturbed(R4Model(cfg, small_data.schema).init(small_data.vocab.size, 0), rng)
    empty = dataclasses.replace(batch, hist_mask=np.zeros_like(batch.hist_mask), hist=np.full_like(batch.hist, -1))
    assert np.array_equal(user_forward(cfg, small_data.schema, params, empty)[0], np.zeros((len(batch), 64)))


def test_user_permutation_invariant(small_data, batch, rng):
    cfg = R4Config()
    params = perturbed(R4Model(cfg, small_data.schema).init(small_data.vocab.size, 0), rng)
    perm = rng.permutation(batch.hist.shape[1])
    shuffled = dataclasses.replace(batch, hist=batch.hist[:, perm], hist_mask=batch.hist_mask[:, perm])
    a = user_forward(cfg, small_data.schema, params, batch)[0]
    b = user_forward(cfg, small_data.schema, params, shuffled)[0]
    assert batch.hist_mask.any()
    assert np.array_equal(a, b)


def test_cross_network_identity_at_zero(rng):
    x0 = rng.normal(size=(3, 4))
    params = {f"cross{i}/W": np.zeros((4, 4)) for i in range(2)} | {f"cross{i}/b": np.zeros(4) for i in range(2)}
    assert np.array_equal(cross_network(params, x0, 2)[0], x0)


def test_ablate_everything_is_base(small_data, batch, rng):
    cfg = R4Config.variant("Base")
    model = R4Model(cfg, small_data.schema)
    params = perturbed(model.init(small_data.vocab.size, 2), rng)
    assert np.array_equal(model.forward(params, batch)[0], base_forward(params, small_data.schema, batch))


@pytest.mark.parametrize("name", ["R4", "Base", "R4-WoU", "R4-WoDP", "R4-WoB"])
def test_full_model_gradient(small_data, name):
    """End-to-end finite-difference check on a tiny configuration."""
    rng = np.random.default_rng(5)
    cfg = variant_config(name, resnet_depth=20, dense_channels=4, route_embed_dim=6, user_hidden=5, deep_layers=(6,))
    model = R4Model(cfg, small_data.schema)
    params = perturbed(model.init(small_data.vocab.size, 0), rng, 0.2)
    enc = small_data.train.take(np.arange(6))
    enc = dataclasses.replace(enc, y=rng.integers(0, 2, len(enc)))
    _, grads = model.loss_and_grads(params, enc)
    loss = lambda: model.loss_and_grads(params, enc)[0]  # noqa: E731
    for k, v in params.items():
        g = grads[k].ravel()
        # sample the entries that matter plus a few random ones
        idx = np.unique(np.concatenate([np.argsort(-np.abs(g))[:4], rng.integers(0, v.size, 4)]))
        numeric = nn.numeric_grad(loss, v, 1e-4, indices=idx.tolist()).ravel()[idx]
        err = np.abs(g[idx] - numeric) / np.maximum(np.maximum(np.abs(g[idx]), np.abs(numeric)), 1e-6)
        assert err.max() <= 1e-4, k


def test_rank_scores():
    assert rank_scores([0.4, 0.1, 0.9]) == [1, 0, 2]
    assert rank_scores([0.3, 0.3, 0.3]) == [0, 1, 2]
    assert rank_scores([0.7]) == [0]


def test_rank_candidates(small_world, small_data, rng):
    graph, records, _ = small_world
    cfg = R4Config(resnet_depth=20)
    model = R4Model(cfg, small_data.schema)
    params = perturbed(model.init(small_data.vocab.size, 0), rng)
    from routerank.schema import FeatureExtractor, encode

    pos = 2500
    pairs = [(pos, j) for j in range(len(records[pos].candidates))]
    enc = encode(FeatureExtractor(graph).extract(records, pairs), small_data.schema, small_data.vocab)
    order, scores = rank_candidates(model, params, enc)
    assert sorted(order) == list(range(len(pairs)))
    assert np.all(np.diff(scores[order]) >= 0)


def test_checkpoint_roundtrip_predictions(small_world, small_data, tmp_path):
    graph, records, _ = small_world
    cfg = R4Config.variant("R4-C")
    state = train(cfg, small_data, epochs=1, seed=0, max_steps=2)
    save(tmp_path / "m.npz", state, cfg, small_data, seed=0)
    loaded = load(tmp_path / "m.npz")
    assert loaded.params.digest() == state.params.digest()
    assert loaded.model.cfg == cfg
    test = small_data.test.take(np.arange(50))
    a = R4Model(cfg, small_data.schema).predict(state.params, test)
    assert np.array_equal(loaded.model.predict(loaded.params, test), a)
    # re-encoding from raw records with the stored schema and vocabulary
    enc = encode_for(loaded, graph, records, [(i, records[i].chosen_index) for i in small_data.test_idx[:50]])
    assert np.allclose(loaded.model.predict(loaded.params, enc), a, rtol=0, atol=1e-12)
