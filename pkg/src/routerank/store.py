"""Precomputed user embeddings keyed by model version, and record ranking.

User embeddings depend only on a user's navigation history, so they can be
computed once per model version and looked up at ranking time.  Both the
stored path and the on-the-fly path compute one user at a time through
:func:`user_embedding`, which keeps their results bit-identical.
"""

from __future__ import annotations

import io
import json
import time
from dataclasses import dataclass
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from routerank.model import rank_scores
from routerank.nncore import sigmoid
from routerank.schema import HISTORY_LEN
from routerank.trainer import LoadedModel, encode_for

STORE_FORMAT = "routerank-user-store/1"


class StoreVersionError(ValueError):
    """The store was built by a different model version."""


def user_embedding(loaded: LoadedModel, item_disc, item_cont, positions) -> np.ndarray:
    """Embedding of one user from the positions of their latest history items."""
    T = HISTORY_LEN
    positions = list(positions)[-T:]
    if not positions:
        return np.zeros(loaded.model.cfg.route_embed_dim)
    hist = np.full((1, T), -1, dtype=np.int64)
    hist[0, T - len(positions) :] = positions
    batch = SimpleNamespace(hist=hist, hist_mask=hist >= 0, item_disc=item_disc, item_cont=item_cont)
    return loaded.model.user_embedding(loaded.params, batch)[0]


def _items(loaded: LoadedModel, graph, records):
    enc = encode_for(loaded, graph, records, [(0, records[0].chosen_index)])
    return enc.item_disc, enc.item_cont


@dataclass
class UserEmbeddingStore:
    user_ids: np.ndarray
    embeddings: np.ndarray
    built_at: str
    model_hash: str

    def __post_init__(self) -> None:
        self._row = {int(u): i for i, u in enumerate(self.user_ids.tolist())}

    def __contains__(self, user_id: int) -> bool:
        return int(user_id) in self._row

    def get(self, user_id: int, model_hash: str) -> np.ndarray:
        if model_hash != self.model_hash:
            raise StoreVersionError(f"store built for model {self.model_hash}, requested {model_hash}")
        return self.embeddings[self._row[int(user_id)]]

    def save(self, path) -> None:
        meta = {"format": STORE_FORMAT, "built_at": self.built_at, "model_hash": self.model_hash}
        buf = io.BytesIO()
        np.savez(
            buf,
            user_ids=self.user_ids,
            embeddings=self.embeddings,
            __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
        )
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path, expected_hash: str | None = None) -> "UserEmbeddingStore":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            if meta.get("format") != STORE_FORMAT:
                raise ValueError(f"{path}: not a user store")
            store = cls(z["user_ids"], z["embeddings"], meta["built_at"], meta["model_hash"])
        if expected_hash is not None and store.model_hash != expected_hash:
            raise StoreVersionError(f"{path}: built for model {store.model_hash}, checkpoint is {expected_hash}")
        return store


def build_user_store(loaded: LoadedModel, graph, records, user_ids=None, built_at: str | None = None) -> UserEmbeddingStore:
    """Embed each user's latest history from ``records`` (chronological)."""
    if loaded.model.cfg.wo_user:
        raise ValueError("checkpoint has no user network")
    history: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        history.setdefault(r.user_id, []).append(i)
    ids = sorted(set(history) | set(user_ids or ()))
    dim = loaded.model.cfg.route_embed_dim
    emb = np.zeros((len(ids), dim))
    if records:
        item_disc, item_cont = _items(loaded, graph, records)
        for row, u in enumerate(ids):
            emb[row] = user_embedding(loaded, item_disc, item_cont, history.get(u, []))
    stamp = built_at if built_at is not None else time.strftime("%Y-%m-%dT%H:%M:%S")
    return UserEmbeddingStore(np.array(ids, dtype=np.int64), emb, stamp, loaded.model_hash)


def rank_record(loaded: LoadedModel, graph, records, position: int, store: UserEmbeddingStore | None = None):
    """Rank every candidate of ``records[position]``; returns (order, scores).

    With a store the user embedding is looked up, otherwise it is computed
    from the user's earlier records in ``records``.
    """
    rec = records[position]
    pairs = [(position, j) for j in range(len(rec.candidates))]
    enc = encode_for(loaded, graph, records, pairs)
    model = loaded.model
    if model.cfg.wo_user:
        z = model.forward(loaded.params, enc)[0]
    else:
        if store is not None and rec.user_id in store:
            u = store.get(rec.user_id, loaded.model_hash)
        else:
            earlier = [i for i in range(position) if records[i].user_id == rec.user_id]
            u = user_embedding(loaded, enc.item_disc, enc.item_cont, earlier)
        z = model.forward_with_user(loaded.params, enc, np.tile(u, (len(rec.candidates), 1)))
    scores = sigmoid(z)
    return rank_scores(scores), scores
