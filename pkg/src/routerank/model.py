"""R4 ranking network and its ablations.

Inputs per (record, candidate) sample come from :class:`routerank.schema.Encoded`.
The network concatenates

* basic features ``f_c + f_u + f_r``,
* the sparse route embedding: per-link ``f_s = l_e + l_d + l_p`` through a
  shared one-hidden-layer MLP, sum-pooled over links,
* the dense route embedding: per-link ``f_d = l_s + l_d + l_p``, a pointwise
  stem, a stack of basic residual blocks of kernel-3 convolutions along the
  link axis, summed over links,
* the user embedding: an MLP over each of the latest 30 history items
  ``f_e``, sum-pooled,

and feeds the result through a stacked DCN-V2 head (full-rank cross layers,
then a deep MLP) to a single logit.  ``sigmoid(logit)`` is the predicted
deviation rate.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from routerank import nncore as nn
from routerank.schema import Encoded, FeatureSchema, domain_backward, domain_forward, table_name

EMBED_INIT = 0.05

VARIANTS = (
    "Base",
    "R4",
    "R4-WoS",
    "R4-WoDenseNet",
    "R4-WoU",
    "R4-WoB",
    "R4-WoDP",
    "R4-WoP",
    "R4-WoDynFeat",
    "R4-C",
)


@dataclass(frozen=True)
class R4Config:
    link_embed_dim: int = 32
    route_embed_dim: int = 64
    resnet_depth: int = 50
    dense_channels: int = 32
    cross_layers: int = 2
    deep_layers: tuple[int, ...] = (128, 64)
    user_hidden: int = 64
    wo_sparse: bool = False
    wo_dense_net: bool = False
    wo_user: bool = False
    wo_route_feats: bool = False
    wo_dynamic: bool = False
    wo_position: bool = False
    name: str = "R4"

    def __post_init__(self) -> None:
        nn.blocks_for_depth(self.resnet_depth)

    @classmethod
    def variant(cls, name: str) -> "R4Config":
        flags = {
            "Base": dict(wo_sparse=True, wo_dense_net=True, wo_user=True, wo_dynamic=True, wo_position=True),
            "R4": {},
            "R4-WoS": dict(wo_sparse=True),
            "R4-WoDenseNet": dict(wo_dense_net=True),
            "R4-WoU": dict(wo_user=True),
            "R4-WoB": dict(wo_route_feats=True),
            "R4-WoDP": dict(wo_dynamic=True, wo_position=True),
            "R4-WoP": dict(wo_position=True),
            "R4-WoDynFeat": dict(wo_dynamic=True),
            "R4-C": dict(resnet_depth=20),
        }
        if name not in flags:
            raise ValueError(f"unknown variant {name!r}; choose from {VARIANTS}")
        return cls(name=name, **flags[name])

    @property
    def uses_routes(self) -> bool:
        return not (self.wo_sparse and self.wo_dense_net)

    def setting(self) -> str:
        """Short hyperparameter string in the style of a results table."""
        parts = []
        if not self.wo_sparse:
            parts += [f"e={self.link_embed_dim}", f"h={self.route_embed_dim}"]
        if not self.wo_dense_net:
            parts.append(f"ResNet{self.resnet_depth}")
        return ", ".join(parts) if parts else "-"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["deep_layers"] = list(self.deep_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "R4Config":
        d = dict(d)
        d["deep_layers"] = tuple(d["deep_layers"])
        return cls(**d)


def _link_extra_dim(cfg: R4Config, schema: FeatureSchema) -> int:
    return (0 if cfg.wo_dynamic else schema.dim("l_d")) + (0 if cfg.wo_position else schema.dim("l_p"))


def input_dims(cfg: R4Config, schema: FeatureSchema) -> dict[str, int]:
    dims = {"f_c": schema.dim("f_c"), "f_u": schema.dim("f_u")}
    if not cfg.wo_route_feats:
        dims["f_r"] = schema.dim("f_r")
    if not cfg.wo_sparse:
        dims["sparse"] = cfg.route_embed_dim
    if not cfg.wo_dense_net:
        dims["dense"] = cfg.dense_channels
    if not cfg.wo_user:
        dims["user"] = cfg.route_embed_dim
    return dims


def init_params(cfg: R4Config, schema: FeatureSchema, vocab_size: int, seed: int) -> nn.ModelParams:
    """Embeddings U(-0.05, 0.05), He-normal layers; residual tails, cross layers and the output layer start at zero."""
    rng = np.random.default_rng(seed)
    p = nn.ModelParams()
    tables = schema.tables()
    used = ["time_bucket", "age_bucket"]
    if cfg.uses_routes and not cfg.wo_dynamic:
        used.append("traffic_level")
    if not cfg.wo_dense_net:
        used += [f.name for f in schema.discrete("l_s")]
    for name in dict.fromkeys(used):
        spec = tables[name]
        p[table_name(name)] = rng.uniform(-EMBED_INIT, EMBED_INIT, (spec.cardinality, spec.embedding_dim))
    if not cfg.wo_sparse:
        p["emb/link_id"] = rng.uniform(-EMBED_INIT, EMBED_INIT, (vocab_size, cfg.link_embed_dim))
        d_in = cfg.link_embed_dim + _link_extra_dim(cfg, schema)
        h = cfg.route_embed_dim
        p["sparse/W1"] = nn.he_normal(rng, d_in, (d_in, h))
        p["sparse/b1"] = np.zeros(h)
        p["sparse/W2"] = nn.he_normal(rng, h, (h, h))
        p["sparse/b2"] = np.zeros(h)
    if not cfg.wo_dense_net:
        d_in = schema.dim("l_s") + _link_extra_dim(cfg, schema)
        c = cfg.dense_channels
        p["dense/Ws"] = nn.he_normal(rng, d_in, (d_in, c))
        p["dense/bs"] = np.zeros(c)
        for i in range(nn.blocks_for_depth(cfg.resnet_depth)):
            p[f"dense/block{i}/K1"] = nn.he_normal(rng, 3 * c, (3, c, c))
            p[f"dense/block{i}/b1"] = np.zeros(c)
            p[f"dense/block{i}/K2"] = np.zeros((3, c, c))
            p[f"dense/block{i}/b2"] = np.zeros(c)
    if not cfg.wo_user:
        d_in = schema.dim("f_e")
        p["user/W1"] = nn.he_normal(rng, d_in, (d_in, cfg.user_hidden))
        p["user/b1"] = np.zeros(cfg.user_hidden)
        p["user/W2"] = nn.he_normal(rng, cfg.user_hidden, (cfg.user_hidden, cfg.route_embed_dim))
        p["user/b2"] = np.zeros(cfg.route_embed_dim)
    _init_head(p, rng, sum(input_dims(cfg, schema).values()), cfg)
    return p


def _init_head(p: nn.ModelParams, rng, d: int, cfg: R4Config) -> None:
    for i in range(cfg.cross_layers):
        p[f"cross{i}/W"] = np.zeros((d, d))
        p[f"cross{i}/b"] = np.zeros(d)
    prev = d
    for i, width in enumerate(cfg.deep_layers):
        p[f"deep{i}/W"] = nn.he_normal(rng, prev, (prev, width))
        p[f"deep{i}/b"] = np.zeros(width)
        prev = width
    p["out/W"] = np.zeros((prev, 1))  # start every prediction at 0.5
    p["out/b"] = np.zeros(1)


# ---------------------------------------------------------------- sub-networks


def _link_extras(cfg: R4Config, schema: FeatureSchema, params, enc: Encoded) -> list[np.ndarray]:
    out = []
    if not cfg.wo_dynamic:
        out.append(domain_forward(params, schema, "l_d", enc.ld_disc, enc.ld_cont))
    if not cfg.wo_position:
        out.append(enc.lp_cont)
    return out


def _link_extras_backward(cfg, schema, params, grads, enc: Encoded, dextra: np.ndarray) -> None:
    if not cfg.wo_dynamic:
        domain_backward(params, grads, schema, "l_d", enc.ld_disc, dextra[..., : schema.dim("l_d")])


def sparse_forward(cfg: R4Config, schema: FeatureSchema, params, enc: Encoded):
    """Route embedding from link-id embeddings: shared MLP then masked sum."""
    mask = enc.mask.astype(np.float64)
    le = params["emb/link_id"][enc.link_row]
    fs = np.concatenate([le] + _link_extras(cfg, schema, params, enc), axis=-1)
    h1, c1 = nn.dense_forward(params["sparse/W1"], params["sparse/b1"], fs)
    a1, cr = nn.relu_forward(h1)
    h2, c2 = nn.dense_forward(params["sparse/W2"], params["sparse/b2"], a1)
    out, _ = nn.sum_pool_forward(h2, mask)
    return out, (mask, c1, cr, c2)


def sparse_backward(cfg, schema, params, grads, enc: Encoded, dout, cache) -> None:
    mask, c1, cr, c2 = cache
    dh2 = nn.sum_pool_backward(dout, mask)
    da1, gW2, gb2 = nn.dense_backward(dh2, c2)
    dh1 = nn.relu_backward(da1, cr)
    dfs, gW1, gb1 = nn.dense_backward(dh1, c1)
    grads["sparse/W2"] += gW2
    grads["sparse/b2"] += gb2
    grads["sparse/W1"] += gW1
    grads["sparse/b1"] += gb1
    e = cfg.link_embed_dim
    rows = enc.link_row.reshape(-1)
    np.add.at(grads["emb/link_id"], rows, dfs[..., :e].reshape(-1, e))
    _link_extras_backward(cfg, schema, params, grads, enc, dfs[..., e:])


def dense_net_forward(cfg: R4Config, schema: FeatureSchema, params, enc: Encoded):
    """Residual 1-D convolution stack over per-link attributes, summed over links."""
    mask = enc.mask.astype(np.float64)
    ls = domain_forward(params, schema, "l_s", enc.ls_disc, enc.ls_cont)
    fd = np.concatenate([ls] + _link_extras(cfg, schema, params, enc), axis=-1)
    x, cs = nn.dense_forward(params["dense/Ws"], params["dense/bs"], fd)
    x = x * mask[:, :, None]
    caches = []
    for i in range(nn.blocks_for_depth(cfg.resnet_depth)):
        x, c = nn.residual_block_forward(_block(params, i), x, mask)
        caches.append(c)
    out, _ = nn.sum_pool_forward(x, mask)
    return out, (mask, cs, caches)


def dense_feature_map(cfg: R4Config, schema: FeatureSchema, params, enc: Encoded) -> np.ndarray:
    """Per-position output of the convolution stack, shape (B, M, channels)."""
    mask = enc.mask.astype(np.float64)
    ls = domain_forward(params, schema, "l_s", enc.ls_disc, enc.ls_cont)
    fd = np.concatenate([ls] + _link_extras(cfg, schema, params, enc), axis=-1)
    x = nn.dense_forward(params["dense/Ws"], params["dense/bs"], fd)[0] * mask[:, :, None]
    for i in range(nn.blocks_for_depth(cfg.resnet_depth)):
        x = nn.residual_block_forward(_block(params, i), x, mask)[0]
    return x


def _block(params, i: int) -> dict:
    pre = f"dense/block{i}/"
    return {k: params[pre + k] for k in ("K1", "b1", "K2", "b2")}


def dense_net_backward(cfg, schema, params, grads, enc: Encoded, dout, cache) -> None:
    mask, cs, caches = cache
    dx = nn.sum_pool_backward(dout, mask)
    for i in reversed(range(len(caches))):
        dx, g = nn.residual_block_backward(dx, caches[i])
        for k, v in g.items():
            grads[f"dense/block{i}/{k}"] += v
    dx = dx * mask[:, :, None]
    dfd, gW, gb = nn.dense_backward(dx, cs)
    grads["dense/Ws"] += gW
    grads["dense/bs"] += gb
    n_ls = schema.dim("l_s")
    domain_backward(params, grads, schema, "l_s", enc.ls_disc, dfd[..., :n_ls])
    _link_extras_backward(cfg, schema, params, grads, enc, dfd[..., n_ls:])


def user_forward(cfg: R4Config, schema: FeatureSchema, params, enc: Encoded):
    """Sum over the history window of a per-item MLP; empty history gives zeros."""
    mask = enc.hist_mask.astype(np.float64)
    used = np.unique(enc.hist[enc.hist_mask])
    n_fc = len(schema.continuous("f_c"))
    fc = domain_forward(params, schema, "f_c", enc.item_disc[used], enc.item_cont[used, :n_fc])
    fe = np.concatenate([fc, enc.item_cont[used, n_fc:]], axis=1)
    slot = np.searchsorted(used, np.where(enc.hist_mask, enc.hist, used[0] if len(used) else 0))
    x = fe[slot] if len(used) else np.zeros(enc.hist.shape + (schema.dim("f_e"),))
    h1, c1 = nn.dense_forward(params["user/W1"], params["user/b1"], x)
    a1, cr = nn.relu_forward(h1)
    h2, c2 = nn.dense_forward(params["user/W2"], params["user/b2"], a1)
    out, _ = nn.sum_pool_forward(h2, mask)
    return out, (mask, used, slot, c1, cr, c2)


def user_backward(cfg, schema, params, grads, enc: Encoded, dout, cache) -> None:
    mask, used, slot, c1, cr, c2 = cache
    dh2 = nn.sum_pool_backward(dout, mask)
    da1, gW2, gb2 = nn.dense_backward(dh2, c2)
    dh1 = nn.relu_backward(da1, cr)
    dx, gW1, gb1 = nn.dense_backward(dh1, c1)
    grads["user/W2"] += gW2
    grads["user/b2"] += gb2
    grads["user/W1"] += gW1
    grads["user/b1"] += gb1
    if not len(used):
        return
    dx = dx * mask[:, :, None]
    n_fc_dim = schema.dim("f_c")
    dfe = np.zeros((len(used), dx.shape[-1]))
    np.add.at(dfe, slot.reshape(-1), dx.reshape(-1, dx.shape[-1]))
    domain_backward(params, grads, schema, "f_c", enc.item_disc[used], dfe[:, :n_fc_dim])


def cross_network(params, x0: np.ndarray, n_layers: int):
    x = x0
    caches = []
    for i in range(n_layers):
        x, c = nn.cross_forward(params[f"cross{i}/W"], params[f"cross{i}/b"], x0, x)
        caches.append(c)
    return x, caches


def deep_network(params, x: np.ndarray, n_layers: int):
    caches = []
    for i in range(n_layers):
        h, cd = nn.dense_forward(params[f"deep{i}/W"], params[f"deep{i}/b"], x)
        x, cr = nn.relu_forward(h)
        caches.append((cd, cr))
    return x, caches


def head_forward(cfg: R4Config, params, x0: np.ndarray):
    x, cc = cross_network(params, x0, cfg.cross_layers)
    x, cd = deep_network(params, x, len(cfg.deep_layers))
    z, co = nn.dense_forward(params["out/W"], params["out/b"], x)
    return z[:, 0], (cc, cd, co)


def head_backward(cfg, params, grads, dz, cache) -> np.ndarray:
    cc, cd, co = cache
    dx, gW, gb = nn.dense_backward(dz[:, None], co)
    grads["out/W"] += gW
    grads["out/b"] += gb
    for i in reversed(range(len(cd))):
        cdense, cr = cd[i]
        dh = nn.relu_backward(dx, cr)
        dx, gW, gb = nn.dense_backward(dh, cdense)
        grads[f"deep{i}/W"] += gW
        grads[f"deep{i}/b"] += gb
    dx0 = np.zeros_like(dx)
    for i in reversed(range(len(cc))):
        d0, dx, gW, gb = nn.cross_backward(dx, cc[i])
        dx0 += d0
        grads[f"cross{i}/W"] += gW
        grads[f"cross{i}/b"] += gb
    return dx0 + dx


# ---------------------------------------------------------------- full model


class R4Model:
    """Forward/backward for one configuration over a fixed feature schema."""

    def __init__(self, cfg: R4Config, schema: FeatureSchema):
        self.cfg = cfg
        self.schema = schema
        self.dims = input_dims(cfg, schema)

    def init(self, vocab_size: int, seed: int) -> nn.ModelParams:
        return init_params(self.cfg, self.schema, vocab_size, seed)

    def forward(self, params, enc: Encoded):
        """Logits for every sample plus a backward cache."""
        cfg, schema = self.cfg, self.schema
        parts = {
            "f_c": domain_forward(params, schema, "f_c", enc.ctx_disc, enc.ctx_cont),
            "f_u": domain_forward(params, schema, "f_u", enc.usr_disc, enc.usr_cont),
        }
        caches = {}
        if not cfg.wo_route_feats:
            parts["f_r"] = enc.rte_cont
        if not cfg.wo_sparse:
            parts["sparse"], caches["sparse"] = sparse_forward(cfg, schema, params, enc)
        if not cfg.wo_dense_net:
            parts["dense"], caches["dense"] = dense_net_forward(cfg, schema, params, enc)
        if not cfg.wo_user:
            parts["user"], caches["user"] = user_forward(cfg, schema, params, enc)
        x0 = np.concatenate([parts[k] for k in self.dims], axis=1)
        z, caches["head"] = head_forward(cfg, params, x0)
        return z, caches

    def backward(self, params, enc: Encoded, dz: np.ndarray, caches) -> nn.ModelParams:
        cfg, schema = self.cfg, self.schema
        grads = params.zeros_like()
        dx0 = head_backward(cfg, params, grads, dz, caches["head"])
        split = np.cumsum([self.dims[k] for k in self.dims])[:-1]
        d = dict(zip(self.dims, np.split(dx0, split, axis=1)))
        domain_backward(params, grads, schema, "f_c", enc.ctx_disc, d["f_c"])
        domain_backward(params, grads, schema, "f_u", enc.usr_disc, d["f_u"])
        if "sparse" in d:
            sparse_backward(cfg, schema, params, grads, enc, d["sparse"], caches["sparse"])
        if "dense" in d:
            dense_net_backward(cfg, schema, params, grads, enc, d["dense"], caches["dense"])
        if "user" in d:
            user_backward(cfg, schema, params, grads, enc, d["user"], caches["user"])
        return grads

    def loss_and_grads(self, params, enc: Encoded):
        z, caches = self.forward(params, enc)
        loss, dz = nn.bce_with_logits(z, enc.y)
        return loss, self.backward(params, enc, dz, caches)

    def predict(self, params, enc: Encoded, batch_size: int = 4096) -> np.ndarray:
        out = np.empty(len(enc))
        for s in range(0, len(enc), batch_size):
            idx = np.arange(s, min(s + batch_size, len(enc)))
            out[idx] = nn.sigmoid(self.forward(params, enc.take(idx))[0])
        return out

    def user_embedding(self, params, enc: Encoded) -> np.ndarray:
        if self.cfg.wo_user:
            raise ValueError("configuration has no user network")
        return user_forward(self.cfg, self.schema, params, enc)[0]

    def forward_with_user(self, params, enc: Encoded, user_emb: np.ndarray) -> np.ndarray:
        """Logits with precomputed user embeddings substituted for the user network."""
        cfg, schema = self.cfg, self.schema
        parts = {
            "f_c": domain_forward(params, schema, "f_c", enc.ctx_disc, enc.ctx_cont),
            "f_u": domain_forward(params, schema, "f_u", enc.usr_disc, enc.usr_cont),
        }
        if not cfg.wo_route_feats:
            parts["f_r"] = enc.rte_cont
        if not cfg.wo_sparse:
            parts["sparse"] = sparse_forward(cfg, schema, params, enc)[0]
        if not cfg.wo_dense_net:
            parts["dense"] = dense_net_forward(cfg, schema, params, enc)[0]
        parts["user"] = user_emb
        x0 = np.concatenate([parts[k] for k in self.dims], axis=1)
        return head_forward(cfg, params, x0)[0]


def base_forward(params, schema: FeatureSchema, enc: Encoded, cfg: R4Config | None = None) -> np.ndarray:
    """Base model: DCN-V2 over the basic features only; returns logits."""
    cfg = cfg or R4Config.variant("Base")
    x0 = np.concatenate(
        [
            domain_forward(params, schema, "f_c", enc.ctx_disc, enc.ctx_cont),
            domain_forward(params, schema, "f_u", enc.usr_disc, enc.usr_cont),
            enc.rte_cont,
        ],
        axis=1,
    )
    return head_forward(cfg, params, x0)[0]


def rank_scores(scores) -> list[int]:
    """Candidate indices by ascending predicted DR; ties keep index order."""
    return np.argsort(np.asarray(scores, dtype=np.float64), kind="stable").tolist()


def rank_candidates(model: R4Model, params, enc: Encoded) -> tuple[list[int], np.ndarray]:
    """Rank the candidates in ``enc`` (all from one record); returns order and scores."""
    if len(enc) < 1:
        raise ValueError("no candidates to rank")
    scores = model.predict(params, enc)
    return rank_scores(scores), scores


def inference_time(model: R4Model, params, enc: Encoded, repeats: int = 1) -> float:
    """Best wall-clock seconds for predicting every sample in ``enc``."""
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        model.predict(params, enc)
        best = min(best, time.perf_counter() - t)
    return best


def variant_config(name: str, **overrides) -> R4Config:
    return replace(R4Config.variant(name), **overrides)
