"""Similarity unit over link-id embeddings, and k-means clustering of embeddings.

A linear map is fitted from each link's recorded static attributes to its
learned id embedding while the ranking model stays frozen.  Links whose
embedding the map cannot reproduce (low cosine) carry information that the
recorded attributes miss; the bottom decile is flagged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binomtest

from routerank import nncore as nn
from routerank.schema import fit_stats, normalize_continuous
from routerank.synthworld.network import ACTIONS, ROAD_CLASSES, RoadGraph

COSINE_BIAS = 0.2
SUSPICIOUS_FRACTION = 0.1
SIM_EPOCHS = 3000
MIN_CHOSEN = 20
KMEANS_MAX_ITER = 300
KMEANS_TOL = 1e-6


def audit_population(records, vocab, min_chosen: int = MIN_CHOSEN) -> np.ndarray:
    """Vocabulary links that lie on at least ``min_chosen`` chosen routes of ``records``.

    Rarely travelled links keep near-initial embeddings, which say nothing
    about their attributes.
    """
    counts: dict[int, int] = {}
    for r in records:
        for l in set(r.chosen.link_ids):
            counts[l] = counts.get(l, 0) + 1
    ids = [l for l, c in counts.items() if c >= min_chosen and l in vocab.index]
    return np.array(sorted(ids), dtype=np.int64)


def link_embeddings(params, vocab, links) -> np.ndarray:
    return params["emb/link_id"][vocab.lookup_many(links)]


def static_vectors(graph: RoadGraph, links, length_stats=None) -> tuple[np.ndarray, tuple]:
    """One-hot recorded attributes plus z-scored length, shape (n, 25)."""
    ids = np.asarray(links, dtype=np.int64)
    if length_stats is None:
        length_stats = fit_stats(graph.link_length[ids])
    blocks = [
        np.eye(11)[graph.lanes[ids]],
        np.eye(len(ROAD_CLASSES))[graph.link_class[ids]],
        np.eye(len(ACTIONS))[graph.link_action[ids]],
        np.eye(2)[graph.blocked_recorded[ids].astype(np.int64)],
        np.eye(2)[graph.link_traffic_light[ids].astype(np.int64)],
        np.atleast_1d(normalize_continuous(graph.link_length[ids], length_stats))[:, None],
    ]
    return np.concatenate(blocks, axis=1), length_stats


def _with_bias(x: np.ndarray) -> np.ndarray:
    return np.concatenate([x, np.full((len(x), 1), COSINE_BIAS)], axis=1)


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a * b).sum(axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))


def similarity_loss(cos) -> np.ndarray:
    """Per-link ``-log sigmoid(cos)``."""
    return np.logaddexp(0.0, -np.asarray(cos, dtype=np.float64))


@dataclass
class SimilarityMap:
    W: np.ndarray
    b: np.ndarray
    length_stats: tuple
    losses: list[float] = field(default_factory=list)

    def transform(self, static: np.ndarray) -> np.ndarray:
        return static @ self.W + self.b


def _loss_and_grad(W, b, S, E):
    """Mean similarity loss and its gradient for static rows S and embeddings E."""
    T = S @ W + b
    a = _with_bias(E)
    t = _with_bias(T)
    na = np.linalg.norm(a, axis=1)
    nt = np.linalg.norm(t, axis=1)
    cos = (a * t).sum(axis=1) / (na * nt)
    loss = float(similarity_loss(cos).mean())
    dcos = -nn.sigmoid(-cos) / len(cos)
    dt = dcos[:, None] * (a / (na * nt)[:, None] - cos[:, None] * t / (nt**2)[:, None])
    dT = dt[:, :-1]
    return loss, S.T @ dT, dT.sum(axis=0), cos


def fit_similarity(
    embeddings: np.ndarray,
    graph: RoadGraph,
    links,
    epochs: int = SIM_EPOCHS,
    lr: float = nn.LR0,
    seed: int = 0,
) -> SimilarityMap:
    """Fit the static-to-embedding linear map with full-batch Adam.

    ``embeddings`` are the frozen id embeddings of ``links`` (row i belongs
    to ``links[i]``); they are only read.  A step that would raise the loss
    is rejected and the learning rate halved, so the loss sequence is
    non-increasing.
    """
    E = np.asarray(embeddings, dtype=np.float64)
    ids = np.asarray(links, dtype=np.int64)
    if len(ids) == 0 or E.shape[0] != len(ids):
        raise ValueError("need one embedding per link")
    S, stats = static_vectors(graph, ids)
    rng = np.random.default_rng(seed)
    params = nn.ModelParams(W=rng.normal(0.0, 1.0 / np.sqrt(S.shape[1]), (S.shape[1], E.shape[1])), b=np.zeros(E.shape[1]))
    adam = nn.AdamState.zeros(params)
    loss, gW, gb, _ = _loss_and_grad(params["W"], params["b"], S, E)
    losses = [loss]
    for step in range(epochs):
        trial = params.copy()
        trial_adam = nn.AdamState(adam.m.copy(), adam.v.copy(), adam.t)
        nn.adam_step(trial, {"W": gW, "b": gb}, trial_adam, lr * nn.exp_decay(step, 1.0))
        new_loss, nW, nb, _ = _loss_and_grad(trial["W"], trial["b"], S, E)
        if new_loss <= loss:
            params, adam, loss, gW, gb = trial, trial_adam, new_loss, nW, nb
        else:
            lr *= 0.5
        losses.append(loss)
    return SimilarityMap(params["W"], params["b"], stats, losses)


@dataclass
class SimilarityReport:
    link_ids: np.ndarray
    similarity: np.ndarray
    percentile: np.ndarray
    flagged: np.ndarray
    summary: list[str]

    def __len__(self) -> int:
        return len(self.link_ids)

    def lines(self) -> list[str]:
        head = "link_id\tsimilarity\tpercentile\tflag\tstatic"
        rows = [
            f"{l}\t{s:.6f}\t{p:.6f}\t{int(f)}\t{d}"
            for l, s, p, f, d in zip(self.link_ids.tolist(), self.similarity, self.percentile, self.flagged, self.summary)
        ]
        return [head] + rows

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("#format routerank-similarity/1\n")
            fh.write("\n".join(self.lines()) + "\n")


def _summary(graph: RoadGraph, i: int) -> str:
    return (
        f"{ROAD_CLASSES[graph.link_class[i]]},{ACTIONS[graph.link_action[i]]},lanes={graph.lanes[i]},"
        f"blocked={int(graph.blocked_recorded[i])},len={graph.link_length[i]:.3f}"
    )


def rank_suspicious(
    sim: SimilarityMap, embeddings: np.ndarray, graph: RoadGraph, links, fraction: float = SUSPICIOUS_FRACTION
) -> SimilarityReport:
    """Links by ascending cosine between their embedding and the mapped statics."""
    ids = np.asarray(links, dtype=np.int64)
    if len(ids) == 0:
        empty = np.zeros(0)
        return SimilarityReport(ids, empty, empty, np.zeros(0, bool), [])
    S, _ = static_vectors(graph, ids, sim.length_stats)
    cos = cosine_rows(_with_bias(np.asarray(embeddings, dtype=np.float64)), _with_bias(sim.transform(S)))
    order = np.lexsort((ids, cos))
    n = len(ids)
    pct = np.arange(n) / n
    return SimilarityReport(
        link_ids=ids[order],
        similarity=cos[order],
        percentile=pct,
        flagged=pct < fraction,
        summary=[_summary(graph, i) for i in ids[order].tolist()],
    )


def corruption_recall(report: SimilarityReport, corrupted) -> float:
    """Share of the corrupted links present in the report that are flagged."""
    planted = set(np.asarray(corrupted).tolist()) & set(report.link_ids.tolist())
    if not planted:
        return float("nan")
    flagged = set(report.link_ids[report.flagged].tolist())
    return len(planted & flagged) / len(planted)


def planted_classes(graph: RoadGraph) -> dict[str, np.ndarray]:
    """Link classes the corruption targets: truly blocked links and truly single-lane links."""
    return {"blocked": graph.blocked_true.copy(), "single_lane": graph.lanes_true == 1}


def enrichment_pvalues(report: SimilarityReport, graph: RoadGraph, fraction: float = SUSPICIOUS_FRACTION) -> dict:
    """One-sided binomial test per planted class: is the class over-represented among flags?"""
    out = {}
    for name, member in planted_classes(graph).items():
        in_class = member[report.link_ids]
        n = int(in_class.sum())
        k = int((in_class & report.flagged).sum())
        p_flag = float(report.flagged.mean()) if len(report) else fraction
        out[name] = 1.0 if n == 0 else float(binomtest(k, n, p_flag, alternative="greater").pvalue)
    return out


# ---------------------------------------------------------------- clustering


@dataclass
class Clustering:
    labels: np.ndarray
    centroids: np.ndarray
    projection: np.ndarray
    inertia_history: list[float]


def _kmeans_pp(X: np.ndarray, k: int, rng) -> np.ndarray:
    centers = [X[rng.integers(len(X))]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(len(X), p=d2 / total) if total > 0 else rng.integers(len(X))
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _assign(X, C):
    d2 = (X**2).sum(axis=1)[:, None] - 2 * X @ C.T + (C**2).sum(axis=1)[None, :]
    labels = d2.argmin(axis=1)
    return labels, float(np.maximum(d2[np.arange(len(X)), labels], 0).sum())


def pca_2d(X: np.ndarray) -> np.ndarray:
    Xc = X - X.mean(axis=0)
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    comps = vt[:2]
    # fix component signs for reproducible plots
    signs = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    proj = Xc @ (comps * signs[:, None]).T
    if proj.shape[1] < 2:
        proj = np.pad(proj, ((0, 0), (0, 2 - proj.shape[1])))
    return proj


def cluster_embeddings(embeddings, k: int, seed: int = 0) -> Clustering:
    """Lloyd's k-means with k-means++ seeding plus a PCA projection to 2-D."""
    X = np.asarray(embeddings, dtype=np.float64)
    if k < 1 or k > len(X):
        raise ValueError(f"k must be in [1, {len(X)}]")
    rng = np.random.default_rng(seed)
    C = _kmeans_pp(X, k, rng)
    labels, inertia = _assign(X, C)
    history = [inertia]
    for _ in range(KMEANS_MAX_ITER):
        newC = C.copy()
        for j in range(k):
            members = X[labels == j]
            if len(members):
                newC[j] = members.mean(axis=0)
        shift = float(np.abs(newC - C).max())
        C = newC
        labels, inertia = _assign(X, C)
        history.append(inertia)
        if shift < KMEANS_TOL:
            break
    return Clustering(labels, C, pca_2d(X), history)


def write_clusters(path, entity_ids, clustering: Clustering) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("#format routerank-clusters/1\nentity_id\tcluster\tx\ty\n")
        for e, c, (x, y) in zip(entity_ids, clustering.labels.tolist(), clustering.projection.tolist()):
            fh.write(f"{e}\t{c}\t{x:.6f}\t{y:.6f}\n")
