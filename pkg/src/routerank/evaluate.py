"""AUC, the ablation matrix and its text report."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from routerank.model import VARIANTS, R4Config, R4Model
from routerank.trainer import PreparedData, TrainConfig, train

REPORT_FORMAT = "routerank-report/1"


def _check_labels(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    if y.all() or not y.any():
        raise ValueError("AUC needs at least one positive and one negative label")
    return s, y.astype(bool)


def auc_bruteforce(scores, labels) -> float:
    """Fraction of (positive, negative) pairs ordered correctly; ties count one half."""
    s, y = _check_labels(scores, labels)
    pos, neg = s[y], s[~y]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def auc_fast(scores, labels) -> float:
    """Rank-sum (Mann-Whitney) form of the same statistic, O(n log n)."""
    s, y = _check_labels(scores, labels)
    ranks = rankdata(s)  # average ranks for ties
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class AblationRow:
    config: str
    aucs: list[float]
    setting: str
    models: list = field(default_factory=list, repr=False)

    @property
    def mean(self) -> float:
        return float(np.mean(self.aucs))

    @property
    def sd(self) -> float:
        return float(np.std(self.aucs, ddof=1)) if len(self.aucs) > 1 else 0.0

    @property
    def median(self) -> float:
        return float(np.median(self.aucs))


def evaluate_params(cfg: R4Config, data: PreparedData, params) -> float:
    test = data.test
    return auc_fast(R4Model(cfg, data.schema).predict(params, test), test.y)


def run_ablation_matrix(
    data: PreparedData,
    seeds=(0, 1, 2),
    configs=VARIANTS,
    epochs: int = 5,
    train_cfg: TrainConfig | None = None,
    keep_models: bool = False,
    verbose: bool = False,
) -> list[AblationRow]:
    """Train every configuration once per seed and report test AUC."""
    rows = []
    for name in configs:
        cfg = R4Config.variant(name) if isinstance(name, str) else name
        row = AblationRow(cfg.name, [], cfg.setting())
        for seed in seeds:
            state = train(cfg, data, epochs=epochs, seed=seed, train_cfg=train_cfg, verbose=verbose)
            row.aucs.append(evaluate_params(cfg, data, state.params))
            if keep_models:
                row.models.append(state)
            if verbose:
                print(f"{cfg.name} seed {seed}: AUC {row.aucs[-1]:.4f}")
        rows.append(row)
    return rows


def format_report(rows: list[AblationRow]) -> str:
    """Tab-separated table: config, AUC mean, sd, per-seed AUCs, setting."""
    lines = [f"#format {REPORT_FORMAT}", "config\tauc_mean\tauc_sd\tauc_seeds\tsetting"]
    for r in rows:
        seeds = ",".join(f"{a:.6f}" for a in r.aucs)
        lines.append(f"{r.config}\t{r.mean:.6f}\t{r.sd:.6f}\t{seeds}\t{r.setting}")
    return "\n".join(lines) + "\n"


def write_report(rows: list[AblationRow], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_report(rows))


def read_report(path) -> dict[str, dict]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != f"#format {REPORT_FORMAT}":
        raise ValueError(f"{path}: not a {REPORT_FORMAT} file")
    out = {}
    for line in lines[2:]:
        config, mean, sd, seeds, setting = line.split("\t")
        out[config] = {
            "auc_mean": float(mean),
            "auc_sd": float(sd),
            "aucs": [float(a) for a in seeds.split(",") if a],
            "setting": setting,
        }
    return out
