import numpy as np
import pytest

from oracles import auc_pairs, random_auc_instance
from routerank.evaluate import (
    auc_bruteforce,
    auc_fast,
    format_report,
    read_report,
    run_ablation_matrix,
    write_report,
)


@pytest.mark.parametrize("auc", [auc_fast, auc_bruteforce])
def test_auc_examples(auc):
    assert auc([0.9, 0.6], [1, 0]) == 1.0
    assert auc([0.3, 0.7], [1, 0]) == 0.0
    assert auc([0.9, 0.3, 0.6, 0.6], [1, 0, 1, 0]) == 0.875


def test_fast_matches_bruteforce():
    rng = np.random.default_rng(0)
    for _ in range(200):
        s, y = random_auc_instance(rng)
        assert abs(auc_fast(s, y) - auc_bruteforce(s, y)) <= 1e-12


def test_bruteforce_matches_pair_loop():
    rng = np.random.default_rng(1)
    for _ in range(20):
        s, y = random_auc_instance(rng)
        s, y = s[:150], y[:150]
        assert abs(auc_bruteforce(s, y) - auc_pairs(s, y)) <= 1e-12


def test_monotone_transform_invariance():
    rng = np.random.default_rng(2)
    for _ in range(50):
        s, y = random_auc_instance(rng)
        base = auc_fast(s, y)
        assert auc_fast(np.exp(3 * s), y) == base
        assert auc_fast(s**3 + 2, y) == base


def test_auc_label_errors():
    with pytest.raises(ValueError):
        auc_fast([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        auc_fast([0.1, 0.2], [1, 2])
    with pytest.raises(ValueError):
        auc_fast([0.1], [1, 0])


def test_single_row_matrix(small_data, tmp_path):
    rows = run_ablation_matrix(small_data, seeds=(0,), configs=("Base",), epochs=1)
    assert len(rows) == 1 and rows[0].config == "Base" and len(rows[0].aucs) == 1
    assert 0.0 <= rows[0].mean <= 1.0 and rows[0].sd == 0.0
    write_report(rows, tmp_path / "r.tsv")
    text = (tmp_path / "r.tsv").read_text()
    assert text == format_report(rows)
    assert text.startswith("#format routerank-report/1\n")
    parsed = read_report(tmp_path / "r.tsv")
    assert parsed["Base"]["aucs"] == [float(f"{rows[0].aucs[0]:.6f}")]
    assert parsed["Base"]["setting"] == "-"
