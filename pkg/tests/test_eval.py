import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pond.data import SyntheticSpec
from pond.errors import ConfigError, FormatError
from pond.eval import (
    ABLATION_ROWS,
    FULL_ROW,
    ablation_grid,
    heatmap_csv,
    heatmap_from_prompts,
    parse_heatmap_csv,
    source_count_sweep,
    summarize_grid,
    trend,
    write_heatmap,
)
from pond.metrics import accuracy, confusion_matrix, evaluate, macro_f1
from pond.pipeline import Bundle, run_pipeline
from pond.train import RunConfig

TINY = RunConfig(m=3, experts=2, d_model=8, heads=2, d_ff=16, blocks=1, patch_len=4, stride=4, generator_hidden=8,
                 epochs=1, steps=3, shots=4, batch_size=8)
SPEC = SyntheticSpec(M=4, G=2, K=2, n=2, L=16, freqs=(2, 5), per_domain=10, sigma=0.3)


def test_macro_f1_hand_example():
    assert macro_f1([0, 1, 1, 1], [0, 0, 1, 1], 2) == pytest.approx(11 / 15, abs=1e-15)
    assert macro_f1([0, 1, 2], [0, 1, 2], 3) == 1.0


def test_absent_class_counts_as_zero():
    assert macro_f1([0, 1], [0, 1], 3) == pytest.approx(2 / 3)


def test_accuracy_examples():
    assert accuracy([1, 1], [1, 1]) == 1.0
    assert accuracy([0, 0], [1, 1]) == 0.0
    assert accuracy([0, 1, 1, 0], [0, 1, 1, 1]) == 0.75
    with pytest.raises(ConfigError):
        accuracy([0], [0, 1])
    with pytest.raises(ConfigError):
        macro_f1([], [], 2)
    with pytest.raises(ConfigError):
        macro_f1([3], [0], 2)


def reference_f1(p, t, K):
    scores = []
    for c in range(K):
        tp = sum(1 for a, b in zip(p, t) if a == c and b == c)
        fp = sum(1 for a, b in zip(p, t) if a == c and b != c)
        fn = sum(1 for a, b in zip(p, t) if a != c and b == c)
        scores.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    return sum(scores) / K


def test_against_independent_recompute():
    rng = np.random.default_rng(0)
    for _ in range(100):
        K = int(rng.integers(2, 6))
        size = int(rng.integers(1, 40))
        p, t = rng.integers(K, size=size).tolist(), rng.integers(K, size=size).tolist()
        assert macro_f1(p, t, K) == pytest.approx(reference_f1(p, t, K), abs=1e-15)
        assert accuracy(p, t) == sum(a == b for a, b in zip(p, t)) / size


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 5).flatmap(lambda K: st.tuples(st.just(K), st.lists(
    st.tuples(st.integers(0, K - 1), st.integers(0, K - 1)), min_size=1, max_size=30))))
def test_report_invariants(case):
    K, pairs = case
    p, t = [a for a, _ in pairs], [b for _, b in pairs]
    report = evaluate(p, t, K, scenario="x", seed=1)
    cm = np.array(report.confusion)
    assert (cm.sum(axis=1) == np.bincount(t, minlength=K)).all()
    assert (confusion_matrix(p, t, K) == cm).all()
    for v in [report.accuracy, report.macro_f1] + [r[k] for r in report.per_class for k in ("precision", "recall", "f1")]:
        assert 0.0 <= v <= 1.0


def test_heatmap_equal_prompts_and_symmetry():
    hm = heatmap_from_prompts(["a", "b", "c"], [np.ones((2, 2))] * 3)
    off = hm.values[~np.eye(3, dtype=bool)]
    np.testing.assert_allclose(off, 1.0, atol=1e-15)
    assert np.isnan(np.diag(hm.values)).all() and not hm.fallback
    rng = np.random.default_rng(1)
    hm = heatmap_from_prompts(list("abcd"), list(rng.normal(size=(4, 2, 3))), "cosine")
    np.testing.assert_array_equal(hm.values, hm.values.T)
    assert (hm.values[~np.eye(4, dtype=bool)] > 0).all()


def test_heatmap_two_domain_fallback():
    hm = heatmap_from_prompts(["a", "b"], [np.eye(2), np.ones((2, 2))])
    assert hm.fallback and hm.values[0, 1] == pytest.approx(math.exp(2.0))


def test_heatmap_csv_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    hm = heatmap_from_prompts(["S0", "S1", "S2"], list(rng.normal(size=(3, 2, 2))))
    csv_path, side = write_heatmap(hm, tmp_path / "h.csv")
    ids, values = parse_heatmap_csv(csv_path.read_text())
    assert ids == hm.domain_ids and side.exists()
    np.testing.assert_allclose(values, hm.values, atol=1e-12, equal_nan=True)
    assert heatmap_csv(hm).splitlines()[1].startswith(",")
    with pytest.raises(FormatError):
        parse_heatmap_csv("a,b\n1,2\n")


def test_ablation_rows_structure():
    assert len(ABLATION_ROWS) == 6 and len(set(ABLATION_ROWS)) == 6
    assert FULL_ROW in ABLATION_ROWS and (False, False, False) not in ABLATION_ROWS


@pytest.fixture(scope="module")
def small_grid():
    rows = [FULL_ROW, (False, True, False)]
    return ablation_grid(TINY, SPEC, [0], rows=rows), ablation_grid(TINY, SPEC, [0], rows=rows)


def test_grid_full_row_matches_pipeline(small_grid):
    grid, again = small_grid
    direct = run_pipeline(Bundle.from_spec(SPEC, TINY), TINY, scenario="ablation:moe+common+generator")
    full = next(r for r in grid if r.flags == FULL_ROW)
    assert full.report.to_dict() == direct.report.to_dict()
    assert [r.to_dict() for r in grid] == [r.to_dict() for r in again]
    table = summarize_grid(grid)
    assert [t["row"] for t in table] == ["moe+common+generator", "common"]


def test_sweep_validation_and_determinism():
    with pytest.raises(ConfigError):
        source_count_sweep(TINY, SPEC, [3, 2], [0])
    with pytest.raises(ConfigError):
        source_count_sweep(TINY, SPEC, [2, 5], [0])
    with pytest.raises(ConfigError):
        source_count_sweep(TINY, SPEC, [1], [0])
    a = source_count_sweep(TINY, SPEC, [2], [0])
    assert len(a) == 1 and a[0]["count"] == 2
    assert a == source_count_sweep(TINY, SPEC, [2], [0])


def test_trend():
    rows = [{"count": c, "macro_f1_mean": f} for c, f in [(2, 0.5), (4, 0.6), (6, 0.55), (8, 0.7)]]
    assert trend(rows) == pytest.approx(0.8)
    assert math.isnan(trend(rows[:1]))
    assert math.isnan(trend([{"count": c, "macro_f1_mean": 0.5} for c in (2, 4)]))
