import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from emotrack.config import TrainConfig
from emotrack.data import build_split_manifest
from emotrack.evaluation import (AblationTable, EvalReport, SeedResult, aggregate_seeds, axis_overrides,
                                 evaluate, mae, per_session_mae, run_ablation)
from emotrack.model import init_params
from emotrack.synthgen import GeneratorConfig, generate_corpus

from conftest import random_examples, tiny_model_config


def test_mae_examples():
    assert mae([1, 2], [2, 4]) == 1.5
    assert mae([3.3, 1.0], [3.3, 1.0]) == 0.0
    assert mae([0], [24]) == 24


def test_mae_length_mismatch():
    with pytest.raises(ValueError):
        mae([1, 2], [1])


def test_per_session_single_index():
    assert per_session_mae([1, 2], [1, 3], [1, 1]) == {1: 0.5}


def test_per_session_five_entries():
    idx = [1, 2, 3, 4, 5, 1]
    assert sorted(per_session_mae(np.zeros(6), np.arange(6), idx)) == [1, 2, 3, 4, 5]


@given(st.lists(st.tuples(st.floats(0, 24), st.floats(0, 24), st.integers(1, 5)), min_size=1, max_size=40))
def test_per_session_recombines_to_overall(rows):
    p, t, i = map(np.array, zip(*rows))
    per = per_session_mae(p, t, i)
    weighted = sum(per[k] * np.sum(i == k) for k in per) / len(rows)
    assert abs(weighted - mae(p, t)) <= 1e-9


def test_aggregate_examples():
    assert aggregate_seeds([1, 2, 3]) == (2.0, 1.0)
    assert aggregate_seeds([0.7, 0.7, 0.7])[1] == 0.0
    m, s = aggregate_seeds([2.3, 2.5])
    assert m == pytest.approx(2.4) and s == pytest.approx(np.sqrt(0.02), rel=1e-12)


def test_aggregate_needs_two():
    with pytest.raises(ValueError):
        aggregate_seeds([1.0])


def test_evaluate_is_side_effect_free_and_recomputable():
    cfg = TrainConfig(model=tiny_model_config())
    P = init_params(cfg.model, 0)
    snapshot = {k: v.copy() for k, v in P.items()}
    ex = random_examples(cfg.model, n=6)
    r = evaluate(P, cfg, ex, seed=0)
    for k in P:
        np.testing.assert_array_equal(P[k], snapshot[k])
    preds = r.predictions
    assert mae([p["pred_total"] for p in preds], [p["target_total"] for p in preds]) == r.overall_mae
    assert r.symptom_mae is not None


def test_report_fields_and_single_seed():
    r = SeedResult(0, 1.0, {1: 1.0})
    rep = EvalReport.from_seeds([r], "abc")
    d = json.loads(rep.to_json())
    assert d["std"] is None and d["mean"] == 1.0
    for k in ("overall_mae", "per_session_mae", "per_seed", "config_fingerprint", "symptom_mae"):
        assert k in d


def test_report_multi_seed_mean_std():
    rs = [SeedResult(s, v, {1: v}) for s, v in zip((2, 0, 1), (2.5, 2.3, 2.4))]
    rep = EvalReport.from_seeds(rs)
    assert [r.seed for r in rep.seeds] == [0, 1, 2]
    assert rep.mean == pytest.approx(2.4) and rep.std == pytest.approx(0.1)


def test_axis_overrides():
    assert axis_overrides("enc-dec-layers", "1x3") == {"L_enc": 1, "L_dec": 3}
    assert axis_overrides("memory-slots", "8") == {"S": 8}
    assert axis_overrides("λ_sym", "0.25") == {"lambda_sym": 0.25}
    with pytest.raises(ValueError, match="axis"):
        axis_overrides("colour", "red")


@pytest.fixture(scope="module")
def tiny_corpus():
    gcfg = GeneratorConfig(n_clients=10, client_turns=3, counselor_turns=2, d_e=6, F=4)
    corpus, manifest, _ = generate_corpus(gcfg)
    return corpus, manifest


def _base():
    return TrainConfig(model=tiny_model_config(), max_epochs=2, batch_size=8)


def test_ablation_three_memory_rows(tiny_corpus):
    corpus, manifest = tiny_corpus
    table = run_ablation("memory-mechanism", ["none", "summary", "summary+retrieval"], _base(),
                         corpus, manifest, seeds=(0,))
    assert list(table.rows) == ["none", "summary", "summary+retrieval"]
    lines = table.to_csv().strip().splitlines()
    assert len(lines) == 4 and lines[1].split(",")[3] == ""


def test_single_point_ablation_equals_plain_evaluation(tiny_corpus):
    from emotrack.evaluation import train_and_evaluate
    corpus, manifest = tiny_corpus
    table = run_ablation("speaker-view", ["client"], _base(), corpus, manifest, seeds=(0,))
    plain = train_and_evaluate(_base(), corpus, manifest, 0)
    assert table.rows["client"].mean == plain.overall_mae


def test_two_seed_cells(tiny_corpus):
    corpus, manifest = tiny_corpus
    table = run_ablation("lambda-sym", ["0.0", "1.0"], _base(), corpus, manifest, seeds=(0, 1))
    for rep in table.rows.values():
        vals = [r.overall_mae for r in rep.seeds]
        assert rep.mean == pytest.approx(np.mean(vals)) and rep.std == pytest.approx(np.std(vals, ddof=1))
    d = json.loads(table.to_json())
    assert d["axis"] == "lambda-sym" and set(d["rows"]) == {"0.0", "1.0"}


def test_unknown_axis(tiny_corpus):
    corpus, manifest = tiny_corpus
    with pytest.raises(ValueError, match="axis"):
        run_ablation("colour", ["red"], _base(), corpus, manifest, seeds=(0,))
