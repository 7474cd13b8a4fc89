import statistics
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from shapediff.baseline import cylinder_fit
from shapediff.evalkit import (
    METRICS,
    MissingGroundTruth,
    TooFewSamples,
    ZeroGroundTruth,
    assign_folds,
    evaluate_models,
    read_report,
    relative_error,
)
from shapediff.voxgrid import Sample, synth_shape


def test_relative_error_examples():
    assert relative_error(120, 100) == pytest.approx(0.2)
    assert relative_error(100, 100) == 0.0
    assert relative_error(0, 100) == 1.0
    for gt in (0, -1):
        with pytest.raises(ZeroGroundTruth):
            relative_error(1, gt)


def _samples(counts):
    out = []
    for cls, n in counts.items():
        out += [Sample(f"{cls}{i}", None, None, cls) for i in range(n)]
    return out


def test_folds_partition():
    s = assign_folds(_samples({"a": 60, "b": 25, "c": 15}), 5, 0)
    sizes = Counter(x.fold for x in s)
    assert sorted(sizes) == [0, 1, 2, 3, 4] and set(sizes.values()) == {20}


@given(st.dictionaries(st.sampled_from("abcdef"), st.integers(1, 40), min_size=1), st.integers(2, 7),
       st.integers(0, 2**32 - 1))
def test_folds_stratified(counts, k, seed):
    n = sum(counts.values())
    if n < k:
        with pytest.raises(TooFewSamples):
            assign_folds(_samples(counts), k, seed)
        return
    s = assign_folds(_samples(counts), k, seed)
    assert all(0 <= x.fold < k for x in s)
    sizes = Counter(x.fold for x in s)
    assert max(sizes.values()) - min(sizes.get(f, 0) for f in range(k)) <= 1
    for cls, c in counts.items():
        per = Counter(x.fold for x in s if x.class_label == cls)
        for f in range(k):
            assert abs(per.get(f, 0) - c / k) < 1 + 1e-9
    again = assign_folds(_samples(counts), k, seed)
    assert [x.fold for x in again] == [x.fold for x in s]


def test_identity_model_zero_error():
    gt = {f"b{i}": synth_shape("ball", 20, i).target for i in range(3)}
    rep = evaluate_models(gt, {"copy": {k: [v, v] for k, v in gt.items()}})
    assert len(rep.rows) == 3 * 2 * 4
    assert all(r.relative_error == 0.0 for r in rep.rows)


def test_cylinder_worse_than_copy_and_aggregates(tmp_path):
    shapes = [synth_shape("ball", 24, i) for i in range(6)]
    gt = {s.id: s.target for s in shapes}
    preds = {
        "copy": {s.id: [s.target] for s in shapes},
        "cylinder": {s.id: [cylinder_fit(s.prior.mask, 24)] for s in shapes},
    }
    rep = evaluate_models(gt, preds)
    agg = rep.aggregates()
    assert agg[("cylinder", "volume")]["median"] > agg[("copy", "volume")]["median"]
    assert len(rep.rows) == (6 + 6) * 4
    assert all(r.relative_error >= 0 for r in rep.rows)
    # independent recomputation of the aggregates
    for (model, metric), a in agg.items():
        vals = [r.relative_error for r in rep.rows if r.model == model and r.metric == metric]
        assert a["median"] == pytest.approx(statistics.median(vals), abs=1e-9)
        assert a["mean"] == pytest.approx(statistics.fmean(vals), abs=1e-9)
        assert a["std"] == pytest.approx(statistics.pstdev(vals), abs=1e-9)
    rep.write_rows(tmp_path / "rows.csv")
    assert (tmp_path / "rows.csv").read_text().splitlines()[0] == "sample,model,metric,relative_error"
    back = read_report(tmp_path / "rows.csv")
    assert back.rows == rep.rows
    rep.write_summary(tmp_path / "summary.csv")
    lines = (tmp_path / "summary.csv").read_text().splitlines()
    assert lines[0] == "metric,model,median,mean,std,n"
    assert [l.split(",")[0] for l in lines[1:]] == [m for m in METRICS for _ in range(2)]
    rep.write_quantiles(tmp_path / "q.csv")
    q = (tmp_path / "q.csv").read_text().splitlines()
    assert q[0] == "metric,model,q0,q25,q50,q75,q100" and len(q) == 9


def test_missing_ground_truth():
    g = synth_shape("ball", 16, 0).target
    with pytest.raises(MissingGroundTruth):
        evaluate_models({"a": g}, {"m": {"b": [g]}})


def test_empty_prediction_scores_full_error():
    s = synth_shape("ball", 16, 0)
    rep = evaluate_models({"a": s.target}, {"m": {"a": [np.zeros((16, 16, 16))]}})
    assert all(r.relative_error == 1.0 for r in rep.rows)
