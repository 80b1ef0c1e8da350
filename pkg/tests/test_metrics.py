import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_eer
from sasvjoint.metrics import (
    MetricError,
    MetricKind,
    REPORT_KINDS,
    compute_all,
    compute_eer,
    compute_metric,
    metric_csv,
    metric_report,
)
from sasvjoint.protocol_io import ScoreSet, Trial, TrialClass

T, N, S = TrialClass.TARGET, TrialClass.NONTARGET, TrialClass.SPOOF


def make_set(target, nontarget, spoof, partition="dev"):
    entries = [(Trial("spk", f"t{i}", T), s) for i, s in enumerate(target)]
    entries += [(Trial("spk", f"n{i}", N), s) for i, s in enumerate(nontarget)]
    entries += [(Trial("spk", f"s{i}", S), s) for i, s in enumerate(spoof)]
    return ScoreSet(tuple(entries), partition)


scores = st.lists(st.floats(-5, 5, allow_nan=False, width=32), min_size=1, max_size=40)
# a coarse grid forces plenty of ties between and within classes
tied = st.lists(st.integers(-4, 4).map(lambda k: k / 4), min_size=1, max_size=30)


def test_separated_sets():
    assert compute_eer([0.9, 0.8, 0.7], [0.6, 0.5, 0.4]).eer == 0.0


def test_identical_multisets():
    assert compute_eer([0.4, 0.5], [0.4, 0.5]).eer == 0.5


def test_one_third_example():
    assert compute_eer([0.9, 0.6, 0.4], [0.5, 0.3, 0.2]).eer == pytest.approx(1 / 3, abs=1e-12)


def test_counts_reported():
    r = compute_eer([1, 2, 3], [0, 1])
    assert (r.n_positive, r.n_negative) == (3, 2)


@pytest.mark.parametrize("pos,neg,name", [([], [1.0], "positive"), ([1.0], [], "negative")])
def test_empty_class_named(pos, neg, name):
    with pytest.raises(MetricError, match=name):
        compute_eer(pos, neg)


def test_non_finite_rejected():
    with pytest.raises(MetricError, match="non-finite"):
        compute_eer([1.0, np.nan], [0.0])
    with pytest.raises(MetricError, match="non-finite"):
        compute_eer([1.0], [np.inf])


def test_threshold_lies_between_classes_when_separated():
    r = compute_eer([0.9, 0.8], [0.1, 0.2])
    assert 0.2 <= r.threshold <= 0.8


@settings(max_examples=300, deadline=None)
@given(scores, scores)
def test_matches_brute_force_oracle(pos, neg):
    assert compute_eer(pos, neg).eer == pytest.approx(brute_force_eer(pos, neg), abs=1e-9)


@settings(max_examples=300, deadline=None)
@given(tied, tied)
def test_matches_oracle_with_ties(pos, neg):
    assert compute_eer(pos, neg).eer == pytest.approx(brute_force_eer(pos, neg), abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(tied, tied)
def test_bounded(pos, neg):
    # 0 <= eer <= 1 always holds; 0.5 + 1/(2 min n) does not (see the
    # anti-correlated case below)
    assert 0.0 <= compute_eer(pos, neg).eer <= 1.0


def test_anti_correlated_scores_reach_one():
    assert compute_eer([0.0, 0.0], [1.0, 1.0]).eer == 1.0


@settings(max_examples=150, deadline=None)
@given(tied, tied)
def test_invariant_under_increasing_transforms(pos, neg):
    base = compute_eer(pos, neg).eer
    p, n = np.array(pos), np.array(neg)
    assert compute_eer(3 * p + 7, 3 * n + 7).eer == pytest.approx(base, abs=1e-12)
    assert compute_eer(p**3 + p, n**3 + n).eer == pytest.approx(base, abs=1e-12)


@settings(max_examples=150, deadline=None)
@given(scores, scores)
def test_swap_and_negate(pos, neg):
    a = compute_eer(pos, neg).eer
    b = compute_eer(-np.array(neg), -np.array(pos)).eer
    assert a == pytest.approx(b, abs=1e-12)


def test_random_scorer_near_half():
    rng = np.random.default_rng(5)
    ss = make_set(rng.normal(size=2000), rng.normal(size=2000), rng.normal(size=2000))
    for kind, r in compute_all(ss).items():
        assert abs(r.eer - 0.5) < 0.05, kind


def test_sv_eer_ignores_spoofs():
    ss = make_set([0.9, 0.8], [0.1, 0.2, 0.3], [5.0, 6.0, 7.0, 8.0])
    r = compute_metric(ss, MetricKind.SV_EER)
    assert (r.n_positive, r.n_negative) == (2, 3)
    assert r.eer == 0.0


def test_spf_eer_ignores_nontargets():
    ss = make_set([0.9, 0.8], [5.0, 6.0, 7.0], [0.1, 0.2])
    r = compute_metric(ss, MetricKind.SPF_EER)
    assert (r.n_positive, r.n_negative) == (2, 2)
    assert r.eer == 0.0


def test_sasv_eer_uses_union():
    ss = make_set([0.9, 0.8], [0.1, 0.2, 0.3], [0.4, 0.5])
    assert compute_metric(ss, MetricKind.SASV_EER).n_negative == 5


def test_identical_negative_distributions_give_equal_metrics():
    rng = np.random.default_rng(0)
    neg = rng.normal(size=50)
    ss = make_set(rng.normal(1, 1, 40), neg, neg.copy())
    vals = {k: r.eer for k, r in compute_all(ss).items()}
    assert vals[MetricKind.SV_EER] == vals[MetricKind.SPF_EER] == vals[MetricKind.SASV_EER]


def test_missing_class_named():
    with pytest.raises(MetricError, match="SV-EER: no target"):
        compute_metric(make_set([], [0.1], [0.2]), MetricKind.SV_EER)
    with pytest.raises(MetricError, match="SPF-EER: no spoof"):
        compute_metric(make_set([1.0], [0.1], []), MetricKind.SPF_EER)


def test_negative_classes_mapping():
    assert MetricKind.SV_EER.negative_classes == {N}
    assert MetricKind.SPF_EER.negative_classes == {S}
    assert MetricKind.SASV_EER.negative_classes == {N, S}
    assert [k.label for k in REPORT_KINDS] == ["SASV-EER", "SPF-EER", "SV-EER"]


def test_report_layout_and_separable_row():
    sep = make_set([0.9, 0.8], [0.1], [0.2])
    text = metric_report({"sys": {"dev": sep, "eval": make_set([0.9], [0.1], [0.2], "eval")}})
    lines = text.splitlines()
    assert lines[0].split() == ["System", "SASV-EER", "SPF-EER", "SV-EER"]
    assert lines[1].split() == ["dev", "eval"] * 3
    assert lines[2].split() == ["sys"] + ["0.00"] * 6


def test_report_missing_partition_dash():
    text = metric_report({"sys": {"dev": make_set([0.9], [0.1], [0.2])}})
    assert text.splitlines()[2].split() == ["sys", "0.00", "-", "0.00", "-", "0.00", "-"]


def test_csv_columns():
    sep = make_set([0.9], [0.1], [0.2])
    csv = metric_csv({"a": {"dev": sep, "eval": sep}})
    head, row = csv.strip().splitlines()
    assert head == "system,sasv_eer_dev,sasv_eer_eval,spf_eer_dev,spf_eer_eval,sv_eer_dev,sv_eer_eval"
    assert row == "a," + ",".join(["0.00"] * 6)
