import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairdetect import metrics as M

FIXTURE = [
    # g1: y=[0,0,1], y_hat=[1,0,1]; g2: y=[0,1], y_hat=[0,1]
    M.PredictionRecord(0.9, 1, 0, "g1"),
    M.PredictionRecord(0.2, 0, 0, "g1"),
    M.PredictionRecord(0.8, 1, 1, "g1"),
    M.PredictionRecord(0.1, 0, 0, "g2"),
    M.PredictionRecord(0.7, 1, 1, "g2"),
]


def random_records(rng, n=None, n_groups=None):
    n = n or int(rng.integers(4, 60))
    n_groups = n_groups or int(rng.integers(1, 4))
    records = []
    for _ in range(n):
        y = int(rng.integers(2))
        score = float(rng.random())
        records.append(M.PredictionRecord(score, int(score >= 0.5), y, f"g{rng.integers(n_groups)}"))
    # guarantee the metrics' preconditions: at least one of each class overall
    records.append(M.PredictionRecord(0.9, 1, 1, "g0"))
    records.append(M.PredictionRecord(0.1, 0, 0, "g0"))
    return records


class TestWorkedFixture:
    def test_f_fpr(self):
        assert M.f_fpr(FIXTURE) == pytest.approx(0.5, abs=1e-15)

    def test_f_oae(self):
        assert M.f_oae(FIXTURE) == pytest.approx(1 / 3, abs=1e-15)

    def test_f_dp(self):
        assert M.f_dp(FIXTURE) == pytest.approx(1 / 6, abs=1e-15)

    def test_f_meo(self):
        assert M.f_meo(FIXTURE) == pytest.approx(0.5, abs=1e-15)

    def test_fixture_matches_oracle_exactly(self):
        for metric in ("f_fpr", "f_oae", "f_dp", "f_meo"):
            fast = getattr(M, metric)(FIXTURE)
            assert fast == M.metric_oracle(FIXTURE, metric)


class TestTrivialCases:
    def test_perfect_classifier_zeroes_fairness(self):
        records = [
            M.PredictionRecord(0.9, 1, 1, "a"),
            M.PredictionRecord(0.1, 0, 0, "a"),
            M.PredictionRecord(0.8, 1, 1, "b"),
            M.PredictionRecord(0.2, 0, 0, "b"),
        ]
        assert M.f_fpr(records) == 0.0
        assert M.f_oae(records) == 0.0
        assert M.f_meo(records) == 0.0
        # demographic parity is about rates, not correctness: balanced here
        assert M.f_dp(records) == 0.0

    def test_single_subgroup_gives_zero_deviation(self):
        records = [
            M.PredictionRecord(0.9, 1, 0, "only"),
            M.PredictionRecord(0.1, 0, 0, "only"),
            M.PredictionRecord(0.8, 1, 1, "only"),
        ]
        assert M.f_fpr(records) == 0.0
        assert M.f_oae(records) == 0.0
        assert M.f_meo(records) == 0.0
        assert M.f_dp(records) == 0.0

    def test_all_positive_predictions_zero_dp(self):
        records = [
            M.PredictionRecord(0.9, 1, 1, "a"),
            M.PredictionRecord(0.9, 1, 0, "a"),
            M.PredictionRecord(0.9, 1, 1, "b"),
        ]
        assert M.f_dp(records) == 0.0

    def test_empty_records_rejected(self):
        for metric in (M.f_fpr, M.f_oae, M.f_dp, M.f_meo):
            with pytest.raises(M.MetricsError):
                metric([])

    def test_no_negatives_rejected_for_fpr(self):
        records = [M.PredictionRecord(0.9, 1, 1, "a")]
        with pytest.raises(M.MetricsError, match="negative"):
            M.f_fpr(records)

    def test_subgroup_without_negatives_is_excluded(self):
        records = [
            M.PredictionRecord(0.9, 1, 0, "a"),
            M.PredictionRecord(0.1, 0, 0, "a"),
            M.PredictionRecord(0.8, 1, 1, "b"),  # b has no negatives
        ]
        # overall fpr = 1/2, a's fpr = 1/2, b excluded
        assert M.f_fpr(records) == 0.0


class TestAuc:
    def test_separated(self):
        assert M.auc([0.1, 0.9], [0, 1]) == 1.0

    def test_all_ties(self):
        assert M.auc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5

    def test_interleaved(self):
        assert M.auc([0.2, 0.4, 0.6, 0.8], [0, 1, 0, 1]) == 0.75

    def test_single_class_rejected(self):
        with pytest.raises(M.MetricsError, match="both classes"):
            M.auc([0.2, 0.8], [1, 1])

    def test_matches_pair_enumeration_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            records = random_records(rng)
            scores = [r.score for r in records]
            labels = [r.y for r in records]
            assert M.auc(scores, labels) == pytest.approx(
                M.metric_oracle(records, "auc"), abs=1e-12
            )


class TestOracleAgreement:
    def test_500_random_record_sets(self):
        rng = np.random.default_rng(2024)
        for _ in range(500):
            records = random_records(rng)
            for metric in ("f_fpr", "f_oae", "f_dp", "f_meo", "auc"):
                fast = getattr(M, metric if metric != "auc" else "auc")
                if metric == "auc":
                    got = M.auc([r.score for r in records], [r.y for r in records])
                else:
                    got = fast(records)
                want = M.metric_oracle(records, metric)
                assert abs(got - want) <= 1e-12, (metric, got, want)


@st.composite
def record_sets(draw):
    n = draw(st.integers(4, 40))
    groups = draw(st.integers(1, 3))
    records = []
    for _ in range(n):
        score = draw(st.floats(0, 1, allow_nan=False))
        y = draw(st.integers(0, 1))
        g = draw(st.integers(0, groups - 1))
        records.append(M.PredictionRecord(score, int(score >= 0.5), y, f"g{g}"))
    records.append(M.PredictionRecord(0.75, 1, 1, "g0"))
    records.append(M.PredictionRecord(0.25, 0, 0, "g0"))
    return records


@settings(max_examples=150, deadline=None)
@given(record_sets(), st.randoms(use_true_random=False))
def test_order_invariance(records, shuffler):
    before = {m: M.metric_oracle(records, m) for m in ("f_fpr", "f_oae", "f_dp", "f_meo", "auc")}
    shuffled = list(records)
    shuffler.shuffle(shuffled)
    for metric, want in before.items():
        if metric == "auc":
            got = M.auc([r.score for r in shuffled], [r.y for r in shuffled])
        else:
            got = getattr(M, metric)(shuffled)
        assert abs(got - want) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(record_sets())
def test_subgroup_relabeling_invariance(records):
    mapping = {"g0": "west", "g1": "north", "g2": "east"}
    renamed = [M.PredictionRecord(r.score, r.y_hat, r.y, mapping[r.d]) for r in records]
    for metric in ("f_fpr", "f_oae", "f_dp", "f_meo"):
        assert abs(getattr(M, metric)(records) - getattr(M, metric)(renamed)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(record_sets())
def test_duplication_invariance(records):
    doubled = records + records
    for metric in ("f_fpr", "f_oae", "f_dp", "f_meo"):
        assert abs(getattr(M, metric)(records) - getattr(M, metric)(doubled)) <= 1e-12
    assert abs(
        M.auc([r.score for r in records], [r.y for r in records])
        - M.auc([r.score for r in doubled], [r.y for r in doubled])
    ) <= 1e-12


def test_subgroup_independent_errors_give_small_fairness():
    """When the error process ignores the subgroup, fairness metrics sit at
    the sampling noise floor."""
    rng = np.random.default_rng(7)
    worst = {m: 0.0 for m in ("f_fpr", "f_oae", "f_dp", "f_meo")}
    trials, n = 1000, 400
    for _ in range(trials):
        y = rng.integers(0, 2, size=n)
        flip = rng.random(n) < 0.1
        y_hat = np.where(flip, 1 - y, y)
        d = np.where(rng.random(n) < 0.5, "a", "b")
        records = [
            M.PredictionRecord(float(h), int(h), int(t), str(g))
            for h, t, g in zip(y_hat, y, d)
        ]
        for m in worst:
            worst[m] = max(worst[m], getattr(M, m)(records))
    # binomial noise at n=400 per cell: gaps stay well under 0.2 in 1000 draws
    for m, v in worst.items():
        assert v < 0.2, (m, v)


class TestReport:
    def test_percent_scaling_and_notes(self):
        report = M.build_report(FIXTURE, threshold=0.5, expected_subgroups=("g1", "g2", "g3"))
        assert report.f_fpr == pytest.approx(50.0)
        assert report.f_dp == pytest.approx(100 / 6)
        assert report.f_meo == pytest.approx(50.0)
        assert report.f_oae == pytest.approx(100 / 3)
        assert 0.0 <= report.auc <= 100.0
        assert any("absent" in n and "g3" in n for n in report.notes)
        assert any("excluded" in n for n in report.notes)

    def test_rows_layout(self):
        report = M.build_report(FIXTURE, threshold=0.5)
        rows = report.rows("testset.csv", "full")
        assert [r[2] for r in rows] == ["f_fpr", "f_meo", "f_dp", "f_oae", "auc"]
        assert all(r[0] == "testset.csv" and r[1] == "full" for r in rows)

    def test_per_subgroup_table(self):
        report = M.build_report(FIXTURE, threshold=0.5)
        assert report.per_subgroup["g1"].count == 3
        assert report.per_subgroup["g1"].fpr == pytest.approx(0.5)
        assert report.per_subgroup["g2"].acc == pytest.approx(1.0)

    def test_make_records_threshold(self):
        records = M.make_records([0.4, 0.5, 0.6], [0, 1, 1], ["a", "a", "b"], threshold=0.5)
        assert [r.y_hat for r in records] == [0, 1, 1]
