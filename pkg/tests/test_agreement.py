"""Agreement statistics against hand-computed values."""

import math

import pytest

from jimpact.agreement import (
    AnnotationScore,
    check_design,
    cohen_kappa,
    fleiss_kappa,
    fleiss_subset_kappas,
    load_scores,
    pairwise_kappas,
    score_summary,
    write_agreement_report,
)
from jimpact.errors import GatingViolation, RowSumMismatch


def score(aid, ann, rel=True, acc=3, comp=3):
    if not rel:
        acc = comp = 1
    return AnnotationScore(aid, ann, rel, acc, comp)


# --- Cohen's kappa ----------------------------------------------------------

def test_cohen_identical_sequences():
    assert cohen_kappa([1, 2, 3, 1], [1, 2, 3, 1]) == 1.0


def test_cohen_hand_value_zero():
    # p_o = 0.5; marginals are 50/50 for both raters so p_e = 0.5.
    assert cohen_kappa([1, 1, 0, 0], [1, 0, 0, 1]) == pytest.approx(0.0, abs=1e-15)


def test_cohen_length_mismatch():
    with pytest.raises(ValueError):
        cohen_kappa([1, 0], [1])


def test_cohen_empty():
    with pytest.raises(ValueError):
        cohen_kappa([], [])


def test_cohen_constant_equal_raters():
    # Chance agreement hits 1; identical constant raters get 1 by convention.
    assert cohen_kappa(["x", "x"], ["x", "x"]) == 1.0


def test_cohen_at_most_one():
    # Random-ish sequences stay below 1; equality only at perfect agreement.
    import random
    rng = random.Random(5)
    for _ in range(50):
        n = rng.randint(2, 30)
        a = [rng.randint(0, 2) for _ in range(n)]
        b = [rng.randint(0, 2) for _ in range(n)]
        try:
            k = cohen_kappa(a, b)
        except Exception:
            continue
        assert k <= 1.0 + 1e-12
        if k == 1.0:
            assert a == b


def test_cohen_relabel_invariance():
    a = [0, 1, 2, 0, 1, 2, 2]
    b = [0, 2, 2, 1, 1, 2, 0]
    remap = {0: "c", 1: "a", 2: "b"}
    k1 = cohen_kappa(a, b)
    k2 = cohen_kappa([remap[x] for x in a], [remap[x] for x in b])
    assert k1 == pytest.approx(k2, abs=1e-15)


# --- Fleiss' kappa ----------------------------------------------------------

def test_fleiss_unanimous_rows():
    assert fleiss_kappa([[3, 0], [0, 3]], r=3) == 1.0


def test_fleiss_hand_value_minus_third():
    # P_bar = 1/3, P_e = 1/2, kappa = (1/3 - 1/2) / (1 - 1/2) = -1/3.
    assert fleiss_kappa([[2, 1], [1, 2]], r=3) == pytest.approx(-1.0 / 3.0, abs=1e-15)


def test_fleiss_row_sum_mismatch():
    with pytest.raises(RowSumMismatch):
        fleiss_kappa([[2, 1], [1, 1]], r=3)


def test_fleiss_single_category_everywhere():
    assert fleiss_kappa([[3, 0], [3, 0]], r=3) == 1.0


def test_fleiss_item_permutation_invariance():
    rows = [[2, 1, 0], [0, 3, 0], [1, 1, 1], [3, 0, 0]]
    k1 = fleiss_kappa(rows, r=3)
    k2 = fleiss_kappa(rows[::-1], r=3)
    assert k1 == pytest.approx(k2, abs=1e-15)
    # Category relabeling = column permutation.
    k3 = fleiss_kappa([[row[2], row[0], row[1]] for row in rows], r=3)
    assert k1 == pytest.approx(k3, abs=1e-15)


# --- gating and score summaries ----------------------------------------------

def test_gating_violation_rejected():
    with pytest.raises(GatingViolation):
        AnnotationScore("a1", "r1", False, 3, 1)


def test_score_out_of_range_rejected():
    with pytest.raises(GatingViolation):
        AnnotationScore("a1", "r1", True, 4, 1)


def test_summary_all_correct():
    scores = [score(f"a{i}", "r1") for i in range(4)]
    overall = score_summary(scores)[0]
    assert overall.relevance_mean == 1.0
    assert overall.relevance_se == 0.0


def test_summary_hand_se():
    # Values 3,3,1,1: mean 2, sample std sqrt(4/3), SE = sqrt(4/3)/2.
    scores = [
        AnnotationScore("a1", "r1", True, 3, 1),
        AnnotationScore("a2", "r1", True, 3, 1),
        AnnotationScore("a3", "r1", True, 1, 1),
        AnnotationScore("a4", "r1", True, 1, 1),
    ]
    overall = score_summary(scores)[0]
    assert overall.accuracy_mean == pytest.approx(2.0)
    assert overall.accuracy_se == pytest.approx(math.sqrt(4.0 / 3.0) / 2.0, rel=1e-12)
    assert round(overall.accuracy_se, 3) == 0.577


def test_summary_single_rating_has_no_se():
    rows = score_summary([score("a1", "r1")])
    assert all(r.relevance_se is None for r in rows)


def test_summary_orders_overall_first_then_sorted():
    scores = [score("a1", "r2"), score("a2", "r1")]
    rows = score_summary(scores)
    assert [r.annotator_id for r in rows] == ["overall", "r1", "r2"]


# --- report assembly ----------------------------------------------------------

def shared_design_scores():
    """Two annotators rate 3 shared articles; one extra solo article each."""
    return [
        AnnotationScore("s1", "r1", True, 3, 3),
        AnnotationScore("s1", "r2", True, 3, 3),
        AnnotationScore("s2", "r1", True, 2, 1),
        AnnotationScore("s2", "r2", True, 2, 1),
        AnnotationScore("s3", "r1", False, 1, 1),
        AnnotationScore("s3", "r2", True, 1, 2),
        AnnotationScore("x1", "r1", True, 3, 3),
        AnnotationScore("x2", "r2", True, 1, 1),
    ]


def test_pairwise_kappas_align_on_shared_articles():
    rows = pairwise_kappas(shared_design_scores())
    assert {r["metric"] for r in rows} == {"relevance", "accuracy", "completeness"}
    assert all(r["n"] == 3 for r in rows)
    acc = next(r for r in rows if r["metric"] == "accuracy")
    # Accuracy sequences on s1..s3 are [3,2,1] vs [3,2,1]: perfect.
    assert acc["value"] == 1.0


def test_fleiss_runs_on_dominant_rater_count():
    rows = fleiss_subset_kappas(shared_design_scores())
    assert len(rows) == 3
    assert all(r["n"] == 3 for r in rows)


def test_fleiss_empty_without_shared_articles():
    scores = [score("a1", "r1"), score("a2", "r2")]
    assert fleiss_subset_kappas(scores) == []


def test_report_roundtrip(tmp_path):
    out = tmp_path / "agreement_report.csv"
    write_agreement_report(shared_design_scores(), out)
    text = out.read_text(encoding="utf-8").splitlines()
    assert text[0] == "row_type,metric,annotator_a,annotator_b,n,value,se"
    kinds = {line.split(",")[0] for line in text[1:]}
    assert kinds == {"cohen_kappa", "fleiss_kappa", "score_mean"}


def test_load_scores_roundtrip(tmp_path):
    p = tmp_path / "human_eval.csv"
    p.write_text(
        "article_id,annotator_id,ai_relevance_correct,subfield_accuracy,subfield_completeness\n"
        "a1,r1,true,3,2\n"
        "a1,r2,false,1,1\n",
        encoding="utf-8",
    )
    scores = load_scores(p)
    assert len(scores) == 2
    assert scores[0].subfield_accuracy == 3
    assert scores[1].ai_relevance_correct is False


def test_load_scores_rejects_gating_breaks(tmp_path):
    p = tmp_path / "human_eval.csv"
    p.write_text(
        "article_id,annotator_id,ai_relevance_correct,subfield_accuracy,subfield_completeness\n"
        "a1,r1,false,3,1\n",
        encoding="utf-8",
    )
    with pytest.raises(GatingViolation):
        load_scores(p)


def test_load_scores_rejects_duplicates(tmp_path):
    p = tmp_path / "human_eval.csv"
    p.write_text(
        "article_id,annotator_id,ai_relevance_correct,subfield_accuracy,subfield_completeness\n"
        "a1,r1,true,3,1\n"
        "a1,r1,true,2,1\n",
        encoding="utf-8",
    )
    with pytest.raises(GatingViolation):
        load_scores(p)


def test_design_checker_reports_deviations():
    scores = shared_design_scores()
    ok = check_design(scores, {"n_annotators": 2, "shared_articles": 3})
    assert ok == []
    bad = check_design(scores, {"n_articles": 100, "per_annotator": 50})
    assert len(bad) == 3  # article count plus one row per annotator
