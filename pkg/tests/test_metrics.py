import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from peftlab.errors import ContractError, InputError
from peftlab.metrics import MetricReport, bleu, lcs_length, meteor, rouge_1, rouge_l, text_report

WORDS = st.lists(st.sampled_from(list("abcdefg")), min_size=1, max_size=8)
METRICS = [bleu, rouge_1, rouge_l, meteor]


@pytest.mark.parametrize("metric", METRICS)
def test_identity_and_disjoint(metric):
    s = "polyp in upper-left region"
    expected = 1.0 - 0.5 / 4**3 if metric is meteor else 1.0
    assert abs(metric(s, s) - expected) <= 1e-12
    assert metric("a b c", "x y z") == 0.0


def test_bleu_short_candidate_hand_case():
    # p1 = p2 = p3 = 1, BP = exp(1 - 4/3)
    assert abs(bleu("a b c", "a b c d") - math.exp(-1 / 3)) <= 1e-12


def test_bleu_clipped_counts():
    # candidate "a a a a" vs "a b c d": p1 = 1/4 clipped, p2 = 0 -> 0
    assert bleu("a a a a", "a b c d") == 0.0
    assert abs(bleu("a a", "a b", max_n=1) - 0.5) <= 1e-12


def test_rouge1_single_token_answer():
    assert rouge_1("1", "1") == 1.0
    assert rouge_1("2", "1") == 0.0


def test_rouge1_partial():
    # overlap 2, P = 2/3, R = 2/4 -> F = 4/7
    assert abs(rouge_1("a b x", "a b c d") - 4 / 7) <= 1e-12


def test_rouge_l_hand_cases():
    assert lcs_length("polyp in central region".split(), "polyp located in central region".split()) == 4
    assert abs(rouge_l("polyp in central region", "polyp located in central region") - 8 / 9) <= 1e-12
    assert abs(rouge_l("c b a", "a b c") - 1 / 3) <= 1e-12


def test_meteor_hand_cases():
    assert abs(meteor("b a", "a b") - 0.5) <= 1e-12
    for n in range(1, 6):
        s = " ".join(f"w{i}" for i in range(n))
        assert abs(meteor(s, s) - (1 - 0.5 / n**3)) <= 1e-12


def test_meteor_partial_match_formula():
    # m = 2, P = 2/3, R = 2/2, one chunk
    p, r = 2 / 3, 1.0
    fmean = p * r / (0.9 * p + 0.1 * r)
    assert abs(meteor("a b x", "a b") - fmean * (1 - 0.5 * (1 / 2) ** 3)) <= 1e-12


def test_empty_reference_rejected():
    for metric in METRICS:
        with pytest.raises(InputError):
            metric("a", "")
        assert metric("", "a") == 0.0


@settings(max_examples=100, deadline=None)
@given(WORDS, WORDS)
def test_scores_in_unit_interval(c, r):
    for metric in METRICS:
        assert 0.0 <= metric(c, r) <= 1.0


@settings(max_examples=100, deadline=None)
@given(WORDS, WORDS, st.permutations(list("abcdefg")))
def test_invariant_under_relabeling(c, r, perm):
    rename = dict(zip("abcdefg", perm))
    c2, r2 = [rename[w] for w in c], [rename[w] for w in r]
    for metric in METRICS:
        assert metric(c, r) == metric(c2, r2)


@settings(max_examples=100, deadline=None)
@given(WORDS, WORDS)
def test_rouge_is_symmetric(c, r):
    assert abs(rouge_1(c, r) - rouge_1(r, c)) <= 1e-12
    assert abs(rouge_l(c, r) - rouge_l(r, c)) <= 1e-12


def test_text_report_is_sentence_mean():
    rep = text_report([["1"], ["no"]], [["1"], ["yes"]])
    assert rep.rouge1 == 0.5 and rep.rougeL == 0.5 and rep.bleu == 0.5
    with pytest.raises(InputError):
        text_report([["a"]], [])


def test_report_range_contract():
    with pytest.raises(ContractError):
        MetricReport(1.5, 0, 0, 0)
