import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mat_caption.metrics import EvalPair, bleu, cider, evaluate, lcs_length, rouge_l

CORPUS = [
    ("a dog runs on the grass", ["a dog runs on the grass"]),
    ("two cats sit on a red sofa", ["two cats sit on a red sofa", "cats on a sofa"]),
    ("a man rides a big horse", ["a man rides a big horse"]),
]


def test_bleu_perfect_and_disjoint():
    for n in range(1, 5):
        assert bleu(CORPUS, n) == pytest.approx(1.0, abs=1e-12)
    assert bleu([("x y z w", ["a b c d"])], 1) == 0.0


def test_bleu_brevity_penalty_hand_value():
    expected = math.exp(1 - 4 / 3)
    assert bleu([("the cat sat", ["the cat sat down"])], 1) == pytest.approx(expected, abs=1e-12)
    assert abs(expected - 0.7165) < 1e-4


def test_bleu_clipping_and_closest_ref():
    # 'the' x4 clipped to 2 matches; closest reference length is 4
    score = bleu([("the the the the", ["the cat the mat", "a b c d e f g"])], 1)
    assert score == pytest.approx(0.5, abs=1e-12)


def test_bleu_order_monotone():
    corpus = [("a b c d x f", ["a b c d e f"]), ("p q r s", ["p q r t"])]
    scores = [bleu(corpus, n) for n in range(1, 5)]
    assert all(a >= b for a, b in zip(scores, scores[1:]))
    with pytest.raises(ValueError):
        bleu(corpus, 0)


def test_rouge_l_hand_values():
    assert rouge_l([("a b c", ["a x c"])]) == pytest.approx(2 / 3, abs=1e-12)
    assert rouge_l([("a b c", ["a b c"])]) == 1.0
    assert rouge_l([("a b", ["c d"])]) == 0.0
    assert lcs_length("a b c b d a b".split(), "b d c a b a".split()) == 4


def test_rouge_l_beta_weighting():
    # P = 1, R = 1/2: F = 2.44 * 0.5 / (0.5 + 1.44) with beta = 1.2
    assert rouge_l([("a b", ["a b c d"])]) == pytest.approx(1.22 / 1.94, abs=1e-12)


def test_cider_identical_distinct_is_ten():
    corpus = [("a b c d e", ["a b c d e"]), ("f g h i j", ["f g h i j"]), ("k l m n o", ["k l m n o"])]
    assert cider(corpus) == pytest.approx(10.0, abs=1e-10)


def test_cider_disjoint_is_zero():
    assert cider([("x y", ["a b"]), ("z w", ["c d"])]) == 0.0


def test_cider_two_image_hand_values():
    # unigram idf: a -> log(2/2) = 0, b, c -> log 2. Image 1 candidate has only 'a' -> 0.
    # Image 2: unigram cosine 1, no bigrams -> 1/4. Mean 1/8, times 10.
    assert cider([("a", ["a b"]), ("c", ["a c"])]) == pytest.approx(1.25, abs=1e-10)
    # Image 1 now matches at n=1,2 -> 2/4; image 2 as before -> 1/4.
    assert cider([("a b", ["a b"]), ("c", ["a c"])]) == pytest.approx(3.75, abs=1e-10)


def test_cider_single_image_warns():
    with pytest.warns(UserWarning):
        assert cider([("a b", ["a b"])]) == 0.0


def test_cider_d_variant():
    corpus = [("a b c d e", ["a b c d e"]), ("f g h i j", ["f g h i j"])]
    assert cider(corpus, variant="cider-d") == pytest.approx(10.0, abs=1e-10)
    shorter = [("a b c d", ["a b c d e"]), ("f g h i j", ["f g h i j"])]
    assert cider(shorter, variant="cider-d") < cider(shorter)
    with pytest.raises(ValueError):
        cider(corpus, variant="meteor")


def test_evaluate_report():
    cands = {"1": "a dog runs", "2": "a cat"}
    refs = {"1": ["a dog runs"], "2": ["a cat", "one cat"]}
    rep = evaluate(cands, refs)
    assert set(rep) == {"bleu1", "bleu2", "bleu3", "bleu4", "rougeL", "cider"}
    assert rep["bleu1"] == 1.0
    with pytest.raises(KeyError):
        evaluate({"3": "x"}, refs)
    with pytest.raises(ValueError):
        EvalPair(["a"], [])


words = st.sampled_from("a b c d e f g".split())
sentences = st.lists(words, min_size=1, max_size=8).map(" ".join)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(sentences, st.lists(sentences, min_size=1, max_size=3)), min_size=2, max_size=6),
       st.randoms())
def test_metrics_permutation_invariant_and_in_range(corpus, rnd):
    shuffled = list(corpus)
    rnd.shuffle(shuffled)
    for n in range(1, 5):
        b = bleu(corpus, n)
        assert 0.0 <= b <= 1.0 + 1e-12
        assert b == pytest.approx(bleu(shuffled, n), abs=1e-12)
    r = rouge_l(corpus)
    assert 0.0 <= r <= 1.0 + 1e-12
    assert r == pytest.approx(rouge_l(shuffled), abs=1e-12)
    c = cider(corpus)
    assert c >= 0.0
    assert c == pytest.approx(cider(shuffled), abs=1e-9)
