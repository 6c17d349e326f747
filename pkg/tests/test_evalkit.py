import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eadl import evalkit as ek
from eadl.corpus import BIO_LABELS, TaggedSentence
from eadl.errors import InputError

bio_tags = st.lists(st.sampled_from(BIO_LABELS), min_size=1, max_size=20)


# ---------------------------------------------------------------------------
# decoding


def test_decode_simple_span():
    assert ek.decode_bio(["B-PER", "I-PER", "O"]) == [ek.NerSpan(0, 2, "PER")]


def test_decode_repairs_stray_continuation():
    assert ek.decode_bio(["O", "I-LOC"]) == [ek.NerSpan(1, 2, "LOC")]


def test_decode_adjacent_b_tags():
    assert ek.decode_bio(["B-ORG", "B-ORG"]) == [ek.NerSpan(0, 1, "ORG"), ek.NerSpan(1, 2, "ORG")]


def test_decode_type_switch_opens_new_span():
    assert ek.decode_bio(["B-PER", "I-ORG"]) == [ek.NerSpan(0, 1, "PER"), ek.NerSpan(1, 2, "ORG")]


def test_decode_unknown_label():
    with pytest.raises(InputError):
        ek.decode_bio(["B-DATE"])


@settings(max_examples=100, deadline=None)
@given(bio_tags)
def test_decode_spans_sorted_and_disjoint(tags):
    spans = ek.decode_bio(tags)
    for span in spans:
        assert 0 <= span.start < span.end <= len(tags)
    for a, b in zip(spans, spans[1:]):
        assert a.end <= b.start


# ---------------------------------------------------------------------------
# entity F1


def test_perfect_prediction_scores_one():
    tags = ["B-PER", "I-PER", "O", "B-LOC"]
    scores = ek.entity_f1(tags, tags)
    assert scores["ALL"].f1 == 1.0
    assert scores["PER"].f1 == 1.0 and scores["LOC"].f1 == 1.0


def test_no_predictions_degenerate_convention():
    scores = ek.entity_f1(["O", "O", "O"], ["B-PER", "I-PER", "O"])
    assert scores["PER"].recall == 0.0
    assert scores["PER"].precision == 0.0  # undefined -> reported 0
    assert scores["PER"].f1 == 0.0


def test_hand_counted_micro_case():
    gold = ["B-PER", "I-PER", "O", "B-ORG", "O"]
    pred = ["B-PER", "I-PER", "O", "B-ORG", "I-ORG"]  # ORG span end differs
    scores = ek.entity_f1(pred, gold)
    assert scores["PER"].f1 == 1.0
    assert scores["ORG"].f1 == 0.0
    assert scores["ALL"].f1 == 0.5  # TP=1, FP=1, FN=1


def test_exact_match_requires_start_end_and_tag():
    gold = ["B-PER", "I-PER", "O"]
    assert ek.entity_f1(["B-PER", "O", "O"], gold)["ALL"].f1 == 0.0  # end differs
    assert ek.entity_f1(["B-ORG", "I-ORG", "O"], gold)["ALL"].f1 == 0.0  # tag differs


def test_length_mismatch_rejected():
    with pytest.raises(InputError):
        ek.entity_f1(["O"], ["O", "O"])


def brute_force_scores(pred_sentences, gold_sentences):
    """Independent oracle: explicit span-set comparison per tag."""
    tp = {t: 0 for t in ek.TAG_TYPES}
    pred_n = {t: 0 for t in ek.TAG_TYPES}
    gold_n = {t: 0 for t in ek.TAG_TYPES}
    for pred, gold in zip(pred_sentences, gold_sentences):
        pspans = {(s.start, s.end, s.tag) for s in ek.decode_bio(pred)}
        gspans = {(s.start, s.end, s.tag) for s in ek.decode_bio(gold)}
        for _, _, t in pspans:
            pred_n[t] += 1
        for _, _, t in gspans:
            gold_n[t] += 1
        for _, _, t in pspans & gspans:
            tp[t] += 1
    out = {}
    for t in ek.TAG_TYPES:
        p = tp[t] / pred_n[t] if pred_n[t] else 0.0
        r = tp[t] / gold_n[t] if gold_n[t] else 0.0
        out[t] = (p, r, 2 * p * r / (p + r) if p + r else 0.0)
    tpa, pa, ga = sum(tp.values()), sum(pred_n.values()), sum(gold_n.values())
    p = tpa / pa if pa else 0.0
    r = tpa / ga if ga else 0.0
    out["ALL"] = (p, r, 2 * p * r / (p + r) if p + r else 0.0)
    return out


def test_entity_f1_agrees_with_bruteforce_on_random_sentences():
    rng = np.random.default_rng(1)
    preds, golds = [], []
    for _ in range(50):
        n = int(rng.integers(1, 12))
        preds.append([BIO_LABELS[i] for i in rng.integers(0, 9, size=n)])
        golds.append([BIO_LABELS[i] for i in rng.integers(0, 9, size=n)])
    scores = ek.entity_f1(preds, golds)
    oracle = brute_force_scores(preds, golds)
    for tag in (*ek.TAG_TYPES, "ALL"):
        assert (scores[tag].precision, scores[tag].recall, scores[tag].f1) == oracle[tag], tag


def test_swap_symmetry_precision_recall():
    rng = np.random.default_rng(2)
    for _ in range(10):
        n = int(rng.integers(2, 15))
        a = [BIO_LABELS[i] for i in rng.integers(0, 9, size=n)]
        b = [BIO_LABELS[i] for i in rng.integers(0, 9, size=n)]
        ab = ek.entity_f1(a, b)["ALL"]
        ba = ek.entity_f1(b, a)["ALL"]
        assert ab.precision == ba.recall and ab.recall == ba.precision
        assert abs(ab.f1 - ba.f1) < 1e-12


# ---------------------------------------------------------------------------
# length statistics


def test_length_stats_constant():
    s = ek.length_stats([1, 1, 1])
    assert (s.mean, s.std_dev, s.min, s.p25, s.p50, s.p75, s.max) == (1, 0, 1, 1, 1, 1, 1)


def test_length_stats_odd_median():
    s = ek.length_stats([1, 2, 3, 4, 5])
    assert s.p50 == 3.0 and s.mean == 3.0 and s.min == 1.0 and s.max == 5.0


def test_length_stats_population_vs_sample_std():
    data = [2.0, 4.0, 6.0]
    assert ek.length_stats(data).std_dev == pytest.approx(np.std(data))
    assert ek.length_stats(data, sample_std=True).std_dev == pytest.approx(np.std(data, ddof=1))


def test_length_stats_percentile_interpolation():
    s = ek.length_stats([1, 2, 3, 4])
    assert s.p25 == 1.75 and s.p50 == 2.5 and s.p75 == 3.25


def test_length_stats_empty_rejected():
    with pytest.raises(InputError):
        ek.length_stats([])


def test_length_stats_report_rows(tmp_path):
    path = tmp_path / "stats.csv"
    ek.write_length_stats(ek.length_stats([1, 2, 3]), path)
    names = [line.split(",")[0] for line in path.read_text().splitlines()]
    assert names == ["mean", "std. dev.", "min", "25%", "50%", "75%", "max"]


# ---------------------------------------------------------------------------
# tag distribution


def test_tag_distribution_single_sentence():
    dist = ek.tag_distribution([TaggedSentence(["a", "b"], ["B-PER", "O"])])
    assert dist.p["B-PER"] == 0.5
    assert dist.p1["B-PER"] == 1.0


def test_tag_distribution_all_o_flagged():
    dist = ek.tag_distribution([TaggedSentence(["a"], ["O"])])
    assert dist.p["O"] == 1.0
    assert not dist.p1_defined
    assert all(v == 0.0 for v in dist.p1.values())


def test_tag_distribution_planted_fraction():
    sentences = []
    for _ in range(10):
        tags = ["B-PER"] * 2 + ["O"] * 18  # exactly 10% B-PER
        sentences.append(TaggedSentence(["x"] * 20, tags))
    dist = ek.tag_distribution(sentences)
    assert dist.p["B-PER"] == pytest.approx(0.10)


def test_tag_distribution_columns_sum_to_one():
    rng = np.random.default_rng(3)
    sentences = []
    for _ in range(30):
        n = int(rng.integers(1, 30))
        sentences.append(TaggedSentence(["x"] * n, [BIO_LABELS[i] for i in rng.integers(0, 9, size=n)]))
    dist = ek.tag_distribution(sentences)
    assert abs(sum(dist.p.values()) - 1.0) < 1e-9
    if dist.p1_defined:
        assert abs(sum(dist.p1.values()) - 1.0) < 1e-9


# ---------------------------------------------------------------------------
# ratios


def test_retention_reproduces_headline_numbers():
    assert ek.retention(85.81, 92.24) == pytest.approx(0.930, abs=0.0015)
    assert ek.retention(64.96, 73.48) == pytest.approx(0.884, abs=0.0015)
    assert ek.retention(67.7, 70.6) == pytest.approx(0.959, abs=0.0015)
    assert ek.retention(93.6, 93.8) == pytest.approx(0.998, abs=0.0015)
    assert ek.retention(5.0, 5.0) == 1.0


def test_speedup_reproduces_headline_numbers():
    assert ek.speedup(0.787, 1.866) == pytest.approx(-0.578, abs=0.0015)
    assert ek.speedup(0.075, 0.148) == pytest.approx(-0.493, abs=0.0015)
    assert ek.speedup(2.5, 2.5) == 0.0


def test_ratio_input_guards():
    with pytest.raises(InputError):
        ek.retention(1.0, 0.0)
    with pytest.raises(InputError):
        ek.speedup(1.0, -2.0)


def test_f1_report_csv(tmp_path):
    scores = ek.entity_f1(["B-PER", "O"], ["B-PER", "O"])
    path = tmp_path / "f1.csv"
    ek.write_f1_report(scores, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "tag,precision,recall,f1,support"
    assert lines[1].startswith("PER,")
    assert lines[-1].startswith("ALL,")
