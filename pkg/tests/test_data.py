import json

import numpy as np
import pytest

from mcrnet.data import (Batch, DatasetError, RawExample, SyntheticSpec, align_span, check_consistency, collate,
                         generate_synthetic, load_squad_json, make_batches, parse_squad, process_example,
                         process_examples, save_squad_json)
from mcrnet.encoder import Vocab, tokenize_with_offsets


def squad_blob():
    return {"version": "v2.0", "data": [
        {"title": "one", "paragraphs": [
            {"context": "Paris is the capital of France.",
             "qas": [{"id": "q1", "question": "What is the capital of France?",
                      "answers": [{"text": "Paris", "answer_start": 0}], "is_impossible": False}]}]},
        {"title": "two", "paragraphs": [
            {"context": "The river flows north.",
             "qas": [{"id": "q2", "question": "Which way does it flow?",
                      "answers": [{"text": "north", "answer_start": 16}], "is_impossible": False},
                     {"id": "q3", "question": "Who built the river?", "answers": [],
                      "plausible_answers": [{"text": "river", "answer_start": 4}], "is_impossible": True}]},
            {"context": "Cats sleep a lot.",
             "qas": [{"id": "q4", "question": "What do cats do?",
                      "answers": [{"text": "sleep", "answer_start": 5}], "is_impossible": False},
                     {"id": "q5", "question": "When do dogs bark?", "answers": [], "is_impossible": True}]}]},
    ]}


# ---------------------------------------------------------------------------
# loading


def test_parse_squad_counts_and_flags():
    raws = parse_squad(squad_blob())
    assert [r.id for r in raws] == ["q1", "q2", "q3", "q4", "q5"]
    assert [r.is_impossible for r in raws] == [False, False, True, False, True]
    assert raws[1].answers == [("north", 16)]


def test_load_malformed_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(DatasetError, match="malformed"):
        load_squad_json(path)


def test_missing_field_names_question(tmp_path):
    blob = squad_blob()
    del blob["data"][1]["paragraphs"][0]["qas"][0]["question"]
    path = tmp_path / "d.json"
    path.write_text(json.dumps(blob))
    with pytest.raises(DatasetError, match="q2"):
        load_squad_json(path)


def test_save_reload_idempotent(tmp_path):
    raws = parse_squad(squad_blob())
    first, second = tmp_path / "a.json", tmp_path / "b.json"
    save_squad_json(raws, first)
    again = load_squad_json(first)
    save_squad_json(again, second)
    assert again == raws
    assert first.read_bytes() == second.read_bytes()


# ---------------------------------------------------------------------------
# alignment


def _offs(text):
    return tokenize_with_offsets(text)[1]


def test_align_single_and_multi_token():
    text = "The river flows north quickly."
    assert align_span(text, "north", 16, _offs(text)) == (3, 3)
    assert align_span(text, "flows north", 10, _offs(text)) == (2, 3)


def test_align_answer_with_trailing_punctuation():
    text = "He said hello."
    # "hello." covers two tokens and normalizes to "hello"
    assert align_span(text, "hello.", 8, _offs(text)) == (2, 3)


def test_align_partial_token_extends_to_whole_token_then_fails_check():
    text = "Unbelievable results"
    assert align_span(text, "believ", 2, _offs(text)) is None


def test_align_bad_offsets():
    text = "abc def"
    assert align_span(text, "xyz", 4, _offs(text)) is None
    assert align_span(text, "def", 99, _offs(text)) is None


def test_process_example_positions_reconstruct_answer():
    vocab = Vocab.build(["The river flows north.", "Which way does it flow?"])
    raw = RawExample("q", "Which way does it flow?", "The river flows north.", [("north", 16)])
    ex = process_example(raw, vocab, 64)
    assert ex.start == ex.end == ex.passage_start + 3
    assert ex.span_text(ex.start, ex.end) == "north"
    assert ex.joint_tokens[ex.start] == "north"


def test_unalignable_answer_is_flagged_not_trained(caplog):
    vocab = Vocab()
    raw = RawExample("bad", "q ?", "some passage", [("nothing", 3)])
    out = process_examples([raw], vocab, 64)
    assert out[0].flagged and not out[0].trainable
    assert (out[0].start, out[0].end) == (0, 0)
    assert "could not be aligned" in caplog.text


def test_truncated_answer_is_flagged():
    raw = RawExample("t", "q", "a b c d e f g h", [("h", 14)])
    ex = process_example(raw, Vocab(), 8)
    assert ex.truncated and ex.flagged


def test_consistency_check_catches_bad_span():
    vocab = Vocab()
    ex = process_example(RawExample("q", "x", "aa bb", [("bb", 3)]), vocab, 32)
    ex.start = ex.end = ex.passage_start
    with pytest.raises(DatasetError, match="reconstructs"):
        check_consistency(ex)
    ex.start = ex.end = 0
    with pytest.raises(DatasetError, match="outside"):
        check_consistency(ex)


# ---------------------------------------------------------------------------
# synthetic


def test_synthetic_all_answerable():
    raws = generate_synthetic(SyntheticSpec(n=200, unanswerable_frac=0.0, seed=1))
    assert not any(r.is_impossible for r in raws)


def test_synthetic_unanswerable_fraction():
    raws = generate_synthetic(SyntheticSpec(n=1000, unanswerable_frac=0.5, seed=2))
    assert 400 <= sum(r.is_impossible for r in raws) <= 600


def test_synthetic_spans_decode_to_value():
    raws = generate_synthetic(SyntheticSpec(n=300, seed=3))
    vocab = Vocab.build([r.question for r in raws] + [r.passage for r in raws])
    exs = process_examples(raws, vocab, 128)
    for raw, ex in zip(raws, exs):
        assert not ex.flagged
        if raw.is_impossible:
            assert (ex.start, ex.end) == (0, 0)
        else:
            text = ex.span_text(ex.start, ex.end)
            assert text == raw.answers[0][0] and text.startswith("val")
            # the fact's key precedes the value with the question's polarity
            key, pol = raw.question.split()[1], raw.question.split()[3]
            assert ex.passage_tokens[ex.start - ex.passage_start - 2:ex.start - ex.passage_start] == [key, pol]


def test_synthetic_unanswerable_uses_opposite_polarity():
    raws = generate_synthetic(SyntheticSpec(n=200, unanswerable_frac=1.0, seed=4))
    for r in raws:
        key, pol = r.question.split()[1], r.question.split()[3]
        assert f"{key} {pol} " not in r.passage and key in r.passage


def test_synthetic_deterministic():
    a = generate_synthetic(SyntheticSpec(n=50, seed=9))
    b = generate_synthetic(SyntheticSpec(n=50, seed=9))
    c = generate_synthetic(SyntheticSpec(n=50, seed=10))
    assert a == b and a != c


def test_synthetic_empty_and_invalid():
    assert generate_synthetic(SyntheticSpec(n=0)) == []
    with pytest.raises(ValueError):
        SyntheticSpec(unanswerable_frac=1.5)


# ---------------------------------------------------------------------------
# batching


def _processed(n=10):
    raws = generate_synthetic(SyntheticSpec(n=n, seed=5))
    vocab = Vocab.build([r.question for r in raws] + [r.passage for r in raws])
    return process_examples(raws, vocab, 64)


def test_single_example_single_batch():
    batches = make_batches(_processed(1), batch_size=32, max_len=64)
    assert len(batches) == 1 and len(batches[0]) == 1


def test_batches_cover_all_examples_once():
    exs = _processed(10)
    batches = make_batches(exs, batch_size=4, max_len=64, shuffle_seed=1)
    assert [len(b) for b in batches] == [4, 4, 2]
    assert sorted(i for b in batches for i in b.ids) == sorted(e.id for e in exs)


def test_shuffle_is_seeded():
    exs = _processed(10)
    order = lambda s: [i for b in make_batches(exs, 4, 64, shuffle_seed=s) for i in b.ids]  # noqa: E731
    assert order(7) == order(7)
    assert order(7) != order(8)


def test_collate_fields():
    exs = _processed(3)
    batch = collate(exs, 64)
    assert isinstance(batch, Batch)
    assert batch.joint.ids.shape[0] == 3
    assert batch.starts.tolist() == [e.start for e in exs]
    assert batch.labels.tolist() == [e.label for e in exs]
    for i, ex in enumerate(exs):
        assert batch.joint.passage_start[i] == ex.passage_start
        assert batch.joint.passage_end[i] == ex.passage_end
    with pytest.raises(Exception):
        batch.starts = np.zeros(3)
