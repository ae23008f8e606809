"""SQuAD 2.0 ingestion, span alignment, batching, and the synthetic polarity task."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoder import JointInputs, Vocab, fit_lengths, joint_layout, question_layout, tokenize_with_offsets
from .metrics import normalize_text
from .tensor import make_rng

log = logging.getLogger(__name__)


@dataclass
class RawExample:
    id: str
    question: str
    passage: str
    answers: list[tuple[str, int]] = field(default_factory=list)
    is_impossible: bool = False


@dataclass
class ProcessedExample:
    id: str
    question_ids: list[int]
    passage_ids: list[int]
    passage: str
    offsets: list[tuple[int, int]]       # char span per kept passage token
    start: int                           # joint-sequence position, 0 = sentinel
    end: int
    label: int                           # 1 = unanswerable
    gold_texts: list[str]
    truncated: bool = False
    flagged: bool = False                # gold answer could not be aligned; eval only
    question_tokens: list[str] = field(default_factory=list)
    passage_tokens: list[str] = field(default_factory=list)

    @property
    def passage_start(self) -> int:
        return len(self.question_ids) + 2

    @property
    def passage_end(self) -> int:
        return self.passage_start + len(self.passage_ids)

    @property
    def joint_tokens(self) -> list[str]:
        return ["[CLS]", *self.question_tokens, "[SEP]", *self.passage_tokens, "[SEP]"]

    @property
    def trainable(self) -> bool:
        return not self.flagged

    def span_text(self, start: int, end: int) -> str:
        """Original passage substring covered by joint positions ``[start, end]``."""
        a = self.offsets[start - self.passage_start][0]
        b = self.offsets[end - self.passage_start][1]
        return self.passage[a:b]


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# SQuAD JSON


def load_squad_json(path: str | Path) -> list[RawExample]:
    path = Path(path)
    try:
        blob = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: malformed JSON ({exc})") from exc
    return parse_squad(blob, source=str(path))


def parse_squad(blob: dict, source: str = "<memory>") -> list[RawExample]:
    out = []
    for article in blob.get("data", []):
        for para in article["paragraphs"]:
            context = para["context"]
            for qa in para["qas"]:
                qid = qa.get("id", "<missing id>")
                try:
                    answers = [(a["text"], int(a["answer_start"])) for a in qa.get("answers", [])]
                    out.append(RawExample(
                        id=qa["id"], question=qa["question"], passage=context, answers=answers,
                        is_impossible=bool(qa.get("is_impossible", not answers)),
                    ))
                except KeyError as exc:
                    raise DatasetError(f"{source}: question {qid} is missing field {exc}") from exc
    return out


def to_squad(examples: Iterable[RawExample], title: str = "dataset") -> dict:
    """Inverse of ``parse_squad``; consecutive examples sharing a passage share a paragraph."""
    paragraphs: list[dict] = []
    for ex in examples:
        if not paragraphs or paragraphs[-1]["context"] != ex.passage:
            paragraphs.append({"context": ex.passage, "qas": []})
        paragraphs[-1]["qas"].append({
            "id": ex.id, "question": ex.question, "is_impossible": ex.is_impossible,
            "answers": [{"text": t, "answer_start": s} for t, s in ex.answers],
        })
    return {"version": "v2.0", "data": [{"title": title, "paragraphs": paragraphs}] if paragraphs else []}


def save_squad_json(examples: Iterable[RawExample], path: str | Path, title: str = "dataset") -> None:
    Path(path).write_text(json.dumps(to_squad(examples, title), ensure_ascii=False, indent=1) + "\n",
                          encoding="utf-8")


# ---------------------------------------------------------------------------
# alignment


def align_span(passage: str, answer_text: str, answer_start: int,
               offsets: Sequence[tuple[int, int]]) -> tuple[int, int] | None:
    """Smallest token range covering the answer's char extent.

    Returns passage-token indices ``(s, e)``, or None when no token overlaps
    or the covered text does not normalize to the answer text.
    """
    if not 0 <= answer_start <= len(passage):
        return None
    a, b = answer_start, answer_start + len(answer_text)
    covering = [i for i, (ts, te) in enumerate(offsets) if ts < b and te > a]
    if not covering:
        return None
    s, e = covering[0], covering[-1]
    recovered = passage[offsets[s][0]:offsets[e][1]]
    if normalize_text(recovered) != normalize_text(answer_text):
        return None
    return s, e


def process_example(raw: RawExample, vocab: Vocab, max_len: int) -> ProcessedExample:
    q_tokens, _ = tokenize_with_offsets(raw.question)
    p_tokens, offsets = tokenize_with_offsets(raw.passage)
    m, n = fit_lengths(len(q_tokens), len(p_tokens), max_len)
    truncated = m < len(q_tokens) or n < len(p_tokens)
    q_ids = vocab.ids(q_tokens[:m])
    p_ids = vocab.ids(p_tokens[:n])
    offsets = offsets[:n]
    gold_texts = [t for t, _ in raw.answers]
    ex = ProcessedExample(id=raw.id, question_ids=q_ids, passage_ids=p_ids, passage=raw.passage,
                          offsets=offsets, start=0, end=0, label=int(raw.is_impossible),
                          gold_texts=gold_texts, truncated=truncated,
                          question_tokens=q_tokens[:m], passage_tokens=p_tokens[:n])
    if raw.is_impossible:
        return ex
    if not raw.answers:
        ex.flagged = True
        return ex
    text, start = raw.answers[0]
    span = align_span(raw.passage, text, start, offsets)
    if span is None:
        ex.flagged = True
        return ex
    ex.start, ex.end = ex.passage_start + span[0], ex.passage_start + span[1]
    return ex


def process_examples(raws: Iterable[RawExample], vocab: Vocab, max_len: int) -> list[ProcessedExample]:
    out = [process_example(r, vocab, max_len) for r in raws]
    for ex in out:
        check_consistency(ex)
    flagged = sum(ex.flagged for ex in out)
    if flagged:
        log.warning("%d of %d examples could not be aligned and are excluded from training", flagged, len(out))
    return out


def check_consistency(ex: ProcessedExample) -> None:
    if ex.label == 1 or ex.flagged:
        if (ex.start, ex.end) != (0, 0):
            raise DatasetError(f"{ex.id}: unanswerable/flagged example must use the sentinel span")
        return
    if not ex.passage_start <= ex.start <= ex.end < ex.passage_end:
        raise DatasetError(f"{ex.id}: gold span {(ex.start, ex.end)} outside passage region")
    recovered = normalize_text(ex.span_text(ex.start, ex.end))
    if recovered != normalize_text(ex.gold_texts[0]):
        raise DatasetError(f"{ex.id}: gold span reconstructs {recovered!r}, expected {ex.gold_texts[0]!r}")


# ---------------------------------------------------------------------------
# batching


@dataclass(frozen=True)
class Batch:
    examples: tuple[ProcessedExample, ...]
    joint: JointInputs
    question_ids: np.ndarray
    question_mask: np.ndarray
    starts: np.ndarray
    ends: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def ids(self) -> list[str]:
        return [ex.id for ex in self.examples]


def collate(examples: Sequence[ProcessedExample], max_len: int) -> Batch:
    joint = joint_layout([ex.question_ids for ex in examples], [ex.passage_ids for ex in examples], max_len)
    q_ids, q_mask = question_layout([ex.question_ids for ex in examples], max_len)
    return Batch(
        examples=tuple(examples), joint=joint, question_ids=q_ids, question_mask=q_mask,
        starts=np.array([ex.start for ex in examples]), ends=np.array([ex.end for ex in examples]),
        labels=np.array([ex.label for ex in examples]),
    )


def make_batches(examples: Sequence[ProcessedExample], batch_size: int = 32, max_len: int = 128,
                 shuffle_seed: int | None = None) -> list[Batch]:
    order = np.arange(len(examples))
    if shuffle_seed is not None:
        make_rng(shuffle_seed).shuffle(order)
    return [collate([examples[i] for i in order[k:k + batch_size]], max_len)
            for k in range(0, len(order), batch_size)]


# ---------------------------------------------------------------------------
# synthetic task

POLARITY_PAIRS = [("little", "significant"), ("few", "many"), ("low", "high"), ("weak", "strong"),
                  ("minor", "major"), ("slight", "heavy"), ("rare", "common"), ("small", "large")]


@dataclass
class SyntheticSpec:
    n: int = 1000
    unanswerable_frac: float = 0.33
    vocab_size: int = 200
    n_keys: int = 12
    n_polarity_pairs: int = 4
    n_values: int = 40
    min_filler: int = 6
    max_filler: int = 14
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.unanswerable_frac <= 1.0:
            raise ValueError("unanswerable_frac must lie in [0, 1]")
        if self.n < 0:
            raise ValueError("n must be >= 0")
        if self.n_polarity_pairs < 1 or self.n_keys < 1 or self.n_values < 1:
            raise ValueError("need at least one key, value and polarity pair")


def _polarity_pairs(count: int) -> list[tuple[str, str]]:
    pairs = POLARITY_PAIRS[:count]
    pairs += [(f"pola{i}", f"polb{i}") for i in range(len(pairs), count)]
    return pairs


def generate_synthetic(spec: SyntheticSpec) -> list[RawExample]:
    """Passages of filler words around one fact ``<key> <polarity> <value>``.

    The question names the key and a polarity. It is answerable (gold answer
    the value word) iff its polarity equals the fact's; otherwise it asks
    about the opposite polarity and the value is only a plausible answer.
    """
    rng = make_rng(spec.seed)
    pairs = _polarity_pairs(spec.n_polarity_pairs)
    keys = [f"key{i}" for i in range(spec.n_keys)]
    values = [f"val{i}" for i in range(spec.n_values)]
    fillers = [f"w{i}" for i in range(spec.vocab_size)]
    out = []
    for i in range(spec.n):
        key = keys[rng.integers(len(keys))]
        pair = pairs[rng.integers(len(pairs))]
        side = int(rng.integers(2))
        fact_pol = pair[side]
        unanswerable = bool(rng.random() < spec.unanswerable_frac)
        q_pol = pair[1 - side] if unanswerable else fact_pol
        value = values[rng.integers(len(values))]
        n_fill = int(rng.integers(spec.min_filler, spec.max_filler + 1))
        words = [fillers[j] for j in rng.integers(len(fillers), size=n_fill)]
        at = int(rng.integers(n_fill + 1))
        before = " ".join(words[:at])
        prefix = (before + " " if before else "") + f"{key} {fact_pol} "
        passage = prefix + value + (" " + " ".join(words[at:]) if words[at:] else "") + " ."
        question = f"which {key} was {q_pol} ?"
        answers = [] if unanswerable else [(value, len(prefix))]
        out.append(RawExample(id=f"syn{spec.seed}-{i:06d}", question=question, passage=passage,
                              answers=answers, is_impossible=unanswerable))
    return out
