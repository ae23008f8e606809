"""Evaluation metrics: SQuAD EM/F1, ROUGE-L, BLEU-4 and unanswerable-class P/R/F1."""

from __future__ import annotations

import math
import re
import string
import unicodedata
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

_ARTICLES = re.compile(r"\b(a|an|the)\b", re.UNICODE)
_PUNCT = set(string.punctuation)


def normalize_text(s: str) -> str:
    """Lowercase, drop punctuation and English articles, collapse whitespace."""
    s = s.lower()
    s = "".join(ch for ch in s if ch not in _PUNCT)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def _is_cjk(ch: str) -> bool:
    return unicodedata.category(ch) == "Lo" and "CJK" in unicodedata.name(ch, "")


def metric_tokens(s: str) -> list[str]:
    """Normalized tokens; CJK text is split per character."""
    out: list[str] = []
    for word in normalize_text(s).split():
        if any(_is_cjk(ch) for ch in word):
            buf = ""
            for ch in word:
                if _is_cjk(ch):
                    if buf:
                        out.append(buf)
                        buf = ""
                    out.append(ch)
                else:
                    buf += ch
            if buf:
                out.append(buf)
        else:
            out.append(word)
    return out


def _golds(golds) -> list[str]:
    if isinstance(golds, str):
        return [golds]
    return list(golds) or [""]


def exact_match(pred: str, golds: Sequence[str] | str) -> int:
    p = normalize_text(pred)
    return int(any(p == normalize_text(g) for g in _golds(golds)))


def _f1_single(pred: str, gold: str) -> float:
    pt, gt = metric_tokens(pred), metric_tokens(gold)
    if not pt or not gt:
        return float(pt == gt)
    common = Counter(pt) & Counter(gt)
    same = sum(common.values())
    if same == 0:
        return 0.0
    precision = same / len(pt)
    recall = same / len(gt)
    return 2 * precision * recall / (precision + recall)


def token_f1(pred: str, golds: Sequence[str] | str) -> float:
    return max(_f1_single(pred, g) for g in _golds(golds))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(pred: Sequence[str], gold: Sequence[str], beta: float = 1.2) -> float:
    """LCS F-measure ``(1+b^2) P R / (R + b^2 P)`` over token sequences."""
    if not pred or not gold:
        return 0.0
    lcs = lcs_length(pred, gold)
    if lcs == 0:
        return 0.0
    p = lcs / len(pred)
    r = lcs / len(gold)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(pred: Sequence[str], gold: Sequence[str], smoothing: bool = True) -> float:
    """Cumulative 4-gram BLEU with brevity penalty.

    With ``smoothing`` the clipped counts for n >= 2 get +1 in numerator and
    denominator. Zero unigram matches always give 0.
    """
    if not pred or not gold:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        cand = _ngrams(pred, n)
        ref = _ngrams(gold, n)
        matched = sum(min(c, ref[g]) for g, c in cand.items())
        total = max(1, sum(cand.values()))
        if smoothing and n >= 2:
            matched, total = matched + 1, total + 1
        if matched == 0:
            return 0.0
        log_sum += 0.25 * math.log(matched / total)
    c, r = len(pred), len(gold)
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(log_sum)


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def unanswerable_prf(scores: Sequence[float | None], gold_unanswerable: Sequence[bool],
                     threshold: float) -> tuple[float, float, float]:
    """Precision/recall/F1 with "unanswerable" as the positive class.

    A prediction abstains iff its score exceeds ``threshold``; a missing
    score (None) counts as answering.
    """
    tp = fp = fn = 0
    for s, g in zip(scores, gold_unanswerable):
        abstain = s is not None and s > threshold
        if abstain and g:
            tp += 1
        elif abstain:
            fp += 1
        elif g:
            fn += 1
    return prf(tp, fp, fn)


@dataclass
class PredictionRecord:
    """One line of the prediction file. ``answer_text`` is None when abstaining."""
    id: str
    score: float
    answer_text: str | None
    start: int | None = None
    end: int | None = None
    best_text: str | None = None  # best span regardless of the decision, for threshold sweeps

    def to_json(self) -> dict:
        return {"id": self.id, "score": self.score, "answer_text": self.answer_text,
                "start": self.start, "end": self.end}

    def text_at(self, threshold: float) -> str | None:
        if self.score > threshold:
            return None
        if self.best_text is not None:
            return self.best_text
        return self.answer_text or ""


@dataclass
class GoldRecord:
    id: str
    answers: list[str]
    is_impossible: bool


@dataclass
class EvalReport:
    em: float
    f1: float
    rouge_l: float
    bleu4: float
    unans_precision: float
    unans_recall: float
    unans_f1: float
    total: int
    answered: int
    abstained: int
    threshold: float

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        rows = [("EM", self.em), ("F1", self.f1), ("ROUGE-L", self.rouge_l), ("BLEU-4", self.bleu4),
                ("Unans P", self.unans_precision), ("Unans R", self.unans_recall),
                ("Unans F1", self.unans_f1)]
        lines = [f"{name:<10}{100 * v:>8.2f}" for name, v in rows]
        lines += [f"{'total':<10}{self.total:>8d}", f"{'answered':<10}{self.answered:>8d}",
                  f"{'abstained':<10}{self.abstained:>8d}", f"{'threshold':<10}{self.threshold:>8.3f}"]
        return "\n".join(lines)


def _text_scores(pred: str | None, gold: GoldRecord, rouge_beta: float, smoothing: bool):
    if gold.is_impossible or not gold.answers:
        ok = float(pred is None)
        return ok, ok, ok, ok
    if pred is None:
        return 0.0, 0.0, 0.0, 0.0
    pt = metric_tokens(pred)
    golds = gold.answers
    return (float(exact_match(pred, golds)), token_f1(pred, golds),
            max(rouge_l(pt, metric_tokens(g), rouge_beta) for g in golds),
            max(bleu4(pt, metric_tokens(g), smoothing) for g in golds))


def evaluate_dataset(predictions: Iterable[PredictionRecord], golds: Sequence[GoldRecord],
                     threshold: float = 0.3, rouge_beta: float = 1.2,
                     bleu_smoothing: bool = True) -> EvalReport:
    """Aggregate every metric over the gold set.

    An unanswerable gold scores 1 on the text metrics only if the model
    abstained. A gold id without a prediction scores 0 and counts as answered.
    """
    by_id: dict[str, PredictionRecord] = {}
    for p in predictions:
        if p.id in by_id:
            raise ValueError(f"duplicate prediction id {p.id!r}")
        by_id[p.id] = p
    sums = [0.0, 0.0, 0.0, 0.0]
    scores: list[float | None] = []
    answered = abstained = 0
    for g in golds:
        p = by_id.get(g.id)
        if p is None:
            scores.append(None)
            answered += 1
            continue
        text = p.text_at(threshold)
        if text is None:
            abstained += 1
        else:
            answered += 1
        for k, v in enumerate(_text_scores(text, g, rouge_beta, bleu_smoothing)):
            sums[k] += v
        scores.append(p.score)
    n = len(golds)
    avg = [s / n if n else 0.0 for s in sums]
    P, R, F = unanswerable_prf(scores, [g.is_impossible for g in golds], threshold)
    return EvalReport(*avg, P, R, F, total=n, answered=answered, abstained=abstained, threshold=threshold)


def threshold_sweep(predictions: Sequence[PredictionRecord], golds: Sequence[GoldRecord],
                    thresholds: Sequence[float]) -> list[tuple[float, float, float, float]]:
    by_id = {p.id: p.score for p in predictions}
    scores = [by_id.get(g.id) for g in golds]
    flags = [g.is_impossible for g in golds]
    return [(t, *unanswerable_prf(scores, flags, t)) for t in thresholds]


def golds_from_raw(raws) -> list[GoldRecord]:
    return [GoldRecord(r.id, [t for t, _ in r.answers], r.is_impossible) for r in raws]


def as_records(rows: Iterable[Mapping]) -> list[PredictionRecord]:
    return [PredictionRecord(id=r["id"], score=float(r["score"]), answer_text=r.get("answer_text"),
                             start=r.get("start"), end=r.get("end")) for r in rows]
