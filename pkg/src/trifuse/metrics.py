"""Temporal grounding and caption metrics.

Span metrics: temporal IoU, Recall@IoU, mean IoU.  Caption metrics: BLEU-4,
ROUGE-L, METEOR-lite, CIDEr.  Conventions the scores depend on (stated here
because they change absolute values):

* tokenization: lowercase, ASCII punctuation stripped, whitespace split
* BLEU smoothing: zero modified precisions replaced by epsilon = 1e-9;
  brevity penalty uses the closest reference length (ties -> shorter)
* ROUGE-L: LCS F-measure with beta^2 = 1.2, max over references
* METEOR-lite: exact + suffix-stem unigram matches (no synonymy database),
  F = 10PR/(R+9P), fragmentation penalty 1 - 0.5*(chunks/matches)^3,
  max over references
* CIDEr: mean over n=1..4 of 10 * cosine TF-IDF similarity, IDF =
  log(corpus size / document frequency) with unseen n-grams contributing 0
  (keeps scores invariant under corpus-wide duplication)

Missing predictions score 0 and stay in the denominators.
"""

from __future__ import annotations

import json
import math
import string
import warnings
from collections import Counter
from dataclasses import dataclass, field

from .events import TimeSpan

BLEU_EPSILON = 1e-9
ROUGE_BETA_SQ = 1.2
METEOR_STEM_SUFFIXES = ("ing", "ed", "es", "s", "ly")
TOKENIZER_NOTE = "lowercase, ASCII punctuation stripped, whitespace split"
METEOR_NOTE = "METEOR-lite: exact+suffix-stem matching, no synonymy database"
BLEU_NOTE = "BLEU-4 with epsilon smoothing (1e-9) for zero precisions"


class PredictionFormatError(ValueError):
    """Raised for malformed prediction files."""


# -- span metrics --------------------------------------------------------------


def iou(a: TimeSpan, b: TimeSpan) -> float:
    """Temporal intersection over union; identical point spans count as 1."""
    if a == b:
        return 1.0
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = max(a.end, b.end) - min(a.start, b.start)
    if union == 0.0:
        return 0.0
    return inter / union


@dataclass(frozen=True)
class SpanPrediction:
    sample_id: str
    pred: TimeSpan | None
    gold: TimeSpan

    def iou(self) -> float:
        return 0.0 if self.pred is None else iou(self.pred, self.gold)


def recall_at_iou(preds: list[SpanPrediction], threshold: float) -> float:
    """Fraction of samples whose IoU reaches the threshold; missing preds count 0."""
    if not preds:
        raise PredictionFormatError("recall_at_iou: empty prediction list")
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    hits = sum(1 for p in preds if p.iou() >= threshold)
    return hits / len(preds)


def mean_iou(preds: list[SpanPrediction]) -> float:
    if not preds:
        raise PredictionFormatError("mean_iou: empty prediction list")
    return sum(p.iou() for p in preds) / len(preds)


# -- tokenization -----------------------------------------------------------------

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def tokenize(text: str) -> list[str]:
    return text.lower().translate(_PUNCT_TABLE).split()


# -- BLEU-4 -----------------------------------------------------------------------


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(pred: list[str], refs: list[list[str]]) -> float:
    """Geometric mean of modified 1..4-gram precisions with brevity penalty."""
    if not refs:
        raise PredictionFormatError("bleu4 needs at least one reference")
    if not pred:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        cand = _ngrams(pred, n)
        total = sum(cand.values())
        if total == 0:
            log_sum += 0.25 * _safe_log(0.0)
            continue
        clipped = 0
        for gram, count in cand.items():
            best = max(ref_counts.get(gram, 0) for ref_counts in (_ngrams(r, n) for r in refs))
            clipped += min(count, best)
        log_sum += 0.25 * _safe_log(clipped / total)
    c = len(pred)
    r = min((abs(len(ref) - c), len(ref)) for ref in refs)[1]
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum)


def _safe_log(x: float) -> float:
    return math.log(max(x, BLEU_EPSILON))


# -- ROUGE-L -----------------------------------------------------------------------


def _lcs_len(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def rouge_l(pred: list[str], refs: list[list[str]]) -> float:
    """LCS F-measure with beta^2 = 1.2; max over references."""
    if not refs:
        raise PredictionFormatError("rouge_l needs at least one reference")
    if not pred:
        return 0.0
    best = 0.0
    for ref in refs:
        lcs = _lcs_len(pred, ref)
        if lcs == 0 or not ref:
            continue
        p = lcs / len(pred)
        r = lcs / len(ref)
        f = (1 + ROUGE_BETA_SQ) * p * r / (r + ROUGE_BETA_SQ * p)
        best = max(best, f)
    return best


# -- METEOR-lite ---------------------------------------------------------------------


def _stem(token: str) -> str:
    for suf in METEOR_STEM_SUFFIXES:
        if token.endswith(suf) and len(token) - len(suf) >= 3:
            return token[: -len(suf)]
    return token


def _align(pred: list[str], ref: list[str]) -> list[tuple[int, int]]:
    """Greedy in-order alignment: exact matches first, then stem matches."""
    matched_pred: set[int] = set()
    matched_ref: set[int] = set()
    pairs: list[tuple[int, int]] = []
    for exact in (True, False):
        for i, tok in enumerate(pred):
            if i in matched_pred:
                continue
            for j, rtok in enumerate(ref):
                if j in matched_ref:
                    continue
                ok = tok == rtok if exact else _stem(tok) == _stem(rtok)
                if ok:
                    pairs.append((i, j))
                    matched_pred.add(i)
                    matched_ref.add(j)
                    break
    return sorted(pairs)


def _chunks(pairs: list[tuple[int, int]]) -> int:
    count = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            count += 1
        prev = (i, j)
    return count


def meteor_lite(pred: list[str], refs: list[list[str]]) -> float:
    """Recall-weighted harmonic mean of unigram P/R times a fragmentation
    penalty; exact + suffix-stem matching; max over references."""
    if not refs:
        raise PredictionFormatError("meteor_lite needs at least one reference")
    if not pred:
        return 0.0
    best = 0.0
    for ref in refs:
        if not ref:
            continue
        pairs = _align(pred, ref)
        m = len(pairs)
        if m == 0:
            continue
        p = m / len(pred)
        r = m / len(ref)
        f = 10.0 * p * r / (r + 9.0 * p)
        penalty = 1.0 - 0.5 * (_chunks(pairs) / m) ** 3
        best = max(best, f * penalty)
    return best


# -- CIDEr ------------------------------------------------------------------------------


def cider(preds: list[list[str]], refs: list[list[list[str]]]) -> tuple[list[float], float]:
    """Corpus-level CIDEr: per-sample scores and their mean.

    ``refs[i]`` is the list of reference token lists for sample i.  Document
    frequencies come from the reference corpus; IDF = log(N/df), and n-grams
    absent from every reference carry zero weight, making scores invariant
    under corpus-wide duplication.
    """
    if len(preds) != len(refs):
        raise PredictionFormatError(f"cider: {len(preds)} predictions vs {len(refs)} reference sets")
    n_docs = len(refs)
    if n_docs == 0:
        raise PredictionFormatError("cider: empty corpus")
    if n_docs < 2:
        warnings.warn("cider on a corpus of size < 2: IDF is degenerate", stacklevel=2)

    df: list[Counter] = [Counter() for _ in range(4)]
    for ref_set in refs:
        for n in range(4):
            seen = set()
            for ref in ref_set:
                seen.update(_ngrams(ref, n + 1).keys())
            for gram in seen:
                df[n][gram] += 1

    def tfidf(tokens, n):
        vec = {}
        for gram, count in _ngrams(tokens, n + 1).items():
            d = df[n].get(gram, 0)
            if d > 0:
                vec[gram] = count * math.log(n_docs / d)
        return vec

    def cos(a, b):
        if not a or not b:
            return 0.0
        dot = sum(v * b[k] for k, v in a.items() if k in b)
        na = math.sqrt(sum(v * v for v in a.values()))
        nb = math.sqrt(sum(v * v for v in b.values()))
        if na == 0.0 or nb == 0.0:
            return 0.0
        return dot / (na * nb)

    scores = []
    for pred, ref_set in zip(preds, refs):
        per_n = []
        for n in range(4):
            gc = tfidf(pred, n)
            sims = [cos(gc, tfidf(ref, n)) for ref in ref_set]
            per_n.append(10.0 * sum(sims) / len(ref_set) if ref_set else 0.0)
        scores.append(sum(per_n) / 4.0)
    return scores, (sum(scores) / len(scores) if scores else 0.0)


# -- report ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    task: str
    modality_set: str
    count: int
    scores: dict[str, float]
    notes: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "modality_set": self.modality_set,
            "count": self.count,
            "scores": {k: float(v) for k, v in self.scores.items()},
        }


@dataclass
class PredictionSet:
    """Parsed prediction rows grouped by (task, modality set)."""

    mr: dict[str, list[SpanPrediction]] = field(default_factory=dict)
    sc: dict[str, list[tuple[str, list[str], list[list[str]]]]] = field(default_factory=dict)


def _parse_span(value, line_no, name) -> TimeSpan | None:
    if value is None:
        return None
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise PredictionFormatError(f"line {line_no}: {name} must be [start, end], got {value!r}")
    try:
        return TimeSpan(float(value[0]), float(value[1]))
    except Exception as exc:
        raise PredictionFormatError(f"line {line_no}: invalid {name}: {exc}")


def parse_predictions(lines) -> PredictionSet:
    """Parse prediction JSONL (one object per line) into task groups."""
    out = PredictionSet()
    for line_no, raw in enumerate(lines, start=1):
        raw = raw.strip()
        if not raw:
            continue
        try:
            row = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise PredictionFormatError(f"line {line_no}: invalid JSON: {exc}")
        task = row.get("task")
        if task not in ("MR", "SC"):
            raise PredictionFormatError(f"line {line_no}: missing or unknown task tag {task!r}")
        mset = row.get("modality_set")
        if not mset:
            raise PredictionFormatError(f"line {line_no}: missing modality_set")
        sid = str(row.get("sample_id", line_no))
        if task == "MR":
            if "gold_span" not in row:
                raise PredictionFormatError(f"line {line_no}: MR row without gold_span")
            gold = _parse_span(row["gold_span"], line_no, "gold_span")
            pred = _parse_span(row.get("pred_span"), line_no, "pred_span")
            out.mr.setdefault(mset, []).append(SpanPrediction(sid, pred, gold))
        else:
            if "gold_caption" not in row and "refs" not in row:
                raise PredictionFormatError(f"line {line_no}: SC row without gold_caption/refs")
            refs = row.get("refs") or [row["gold_caption"]]
            pred_text = row.get("pred_caption", "") or ""
            out.sc.setdefault(mset, []).append(
                (sid, tokenize(pred_text), [tokenize(r) for r in refs])
            )
    return out


def report(lines) -> list[MetricReport]:
    """Table-shaped metric report grouped by (task, modality set).

    MR groups report R@0.5 / R@0.7 / mIoU; SC groups report BLEU-4, METEOR,
    ROUGE-L, CIDEr.  Empty groups are omitted.
    """
    parsed = parse_predictions(lines)
    reports: list[MetricReport] = []
    for mset in sorted(parsed.mr):
        preds = parsed.mr[mset]
        if not preds:
            continue
        reports.append(
            MetricReport(
                task="MR",
                modality_set=mset,
                count=len(preds),
                scores={
                    "R@0.5": recall_at_iou(preds, 0.5),
                    "R@0.7": recall_at_iou(preds, 0.7),
                    "mIoU": mean_iou(preds),
                },
            )
        )
    for mset in sorted(parsed.sc):
        rows = parsed.sc[mset]
        if not rows:
            continue
        preds = [p for _, p, _ in rows]
        refs = [r for _, _, r in rows]
        _, cider_mean = cider(preds, refs)
        reports.append(
            MetricReport(
                task="SC",
                modality_set=mset,
                count=len(rows),
                scores={
                    "BLEU-4": sum(bleu4(p, r) for p, r in zip(preds, refs)) / len(rows),
                    "METEOR": sum(meteor_lite(p, r) for p, r in zip(preds, refs)) / len(rows),
                    "ROUGE-L": sum(rouge_l(p, r) for p, r in zip(preds, refs)) / len(rows),
                    "CIDEr": cider_mean,
                },
                notes=(TOKENIZER_NOTE, BLEU_NOTE, METEOR_NOTE),
            )
        )
    return reports


MR_COLUMNS = ("R@0.5", "R@0.7", "mIoU")
SC_COLUMNS = ("BLEU-4", "METEOR", "ROUGE-L", "CIDEr")


def render_table(reports: list[MetricReport]) -> str:
    """Human-readable table, one block per task."""
    lines = []
    for task, columns in (("MR", MR_COLUMNS), ("SC", SC_COLUMNS)):
        rows = [r for r in reports if r.task == task]
        if not rows:
            continue
        header = f"{'modality_set':<14}{'n':>6}" + "".join(f"{c:>10}" for c in columns)
        title = "Moment Retrieval" if task == "MR" else "Segment Captioning"
        lines.append(f"== {title} ==")
        for note in rows[0].notes:
            lines.append(f"# {note}")
        lines.append(header)
        for r in rows:
            cells = "".join(f"{r.scores[c]:>10.4f}" for c in columns)
            lines.append(f"{r.modality_set:<14}{r.count:>6}" + cells)
        lines.append("")
    return "\n".join(lines)


def render_csv(reports: list[MetricReport]) -> str:
    """Delimited output: task,modality_set,count,metric,value rows."""
    lines = ["task,modality_set,count,metric,value"]
    for r in reports:
        for metric, value in r.scores.items():
            lines.append(f"{r.task},{r.modality_set},{r.count},{metric},{value:.10f}")
    return "\n".join(lines) + "\n"
