"""Inference under answer-injection conditions, judging, and score aggregation."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .annotation import NEXTQA_QTYPES
from .cotask import COTASK_QUESTIONS, CoTaskBundle, canonical_json, cotask_prompt
from .gateway import ChatRequest, ChatResponse, ImagePart, TextPart
from .prompts import ResponseParseError, clean_free_text, parse_judge_score, parse_response, render, to_plain

logger = logging.getLogger(__name__)

CATEGORY_OF = {
    "CW": "causal",
    "CH": "causal",
    "TP": "temporal",
    "TC": "temporal",
    "TN": "temporal",
    "DC": "descriptive",
    "DL": "descriptive",
    "DO": "descriptive",
}
CATEGORIES = ("causal", "temporal", "descriptive")
STAR_THRESHOLD = 4

JUDGE_RETRY_NOTE = "Your previous reply could not be read. Output only a single integer between 1 and 5."


class NonComparableError(ValueError):
    """Reports cover different question sets and cannot share a table."""


def category_of(qtype: str) -> str | None:
    return CATEGORY_OF.get(qtype)


def scale_score(judge_score: int) -> float:
    """Map a 1-5 mark linearly onto 0-100."""
    return (judge_score - 1) / 4 * 100


@dataclass(frozen=True)
class Condition:
    id: str
    included: tuple[int, ...] = ()
    task: int | None = None  # set for per-CoTask evaluation

    @property
    def included_answers(self) -> frozenset[str]:
        return frozenset(f"A{i}" for i in self.included)


CONDITIONS = {
    "baseline": Condition("baseline"),
    "ct12": Condition("ct12", (1, 2)),
    "ct34": Condition("ct34", (3, 4)),
    "ct14": Condition("ct14", (1, 2, 3, 4)),
}

_PER_COTASK = re.compile(r"per_cotask\((\d)\)|per_cotask_?(\d)|cotask(\d)")


def per_cotask(n: int) -> Condition:
    if n not in (1, 2, 3, 4):
        raise ValueError(f"CoTask index must be 1..4, got {n}")
    return Condition(f"per_cotask({n})", task=n)


def parse_condition(text: str) -> Condition:
    key = text.strip().lower()
    if key in CONDITIONS:
        return CONDITIONS[key]
    m = _PER_COTASK.fullmatch(key)
    if m:
        return per_cotask(int(next(g for g in m.groups() if g)))
    raise ValueError(f"unknown condition {text!r}; expected one of {sorted(CONDITIONS)} or per_cotask(n)")


@dataclass(frozen=True)
class Prediction:
    qid: str
    condition: str
    model_id: str
    text: str | None
    error: str | None = None
    parse_invalid: bool = False
    raw: str | None = None

    def to_dict(self) -> dict:
        return {
            "qid": self.qid,
            "condition": self.condition,
            "model_id": self.model_id,
            "text": self.text,
            "error": self.error,
            "parse_invalid": self.parse_invalid,
            "raw": self.raw,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Prediction":
        return cls(
            d["qid"], d["condition"], d["model_id"], d.get("text"), d.get("error"), bool(d.get("parse_invalid")), d.get("raw")
        )


@dataclass(frozen=True)
class EvalRecord:
    qid: str
    condition: str
    model_id: str
    prediction: str | None
    judge_score: int | None
    qtype: str
    category: str | None
    invalid: str | None = None  # reason the record carries no usable judge score
    parse_invalid: bool = False

    @property
    def scaled(self) -> float | None:
        return None if self.judge_score is None else scale_score(self.judge_score)

    def to_dict(self) -> dict:
        return {
            "qid": self.qid,
            "condition": self.condition,
            "model_id": self.model_id,
            "prediction": self.prediction,
            "judge_score": self.judge_score,
            "qtype": self.qtype,
            "category": self.category,
            "invalid": self.invalid,
            "parse_invalid": self.parse_invalid,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalRecord":
        return cls(
            d["qid"],
            d["condition"],
            d["model_id"],
            d.get("prediction"),
            d.get("judge_score"),
            d["qtype"],
            d.get("category"),
            d.get("invalid"),
            bool(d.get("parse_invalid")),
        )


@dataclass(frozen=True)
class ScoreReport:
    condition: str
    model_id: str
    per_qtype: Mapping[str, float]
    per_category: Mapping[str, float]
    overall: float | None
    counts: Mapping[str, int]
    n_scored: int
    n_invalid: int
    accuracy: float | None = None
    qids: tuple[str, ...] = field(default=(), repr=False)

    def to_dict(self) -> dict:
        return {
            "condition": self.condition,
            "model_id": self.model_id,
            "per_qtype": dict(self.per_qtype),
            "per_category": dict(self.per_category),
            "overall": self.overall,
            "counts": dict(self.counts),
            "n_scored": self.n_scored,
            "n_invalid": self.n_invalid,
            "accuracy": self.accuracy,
            "qids": list(self.qids),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScoreReport":
        return cls(
            d["condition"],
            d["model_id"],
            dict(d["per_qtype"]),
            dict(d["per_category"]),
            d["overall"],
            dict(d["counts"]),
            d["n_scored"],
            d["n_invalid"],
            d.get("accuracy"),
            tuple(d.get("qids", ())),
        )


# ---------------------------------------------------------------------------
# inference


def frame_files(frames_root: str | Path | None, video_id: str, num_frames: int) -> list[str]:
    """``<frames_root>/<video_id>/<t>.jpg`` for every sampled timestamp that exists on disk."""
    if frames_root is None:
        return []
    base = Path(frames_root) / video_id
    return [str(p) for p in (base / f"{t}.jpg" for t in range(1, num_frames + 1)) if p.is_file()]


def final_answer_prompt(bundle: CoTaskBundle, condition: Condition) -> str:
    slots = {"question": bundle.q0}
    for i in condition.included:
        slots[f"a{i}"] = bundle.answer(i)
    return render("final_answer", slots)


def _requests(bundles, prompts, model_id, frames_root, max_tokens, temperature):
    out = []
    for b, prompt in zip(bundles, prompts):
        images = tuple(ImagePart(f) for f in frame_files(frames_root, b.video_id, b.num_frames))
        parts = images + (TextPart(prompt),)
        out.append(ChatRequest(model_id=model_id, user_parts=parts, temperature=temperature, max_tokens=max_tokens))
    return out


def run_condition(
    bundles: Sequence[CoTaskBundle],
    condition: Condition,
    model_id: str,
    gateway,
    *,
    frames_root: str | Path | None = None,
    max_in_flight: int = 8,
    max_tokens: int = 128,
    temperature: float = 0.0,
) -> list[Prediction]:
    """One final-answer prediction per Q0, with only the condition's answers in the prompt."""
    if condition.task is not None:
        return run_per_cotask(
            bundles,
            condition.task,
            model_id,
            gateway,
            frames_root=frames_root,
            max_in_flight=max_in_flight,
            temperature=temperature,
        )
    bundles = list(bundles)
    prompts = [final_answer_prompt(b, condition) for b in bundles]
    results = gateway.run_batch(_requests(bundles, prompts, model_id, frames_root, max_tokens, temperature), max_in_flight)
    out = []
    for b, res in zip(bundles, results):
        if isinstance(res, ChatResponse):
            out.append(Prediction(b.qid, condition.id, model_id, clean_free_text(res.text), raw=res.text))
        else:
            logger.warning("inference failed for %s: %s", b.qid, res)
            out.append(Prediction(b.qid, condition.id, model_id, None, error=f"{type(res).__name__}: {res}"))
    return out


def run_per_cotask(
    bundles: Sequence[CoTaskBundle],
    n: int,
    model_id: str,
    gateway,
    *,
    frames_root: str | Path | None = None,
    max_in_flight: int = 8,
    max_tokens: int = 1024,
    temperature: float = 0.0,
) -> list[Prediction]:
    """Predict A_n from the CoTask-n eval prompt; the typed answer is kept in canonical JSON."""
    condition = per_cotask(n)
    bundles = list(bundles)
    prompts = [cotask_prompt(b, n) for b in bundles]
    results = gateway.run_batch(_requests(bundles, prompts, model_id, frames_root, max_tokens, temperature), max_in_flight)
    template_id = f"cotask{n}_eval"
    out = []
    for b, res in zip(bundles, results):
        if not isinstance(res, ChatResponse):
            out.append(Prediction(b.qid, condition.id, model_id, None, error=f"{type(res).__name__}: {res}"))
            continue
        try:
            value = parse_response(template_id, res.text)
        except ResponseParseError as exc:
            out.append(Prediction(b.qid, condition.id, model_id, None, parse_invalid=True, raw=res.text, error=exc.reason))
            continue
        out.append(Prediction(b.qid, condition.id, model_id, canonical_json(to_plain(value)), raw=res.text))
    return out


# ---------------------------------------------------------------------------
# judging


def reference_for(bundle: CoTaskBundle, condition_id: str) -> tuple[str, str]:
    """The (question, reference answer) pair the judge compares a prediction against."""
    cond = parse_condition(condition_id)
    if cond.task is None:
        return bundle.q0, bundle.a0
    return COTASK_QUESTIONS[cond.task], canonical_json(bundle.answer_obj(cond.task))


def judge(
    predictions: Sequence[Prediction],
    ground_truth: Mapping[str, CoTaskBundle],
    gateway,
    judge_model: str,
    *,
    max_in_flight: int = 8,
    max_tokens: int = 16,
    temperature: float = 0.0,
) -> list[EvalRecord]:
    """Score each prediction 1-5; one retry on an unreadable mark, then the record is invalid.

    Per-CoTask predictions that failed to parse score 1 without calling the judge.
    """
    predictions = list(predictions)
    records: list[EvalRecord | None] = [None] * len(predictions)
    pending = []
    for i, p in enumerate(predictions):
        b = ground_truth[p.qid]
        base = dict(qid=p.qid, condition=p.condition, model_id=p.model_id, qtype=b.qtype, category=category_of(b.qtype))
        if p.parse_invalid:
            records[i] = EvalRecord(prediction=None, judge_score=1, parse_invalid=True, **base)
        elif p.text is None:
            records[i] = EvalRecord(prediction=None, judge_score=None, invalid="inference_failed", **base)
        else:
            question, answer = reference_for(b, p.condition)
            prompt = render("judge", {"question": question, "answer": answer, "prediction": p.text})
            pending.append((i, base, p.text, prompt))

    def ask(items, retry):
        reqs = []
        for _, _, _, prompt in items:
            parts = (TextPart(prompt),) + ((TextPart(JUDGE_RETRY_NOTE),) if retry else ())
            reqs.append(
                ChatRequest(model_id=judge_model, user_parts=parts, temperature=temperature, max_tokens=max_tokens)
            )
        return gateway.run_batch(reqs, max_in_flight)

    again = []
    for item, res in zip(pending, ask(pending, False)):
        i, base, text, _ = item
        if not isinstance(res, ChatResponse):
            records[i] = EvalRecord(prediction=text, judge_score=None, invalid="judge_failed", **base)
            continue
        try:
            records[i] = EvalRecord(prediction=text, judge_score=parse_judge_score(res.text), **base)
        except ValueError:
            again.append(item)
    for item, res in zip(again, ask(again, True) if again else []):
        i, base, text, _ = item
        score, reason = None, "judge_unparseable"
        if not isinstance(res, ChatResponse):
            reason = "judge_failed"
        else:
            try:
                score, reason = parse_judge_score(res.text), None
            except ValueError:
                pass
        records[i] = EvalRecord(prediction=text, judge_score=score, invalid=reason, **base)
    return records


# ---------------------------------------------------------------------------
# aggregation


def _mean(values: Sequence[float]) -> float | None:
    # fsum is exact, so the mean does not depend on record order
    return math.fsum(values) / len(values) if values else None


def aggregate(records: Iterable[EvalRecord], *, star_threshold: int = STAR_THRESHOLD) -> ScoreReport:
    records = list(records)
    conditions = sorted({r.condition for r in records})
    models = sorted({r.model_id for r in records})
    if len(conditions) > 1 or len(models) > 1:
        raise ValueError(f"records mix conditions {conditions} or models {models}")
    scored = [r for r in records if r.judge_score is not None]
    by_qtype: dict[str, list[float]] = {}
    by_cat: dict[str, list[float]] = {}
    for r in scored:
        by_qtype.setdefault(r.qtype, []).append(r.scaled)
        if r.category:
            by_cat.setdefault(r.category, []).append(r.scaled)
    star = [r for r in scored if r.qtype == "STAR"]
    accuracy = 100.0 * sum(r.judge_score >= star_threshold for r in star) / len(star) if star else None
    counts: dict[str, int] = {}
    for r in records:
        counts[r.qtype] = counts.get(r.qtype, 0) + 1
    return ScoreReport(
        condition=conditions[0] if conditions else "",
        model_id=models[0] if models else "",
        per_qtype={k: _mean(v) for k, v in sorted(by_qtype.items())},
        per_category={k: _mean(by_cat[k]) for k in CATEGORIES if k in by_cat},
        overall=_mean([r.scaled for r in scored]),
        counts=dict(sorted(counts.items())),
        n_scored=len(scored),
        n_invalid=len(records) - len(scored),
        accuracy=accuracy,
        qids=tuple(sorted({r.qid for r in records})),
    )


def report(reports: Sequence[ScoreReport]) -> dict:
    """Comparison table: one row per report, qtype columns plus Avg (and Acc for STAR).

    Returns ``{"columns", "rows", "text"}``; the text rendering marks the best
    value of each column in bold.
    """
    reports = list(reports)
    if not reports:
        return {"columns": [], "rows": [], "text": ""}
    first = set(reports[0].qids)
    for r in reports[1:]:
        if set(r.qids) != first:
            raise NonComparableError(f"{r.condition} and {reports[0].condition} cover different questions")
    qtypes = {q for r in reports for q in r.counts}
    columns = list(NEXTQA_QTYPES) if qtypes & set(NEXTQA_QTYPES) else []
    columns.append("Avg")
    if any(r.accuracy is not None for r in reports):
        columns.append("Acc")
    rows = []
    for r in reports:
        values = {q: r.per_qtype.get(q) for q in columns if q in NEXTQA_QTYPES}
        values["Avg"] = r.overall
        if "Acc" in columns:
            values["Acc"] = r.accuracy
        rows.append({"condition": r.condition, "model_id": r.model_id, "values": values, "n_invalid": r.n_invalid})
    return {"columns": columns, "rows": rows, "text": render_table(columns, rows)}


def render_table(columns: Sequence[str], rows: Sequence[Mapping]) -> str:
    best = {}
    for c in columns:
        vals = [round(row["values"][c], 1) for row in rows if row["values"].get(c) is not None]
        best[c] = max(vals) if vals else None

    def cell(row, c):
        v = row["values"].get(c)
        if v is None:
            return "-"
        text = f"{v:.1f}"
        return f"**{text}**" if len(rows) > 1 and round(v, 1) == best[c] else text

    header = ["Condition", *columns]
    body = [[row["condition"], *(cell(row, c) for c in columns)] for row in rows]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = [
        "| " + " | ".join(h.ljust(w) for h, w in zip(header, widths)) + " |",
        "|" + "|".join("-" * (w + 2) for w in widths) + "|",
    ]
    lines += ["| " + " | ".join(v.ljust(w) for v, w in zip(r, widths)) + " |" for r in body]
    return "\n".join(lines) + "\n"
