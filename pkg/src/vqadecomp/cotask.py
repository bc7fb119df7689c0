"""Build A1-A4 for one question and expand bundles into CoTask instances.

Each answer only reads the answers before it: A2 from A1 and the boxes, A3
from A1 and the spatial relations, A4 from A1 and the temporal relations.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .annotation import IntegrityError, PredicateVocabulary, QARecord
from .answers import (
    TIMESTAMP_CAP,
    CoTask1Answer,
    CoTask2Answer,
    FrameRecord,
    RelationAnswer,
    RelationRecord,
    TrackedObject,
    a2_from_obj,
    a2_to_obj,
    check_chain,
    check_cotask1,
    relations_from_obj,
    relations_to_obj,
)
from .gateway import ChatRequest, GatewayError, ImagePart, TextPart
from .prompts import ResponseParseError, parse_response, render
from .timeline import MappedRelation, ReindexedAnnotation

logger = logging.getLogger(__name__)

PROVENANCES = ("star_direct", "llm_grounded", "lexical_fallback")
GROUNDING_MODES = ("star_direct", "llm", "lexical")

COTASK_QUESTIONS = {
    1: "Ground entities and identify frames matching context in the target question.",
    2: "Get object locations (bounding boxes) in frames listed in A1.",
    3: "Infer spatial relations between objects in frames of A1 and A2.",
    4: "Identify actions among entities using spatial and temporal cues from A1–A3.",
}


class ConstructionError(Exception):
    def __init__(self, qid: str, reason: str, code: str = "CONSTRUCTION_FAILED"):
        self.qid = qid
        self.reason = reason
        self.code = code
        super().__init__(f"{qid}: {reason}")


@dataclass(frozen=True)
class CoTaskBundle:
    qid: str
    video_id: str
    qtype: str
    source: str
    q0: str
    a0: str
    a1: CoTask1Answer
    a2: CoTask2Answer
    a3: RelationAnswer
    a4: RelationAnswer
    provenance: str
    num_frames: int
    q1: str = COTASK_QUESTIONS[1]
    q2: str = COTASK_QUESTIONS[2]
    q3: str = COTASK_QUESTIONS[3]
    q4: str = COTASK_QUESTIONS[4]

    def answer(self, n: int):
        return (self.a1, self.a2, self.a3, self.a4)[n - 1]

    def answer_obj(self, n: int):
        if n == 1:
            return self.a1.to_obj()
        if n == 2:
            return a2_to_obj(self.a2)
        return relations_to_obj(self.answer(n))

    def to_dict(self) -> dict:
        return {
            "qid": self.qid,
            "video_id": self.video_id,
            "qtype": self.qtype,
            "source": self.source,
            "num_frames": self.num_frames,
            "provenance": self.provenance,
            "q0": self.q0,
            "a0": self.a0,
            "q1": self.q1,
            "q2": self.q2,
            "q3": self.q3,
            "q4": self.q4,
            "a1": self.a1.to_obj(),
            "a2": a2_to_obj(self.a2),
            "a3": relations_to_obj(self.a3),
            "a4": relations_to_obj(self.a4),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CoTaskBundle":
        return cls(
            qid=str(d["qid"]),
            video_id=str(d["video_id"]),
            qtype=d["qtype"],
            source=d["source"],
            q0=d["q0"],
            a0=d["a0"],
            a1=CoTask1Answer.from_obj(d["a1"]),
            a2=a2_from_obj(d["a2"]),
            a3=relations_from_obj(d["a3"]),
            a4=relations_from_obj(d["a4"]),
            provenance=d["provenance"],
            num_frames=int(d["num_frames"]),
            q1=d.get("q1", COTASK_QUESTIONS[1]),
            q2=d.get("q2", COTASK_QUESTIONS[2]),
            q3=d.get("q3", COTASK_QUESTIONS[3]),
            q4=d.get("q4", COTASK_QUESTIONS[4]),
        )


# ---------------------------------------------------------------------------
# Q0 reformulation


def reformulate_mc(record: QARecord) -> QARecord:
    """Drop the multiple-choice options, keeping the correct choice's text as the answer."""
    if record.mc_options is None:
        return record
    options = record.mc_options
    if record.answer_index is not None:
        if not 0 <= record.answer_index < len(options):
            raise IntegrityError(
                f"{record.qid}: correct index {record.answer_index} outside {len(options)} options"
            )
        answer = options[record.answer_index]
        if record.answer and record.answer != answer:
            raise IntegrityError(f"{record.qid}: answer text disagrees with option {record.answer_index}")
    elif record.answer in options:
        answer = record.answer
    else:
        raise IntegrityError(f"{record.qid}: answer {record.answer!r} is not among the options")
    return replace(record, answer=answer, mc_options=None, answer_index=None)


# ---------------------------------------------------------------------------
# A1


def cap_timestamps(timestamps: Sequence[int], cap: int = TIMESTAMP_CAP) -> list[int]:
    """Keep at most ``cap`` timestamps, picking indices floor(j * m / cap)."""
    ts = list(timestamps)
    m = len(ts)
    if m <= cap:
        return ts
    return [ts[j * m // cap] for j in range(cap)]


def build_cotask1_star(record: QARecord, reindexed: ReindexedAnnotation, cap: int = TIMESTAMP_CAP) -> CoTask1Answer:
    by_tid = {e.tid: e.label for e in reindexed.catalog}
    entities = [by_tid[tid] for tid in sorted(set(record.situation_tids)) if tid in by_tid]
    if not entities:
        raise ConstructionError(record.qid, "situation graph references no catalog entity", "NO_ENTITIES")
    keyframes = set(record.keyframes)
    sm = reindexed.sample_map
    timestamps = [t for t in sm.timestamps if sm.orig_of[t - 1] in keyframes]
    if not timestamps:
        raise ConstructionError(record.qid, "no situation keyframe lies on the sampled timeline", "NO_TIMESTAMPS")
    return CoTask1Answer(tuple(entities), tuple(cap_timestamps(timestamps, cap)))


@lru_cache(maxsize=None)
def default_synonyms() -> Mapping[str, tuple[str, ...]]:
    data = json.loads(resources.files("vqadecomp.data").joinpath("synonyms.json").read_text("utf-8"))
    return {k: tuple(v) for k, v in data.items()}


def load_synonyms(path: str | Path) -> Mapping[str, tuple[str, ...]]:
    data = json.loads(Path(path).read_text("utf-8"))
    return {k: tuple(v) for k, v in data.items()}


def _surface_forms(category: str, synonyms: Mapping[str, Sequence[str]]) -> set[str]:
    base = category.replace("_", " ")
    forms = {base, base + "s", base + "es"}
    if base.endswith("s"):
        forms.add(base[:-1])
    if base.endswith("y"):
        forms.add(base[:-1] + "ies")
    forms.update(s.lower() for s in synonyms.get(category, ()))
    return {f for f in forms if f}


@lru_cache(maxsize=4096)
def _category_pattern(category: str, extra: tuple[str, ...]) -> re.Pattern:
    forms = sorted(_surface_forms(category, {category: extra}), key=len, reverse=True)
    return re.compile(r"\b(?:" + "|".join(re.escape(f) for f in forms) + r")\b")


def match_entities(question: str, reindexed: ReindexedAnnotation, synonyms=None) -> list[str]:
    """Catalog labels whose category (or a synonym) occurs as a whole word in the question."""
    synonyms = default_synonyms() if synonyms is None else synonyms
    text = question.lower()
    out = []
    for e in reindexed.catalog:
        if _category_pattern(e.category, tuple(synonyms.get(e.category, ()))).search(text):
            out.append(e.label)
    return out


def build_cotask1_lexical(
    record: QARecord,
    reindexed: ReindexedAnnotation,
    synonyms: Mapping[str, Sequence[str]] | None = None,
    cap: int = TIMESTAMP_CAP,
) -> CoTask1Answer:
    """Offline grounding by word matching and box co-occurrence."""
    entities = match_entities(record.question, reindexed, synonyms)
    if not entities:
        raise ConstructionError(record.qid, "question mentions no catalog category", "NO_ENTITIES")
    tids = [reindexed.tid_of(label) for label in entities]
    boxes = reindexed.boxes
    timestamps = [t for t in reindexed.sample_map.timestamps if all((tid, t) in boxes for tid in tids)]
    if not timestamps:
        timestamps = [t for t in reindexed.sample_map.timestamps if any((tid, t) in boxes for tid in tids)]
    if not timestamps:
        raise ConstructionError(record.qid, "matched entities never appear on the timeline", "NO_TIMESTAMPS")
    return CoTask1Answer(tuple(entities), tuple(cap_timestamps(timestamps, cap)))


def _tidy_a1(a1: CoTask1Answer, labels: Sequence[str]) -> CoTask1Answer:
    """Canonical order: entities by catalog position, timestamps ascending without repeats."""
    order = {label: i for i, label in enumerate(labels)}
    entities = sorted(dict.fromkeys(a1.entities), key=lambda e: (order.get(e, len(order)), e))
    return CoTask1Answer(tuple(entities), tuple(sorted(set(a1.timestamps))))


def build_cotask1_llm(
    record: QARecord,
    frame_files: Sequence[str],
    reindexed: ReindexedAnnotation,
    gateway,
    model_id: str,
    *,
    cap: int = TIMESTAMP_CAP,
    synonyms=None,
    max_tokens: int = 256,
    temperature: float = 0.0,
) -> tuple[CoTask1Answer, str]:
    """Ground Q0 with a VideoLLM; returns ``(A1, provenance)``.

    One corrective retry follows an unusable reply.  If the retry still breaks
    an A1 invariant the lexical grounding is used instead; an unparseable retry
    or a gateway failure raises :class:`ConstructionError`.
    """
    labels = reindexed.labels
    k = reindexed.num_frames
    prompt = render(
        "cotask1_gen",
        {"question": record.question, "entities": repr(list(labels)), "num_frames": str(k)},
    )
    images = tuple(ImagePart(str(f)) for f in frame_files)
    parts = images + (TextPart(prompt),)
    last_problem = None
    for attempt in range(2):
        if attempt:
            parts = parts + (
                TextPart(
                    f"Your previous answer was rejected ({last_problem}). Return only one JSON object "
                    f'with "entities" chosen from the ground-truth entities and 1 to {cap} increasing '
                    f'"timestamps" between 1 and {k}.'
                ),
            )
        try:
            reply = gateway.chat(
                ChatRequest(model_id=model_id, user_parts=parts, temperature=temperature, max_tokens=max_tokens)
            )
        except GatewayError as exc:
            raise ConstructionError(record.qid, f"grounding request failed: {exc}", "GATEWAY_FAILED") from exc
        try:
            a1 = _tidy_a1(parse_response("cotask1_gen", reply.text), labels)
        except ResponseParseError as exc:
            if attempt:
                raise ConstructionError(record.qid, f"unparseable grounding reply: {exc.reason}", "UNPARSEABLE") from exc
            last_problem = exc.reason
            continue
        problems = check_cotask1(a1, k, labels, cap)
        if not problems:
            return a1, "llm_grounded"
        last_problem = "; ".join(p.message for p in problems)
        if attempt:
            logger.info("grounding for %s still invalid (%s); using lexical fallback", record.qid, last_problem)
            return build_cotask1_lexical(record, reindexed, synonyms, cap), "lexical_fallback"
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# A2-A4


def build_cotask2(a1: CoTask1Answer, reindexed: ReindexedAnnotation) -> CoTask2Answer:
    tids = [(label, reindexed.tid_of(label)) for label in a1.entities]
    out = []
    for t in sorted(a1.timestamps):
        objects = tuple(
            TrackedObject(label, reindexed.boxes[(tid, t)]) for label, tid in tids if (tid, t) in reindexed.boxes
        )
        out.append(FrameRecord(t, objects))
    return tuple(out)


def _select_relations(a1: CoTask1Answer, relations: Iterable[MappedRelation]) -> RelationAnswer:
    entities = set(a1.entities)
    ts = sorted(a1.timestamps)
    out = []
    for r in relations:
        if r.head_label not in entities or r.tail_label not in entities:
            continue
        if not any(r.start_frame <= t <= r.end_frame for t in ts):
            continue
        out.append(RelationRecord(r.head_label, r.predicate, r.tail_label, r.start_frame, r.end_frame))
    return tuple(sorted(out, key=RelationRecord.sort_key))


def build_cotask3(a1: CoTask1Answer, reindexed: ReindexedAnnotation) -> RelationAnswer:
    """Spatial relations between A1 entities whose span touches an A1 timestamp."""
    return _select_relations(a1, reindexed.spatial_relations)


def build_cotask4(
    a1: CoTask1Answer, a2: CoTask2Answer, a3: RelationAnswer, reindexed: ReindexedAnnotation
) -> RelationAnswer:
    # a2 and a3 are chain inputs of the task; the ground truth only depends on A1
    return _select_relations(a1, reindexed.temporal_relations)


def assemble(
    record: QARecord,
    a1: CoTask1Answer,
    a2: CoTask2Answer,
    a3: RelationAnswer,
    a4: RelationAnswer,
    *,
    reindexed: ReindexedAnnotation,
    provenance: str,
    vocab: PredicateVocabulary | None = None,
    cap: int = TIMESTAMP_CAP,
) -> CoTaskBundle:
    if provenance not in PROVENANCES:
        raise ValueError(f"unknown provenance {provenance!r}")
    problems = check_chain(
        a1,
        a2,
        a3,
        a4,
        reindexed.num_frames,
        labels=reindexed.labels,
        spatial=vocab.spatial if vocab else None,
        temporal=vocab.temporal if vocab else None,
        cap=cap,
    )
    if problems:
        raise ConstructionError(record.qid, "; ".join(f"{p.code}: {p.message}" for p in problems), problems[0].code)
    return CoTaskBundle(
        qid=record.qid,
        video_id=record.video_id,
        qtype=record.qtype,
        source=record.source,
        q0=record.question,
        a0=record.answer,
        a1=a1,
        a2=a2,
        a3=a3,
        a4=a4,
        provenance=provenance,
        num_frames=reindexed.num_frames,
    )


def construct_bundle(
    record: QARecord,
    reindexed: ReindexedAnnotation,
    *,
    mode: str = "lexical",
    vocab: PredicateVocabulary | None = None,
    synonyms=None,
    cap: int = TIMESTAMP_CAP,
    gateway=None,
    model_id: str | None = None,
    frame_files: Sequence[str] = (),
    temperature: float = 0.0,
) -> CoTaskBundle:
    """Run the whole A1 -> A4 chain for one question."""
    if mode not in GROUNDING_MODES:
        raise ValueError(f"unknown grounding mode {mode!r}")
    try:
        record = reformulate_mc(record)
    except IntegrityError as exc:
        raise ConstructionError(record.qid, str(exc), "ANSWER_INVALID") from exc
    if mode == "star_direct":
        if record.source != "star":
            raise ConstructionError(record.qid, "star_direct grounding needs a STAR record", "MODE_MISMATCH")
        a1, provenance = build_cotask1_star(record, reindexed, cap), "star_direct"
    elif mode == "llm":
        if gateway is None or model_id is None:
            raise ValueError("llm grounding needs a gateway and a model id")
        a1, provenance = build_cotask1_llm(
            record, frame_files, reindexed, gateway, model_id, cap=cap, synonyms=synonyms, temperature=temperature
        )
    else:
        a1, provenance = build_cotask1_lexical(record, reindexed, synonyms, cap), "lexical_fallback"
    a2 = build_cotask2(a1, reindexed)
    a3 = build_cotask3(a1, reindexed)
    a4 = build_cotask4(a1, a2, a3, reindexed)
    return assemble(record, a1, a2, a3, a4, reindexed=reindexed, provenance=provenance, vocab=vocab, cap=cap)


# ---------------------------------------------------------------------------
# expansion


def cotask_prompt(bundle: CoTaskBundle, n: int) -> str:
    """The CoTask-n question text, carrying Q0 and the ground-truth answers it builds on."""
    slots = {"question": bundle.q0}
    if n >= 2:
        slots.update(a1=bundle.a1, entities=list(bundle.a1.entities), frames=list(bundle.a1.timestamps))
    if n >= 3:
        slots["a2"] = bundle.a2
    if n >= 4:
        slots["a3"] = bundle.a3
    if n == 1:
        slots["num_frames"] = str(bundle.num_frames)
    return render(f"cotask{n}_eval", slots)


def canonical_json(value) -> str:
    return json.dumps(value, ensure_ascii=False, separators=(",", ":"), sort_keys=False)


def instances(bundle: CoTaskBundle) -> list[dict]:
    return [
        {
            "qid": bundle.qid,
            "task_index": n,
            "question_text": cotask_prompt(bundle, n),
            "answer_json": canonical_json(bundle.answer_obj(n)),
            "video_id": bundle.video_id,
            "provenance": bundle.provenance,
        }
        for n in (1, 2, 3, 4)
    ]


def expand(bundles: Iterable[CoTaskBundle]) -> tuple[list[dict], dict]:
    """Four CoTask instances per bundle, plus counts."""
    out = []
    videos = set()
    n_q0 = 0
    for b in bundles:
        out.extend(instances(b))
        videos.add(b.video_id)
        n_q0 += 1
    return out, {"q0": n_q0, "instances": len(out), "videos": len(videos)}
