"""Normalized object-centric annotation schema and the VidOR / STAR adapters.

Both source datasets are converted into :class:`NormalizedAnnotation`, one per
video.  Relation spans use the half-open convention ``[begin_fid, end_fid)``.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Any, Iterable, Mapping

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

NEXTQA_QTYPES = ("CW", "CH", "TP", "TC", "TN", "DC", "DL", "DO")
QTYPES = NEXTQA_QTYPES + ("STAR",)
SOURCES = ("nextqa", "star")
KINDS = ("spatial", "temporal")

LABEL_RE = re.compile(r"[0-9]+_[a-z_]+")
_CATEGORY_RE = re.compile(r"[a-z_]+")
_STAR_CLASS_ID = re.compile(r"^[or]\d+$")


class AnnotationError(Exception):
    """Base class for annotation problems; carries the file path and location."""

    def __init__(self, message: str, path: str | Path | None = None, location: str | None = None):
        self.path = str(path) if path is not None else None
        self.location = location
        self.reason = message
        prefix = ":".join(p for p in (self.path, location) if p)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class ParseError(AnnotationError):
    """The document is not well-formed for its declared format."""


class IntegrityError(AnnotationError):
    """The document is well-formed but violates a cross-reference or range invariant."""


class UnknownPredicateError(IntegrityError):
    def __init__(self, predicate: str, path=None, location=None):
        self.predicate = predicate
        super().__init__(f"unknown predicate {predicate!r}", path, location)


def normalize_token(text: str) -> str:
    """Lowercase and collapse every non-alphanumeric run into one underscore."""
    return re.sub(r"[^a-z0-9]+", "_", str(text).lower()).strip("_")


def normalize_category(text: str) -> str:
    # labels must match [0-9]+_[a-z_]+, so digits are dropped from categories
    return re.sub(r"[^a-z]+", "_", str(text).lower()).strip("_")


def parse_label(label: str) -> tuple[int, str]:
    if not LABEL_RE.fullmatch(label):
        raise ValueError(f"malformed entity label {label!r}")
    tid, category = label.split("_", 1)
    return int(tid), category


@dataclass(frozen=True)
class EntityRef:
    tid: int
    category: str

    @property
    def label(self) -> str:
        return f"{self.tid}_{self.category}"


@dataclass(frozen=True)
class BBox:
    x1: int
    y1: int
    x2: int
    y2: int

    @classmethod
    def from_any(cls, value: Any) -> "BBox":
        """Build from ``[x1, y1, x2, y2]`` or a VidOR ``{xmin, ymin, xmax, ymax}`` dict."""
        if isinstance(value, Mapping):
            coords = [value["xmin"], value["ymin"], value["xmax"], value["ymax"]]
        else:
            coords = list(value)
            if len(coords) != 4:
                raise ValueError(f"bbox needs 4 coordinates, got {len(coords)}")
        return cls(*(int(round(float(c))) for c in coords))

    def to_list(self) -> list[int]:
        return [self.x1, self.y1, self.x2, self.y2]

    def problems(self, width: int | None = None, height: int | None = None) -> list[str]:
        codes = []
        if self.x1 >= self.x2 or self.y1 >= self.y2:
            codes.append("BBOX_DEGENERATE")
        if min(self.x1, self.y1, self.x2, self.y2) < 0:
            codes.append("BBOX_NEGATIVE")
        if (width is not None and self.x2 > width) or (height is not None and self.y2 > height):
            codes.append("BBOX_OUT_OF_BOUNDS")
        return codes


@dataclass(frozen=True)
class RelationInstance:
    head_tid: int
    tail_tid: int
    predicate: str
    begin_fid: int
    end_fid: int
    kind: str

    def sort_key(self):
        return (self.begin_fid, self.end_fid, self.head_tid, self.predicate, self.tail_tid)


@dataclass(frozen=True)
class NormalizedAnnotation:
    video_id: str
    frame_count: int
    catalog: tuple[EntityRef, ...]
    trajectories: Mapping[tuple[int, int], BBox]
    relations: tuple[RelationInstance, ...] = ()
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "catalog", tuple(sorted(self.catalog, key=lambda e: e.tid)))
        object.__setattr__(
            self, "trajectories", MappingProxyType(dict(sorted(self.trajectories.items())))
        )
        object.__setattr__(self, "relations", tuple(sorted(self.relations, key=RelationInstance.sort_key)))

    def label_of(self, tid: int) -> str:
        for entity in self.catalog:
            if entity.tid == tid:
                return entity.label
        raise KeyError(tid)

    @property
    def labels(self) -> list[str]:
        return [e.label for e in self.catalog]


@dataclass(frozen=True)
class QARecord:
    """One source question (Q0).

    ``keyframes`` and ``situation_tids`` are only filled for STAR, where the
    question's situation graph pins down the grounded frames and entities.
    """

    qid: str
    video_id: str
    question: str
    answer: str
    qtype: str
    source: str
    mc_options: tuple[str, ...] | None = None
    answer_index: int | None = None
    keyframes: tuple[int, ...] = ()
    situation_tids: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {
            "qid": self.qid,
            "video_id": self.video_id,
            "question": self.question,
            "answer": self.answer,
            "qtype": self.qtype,
            "source": self.source,
            "mc_options": list(self.mc_options) if self.mc_options is not None else None,
            "answer_index": self.answer_index,
            "keyframes": list(self.keyframes),
            "situation_tids": list(self.situation_tids),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "QARecord":
        options = d.get("mc_options")
        return cls(
            qid=str(d["qid"]),
            video_id=str(d["video_id"]),
            question=d["question"],
            answer=d["answer"],
            qtype=d["qtype"],
            source=d["source"],
            mc_options=tuple(options) if options is not None else None,
            answer_index=d.get("answer_index"),
            keyframes=tuple(d.get("keyframes", ())),
            situation_tids=tuple(d.get("situation_tids", ())),
        )


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    where: str = ""

    def to_dict(self) -> dict:
        return {"code": self.code, "message": self.message, "where": self.where}


class PredicateVocabulary:
    """Maps normalized predicates to ``spatial`` or ``temporal``."""

    def __init__(self, spatial: Iterable[str], temporal: Iterable[str]):
        self.spatial = frozenset(normalize_token(p) for p in spatial)
        self.temporal = frozenset(normalize_token(p) for p in temporal)
        both = self.spatial & self.temporal
        if both:
            raise ValueError(f"predicates listed as both spatial and temporal: {sorted(both)}")

    @classmethod
    def default(cls) -> "PredicateVocabulary":
        text = resources.files("vqadecomp.data").joinpath("predicates.json").read_text("utf-8")
        data = json.loads(text)
        return cls(data["spatial"], data["temporal"])

    @classmethod
    def from_file(cls, path: str | Path) -> "PredicateVocabulary":
        data = json.loads(Path(path).read_text("utf-8"))
        return cls(data["spatial"], data["temporal"])

    def kind_of(self, predicate: str) -> str | None:
        if predicate in self.spatial:
            return "spatial"
        if predicate in self.temporal:
            return "temporal"
        return None

    def to_dict(self) -> dict:
        return {"spatial": sorted(self.spatial), "temporal": sorted(self.temporal)}


def validate(annotation: NormalizedAnnotation, vocab: PredicateVocabulary | None = None) -> list[Violation]:
    """List every invariant violation; an empty list means the annotation is valid."""
    out: list[Violation] = []
    a = annotation
    if not isinstance(a.frame_count, int) or a.frame_count < 1:
        out.append(Violation("FRAME_COUNT_INVALID", f"frame_count={a.frame_count!r}"))
    for dim in ("width", "height"):
        value = getattr(a, dim)
        if value is not None and value < 1:
            out.append(Violation("DIMENSION_INVALID", f"{dim}={value!r}"))

    tids = set()
    for e in a.catalog:
        where = f"catalog[{e.tid}]"
        if e.tid in tids:
            out.append(Violation("CATALOG_DUPLICATE_TID", f"tid {e.tid} declared twice", where))
        tids.add(e.tid)
        if e.tid < 0 or not _CATEGORY_RE.fullmatch(e.category or ""):
            out.append(Violation("LABEL_MALFORMED", f"label {e.label!r}", where))

    for (tid, fid), box in a.trajectories.items():
        where = f"trajectories[{tid},{fid}]"
        if tid not in tids:
            out.append(Violation("TRAJ_UNKNOWN_TID", f"tid {tid} not in catalog", where))
        if not 0 <= fid < a.frame_count:
            out.append(Violation("FID_OUT_OF_RANGE", f"fid {fid} outside [0, {a.frame_count})", where))
        for code in box.problems(a.width, a.height):
            out.append(Violation(code, f"bbox {box.to_list()}", where))

    for i, r in enumerate(a.relations):
        where = f"relations[{i}]"
        for tid in (r.head_tid, r.tail_tid):
            if tid not in tids:
                out.append(Violation("REL_UNKNOWN_TID", f"tid {tid} not in catalog", where))
        if r.head_tid == r.tail_tid:
            out.append(Violation("REL_SELF_LOOP", f"head and tail are both {r.head_tid}", where))
        if not r.predicate:
            out.append(Violation("PREDICATE_EMPTY", "empty predicate", where))
        if r.begin_fid >= r.end_fid:
            out.append(Violation("SPAN_EMPTY", f"span [{r.begin_fid}, {r.end_fid}) is empty", where))
        if r.begin_fid < 0 or r.end_fid > a.frame_count:
            out.append(
                Violation("SPAN_OUT_OF_RANGE", f"span [{r.begin_fid}, {r.end_fid}) vs {a.frame_count}", where)
            )
        if r.kind not in KINDS:
            out.append(Violation("KIND_INVALID", f"kind {r.kind!r}", where))
        elif vocab is not None and r.predicate and vocab.kind_of(r.predicate) != r.kind:
            out.append(Violation("KIND_MISMATCH", f"{r.predicate!r} is not {r.kind}", where))
    return out


def validate_qa(record: QARecord) -> list[Violation]:
    out = []
    if record.source not in SOURCES:
        out.append(Violation("SOURCE_INVALID", f"source {record.source!r}", record.qid))
    elif record.source == "nextqa" and record.qtype not in NEXTQA_QTYPES:
        out.append(Violation("QTYPE_INVALID", f"qtype {record.qtype!r}", record.qid))
    elif record.source == "star" and record.qtype != "STAR":
        out.append(Violation("QTYPE_INVALID", f"qtype {record.qtype!r}", record.qid))
    if not str(record.answer).strip():
        out.append(Violation("ANSWER_EMPTY", "answer is empty", record.qid))
    if record.mc_options is not None and record.answer not in record.mc_options:
        out.append(Violation("ANSWER_NOT_IN_OPTIONS", f"answer {record.answer!r}", record.qid))
    return out


# ---------------------------------------------------------------------------
# source adapters


class _Sink:
    """Raises in strict mode, records the problem in lenient mode."""

    def __init__(self, path, strict: bool, quarantine: list | None):
        self.path = str(path)
        self.strict = strict
        self.quarantine = quarantine if quarantine is not None else []

    def problem(self, code: str, message: str, location: str, exc_type=IntegrityError, **kw):
        if self.strict:
            if exc_type is UnknownPredicateError:
                raise UnknownPredicateError(kw["predicate"], self.path, location)
            raise exc_type(f"{code}: {message}", self.path, location)
        self.quarantine.append({"path": self.path, "location": location, "code": code, "message": message})
        logger.debug("quarantined %s at %s:%s (%s)", code, self.path, location, message)


def _load_json(path: str | Path) -> Any:
    try:
        text = Path(path).read_text("utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read file: {exc}", path) from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path, f"line {exc.lineno} column {exc.colno}") from exc


def _require(doc: Mapping, key: str, path, location: str = ""):
    if not isinstance(doc, Mapping) or key not in doc:
        raise ParseError(f"missing required field {key!r}", path, location or key)
    return doc[key]


def _as_int(value, path, location) -> int:
    if isinstance(value, bool):
        raise ParseError(f"expected integer, got {value!r}", path, location)
    try:
        as_float = float(value)
    except (TypeError, ValueError):
        raise ParseError(f"expected integer, got {value!r}", path, location) from None
    if as_float != int(as_float):
        raise ParseError(f"expected integer, got {value!r}", path, location)
    return int(as_float)


def _optional_int(doc: Mapping, key: str, path):
    value = doc.get(key)
    return None if value is None else _as_int(value, path, key)


def parse_vidor(
    path: str | Path,
    *,
    vocab: PredicateVocabulary | None = None,
    strict: bool = False,
    quarantine: list | None = None,
) -> NormalizedAnnotation:
    """Parse one VidOR-style video annotation document.

    Structural problems (malformed JSON, missing fields, duplicate tids, more
    trajectory frames than ``frame_count``) always raise.  Per-entry problems
    raise in strict mode and are appended to ``quarantine`` otherwise.
    """
    vocab = vocab or PredicateVocabulary.default()
    sink = _Sink(path, strict, quarantine)
    doc = _load_json(path)
    if not isinstance(doc, Mapping):
        raise ParseError("top-level value must be an object", path, "$")

    video_id = str(_require(doc, "video_id", path))
    frame_count = _as_int(_require(doc, "frame_count", path), path, "frame_count")
    if frame_count < 1:
        raise IntegrityError(f"frame_count must be positive, got {frame_count}", path, "frame_count")
    width = _optional_int(doc, "width", path)
    height = _optional_int(doc, "height", path)

    catalog: dict[int, EntityRef] = {}
    objects = _require(doc, "subject/objects", path)
    if not isinstance(objects, list):
        raise ParseError("'subject/objects' must be a list", path, "subject/objects")
    for i, obj in enumerate(objects):
        loc = f"subject/objects[{i}]"
        tid = _as_int(_require(obj, "tid", path, loc), path, loc + ".tid")
        category = normalize_category(_require(obj, "category", path, loc))
        if tid in catalog:
            raise IntegrityError(f"tid {tid} declared twice", path, loc)
        if tid < 0 or not category:
            raise IntegrityError(f"invalid entity tid={tid} category={obj.get('category')!r}", path, loc)
        catalog[tid] = EntityRef(tid, category)

    trajectories: dict[tuple[int, int], BBox] = {}
    frames = _require(doc, "trajectories", path)
    if not isinstance(frames, list):
        raise ParseError("'trajectories' must be a list of per-frame lists", path, "trajectories")
    if len(frames) > frame_count:
        raise IntegrityError(
            f"trajectory frame {frame_count} is outside [0, {frame_count})", path, f"trajectories[{frame_count}]"
        )
    for fid, frame in enumerate(frames):
        if not isinstance(frame, list):
            raise ParseError("frame entry must be a list", path, f"trajectories[{fid}]")
        for j, entry in enumerate(frame):
            loc = f"trajectories[{fid}][{j}]"
            tid = _as_int(_require(entry, "tid", path, loc), path, loc + ".tid")
            try:
                box = BBox.from_any(_require(entry, "bbox", path, loc))
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad bbox: {exc}", path, loc + ".bbox") from exc
            if tid not in catalog:
                sink.problem("TRAJ_UNKNOWN_TID", f"tid {tid} referenced but not declared", loc)
                continue
            codes = box.problems(width, height)
            if codes:
                sink.problem(codes[0], f"bbox {box.to_list()}", loc)
                continue
            if (tid, fid) in trajectories:
                sink.problem("TRAJ_DUPLICATE", f"tid {tid} has two boxes at frame {fid}", loc)
                continue
            trajectories[(tid, fid)] = box

    relations = []
    for i, rel in enumerate(doc.get("relation_instances") or []):
        loc = f"relation_instances[{i}]"
        head = _as_int(_require(rel, "subject_tid", path, loc), path, loc + ".subject_tid")
        tail = _as_int(_require(rel, "object_tid", path, loc), path, loc + ".object_tid")
        predicate = normalize_token(_require(rel, "predicate", path, loc))
        begin = _as_int(_require(rel, "begin_fid", path, loc), path, loc + ".begin_fid")
        end = _as_int(_require(rel, "end_fid", path, loc), path, loc + ".end_fid")
        candidate = _checked_relation(sink, vocab, catalog, frame_count, head, tail, predicate, begin, end, loc)
        if candidate is not None:
            relations.append(candidate)

    return NormalizedAnnotation(
        video_id=video_id,
        frame_count=frame_count,
        catalog=tuple(catalog.values()),
        trajectories=trajectories,
        relations=tuple(relations),
        width=width,
        height=height,
    )


def _checked_relation(sink, vocab, catalog, frame_count, head, tail, predicate, begin, end, loc):
    for tid in (head, tail):
        if tid not in catalog:
            sink.problem("REL_UNKNOWN_TID", f"tid {tid} referenced but not declared", loc)
            return None
    if head == tail:
        sink.problem("REL_SELF_LOOP", f"head and tail are both {head}", loc)
        return None
    if not predicate:
        sink.problem("PREDICATE_EMPTY", "empty predicate", loc)
        return None
    kind = vocab.kind_of(predicate)
    if kind is None:
        sink.problem("PREDICATE_UNKNOWN", f"unknown predicate {predicate!r}", loc, UnknownPredicateError, predicate=predicate)
        return None
    if begin >= end:
        sink.problem("SPAN_EMPTY", f"span [{begin}, {end}) is empty", loc)
        return None
    if begin < 0 or end > frame_count:
        sink.problem("SPAN_OUT_OF_RANGE", f"span [{begin}, {end}) outside [0, {frame_count}]", loc)
        return None
    return RelationInstance(head, tail, predicate, begin, end, kind)


def parse_star(
    path: str | Path,
    *,
    vocab: PredicateVocabulary | None = None,
    strict: bool = False,
    quarantine: list | None = None,
    object_classes: Mapping[str, str] | None = None,
    relationship_classes: Mapping[str, str] | None = None,
) -> tuple[NormalizedAnnotation, list[QARecord]]:
    """Parse a STAR-style export holding the questions of a single video.

    The document is either a list of STAR question rows or an object with a
    ``questions`` list plus optional ``video_id``, ``frame_count``, ``width``,
    ``height``, ``object_classes`` and ``relationship_classes``.
    """
    results = load_star_corpus(
        path,
        vocab=vocab,
        strict=strict,
        quarantine=quarantine,
        object_classes=object_classes,
        relationship_classes=relationship_classes,
    )
    if len(results) != 1:
        raise ParseError(f"expected questions for one video, found {len(results)}", path, "$")
    return results[0]


def load_star_corpus(
    path: str | Path,
    *,
    vocab: PredicateVocabulary | None = None,
    strict: bool = False,
    quarantine: list | None = None,
    object_classes: Mapping[str, str] | None = None,
    relationship_classes: Mapping[str, str] | None = None,
) -> list[tuple[NormalizedAnnotation, list[QARecord]]]:
    """Parse a STAR export that may span many videos, grouping rows by ``video_id``."""
    vocab = vocab or PredicateVocabulary.default()
    sink = _Sink(path, strict, quarantine)
    doc = _load_json(path)
    meta: Mapping = {}
    if isinstance(doc, Mapping):
        meta = doc
        rows = _require(doc, "questions", path)
    else:
        rows = doc
    if not isinstance(rows, list):
        raise ParseError("questions must be a list", path, "questions")
    obj_names = {**(meta.get("object_classes") or {}), **(object_classes or {})}
    rel_names = {**(meta.get("relationship_classes") or {}), **(relationship_classes or {})}

    grouped: dict[str, list[tuple[int, Mapping]]] = {}
    for i, row in enumerate(rows):
        vid = row.get("video_id", meta.get("video_id")) if isinstance(row, Mapping) else None
        if vid is None:
            raise ParseError("missing required field 'video_id'", path, f"questions[{i}]")
        grouped.setdefault(str(vid), []).append((i, row))

    if meta.get("frame_count") is not None and len(grouped) > 1:
        raise ParseError("document-level frame_count given for several videos", path, "frame_count")
    return [
        _star_video(sink, vocab, vid, group, meta, obj_names, rel_names) for vid, group in grouped.items()
    ]


def _star_video(sink, vocab, video_id, rows, meta, obj_names, rel_names):
    path = sink.path

    def name_of(class_id: str, table: Mapping[str, str], what: str, loc: str) -> str:
        if class_id in table:
            return table[class_id]
        if _STAR_CLASS_ID.match(class_id):
            raise ParseError(f"unmapped {what} class id {class_id!r}", path, loc)
        return class_id

    # first pass: collect keyframes, classes and per-row situation content
    parsed_rows = []
    class_ids: set[str] = set()
    for i, row in rows:
        loc = f"questions[{i}]"
        situations = _require(row, "situations", path, loc)
        if not isinstance(situations, Mapping):
            raise ParseError("situations must be an object keyed by frame id", path, loc + ".situations")
        frames = {}
        for key, sit in situations.items():
            sloc = f"{loc}.situations[{key}]"
            fid = _as_int(key, path, sloc)
            labels = list(sit.get("bbox_labels") or [])
            boxes = list(sit.get("bbox") or [])
            if len(labels) != len(boxes):
                raise ParseError("bbox_labels and bbox lengths differ", path, sloc)
            pairs = list(sit.get("rel_pairs") or [])
            rels = list(sit.get("rel_labels") or [])
            if len(pairs) != len(rels):
                raise ParseError("rel_pairs and rel_labels lengths differ", path, sloc)
            class_ids.update(labels)
            for pair in pairs:
                if len(pair) != 2:
                    raise ParseError(f"rel_pair {pair!r} is not a pair", path, sloc)
                class_ids.update(pair)
            frames[fid] = (labels, boxes, pairs, rels, sloc)
        parsed_rows.append((i, row, frames))

    tid_of = {cid: tid for tid, cid in enumerate(sorted(class_ids))}
    catalog = {}
    for cid, tid in tid_of.items():
        category = normalize_category(name_of(cid, obj_names, "object", f"class {cid}"))
        if not category:
            raise ParseError(f"object class {cid!r} has no usable name", path, f"class {cid}")
        catalog[tid] = EntityRef(tid, category)

    all_fids = sorted({fid for _, _, frames in parsed_rows for fid in frames})
    frame_count = _optional_int(meta, "frame_count", path)
    if frame_count is None:
        frame_count = (all_fids[-1] + 1) if all_fids else 1
    elif all_fids and all_fids[-1] >= frame_count:
        raise IntegrityError(f"keyframe {all_fids[-1]} outside [0, {frame_count})", path, "frame_count")
    if all_fids and all_fids[0] < 0:
        raise IntegrityError(f"negative keyframe {all_fids[0]}", path, "situations")
    width = _optional_int(meta, "width", path)
    height = _optional_int(meta, "height", path)

    trajectories: dict[tuple[int, int], BBox] = {}
    triples_at: dict[int, set[tuple[int, str, int]]] = {}
    for _, _, frames in parsed_rows:
        for fid, (labels, boxes, pairs, rels, sloc) in sorted(frames.items()):
            for label, raw in zip(labels, boxes):
                try:
                    box = BBox.from_any(raw)
                except (KeyError, TypeError, ValueError) as exc:
                    raise ParseError(f"bad bbox: {exc}", path, sloc) from exc
                codes = box.problems(width, height)
                if codes:
                    sink.problem(codes[0], f"bbox {box.to_list()} for {label}", sloc)
                    continue
                trajectories.setdefault((tid_of[label], fid), box)
            for (h, t), rel in zip(pairs, rels):
                predicate = normalize_token(name_of(rel, rel_names, "relationship", sloc))
                head, tail = tid_of[h], tid_of[t]
                if head == tail:
                    sink.problem("REL_SELF_LOOP", f"relationship {rel!r} has head and tail {h!r}", sloc)
                    continue
                if vocab.kind_of(predicate) is None:
                    sink.problem(
                        "PREDICATE_UNKNOWN", f"unknown predicate {predicate!r}", sloc,
                        UnknownPredicateError, predicate=predicate,
                    )
                    continue
                triples_at.setdefault(fid, set()).add((head, predicate, tail))

    # a triple holds over each maximal run of consecutive annotated keyframes
    relations = []
    for triple in sorted({tr for s in triples_at.values() for tr in s}):
        run_start = prev = None
        for fid in all_fids:
            if triple in triples_at.get(fid, ()):
                if run_start is None:
                    run_start = fid
                prev = fid
            elif run_start is not None:
                relations.append(_star_relation(triple, run_start, prev, vocab))
                run_start = None
        if run_start is not None:
            relations.append(_star_relation(triple, run_start, prev, vocab))

    annotation = NormalizedAnnotation(
        video_id=video_id,
        frame_count=frame_count,
        catalog=tuple(catalog.values()),
        trajectories=trajectories,
        relations=tuple(relations),
        width=width,
        height=height,
    )

    records = []
    for i, row, frames in parsed_rows:
        loc = f"questions[{i}]"
        try:
            records.append(_star_record(row, frames, tid_of, video_id, path, loc))
        except IntegrityError as exc:
            if sink.strict:
                raise
            sink.quarantine.append(
                {"path": path, "location": loc, "code": "ANSWER_INVALID", "message": exc.reason}
            )
    return annotation, records


def _star_relation(triple, first_fid, last_fid, vocab):
    head, predicate, tail = triple
    return RelationInstance(head, tail, predicate, first_fid, last_fid + 1, vocab.kind_of(predicate))


def _star_record(row, frames, tid_of, video_id, path, loc) -> QARecord:
    qid = str(_require(row, "question_id", path, loc))
    question = _require(row, "question", path, loc)
    raw_choices = _require(row, "choices", path, loc)
    options = tuple(c["choice"] if isinstance(c, Mapping) else str(c) for c in raw_choices)
    index = row.get("answer_index", row.get("label"))
    answer = row.get("answer")
    if answer is None and index is None:
        raise ParseError("question has neither 'answer' nor 'answer_index'", path, loc)
    if index is not None:
        index = _as_int(index, path, loc + ".answer_index")
        if not 0 <= index < len(options):
            raise IntegrityError(f"answer index {index} outside {len(options)} choices", path, loc)
        if answer is not None and answer != options[index]:
            raise IntegrityError(f"answer {answer!r} differs from choice {index}", path, loc)
        answer = options[index]
    elif answer not in options:
        raise IntegrityError(f"answer {answer!r} is not among the choices", path, loc)
    else:
        index = options.index(answer)
    tids = set()
    for labels, _, pairs, _, _ in frames.values():
        tids.update(tid_of[c] for c in labels)
        tids.update(tid_of[c] for pair in pairs for c in pair)
    return QARecord(
        qid=qid,
        video_id=video_id,
        question=question,
        answer=answer,
        qtype="STAR",
        source="star",
        mc_options=options,
        answer_index=index,
        keyframes=tuple(sorted(frames)),
        situation_tids=tuple(sorted(tids)),
    )


# ---------------------------------------------------------------------------
# normalized line format


def annotation_to_dict(a: NormalizedAnnotation) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "video_id": a.video_id,
        "frame_count": a.frame_count,
        "width": a.width,
        "height": a.height,
        "catalog": [{"tid": e.tid, "category": e.category} for e in a.catalog],
        "trajectories": [
            {"tid": tid, "fid": fid, "bbox": box.to_list()} for (tid, fid), box in a.trajectories.items()
        ],
        "relations": [
            {
                "head_tid": r.head_tid,
                "tail_tid": r.tail_tid,
                "predicate": r.predicate,
                "begin_fid": r.begin_fid,
                "end_fid": r.end_fid,
                "kind": r.kind,
            }
            for r in a.relations
        ],
    }


def annotation_from_dict(d: Mapping) -> NormalizedAnnotation:
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ParseError(f"unsupported schema_version {version!r}")
    return NormalizedAnnotation(
        video_id=str(d["video_id"]),
        frame_count=int(d["frame_count"]),
        width=d.get("width"),
        height=d.get("height"),
        catalog=tuple(EntityRef(int(e["tid"]), e["category"]) for e in d["catalog"]),
        trajectories={(int(t["tid"]), int(t["fid"])): BBox(*t["bbox"]) for t in d["trajectories"]},
        relations=tuple(
            RelationInstance(
                int(r["head_tid"]), int(r["tail_tid"]), r["predicate"], int(r["begin_fid"]), int(r["end_fid"]), r["kind"]
            )
            for r in d["relations"]
        ),
    )


def serialize_annotation(a: NormalizedAnnotation) -> str:
    """One canonical JSON line (no trailing newline)."""
    return json.dumps(annotation_to_dict(a), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def deserialize_annotation(line: str) -> NormalizedAnnotation:
    try:
        data = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, None, f"column {exc.colno}") from exc
    return annotation_from_dict(data)


def write_normalized(path: str | Path, annotations: Iterable[NormalizedAnnotation]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for a in sorted(annotations, key=lambda x: x.video_id):
            fh.write(serialize_annotation(a) + "\n")
            n += 1
    return n


def read_normalized(path: str | Path) -> list[NormalizedAnnotation]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(deserialize_annotation(line))
            except (ParseError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad normalized record: {exc}", path, f"line {lineno}") from exc
    return out
