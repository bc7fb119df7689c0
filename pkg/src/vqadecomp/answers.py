"""Typed answers A1-A4 and the checks that tie them together."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence

from .annotation import LABEL_RE, BBox, Violation

TIMESTAMP_CAP = 16


class SchemaError(ValueError):
    """A plain JSON value does not have the shape of the expected answer."""


def _int(value: Any, what: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(f"{what} must be an integer, got {value!r}")
    if isinstance(value, float):
        if not value.is_integer():
            raise SchemaError(f"{what} must be an integer, got {value!r}")
        value = int(value)
    return value


def _str(value: Any, what: str) -> str:
    if not isinstance(value, str):
        raise SchemaError(f"{what} must be a string, got {value!r}")
    return value


def _list(value: Any, what: str) -> list:
    if not isinstance(value, (list, tuple)):
        raise SchemaError(f"{what} must be a list, got {type(value).__name__}")
    return list(value)


@dataclass(frozen=True)
class CoTask1Answer:
    entities: tuple[str, ...]
    timestamps: tuple[int, ...]

    def to_obj(self, entity_key: str = "entities") -> dict:
        return {entity_key: list(self.entities), "timestamps": list(self.timestamps)}

    @classmethod
    def from_obj(cls, obj: Any) -> "CoTask1Answer":
        """Read ``{"entities": [...], "timestamps": [...]}``; the legacy ``objects`` key is accepted too."""
        if not isinstance(obj, Mapping):
            raise SchemaError("A1 must be an object")
        if "entities" in obj:
            raw_entities = obj["entities"]
        elif "objects" in obj:
            raw_entities = obj["objects"]
        else:
            raise SchemaError("A1 needs an 'entities' (or legacy 'objects') key")
        if "timestamps" not in obj:
            raise SchemaError("A1 needs a 'timestamps' key")
        entities = tuple(_str(e, "entity") for e in _list(raw_entities, "entities"))
        timestamps = tuple(_int(t, "timestamp") for t in _list(obj["timestamps"], "timestamps"))
        return cls(entities, timestamps)


@dataclass(frozen=True)
class TrackedObject:
    label: str
    bbox: BBox


@dataclass(frozen=True)
class FrameRecord:
    frame: int
    objects: tuple[TrackedObject, ...]


@dataclass(frozen=True)
class RelationRecord:
    head: str
    relation: str
    tail: str
    start_frame: int
    end_frame: int

    def sort_key(self):
        return (self.start_frame, self.head, self.relation, self.tail, self.end_frame)


CoTask2Answer = tuple[FrameRecord, ...]
RelationAnswer = tuple[RelationRecord, ...]


def a2_to_obj(a2: Iterable[FrameRecord]) -> list[dict]:
    return [
        {"frame": fr.frame, "objects": [{"label": o.label, "bbox": o.bbox.to_list()} for o in fr.objects]}
        for fr in a2
    ]


def a2_from_obj(obj: Any) -> CoTask2Answer:
    out = []
    for i, item in enumerate(_list(obj, "A2")):
        if not isinstance(item, Mapping) or "frame" not in item or "objects" not in item:
            raise SchemaError(f"A2[{i}] needs 'frame' and 'objects'")
        objects = []
        for o in _list(item["objects"], f"A2[{i}].objects"):
            if not isinstance(o, Mapping) or "label" not in o or "bbox" not in o:
                raise SchemaError(f"A2[{i}] object needs 'label' and 'bbox'")
            coords = _list(o["bbox"], "bbox")
            if len(coords) != 4:
                raise SchemaError(f"bbox needs 4 numbers, got {coords!r}")
            for c in coords:
                if isinstance(c, bool) or not isinstance(c, (int, float)):
                    raise SchemaError(f"bbox coordinate {c!r} is not a number")
            objects.append(TrackedObject(_str(o["label"], "label"), BBox.from_any(coords)))
        out.append(FrameRecord(_int(item["frame"], "frame"), tuple(objects)))
    return tuple(out)


def relations_to_obj(rels: Iterable[RelationRecord]) -> list[dict]:
    return [
        {
            "head": r.head,
            "relation": r.relation,
            "tail": r.tail,
            "start_frame": r.start_frame,
            "end_frame": r.end_frame,
        }
        for r in rels
    ]


def relations_from_obj(obj: Any) -> RelationAnswer:
    out = []
    for i, item in enumerate(_list(obj, "relations")):
        if not isinstance(item, Mapping):
            raise SchemaError(f"relation {i} must be an object")
        missing = [k for k in ("head", "relation", "tail", "start_frame", "end_frame") if k not in item]
        if missing:
            raise SchemaError(f"relation {i} is missing {missing}")
        out.append(
            RelationRecord(
                _str(item["head"], "head"),
                _str(item["relation"], "relation"),
                _str(item["tail"], "tail"),
                _int(item["start_frame"], "start_frame"),
                _int(item["end_frame"], "end_frame"),
            )
        )
    return tuple(out)


def check_cotask1(
    a1: CoTask1Answer,
    num_frames: int,
    labels: Sequence[str] | None = None,
    cap: int = TIMESTAMP_CAP,
) -> list[Violation]:
    out = []
    ts = a1.timestamps
    if not 1 <= len(ts) <= cap:
        out.append(Violation("TS_COUNT", f"{len(ts)} timestamps, expected 1..{cap}", "a1"))
    bad = [t for t in ts if not 1 <= t <= num_frames]
    if bad:
        out.append(Violation("TS_RANGE", f"timestamps {bad} outside 1..{num_frames}", "a1"))
    if any(b <= a for a, b in zip(ts, ts[1:])):
        out.append(Violation("TS_ORDER", "timestamps are not strictly increasing", "a1"))
    if not a1.entities:
        out.append(Violation("ENTITIES_EMPTY", "no entities", "a1"))
    if len(set(a1.entities)) != len(a1.entities):
        out.append(Violation("ENTITY_DUPLICATE", "entity listed twice", "a1"))
    for e in a1.entities:
        if not LABEL_RE.fullmatch(e):
            out.append(Violation("LABEL_MALFORMED", f"label {e!r}", "a1"))
        elif labels is not None and e not in labels:
            out.append(Violation("ENTITY_UNKNOWN", f"{e!r} is not in the catalog", "a1"))
    return out


def check_chain(
    a1: CoTask1Answer,
    a2: CoTask2Answer,
    a3: RelationAnswer,
    a4: RelationAnswer,
    num_frames: int,
    *,
    labels: Sequence[str] | None = None,
    spatial: Iterable[str] | None = None,
    temporal: Iterable[str] | None = None,
    cap: int = TIMESTAMP_CAP,
    width: int | None = None,
    height: int | None = None,
) -> list[Violation]:
    """Every cross-answer invariant of a CoTask chain; empty when consistent."""
    out = check_cotask1(a1, num_frames, labels, cap)
    entities = set(a1.entities)
    frames = [fr.frame for fr in a2]
    if sorted(set(frames)) != sorted(set(a1.timestamps)) or len(frames) != len(set(frames)):
        out.append(Violation("CHAIN_MISMATCH", f"A2 frames {frames} != A1 timestamps {list(a1.timestamps)}", "a2"))
    if frames != sorted(frames):
        out.append(Violation("A2_ORDER", "A2 frames are not ascending", "a2"))
    for fr in a2:
        seen = set()
        for o in fr.objects:
            where = f"a2[frame={fr.frame}]"
            if o.label not in entities:
                out.append(Violation("CHAIN_MISMATCH", f"A2 label {o.label!r} not in A1 entities", where))
            if o.label in seen:
                out.append(Violation("A2_DUPLICATE", f"{o.label!r} listed twice", where))
            seen.add(o.label)
            for code in o.bbox.problems(width, height):
                out.append(Violation(code, f"bbox {o.bbox.to_list()}", where))
    for name, rels, vocab in (("a3", a3, spatial), ("a4", a4, temporal)):
        vocab = set(vocab) if vocab is not None else None
        for i, r in enumerate(rels):
            where = f"{name}[{i}]"
            if r.head not in entities or r.tail not in entities:
                out.append(Violation("CHAIN_MISMATCH", f"endpoint of {r.head}-{r.tail} not in A1 entities", where))
            if r.head == r.tail:
                out.append(Violation("REL_SELF_LOOP", f"head equals tail {r.head!r}", where))
            if not 1 <= r.start_frame <= r.end_frame <= num_frames:
                out.append(
                    Violation("REL_SPAN", f"span {r.start_frame}..{r.end_frame} outside 1..{num_frames}", where)
                )
            if vocab is not None and r.relation not in vocab:
                out.append(Violation("REL_VOCAB", f"{r.relation!r} not in the {name} vocabulary", where))
    return out
