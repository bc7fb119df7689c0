"""Uniform frame sampling onto a k-slot timeline and re-indexing of annotations.

Sampled timestamps are 1-based: timestamp ``t`` shows original frame
``orig_of[t - 1]``.
"""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping

from .annotation import BBox, EntityRef, NormalizedAnnotation

logger = logging.getLogger(__name__)

DEFAULT_NUM_FRAMES = 64


@dataclass(frozen=True)
class SampleMap:
    k: int
    frame_count: int
    orig_of: tuple[int, ...]

    @property
    def num_slots(self) -> int:
        """k' = min(k, frame_count): the number of timestamps actually exposed."""
        return len(self.orig_of)

    @property
    def timestamps(self) -> range:
        return range(1, self.num_slots + 1)

    def timestamp_of(self, fid: int) -> int | None:
        """Inverse lookup: the timestamp showing original frame ``fid``, if sampled."""
        i = bisect.bisect_left(self.orig_of, fid)
        if i < len(self.orig_of) and self.orig_of[i] == fid:
            return i + 1
        return None


@dataclass(frozen=True)
class MappedRelation:
    head_label: str
    predicate: str
    tail_label: str
    start_frame: int
    end_frame: int

    def sort_key(self):
        return (self.start_frame, self.head_label, self.predicate, self.tail_label, self.end_frame)


@dataclass(frozen=True)
class ReindexedAnnotation:
    video_id: str
    sample_map: SampleMap
    catalog: tuple[EntityRef, ...]
    boxes: Mapping[tuple[int, int], BBox]
    spatial_relations: tuple[MappedRelation, ...]
    temporal_relations: tuple[MappedRelation, ...]
    dropped_relations: int = 0
    dropped_entities: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "boxes", MappingProxyType(dict(sorted(self.boxes.items()))))

    @property
    def num_frames(self) -> int:
        return self.sample_map.num_slots

    @property
    def labels(self) -> list[str]:
        return [e.label for e in self.catalog]

    def tid_of(self, label: str) -> int:
        for e in self.catalog:
            if e.label == label:
                return e.tid
        raise KeyError(label)


def uniform_sample(frame_count: int, k: int = DEFAULT_NUM_FRAMES) -> SampleMap:
    """Pick ``min(k, frame_count)`` evenly spread frames, always including frame 0.

    ``orig_of[i] = floor(i * frame_count / k)``; short videos keep every frame
    once rather than repeating frames.
    """
    if isinstance(frame_count, bool) or not isinstance(frame_count, int) or frame_count < 1:
        raise ValueError(f"frame_count must be a positive integer, got {frame_count!r}")
    if isinstance(k, bool) or not isinstance(k, int) or k < 1:
        raise ValueError(f"k must be a positive integer, got {k!r}")
    if frame_count < k:
        orig_of = tuple(range(frame_count))
    else:
        orig_of = tuple(i * frame_count // k for i in range(k))
    return SampleMap(k=k, frame_count=frame_count, orig_of=orig_of)


def map_span(begin_fid: int, end_fid: int, sample_map: SampleMap) -> tuple[int, int] | None:
    """Map a half-open original span onto the first and last sampled timestamp inside it."""
    if not 0 <= begin_fid < end_fid <= sample_map.frame_count:
        raise ValueError(
            f"span [{begin_fid}, {end_fid}) is not inside [0, {sample_map.frame_count}]"
        )
    orig = sample_map.orig_of
    lo = bisect.bisect_left(orig, begin_fid)
    hi = bisect.bisect_left(orig, end_fid)
    if lo >= hi:
        return None
    return lo + 1, hi


def reindex(annotation: NormalizedAnnotation, sample_map: SampleMap) -> ReindexedAnnotation:
    """Carry boxes and relation spans over to the sampled timeline.

    Boxes are copied unchanged.  Relations whose span contains no sampled
    frame are dropped; the drop counts are logged and kept on the result.
    """
    if sample_map.frame_count != annotation.frame_count:
        raise ValueError(
            f"sample map covers {sample_map.frame_count} frames, annotation has {annotation.frame_count}"
        )
    boxes = {}
    for t, fid in enumerate(sample_map.orig_of, 1):
        for entity in annotation.catalog:
            box = annotation.trajectories.get((entity.tid, fid))
            if box is not None:
                boxes[(entity.tid, t)] = box

    labels = {e.tid: e.label for e in annotation.catalog}
    spatial, temporal = set(), set()
    dropped = 0
    for rel in annotation.relations:
        span = map_span(rel.begin_fid, rel.end_fid, sample_map)
        if span is None:
            dropped += 1
            continue
        mapped = MappedRelation(labels[rel.head_tid], rel.predicate, labels[rel.tail_tid], *span)
        (spatial if rel.kind == "spatial" else temporal).add(mapped)

    present = {tid for tid, _ in boxes}
    tracked = {tid for tid, _ in annotation.trajectories}
    dropped_entities = tuple(sorted(tracked - present))
    if dropped or dropped_entities:
        logger.info(
            "reindex dropped content",
            extra={
                "video_id": annotation.video_id,
                "dropped_relations": dropped,
                "dropped_entities": len(dropped_entities),
            },
        )
    return ReindexedAnnotation(
        video_id=annotation.video_id,
        sample_map=sample_map,
        catalog=annotation.catalog,
        boxes=boxes,
        spatial_relations=tuple(sorted(spatial, key=MappedRelation.sort_key)),
        temporal_relations=tuple(sorted(temporal, key=MappedRelation.sort_key)),
        dropped_relations=dropped,
        dropped_entities=dropped_entities,
    )
