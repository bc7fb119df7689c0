"""Prompt templates (stored as text assets) and tolerant response parsing.

Template bodies use ``string.Template`` placeholders (``${name}``).  Bodies are
LF-only with no trailing spaces and are checksummed in ``templates/checksums.json``.
"""

from __future__ import annotations

import ast
import hashlib
import json
import re
import string
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Any, Mapping

from .answers import (
    CoTask1Answer,
    FrameRecord,
    RelationRecord,
    SchemaError,
    a2_from_obj,
    a2_to_obj,
    relations_from_obj,
    relations_to_obj,
)

TEMPLATE_IDS = (
    "cotask1_gen",
    "cotask1_eval",
    "cotask2_eval",
    "cotask3_eval",
    "cotask4_eval",
    "final_answer",
    "judge",
)

# per-task eval prompt for CoTask n
EVAL_TEMPLATE = {1: "cotask1_eval", 2: "cotask2_eval", 3: "cotask3_eval", 4: "cotask4_eval"}

# "json" renders typed slot values with double quotes, "repr" as Python literals
_META: dict[str, dict] = {
    "cotask1_gen": {"style": "repr", "defaults": {"num_frames": "64"}},
    "cotask1_eval": {"style": "json", "defaults": {"num_frames": "64"}},
    "cotask2_eval": {"style": "json"},
    "cotask3_eval": {"style": "json"},
    "cotask4_eval": {"style": "json"},
    "final_answer": {"style": "repr", "optional": ("a1", "a2", "a3", "a4")},
    "judge": {"style": "json"},
}

_PLACEHOLDER = re.compile(r"\$\{(\w+)\}")


class TemplateError(Exception):
    pass


class RenderError(TemplateError):
    def __init__(self, template_id: str, missing=(), unknown=()):
        self.template_id = template_id
        self.missing = tuple(missing)
        self.unknown = tuple(unknown)
        parts = []
        if self.missing:
            parts.append(f"missing slot(s) {', '.join(self.missing)}")
        if self.unknown:
            parts.append(f"unknown slot(s) {', '.join(self.unknown)}")
        super().__init__(f"{template_id}: {'; '.join(parts)}")


class ResponseParseError(ValueError):
    """A model reply could not be turned into the expected answer; keeps the raw text."""

    def __init__(self, template_id: str, raw: str, reason: str):
        self.template_id = template_id
        self.raw = raw
        self.reason = reason
        super().__init__(f"{template_id}: {reason}")


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str
    required_slots: tuple[str, ...]
    optional_slots: tuple[str, ...] = ()
    defaults: Mapping[str, str] = field(default_factory=dict)
    style: str = "json"

    @property
    def slots(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(_PLACEHOLDER.findall(self.body)))


def _asset(name: str) -> str:
    return resources.files("vqadecomp.templates").joinpath(name).read_text("utf-8")


@lru_cache(maxsize=None)
def _checksums() -> dict[str, str]:
    return json.loads(_asset("checksums.json"))


def checksum(body: str) -> str:
    return hashlib.sha256(body.encode("utf-8")).hexdigest()


@lru_cache(maxsize=None)
def load_template(template_id: str) -> PromptTemplate:
    if template_id not in TEMPLATE_IDS:
        raise TemplateError(f"unknown template {template_id!r}")
    body = _asset(f"{template_id}.txt")
    expected = _checksums().get(template_id)
    if expected != checksum(body):
        raise TemplateError(f"checksum mismatch for template {template_id!r}")
    meta = _META[template_id]
    optional = tuple(meta.get("optional", ()))
    defaults = dict(meta.get("defaults", {}))
    found = tuple(dict.fromkeys(_PLACEHOLDER.findall(body)))
    required = tuple(s for s in found if s not in optional and s not in defaults)
    return PromptTemplate(template_id, body, required, optional, defaults, meta["style"])


def to_plain(value: Any) -> Any:
    """Convert typed answers into plain JSON-compatible values."""
    if isinstance(value, CoTask1Answer):
        return value.to_obj()
    if isinstance(value, (list, tuple)) and value and all(isinstance(v, FrameRecord) for v in value):
        return a2_to_obj(value)
    if isinstance(value, (list, tuple)) and value and all(isinstance(v, RelationRecord) for v in value):
        return relations_to_obj(value)
    if isinstance(value, tuple):
        return [to_plain(v) for v in value]
    return value


def serialize(value: Any, style: str = "json") -> str:
    """Text form of a slot value; strings pass through untouched."""
    if isinstance(value, str):
        return value
    plain = to_plain(value)
    if style == "repr":
        return repr(plain)
    return json.dumps(plain, ensure_ascii=False)


def render(template_id: str, slots: Mapping[str, Any]) -> str:
    """Fill a template.

    Optional slots (the A1-A4 lines of the final-answer prompt) that are
    absent or ``None`` remove their whole line.  Missing required slots raise
    :class:`RenderError` before anything is rendered.
    """
    tpl = load_template(template_id)
    known = set(tpl.slots)
    unknown = sorted(k for k in slots if k not in known)
    missing = [s for s in tpl.required_slots if slots.get(s) is None]
    if missing or unknown:
        raise RenderError(template_id, missing, unknown)
    values = {k: str(v) for k, v in tpl.defaults.items()}
    values.update({k: serialize(v, tpl.style) for k, v in slots.items() if v is not None})
    absent = {s for s in tpl.optional_slots if s not in values}
    if not absent:
        return _compiled(template_id, ()).substitute(values)
    return _compiled(template_id, tuple(sorted(absent))).substitute(values)


@lru_cache(maxsize=None)
def _compiled(template_id: str, absent: tuple[str, ...]) -> string.Template:
    """Template body with the lines mentioning any ``absent`` slot removed."""
    body = load_template(template_id).body
    drop = set(absent)
    lines = [line for line in body.splitlines(keepends=True) if not drop.intersection(_PLACEHOLDER.findall(line))]
    return string.Template("".join(lines))


# ---------------------------------------------------------------------------
# response parsing

_FENCE = re.compile(r"```[\w-]*[ \t]*\n?(.*?)```", re.S)


def _balanced(text: str, start: int) -> str | None:
    """Substring from ``start`` to its matching close bracket, honoring quotes."""
    pairs = {"{": "}", "[": "]"}
    stack = []
    quote = None
    i = start
    while i < len(text):
        ch = text[i]
        if quote:
            if ch == "\\":
                i += 2
                continue
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch in pairs:
            stack.append(pairs[ch])
        elif ch in "}]":
            if not stack or stack.pop() != ch:
                return None
            if not stack:
                return text[start : i + 1]
        i += 1
    return None


def extract_json(raw: str) -> Any:
    """Return the first JSON value in a reply, tolerating fences, prose and single quotes."""
    text = raw.strip()
    fenced = _FENCE.search(text)
    if fenced:
        text = fenced.group(1)
    text = text.strip().strip("`").strip()
    decoder = json.JSONDecoder()
    for i, ch in enumerate(text):
        if ch not in "{[":
            continue
        try:
            value, _ = decoder.raw_decode(text, i)
            return value
        except json.JSONDecodeError:
            pass
        chunk = _balanced(text, i)
        if chunk is None:
            continue
        try:
            return ast.literal_eval(chunk)
        except (ValueError, SyntaxError, MemoryError, RecursionError):
            continue
    raise ValueError("no JSON value found")


_LABELED = re.compile(r"(?:mark|score|rating|grade)\s*(?:is|of|=|:)?\s*[:=]?\s*(-?\d+(?:\.\d+)?)", re.I)
_NUMBER = re.compile(r"(?<![\w.])-?\d+(?:\.\d+)?(?!\w|\.\d)")
_DENOMINATOR = re.compile(r"(?:/\s*|out\s+of\s+)5\b", re.I)


def parse_judge_score(raw: str) -> int:
    """Integer mark in 1..5 from a judge reply.

    A labelled number ("Your mark: 4", "Score = 2") wins; otherwise the last
    bare number is used, ignoring "/5" and "out of 5" denominators.
    """
    labelled = _LABELED.findall(raw)
    if labelled:
        token = labelled[-1]
    else:
        numbers = _NUMBER.findall(_DENOMINATOR.sub(" ", raw))
        if not numbers:
            raise ValueError("no number in judge reply")
        token = numbers[-1]
    value = float(token)
    if not value.is_integer():
        raise ValueError(f"judge mark {token} is not an integer")
    score = int(value)
    if not 1 <= score <= 5:
        raise ValueError(f"judge mark {score} outside 1..5")
    return score


def clean_free_text(raw: str) -> str:
    text = raw.strip()
    fenced = _FENCE.search(text)
    if fenced:
        text = fenced.group(1).strip()
    text = re.sub(r"^(?:respond|response|answer|res)\s*:\s*", "", text, flags=re.I)
    return text.strip().strip("`").strip()


def parse_response(template_id: str, raw: str):
    """Turn a model reply into the typed answer for ``template_id``.

    cotask1_* -> CoTask1Answer, cotask2_eval -> tuple of FrameRecord,
    cotask3/4_eval -> tuple of RelationRecord, judge -> int, final_answer -> str.
    """
    if template_id not in TEMPLATE_IDS:
        raise TemplateError(f"unknown template {template_id!r}")
    raw = raw if isinstance(raw, str) else str(raw)
    try:
        if template_id == "judge":
            return parse_judge_score(raw)
        if template_id == "final_answer":
            text = clean_free_text(raw)
            if not text:
                raise ValueError("empty answer")
            return text
        value = extract_json(raw)
        if template_id in ("cotask1_gen", "cotask1_eval"):
            return CoTask1Answer.from_obj(value)
        if template_id == "cotask2_eval":
            return a2_from_obj(value)
        return relations_from_obj(value)
    except (ValueError, SchemaError) as exc:
        raise ResponseParseError(template_id, raw, str(exc)) from exc
