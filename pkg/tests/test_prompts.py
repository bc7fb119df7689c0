import json
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from support import HANDBAG_A1, HANDBAG_Q0
from vqadecomp.annotation import BBox
from vqadecomp.answers import CoTask1Answer, FrameRecord, RelationRecord, TrackedObject
from vqadecomp.prompts import (
    TEMPLATE_IDS,
    RenderError,
    ResponseParseError,
    TemplateError,
    checksum,
    extract_json,
    load_template,
    parse_judge_score,
    parse_response,
    render,
    serialize,
)

GOLDEN = Path(__file__).parent / "fixtures" / "golden"
Q0_CAP = "What else does the man in yellow carry aside from a black laptop bag?"

# slot text exactly as printed in the reference prompts, typos and elisions included
REFERENCE_A2_FULL = (
    '[{"frame": 1, "objects": [{"label": "0_adult", "bbox": [262, 2, 400, 333]}, {"label": "3_handbag", '
    '"bbox": [294, 48, 393, 146]}]}, {"frame": 5, "objects": [{"label": "0_adult", "bbox": [355, 17, 520, 273]}, '
    '{"label": "3_handbag", "bbox": [386, 0, 495, 87]}]}, {"frame": 9, "objects": [{"label": "0_adult", "bbox": '
    '[369, 12, 480, 188]}]}, {"frame": 12, "objects": [{"label": "0_adult", "bbox": [331, 14, 421, 140]}]}, '
    '{"frame": 15, "objects": []}]}'
)
REFERENCE_A2_ELIDED = (
    '[{"frame": 1, "objects": [{"label": "0_adult", "bbox": [262, 2, 400, 333]}, {"label": "3_handbag", '
    '"bbox": [294, 48, 393, 146]}]}, {"frame": 5, "objects": [{"label": "0_adult", "bbox": [355, 17, 520, 273]}, '
    '{"label": "3_handbag", "bbox": [386, 0, 495, 87]}]}, {"frame": 9, "objects": [...]}, {"frame": 12, '
    '"objects": [...]}, {"frame": 15, "objects": []}]'
)
FINAL_A2 = (
    "[{'frame': 1, 'objects': [{'label': '0_adult', 'bbox': [262, 2, 400, 333]}, {'label': '3_handbag', "
    "'bbox': [294, 48, 393, 146]}}, ...}]"
)
FINAL_A3 = "[{'head': '0_adult', 'relation': 'next_to', 'tail': '4_handbag', 'start_frame': 1, 'end_frame': 12}, ...]"
FINAL_A4 = "[{'head': '0_adult', 'relation': 'carry', 'tail': '4_handbag', 'start_frame': 1, 'end_frame': 12}, ...]"

HANDBAG_A2 = (
    FrameRecord(1, (TrackedObject("0_adult", BBox(262, 2, 400, 333)), TrackedObject("3_handbag", BBox(294, 48, 393, 146)))),
    FrameRecord(5, (TrackedObject("0_adult", BBox(355, 17, 520, 273)), TrackedObject("3_handbag", BBox(386, 0, 495, 87)))),
    FrameRecord(9, (TrackedObject("0_adult", BBox(369, 12, 480, 188)),)),
    FrameRecord(12, (TrackedObject("0_adult", BBox(331, 14, 421, 140)),)),
    FrameRecord(15, ()),
)
HANDBAG_A3 = (RelationRecord("0_adult", "next_to", "3_handbag", 1, 12),)

REFERENCE_SLOTS = {
    "cotask1_gen": {"question": "{{YOUR_QUESTION_HERE}}", "entities": "{{Ground-truth entities}}"},
    "cotask1_eval": {"question": Q0_CAP},
    "cotask2_eval": {
        "question": Q0_CAP,
        "a1": HANDBAG_A1,
        "entities": list(HANDBAG_A1.entities),
        "frames": list(HANDBAG_A1.timestamps),
    },
    "cotask3_eval": {
        "question": Q0_CAP,
        "a1": HANDBAG_A1,
        "a2": REFERENCE_A2_FULL,
        "entities": list(HANDBAG_A1.entities),
        "frames": list(HANDBAG_A1.timestamps),
    },
    "cotask4_eval": {
        "question": Q0_CAP,
        "a1": HANDBAG_A1,
        "a2": REFERENCE_A2_ELIDED,
        "a3": HANDBAG_A3,
        "entities": list(HANDBAG_A1.entities),
        "frames": list(HANDBAG_A1.timestamps),
    },
    "final_answer": {"question": HANDBAG_Q0, "a1": HANDBAG_A1, "a2": FINAL_A2, "a3": FINAL_A3, "a4": FINAL_A4},
    "judge": {"question": "{{question}}", "answer": "{{answer}}", "prediction": "{{prediction}}"},
}


@pytest.mark.parametrize("template_id", TEMPLATE_IDS)
def test_golden_byte_for_byte(template_id):
    golden = (GOLDEN / f"{template_id}.txt").read_bytes()
    assert render(template_id, REFERENCE_SLOTS[template_id]).encode("utf-8") == golden


@pytest.mark.parametrize("template_id", TEMPLATE_IDS)
def test_golden_files_are_normalized(template_id):
    text = (GOLDEN / f"{template_id}.txt").read_text("utf-8")
    assert "\r" not in text and text.endswith("\n")
    assert all(line == line.rstrip() for line in text.splitlines())


def test_typed_a2_differs_from_reference_only_by_its_stray_brace():
    assert serialize(HANDBAG_A2, "json") + "}" == REFERENCE_A2_FULL


def test_checksums_guard_template_assets():
    for tid in TEMPLATE_IDS:
        tpl = load_template(tid)
        assert checksum(tpl.body)
    with pytest.raises(TemplateError):
        load_template("nope")


def test_required_slots():
    assert load_template("judge").required_slots == ("question", "answer", "prediction")
    assert load_template("final_answer").required_slots == ("question",)
    assert set(load_template("cotask4_eval").required_slots) == {"question", "a1", "a2", "a3", "entities", "frames"}


def test_judge_render_contains_first_example():
    text = render("judge", {"question": "Is it overcast?", "answer": "no", "prediction": "yes"})
    assert "Question: Is it overcast?\nAnswer: no\nResponse: yes\nYour mark: 1" in text
    assert text.endswith("Question: Is it overcast?\nAnswer: no\nResponse: yes\n")


def test_final_answer_contains_q0_line():
    text = render("final_answer", {"question": HANDBAG_Q0})
    assert f"\nQ0: {HANDBAG_Q0}\n" in text
    assert "A1:" not in text and "A4:" not in text
    assert "Use entity co-occurrence (A1)" in text


def test_missing_slot_raises_without_output():
    with pytest.raises(RenderError) as err:
        render("judge", {"question": "q", "answer": "a"})
    assert err.value.missing == ("prediction",)
    with pytest.raises(RenderError) as err:
        render("judge", {"question": "q", "answer": "a", "prediction": "p", "extra": 1})
    assert err.value.unknown == ("extra",)


@pytest.mark.parametrize("template_id", TEMPLATE_IDS)
def test_full_render_leaves_no_placeholders(template_id):
    assert "${" not in render(template_id, REFERENCE_SLOTS[template_id])


def test_num_frames_slot_follows_timeline_length():
    text = render("cotask1_gen", {"question": "q", "entities": "[]", "num_frames": 40})
    assert "between 1 and 40" in text and "64" not in text


# ---------------------------------------------------------------------------
# parsing


def test_fenced_cotask1_reply():
    raw = '```json\n{"entities": ["0_adult"], "timestamps": [3]}\n```'
    assert parse_response("cotask1_gen", raw) == CoTask1Answer(("0_adult",), (3,))


def test_leading_prose_and_legacy_key():
    raw = 'Sure! Here it is: {"objects": ["2_fruits"], "timestamps": [1, 2]} hope that helps'
    assert parse_response("cotask1_eval", raw) == CoTask1Answer(("2_fruits",), (1, 2))


def test_python_literal_reply():
    raw = "[{'head': '0_adult', 'relation': 'carry', 'tail': '3_handbag', 'start_frame': 1, 'end_frame': 12}]"
    assert parse_response("cotask4_eval", raw) == (RelationRecord("0_adult", "carry", "3_handbag", 1, 12),)


@pytest.mark.parametrize(
    "template_id,raw",
    [
        ("cotask1_gen", "no json here"),
        ("cotask1_gen", '{"entities": ["0_adult"]}'),
        ("cotask2_eval", '[{"frame": 1, "objects": [{"label": "0_adult", "bbox": [1, 2, 3]}]}]'),
        ("cotask3_eval", '[{"head": "0_adult"}]'),
        ("judge", "6"),
        ("judge", "nothing"),
        ("final_answer", "   "),
    ],
)
def test_parse_errors_keep_raw_text(template_id, raw):
    with pytest.raises(ResponseParseError) as err:
        parse_response(template_id, raw)
    assert err.value.raw == raw


# hand-checked judge replies and the mark a reader would take from each
JUDGE_REPLIES = [
    ("Your mark: 4", 4),
    ("4", 4),
    ("5\n", 5),
    ("Your mark: 1", 1),
    ("Score: 3/5", 3),
    ("I would give this a 2 out of 5.", 2),
    ("Mark: 5. The response matches exactly.", 5),
    ("The response is partially correct. Your mark: 3", 3),
    ("Rating = 2", 2),
    ("**4**", 4),
    ("The answer mentions 2 people but the response says 3. Your mark: 2", 2),
    ("3/5", 3),
    ("Grade: 1 (completely different)", 1),
    ("My score is 5", 5),
    ("mark:4", 4),
    ("Your mark: 4\n", 4),
    ("The response matches the answer in meaning; 5", 5),
    ("Your mark: 5/5", 5),
    ("Considering both, I'd say 3.", 3),
    ("```\n2\n```", 2),
]


@pytest.mark.parametrize("raw,expected", JUDGE_REPLIES)
def test_judge_replies(raw, expected):
    assert parse_response("judge", raw) == expected


@pytest.mark.parametrize("raw", ["0", "Your mark: 6", "Score: 3.5", "-1", "Your mark: 10/10"])
def test_judge_out_of_range(raw):
    with pytest.raises(ValueError):
        parse_judge_score(raw)


def test_judge_worked_examples_map_to_their_marks():
    body = load_template("judge").body
    marks = [int(line.split(":")[1]) for line in body.splitlines() if line.startswith("Your mark:")]
    assert marks == [1, 3, 5]
    assert [parse_response("judge", f"Your mark: {m}") for m in marks] == [1, 3, 5]


def test_extract_json_prefers_first_value():
    assert extract_json('text [1, 2] then {"a": 1}') == [1, 2]


# ---------------------------------------------------------------------------
# parse(serialize(x)) == x

labels = st.builds(lambda t, c: f"{t}_{c}", st.integers(0, 99), st.sampled_from(["adult", "dog", "traffic_light"]))
boxes = st.builds(
    lambda x, y, w, h: BBox(x, y, x + w, y + h), st.integers(0, 900), st.integers(0, 900), st.integers(1, 300), st.integers(1, 300)
)
a1s = st.builds(
    lambda e, t: CoTask1Answer(tuple(e), tuple(sorted(t))),
    st.lists(labels, min_size=1, max_size=5, unique=True),
    st.sets(st.integers(1, 64), min_size=1, max_size=16),
)
a2s = st.lists(
    st.builds(lambda f, objs: FrameRecord(f, tuple(objs)), st.integers(1, 64), st.lists(st.builds(TrackedObject, labels, boxes), max_size=3)),
    max_size=5,
).map(tuple)
rels = st.lists(
    st.builds(RelationRecord, labels, st.sampled_from(["next_to", "carry"]), labels, st.integers(1, 64), st.integers(1, 64)),
    max_size=5,
).map(tuple)


@settings(max_examples=150, deadline=None)
@given(a1s, st.sampled_from(["json", "repr"]), st.booleans())
def test_cotask1_round_trip(a1, style, fenced):
    raw = serialize(a1, style)
    if fenced:
        raw = f"```json\n{raw}\n```"
    assert parse_response("cotask1_gen", raw) == a1


@settings(max_examples=150, deadline=None)
@given(a2s, st.sampled_from(["json", "repr"]))
def test_cotask2_round_trip(a2, style):
    raw = serialize(list(a2), style) if a2 else "[]"
    assert parse_response("cotask2_eval", raw) == a2


@settings(max_examples=150, deadline=None)
@given(rels, st.sampled_from(["cotask3_eval", "cotask4_eval"]))
def test_relation_round_trip(r, template_id):
    raw = json.dumps([vars(x) for x in r])
    assert parse_response(template_id, raw) == r
