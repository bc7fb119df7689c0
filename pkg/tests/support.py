"""Fixture builders, brute-force oracles and a local chat-completions mock shared by the tests."""

from __future__ import annotations

import json
import random
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from vqadecomp.annotation import BBox, EntityRef, NormalizedAnnotation, PredicateVocabulary, RelationInstance
from vqadecomp.answers import CoTask1Answer, FrameRecord, RelationRecord, TrackedObject

HANDBAG_Q0 = "what else does the man in yellow carry aside from a black laptop bag?"
CATEGORIES = ["adult", "child", "baby", "dog", "handbag", "table", "car", "toy", "ball", "cup", "sofa", "bicycle"]
VOCAB = PredicateVocabulary.default()
SPATIAL = sorted(VOCAB.spatial)
TEMPORAL = sorted(VOCAB.temporal)


# ---------------------------------------------------------------------------
# the worked example used throughout the reference prompts

HANDBAG_BOXES = {
    (0, 1): [262, 2, 400, 333],
    (3, 1): [294, 48, 393, 146],
    (0, 5): [355, 17, 520, 273],
    (3, 5): [386, 0, 495, 87],
    (0, 9): [369, 12, 480, 188],
    (0, 12): [331, 14, 421, 140],
}


def handbag_annotation() -> NormalizedAnnotation:
    """64-frame video so timestamp t shows original frame t - 1."""
    catalog = (EntityRef(0, "adult"), EntityRef(1, "child"), EntityRef(2, "car"), EntityRef(3, "handbag"))
    traj = {(tid, t - 1): BBox(*box) for (tid, t), box in HANDBAG_BOXES.items()}
    traj[(1, 20)] = BBox(10, 10, 50, 50)
    relations = (
        RelationInstance(0, 3, "next_to", 0, 12, "spatial"),
        RelationInstance(0, 3, "carry", 0, 12, "temporal"),
        RelationInstance(1, 2, "in_front_of", 18, 30, "spatial"),
    )
    return NormalizedAnnotation("handbag_video", 64, catalog, traj, relations, 640, 360)


HANDBAG_A1 = CoTask1Answer(("0_adult", "3_handbag"), (1, 5, 9, 12, 15))


# ---------------------------------------------------------------------------
# random fixtures


def random_annotation(rng: random.Random, max_frames: int = 500, max_entities: int = 10, max_relations: int = 20):
    frame_count = rng.randint(1, max_frames)
    n_ent = rng.randint(1, max_entities)
    tids = sorted(rng.sample(range(0, 40), n_ent))
    catalog = tuple(EntityRef(t, rng.choice(CATEGORIES)) for t in tids)
    width, height = 640, 480
    traj = {}
    for e in catalog:
        density = rng.random()
        start = rng.randrange(frame_count)
        stop = rng.randint(start + 1, frame_count)
        for fid in range(start, stop):
            if rng.random() < density:
                x1, y1 = rng.randrange(0, 600), rng.randrange(0, 440)
                traj[(e.tid, fid)] = BBox(x1, y1, rng.randint(x1 + 1, 640), rng.randint(y1 + 1, 480))
    relations = []
    if n_ent >= 2:
        for _ in range(rng.randint(0, max_relations)):
            h, t = rng.sample(tids, 2)
            kind = rng.choice(("spatial", "temporal"))
            pred = rng.choice(SPATIAL if kind == "spatial" else TEMPORAL)
            b = rng.randrange(frame_count)
            e = rng.randint(b + 1, frame_count)
            relations.append(RelationInstance(h, t, pred, b, e, kind))
    return NormalizedAnnotation(f"vid{rng.randrange(10**6):06d}", frame_count, catalog, traj, tuple(relations), width, height)


def random_a1(rng: random.Random, annotation: NormalizedAnnotation, num_frames: int, cap: int = 16) -> CoTask1Answer:
    labels = [e.label for e in annotation.catalog]
    entities = rng.sample(labels, rng.randint(1, len(labels)))
    order = {label: i for i, label in enumerate(labels)}
    entities.sort(key=order.get)
    ts = sorted(rng.sample(range(1, num_frames + 1), rng.randint(1, min(cap, num_frames))))
    return CoTask1Answer(tuple(entities), tuple(ts))


def to_vidor_doc(a: NormalizedAnnotation) -> dict:
    frames = [[] for _ in range(max((fid for _, fid in a.trajectories), default=-1) + 1)]
    for (tid, fid), box in sorted(a.trajectories.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        frames[fid].append({"tid": tid, "bbox": {"xmin": box.x1, "ymin": box.y1, "xmax": box.x2, "ymax": box.y2}})
    return {
        "video_id": a.video_id,
        "frame_count": a.frame_count,
        "width": a.width,
        "height": a.height,
        "subject/objects": [{"tid": e.tid, "category": e.category} for e in a.catalog],
        "trajectories": frames,
        "relation_instances": [
            {
                "subject_tid": r.head_tid,
                "object_tid": r.tail_tid,
                "predicate": r.predicate,
                "begin_fid": r.begin_fid,
                "end_fid": r.end_fid,
            }
            for r in a.relations
        ],
    }


# ---------------------------------------------------------------------------
# brute-force oracles: direct transcriptions of the set definitions, no bisect


def oracle_sample(frame_count: int, k: int) -> list[int]:
    if frame_count < k:
        return list(range(frame_count))
    return [(i * frame_count) // k for i in range(k)]


def oracle_span(begin: int, end: int, orig: list[int]):
    s = [t for t in range(1, len(orig) + 1) if begin <= orig[t - 1] < end]
    return (min(s), max(s)) if s else None


def oracle_cotask2(a1: CoTask1Answer, annotation: NormalizedAnnotation, orig: list[int]):
    tid_of = {e.label: e.tid for e in annotation.catalog}
    out = []
    for t in sorted(a1.timestamps):
        objects = []
        for label in a1.entities:
            for (tid, fid), box in annotation.trajectories.items():
                if tid == tid_of[label] and fid == orig[t - 1]:
                    objects.append(TrackedObject(label, box))
        out.append(FrameRecord(t, tuple(objects)))
    return tuple(out)


def oracle_relations(a1: CoTask1Answer, annotation: NormalizedAnnotation, orig: list[int], kind: str):
    label_of = {e.tid: e.label for e in annotation.catalog}
    found = set()
    for r in annotation.relations:
        if r.kind != kind:
            continue
        span = oracle_span(r.begin_fid, r.end_fid, orig)
        if span is None:
            continue
        head, tail = label_of[r.head_tid], label_of[r.tail_tid]
        if head not in a1.entities or tail not in a1.entities:
            continue
        if not any(span[0] <= t <= span[1] for t in a1.timestamps):
            continue
        found.add(RelationRecord(head, r.predicate, tail, span[0], span[1]))
    return tuple(sorted(found, key=lambda x: (x.start_frame, x.head, x.relation, x.tail, x.end_frame)))


# ---------------------------------------------------------------------------
# mock chat-completions endpoint


def last_user_texts(payload: dict) -> list[str]:
    content = payload["messages"][-1]["content"]
    return [c["text"] for c in content if c.get("type") == "text"]


def judge_exact(payload: dict) -> str:
    """5 when the response equals the reference answer, else 1."""
    text = next(t for t in last_user_texts(payload) if "### Your Turn:" in t)
    turn = text.rsplit("### Your Turn:", 1)[1]
    m = re.search(r"\nAnswer: (.*)\nResponse: (.*)\Z", turn.rstrip("\n"), re.S)
    return "5" if m and m.group(1).strip() == m.group(2).strip() else "1"


def echo_from(answers: dict[str, str]):
    """Echo model: answers Q0 (read from the final-answer prompt) with its reference answer."""

    def respond(payload: dict) -> str:
        text = last_user_texts(payload)[0]
        m = re.search(r"^Q0: (.*)$", text, re.M)
        return answers.get(m.group(1), "unknown") if m else "unknown"

    return respond


class MockEndpoint:
    """Threaded HTTP server speaking the chat-completions wire format.

    ``responders`` maps a model name to ``payload -> text``.  ``fail`` maps a
    model name to a list of HTTP statuses returned before succeeding.
    """

    def __init__(self, responders: dict, fail: dict | None = None, delay: float = 0.0):
        self.responders = responders
        self.fail = {k: list(v) for k, v in (fail or {}).items()}
        self.delay = delay
        self.calls: list[dict] = []
        self.lock = threading.Lock()
        self.in_flight = 0
        self.peak = 0
        endpoint = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                status, reply = endpoint.handle(body, self.headers.get("Authorization"))
                data = json.dumps(reply).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.server.daemon_threads = True
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.server.server_address[1]}/v1"

    def handle(self, body, auth):
        import time

        with self.lock:
            self.calls.append(body)
            self.in_flight += 1
            self.peak = max(self.peak, self.in_flight)
            queue = self.fail.get(body["model"])
            status = queue.pop(0) if queue else 200
        try:
            if self.delay:
                time.sleep(self.delay)
            if auth != "Bearer test-key":
                return 401, {"error": {"message": "bad key"}}
            if status != 200:
                return status, {"error": {"message": f"injected {status}"}}
            text = self.responders[body["model"]](body)
            return 200, {
                "choices": [{"message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
                "usage": {"prompt_tokens": 1, "completion_tokens": 1},
            }
        finally:
            with self.lock:
                self.in_flight -= 1

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


class FakeTransport:
    """In-process transport: ``script`` is a list of (status, text-or-None) or exceptions, consumed in order."""

    def __init__(self, responder=None, script=None):
        self.responder = responder
        self.script = list(script or [])
        self.calls = []
        self.lock = threading.Lock()

    def __call__(self, url, headers, payload, timeout):
        with self.lock:
            self.calls.append(payload)
            step = self.script.pop(0) if self.script else None
        if isinstance(step, Exception):
            raise step
        if step is not None and step[0] != 200:
            return step[0], {"error": "scripted"}
        text = step[1] if step is not None else self.responder(payload)
        return 200, {"choices": [{"message": {"content": text}, "finish_reason": "stop"}], "usage": {}}


# ---------------------------------------------------------------------------
# on-disk NeXT-QA-shaped corpus


def corpus_question(i: int) -> tuple[str, str]:
    """Unique question / answer text for question ``i`` (the echo mock keys on the question)."""
    return f"what does the adult do with the handbag in clip {i}?", f"answer number {i}"


def write_nextqa_corpus(root, n_videos: int, split_sizes: dict[str, int], endpoint_url: str = "http://127.0.0.1:9/v1"):
    """Write VidOR documents, split CSVs and a config; returns (config path, {question: answer})."""
    import csv
    from pathlib import Path

    import yaml

    root = Path(root)
    (root / "vidor").mkdir(parents=True)
    base = handbag_annotation()
    for v in range(n_videos):
        doc = to_vidor_doc(base)
        doc["video_id"] = f"v{v:05d}"
        (root / "vidor" / f"v{v:05d}.json").write_text(json.dumps(doc), encoding="utf-8")
    answers = {}
    splits = {}
    i = 0
    for name, size in split_sizes.items():
        path = root / f"{name}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["video", "frame_count", "width", "height", "question", "answer", "qid", "type", "a0", "a1", "a2", "a3", "a4"])
            for j in range(size):
                question, answer = corpus_question(i)
                answers[question] = answer
                options = [f"distractor {i}.{n}" for n in range(5)]
                correct = i % 5
                options[correct] = answer
                qtype = ("CW", "CH", "TP", "TC", "TN", "DC", "DL", "DO")[i % 8]
                w.writerow([f"v{i % n_videos:05d}", 64, 640, 360, question, correct, j, qtype, *options])
                i += 1
        splits[name] = path.name
    endpoints = {
        role: {"base_url": endpoint_url, "model": f"{role}-model", "backoff_base": 0.0, "max_retries": 1}
        for role in ("subject", "judge")
    }
    cfg = {
        "dataset": {"source": "nextqa", "splits": splits, "annotations": "vidor"},
        "grounding": "lexical",
        "endpoints": endpoints,
        "cache_dir": "cache",
        "max_in_flight": 8,
    }
    path = root / "config.yaml"
    path.write_text(yaml.safe_dump(cfg, sort_keys=False), encoding="utf-8")
    return path, answers
