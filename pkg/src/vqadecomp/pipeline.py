"""Corpus loading and the build / infer / judge / report steps over run directories.

Every step writes into a fresh directory and never touches its inputs.  All
files are written deterministically; the only run-specific value is the
``created_at`` field of ``manifest.json``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import __version__
from .annotation import (
    NEXTQA_QTYPES,
    AnnotationError,
    NormalizedAnnotation,
    PredicateVocabulary,
    QARecord,
    load_star_corpus,
    parse_vidor,
    validate_qa,
    write_normalized,
)
from .config import PipelineConfig
from .cotask import (
    ConstructionError,
    CoTaskBundle,
    construct_bundle,
    default_synonyms,
    expand,
    load_synonyms,
)
from .evaluation import (
    Prediction,
    ScoreReport,
    aggregate,
    frame_files,
    judge,
    parse_condition,
    report,
    run_condition,
)
from .gateway import Gateway
from .timeline import ReindexedAnnotation, reindex, uniform_sample

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"


class RunDirError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# small I/O helpers


def dumps(value) -> str:
    return json.dumps(value, ensure_ascii=False, separators=(",", ":"))


def write_jsonl(path: Path, rows: Iterable) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(dumps(row) + "\n")
            n += 1
    return n


def read_jsonl(path: Path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_json(path: Path, value) -> None:
    path.write_text(json.dumps(value, ensure_ascii=False, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def fresh_dir(path: str | Path) -> Path:
    path = Path(path)
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        raise RunDirError(f"output directory {path} already exists and is not empty")
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(out: Path, command: str, cfg: PipelineConfig | None, **fields) -> dict:
    manifest = {
        "command": command,
        "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "config_digest": cfg.digest if cfg else None,
        "version": __version__,
        **fields,
    }
    write_json(out / MANIFEST, manifest)
    return manifest


def read_manifest(run_dir: str | Path) -> dict:
    path = Path(run_dir) / MANIFEST
    try:
        return json.loads(path.read_text("utf-8"))
    except FileNotFoundError:
        raise RunDirError(f"{run_dir} is not a run directory (no {MANIFEST})") from None


# ---------------------------------------------------------------------------
# corpus loading


def load_nextqa_csv(
    path: str | Path,
    *,
    video_map: Mapping[str, str] | None = None,
    strict: bool = False,
    quarantine: list | None = None,
) -> list[QARecord]:
    """Read a NeXT-QA split CSV; the answer is the text of the correct option."""
    quarantine = quarantine if quarantine is not None else []
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"video", "question", "answer", "qid", "type"}
        missing = required - set(reader.fieldnames or ())
        if missing:
            raise AnnotationError(f"missing column(s) {sorted(missing)}", path, "header")
        for lineno, row in enumerate(reader, 2):
            loc = f"line {lineno}"
            video = row["video"].strip()
            qid = f"{video}_{row['qid'].strip()}"
            try:
                idx = int(row["answer"])
                answer = row[f"a{idx}"].strip()
            except (KeyError, ValueError, TypeError, AttributeError):
                problem = ("ANSWER_INVALID", f"answer {row.get('answer')!r} does not select an option")
            else:
                vid = str(video_map.get(video, video)) if video_map else video
                record = QARecord(qid, vid, row["question"].strip(), answer, row["type"].strip(), "nextqa")
                violations = validate_qa(record)
                if not violations:
                    out.append(record)
                    continue
                problem = (violations[0].code, violations[0].message)
            if strict:
                raise AnnotationError(f"{problem[0]}: {problem[1]}", path, loc)
            quarantine.append({"path": str(path), "location": loc, "qid": qid, "code": problem[0], "message": problem[1]})
    return out


def index_vidor(
    root: str | Path,
    *,
    vocab: PredicateVocabulary | None = None,
    strict: bool = False,
    quarantine: list | None = None,
) -> dict[str, NormalizedAnnotation]:
    """Parse every ``*.json`` below ``root`` and key the annotations by video id."""
    quarantine = quarantine if quarantine is not None else []
    out: dict[str, NormalizedAnnotation] = {}
    for path in sorted(Path(root).rglob("*.json")):
        try:
            ann = parse_vidor(path, vocab=vocab, strict=strict, quarantine=quarantine)
        except AnnotationError as exc:
            if strict:
                raise
            quarantine.append(
                {"path": str(path), "location": exc.location, "code": type(exc).__name__, "message": exc.reason}
            )
            continue
        if ann.video_id in out:
            msg = f"video {ann.video_id} annotated twice"
            if strict:
                raise AnnotationError(msg, path)
            quarantine.append({"path": str(path), "location": None, "code": "VIDEO_DUPLICATE", "message": msg})
            continue
        out[ann.video_id] = ann
    return out


# ---------------------------------------------------------------------------
# build


@dataclass
class SplitResult:
    name: str
    original: int = 0
    bundles: list[CoTaskBundle] = field(default_factory=list)
    quarantined: list[dict] = field(default_factory=list)

    @property
    def videos(self) -> set[str]:
        return {b.video_id for b in self.bundles}


@dataclass
class BuildResult:
    splits: list[SplitResult]
    annotations: dict[str, NormalizedAnnotation]
    parse_quarantine: list[dict]
    _expanded: dict = field(default_factory=dict, repr=False)

    def expanded(self, split: SplitResult) -> tuple[list[dict], dict]:
        """CoTask instances of a split, rendered once and reused."""
        if split.name not in self._expanded:
            self._expanded[split.name] = expand(split.bundles)
        return self._expanded[split.name]

    def stats(self) -> dict:
        per_split = {}
        for s in self.splits:
            _, counts = self.expanded(s)
            per_split[s.name] = {
                "original": s.original,
                "filtered": len(s.bundles),
                "quarantined": len(s.quarantined),
                "instances": counts["instances"],
                "videos": counts["videos"],
            }
        return {
            "splits": per_split,
            "videos_original": len({v for s in self.splits for v in self._original_videos(s)}),
            "videos": len({v for s in self.splits for v in s.videos}),
            "total": {
                key: sum(v[key] for v in per_split.values())
                for key in ("original", "filtered", "quarantined", "instances")
            },
        }

    def _original_videos(self, split: SplitResult):
        return split.videos | {q["video_id"] for q in split.quarantined if q.get("video_id")}


def stats_table(stats: Mapping) -> str:
    """Plain-text table in the layout of the dataset statistics tables."""
    names = list(stats["splits"])
    header = ["Dataset", "Video", *[n.capitalize() for n in names], "Total"]
    rows = [
        ["Original", stats["videos_original"], *[stats["splits"][n]["original"] for n in names], stats["total"]["original"]],
        ["Filtered", stats["videos"], *[stats["splits"][n]["filtered"] for n in names], stats["total"]["filtered"]],
        ["CoTasks", stats["videos"], *[stats["splits"][n]["instances"] for n in names], stats["total"]["instances"]],
    ]
    cells = [header] + [[r[0], *(f"{v:,}" for v in r[1:])] for r in rows]
    widths = [max(len(str(r[i])) for r in cells) for i in range(len(header))]
    lines = ["  ".join(str(c).rjust(w) if i else str(c).ljust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


class Builder:
    """Turns (annotation, question) pairs into bundles with the configured grounding."""

    def __init__(self, cfg: PipelineConfig, gateway: Gateway | None = None):
        self.cfg = cfg
        self.vocab = PredicateVocabulary.from_file(cfg.predicates) if cfg.predicates else PredicateVocabulary.default()
        self.synonyms = load_synonyms(cfg.synonyms) if cfg.synonyms else default_synonyms()
        self.gateway = gateway
        self._reindexed: dict[str, ReindexedAnnotation] = {}
        if cfg.grounding == "llm":
            if gateway is None:
                raise ValueError("llm grounding needs a gateway")
            gateway.check_credentials([cfg.model_id("grounder")])

    def reindexed(self, ann: NormalizedAnnotation) -> ReindexedAnnotation:
        r = self._reindexed.get(ann.video_id)
        if r is None:
            r = self._reindexed[ann.video_id] = reindex(ann, uniform_sample(ann.frame_count, self.cfg.k))
        return r

    def one(self, record: QARecord, ann: NormalizedAnnotation) -> CoTaskBundle:
        r = self.reindexed(ann)
        kw = {}
        if self.cfg.grounding == "llm":
            kw = dict(
                gateway=self.gateway,
                model_id=self.cfg.model_id("grounder"),
                frame_files=frame_files(self.cfg.frames, ann.video_id, r.num_frames),
                temperature=self.cfg.endpoints["grounder"].temperature,
            )
        return construct_bundle(
            record,
            r,
            mode=self.cfg.grounding,
            vocab=self.vocab,
            synonyms=self.synonyms,
            cap=self.cfg.timestamp_cap,
            **kw,
        )

    def split(self, name: str, pairs: Sequence[tuple[QARecord, NormalizedAnnotation | None]]) -> SplitResult:
        result = SplitResult(name, original=len(pairs))
        for ann in {a.video_id: a for _, a in pairs if a is not None}.values():
            self.reindexed(ann)

        def work(pair):
            record, ann = pair
            if ann is None:
                return ConstructionError(record.qid, f"no annotation for video {record.video_id}", "VIDEO_UNAVAILABLE")
            try:
                return self.one(record, ann)
            except ConstructionError as exc:
                return exc

        if self.cfg.grounding == "llm" and len(pairs) > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.max_in_flight) as pool:
                outcomes = list(pool.map(work, pairs))
        else:
            outcomes = [work(p) for p in pairs]
        for (record, _), out in zip(pairs, outcomes):
            if isinstance(out, CoTaskBundle):
                result.bundles.append(out)
            else:
                result.quarantined.append(
                    {"split": name, "qid": record.qid, "video_id": record.video_id, "code": out.code, "message": out.reason}
                )
        return result


def build_dataset(cfg: PipelineConfig, gateway: Gateway | None = None) -> BuildResult:
    builder = Builder(cfg, gateway)
    parse_q: list[dict] = []
    splits = []
    if cfg.source == "nextqa":
        if cfg.annotations is None:
            raise ValueError("dataset.annotations (VidOR directory) is required for nextqa")
        annotations = index_vidor(cfg.annotations, vocab=builder.vocab, strict=cfg.strict, quarantine=parse_q)
        video_map = json.loads(cfg.video_map.read_text("utf-8")) if cfg.video_map else None
        for name, path in cfg.splits.items():
            records = load_nextqa_csv(path, video_map=video_map, strict=cfg.strict, quarantine=parse_q)
            splits.append(builder.split(name, [(r, annotations.get(r.video_id)) for r in records]))
    else:
        annotations = {}
        for name, path in cfg.splits.items():
            pairs = []
            for ann, records in load_star_corpus(path, vocab=builder.vocab, strict=cfg.strict, quarantine=parse_q):
                annotations[ann.video_id] = ann
                pairs.extend((r, ann) for r in records)
            splits.append(builder.split(name, pairs))
    return BuildResult(splits, annotations, parse_q)


def write_build(result: BuildResult, out: str | Path, cfg: PipelineConfig) -> dict:
    out = fresh_dir(out)
    used = {b.video_id for s in result.splits for b in s.bundles}
    write_normalized(out / "normalized.jsonl", [a for v, a in result.annotations.items() if v in used])
    files = {}
    for s in result.splits:
        write_jsonl(out / f"bundles.{s.name}.jsonl", (b.to_dict() for b in s.bundles))
        instances, _ = result.expanded(s)
        write_jsonl(out / f"cotasks.{s.name}.jsonl", instances)
        files[s.name] = {
            "bundles": file_digest(out / f"bundles.{s.name}.jsonl"),
            "cotasks": file_digest(out / f"cotasks.{s.name}.jsonl"),
        }
    quarantine = list(result.parse_quarantine) + [q for s in result.splits for q in s.quarantined]
    write_jsonl(out / "quarantine.jsonl", quarantine)
    stats = result.stats()
    write_json(out / "stats.json", stats)
    (out / "stats.txt").write_text(stats_table(stats), encoding="utf-8")
    write_manifest(
        out,
        "build",
        cfg,
        source=cfg.source,
        grounding=cfg.grounding,
        k=cfg.k,
        timestamp_cap=cfg.timestamp_cap,
        splits=list(stats["splits"]),
        counts=stats["total"],
        files=files,
    )
    return stats


def load_bundles(build_dir: str | Path, split: str | None = None) -> tuple[str, list[CoTaskBundle]]:
    """Bundles of one split of a build; defaults to ``val`` or the only split."""
    build_dir = Path(build_dir)
    manifest = read_manifest(build_dir)
    names = manifest.get("splits", [])
    if split is None:
        if "val" in names:
            split = "val"
        elif len(names) == 1:
            split = names[0]
        else:
            raise RunDirError(f"choose a split with --split (available: {', '.join(names)})")
    if split not in names:
        raise RunDirError(f"split {split!r} not in build (available: {', '.join(names)})")
    rows = read_jsonl(build_dir / f"bundles.{split}.jsonl")
    return split, [CoTaskBundle.from_dict(r) for r in rows]


# ---------------------------------------------------------------------------
# evaluation steps


def make_gateway(cfg: PipelineConfig, roles: Sequence[str], transport=None) -> Gateway:
    return Gateway(
        cfg.gateway_endpoints(roles),
        cache_dir=cfg.cache_dir,
        transport=transport,
        max_in_flight=cfg.max_in_flight,
    )


def infer_run(
    build_dir: str | Path,
    cfg: PipelineConfig,
    condition: str,
    out: str | Path,
    gateway: Gateway,
    *,
    split: str | None = None,
) -> list[Prediction]:
    cond = parse_condition(condition)
    model_id = cfg.model_id("subject")
    gateway.check_credentials([model_id])
    split, bundles = load_bundles(build_dir, split)
    out = fresh_dir(out)
    predictions = run_condition(
        bundles,
        cond,
        model_id,
        gateway,
        frames_root=cfg.frames,
        max_in_flight=cfg.max_in_flight,
        temperature=cfg.endpoints["subject"].temperature,
    )
    write_jsonl(out / "dataset.jsonl", (b.to_dict() for b in bundles))
    write_jsonl(out / "predictions.jsonl", (p.to_dict() for p in predictions))
    write_manifest(
        out,
        "infer",
        cfg,
        condition=cond.id,
        model_id=model_id,
        split=split,
        dataset_digest=file_digest(out / "dataset.jsonl"),
        n_predictions=len(predictions),
        n_errors=sum(p.error is not None for p in predictions),
    )
    return predictions


def judge_run(infer_dir: str | Path, cfg: PipelineConfig, out: str | Path, gateway: Gateway) -> ScoreReport:
    infer_dir = Path(infer_dir)
    manifest = read_manifest(infer_dir)
    if manifest.get("command") != "infer":
        raise RunDirError(f"{infer_dir} is not an infer run")
    judge_model = cfg.model_id("judge")
    bundles = {b.qid: b for b in (CoTaskBundle.from_dict(r) for r in read_jsonl(infer_dir / "dataset.jsonl"))}
    predictions = [Prediction.from_dict(r) for r in read_jsonl(infer_dir / "predictions.jsonl")]
    if predictions:
        gateway.check_credentials([judge_model])
    else:
        logger.warning("no predictions in %s; writing an empty report", infer_dir)
    out = fresh_dir(out)
    records = judge(
        predictions,
        bundles,
        gateway,
        judge_model,
        max_in_flight=cfg.max_in_flight,
        temperature=cfg.endpoints["judge"].temperature,
    )
    rep = aggregate(records, star_threshold=cfg.star_threshold)
    if not records:
        rep = ScoreReport(manifest["condition"], manifest["model_id"], {}, {}, None, {}, 0, 0)
    write_jsonl(out / "records.jsonl", (r.to_dict() for r in records))
    write_json(out / "report.json", rep.to_dict())
    (out / "report.txt").write_text(report([rep])["text"], encoding="utf-8")
    write_manifest(
        out,
        "judge",
        cfg,
        condition=manifest["condition"],
        model_id=manifest["model_id"],
        judge_model=judge_model,
        split=manifest.get("split"),
        dataset_digest=manifest["dataset_digest"],
        n_records=len(records),
        n_invalid=rep.n_invalid,
    )
    return rep


def report_runs(judge_dirs: Sequence[str | Path], out: str | Path) -> dict:
    manifests = [read_manifest(d) for d in judge_dirs]
    for d, m in zip(judge_dirs, manifests):
        if m.get("command") != "judge":
            raise RunDirError(f"{d} is not a judge run")
    digests = {m["dataset_digest"] for m in manifests}
    if len(digests) > 1:
        raise RunDirError("runs were evaluated on different datasets; refusing to compare")
    reports = [ScoreReport.from_dict(json.loads((Path(d) / "report.json").read_text("utf-8"))) for d in judge_dirs]
    table = report(reports)
    out = fresh_dir(out)
    write_json(out / "table.json", {"columns": table["columns"], "rows": table["rows"]})
    (out / "table.txt").write_text(table["text"], encoding="utf-8")
    write_manifest(
        out,
        "report",
        None,
        runs=[{"condition": m["condition"], "model_id": m["model_id"]} for m in manifests],
        dataset_digest=digests.pop() if digests else None,
    )
    return table


def qtype_counts(bundles: Iterable[CoTaskBundle]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for b in bundles:
        counts[b.qtype] = counts.get(b.qtype, 0) + 1
    order = {q: i for i, q in enumerate(NEXTQA_QTYPES)}
    return dict(sorted(counts.items(), key=lambda kv: (order.get(kv[0], len(order)), kv[0])))
