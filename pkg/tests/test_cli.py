import json

import pytest
import yaml

from support import MockEndpoint, echo_from, judge_exact, write_nextqa_corpus
from vqadecomp.cli import main
from vqadecomp.pipeline import read_jsonl


@pytest.fixture
def corpus(tmp_path):
    cfg, answers = write_nextqa_corpus(tmp_path / "data", 10, {"train": 15, "val": 10})
    return cfg, answers


def point_at(cfg_path, url):
    doc = yaml.safe_load(cfg_path.read_text())
    for ep in doc["endpoints"].values():
        ep["base_url"] = url
    cfg_path.write_text(yaml.safe_dump(doc))


def test_build_writes_counts_and_files(corpus, tmp_path, capsys):
    cfg, _ = corpus
    out = tmp_path / "build"
    assert main(["build", "-c", str(cfg), "-o", str(out)]) == 0
    table = capsys.readouterr().out
    assert "CoTasks" in table and "100" in table
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["counts"] == {"original": 25, "filtered": 25, "quarantined": 0, "instances": 100}
    assert len(read_jsonl(out / "cotasks.train.jsonl")) == 60
    assert len(read_jsonl(out / "cotasks.val.jsonl")) == 40
    assert len(read_jsonl(out / "normalized.jsonl")) == 10
    assert read_jsonl(out / "quarantine.jsonl") == []
    # refuses to overwrite
    assert main(["build", "-c", str(cfg), "-o", str(out)]) == 2


def test_build_quarantines_missing_videos(corpus, tmp_path):
    cfg, _ = corpus
    (cfg.parent / "vidor" / "v00003.json").unlink()
    out = tmp_path / "build"
    assert main(["build", "-c", str(cfg), "-o", str(out)]) == 0
    q = read_jsonl(out / "quarantine.jsonl")
    assert {r["code"] for r in q} == {"VIDEO_UNAVAILABLE"}
    stats = json.loads((out / "stats.json").read_text())
    assert stats["total"]["filtered"] == 25 - len(q)
    assert stats["total"]["instances"] == 4 * stats["total"]["filtered"]


def test_stats_and_validate(corpus, tmp_path, capsys):
    cfg, _ = corpus
    out = tmp_path / "build"
    main(["build", "-c", str(cfg), "-o", str(out)])
    capsys.readouterr()
    assert main(["stats", str(out)]) == 0
    text = capsys.readouterr().out
    assert "Filtered" in text and "val: CW=" in text
    assert main(["validate", str(out)]) == 0


def test_validate_flags_broken_chain(corpus, tmp_path, capsys):
    cfg, _ = corpus
    out = tmp_path / "build"
    main(["build", "-c", str(cfg), "-o", str(out)])
    rows = read_jsonl(out / "bundles.val.jsonl")
    rows[2]["a2"] = rows[2]["a2"][:-1]
    legacy = dict(rows[0], a1={"objects": rows[0]["a1"]["entities"], "timestamps": rows[0]["a1"]["timestamps"]})
    bad = tmp_path / "bad.jsonl"
    bad.write_text("\n".join(json.dumps(r) for r in [legacy, rows[1], rows[2]]) + "\nnot json\n")
    capsys.readouterr()
    assert main(["validate", str(bad)]) == 1
    lines = capsys.readouterr().out.splitlines()
    assert any(line.startswith(f"{bad}:3: CHAIN_MISMATCH") for line in lines)
    assert any(line.startswith(f"{bad}:4: PARSE_ERROR") for line in lines)
    assert not any(f"{bad}:1:" in line for line in lines)


def test_validate_normalized_annotations(tmp_path, capsys):
    row = {
        "schema_version": 1,
        "video_id": "v",
        "frame_count": 10,
        "width": 100,
        "height": 100,
        "catalog": [{"tid": 0, "category": "adult"}],
        "trajectories": [{"tid": 0, "fid": 12, "bbox": [0, 0, 5, 5]}],
        "relations": [],
    }
    path = tmp_path / "n.jsonl"
    path.write_text(json.dumps(row) + "\n")
    code = main(["validate", str(path)])
    out = capsys.readouterr().out
    assert code == 1 and f"{path}:1:" in out


def test_infer_judge_report_end_to_end(corpus, tmp_path, monkeypatch, capsys):
    cfg, answers = corpus
    monkeypatch.setenv("VQADECOMP_SUBJECT_API_KEY", "test-key")
    monkeypatch.setenv("VQADECOMP_JUDGE_API_KEY", "test-key")
    build = tmp_path / "build"
    main(["build", "-c", str(cfg), "-o", str(build)])
    with MockEndpoint({"subject-model": echo_from(answers), "judge-model": judge_exact}) as server:
        point_at(cfg, server.url)
        judged = []
        for cond in ("baseline", "ct14"):
            assert main(["infer", "-c", str(cfg), "-d", str(build), "--condition", cond, "-o", str(tmp_path / f"i_{cond}")]) == 0
            assert main(["judge", "-c", str(cfg), str(tmp_path / f"i_{cond}"), "-o", str(tmp_path / f"j_{cond}")]) == 0
            judged.append(str(tmp_path / f"j_{cond}"))
        capsys.readouterr()
        assert main(["report", *judged, "-o", str(tmp_path / "table")]) == 0
    text = capsys.readouterr().out
    assert text.count("100.0") == 18
    preds = read_jsonl(tmp_path / "i_baseline" / "predictions.jsonl")
    assert len(preds) == 10 and all(p["error"] is None for p in preds)


def test_missing_credentials_fail_before_network(corpus, tmp_path, monkeypatch, capsys):
    cfg, answers = corpus
    monkeypatch.delenv("VQADECOMP_SUBJECT_API_KEY", raising=False)
    build = tmp_path / "build"
    main(["build", "-c", str(cfg), "-o", str(build)])
    with MockEndpoint({"subject-model": echo_from(answers)}) as server:
        point_at(cfg, server.url)
        code = main(["infer", "-c", str(cfg), "-d", str(build), "--condition", "ct12", "-o", str(tmp_path / "i")])
        assert server.calls == []
    assert code == 2
    assert "VQADECOMP_SUBJECT_API_KEY" in capsys.readouterr().err
    assert not (tmp_path / "i").exists()


def test_judge_on_empty_predictions(tmp_path, monkeypatch):
    cfg, _ = write_nextqa_corpus(tmp_path / "data", 2, {"val": 0})
    monkeypatch.setenv("VQADECOMP_SUBJECT_API_KEY", "test-key")
    build = tmp_path / "build"
    assert main(["build", "-c", str(cfg), "-o", str(build)]) == 0
    assert main(["infer", "-c", str(cfg), "-d", str(build), "--condition", "baseline", "-o", str(tmp_path / "i")]) == 0
    assert main(["judge", "-c", str(cfg), str(tmp_path / "i"), "-o", str(tmp_path / "j")]) == 0
    rep = json.loads((tmp_path / "j" / "report.json").read_text())
    assert rep["n_scored"] == 0 and rep["overall"] is None


def test_report_refuses_runs_over_different_datasets(tmp_path, monkeypatch):
    monkeypatch.setenv("VQADECOMP_SUBJECT_API_KEY", "test-key")
    monkeypatch.setenv("VQADECOMP_JUDGE_API_KEY", "test-key")
    runs = []
    for name, size in (("a", 4), ("b", 5)):
        cfg, answers = write_nextqa_corpus(tmp_path / f"data_{name}", 2, {"val": size})
        main(["build", "-c", str(cfg), "-o", str(tmp_path / f"build_{name}")])
        with MockEndpoint({"subject-model": echo_from(answers), "judge-model": judge_exact}) as server:
            point_at(cfg, server.url)
            main(["infer", "-c", str(cfg), "-d", str(tmp_path / f"build_{name}"), "--condition", "baseline", "-o", str(tmp_path / f"i_{name}")])
            main(["judge", "-c", str(cfg), str(tmp_path / f"i_{name}"), "-o", str(tmp_path / f"j_{name}")])
        runs.append(str(tmp_path / f"j_{name}"))
    assert main(["report", *runs, "-o", str(tmp_path / "table")]) == 2


def test_bad_condition_and_bad_config(corpus, tmp_path, capsys):
    cfg, _ = corpus
    build = tmp_path / "build"
    main(["build", "-c", str(cfg), "-o", str(build)])
    assert main(["infer", "-c", str(cfg), "-d", str(build), "--condition", "ct99", "-o", str(tmp_path / "i")]) == 3
    bad = tmp_path / "bad.yaml"
    bad.write_text("nonsense: 1\n")
    assert main(["build", "-c", str(bad), "-o", str(tmp_path / "b2")]) == 2
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_star_build(tmp_path):
    doc = {
        "video_id": "6H78U",
        "frame_count": 93,
        "object_classes": {"p001": "person", "o005": "laptop"},
        "relationship_classes": {"r001": "holding"},
        "questions": [
            {
                "question_id": "Interaction_T1_13",
                "question": "Which object was picked up by the person?",
                "answer": "The laptop.",
                "choices": [{"choice_id": i, "choice": c} for i, c in enumerate(["The book.", "The cup.", "The laptop.", "The box."])],
                "situations": {
                    str(f): {"bbox_labels": ["p001", "o005"], "bbox": [[10, 10, 300, 400], [100, 50, 200, 120]], "rel_pairs": [["p001", "o005"]], "rel_labels": ["r001"]}
                    for f in (0, 4, 92)
                },
            }
        ],
    }
    (tmp_path / "star.json").write_text(json.dumps(doc))
    (tmp_path / "config.yaml").write_text(yaml.safe_dump({"dataset": {"source": "star", "splits": {"val": "star.json"}}}))
    out = tmp_path / "build"
    assert main(["build", "-c", str(tmp_path / "config.yaml"), "-o", str(out)]) == 0
    (bundle,) = read_jsonl(out / "bundles.val.jsonl")
    assert bundle["a0"] == "The laptop." and bundle["provenance"] == "star_direct"
    assert bundle["a1"]["entities"] == ["0_laptop", "1_person"]
    assert bundle["a3"] == [] and bundle["a4"][0]["relation"] == "holding"
    assert main(["validate", str(out)]) == 0
