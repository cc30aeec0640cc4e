from __future__ import annotations

import json
import sys
from pathlib import Path

import pytest
import yaml

from gazeprompt.cli import main
from gazeprompt.config import load_config
from gazeprompt.errors import ConfigError
from gazeprompt.metrics import ConfusionMatrix, metrics
from gazeprompt.pipeline import RunContext, cmd_classify, cmd_evaluate, cmd_ingest, cmd_render, cmd_run, load_predictions
from gazeprompt.synthetic import make_dataset


def edit(config: Path, **changes) -> Path:
    raw = yaml.safe_load(config.read_text())
    for dotted, value in changes.items():
        node = raw
        *parents, leaf = dotted.split("__")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    config.write_text(yaml.safe_dump(raw, sort_keys=False))
    return config


def ctx(config: Path, **kw) -> RunContext:
    cfg = load_config(config, out=kw.pop("out", None))
    cfg.validate()
    return RunContext(cfg, echo=kw.pop("echo", lambda s: None), **kw)


def files_under(path: Path) -> list[Path]:
    return sorted(p for p in path.rglob("*") if p.is_file()) if path.exists() else []


@pytest.fixture
def twenty(tmp_path) -> Path:
    """5 participants x 4 probes, zero-shot strategies only (no exemplar pool)."""
    config = make_dataset(tmp_path / "d20", n_participants=5)
    return edit(config, strategies=["direct", "heuristic_cot"], exemplars={"pool_participants": []})


# --- ingest ----------------------------------------------------------------------------------


def test_ingest_two_participants(tmp_path):
    config = make_dataset(tmp_path / "d2", n_participants=2)
    c = ctx(config)
    res = cmd_ingest(c)
    assert res.details["segments"] == 8
    doc = json.loads((c.out / "segments.json").read_text())
    assert len(doc["segments"]) == 8 and doc["config_hash"] == c.config.config_hash
    probes = json.loads((config.parent / "probes.json").read_text())
    n0 = sum(1 for p in probes if p["rating"] <= 2)
    dist = json.loads((c.out / "distribution.json").read_text())
    assert (dist["n0"], dist["n1"]) == (n0, 8 - n0)
    assert dist["p0"] == n0 / 8
    labels = json.loads((c.out / "labels.json").read_text())
    assert labels["pool"] == [f"p01:q{i}" for i in range(1, 5)]
    assert all(sid.startswith("p02:") for sid in labels["eval"])


def test_missing_probe_file_is_validation_error(dataset, capsys):
    (dataset.parent / "probes.json").unlink()
    assert main(["ingest", "--config", str(dataset)]) == 1
    assert "probes.json" in capsys.readouterr().err
    with pytest.raises(ConfigError, match="probes.json"):
        load_config(dataset).validate()


def test_malformed_gaze_row_names_file_and_line(dataset, capsys):
    log = dataset.parent / "gaze" / "p02.csv"
    lines = log.read_text().splitlines()
    lines[5] = "garbage,row"
    log.write_text("\n".join(lines) + "\n")
    assert main(["ingest", "--config", str(dataset)]) == 3
    err = capsys.readouterr().err
    assert "p02.csv" in err and "line 6" in err


# --- render ----------------------------------------------------------------------------------


def test_render_filter_selects_three(dataset):
    c = ctx(dataset)
    cmd_ingest(c)
    ids = ["p01:q1", "p02:q3", "p03:q4"]
    res = cmd_render(c, ids)
    manifests = list((c.out / "clips").rglob("clip_manifest.json"))
    assert len(manifests) == 3 and res.details["rendered"] == 3
    ids_written = {json.loads(m.read_text())["segment_id"] for m in manifests}
    assert ids_written == set(ids)


def test_render_dry_run_writes_nothing(dataset):
    c = ctx(dataset)
    cmd_ingest(c)
    before = files_under(c.out)
    lines = []
    res = cmd_render(ctx(dataset, dry_run=True, echo=lines.append))
    assert res.status == "skipped" and len(lines) == 12
    assert files_under(c.out) == before


def test_run_dry_run_creates_no_files(dataset):
    out = dataset.parent / "dry"
    assert main(["run", "--config", str(dataset), "--out", str(out), "--dry-run"]) == 0
    assert not out.exists()


def test_render_rerun_skips_up_to_date(dataset):
    c = ctx(dataset)
    cmd_ingest(c)
    first = cmd_render(c)
    assert first.details["rendered"] == 12
    stamps = {p: p.stat().st_mtime_ns for p in files_under(c.out / "clips")}
    second = cmd_render(c)
    assert second.details == {"rendered": 0, "skipped": 12, "failures": {}}
    assert second.outputs == first.outputs
    assert {p: p.stat().st_mtime_ns for p in files_under(c.out / "clips")} == stamps
    forced = cmd_render(ctx(dataset, force=True))
    assert forced.details["rendered"] == 12


def test_render_reruns_when_style_changes(dataset):
    c = ctx(dataset)
    cmd_ingest(c)
    cmd_render(c)
    edit(dataset, overlay={"radius_px": 6, "alpha": 0.45})
    assert cmd_render(ctx(dataset)).details["rendered"] == 12


# --- classify --------------------------------------------------------------------------------


def prepare(config: Path, **kw) -> RunContext:
    c = ctx(config, **kw)
    cmd_ingest(c)
    cmd_render(c)
    return c


def test_classify_twenty_segments_deterministic(twenty):
    c = prepare(twenty)
    res = cmd_classify(c)
    assert res.status == "ok"
    path = c.out / "predictions" / "direct.jsonl"
    first = path.read_bytes()
    preds = load_predictions(path)
    assert len(preds) == 20 and all(p.outcome == "parsed" for p in preds)
    cmd_classify(c)
    assert path.read_bytes() == first
    for line in first.decode().splitlines():
        assert json.loads(line)["config_hash"] == c.config.config_hash


def test_cot_predictions_carry_alignment(twenty):
    c = prepare(twenty)
    cmd_classify(c, "heuristic_cot")
    preds = load_predictions(c.out / "predictions" / "heuristic_cot.jsonl")
    assert len(preds) == 20
    assert all(isinstance(p.alignment_score, int) and 0 <= p.alignment_score <= 100 for p in preds)


def test_replay_with_one_missing_entry(twenty, capsys):
    cache = twenty.parent / "cache.jsonl"
    edit(twenty, backend__record=True, backend__cache="cache.jsonl")
    c = prepare(twenty)
    cmd_classify(c, "direct")
    lines = cache.read_text().splitlines()
    assert len(lines) == 20
    dropped = json.loads(lines[7])
    cache.write_text("\n".join(lines[:7] + lines[8:]) + "\n")

    edit(twenty, backend__kind="replay", backend__record=False)
    code = main(["classify", "--config", str(twenty), "--strategy", "direct"])
    assert code == 0
    preds = load_predictions(c.out / "predictions" / "direct.jsonl")
    assert len(preds) == 19
    failures = json.loads((c.out / "predictions" / "direct.failures.json").read_text())["failures"]
    assert len(failures) == 1
    assert failures[0]["error_type"] == "ReplayMiss"
    assert failures[0]["request_id"] == dropped["request_id"]
    assert "ReplayMiss" in capsys.readouterr().out


def test_all_requests_failing_exits_three(twenty):
    c = prepare(twenty)
    ids = json.loads((c.out / "labels.json").read_text())["eval"]
    edit(twenty, backend__mock__fail=ids)
    assert main(["classify", "--config", str(twenty), "--strategy", "direct"]) == 3


def test_unknown_strategy_is_validation_error(twenty):
    prepare(twenty)
    assert main(["classify", "--config", str(twenty), "--strategy", "few_shot:9"]) == 1


# --- evaluate --------------------------------------------------------------------------------


def test_evaluate_baselines_for_206_827(dataset, capsys):
    out = dataset.parent / "run206"
    out.mkdir()
    labels = {f"s{i:04d}": (0 if i < 206 else 1) for i in range(1033)}
    (out / "labels.json").write_text(json.dumps({"labels": labels, "pool": [], "eval": sorted(labels)}))
    edit(dataset, strategies=[], evaluation={"baselines": True, "trials": 0})
    assert main(["evaluate", "--config", str(dataset), "--out", str(out)]) == 0
    rep = json.loads((out / "report" / "report.json").read_text())
    rows = {r["name"]: r["metrics"] for r in rep["methods"]}
    table = {
        "Majority Class": (0.801, 0.400, 0.500, 0.445),
        "Proportional Random (P=Freq)": (0.681, 0.500, 0.500, 0.500),
        "Uniform Random (P=0.5)": (0.500, 0.500, 0.500, 0.450),
    }
    for name, want in table.items():
        m = rows[name]
        got = tuple(round(m[k], 3) for k in ("accuracy", "macro_precision", "macro_recall", "macro_f1"))
        assert got == want, name
    assert "Majority Class" in capsys.readouterr().out


def test_scripted_mock_reproduces_hand_computed_metrics(twenty):
    c = prepare(twenty)
    labels = json.loads((c.out / "labels.json").read_text())["labels"]
    ids = sorted(labels)
    # flip two class-1 labels and one class-0 label
    ones = [s for s in ids if labels[s] == 1][:2]
    zeros = [s for s in ids if labels[s] == 0][:1]
    script = {s: (1 - labels[s] if s in ones + zeros else labels[s]) for s in ids}
    (twenty.parent / "script.json").write_text(json.dumps(script))
    edit(twenty, strategies=["direct"], backend__mock__script="script.json")
    c = ctx(twenty)
    cmd_classify(c)
    cmd_evaluate(c)
    n1 = sum(labels.values())
    n0 = len(labels) - n1
    expected = metrics(ConfusionMatrix(((n0 - 1, 1), (2, n1 - 2))))
    row = next(r for r in json.loads((c.out / "report" / "report.json").read_text())["methods"] if r["name"] == "direct")
    assert row["confusion"] == [[n0 - 1, 1], [2, n1 - 2]]
    assert row["metrics"] == expected.as_dict()


def test_scripted_perfect_classifier_scores_one(twenty):
    c = prepare(twenty)
    labels = json.loads((c.out / "labels.json").read_text())["labels"]
    edit(twenty, strategies=["direct"], backend__mock__script=labels)
    c = ctx(twenty)
    cmd_classify(c)
    cmd_evaluate(c)
    row = next(r for r in json.loads((c.out / "report" / "report.json").read_text())["methods"] if r["name"] == "direct")
    assert all(v == 1.0 for v in row["metrics"].values())
    assert row["abstention_rate"] == 0.0


def test_evaluate_rerun_is_byte_identical(dataset):
    c = prepare(dataset)
    cmd_classify(c)
    cmd_evaluate(c)
    report_dir = c.out / "report"
    first = {p.name: p.read_bytes() for p in report_dir.iterdir()}
    cmd_evaluate(c)
    assert {p.name: p.read_bytes() for p in report_dir.iterdir()} == first
    assert set(first) == {"report.json", "report.txt", "report.png"}


# --- run -----------------------------------------------------------------------------------


def test_run_end_to_end(dataset, capsys):
    assert main(["run", "--config", str(dataset)]) == 0
    out = dataset.parent / "run"
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert [s["name"] for s in manifest["stages"]] == ["ingest", "render", "classify", "evaluate"]
    assert all(s["status"] == "ok" for s in manifest["stages"])
    assert manifest["segment_count"] == 12 and manifest["not_attempted"] == []
    assert manifest["seeds"]["strategies"]["few_shot_1"]["exemplar_seed"] == 1
    for name in ("heuristic_cot", "few_shot_1", "blind_similarity_1"):
        assert (out / "predictions" / f"{name}.jsonl").is_file()
    text = (out / "report" / "report.txt").read_text()
    assert "few_shot_1" in text


def test_injected_encoder_failure_stops_run(dataset, capsys):
    edit(dataset, render={"encoder_cmd": f"{sys.executable} -c 'import sys; sys.exit(1)' {{out}}"})
    assert main(["run", "--config", str(dataset)]) == 3
    manifest = json.loads((dataset.parent / "run" / "run_manifest.json").read_text())
    statuses = {s["name"]: s["status"] for s in manifest["stages"]}
    assert statuses == {"ingest": "ok", "render": "failed"}
    assert manifest["not_attempted"] == ["classify", "evaluate"]
    assert "not attempted" in capsys.readouterr().out


def test_working_encoder_produces_clips(dataset):
    script = dataset.parent / "enc.py"
    script.write_text("import sys\nopen(sys.argv[-1], 'wb').write(b'clip')\n")
    edit(dataset, render={"encoder_cmd": f"{sys.executable} {script} {{fps}} {{frames_glob}} {{out}}"})
    assert main(["run", "--config", str(dataset)]) == 0
    clips = list((dataset.parent / "run" / "clips").rglob("clip.mp4"))
    assert len(clips) == 12


def test_two_identical_runs_have_equal_checksums(dataset):
    a = cmd_run(ctx(dataset, out=dataset.parent / "a"))
    b = cmd_run(ctx(dataset, out=dataset.parent / "b", ))
    assert a.checksum() == b.checksum()
    assert a.stage_checksums() == b.stage_checksums()


def test_workers_do_not_change_results(dataset):
    a = cmd_run(ctx(dataset, out=dataset.parent / "a"))
    cfg = load_config(dataset, out=dataset.parent / "w", workers=4)
    b = cmd_run(RunContext(cfg, echo=lambda s: None))
    assert a.checksum() == b.checksum()


def test_seed_override_changes_config_hash(dataset):
    assert load_config(dataset, seed=7).config_hash != load_config(dataset).config_hash
    assert load_config(dataset, out=Path("/elsewhere")).config_hash == load_config(dataset).config_hash
