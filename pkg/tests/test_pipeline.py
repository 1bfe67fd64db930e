"""Stage manifests, config validation, checkpoint/resume, and the offline
end-to-end run over the bundled fixture corpus."""

import json

import pytest
import yaml

from mmforge import pipeline as pipe
from mmforge.corpus import DataCategory, SubType, read_records_jsonl
from mmforge.fixture_corpus import build_fixture_corpus

from conftest import simple_record


# --- emit_manifests ------------------------------------------------------------

def comprehensive(n):
    return [simple_record(i) for i in range(n)]


def test_stage2_split_into_equal_thirds():
    manifests = {m.stage: m for m in pipe.emit_manifests(comprehensive(30))}
    counts = [manifests[s].record_count for s in ("Stage2a", "Stage2b", "Stage2c")]
    assert counts == [10, 10, 10]


def test_stage2_split_balanced_within_one():
    for n in (31, 32, 100):
        manifests = {m.stage: m for m in pipe.emit_manifests(comprehensive(n))}
        counts = [manifests[s].record_count
                  for s in ("Stage2a", "Stage2b", "Stage2c")]
        assert sum(counts) == n
        assert max(counts) - min(counts) <= 1


def test_empty_stage_manifest_with_warning(caplog):
    records = comprehensive(3)
    with caplog.at_level("WARNING"):
        manifests = {m.stage: m for m in pipe.emit_manifests(records)}
    assert manifests["Stage3"].record_count == 0
    assert any("Stage3" in message for message in caplog.messages)


def test_partition_is_exact():
    records = []
    n = 0
    for category, subtype, count in [
            (DataCategory.IMAGE_CAPTION, SubType.CAPTION, 7),
            (DataCategory.COMPREHENSIVE, SubType.GENERAL_INSTRUCTION, 11),
            (DataCategory.SELECTIVE, SubType.OCR, 5),
            (DataCategory.GPT4_AND_SYNTHETIC, SubType.GENERAL_INSTRUCTION, 4)]:
        for _ in range(count):
            records.append(simple_record(n, category, subtype))
            n += 1
    manifests = pipe.emit_manifests(records)
    assert sum(m.record_count for m in manifests) == len(records)


def test_table_ratio_partition(tmp_path):
    records = []
    n = 0
    for category, subtype, count in [
            (DataCategory.COMPREHENSIVE, SubType.GENERAL_INSTRUCTION, 258),
            (DataCategory.SELECTIVE, SubType.OCR, 60),
            (DataCategory.GPT4_AND_SYNTHETIC, SubType.GENERAL_INSTRUCTION, 30)]:
        for _ in range(count):
            records.append(simple_record(n, category, subtype))
            n += 1
    manifests = {m.stage: m for m in pipe.emit_manifests(records, out_dir=tmp_path)}
    assert manifests["Stage2a"].record_count == 86
    assert manifests["Stage2b"].record_count == 86
    assert manifests["Stage2c"].record_count == 86
    assert manifests["Stage3"].record_count == 60
    assert manifests["Stage4"].record_count == 30
    index = json.loads((tmp_path / "manifests.json").read_text())
    assert len(index["stages"]) == 6
    shard = read_records_jsonl(tmp_path / "stage3.jsonl")
    assert len(shard) == 60


def test_budget_truncation_and_overrun_warning(caplog):
    records = comprehensive(30) + [
        simple_record(100 + i, DataCategory.SELECTIVE, SubType.OCR)
        for i in range(4)]
    manifests = {m.stage: m for m in pipe.emit_manifests(
        records, budgets={"Stage2a": 3, "Stage3": 99})}
    assert manifests["Stage2a"].record_count == 3
    with caplog.at_level("WARNING"):
        pipe.emit_manifests(records, budgets={"Stage3": 99})
    assert any("exceeds available" in m for m in caplog.messages)


def test_manifest_order_is_hash_deterministic():
    records = comprehensive(12)
    a = pipe.emit_manifests(records)
    b = pipe.emit_manifests(list(reversed(records)))
    for ma, mb in zip(a, b):
        assert ma.record_count == mb.record_count


# --- config ---------------------------------------------------------------------

def write_config(tmp_path, overrides=None):
    build_fixture_corpus(tmp_path, seed=0)
    raw = yaml.safe_load((tmp_path / "config.yaml").read_text())
    raw.update(overrides or {})
    path = tmp_path / "config2.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


def test_config_validates_budget_stage_names(tmp_path):
    path = write_config(tmp_path, {"manifests": {"budgets": {"Stage9": 5}}})
    with pytest.raises(pipe.ConfigError, match="unknown stage"):
        pipe.load_config(path)


def test_config_requires_sources(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("run_id: x\nsources: []\n")
    with pytest.raises(pipe.ConfigError, match="at least one source"):
        pipe.load_config(path)


def test_config_rejects_unknown_endpoint(tmp_path):
    path = write_config(tmp_path, {"endpoints": {"mystery": {"base_url": "x"}}})
    with pytest.raises(pipe.ConfigError, match="unknown endpoint"):
        pipe.load_config(path)


def test_config_online_requires_urls(tmp_path):
    path = write_config(tmp_path, {"offline": False})
    with pytest.raises(pipe.ConfigError, match="base_url"):
        pipe.load_config(path)


def test_config_env_overrides(tmp_path, monkeypatch):
    monkeypatch.setenv(pipe.ENV_VLM_URL, "http://vlm.example:9")
    monkeypatch.setenv(pipe.ENV_VLM_KEY, "sekrit")
    monkeypatch.setenv(pipe.ENV_TAGGER_URL, "http://tag.example:9")
    monkeypatch.setenv(pipe.ENV_SCORER_URL, "http://score.example:9")
    path = write_config(tmp_path, {"offline": False})
    config = pipe.load_config(path)
    assert config.endpoints["vlm"]["base_url"] == "http://vlm.example:9"
    assert config.endpoints["vlm"]["api_key"] == "sekrit"
    assert config.endpoints["tagger"]["base_url"] == "http://tag.example:9"
    assert config.endpoints["scorer"]["base_url"] == "http://score.example:9"


def test_unknown_stage_selection_fails_before_work(tmp_path):
    path = write_config(tmp_path, {"run_id": "sel"})
    config = pipe.load_config(path)
    with pytest.raises(pipe.ConfigError, match="unknown stage"):
        pipe.run(config, stages=["not_a_stage"])


def test_unreachable_endpoint_is_config_error(tmp_path):
    path = write_config(tmp_path, {
        "offline": False,
        "endpoints": {"vlm": {"base_url": "http://127.0.0.1:1/x"},
                      "tagger": {"base_url": "http://127.0.0.1:1/x"},
                      "scorer": {"base_url": "http://127.0.0.1:1/x"}}})
    config = pipe.load_config(path)
    with pytest.raises(pipe.ConfigError, match="unreachable"):
        pipe.run(config)


# --- end-to-end offline run ---------------------------------------------------------

def test_e2e_all_stages_executed(e2e_run):
    summary = e2e_run["summary"]
    assert summary.executed == list(pipe.STAGE_NAMES)
    assert summary.skipped == []


def test_e2e_dedup_caught_planted_duplicates(e2e_run):
    run_dir = e2e_run["summary"].run_dir
    stats = json.loads((run_dir / pipe.A_DEDUP_STATS).read_text())
    assert stats["exact"]["dropped"] == 1
    assert stats["near_dup"]["dropped"] >= 1


def test_e2e_ingest_stats_conserved(e2e_run):
    run_dir = e2e_run["summary"].run_dir
    stats = json.loads((run_dir / pipe.A_INGEST_STATS).read_text())
    total = stats["total"]
    assert total["read"] == total["emitted"] + total["rejected"]
    assert total["read"] == 200
    assert total["rejected"] == 0


def test_e2e_synthesis_conservation(e2e_run):
    run_dir = e2e_run["summary"].run_dir
    raw = json.loads((run_dir / pipe.A_CANDIDATES_RAW_STATS).read_text())
    judged = json.loads((run_dir / pipe.A_CANDIDATES_STATS).read_text())
    assert raw["candidates_generated"] == (
        judged["relevant"] + judged["irrelevant"] + raw["generation_errors"])


def test_e2e_turns_match_retained_qas(e2e_run):
    run_dir = e2e_run["summary"].run_dir
    retained = [json.loads(line) for line in
                (run_dir / pipe.A_QA_RETAINED).read_text().splitlines()
                if line.strip()]
    synth = read_records_jsonl(run_dir / pipe.A_RECORDS_SYNTH)
    assert sum(len(r.turns) for r in synth) == len(retained)
    for record in synth:
        assert record.provenance.value == "synthetic"
        assert record.instruction_tags


def test_e2e_rerun_is_noop(e2e_run):
    config = e2e_run["config"]
    again = pipe.run(config)
    assert again.executed == []
    assert again.skipped == list(pipe.STAGE_NAMES)
    assert again.artifact_digests == e2e_run["summary"].artifact_digests


def test_e2e_report_fractions(e2e_run):
    run_dir = e2e_run["summary"].run_dir
    report = json.loads((run_dir / pipe.A_REPORT_JSON).read_text())
    for key in ("category", "subtype", "first_level_tag"):
        fractions = report["categories"]["fractions"][key]
        if fractions:
            assert abs(sum(fractions.values()) - 1.0) < 1e-9
    assert abs(sum(report["stages"]["fractions"].values()) - 1.0) < 1e-9
    text = (run_dir / pipe.A_REPORT_TXT).read_text()
    assert "records per training stage" in text


def test_partial_run_then_full_resume(tmp_path):
    build_fixture_corpus(tmp_path, seed=1, run_id="partial")
    config = pipe.load_config(tmp_path / "config.yaml")
    first = pipe.run(config, stages=["ingest", "dedup"])
    assert first.executed == ["ingest", "dedup"]
    # simulates a killed run: resume executes only what is missing
    second = pipe.resume(config.run_dir)
    assert second.skipped[:2] == ["ingest", "dedup"]
    assert second.executed == [s for s in pipe.STAGE_NAMES
                               if s not in ("ingest", "dedup")]


def test_resume_reruns_when_input_changes(tmp_path):
    build_fixture_corpus(tmp_path, seed=2, run_id="touch")
    config = pipe.load_config(tmp_path / "config.yaml")
    pipe.run(config, stages=["ingest"])
    source = config.sources[1].path
    text = source.read_text().splitlines()
    source.write_text("\n".join(text[:-1]) + "\n")  # drop one row
    summary = pipe.run(config, stages=["ingest"])
    assert summary.executed == ["ingest"]


def test_checkpoint_round_trip(tmp_path):
    build_fixture_corpus(tmp_path, seed=3, run_id="ckpt")
    config = pipe.load_config(tmp_path / "config.yaml")
    pipe.run(config, stages=["ingest"])
    checkpoint = pipe.Checkpoint.load(config.run_dir)
    assert checkpoint.run_id == "ckpt"
    assert checkpoint.stages["ingest"]["status"] == "done"
    assert checkpoint.stages["ingest"]["outputs"]
    restored = pipe.PipelineConfig.from_snapshot(checkpoint.config_snapshot)
    assert restored.run_id == config.run_id
    assert restored.fingerprint() == config.fingerprint()


def test_stage_failure_leaves_resumable_checkpoint(tmp_path, monkeypatch):
    build_fixture_corpus(tmp_path, seed=4, run_id="boom")
    config = pipe.load_config(tmp_path / "config.yaml")

    def explode(ctx):
        raise RuntimeError("synthetic failure")

    monkeypatch.setitem(
        pipe.__dict__, "STAGES",
        tuple(pipe.StageDef(s.name, explode if s.name == "dedup" else s.fn,
                            s.inputs, s.outputs) for s in pipe.STAGES))
    with pytest.raises(pipe.StageFailure, match="dedup"):
        pipe.run(config)
    checkpoint = pipe.Checkpoint.load(config.run_dir)
    assert checkpoint.stages["ingest"]["status"] == "done"
    assert checkpoint.stages["dedup"]["status"] == "pending"
