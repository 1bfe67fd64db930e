"""Command-line surface: every documented subcommand plus exit codes."""

import json

import pytest
from click.testing import CliRunner

from mmforge import pipeline as pipe
from mmforge.cli import main
from mmforge.corpus import write_records_jsonl
from mmforge.fixture_corpus import build_fixture_corpus

from conftest import simple_record


@pytest.fixture()
def runner():
    return CliRunner()


def test_taxonomy_validate_bundled(runner):
    result = runner.invoke(main, ["taxonomy", "validate"])
    assert result.exit_code == 0
    assert "6 categories" in result.output
    assert "198 sub-tasks" in result.output


def test_taxonomy_validate_rejects_bad_asset(runner, tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("Coarse Perception\n  F\n    x\n    x\n")
    result = runner.invoke(main, ["taxonomy", "validate", str(bad)])
    assert result.exit_code == 2


def test_fixtures_corpus_and_run_resume(runner, tmp_path):
    corpus_dir = tmp_path / "corpus"
    result = runner.invoke(main, ["fixtures", "corpus", "--out",
                                  str(corpus_dir), "--seed", "5"])
    assert result.exit_code == 0
    assert "200 rows" in result.output

    result = runner.invoke(main, ["run", "-c", str(corpus_dir / "config.yaml")])
    assert result.exit_code == 0, result.output
    assert "complete" in result.output

    run_dir = corpus_dir / "runs" / "fixture-run"
    assert (run_dir / pipe.A_REPORT_JSON).exists()

    result = runner.invoke(main, ["resume", "fixture-run", "--root",
                                  str(corpus_dir / "runs")])
    assert result.exit_code == 0
    assert "skipped" in result.output

    # single resumable substage, forced
    result = runner.invoke(main, ["synth", "judge", "--run-dir",
                                  str(run_dir), "--force"])
    assert result.exit_code == 0

    result = runner.invoke(main, ["report", "--run-dir", str(run_dir)])
    assert result.exit_code == 0
    assert "records per training stage" in result.output


def test_run_with_missing_config_is_config_error(runner, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("sources: []\n")
    result = runner.invoke(main, ["run", "-c", str(bad)])
    assert result.exit_code == 2


def test_map_build_and_select(runner, tmp_path):
    seeds = tmp_path / "seeds.jsonl"
    rows = [
        {"image": {"image_id": "a" * 32, "uri": "i/a.png", "width": 8,
                   "height": 8, "format": "PNG"},
         "image_tags": ["cat", "dog"],
         "question": "q?", "answer": "a.",
         "instruction_tag": "Coarse Perception/Image Scene/Identify weather condition"},
        {"image": {"image_id": "b" * 32, "uri": "i/b.png", "width": 8,
                   "height": 8, "format": "PNG"},
         "image_tags": ["cat"],
         "question": "q2?", "answer": "a2.",
         "instruction_tag": "Logic Reasoning/Future Prediction/Action Prediction"},
    ]
    seeds.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    mapping_path = tmp_path / "mapping.jsonl"
    result = runner.invoke(main, ["map", "build", "--seeds", str(seeds),
                                  "--out", str(mapping_path)])
    assert result.exit_code == 0, result.output
    assert "2 units" in result.output

    result = runner.invoke(main, ["map", "select", "--mapping",
                                  str(mapping_path), "--tags", "cat,dog", "-k", "2"])
    assert result.exit_code == 0
    assert "Identify weather condition" in result.output


def test_dedup_command(runner, tmp_path):
    records = [simple_record(i) for i in range(3)]
    records.append(records[0])
    src = tmp_path / "in.jsonl"
    out = tmp_path / "out.jsonl"
    write_records_jsonl(src, records)
    result = runner.invoke(main, ["dedup", "--input", str(src),
                                  "--output", str(out),
                                  "--near-dup-threshold", "4"])
    assert result.exit_code == 0, result.output
    assert "exact: dropped 1/4" in result.output


def test_manifest_command(runner, tmp_path):
    records = [simple_record(i) for i in range(9)]
    src = tmp_path / "corpus.jsonl"
    write_records_jsonl(src, records)
    out_dir = tmp_path / "manifests"
    result = runner.invoke(main, ["manifest", "--input", str(src),
                                  "--out-dir", str(out_dir),
                                  "--budget", "Stage2a=2"])
    assert result.exit_code == 0, result.output
    assert "Stage2a: 2 records" in result.output
    assert (out_dir / "manifests.json").exists()


def test_manifest_command_rejects_bad_budget(runner, tmp_path):
    src = tmp_path / "corpus.jsonl"
    write_records_jsonl(src, [simple_record(0)])
    result = runner.invoke(main, ["manifest", "--input", str(src),
                                  "--out-dir", str(tmp_path / "m"),
                                  "--budget", "StageX=2"])
    assert result.exit_code == 2
