"""End-to-end subcommand tests driven through main() in-process."""

import json
import os
from pathlib import Path

import pytest
from conftest import FIXTURE_NODES, MockEndpoint

from musicqa.assembly import read_items_jsonl, read_shards, write_items_jsonl
from musicqa.cli import EXIT_DATA, EXIT_OK, EXIT_SERVICE, EXIT_USAGE, main
from musicqa.corpus import Source
from musicqa.llmgen import validate_qa_item
from musicqa.rulegen import Method, QAFormat, QAItem

MANIFEST_ROWS = [
    {"audio_id": "c01", "source": "FMA", "labels": ["ag", "rock"],
     "caption": "Upbeat acoustic rock."},
    {"audio_id": "c02", "source": "MusicCaps", "labels": ["piano", "jazz"],
     "caption": "Late night piano jazz."},
    {"audio_id": "c03", "source": "MTT", "labels": ["eg"]},
    {"audio_id": "c04", "source": "AudioSet", "labels": ["sp1"],
     "caption": "A person talking."},
    {"audio_id": "c05", "source": "FMA", "labels": ["drums", "pop", "folk"]},
]


@pytest.fixture
def ws(tmp_path):
    """Workspace with ontology, manifest, and a pipeline config on disk."""
    (tmp_path / "ontology.json").write_text(json.dumps(FIXTURE_NODES))
    (tmp_path / "manifest.jsonl").write_text(
        "\n".join(json.dumps(row) for row in MANIFEST_ROWS)
    )
    config = {
        "ontology": str(tmp_path / "ontology.json"),
        "manifests": [str(tmp_path / "manifest.jsonl")],
        "out_dir": str(tmp_path / "out"),
        "music_root": "Music",
        "plan": {"open": 2, "binary": 1, "mcq": 1},
        "mcq_options": 3,
        "shard_size": 10,
    }
    (tmp_path / "config.json").write_text(json.dumps(config))
    return tmp_path


def run(capsys, *argv):
    """Invoke the CLI and split its stdout into body + summary line."""
    code = main(list(argv))
    captured = capsys.readouterr()
    lines = [ln for ln in captured.out.splitlines() if ln.strip()]
    summary = json.loads(lines[-1]) if lines else None
    return code, summary, captured


def test_usage_errors(capsys):
    assert main(["no-such-command"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE
    capsys.readouterr()


def test_help_exits_zero(capsys):
    assert main(["--help"]) == EXIT_OK
    capsys.readouterr()


def test_generate_rule_end_to_end(ws, capsys):
    cfg = str(ws / "config.json")
    code, summary, cap = run(capsys, "generate-rule", "--config", cfg, "--seed", "7")
    assert code == EXIT_OK
    assert summary["command"] == "generate-rule"
    assert summary["clips"] == 4  # c04 carries no music leaf label
    assert summary["errors"] == 0
    out = Path(summary["out"])
    items = read_items_jsonl(out)
    # plan 2 open + 1 binary + 1 mcq applies per leaf label; the four music
    # clips carry 2 + 2 + 1 + 3 = 8 leaf labels
    assert len(items) == summary["items"] == 8 * 4
    for item in items:
        assert validate_qa_item(item) == []
    # generation report written next to the items
    report = json.loads(out.with_suffix(".jsonl.report.json").read_text())
    assert report["clips"] == 4
    # progress goes to stderr, never stdout
    assert "items/s" in cap.err
    assert "items/s" not in cap.out


def test_generate_rule_golden_determinism(ws, capsys):
    cfg = str(ws / "config.json")
    out1, out2 = str(ws / "a.jsonl"), str(ws / "b.jsonl")
    assert main(["generate-rule", "--config", cfg, "--seed", "11", "--out", out1]) == EXIT_OK
    assert main(["generate-rule", "--config", cfg, "--seed", "11", "--out", out2]) == EXIT_OK
    capsys.readouterr()
    assert Path(out1).read_bytes() == Path(out2).read_bytes()
    assert len(Path(out1).read_bytes()) > 0


def test_generate_rule_seed_required(ws, capsys):
    code, _, cap = run(capsys, "generate-rule", "--config", str(ws / "config.json"))
    assert code == EXIT_USAGE
    assert "seed" in cap.err


def test_generate_rule_needs_ontology(ws, capsys):
    (ws / "bare.json").write_text(json.dumps({"manifests": [str(ws / "manifest.jsonl")]}))
    code, _, cap = run(capsys, "generate-rule", "--config", str(ws / "bare.json"), "--seed", "1")
    assert code == EXIT_USAGE
    assert "ontology" in cap.err


def test_generate_rule_unknown_music_root(ws, capsys):
    config = json.loads((ws / "config.json").read_text())
    config["music_root"] = "Zither Society"
    (ws / "bad.json").write_text(json.dumps(config))
    code, _, cap = run(capsys, "generate-rule", "--config", str(ws / "bad.json"), "--seed", "1")
    assert code == EXIT_USAGE
    assert "Zither Society" in cap.err


def test_generate_rule_bad_manifest_is_data_error(ws, capsys):
    (ws / "manifest.jsonl").write_text('{"audio_id": "x"}\n')
    code, _, _ = run(capsys, "generate-rule", "--config", str(ws / "config.json"), "--seed", "1")
    assert code == EXIT_DATA


def test_generate_rule_format_filter(ws, capsys):
    cfg = str(ws / "config.json")
    out = str(ws / "only_binary.jsonl")
    code, summary, _ = run(
        capsys, "generate-rule", "--config", cfg, "--seed", "7",
        "--format-filter", "binary", "--out", out,
    )
    assert code == EXIT_OK
    items = read_items_jsonl(out)
    assert items and all(item.format is QAFormat.BINARY for item in items)


def test_generate_rule_source_filter(ws, capsys):
    cfg = str(ws / "config.json")
    out = str(ws / "fma.jsonl")
    code, _, _ = run(
        capsys, "generate-rule", "--config", cfg, "--seed", "7",
        "--source-filter", "FMA", "--out", out,
    )
    assert code == EXIT_OK
    items = read_items_jsonl(out)
    assert items and {item.audio_id for item in items} == {"c01", "c05"}


def _generate(ws, capsys, seed="7"):
    cfg = str(ws / "config.json")
    code, summary, _ = run(capsys, "generate-rule", "--config", cfg, "--seed", seed)
    assert code == EXIT_OK
    return summary["out"]


def test_assemble_end_to_end(ws, capsys):
    items_path = _generate(ws, capsys)
    cfg = str(ws / "config.json")
    code, summary, _ = run(capsys, "assemble", "--config", cfg, "--seed", "3", items_path)
    assert code == EXIT_OK
    out_dir = Path(summary["out"])
    # same clip + same category + same template yields an identical open
    # question for sibling leaves, so a few collapse
    assert summary["items"] + summary["deduped"] == 32
    assert sum(summary["splits"].values()) == summary["items"]

    recovered = []
    for split, count in summary["splits"].items():
        split_items = read_shards(out_dir / split)
        assert len(split_items) == count
        recovered.extend(split_items)
    assert len(recovered) == summary["items"]
    assert len({item.qa_id for item in recovered}) == summary["items"]

    stats = json.loads((out_dir / "stats.json").read_text())
    assert stats["grand_total"] == summary["items"]
    splits_doc = json.loads((out_dir / "splits.json").read_text())
    assert set(splits_doc) == {"c01", "c02", "c03", "c05"}
    assert set(splits_doc.values()) <= {"train", "val", "test"}
    # no audio id straddles two splits
    for item in recovered:
        assert splits_doc[item.audio_id] in summary["splits"]


def test_assemble_rerun_identical(ws, capsys):
    items_path = _generate(ws, capsys)
    cfg = str(ws / "config.json")
    for out in ("runA", "runB"):
        code, _, _ = run(
            capsys, "assemble", "--config", cfg, "--seed", "3",
            "--out", str(ws / out), items_path,
        )
        assert code == EXIT_OK
    files_a = sorted(p.relative_to(ws / "runA") for p in (ws / "runA").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(ws / "runB") for p in (ws / "runB").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (ws / "runA" / rel).read_bytes() == (ws / "runB" / rel).read_bytes()


def test_assemble_bad_split_ratio(ws, capsys):
    items_path = _generate(ws, capsys)
    config = json.loads((ws / "config.json").read_text())
    config["split"] = [0.9, 0.2, 0.1]
    (ws / "bad.json").write_text(json.dumps(config))
    code, _, _ = run(capsys, "assemble", "--config", str(ws / "bad.json"), "--seed", "3", items_path)
    assert code == EXIT_USAGE


def test_assemble_import_external(ws, capsys, tmp_path):
    items_path = _generate(ws, capsys)
    external = tmp_path / "captions.jsonl"
    external.write_text(json.dumps({
        "audio_id": "mc-1", "caption": "A solo cello piece in a large hall.",
    }) + "\n")
    cfg = str(ws / "config.json")
    code, summary, _ = run(
        capsys, "assemble", "--config", cfg, "--seed", "3",
        "--out", str(ws / "with_import"),
        "--import", f"MusicCaps={external}", items_path,
    )
    assert code == EXIT_OK
    stats = json.loads((ws / "with_import" / "stats.json").read_text())
    assert stats["per_source_task"].get("MusicCaps/Captioning") == 1


def test_assemble_import_bad_spec(ws, capsys):
    items_path = _generate(ws, capsys)
    code, _, _ = run(
        capsys, "assemble", "--config", str(ws / "config.json"), "--seed", "3",
        "--import", "nopath", items_path,
    )
    assert code == EXIT_USAGE


def test_stats_stdout_and_filters(ws, capsys):
    items_path = _generate(ws, capsys)
    code, summary, cap = run(capsys, "stats", items_path)
    assert code == EXIT_OK
    body = "\n".join(cap.out.splitlines()[:-1])
    doc = json.loads(body)
    assert doc["grand_total"] == summary["total"]
    assert doc["table"]["columns"][0] == "Audio Sources"

    # keeping only MCQ zeroes every other task but leaves MCQ counts alone
    code, _, cap = run(capsys, "stats", "--format-filter", "mcq", items_path)
    filtered = json.loads("\n".join(cap.out.splitlines()[:-1]))
    for key, count in filtered["per_source_task"].items():
        source, task = key.split("/")
        if task == "MCQ":
            assert count == doc["per_source_task"][key]
        else:
            assert count == 0 or key not in filtered["per_source_task"]
    dropped = {k: v for k, v in filtered["per_source_task"].items() if not k.endswith("/MCQ")}
    assert all(v == 0 for v in dropped.values())


def test_stats_out_file(ws, capsys):
    items_path = _generate(ws, capsys)
    out = str(ws / "stats.json")
    code, summary, _ = run(capsys, "stats", "--out", out, items_path)
    assert code == EXIT_OK
    assert json.loads(Path(out).read_text())["grand_total"] == summary["total"]


def test_validate_clean_and_corrupted(ws, capsys):
    items_path = _generate(ws, capsys)
    code, summary, _ = run(capsys, "validate", items_path)
    assert code == EXIT_OK
    assert summary["invalid"] == 0

    items = read_items_jsonl(items_path)
    victim = next(item for item in items if item.format is QAFormat.MCQ)
    victim.answer = "Zebra"  # no longer matches options[answer_index]
    bad_path = ws / "corrupted.jsonl"
    write_items_jsonl(items, bad_path)
    code, summary, _ = run(capsys, "validate", str(bad_path))
    assert code == EXIT_DATA
    assert summary["invalid"] == 1
    assert summary["violations"][0]["qa_id"] == victim.qa_id


def test_validate_duplicate_ids(ws, capsys):
    items_path = _generate(ws, capsys)
    items = read_items_jsonl(items_path)
    dup_path = ws / "dup.jsonl"
    write_items_jsonl(items + [items[0]], dup_path)
    code, summary, _ = run(capsys, "validate", str(dup_path))
    assert code == EXIT_DATA
    assert any("duplicate qa_id" in r for v in summary["violations"] for r in v["reasons"])


def test_validate_tampered_shard(ws, capsys):
    items_path = _generate(ws, capsys)
    cfg = str(ws / "config.json")
    code, summary, _ = run(capsys, "assemble", "--config", cfg, "--seed", "3", items_path)
    assert code == EXIT_OK
    out_dir = Path(summary["out"])
    split = max(summary["splits"], key=summary["splits"].get)
    shard = next((out_dir / split).glob("shard-*.jsonl"))
    shard.write_bytes(shard.read_bytes().replace(b"music", b"muzak", 1))
    code, _, cap = run(capsys, "validate", str(out_dir / split))
    assert code == EXIT_DATA
    assert "digest" in cap.err.lower()


# ---------------------------------------------------------------------------
# eval subcommand


def eval_fixture(tmp_path):
    items = []
    outputs = []
    for i in range(20):
        qa_id = f"{i:016x}"
        items.append(QAItem(
            qa_id=qa_id, audio_id=f"clip{i}", source=Source.FMA, format=QAFormat.MCQ,
            question="Which instrument leads? A. Guitar B. Piano C. Drums D. Cello",
            options=("Guitar", "Piano", "Drums", "Cello"), answer="Piano",
            answer_index=1, category="instrument", method=Method.RULE,
            template_id="mcq-1", seed=0,
        ))
        # 13 correct answers, 7 wrong -> accuracy 0.65
        outputs.append({"qa_id": qa_id, "text": "B" if i < 13 else "C"})
    items_path = tmp_path / "eval_items.jsonl"
    write_items_jsonl(items, items_path)
    outputs_path = tmp_path / "outputs.jsonl"
    outputs_path.write_text("\n".join(json.dumps(o) for o in outputs))
    return str(items_path), str(outputs_path)


def test_eval_mcq_hand_scored(ws, capsys):
    items_path, outputs_path = eval_fixture(ws)
    code, summary, cap = run(
        capsys, "eval", "--task", "mcq", "--items", items_path, "--outputs", outputs_path,
    )
    assert code == EXIT_OK
    assert summary["tasks"] == {"mcq": 0.65}
    doc = json.loads("\n".join(cap.out.splitlines()[:-1]))
    assert doc["tasks"]["mcq"]["total"] == 20
    assert doc["tasks"]["mcq"]["mean"] == 0.65


def test_eval_with_baseline_relative(ws, capsys):
    items_path, outputs_path = eval_fixture(ws)
    baseline = ws / "baseline.json"
    baseline.write_text(json.dumps({"tasks": {"mcq": {"mean": 0.714, "total": 1000}}}))
    out = str(ws / "report.json")
    code, _, _ = run(
        capsys, "eval", "--task", "mcq", "--items", items_path,
        "--outputs", outputs_path, "--baseline", str(baseline), "--out", out,
    )
    assert code == EXIT_OK
    doc = json.loads(Path(out).read_text())
    assert doc["relative_to_baseline"]["mcq"] == round(100 * 0.65 / 0.714, 1)


def test_eval_unknown_qa_id_is_data_error(ws, capsys):
    items_path, _ = eval_fixture(ws)
    bad_outputs = ws / "bad_outputs.jsonl"
    bad_outputs.write_text(json.dumps({"qa_id": "not-a-real-id", "text": "A"}))
    code, _, cap = run(
        capsys, "eval", "--task", "mcq", "--items", items_path, "--outputs", str(bad_outputs),
    )
    assert code == EXIT_DATA
    assert "not-a-real-id" in cap.err


def test_eval_all_tasks(ws, capsys):
    items_path = _generate(ws, capsys)
    items = read_items_jsonl(items_path)
    outputs = [{"qa_id": item.qa_id, "text": item.answer} for item in items]
    outputs_path = ws / "echo_outputs.jsonl"
    outputs_path.write_text("\n".join(json.dumps(o) for o in outputs))
    code, summary, _ = run(
        capsys, "eval", "--items", items_path, "--outputs", str(outputs_path),
    )
    assert code == EXIT_OK
    # echoing the gold answer back scores perfectly on every closed task
    assert summary["tasks"]["mcq"] == 1.0
    assert summary["tasks"]["binary"] == 1.0
    assert summary["tasks"]["label_match"] == 1.0
    assert summary["total"] == len(items)


# ---------------------------------------------------------------------------
# generate-llm subcommand


LLM_ARRAY = json.dumps([
    {"format": "open", "dimension": "mood",
     "question": "What mood does the piece convey?", "answer": "Calm"},
])


def llm_config(ws, url):
    config = json.loads((ws / "config.json").read_text())
    config["llm"] = {"base_url": url, "model": "test-model", "max_retries": 1}
    path = ws / "llm_config.json"
    path.write_text(json.dumps(config))
    return str(path)


def test_generate_llm_end_to_end_and_cache(ws, capsys, mock_endpoint):
    mock_endpoint.script((200, MockEndpoint.chat_body(LLM_ARRAY)))
    cfg = llm_config(ws, mock_endpoint.url)
    code, summary, _ = run(capsys, "generate-llm", "--config", cfg)
    assert code == EXIT_OK
    # c01, c02, c04 have captions; c03, c05 have no usable context
    assert summary["clips"] == 5
    assert summary["network_calls"] == 3
    assert summary["items"] == 3
    items = read_items_jsonl(Path(summary["out"]))
    assert all(item.method is Method.LLM for item in items)
    assert all(validate_qa_item(item) == [] for item in items)

    # rerun: every response now comes from the on-disk cache
    code, summary, _ = run(capsys, "generate-llm", "--config", cfg)
    assert code == EXIT_OK
    assert summary["network_calls"] == 0
    assert summary["items"] == 3


def test_generate_llm_auth_failure_exits_3(ws, capsys, mock_endpoint):
    mock_endpoint.script((401, {"error": "bad key"}))
    cfg = llm_config(ws, mock_endpoint.url)
    code, _, cap = run(capsys, "generate-llm", "--config", cfg)
    assert code == EXIT_SERVICE
    assert "401" in cap.err or "auth" in cap.err.lower()


def test_generate_llm_requires_endpoint(ws, capsys):
    code, _, cap = run(capsys, "generate-llm", "--config", str(ws / "config.json"))
    assert code == EXIT_USAGE
    assert "base_url" in cap.err


def test_generate_llm_rejects_unknown_llm_keys(ws, capsys):
    config = json.loads((ws / "config.json").read_text())
    config["llm"] = {"base_url": "http://x", "model": "m", "api_key": "hunter2"}
    (ws / "bad.json").write_text(json.dumps(config))
    code, _, cap = run(capsys, "generate-llm", "--config", str(ws / "bad.json"))
    assert code == EXIT_USAGE
    assert "api_key" in cap.err
