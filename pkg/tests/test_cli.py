import io
import json

import pytest
import yaml

from cytoconsensus.cli import build_parser, main
from cytoconsensus.tiles import write_jsonl

from fixtures import morpho_fixture, by_image, pipeline_config, pipeline_mock, tile_rows
from mock_llm import data_uri

SUBCOMMANDS = ["annotate", "fuse", "refine", "reformat", "replay", "eval", "agreement", "simulate"]


def cli(argv, mock=None):
    out = io.StringIO()
    code = main(argv, transport=mock.transport() if mock else None, stdout=out)
    return code, out.getvalue()


def summary_block(text):
    return text[text.rindex("== run summary =="):]


@pytest.fixture
def setup(tmp_path):
    cfg = pipeline_config(tmp_path, shard_size=2, expert=True)
    cfg["endpoints"] += [
        {"id": "gen", "base_url": "http://mock/v1", "model_name": "base-4b", "max_retries": 0},
        {"id": "judge", "base_url": "http://mock/v1", "model_name": "judge", "max_retries": 0},
    ]
    cfg.update(generator="gen", eval_model="judge")
    cfg_path = tmp_path / "config.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg), encoding="utf-8")
    manifest = tmp_path / "tiles.jsonl"
    write_jsonl(manifest, tile_rows(3))
    return tmp_path, cfg_path, manifest


def annotate(setup, mock=None):
    tmp, cfg, manifest = setup
    mock = mock or pipeline_mock(expert_reply="Prominent nucleoli are seen.")
    return cli(["annotate", "--config", str(cfg), "--manifest", str(manifest)], mock)


def test_every_subcommand_has_help(capsys):
    for name in SUBCOMMANDS:
        with pytest.raises(SystemExit) as info:
            build_parser().parse_args([name, "--help"])
        assert info.value.code == 0
        text = capsys.readouterr().out
        for flag in ("--config", "--log-level", "--format"):
            assert flag in text, (name, flag)


def test_annotate_success(setup):
    code, out = annotate(setup)
    assert code == 0
    block = summary_block(out)
    assert "succeeded: 3" in block and "failed: 0" in block and "exit_code: 0" in block
    assert out.rstrip().endswith("exit_code: 0")


def test_annotate_missing_config(tmp_path):
    missing = tmp_path / "nope.yaml"
    code, out = cli(["annotate", "--config", str(missing), "--manifest", str(tmp_path / "m.jsonl")])
    assert code == 2 and str(missing) in out


def test_annotate_resume_without_checkpoint(setup):
    tmp, cfg, manifest = setup
    code, out = cli(["annotate", "--config", str(cfg), "--manifest", str(manifest), "--resume"], pipeline_mock())
    assert code == 2 and "ManifestHashMismatch" in out


def test_annotate_per_tile_failure_is_nonfatal(setup):
    code, out = annotate(setup, pipeline_mock(fail_tiles={"t001"}, expert_reply="x"))
    assert code == 0 and "failed: 1" in out and "t001" in out


def test_annotate_json_format(setup):
    tmp, cfg, manifest = setup
    code, out = cli(["annotate", "--config", str(cfg), "--manifest", str(manifest), "--format", "json"],
                    pipeline_mock(expert_reply="x"))
    doc = json.loads(out)
    assert doc["summary"]["counts"]["succeeded"] == 3 and doc["summary"]["exit_code"] == 0


def test_fuse_and_refine(setup):
    tmp, cfg, manifest = setup
    assert annotate(setup)[0] == 0
    fused = tmp / "fused.jsonl"
    code, out = cli(["fuse", "--config", str(cfg), "--dataset", str(tmp / "out"), "--out", str(fused)],
                    pipeline_mock())
    assert code == 0 and "fused: 3" in out
    assert len(fused.read_text().splitlines()) == 3
    final = tmp / "final.jsonl"
    code, out = cli(["refine", "--config", str(cfg), "--fused", str(fused), "--manifest", str(manifest),
                     "--out", str(final)], pipeline_mock(expert_reply="Irregular nuclear membrane."))
    assert code == 0 and "succeeded: 3" in out


def test_reformat(setup, tmp_path):
    tmp, cfg, manifest = setup
    annotate(setup)
    out_file = tmp / "sft.jsonl"
    code, out = cli(["reformat", "--dataset", str(tmp / "out"), "--seed", "3", "--out", str(out_file)])
    assert code == 0 and "samples: 3" in out
    first = out_file.read_bytes()
    cli(["reformat", "--dataset", str(tmp / "out"), "--seed", "3", "--out", str(out_file)])
    assert out_file.read_bytes() == first

    bad = tmp / "bad.jsonl"
    bad.write_text("{not json\n", encoding="utf-8")
    code, _ = cli(["reformat", "--dataset", str(tmp / "out"), "--templates", str(bad), "--out", str(out_file)])
    assert code == 2

    strict = tmp / "strict.jsonl"
    strict.write_text(json.dumps({"template_id": "x", "multi_turn": False, "turns": [
        {"role": "user", "text": "q"}, {"role": "assistant", "text": "{narrative} {dim:NE} {dim:NA} {dim:NH} "
                                                                     "{dim:Koilocyte} {dim:CT} {dim:Nucleolus} "
                                                                     "{dim:NC} {dim:NCR} {dim:NM}"}]}) + "\n")
    code, out = cli(["reformat", "--dataset", str(tmp / "out"), "--templates", str(strict), "--out", str(out_file)])
    assert code == 0 and "warnings: 3" in out and "samples: 0" in out


def test_replay(setup):
    tmp, cfg, manifest = setup
    annotate(setup)
    mock = pipeline_mock()
    mock.on("base-4b", lambda call: "Q: What is shown? A: Cells.")
    out_file = tmp / "replay.jsonl"
    args = ["replay", "--config", str(cfg), "--domain", str(tmp / "out"), "--general", str(manifest),
            "--out", str(out_file), "--seed", "1"]
    code, out = cli(args, mock)
    assert code == 0 and "mixed: 6" in out
    origins = sorted(json.loads(line)["origin"] for line in out_file.read_text().splitlines())
    assert origins == ["domain_replay"] * 3 + ["general_replay"] * 3

    code, _ = cli(args + ["--weights", "0,0"], mock)
    assert code == 2

    down = pipeline_mock()
    down.on("base-4b", lambda call: 503)
    code, out = cli(args, down)
    assert code == 0 and "skipped: 6" in out and "mixed: 0" in out


def test_eval_full_accuracy_and_bad_bench(setup):
    tmp, cfg, _ = setup
    rows, replies = morpho_fixture({c: 100.0 for c in
                                   ["NE", "NA", "NH", "Koilocyte", "CT", "Nucleolus", "NC", "NCR", "NM"]}, n=4)
    bench = tmp / "morpho.jsonl"
    write_jsonl(bench, rows)
    mock = pipeline_mock()
    mock.on("judge", by_image(replies))
    code, out = cli(["eval", "--config", str(cfg), "--bench", "morpho", "--manifest", str(bench)], mock)
    assert code == 0
    table_row = out.splitlines()[2]
    assert table_row.split()[-1] == "100.0"
    code, _ = cli(["eval", "--config", str(cfg), "--bench", "cells", "--manifest", str(bench)], mock)
    assert code == 2


def test_agreement(tmp_path):
    rows = [{"item_id": f"i{k}", "uri": data_uri(f"i{k}"), "dimension": "NE", "ground_truth": "positive"}
            for k in range(4)]
    bench = tmp_path / "morpho.jsonl"
    write_jsonl(bench, rows)

    def rater(name, verdicts):
        path = tmp_path / f"{name}.jsonl"
        write_jsonl(path, [{"item_id": f"i{k}", "verdict": v} for k, v in enumerate(verdicts)])
        return str(path)

    a = rater("a", ["+", "-", "+", "+"])
    b = rater("b", ["+", "-", "+", "+"])
    code, out = cli(["agreement", a, b, "--manifest", str(bench)])
    assert code == 0 and "100.0" in out.splitlines()[1]

    code, _ = cli(["agreement", a, "--manifest", str(bench)])
    assert code == 2

    x, y, z = rater("x", ["+"]), rater("y", ["+"]), rater("z", ["-"])
    code, out = cli(["agreement", x, y, z, "--manifest", str(bench), "--format", "json"])
    assert code == 0
    assert json.loads(out)["result"]["per_dimension"]["NE"] == pytest.approx(100 / 3)


def _trial(tmp_path, p, n_profiles=3, n_cases=2000, **extra):
    path = tmp_path / f"trial-{p}.yaml"
    path.write_text(yaml.safe_dump({
        "n_cases": n_cases, "seed": 1,
        "profiles": [{"profile_id": f"a{i}", "accuracy": p, "seed": i} for i in range(n_profiles)],
        **extra,
    }), encoding="utf-8")
    return str(path)


def test_simulate(tmp_path):
    code, out = cli(["simulate", _trial(tmp_path, 0.7)])
    assert code == 0
    fused = float(next(line for line in out.splitlines() if line.startswith("fused accuracy:")).split()[-1])
    assert fused == pytest.approx(0.784, abs=0.02)
    assert "oracle fused accuracy: 0.7840" in out

    code, out = cli(["simulate", _trial(tmp_path, 1.0, n_profiles=1, n_cases=50,
                                        fusion={"min_coverage": 1, "min_votes": 1})])
    assert code == 0 and "fused accuracy: 1.0000" in out

    bad = tmp_path / "bad.yaml"
    bad.write_text("n_cases: 10\nprofiles: [{profile_id: a, accuracy: 1.7}]\n", encoding="utf-8")
    assert cli(["simulate", str(bad)])[0] == 2
    bad.write_text(": : :\n", encoding="utf-8")
    assert cli(["simulate", str(bad)])[0] == 2

