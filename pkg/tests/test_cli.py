"""Command-line pipeline: smoke run, determinism, error contracts."""

import json
from pathlib import Path

import pytest

from cladkws.cli import main
from cladkws.config import CONFIG_SCHEMA, DEFAULT_CONFIG, load_config, validate_config
from cladkws.errors import ConfigurationError

SMALL_CFG = Path(__file__).resolve().parents[1] / "src" / "cladkws" / "configs" / "small.json"


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> pretrain -> train once; reused by the command tests."""
    root = tmp_path_factory.mktemp("pipeline")
    synth_dir, am_dir, clad_dir = root / "synth", root / "am", root / "clad"
    assert main(["synth", "--config", str(SMALL_CFG), "--out", str(synth_dir)]) == 0
    manifest = synth_dir / "corpus.jsonl"
    assert manifest.exists()
    assert (
        main(["pretrain", "--config", str(SMALL_CFG), "--corpus", str(manifest), "--out", str(am_dir)])
        == 0
    )
    assert (
        main(
            [
                "train",
                "--config",
                str(SMALL_CFG),
                "--corpus",
                str(manifest),
                "--am",
                str(am_dir / "am.ckpt"),
                "--out",
                str(clad_dir),
            ]
        )
        == 0
    )
    return root, manifest, am_dir / "am.ckpt", clad_dir / "clad.ckpt"


class TestConfig:
    def test_defaults_validate(self):
        validate_config(DEFAULT_CONFIG)

    def test_bundled_configs_validate(self):
        for name in ("small.json", "desk.json", "paper_scale.json"):
            load_config(SMALL_CFG.parent / name)

    def test_unknown_field_rejected(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"version": 1, "coprus": {}}))
        with pytest.raises(ConfigurationError, match="coprus"):
            load_config(bad)

    def test_bad_value_reports_path(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"version": 1, "loss": {"tau_at": -1}}))
        with pytest.raises(ConfigurationError, match="loss/tau_at"):
            load_config(bad)

    def test_schema_is_printable(self, capsys):
        assert main(["--print-config-schema"]) == 0
        printed = json.loads(capsys.readouterr().out)
        assert printed == CONFIG_SCHEMA


class TestPipeline:
    def test_outputs_exist(self, pipeline):
        root, manifest, am_ckpt, clad_ckpt = pipeline
        assert am_ckpt.exists() and clad_ckpt.exists()
        report = json.loads((clad_ckpt.parent / "train_report.json").read_text())
        assert report["epochs"]
        assert (clad_ckpt.parent / "resolved_config.json").exists()

    def test_pretrain_learns(self, pipeline):
        root, manifest, am_ckpt, clad_ckpt = pipeline
        report = json.loads((am_ckpt.parent / "pretrain_report.json").read_text())
        assert report["holdout_ce"][-1] < report["holdout_ce"][0]
        assert report["holdout_frame_accuracy"] > 0.9

    def test_detect_writes_events(self, pipeline, tmp_path, capsys):
        root, manifest, am_ckpt, clad_ckpt = pipeline
        track = next(manifest.parent.glob("*.feat"))
        manifest_data = [json.loads(l) for l in manifest.read_text().splitlines()]
        lexicon_words = sorted(manifest_data[0]["lexicon"])
        keyword = next(w for w in lexicon_words if len(manifest_data[0]["lexicon"][w]) >= 5)
        code = main(
            [
                "detect",
                "--config",
                str(SMALL_CFG),
                "--corpus",
                str(manifest),
                "--checkpoint",
                str(clad_ckpt),
                "--track",
                str(track),
                "--keywords",
                keyword,
                "--threshold",
                "-1.0",
                "--out",
                str(tmp_path / "det"),
            ]
        )
        assert code == 0
        lines = (tmp_path / "det" / "events.jsonl").read_text().splitlines()
        assert lines
        event = json.loads(lines[0])
        assert set(event) == {"keyword", "start_s", "end_s", "score"}

    def test_detect_requires_keywords_or_defaults(self, pipeline, tmp_path, capsys):
        root, manifest, am_ckpt, clad_ckpt = pipeline
        track = next(manifest.parent.glob("*.feat"))
        code = main(
            [
                "detect",
                "--config",
                str(SMALL_CFG),
                "--corpus",
                str(manifest),
                "--checkpoint",
                str(clad_ckpt),
                "--track",
                str(track),
                "--keywords",
                "not-a-word",
                "--threshold",
                "0.5",
            ]
        )
        assert code == 2
        err = json.loads(capsys.readouterr().err)
        assert err["error"]["type"] == "usage"
        assert "hint" in err["error"]

    def test_detect_determinism_byte_identical(self, pipeline, tmp_path):
        root, manifest, am_ckpt, clad_ckpt = pipeline
        track = next(manifest.parent.glob("*.feat"))
        outs = []
        for name in ("d1", "d2"):
            out = tmp_path / name
            assert (
                main(
                    [
                        "detect",
                        "--config",
                        str(SMALL_CFG),
                        "--corpus",
                        str(manifest),
                        "--checkpoint",
                        str(clad_ckpt),
                        "--track",
                        str(track),
                        "--threshold",
                        "-1.0",
                        "--seed",
                        "7",
                        "--out",
                        str(out),
                    ]
                )
                == 0
            )
            outs.append((out / "events.jsonl").read_bytes())
        assert outs[0] == outs[1]

    def test_eval_reports_metrics(self, pipeline, tmp_path):
        root, manifest, am_ckpt, clad_ckpt = pipeline
        out = tmp_path / "eval"
        code = main(
            [
                "eval",
                "--config",
                str(SMALL_CFG),
                "--corpus",
                str(manifest),
                "--checkpoint",
                str(clad_ckpt),
                "--out",
                str(out),
            ]
        )
        assert code == 0
        report = json.loads((out / "eval_report.json").read_text())
        assert "recall_at_fa" in report
        assert report["threshold"] is not None

    def test_eval_determinism(self, pipeline, tmp_path):
        root, manifest, am_ckpt, clad_ckpt = pipeline
        blobs = []
        for name in ("e1", "e2"):
            out = tmp_path / name
            assert (
                main(
                    [
                        "eval",
                        "--config",
                        str(SMALL_CFG),
                        "--corpus",
                        str(manifest),
                        "--checkpoint",
                        str(clad_ckpt),
                        "--seed",
                        "3",
                        "--out",
                        str(out),
                    ]
                )
                == 0
            )
            blobs.append((out / "eval_report.json").read_bytes())
        assert blobs[0] == blobs[1]

    def test_bench_emits_rsa_table(self, pipeline, tmp_path):
        root, manifest, am_ckpt, clad_ckpt = pipeline
        out = tmp_path / "bench"
        code = main(
            [
                "bench",
                "--config",
                str(SMALL_CFG),
                "--corpus",
                str(manifest),
                "--checkpoint",
                str(clad_ckpt),
                "--out",
                str(out),
            ]
        )
        assert code == 0
        table = json.loads((out / "bench_report.json").read_text())
        assert {"model", "benchmark", "rsa"} <= set(table)
        assert len(table["rsa"]["values"]) == 5


class TestErrors:
    def test_unknown_flag(self, capsys):
        assert main(["synth", "--nope", "--out", "x"]) == 2
        err = json.loads(capsys.readouterr().err)
        assert err["error"]["type"] == "usage"

    def test_no_subcommand(self, capsys):
        assert main([]) == 2

    def test_missing_corpus_file(self, tmp_path, capsys):
        code = main(
            ["pretrain", "--config", str(SMALL_CFG), "--corpus", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)]
        )
        assert code != 0

    def test_bad_config_schema(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"version": 99}))
        assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
        err = json.loads(capsys.readouterr().err)
        assert err["error"]["type"] == "ConfigurationError"
