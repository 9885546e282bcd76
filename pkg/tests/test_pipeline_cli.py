import json
import shutil

import pytest

from promptdet import pipeline
from promptdet.cli import cli_main
from promptdet.config import DEFAULTS, coerce, config_hash, dump, parse_config_text, resolve
from promptdet.exceptions import ConfigurationError

TINY = ["data.n_train=24", "data.n_val=8", "data.n_pretrain=64", "data.n_transfer=4", "pretrain.epochs=2",
        "adapt.epochs=1", "rpn.epochs=1", "detector.epochs=1", "label.objectness=0.5"]


class TestConfig:
    def test_precedence(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("# comment\n\nlabel.delta = 0.5\nlabel.gamma=0.3\n")
        cfg = resolve(parse_config_text(path.read_text()), {"label.gamma": "0.7"})
        assert cfg["label.delta"] == 0.5 and cfg["label.gamma"] == 0.7
        assert cfg["label.objectness"] == DEFAULTS["label.objectness"]

    def test_coercion(self):
        assert coerce("adapt.layout", "2,6") == (2, 6)
        assert coerce("adapt.use_lstm", "off") is False
        assert coerce("data.n_train", "12") == 12
        for key, raw in (("nope", "1"), ("data.n_train", "x"), ("adapt.use_lstm", "maybe")):
            with pytest.raises(ConfigurationError):
                coerce(key, raw)
        with pytest.raises(ConfigurationError):
            parse_config_text("label.delta 0.5")

    def test_dump_round_trip(self):
        cfg = resolve()
        assert resolve(parse_config_text(dump(cfg))) == cfg
        assert config_hash(cfg) == config_hash(dict(reversed(list(cfg.items()))))

    def test_arm_names(self):
        assert pipeline.arm_name(False, True) == "visual"
        assert pipeline.arm_name(False, False, "a photo of a {}") == "hand"
        with pytest.raises(ConfigurationError):
            pipeline.arm_name(True, False, "a photo of a {}")

    def test_artifact_root_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv(pipeline.ENV_HOME, str(tmp_path))
        assert pipeline.artifact_root() == tmp_path
        assert pipeline.artifact_root("x").name == "x"


def cli(root, *argv):
    sets = [a for kv in TINY for a in ("--set", kv)]
    return cli_main([argv[0], "--out-dir", str(root), *sets, *argv[1:]])


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    codes = [cli(root, "gen-data"), cli(root, "pretrain"),
             cli(root, "adapt"), cli(root, "adapt", "--text-prompt", "off", "--visual-prompt", "off"),
             cli(root, "label"), cli(root, "train-detector"), cli(root, "train-detector", "--no-pseudo"),
             cli(root, "eval"), cli(root, "eval", "--split", "transfer")]
    return root, codes


class TestStages:
    def test_all_stages_succeed(self, tiny_run):
        root, codes = tiny_run
        assert codes == [0] * len(codes)
        for name in ("gen-data", "pretrain", "adapt-both", "adapt-none", "label-both",
                     "train-detector-pseudo-both", "train-detector-no-pseudo", "eval-pseudo-both-val"):
            manifest = json.loads((root / "manifests" / f"{name}.json").read_text())
            assert manifest["outputs"] and len(manifest["config_hash"]) == 64

    def test_encoder_hash_recorded(self, tiny_run):
        root, _ = tiny_run
        report = [json.loads(l) for l in (root / "adapt" / "both" / "report.jsonl").read_text().splitlines()]
        assert report and report[-1]["ablation_mode"] == "both"
        hashes = json.loads((root / "detector" / "pseudo-both" / "classifier_hash.json").read_text())
        assert hashes["before"] == hashes["after"]

    def test_label_outputs(self, tiny_run):
        root, _ = tiny_run
        doc = json.loads((root / "label" / "both" / "pseudo_labels.json").read_text())
        assert doc["thresholds"]["delta"] == 0.6

    def test_empty_detections_file(self, tiny_run, tmp_path, capsys):
        root, _ = tiny_run
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        assert cli(root, "eval", "--detections", str(empty)) == 0
        eval_doc = json.loads((root / "eval" / "file-val" / "eval.json").read_text())
        assert eval_doc["map_novel"] == 0.0

    def test_sweep_writes_csv_and_svg(self, tiny_run):
        root, _ = tiny_run
        assert cli(root, "sweep", "--param", "delta", "--values", "0.4,0.6") == 0
        lines = (root / "sweep" / "delta.csv").read_text().splitlines()
        assert lines[0].startswith("delta,") and len(lines) == 3
        assert (root / "sweep" / "delta.svg").read_text().lstrip().startswith("<?xml")

    def test_stage_isolation(self, tiny_run):
        root, _ = tiny_run
        manifest = root / "manifests" / "train-detector-no-pseudo.json"
        before = json.loads(manifest.read_text())["outputs"]
        shutil.rmtree(root / "detector" / "no-pseudo")
        assert cli(root, "train-detector", "--no-pseudo") == 0
        assert json.loads(manifest.read_text())["outputs"] == before

    def test_missing_upstream(self, tmp_path):
        assert cli(tmp_path, "pretrain") == 3
        assert cli(tmp_path, "label") == 3


class TestExitCodes:
    def test_bad_threshold(self, tmp_path):
        assert cli_main(["label", "--out-dir", str(tmp_path), "--gamma", "1.01"]) == 2

    def test_unknown_command_and_key(self, tmp_path):
        assert cli_main(["frobnicate"]) == 2
        assert cli_main(["gen-data", "--out-dir", str(tmp_path), "--set", "data.bogus=1"]) == 2

    def test_bad_sweep_param(self, tiny_run):
        root, _ = tiny_run
        assert cli(root, "sweep", "--param", "delta", "--values", "a,b") == 2

    def test_missing_config_file(self, tmp_path):
        assert cli_main(["gen-data", "--out-dir", str(tmp_path), "--config", str(tmp_path / "no.cfg")]) == 3

    def test_malformed_detections(self, tiny_run, tmp_path):
        root, _ = tiny_run
        bad = tmp_path / "bad.jsonl"
        bad.write_text("{not json}\n")
        assert cli(root, "eval", "--detections", str(bad)) == 3
