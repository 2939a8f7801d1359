import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest

from aedetect import pipeline
from aedetect.artifacts import read_csv
from aedetect.cli import main

ROOT = Path(__file__).resolve().parents[1]
TINY = ROOT / "configs" / "tiny.json"


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    mp = pytest.MonkeyPatch()
    mp.setenv(pipeline.OUTPUT_ROOT_ENV, str(root))
    seen = []
    real = pipeline.train_wae

    def spy(acts, cfg, provenance="clean"):
        seen.append(provenance)
        return real(acts, cfg, provenance)

    mp.setattr(pipeline, "train_wae", spy)
    assert main(["all", "-c", str(TINY)]) == 0
    mp.undo()
    return root / "tiny", seen


def test_all_writes_every_stage(tiny_run):
    out, _ = tiny_run
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["stages"]) == set(pipeline.STAGES)
    assert all(s["complete"] for s in manifest["stages"].values())
    header, rows = read_csv(out / "report" / "report.csv")
    assert header[:4] == ["attack", "setting", "representation", "auroc"]
    assert len(rows) == 2 * 5
    for name in ("analysis/importance.json", "analysis/hypotheses.json", "studies/pgd_iterations.csv",
                 "studies/transfer.csv", "studies/ablation.csv", "trajectory/bim.csv", "detect/fgsm_svm.json"):
        assert (out / name).exists(), name
    for stage in manifest["stages"].values():
        for art in stage["artifacts"]:
            assert (out / art).exists(), art


def test_autoencoders_only_see_clean_data(tiny_run):
    _, seen = tiny_run
    assert seen == ["clean"] * 4


def test_second_all_is_a_no_op(tiny_run, monkeypatch, capsys):
    out, _ = tiny_run
    monkeypatch.setenv(pipeline.OUTPUT_ROOT_ENV, str(out.parent))
    before = {p: p.stat().st_mtime_ns for p in out.rglob("*") if p.is_file() and p.name != "config.json"}
    assert main(["all", "-c", str(TINY)]) == 0
    assert "nothing (up to date)" in capsys.readouterr().out
    after = {p: p.stat().st_mtime_ns for p in out.rglob("*") if p.is_file() and p.name != "config.json"}
    assert before == after


def test_later_stages_leave_target_untouched(tiny_run, monkeypatch):
    out, _ = tiny_run
    monkeypatch.setenv(pipeline.OUTPUT_ROOT_ENV, str(out.parent))
    net_digest = _digest(out / "target" / "net.aedm")
    bank_digest = _digest(out / "aes" / "ae_tap1.aedm")
    assert main(["study-ablation", "-c", str(TINY), "--force"]) == 0
    assert _digest(out / "target" / "net.aedm") == net_digest
    assert _digest(out / "aes" / "ae_tap1.aedm") == bank_digest


def test_dependency_error_names_missing_stage(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(pipeline.OUTPUT_ROOT_ENV, str(tmp_path))
    assert main(["detect", "-c", str(TINY)]) == 2
    err = capsys.readouterr().err
    assert "'features'" in err
    cfg = pipeline.ExperimentConfig.load(TINY)
    with pytest.raises(pipeline.DependencyError, match="train-target"):
        pipeline.run_stage(pipeline.Run(cfg), "train-aes")


def test_force_skips_dependency_check(tmp_path, monkeypatch):
    monkeypatch.setenv(pipeline.OUTPUT_ROOT_ENV, str(tmp_path))
    assert main(["train-target", "-c", str(TINY), "--force"]) == 0
    assert (tmp_path / "tiny" / "target" / "net.aedm").exists()


def test_seed_is_required(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"output_dir": "x"}))
    with pytest.raises(pipeline.ConfigError, match="seed"):
        pipeline.ExperimentConfig.load(cfg)
    assert main(["all", "-c", str(cfg)]) == 2
    with pytest.raises(pipeline.ConfigError):
        pipeline.ExperimentConfig.load(tmp_path / "missing.json")


def test_overrides_and_fingerprint():
    base = pipeline.ExperimentConfig.load(TINY)
    over = pipeline.ExperimentConfig.load(TINY, ["attacks.epsilon=0.1", "trajectory.attacks=[\"pgd\"]",
                                                 "output_dir=elsewhere"])
    assert over.raw["attacks"]["epsilon"] == 0.1 and over.raw["trajectory"]["attacks"] == ["pgd"]
    assert over.fingerprint() != base.fingerprint()
    moved = pipeline.ExperimentConfig.load(TINY, ["output_dir=elsewhere"])
    assert moved.fingerprint() == base.fingerprint()
    with pytest.raises(pipeline.ConfigError):
        pipeline.apply_override({}, "no_equals_sign")


def test_changed_config_reruns(tiny_run):
    out, _ = tiny_run
    manifest = pipeline.RunManifest(out / "manifest.json", "different")
    assert not manifest.done("train-target")


def test_stage_seeds_are_independent_of_stage_list():
    cfg = pipeline.ExperimentConfig.load(TINY)
    a = cfg.stage_seed("attack", "fgsm")
    more = pipeline.ExperimentConfig.load(TINY, ["attacks.kinds=[\"cw\", \"fgsm\"]"])
    assert more.stage_seed("attack", "fgsm") == a
    assert cfg.stage_seed("attack", "bim") != a


def test_idx_paths_validated(tmp_path):
    cfg = {"seed": 1, "data": {"source": "idx", "train_images": "nope", "train_labels": "nope",
                               "test_images": "nope", "test_labels": "nope"}}
    with pytest.raises(pipeline.ConfigError, match="does not exist"):
        pipeline.ExperimentConfig.from_dict(cfg, tmp_path)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "aedetect", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "study-pgd-iters" in res.stdout
