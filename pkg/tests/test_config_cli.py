import json
import shutil
from pathlib import Path

import pytest
import yaml

from udaseg import pipeline
from udaseg.cli import main
from udaseg.config import ConfigError, from_dict, load_config
from udaseg.pipeline import read_provenance
from udaseg.translation.trainer import TrainingAborted

TINY = {
    "seed": 3,
    "data": {"n_source": 3, "n_target": 3, "n_oracle": 2},
    "translation": {"iterations": 5},
    "segmentation": {"epochs": 2, "iters_per_epoch": 3},
    "self_training": {"rounds": 2, "finetune_epochs": 1},
}


def write_cfg(tmp_path, d, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(d))
    return p


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_cfg(root, TINY)
    out = root / "out"
    assert main(["ablate", "--config", str(cfg), "--output", str(out)]) == 0
    return cfg, out


def test_saved_config_reloads_to_same_digest(tmp_path):
    cfg = load_config(write_cfg(tmp_path, TINY))
    cfg.save(tmp_path / "saved.yaml")
    assert load_config(tmp_path / "saved.yaml").digest() == cfg.digest()


def test_defaults_are_desk_preset():
    cfg = from_dict({})
    assert cfg.preset == "desk" and cfg.translation.lr == 1e-3 and cfg.segmentation.epochs == 10
    assert cfg.self_training.finetune_epochs == 5 and cfg.data.num_classes == 5
    assert cfg.digest() == from_dict({}).digest() != from_dict({"seed": 1}).digest()
    assert from_dict({}, seed_override=4).segmentation.seed == 4


@pytest.mark.parametrize("bad, match", [
    ({"bogus": 1}, "unknown top-level"),
    ({"translation": {"fusoin": "film"}}, "allowed"),
    ({"translation": {"seed": 2}}, "per-section seeds"),
    ({"segmentation": {"num_classes": 3}}, "num_classes"),
    ({"preset": "huge"}, "unknown preset"),
    ({"ablation": {"arms": ["drl", "drl"]}}, "ablation"),
    ({"ablation": {"overrides": {"drl": {"self_training": {"rounds": 1}}}}}, "drl_st"),
])
def test_config_rejections(bad, match):
    with pytest.raises(ConfigError, match=match):
        from_dict(bad)


def test_cli_config_errors_exit_2(tmp_path, capsys):
    assert main(["gen-data", "--config", str(write_cfg(tmp_path, {"bogus": 1})), "--output", str(tmp_path)]) == 2
    assert "allowed" in capsys.readouterr().err
    assert main(["gen-data", "--config", str(tmp_path / "nope.yaml")]) == 2
    (tmp_path / "broken.yaml").write_text("a: [1,\n")
    assert main(["gen-data", "--config", str(tmp_path / "broken.yaml")]) == 2


def test_missing_inputs_exit_2(tmp_path, capsys):
    cfg = write_cfg(tmp_path, TINY)
    assert main(["translate", "--config", str(cfg), "--output", str(tmp_path / "o")]) == 2
    assert "run" in capsys.readouterr().err
    assert main(["finetune", "--config", str(cfg), "--output", str(tmp_path / "o")]) == 2


def test_gen_data_counts(tmp_path, capsys):
    cfg = write_cfg(tmp_path, TINY)
    assert main(["gen-data", "--config", str(cfg), "--output", str(tmp_path / "o")]) == 0
    counts = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert counts == {"source_train": 3, "target_train": 3, "paired_oracle": 2}


def test_ablate_outputs_and_rerun_is_noop(tiny_run):
    cfg, out = tiny_run
    comp = json.loads((out / "ablation" / "comparison.json").read_text())
    assert set(comp["arms"]) == {"no_uda", "drl", "drl_st"} and not comp["partial"]
    before = (out / "run_manifest.json").read_text()
    ckpt = out / "translation" / "translation.ckpt"
    mtime = ckpt.stat().st_mtime_ns
    assert main(["ablate", "--config", str(cfg), "--output", str(out)]) == 0
    assert (out / "run_manifest.json").read_text() == before
    assert ckpt.stat().st_mtime_ns == mtime


def test_every_artifact_carries_provenance(tiny_run):
    cfg, out = tiny_run
    config_hash = load_config(cfg, output_override=out).digest()
    skipped = {"run_manifest.json"}
    checked = 0
    for p in sorted(out.rglob("*")):
        if p.is_dir() or p.name in skipped or p.name.endswith(pipeline.SIDECAR):
            continue
        prov = read_provenance(p)
        assert prov is not None, p
        assert prov["config_hash"] == config_hash
        checked += 1
    assert checked > 20
    synth = next((out / "synthetic").glob("*.vol"))
    assert "train-translate" in read_provenance(synth)["upstream"]


def test_config_mismatch_and_resume(tiny_run, tmp_path):
    _, out = tiny_run
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    other = write_cfg(tmp_path, {**TINY, "seed": 4})
    assert main(["gen-data", "--config", str(other), "--output", str(copy)]) == 2
    assert main(["gen-data", "--config", str(other), "--output", str(copy), "--resume"]) == 0
    manifest = json.loads((copy / "run_manifest.json").read_text())
    assert manifest["config_hash"] == load_config(other).digest()


def test_report_and_missing_run(tiny_run, tmp_path, capsys):
    _, out = tiny_run
    assert main(["report", str(out)]) == 0
    printed = capsys.readouterr().out
    for name in ("comparison.csv", "efficiency.csv", "translation_grid.png", "dsc_by_arm.png"):
        assert name in printed and (out / "report" / name).exists()
    assert main(["report", str(tmp_path / "absent")]) == 2


def test_failed_arm_gives_partial_comparison(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path, TINY)

    def boom(self):
        raise TrainingAborted(0, {"disc_a": float("nan")})

    monkeypatch.setattr(pipeline.Pipeline, "train_translate", boom)
    out = tmp_path / "o"
    assert main(["ablate", "--config", str(cfg), "--output", str(out), "--arm", "no_uda", "--arm", "drl"]) == 3
    comp = json.loads((out / "ablation" / "comparison.json").read_text())
    assert comp["partial"] and "drl" in comp["failures"] and set(comp["arms"]) == {"no_uda"}


def test_train_seg_rejects_self_training_arm(tmp_path):
    with pytest.raises(SystemExit):
        main(["train-seg", "--arm", "drl_st", "--output", str(tmp_path)])


def test_efficiency_table_columns(tiny_run):
    _, out = tiny_run
    header = (out / "efficiency" / "efficiency.csv").read_text().splitlines()[0]
    assert header.split(",")[:5] == ["Case ID", "Image Size", "Running Time (s)", "Max Memory (MB)",
                                      "Total Memory (MB*s)"]
    assert Path(out / "config.yaml").exists()
