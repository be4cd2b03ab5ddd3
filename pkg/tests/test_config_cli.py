import json

import numpy as np
import pytest

from taskcrl.cli import main, merge_runs
from taskcrl.config import list_presets, load_config, validate_config
from taskcrl.scm import load_dataset
from taskcrl.trainer import SCHEMA_VERSION, ConfigError

TINY = {
    "data": {"kind": "static", "latent_dim": 2, "obs_dim": 3, "env_count": 2, "n_per_env": 60},
    "model": {"hidden": [6], "extractor": False, "style_dim": 0},
    "objective": {"pipeline": "static_image", "task": {"kind": "reconstruction"},
                  "constraints": [{"kind": "vae_kl", "weight": 0.1}]},
    "run": {"steps": 5, "batch": 16, "seed": 0},
}


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def test_presets_load_and_validate():
    names = list_presets()
    for n in ("static_ivae_smoke", "temporal_smoke", "tdrl_video_tasks", "imsda_image_tasks", "sparsity_tasks"):
        assert n in names
        validate_config(load_config(n))


@pytest.mark.parametrize("preset,labels", [
    ("tdrl_video_tasks", ["Reconstruction (TDRL)", "Contrastive Learning", "Next-Frame Prediction",
                          "Mid-Latent Reconstruction", "Prototype-based Learning", "Masked Reconstruction"]),
    ("imsda_image_tasks", ["Reconstruction (iMSDA)", "Contrastive Learning", "Denoising Reconstruction",
                           "Cross-view Prediction", "Prototype-based Learning", "Masked Reconstruction"]),
    ("sparsity_tasks", ["Reconstruction (VAE+Sparsity)", "Denoising Reconstruction", "Masked Reconstruction",
                        "Multi-view Prediction"]),
])
def test_table_presets_list_task_rows(preset, labels):
    assert [t["label"] for t in load_config(preset)["grid"]["tasks"]] == labels


@pytest.mark.parametrize("mutate,key", [
    (lambda c: c["run"].update(stepz=3), "run"),
    (lambda c: c["data"].update(latent_dim=0), "data.latent_dim"),
    (lambda c: c["objective"]["constraints"][0].update(weight=-1), "objective.constraints.0.weight"),
    (lambda c: c.update(schema_version=SCHEMA_VERSION + 1), "schema_version"),
    (lambda c: c["model"].update(decoder="conv"), "model.decoder"),
])
def test_schema_errors_name_the_key(mutate, key):
    cfg = json.loads(json.dumps(TINY))
    mutate(cfg)
    with pytest.raises(ConfigError, match=f"at {key}"):
        validate_config(cfg)


def test_preset_env_dir_takes_precedence(tmp_path, monkeypatch):
    override = json.loads(json.dumps(TINY))
    override["description"] = "override"
    (tmp_path / "temporal_smoke.json").write_text(json.dumps(override))
    monkeypatch.setenv("CRL_PRESET_DIR", str(tmp_path))
    assert load_config("temporal_smoke")["description"] == "override"
    assert "static_ivae_smoke" in list_presets()


def test_generate_writes_dataset(tmp_path, capsys):
    out = tmp_path / "d.crl"
    assert main(["generate", "--config", _write(tmp_path, TINY), "--out", str(out)]) == 0
    info = json.loads(capsys.readouterr().out)
    ds = load_dataset(out)
    assert info["spec_hash"] == ds.meta["spec_hash"] and ds.obs_dim == 3


def test_train_from_generated_dataset(tmp_path, capsys):
    out = tmp_path / "d.crl"
    assert main(["generate", "--config", _write(tmp_path, TINY), "--out", str(out)]) == 0
    cfg = json.loads(json.dumps(TINY))
    cfg["data"] = {"path": str(out)}
    assert main(["train", "--config", _write(tmp_path, cfg, "c2.json"), "--out", str(tmp_path / "run")]) == 0
    mcc, r2 = map(float, capsys.readouterr().out.split()[-2:])
    assert 0 <= mcc <= 1 and np.isfinite(r2)


def test_exit_codes(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 3
    bad = json.loads(json.dumps(TINY))
    bad["run"]["bogus"] = 1
    assert main(["train", "--config", _write(tmp_path, bad), "--out", str(tmp_path / "r")]) == 2
    assert "run" in capsys.readouterr().err
    nodata = json.loads(json.dumps(TINY))
    nodata["data"] = {"path": str(tmp_path / "nope.crl")}
    assert main(["train", "--config", _write(tmp_path, nodata, "n.json"), "--out", str(tmp_path / "r")]) == 3
    assert main(["grid", "--config", _write(tmp_path, TINY, "g.json"), "--out", str(tmp_path / "g")]) == 2
    assert main(["report"]) == 2
    assert main(["report", str(tmp_path)]) == 3
    incompatible = json.loads(json.dumps(TINY))
    incompatible["objective"]["task"] = {"kind": "next_frame"}
    assert main(["train", "--config", _write(tmp_path, incompatible, "i.json"), "--out", str(tmp_path / "r")]) == 2


def test_seed_override_changes_run(tmp_path, capsys):
    cfg = _write(tmp_path, TINY)
    main(["train", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "1"])
    main(["train", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "2"])
    a = json.loads((tmp_path / "a" / "record.json").read_text())
    b = json.loads((tmp_path / "b" / "record.json").read_text())
    assert a["seed"] == 1 and b["seed"] == 2


def _grid_cfg():
    cfg = json.loads(json.dumps(TINY))
    cfg["grid"] = {"tasks": [{"label": "Rec", "task": {"kind": "reconstruction"}},
                             {"label": "Den", "task": {"kind": "denoising", "sigma_noise": 0.1}}],
                   "constraints": [{"label": "KL", "constraints": [{"kind": "vae_kl", "weight": 0.1}]}],
                   "seeds": 2}
    return cfg


def test_grid_and_report_roundtrip(tmp_path, capsys):
    out = tmp_path / "g"
    assert main(["grid", "--config", _write(tmp_path, _grid_cfg()), "--out", str(out), "--format", "md"]) == 0
    md = capsys.readouterr().out
    assert md.count("\n") >= 4 and "Rec" in md and "Den" in md
    assert (out / "report.csv").is_file() and (out / "grid.json").is_file()
    assert main(["report", str(out), "--format", "md"]) == 0
    assert capsys.readouterr().out == md


def test_report_merge_is_order_independent(tmp_path, capsys):
    dirs = []
    for seed in (0, 1, 2):
        d = tmp_path / f"r{seed}"
        main(["train", "--config", _write(tmp_path, TINY), "--out", str(d), "--seed", str(seed)])
        dirs.append(str(d))
    a, b = merge_runs(dirs), merge_runs(dirs[::-1])
    assert a == b and len(a) == 1 and a[0].seeds == 3
    # duplicate inputs are counted once
    assert merge_runs(dirs + dirs[:1]) == a


def test_report_rejects_schema_mismatch(tmp_path, capsys):
    d = tmp_path / "r"
    main(["train", "--config", _write(tmp_path, TINY), "--out", str(d)])
    rec = json.loads((d / "record.json").read_text())
    rec["schema_version"] = SCHEMA_VERSION + 1
    (d / "record.json").write_text(json.dumps(rec))
    assert main(["report", str(d)]) == 2
