import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from polstereo import __version__, io
from polstereo.cli import main
from polstereo.config import SCHEMA_VERSION, ConfigError, PipelineConfig, load_config
from polstereo.pipeline import STAGES, StageError, run_pipeline

OUTPUTS = (
    "guide_depth", "guide_normals", "labels", "nprime", "specular", "albedo", "depth", "normals",
)  # fmt: skip


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "ds"
    assert main(["synth", "--out", str(root), "--size", "192", "--noise", "0.005"]) == 0
    return root


def _copy(src, dst):
    shutil.copytree(src, dst)
    return dst


def test_config_defaults_and_roundtrip(tmp_path):
    cfg = PipelineConfig()
    assert (cfg.eta, cfg.k, cfg.lam_I, cfg.t) == (1.4, 0.1, 1.0, 0.01)
    d = cfg.to_dict()
    assert d["schema_version"] == SCHEMA_VERSION
    io.write_json(tmp_path / "c.json", d)
    assert load_config(tmp_path / "c.json") == cfg


@pytest.mark.parametrize(
    "doc, key",
    [({"lamda": 1.0}, "lamda"), ({"sgm": {"p1": 3}}, "sgm.'p1'"), ({"bp": {"iterations": 3}}, "bp.'iterations'")],
)
def test_unknown_keys_rejected(doc, key):
    with pytest.raises(ConfigError) as err:
        PipelineConfig.from_dict(doc)
    assert key in str(err.value)


def test_invalid_values_rejected():
    for doc in ({"eta": 0.9}, {"lam": 0}, {"skip_stereo": True}, {"schema_version": 99}, {"sgm": {"P1": 9, "P2": 1}}):
        with pytest.raises(ConfigError):
            PipelineConfig.from_dict(doc)


def test_version_flag():
    out = subprocess.run(
        [sys.executable, "-m", "polstereo.cli", "--version"], capture_output=True, text=True, check=False
    )
    assert out.returncode == 0
    assert out.stdout.strip() == f"polstereo {__version__} (config schema {SCHEMA_VERSION})"


def test_bad_config_file_exit_code(tmp_path, capsys, dataset):
    io.write_json(tmp_path / "c.json", {"bogus_key": 1})
    assert main(["pipeline", "--data", str(dataset), "--config", str(tmp_path / "c.json")]) == 1
    assert "bogus_key" in capsys.readouterr().err


def test_stage_error_names_stage(tmp_path, capsys, dataset):
    ds = _copy(dataset, tmp_path / "ds")
    assert main(["depth", "--data", str(ds)]) == 1  # nothing upstream has run
    assert "stage 'depth' failed" in capsys.readouterr().err
    with pytest.raises(StageError):
        run_pipeline(PipelineConfig(data=str(tmp_path / "missing")))


def test_pipeline_equals_manual_stages(tmp_path, dataset, capsys):
    a = _copy(dataset, tmp_path / "a")
    b = _copy(dataset, tmp_path / "b")
    assert main(["pipeline", "--data", str(a)]) == 0
    for stage in STAGES:
        assert main([stage, "--data", str(b)]) == 0, capsys.readouterr().err
    ma, mb = io.Manifest.load(a), io.Manifest.load(b)
    for role in OUTPUTS + ("metrics", "mesh"):
        assert ma.path(role).read_bytes() == mb.path(role).read_bytes(), role
    rows = (a / "metrics.csv").read_text().splitlines()
    assert rows[0] == "metric,value,unit,pixels" and any(r.startswith("depth_mae,") for r in rows)


def test_pipeline_out_leaves_input_untouched(tmp_path, dataset):
    before = sorted(p.name for p in dataset.iterdir())
    rep = run_pipeline(PipelineConfig(data=str(dataset), out=str(tmp_path / "run")))
    assert sorted(p.name for p in dataset.iterdir()) == before
    assert (tmp_path / "run" / "depth.pfm").exists() and rep.get("depth_mae") < 2.0
    meta = io.Manifest.load(tmp_path / "run").meta
    assert meta["config"]["lam"] == PipelineConfig().lam and meta["guide_source"] == "stereo"


def test_skip_stereo_with_external_guide(tmp_path, dataset):
    ds = _copy(dataset, tmp_path / "ds")
    gt = io.read_scalar_map(ds / "gt_depth.pfm")
    rng = np.random.default_rng(0)
    noisy = np.where(gt.mask, gt.data + rng.normal(0, 1e-3, gt.data.shape), np.nan)
    io.write_pfm(tmp_path / "kinect.pfm", noisy)
    assert main(["pipeline", "--data", str(ds), "--skip-stereo", "--guide-depth", str(tmp_path / "kinect.pfm")]) == 0
    man = io.Manifest.load(ds)
    assert man.meta["guide_source"] == "external" and not man.has("disparity")
    assert man.has("depth")


def test_depth_copies_and_eval_flags(tmp_path, dataset, capsys):
    ds = _copy(dataset, tmp_path / "ds")
    for stage in STAGES[:3]:
        assert main([stage, "--data", str(ds)]) == 0
    assert (
        main(
            [
                "depth",
                "--data",
                str(ds),
                "--lambda",
                "0.05",
                "--out",
                str(tmp_path / "z.pfm"),
                "--mesh",
                str(tmp_path / "m.ply"),
            ]
        )
        == 0
    )
    assert (tmp_path / "z.pfm").read_bytes() == (ds / "depth.pfm").read_bytes()
    assert (tmp_path / "m.ply").read_bytes().startswith(b"ply\n")
    args = ["eval", "--est", str(ds / "depth.pfm"), "--gt", str(ds / "gt_depth.pfm"), "--align-scale"]
    args += ["--normals-est", str(ds / "normals.pfm"), "--normals-gt", str(ds / "gt_normals.pfm")]
    assert main(args + ["--out", str(tmp_path / "m.csv")]) == 0
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert [ln.split(",")[0] for ln in lines[1:]] == ["depth_mae", "scale_applied", "normal_mae"]
    assert main(["eval", "--est", str(ds / "depth.pfm")]) == 1


def test_stage_flags_reach_config(tmp_path, dataset):
    ds = _copy(dataset, tmp_path / "ds")
    assert main(["stereo", "--data", str(ds), "--min-disp", "40", "--max-disp", "100"]) == 0
    assert (
        main(["disambiguate", "--data", str(ds), "--k", "0.2", "--w-pair", "2", "--w-tern", "0.5", "--iters", "5"]) == 0
    )
    assert main(["albedo", "--data", str(ds), "--lambda-I", "0.5", "-t", "0.02", "--light", "0,0,1"]) == 0
    cfg = io.Manifest.load(ds).meta["config"]
    assert cfg["lam_I"] == 0.5 and cfg["t"] == 0.02 and cfg["light"] == [0.0, 0.0, 1.0]
    assert json.loads(json.dumps(cfg)) == cfg


def test_noise_sweep_writes_table(tmp_path):
    out = tmp_path / "sweep"
    assert main(["pipeline", "--noise-sweep", "0,0.01", "--out", str(out), "--config", _small_config(tmp_path)]) == 0
    rows = (out / "sweep.csv").read_text().splitlines()
    assert rows[0] == "noise,metric,value,unit,pixels"
    assert {r.split(",")[0] for r in rows[1:]} == {"0.0", "0.01"}


def _small_config(tmp_path):
    path = tmp_path / "small.json"
    io.write_json(path, {"size": 160})
    return str(path)
