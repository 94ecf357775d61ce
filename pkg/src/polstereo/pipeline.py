"""Stage runners over a manifest-tagged dataset directory.

Every stage reads its inputs from the directory and writes its outputs
back into it, adding their roles to the manifest.  ``run_pipeline`` just
runs the stages in order, so it produces exactly what the individual
subcommands produce.
"""

from __future__ import annotations

import logging
import shutil
from pathlib import Path

import numpy as np

from . import albedo as albedo_mod
from . import depth as depth_mod
from . import io, mrf, stereo
from .config import PipelineConfig
from .evaluation import MetricsReport, depth_mae, normal_mae
from .geometry import ScalarMap, StereoRig, VectorMap, backproject
from .polarisation import PolarisationImage, candidates, decompose

log = logging.getLogger(__name__)

STAGES = ("stereo", "disambiguate", "albedo", "depth", "eval")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage


class Inputs:
    """Decomposed polarisation data and calibration of a dataset."""

    def __init__(self, man: io.Manifest, cfg: PipelineConfig):
        self.man = man
        entries = man.files.get("polariser_stack")
        if not entries:
            raise FileNotFoundError(f"{man.root}: manifest lists no polariser images")
        angles = np.deg2rad([e["angle_deg"] for e in entries])
        stack = [io.read_intensity_image(man.root / e["file"]) for e in entries]
        fg = io.read_mask(man.path("mask")) if man.has("mask") else None
        self.pol: PolarisationImage = decompose(angles, stack, fg)
        self.mask = self.pol.mask
        self.rig: StereoRig = io.read_rig(man.path("rig"))
        self.cam = self.rig.left
        light = cfg.light if cfg.light is not None else man.meta.get("light")
        if light is None:
            raise ValueError("no light direction in config or manifest")
        light = np.asarray(light, dtype=np.float64)
        self.light = light / np.linalg.norm(light)


def _open(data) -> io.Manifest:
    return io.Manifest.load(data)


def _save(man: io.Manifest, cfg: PipelineConfig) -> None:
    man.meta["config"] = cfg.replace(data=None, out=None).to_dict()
    man.save()


def _run(stage: str, fn, *args):
    try:
        return fn(*args)
    except StageError:
        raise
    except (OSError, KeyError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        raise StageError(stage, str(exc)) from exc


# -- stages --------------------------------------------------------------


def _stereo(data, cfg: PipelineConfig) -> io.Manifest:
    man = _open(data)
    inp = Inputs(man, cfg)
    pol = inp.pol
    io.write_scalar_map(man.add("phi", "pol_phi.pfm"), ScalarMap(pol.phi, pol.mask))
    io.write_scalar_map(man.add("rho", "pol_rho.pfm"), ScalarMap(pol.rho, pol.mask))
    io.write_scalar_map(man.add("iun", "pol_iun.pfm"), ScalarMap(pol.iun, pol.mask))
    io.write_mask(man.add("pol_mask", "pol_mask.png"), pol.mask)
    if cfg.skip_stereo or cfg.guide_depth:
        raw = io.read_scalar_map(cfg.guide_depth)
        if raw.data.shape != inp.mask.shape:
            raise ValueError("external guide depth does not match the image size")
        measured = ScalarMap(raw.data, raw.mask & (raw.data > 0))
        man.meta["guide_source"] = "external"
    else:
        right = io.read_intensity_image(man.path("right_image"))
        disp = stereo.sgm_disparity(inp.pol.iun, right, cfg.sgm)
        io.write_scalar_map(man.add("disparity", "disparity.pfm"), disp)
        measured = stereo.disparity_to_depth(disp, inp.rig)
        man.meta["guide_source"] = "stereo"
    guide = stereo.fill_and_smooth(measured, inp.mask, inp.cam, cfg.max_hole, cfg.median)
    if not guide.valid.any():
        raise ValueError("guide depth has no valid pixels on the foreground")
    io.write_scalar_map(man.add("guide_depth", "guide_depth.pfm"), guide.depth)
    io.write_vector_map(man.add("guide_normals", "guide_normals.pfm"), guide.normals)
    io.write_mask(man.add("guide_valid", "guide_valid.png"), guide.valid)
    _save(man, cfg)
    return man


def _disambiguate(data, cfg: PipelineConfig) -> io.Manifest:
    man = _open(data)
    inp = Inputs(man, cfg)
    guide_n = io.read_vector_map(man.path("guide_normals"))
    cands = candidates(inp.pol, cfg.eta, inp.cam)
    L0 = mrf.initial_specular_mask(inp.pol.iun, cfg.sat_threshold, man.meta.get("full_range", 1.0)) & inp.mask
    graph = mrf.build_graph(cands, guide_n, L0, inp.mask, cfg.weights)
    res = mrf.solve_bp(graph, cfg.bp)
    labels = np.where(res.label_map >= 0, res.label_map.astype(np.float64), np.nan)
    io.write_pfm(man.add("labels", "labels.pfm"), labels)
    io.write_vector_map(man.add("nprime", "nprime.pfm"), res.normals)
    io.write_mask(man.add("initial_specular", "L0.png"), L0)
    io.write_mask(man.add("specular", "L.png"), res.L)
    io.write_csv(
        man.add("energy_trace", "energy_trace.csv"), ["iteration", "energy"], [[i, e] for i, e in enumerate(res.trace)]
    )
    man.meta["bp"] = {
        "energy": res.energy,
        "unary_argmin_energy": res.baseline_energy,
        "iterations": res.iterations,
        "converged": res.converged,
    }
    _save(man, cfg)
    return man


def _albedo(data, cfg: PipelineConfig) -> io.Manifest:
    man = _open(data)
    inp = Inputs(man, cfg)
    nprime = io.read_vector_map(man.path("nprime"))
    L = io.read_mask(man.path("specular"))
    res = albedo_mod.estimate_albedo(inp.pol.iun, nprime.data, L, inp.light, inp.mask, cfg.lam_I, cfg.t)
    filled = albedo_mod.fill_specular(res.albedo, L, inp.mask)
    io.write_scalar_map(man.add("albedo_diffuse", "albedo_diffuse.pfm"), res.albedo)
    io.write_scalar_map(man.add("albedo", "albedo.pfm"), filled)
    man.meta["albedo"] = {"clamped": res.n_clamped, "objective": res.objective}
    _save(man, cfg)
    return man


def _depth(data, cfg: PipelineConfig) -> io.Manifest:
    man = _open(data)
    inp = Inputs(man, cfg)
    nprime = io.read_vector_map(man.path("nprime"))
    L = io.read_mask(man.path("specular"))
    alb = io.read_scalar_map(man.path("albedo"))
    guide = io.read_scalar_map(man.path("guide_depth"))
    valid = io.read_mask(man.path("guide_valid"))
    mask = depth_mod.prune_isolated(inp.mask & guide.mask & nprime.mask & alb.mask)
    if not mask.any():
        raise ValueError("no pixels left to reconstruct")
    N_op, ix = depth_mod.build_normal_operator(inp.cam, mask)
    system = depth_mod.assemble(
        depth_mod.phase_rows(inp.pol, L, ix),
        depth_mod.guide_normal_rows(nprime.data, ix),
        depth_mod.shading_rows(inp.pol, alb.data, L, inp.light, cfg.eta, inp.cam, ix),
        N_op,
        ix,
        guide.data,
        valid & mask,
        cfg.lam,
    )
    sol = depth_mod.solve_depth(system, cfg.solver)
    Z = np.where(mask, sol.depth, 0.0)
    if np.any(Z[mask] <= 0):
        log.warning("depth: %d non-positive depths", int(np.sum(Z[mask] <= 0)))
    io.write_scalar_map(man.add("depth", "depth.pfm"), ScalarMap(Z, mask))
    normals, ok = depth_mod.depth_normals(Z, mask, inp.cam)
    io.write_vector_map(man.add("normals", "normals.pfm"), VectorMap(normals, ok))
    io.write_ply(man.add("mesh", "mesh.ply"), backproject(Z, inp.cam, mask), mask)
    man.meta["depth"] = {
        "method": sol.method,
        "converged": sol.converged,
        "residuals": sol.residuals,
        "unknowns": ix.n,
        "anchors": int(system.W.shape[0]),
    }
    _save(man, cfg)
    return man


def _eval(data, cfg: PipelineConfig) -> MetricsReport:
    man = _open(data)
    rep = MetricsReport()
    est = io.read_scalar_map(man.path("depth"))
    if not man.has("gt_depth"):
        raise FileNotFoundError("dataset has no ground truth to evaluate against")
    gt = io.read_scalar_map(man.path("gt_depth"))
    mae, _, px = depth_mae(est, gt)
    rep.add("depth_mae", mae, "mm", px)
    if man.has("guide_depth"):
        g = io.read_scalar_map(man.path("guide_depth"))
        # stereo scored on the same pixels as the reconstruction
        mae, _, px = depth_mae(ScalarMap(g.data, g.mask & est.mask), gt)
        rep.add("guide_depth_mae", mae, "mm", px)
    if man.has("gt_normals"):
        gn = io.read_vector_map(man.path("gt_normals"))
        for role, name in (("normals", "normal_mae"), ("guide_normals", "guide_normal_mae"), ("nprime", "nprime_mae")):
            if man.has(role):
                n = io.read_vector_map(man.path(role))
                err, px = normal_mae(VectorMap(n.data, n.mask & est.mask), gn)
                rep.add(name, err, "deg", px)
    if man.has("gt_albedo") and man.has("albedo"):
        ga, a = io.read_scalar_map(man.path("gt_albedo")), io.read_scalar_map(man.path("albedo"))
        m = ga.mask & a.mask & est.mask
        rep.add("albedo_mae", float(np.mean(np.abs(a.data[m] - ga.data[m]))), "", int(m.sum()))
    if man.has("gt_specular") and man.has("specular"):
        gs, L = io.read_mask(man.path("gt_specular")), io.read_mask(man.path("specular"))
        m = est.mask
        rep.add("specular_agreement", float(np.mean(gs[m] == L[m])), "fraction", int(m.sum()))
    rep.write_csv(man.add("metrics", "metrics.csv"))
    _save(man, cfg)
    return rep


def run_stage(stage: str, data, cfg: PipelineConfig):
    fn = {"stereo": _stereo, "disambiguate": _disambiguate, "albedo": _albedo, "depth": _depth, "eval": _eval}
    if stage not in fn:
        raise ValueError(f"unknown stage {stage!r}")
    return _run(stage, fn[stage], data, cfg)


def run_pipeline(cfg: PipelineConfig, evaluate: bool = True) -> MetricsReport | None:
    """Run stereo, disambiguation, albedo and depth on ``cfg.data``.

    With ``cfg.out`` set the dataset is first copied there and all outputs
    go to the copy.
    """
    if not cfg.data:
        raise StageError("input", "no dataset directory given")
    data = Path(cfg.data)
    if not (data / io.MANIFEST_NAME).exists():
        raise StageError("input", f"{data} has no {io.MANIFEST_NAME}")
    if cfg.out and Path(cfg.out).resolve() != data.resolve():
        shutil.copytree(data, cfg.out, dirs_exist_ok=True)
        data = Path(cfg.out)
    for stage in STAGES[:-1]:
        log.info("running stage %s", stage)
        run_stage(stage, data, cfg)
    if evaluate and _open(data).has("gt_depth"):
        return run_stage("eval", data, cfg)
    return None
