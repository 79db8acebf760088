"""End-to-end driver: every stage reads the previous stage's files from the
output directory and writes its own, so the chained subcommands and
``full-pipeline`` produce identical artifacts.

Layout of ``out``::

    library/index.json, library/NN_name.obj, library/NN_name.controllers.json
    views/index.json, views/descriptors.npy, views/sSS_pPPP.png
    pose.json            estimate-pose
    retrieval.json       retrieve (plus target_labels.json)
    correspondence.json  correspond
    reconstructed.json   reconstruct
    structure.json, deformed_controllers.json, trace.json   optimize
    deformed.obj, overlay.svg, report.json                  deform
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import tomli

from . import controllers as ctl
from .correspondence import (SegmentCorrespondence, clean_labels, lift_to_segments, match_points,
                             outer_param, transfer_labels)
from .geometry import MeshError, load_mesh, normalize_model, save_mesh
from .optimization import OptimizationConfig, OptimizationError, analyze_structure, deform_mesh, optimize
from .reconstruction import (TOL_PAIR, ReconstructionError, build_run_matches, detect_symmetric_pairs,
                             paired_edges, reconstruct_all)
from .render import (BACKGROUND, CameraPose, LabeledSilhouette, RenderError, SilhouetteImage,
                     canonical_scale, default_grid, extract_contour, generate_pose_set, load_png,
                     rasterize_loops, render_silhouette, save_png, save_svg)
from .retrieval import DescriptorIndex, RetrievalError, descriptor, retrieve_candidate

STAGES = ("fit-controllers", "render-views", "estimate-pose", "retrieve", "correspond",
          "reconstruct", "optimize", "deform")


class PipelineError(Exception):
    """Invalid or empty input; maps to exit code 2."""

    exit_code = 2


class MissingArtifactError(PipelineError):
    def __init__(self, path: Path, stage: str):
        super().__init__(f"missing {path}; run the '{stage}' subcommand first")
        self.stage = stage


class DegenerateGeometryError(PipelineError):
    exit_code = 3


@dataclass
class PipelineConfig:
    library: Optional[Path] = None
    target: Optional[Path] = None
    out: Path = Path("out")
    poses: int = 360
    resolution: int = 256
    n_samples: int = 128
    n_profiles: int = ctl.DEFAULT_PROFILES
    top_k: int = 5
    refine_pose: bool = True
    refine_seeds: int = 3
    tol_pair: float = TOL_PAIR
    seed: int = 0
    timings: bool = True
    optimization: OptimizationConfig = field(default_factory=OptimizationConfig)

    def __post_init__(self):
        self.out = Path(self.out)
        self.library = None if self.library is None else Path(self.library)
        self.target = None if self.target is None else Path(self.target)
        if self.poses < 1:
            raise PipelineError("poses must be >= 1")
        if self.resolution < 8:
            raise PipelineError("resolution must be >= 8")
        if self.n_samples < 8:
            raise PipelineError("n_samples must be >= 8")
        if self.n_profiles < 2:
            raise PipelineError("n_profiles must be >= 2")
        if self.top_k < 1:
            raise PipelineError("top_k must be >= 1")
        if self.refine_seeds < 1:
            raise PipelineError("refine_seeds must be >= 1")
        if self.tol_pair < 0:
            raise PipelineError("tol_pair must be non-negative")


def load_config(path, **overrides) -> PipelineConfig:
    """Read a TOML config; relative paths resolve against the file's directory.

    ``overrides`` with value ``None`` are ignored.
    """
    path = Path(path)
    try:
        doc = tomli.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise PipelineError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as e:
        raise PipelineError(f"invalid config {path}: {e}") from None
    opt_doc = doc.pop("optimization", {})
    known = {f.name for f in fields(PipelineConfig)} - {"optimization"}
    unknown = set(doc) - known
    if unknown:
        raise PipelineError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    for key in ("library", "target", "out"):
        if key in doc:
            p = Path(doc[key])
            doc[key] = p if p.is_absolute() else path.parent / p
    doc.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return PipelineConfig(optimization=OptimizationConfig(**opt_doc), **doc)
    except (TypeError, OptimizationError) as e:
        raise PipelineError(f"invalid config: {e}") from None


@dataclass
class RunReport:
    pose: dict
    candidate: int
    candidate_name: str
    iou_before: float
    iou_after: float
    trace: dict
    timings_ms: Optional[dict] = None

    def to_json(self) -> dict:
        doc = asdict(self)
        if self.timings_ms is None:
            del doc["timings_ms"]
        return doc


def compute_iou(a, b) -> float:
    ma = a.mask if isinstance(a, SilhouetteImage) else np.asarray(a, dtype=bool)
    mb = b.mask if isinstance(b, SilhouetteImage) else np.asarray(b, dtype=bool)
    if ma.shape != mb.shape:
        raise PipelineError(f"IoU needs equal resolutions, got {ma.shape} and {mb.shape}")
    union = np.count_nonzero(ma | mb)
    if union == 0:
        return 1.0
    return np.count_nonzero(ma & mb) / union


# ---------------------------------------------------------------------------
# artifact helpers
# ---------------------------------------------------------------------------

def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(cfg: PipelineConfig, rel: str, stage: str):
    path = cfg.out / rel
    if not path.is_file():
        raise MissingArtifactError(path, stage)
    return json.loads(path.read_text(encoding="utf-8"))


def _pose_from_json(doc: dict, resolution: int) -> CameraPose:
    return CameraPose(doc["azimuth"], doc["elevation"], ortho_scale=canonical_scale(resolution))


def _pose_json(index: int, pose: CameraPose) -> dict:
    return {"index": index, "azimuth": pose.azimuth, "elevation": pose.elevation,
            "azimuth_deg": math.degrees(pose.azimuth), "elevation_deg": math.degrees(pose.elevation)}


def _library(cfg: PipelineConfig) -> list[dict]:
    return _read_json(cfg, "library/index.json", "fit-controllers")["models"]


def _model_mesh(cfg: PipelineConfig, entry: dict):
    return load_mesh(cfg.out / entry["mesh"])


def _model_controllers(cfg: PipelineConfig, entry: dict) -> list:
    doc = json.loads((cfg.out / entry["controllers"]).read_text(encoding="utf-8"))
    return ctl.controllers_from_json(doc)


def load_target(path: Optional[Path], resolution: int) -> SilhouetteImage:
    """PNG mask (nonzero = foreground) or JSON polylines ({"loops": [{"points": ...}]})."""
    if path is None:
        raise PipelineError("no target silhouette configured")
    path = Path(path)
    if not path.is_file():
        raise PipelineError(f"target silhouette not found: {path}")
    try:
        if path.suffix.lower() == ".json":
            sil = LabeledSilhouette.from_json(json.loads(path.read_text(encoding="utf-8")))
            mask = rasterize_loops(sil.loops, resolution, resolution)
        else:
            mask = load_png(path).mask
    except (ValueError, KeyError, OSError, RenderError) as e:
        raise PipelineError(f"unreadable target silhouette {path}: {e}") from None
    if mask.shape != (resolution, resolution):
        raise PipelineError(f"target is {mask.shape[1]}x{mask.shape[0]}, expected {resolution}x{resolution}")
    if not mask.any():
        raise PipelineError("target silhouette is empty")
    return SilhouetteImage(np.where(mask, 0, BACKGROUND).astype(np.int32))


def _unlabeled_contour(img: SilhouetteImage) -> LabeledSilhouette:
    return LabeledSilhouette(extract_contour(img).loops)


# ---------------------------------------------------------------------------
# fitting steps shared by the stages and the pose refinement
# ---------------------------------------------------------------------------

def correspond_silhouettes(mesh, target: SilhouetteImage, pose: CameraPose, res: int, n: int) -> dict:
    cimg = render_silhouette(mesh, pose, res)
    s_c = clean_labels(extract_contour(cimg))
    s_o = transfer_labels(mesh, pose, _unlabeled_contour(target), res, align=False)
    c_param, o_param = outer_param(s_c, n), outer_param(s_o, n)
    corr = match_points(c_param, o_param)
    segs = lift_to_segments(corr, c_param.labels, o_param.n)
    return {"image": cimg, "s_c": s_c, "s_o": s_o, "c_param": c_param, "o_param": o_param,
            "corr": corr, "segments": segs}


def reconstruct_from(match: dict, omega_o: list, tol_pair: float) -> list:
    runs = build_run_matches(match["image"], match["c_param"], match["o_param"], match["segments"], omega_o)
    symmetry = detect_symmetric_pairs(omega_o, tol_pair)
    try:
        omega_r = reconstruct_all(omega_o, runs, match["image"].view, symmetry,
                                  paired_edges(match["s_c"], match["s_o"]))
    except ReconstructionError as e:
        raise DegenerateGeometryError(str(e)) from None
    return [replace(c, is_external=c.id in runs) for c in omega_r]


def optimize_controllers(omega_o: list, omega_r: list, cfg: PipelineConfig, graph=None):
    try:
        if graph is None:
            graph = analyze_structure(omega_o, cfg.optimization.tau_prox, cfg.tol_pair)
        omega_d, trace = optimize(omega_o, omega_r, graph, cfg.optimization)
    except OptimizationError as e:
        raise PipelineError(str(e)) from None
    return graph, omega_d, trace


def deform(mesh, omega_o: list, omega_d: list, binding=None):
    if binding is None:
        binding = ctl.bind_mesh(mesh, omega_o)
    try:
        return deform_mesh(mesh, binding, omega_o, omega_d)
    except OptimizationError as e:
        raise PipelineError(str(e)) from None


def refine_pose(mesh, omega_o: list, target: SilhouetteImage, seeds: list, grid: tuple, poses: list,
                res: int, cfg: PipelineConfig) -> tuple[int, list]:
    """Greedy search over the pose grid for the pose whose fitted deformation best
    matches the target (IoU), starting from the best of the seed poses.

    Returns the chosen pose index and the evaluated (index, IoU) pairs in order.
    """
    n_az, n_el = grid
    graph = analyze_structure(omega_o, cfg.optimization.tau_prox, cfg.tol_pair)
    binding = ctl.bind_mesh(mesh, omega_o)
    scores: dict = {}
    order = []

    def score(pi: int) -> float:
        if pi not in scores:
            try:
                match = correspond_silhouettes(mesh, target, poses[pi], res, cfg.n_samples)
                omega_r = reconstruct_from(match, omega_o, cfg.tol_pair)
                _, omega_d, _ = optimize_controllers(omega_o, omega_r, cfg, graph)
                after = render_silhouette(deform(mesh, omega_o, omega_d, binding), poses[pi], res)
                scores[pi] = compute_iou(after, target)
            except (PipelineError, RenderError, ValueError):
                scores[pi] = -1.0
            order.append((pi, scores[pi]))
        return scores[pi]

    best = seeds[0]
    for pi in seeds:
        if score(pi) > score(best):
            best = pi
        if scores[best] >= 1.0:
            return best, order
    while scores[best] < 1.0:
        e, a = divmod(best, n_az)
        around = [(e + de) * n_az + (a + da) % n_az
                  for de in (-1, 0, 1) for da in (-1, 0, 1)
                  if (de or da) and 0 <= e + de < n_el]
        step = max(around, key=lambda pi: (score(pi), -pi))
        if scores[step] <= scores[best]:
            break
        best = step
    return best, order


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_fit_controllers(cfg: PipelineConfig) -> None:
    lib = cfg.library
    if lib is None or not lib.exists():
        raise PipelineError(f"library not found: {lib}")
    files = sorted(lib.glob("*.obj")) if lib.is_dir() else [lib]
    if not files:
        raise PipelineError(f"library {lib} is empty")
    models = []
    for i, f in enumerate(files):
        try:
            mesh, sim = normalize_model(load_mesh(f))
        except MeshError as e:
            raise PipelineError(f"cannot load {f}: {e}") from None
        stem = f"{i:02d}_{f.stem}"
        mesh_rel, ctl_rel = f"library/{stem}.obj", f"library/{stem}.controllers.json"
        (cfg.out / "library").mkdir(parents=True, exist_ok=True)
        save_mesh(mesh, cfg.out / mesh_rel)
        # fit on the written mesh so every later stage sees identical geometry
        stored = load_mesh(cfg.out / mesh_rel)
        _write_json(cfg.out / ctl_rel, ctl.controllers_to_json(ctl.fit_controllers(stored, cfg.n_profiles)))
        models.append({"id": i, "name": f.stem, "mesh": mesh_rel, "controllers": ctl_rel,
                       "scale": sim.scale, "translation": sim.translation.tolist()})
    _write_json(cfg.out / "library/index.json", {"models": models})


def stage_render_views(cfg: PipelineConfig) -> None:
    models = _library(cfg)
    res = cfg.resolution
    try:
        poses = generate_pose_set(cfg.poses, ortho_scale=canonical_scale(res))
    except RenderError as e:
        raise PipelineError(str(e)) from None
    (cfg.out / "views").mkdir(parents=True, exist_ok=True)
    images, rows = [], []
    for entry in models:
        mesh = _model_mesh(cfg, entry)
        for pi, pose in enumerate(poses):
            img = render_silhouette(mesh, pose, res)
            rel = f"views/s{entry['id']:02d}_p{pi:03d}.png"
            save_png(img, cfg.out / rel)
            images.append({"shape": entry["id"], "pose": pi, "file": rel})
            rows.append(descriptor(img).vector())
    np.save(cfg.out / "views/descriptors.npy", np.stack(rows))
    _write_json(cfg.out / "views/index.json", {
        "resolution": res, "grid": list(default_grid(cfg.poses)),
        "poses": [_pose_json(i, p) for i, p in enumerate(poses)], "images": images})


def stage_estimate_pose(cfg: PipelineConfig) -> None:
    views = _read_json(cfg, "views/index.json", "render-views")
    res = views["resolution"]
    desc_path = cfg.out / "views/descriptors.npy"
    if not desc_path.is_file():
        raise MissingArtifactError(desc_path, "render-views")
    target = load_target(cfg.target, res)
    poses = [_pose_from_json(p, res) for p in views["poses"]]
    tags = np.array([[im["shape"], im["pose"]] for im in views["images"]], dtype=np.int64)
    index = DescriptorIndex.from_arrays(np.load(desc_path), tags, [poses[t] for _, t in tags])
    est = index.query(target, min(cfg.top_k, len(tags)))
    best = est.best
    doc = {"resolution": res, "ranking": est.to_json(), "refinement": []}
    pose_index = best.pose_index
    if cfg.refine_pose and best.score > 0:
        # an inexact match means the object differs from every render; verify by fitting
        entry = _library(cfg)[best.shape]
        ranked = index.query(target, len(tags)).ranking
        seeds, seen = [], set()
        for c in ranked:
            if c.shape == best.shape and c.score not in seen:
                seen.add(c.score)
                seeds.append(c.pose_index)
            if len(seeds) == cfg.refine_seeds:
                break
        pose_index, evaluated = refine_pose(_model_mesh(cfg, entry), _model_controllers(cfg, entry), target,
                                            seeds, tuple(views["grid"]), poses, res, cfg)
        doc["refinement"] = [{"index": i, "iou": v} for i, v in evaluated]
    chosen = _pose_json(pose_index, poses[pose_index])
    chosen.update({"shape": best.shape, "score": best.score if pose_index == best.pose_index else None})
    doc["chosen"] = chosen
    _write_json(cfg.out / "pose.json", doc)


def _stage_context(cfg: PipelineConfig):
    pose_doc = _read_json(cfg, "pose.json", "estimate-pose")
    res = pose_doc["resolution"]
    return pose_doc, res, _pose_from_json(pose_doc["chosen"], res)


def stage_retrieve(cfg: PipelineConfig) -> None:
    pose_doc, res, pose = _stage_context(cfg)
    models = _library(cfg)
    meshes = [_model_mesh(cfg, m) for m in models]
    target = load_target(cfg.target, res)
    rep = pose_doc["chosen"]["shape"]
    labeled = transfer_labels(meshes[rep], pose, _unlabeled_contour(target), res, align=False)
    ranking = retrieve_candidate(labeled, meshes, pose, res)
    _write_json(cfg.out / "target_labels.json", labeled.to_json())
    _write_json(cfg.out / "retrieval.json", {
        "representative": rep, "candidate": ranking[0][0],
        "ranking": [{"id": i, "name": models[i]["name"], "distance": d} for i, d in ranking]})


def _candidate(cfg: PipelineConfig):
    doc = _read_json(cfg, "retrieval.json", "retrieve")
    entry = _library(cfg)[doc["candidate"]]
    return entry, _model_mesh(cfg, entry), _model_controllers(cfg, entry)


def stage_correspond(cfg: PipelineConfig) -> None:
    _, res, pose = _stage_context(cfg)
    entry, mesh, _ = _candidate(cfg)
    match = correspond_silhouettes(mesh, load_target(cfg.target, res), pose, res, cfg.n_samples)
    doc = match["corr"].to_json()
    doc.update({"candidate": entry["id"], "n_samples": cfg.n_samples,
                "segments": match["segments"].to_json(), "object_silhouette": match["s_o"].to_json()})
    _write_json(cfg.out / "correspondence.json", doc)


def stage_reconstruct(cfg: PipelineConfig) -> None:
    _, res, pose = _stage_context(cfg)
    doc = _read_json(cfg, "correspondence.json", "correspond")
    entry, mesh, omega_o = _candidate(cfg)
    if doc["candidate"] != entry["id"]:
        raise PipelineError("correspondence.json belongs to another candidate; rerun 'correspond'")
    cimg = render_silhouette(mesh, pose, res)
    s_c = clean_labels(extract_contour(cimg))
    s_o = LabeledSilhouette.from_json(doc["object_silhouette"])
    n = doc["n_samples"]
    match = {"image": cimg, "s_c": s_c, "s_o": s_o, "c_param": outer_param(s_c, n),
             "o_param": outer_param(s_o, n), "segments": SegmentCorrespondence.from_json(doc["segments"])}
    omega_r = reconstruct_from(match, omega_o, cfg.tol_pair)
    _write_json(cfg.out / "reconstructed.json", ctl.controllers_to_json(omega_r))


def stage_optimize(cfg: PipelineConfig) -> None:
    _, _, omega_o = _candidate(cfg)
    omega_r = ctl.controllers_from_json(_read_json(cfg, "reconstructed.json", "reconstruct"))
    graph, omega_d, trace = optimize_controllers(omega_o, omega_r, cfg)
    _write_json(cfg.out / "structure.json", graph.to_json())
    _write_json(cfg.out / "deformed_controllers.json", ctl.controllers_to_json(omega_d))
    _write_json(cfg.out / "trace.json", trace.to_json())


def _overlay_extra(target: SilhouetteImage) -> str:
    paths = []
    for loop in extract_contour(target).loops:
        d = "M " + " L ".join(f"{x:g} {y:g}" for x, y in loop)
        paths.append(f'<path d="{d}" fill="none" stroke="black" stroke-dasharray="2 2" data-role="target"/>')
    return "\n" + "\n".join(paths)


def stage_deform(cfg: PipelineConfig) -> RunReport:
    pose_doc, res, pose = _stage_context(cfg)
    entry, mesh, omega_o = _candidate(cfg)
    omega_d = ctl.controllers_from_json(_read_json(cfg, "deformed_controllers.json", "optimize"))
    trace = _read_json(cfg, "trace.json", "optimize")
    save_mesh(deform(mesh, omega_o, omega_d), cfg.out / "deformed.obj")
    # score the written file, not the in-memory mesh
    deformed = load_mesh(cfg.out / "deformed.obj")
    target = load_target(cfg.target, res)
    before = render_silhouette(mesh, pose, res)
    after = render_silhouette(deformed, pose, res)
    save_svg(extract_contour(after), cfg.out / "overlay.svg", res, res, _overlay_extra(target))
    timings = None
    if cfg.timings:
        path = cfg.out / "timings.json"
        timings = json.loads(path.read_text(encoding="utf-8")) if path.is_file() else {}
    report = RunReport(
        pose=pose_doc["chosen"], candidate=entry["id"], candidate_name=entry["name"],
        iou_before=compute_iou(before, target), iou_after=compute_iou(after, target),
        trace={"iterations": trace["iterations"], "reason": trace["reason"],
               "final_movement": trace["movements"][-1] if trace["movements"] else 0.0},
        timings_ms=timings)
    _write_json(cfg.out / "report.json", report.to_json())
    return report


_STAGE_FUNCS = {
    "fit-controllers": stage_fit_controllers,
    "render-views": stage_render_views,
    "estimate-pose": stage_estimate_pose,
    "retrieve": stage_retrieve,
    "correspond": stage_correspond,
    "reconstruct": stage_reconstruct,
    "optimize": stage_optimize,
    "deform": stage_deform,
}


def run_stage(name: str, cfg: PipelineConfig):
    if name not in _STAGE_FUNCS:
        raise PipelineError(f"unknown stage {name!r}")
    cfg.out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        result = _STAGE_FUNCS[name](cfg)
    except (RetrievalError, RenderError, MeshError, ctl.ControllerError) as e:
        raise PipelineError(f"{name}: {e}") from None
    if cfg.timings:
        path = cfg.out / "timings.json"
        doc = json.loads(path.read_text(encoding="utf-8")) if path.is_file() else {}
        doc[name] = round((time.perf_counter() - t0) * 1000, 3)
        _write_json(path, doc)
        if name == "deform":
            # the report was written before this stage's own timing was known
            result.timings_ms = doc
            _write_json(cfg.out / "report.json", result.to_json())
    return result


def run_pipeline(cfg: PipelineConfig) -> RunReport:
    report = None
    for name in STAGES:
        report = run_stage(name, cfg)
    return report
