"""The pipeline stages behind the subcommands.

Each command reads from one directory, writes a self-contained output
directory (inputs it merely passes through are copied forward), and records a
manifest of everything it consumed. Given identical inputs and config, a
rerun reproduces the output bytes exactly.
"""
from __future__ import annotations

import io
import logging
import shutil
from pathlib import Path

import numpy as np

from ..depth import DepthStack, refine_depth
from ..errors import InvalidSpecError
from ..geometry import Camera, DepthMap, FlowField, RigidTransform, quat_from_matrix
from ..masks import EpiMaskStack, ObjectMaskStack, SegmentStack, epi_masks, select_dynamic_masks
from ..recon import (
    OptimizerConfig,
    ReconState,
    TrainingData,
    VirtualViewConfig,
    deserialize_cloud,
    format_loss_history,
    optimize,
    seed_cloud,
    serialize_cloud,
)
from ..render import render, ssim
from ..scaffold import (
    deserialize_scaffold,
    lift_tracks,
    serialize_scaffold,
    spacetime_init,
)
from ..synth import BACKGROUND_COLOR, PRESETS, generate, retrack
from ..tracks import (
    SamplerConfig,
    deserialize_tracks,
    reidentify,
    sample_track_seeds,
    serialize_tracks,
    track_coverage_report,
)
from .formats import (
    PipelineConfig,
    deserialize_cameras,
    deserialize_config,
    read_ppm,
    read_tensor,
    serialize_cameras,
    serialize_config,
    sha256_file,
    write_manifest,
    write_pgm,
    write_ppm,
    write_tensor,
)

log = logging.getLogger(__name__)

PSNR_CAP_DB = 99.0


# --- shared directory plumbing -----------------------------------------------


def load_config(path: Path | str | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    return deserialize_config(Path(path).read_text())


def _prepare_out(in_dir: Path | None, out_dir: Path) -> None:
    """Create the output directory and carry the upstream artifacts forward.

    Manifests are not carried: each directory describes one command.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    if in_dir is None or in_dir.resolve() == out_dir.resolve():
        return
    for src in sorted(in_dir.rglob("*")):
        if src.is_dir() or src.name == "manifest.txt":
            continue
        dst = out_dir / src.relative_to(in_dir)
        dst.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(src, dst)


def _hash_inputs(in_dir: Path, names: list[str]) -> dict[str, str]:
    hashes = {}
    for name in names:
        path = in_dir / name
        if not path.is_file():
            raise FileNotFoundError(f"missing input {name} in {in_dir}")
        hashes[name] = sha256_file(path)
    return hashes


def _read_meta(in_dir: Path) -> dict[str, str]:
    meta = {}
    for line in (in_dir / "scene.txt").read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    return meta


def _scene_spec_from_meta(meta: dict[str, str]):
    name = meta["preset"]
    if name not in PRESETS:
        raise InvalidSpecError(f"unknown scene preset {name!r}")
    kwargs = {"seed": int(meta["seed"])}
    if name == "walker" and "frame_count" in meta:
        kwargs["frame_count"] = int(meta["frame_count"])
    return PRESETS[name](**kwargs)


def _load_objects(in_dir: Path) -> ObjectMaskStack:
    ids_line = (in_dir / "objects.txt").read_text().strip()
    if not ids_line.startswith("# objects v1 ids="):
        raise ValueError(f"{in_dir}/objects.txt: unrecognized header")
    raw_ids = ids_line.removeprefix("# objects v1 ids=")
    segment_ids = [int(v) for v in raw_ids.split(",") if v]
    masks = read_tensor(in_dir / "object_masks.pten").astype(bool)
    return ObjectMaskStack(masks, segment_ids)


def _load_depth_maps(in_dir: Path, values_name: str) -> list[DepthMap]:
    values = read_tensor(in_dir / values_name).astype(np.float64)
    validity = read_tensor(in_dir / "depth_validity.pten").astype(bool)
    return [DepthMap(values[t], validity[t]) for t in range(values.shape[0])]


def _load_images(in_dir: Path, frame_count: int) -> list[np.ndarray]:
    return [
        read_ppm(in_dir / "images" / f"frame_{t:04d}.ppm").astype(np.float64) / 255.0
        for t in range(frame_count)
    ]


# --- synth --------------------------------------------------------------------


def cmd_synth(spec_path: Path, out_dir: Path) -> None:
    """Generate an oracle bundle from a scene-spec file (preset + seed)."""
    spec_text = Path(spec_path).read_text()
    options: dict[str, str] = {}
    for number, raw_line in enumerate(spec_text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip() if not raw_line.startswith("#") else ""
        if not line or line == "[scene]":
            continue
        if "=" not in line:
            raise InvalidSpecError(f"scene spec line {number}: expected key = value")
        key, _, value = line.partition("=")
        options[key.strip()] = value.strip()
    preset = options.get("preset")
    if preset not in PRESETS:
        raise InvalidSpecError(f"scene spec names unknown preset {preset!r}")
    known = {"preset", "seed", "frame_count"}
    unknown = set(options) - known
    if unknown:
        raise InvalidSpecError(f"unknown scene spec keys: {sorted(unknown)}")
    if "frame_count" in options and preset != "walker":
        raise InvalidSpecError(f"preset {preset!r} has a fixed frame count")

    bundle = generate(_scene_spec_from_meta(options))
    spec = bundle.spec
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "images").mkdir(exist_ok=True)
    (out_dir / "flows").mkdir(exist_ok=True)

    for t in range(spec.frame_count):
        write_ppm(out_dir / "images" / f"frame_{t:04d}.ppm", bundle.images[t])
    write_tensor(out_dir / "depth_exact.pten", bundle.depth)
    write_tensor(out_dir / "depth_validity.pten", bundle.depth_validity)
    write_tensor(out_dir / "depth_video.pten", bundle.video_depth)
    write_tensor(out_dir / "depth_mono.pten", bundle.mono_depth)
    write_tensor(out_dir / "segments.pten", bundle.segments.astype(np.float32))
    for (t, other), flow in sorted(bundle.flows.items()):
        write_tensor(out_dir / "flows" / f"flow_{t:04d}_{other:04d}.pten", flow)
        write_tensor(
            out_dir / "flows" / f"valid_{t:04d}_{other:04d}.pten",
            bundle.flow_validity[(t, other)],
        )
    write_tensor(out_dir / "oracle_object_masks.pten", bundle.object_masks)
    (out_dir / "cameras.txt").write_text(serialize_cameras(bundle.cameras))
    (out_dir / "tracks.txt").write_text(serialize_tracks(bundle.tracks))

    oracle_segments = sorted(
        {sid for oi in bundle.dynamic_object_indices
         for sid in bundle.object_segment_ids[oi]}
    )
    meta_lines = [
        "# scene v1",
        f"preset = {preset}",
        f"seed = {int(options.get('seed', '0'))}",
        f"frame_count = {spec.frame_count}",
        f"width = {spec.width}",
        f"height = {spec.height}",
        f"background = {repr(float(BACKGROUND_COLOR))}",
        f"oracle_segments = {','.join(str(s) for s in oracle_segments)}",
    ]
    (out_dir / "scene.txt").write_text("\n".join(meta_lines) + "\n")

    write_manifest(out_dir, "synth", {"scene_spec": sha256_file(spec_path)}, spec_text)


# --- masks ----------------------------------------------------------------------


def cmd_masks(in_dir: Path, out_dir: Path, cfg: PipelineConfig) -> None:
    """Motion masks from flow epipolar errors, then dynamic-object selection."""
    cameras = deserialize_cameras((in_dir / "cameras.txt").read_text())
    segments = SegmentStack(read_tensor(in_dir / "segments.pten").astype(np.int32))
    flows = {}
    input_names = ["cameras.txt", "segments.pten"]
    for path in sorted((in_dir / "flows").glob("flow_*.pten")):
        t, other = (int(v) for v in path.stem.split("_")[1:3])
        validity = read_tensor(in_dir / "flows" / f"valid_{t:04d}_{other:04d}.pten")
        flows[(t, other)] = FlowField(
            read_tensor(path).astype(np.float64), validity.astype(bool)
        )
        input_names += [
            f"flows/{path.name}", f"flows/valid_{t:04d}_{other:04d}.pten",
        ]

    epi = epi_masks(flows, cameras, gaps=cfg.masks.gaps, threshold=cfg.masks.epi_threshold)
    objects, scores = select_dynamic_masks(
        segments, epi, cfg.masks.min_epi_fraction, cfg.masks.min_segment_fraction
    )

    _prepare_out(in_dir, out_dir)
    write_tensor(out_dir / "epi_masks.pten", epi.masks)
    write_tensor(out_dir / "epi_errors.pten", epi.errors)
    write_tensor(out_dir / "object_masks.pten", objects.masks)
    ids = ",".join(str(s) for s in objects.segment_ids)
    (out_dir / "objects.txt").write_text(f"# objects v1 ids={ids}\n")

    mask_dir = out_dir / "masks"
    mask_dir.mkdir(exist_ok=True)
    for row, sid in enumerate(objects.segment_ids):
        for t in range(objects.frame_count):
            write_pgm(mask_dir / f"object_{sid:03d}_frame_{t:04d}.pgm", objects.masks[row, t])

    report = [
        "# mask selection v1 "
        f"motion_pixels={int(np.sum(epi.masks))} "
        f"epi_threshold={repr(float(cfg.masks.epi_threshold))} "
        f"min_epi_fraction={repr(float(cfg.masks.min_epi_fraction))} "
        f"min_segment_fraction={repr(float(cfg.masks.min_segment_fraction))}"
    ]
    for s in scores:
        verdict = "kept" if s.kept else "rejected"
        report.append(
            f"segment {s.segment_id} overlap {s.overlap} size {s.segment_total} "
            f"epi_fraction {repr(float(s.epi_fraction))} "
            f"segment_fraction {repr(float(s.segment_fraction))} verdict {verdict}"
        )
    (out_dir / "selection_report.txt").write_text("\n".join(report) + "\n")

    write_manifest(out_dir, "masks", _hash_inputs(in_dir, input_names), serialize_config(cfg))


# --- depth -----------------------------------------------------------------------


def cmd_depth(in_dir: Path, out_dir: Path, cfg: PipelineConfig) -> None:
    """Refine the consistent video depth against the mono prior on each object."""
    validity = read_tensor(in_dir / "depth_validity.pten").astype(bool)
    video = read_tensor(in_dir / "depth_video.pten").astype(np.float64)
    mono = read_tensor(in_dir / "depth_mono.pten").astype(np.float64)
    stack = DepthStack(
        video=[DepthMap(video[t], validity[t]) for t in range(video.shape[0])],
        mono=[DepthMap(mono[t], validity[t]) for t in range(mono.shape[0])],
    )
    objects = _load_objects(in_dir)

    trace = io.StringIO()
    refined = refine_depth(stack, objects, cfg.depth, log_stream=trace)

    _prepare_out(in_dir, out_dir)
    write_tensor(out_dir / "depth_refined.pten", refined.video_values())
    (out_dir / "objective_log.txt").write_text(trace.getvalue())

    inputs = _hash_inputs(
        in_dir,
        ["depth_validity.pten", "depth_video.pten", "depth_mono.pten",
         "object_masks.pten", "objects.txt"],
    )
    write_manifest(out_dir, "depth", inputs, serialize_config(cfg))


# --- tracks ---------------------------------------------------------------------


def cmd_tracks(in_dir: Path, out_dir: Path, cfg: PipelineConfig) -> None:
    """Sample seeding locations and re-identify re-emergent track points.

    Re-tracking uses the synthetic scene itself as the oracle point tracker,
    rebuilt from the preset name and seed recorded in the bundle.
    """
    epi = EpiMaskStack(
        read_tensor(in_dir / "epi_masks.pten").astype(bool),
        read_tensor(in_dir / "epi_errors.pten").astype(np.float64),
        threshold=cfg.masks.epi_threshold,
    )
    objects = _load_objects(in_dir)
    tracks = deserialize_tracks((in_dir / "tracks.txt").read_text())
    spec = _scene_spec_from_meta(_read_meta(in_dir))

    sampler_cfg = SamplerConfig(
        n_total=cfg.sampler.n_total,
        n_skeleton=cfg.sampler.n_skeleton,
        skeleton_dilate_px=cfg.sampler.skeleton_dilate_px,
        working_long_side=cfg.sampler.working_long_side,
        seed=cfg.seed,
    )
    seeds = sample_track_seeds(epi, objects, sampler_cfg)

    def resample(frame: int, position: np.ndarray, frames) -> np.ndarray:
        return retrack(spec, frame, position[None, :], list(frames))[0]

    reided = reidentify(tracks, objects, resample, cfg.reid)
    coverage = track_coverage_report(reided, objects)

    _prepare_out(in_dir, out_dir)
    seed_lines = [f"# seeds v1 count={len(seeds)}"]
    for s in seeds:
        owner = "-" if s.object_id is None else str(s.object_id)
        seed_lines.append(
            f"seed {s.frame} {repr(float(s.position[0]))} {repr(float(s.position[1]))} {owner}"
        )
    (out_dir / "seeds.txt").write_text("\n".join(seed_lines) + "\n")
    (out_dir / "tracks.txt").write_text(serialize_tracks(reided))

    cov_lines = [f"# coverage v1 radius={repr(float(coverage.radius))}"]
    for row, sid in enumerate(objects.segment_ids):
        for t in range(objects.frame_count):
            cov_lines.append(
                f"object {sid} frame {t} coverage {repr(float(coverage.coverage[row, t]))} "
                f"reidentified {int(coverage.reidentified[row, t])}"
            )
    (out_dir / "coverage_report.txt").write_text("\n".join(cov_lines) + "\n")

    inputs = _hash_inputs(
        in_dir,
        ["epi_masks.pten", "epi_errors.pten", "object_masks.pten", "objects.txt",
         "tracks.txt", "scene.txt"],
    )
    write_manifest(out_dir, "tracks", inputs, serialize_config(cfg))


# --- reconstruct -----------------------------------------------------------------


def cmd_reconstruct(in_dir: Path, out_dir: Path, cfg: PipelineConfig) -> None:
    """Lift tracks to a scaffold, seed a cloud, and fit both by descent."""
    meta = _read_meta(in_dir)
    frame_count = int(meta["frame_count"])
    background = float(meta.get("background", "0.0"))
    cameras = deserialize_cameras((in_dir / "cameras.txt").read_text())
    images = _load_images(in_dir, frame_count)
    depths = _load_depth_maps(in_dir, "depth_refined.pten")
    tracks = deserialize_tracks((in_dir / "tracks.txt").read_text())
    objects = _load_objects(in_dir)

    stack = DepthStack(video=depths, mono=depths)
    graph = spacetime_init(lift_tracks(tracks, stack, cameras))

    cloud = seed_cloud(
        images[0],
        depths[0],
        cameras[0],
        dynamic_mask=objects.union_at(0),
        stride=cfg.cloud_stride,
        background=(background,) * 3,
        anchor_frame=0,
    )
    data = TrainingData(images, depths, cameras, tracks)
    virtual_cfg = VirtualViewConfig(
        max_offset_factor=cfg.virtual.max_offset_factor,
        samples_per_step=cfg.virtual.samples_per_step,
        seed=cfg.seed,
    )
    optimizer_cfg = OptimizerConfig(
        iterations=cfg.optimizer.iterations,
        step_means=cfg.optimizer.step_means,
        step_colors=cfg.optimizer.step_colors,
        step_opacities=cfg.optimizer.step_opacities,
        step_nodes=cfg.optimizer.step_nodes,
        log_every=cfg.optimizer.log_every,
        seed=cfg.seed,
    )
    best, history = optimize(
        ReconState(cloud, graph), data, cfg.loss, optimizer_cfg, virtual_cfg
    )

    _prepare_out(in_dir, out_dir)
    (out_dir / "gaussians.txt").write_text(serialize_cloud(best.cloud))
    (out_dir / "scaffold.txt").write_text(serialize_scaffold(best.graph))
    (out_dir / "loss_log.txt").write_text(format_loss_history(history))

    input_names = ["scene.txt", "cameras.txt", "depth_refined.pten",
                   "depth_validity.pten", "tracks.txt", "object_masks.pten", "objects.txt"]
    input_names += [f"images/frame_{t:04d}.ppm" for t in range(frame_count)]
    write_manifest(out_dir, "reconstruct", _hash_inputs(in_dir, input_names),
                   serialize_config(cfg))


# --- render -----------------------------------------------------------------------


def _orbit_cameras(template: Camera, cloud, count: int, radius_scale: float) -> list[Camera]:
    """Cameras on a horizontal circle around the cloud, looking at its centroid."""
    means = np.stack([g.mean for g in cloud.gaussians])
    center = means.mean(axis=0)
    radius = radius_scale * float(np.median(np.linalg.norm(means - center, axis=1)) + 1e-6)
    cams = []
    for i in range(count):
        angle = 2.0 * np.pi * i / count
        position = center + radius * np.array([np.sin(angle), 0.0, -np.cos(angle)])
        forward = center - position
        forward = forward / np.linalg.norm(forward)
        up = np.array([0.0, -1.0, 0.0])  # pixel y grows downward
        right = np.cross(up, forward)
        right = right / np.linalg.norm(right)
        rows = np.stack([right, np.cross(forward, right), forward])
        pose = RigidTransform(quat_from_matrix(rows), -rows @ position)
        cams.append(
            Camera(fx=template.fx, fy=template.fy, cx=template.cx, cy=template.cy,
                   width=template.width, height=template.height, pose=pose)
        )
    return cams


def cmd_render(checkpoint_dir: Path, trajectory: str, out_dir: Path) -> None:
    """Render a checkpoint along a trajectory: a camera file or orbit:<count>.

    View i is rendered at scene time i modulo the scaffold's frame count, so
    a file holding the training cameras re-renders the training views.
    """
    cloud = deserialize_cloud((checkpoint_dir / "gaussians.txt").read_text())
    scaffold_path = checkpoint_dir / "scaffold.txt"
    graph = deserialize_scaffold(scaffold_path.read_text()) if scaffold_path.is_file() else None

    inputs = {"gaussians.txt": sha256_file(checkpoint_dir / "gaussians.txt")}
    if scaffold_path.is_file():
        inputs["scaffold.txt"] = sha256_file(scaffold_path)

    trajectory_path = Path(trajectory)
    if trajectory_path.is_file():
        cameras = deserialize_cameras(trajectory_path.read_text())
        config_text = trajectory_path.read_text()
        inputs["trajectory"] = sha256_file(trajectory_path)
    elif trajectory.startswith("orbit:"):
        parts = trajectory.split(":")
        count = int(parts[1])
        radius_scale = float(parts[2]) if len(parts) > 2 else 2.0
        if count < 1:
            raise InvalidSpecError("orbit needs at least one view")
        template = deserialize_cameras((checkpoint_dir / "cameras.txt").read_text())[0]
        inputs["cameras.txt"] = sha256_file(checkpoint_dir / "cameras.txt")
        cameras = _orbit_cameras(template, cloud, count, radius_scale)
        config_text = f"trajectory = {trajectory}\n"
    else:
        raise InvalidSpecError(
            f"trajectory {trajectory!r} is neither a camera file nor orbit:<count>"
        )

    out_dir.mkdir(parents=True, exist_ok=True)
    frame_count = graph.frame_count if graph is not None and graph.nodes else 1
    for i, cam in enumerate(cameras):
        out = render(cloud, graph, cam, i % frame_count)
        write_ppm(out_dir / f"render_{i:04d}.ppm", out.rgb)
        depth_map = out.depth_map()
        write_tensor(out_dir / f"depth_{i:04d}.pten", depth_map.values)
        write_tensor(out_dir / f"depth_validity_{i:04d}.pten", depth_map.validity)
    (out_dir / "cameras_rendered.txt").write_text(serialize_cameras(cameras))

    write_manifest(out_dir, "render", inputs, config_text)


# --- eval -------------------------------------------------------------------------


def psnr_8bit(reference: np.ndarray, test: np.ndarray, cap: float = PSNR_CAP_DB) -> float:
    """PSNR between two uint8 images, capped for bit-identical pairs."""
    diff = reference.astype(np.float64) - test.astype(np.float64)
    mse = float(np.mean(diff * diff)) / (255.0**2)
    if mse <= 0.0:
        return cap
    return min(cap, float(-10.0 * np.log10(mse)))


def cmd_eval(render_dir: Path, oracle_dir: Path, out_dir: Path | None = None) -> str:
    """Compare rendered views against the oracle: PSNR, SSIM, depth MAE.

    Rendered frame i pairs with oracle training frame i. Returns the report
    text and writes it (plus a manifest) into the output directory, which
    defaults to the render directory.
    """
    out_dir = render_dir if out_dir is None else out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = _read_meta(oracle_dir)
    frame_count = int(meta["frame_count"])
    exact_depth = read_tensor(oracle_dir / "depth_exact.pten").astype(np.float64)
    exact_validity = read_tensor(oracle_dir / "depth_validity.pten").astype(bool)

    inputs = {"scene.txt": sha256_file(oracle_dir / "scene.txt")}
    rows = []
    psnrs, ssims, maes = [], [], []
    for i in range(frame_count):
        rendered_path = render_dir / f"render_{i:04d}.ppm"
        if not rendered_path.is_file():
            break
        rendered_u8 = read_ppm(rendered_path)
        oracle_u8 = read_ppm(oracle_dir / "images" / f"frame_{i:04d}.ppm")
        if rendered_u8.shape != oracle_u8.shape:
            raise InvalidSpecError(
                f"frame {i}: rendered {rendered_u8.shape} vs oracle {oracle_u8.shape}"
            )
        inputs[f"render_{i:04d}.ppm"] = sha256_file(rendered_path)
        inputs[f"oracle_frame_{i:04d}.ppm"] = sha256_file(
            oracle_dir / "images" / f"frame_{i:04d}.ppm"
        )
        value_psnr = psnr_8bit(oracle_u8, rendered_u8)
        value_ssim = ssim(oracle_u8 / 255.0, rendered_u8 / 255.0)

        depth_path = render_dir / f"depth_{i:04d}.pten"
        mae = float("nan")
        if depth_path.is_file():
            depth = read_tensor(depth_path).astype(np.float64)
            validity = read_tensor(render_dir / f"depth_validity_{i:04d}.pten").astype(bool)
            joint = validity & exact_validity[i]
            if joint.any():
                mae = float(np.mean(np.abs(depth[joint] - exact_depth[i][joint])))
        psnrs.append(value_psnr)
        ssims.append(value_ssim)
        if not np.isnan(mae):
            maes.append(mae)
        rows.append(
            f"frame {i} psnr {repr(round(value_psnr, 6))} ssim {repr(round(value_ssim, 6))} "
            f"depth_mae {repr(round(mae, 6)) if not np.isnan(mae) else 'nan'}"
        )
    if not rows:
        raise InvalidSpecError(f"no rendered frames found in {render_dir}")

    header = (
        f"# eval v1 frames={len(rows)} psnr_cap={repr(PSNR_CAP_DB)} "
        "note=lpips_omitted_requires_learned_network"
    )
    mean_mae = repr(round(float(np.mean(maes)), 6)) if maes else "nan"
    rows.append(
        f"mean - psnr {repr(round(float(np.mean(psnrs)), 6))} "
        f"ssim {repr(round(float(np.mean(ssims)), 6))} depth_mae {mean_mae}"
    )
    report = header + "\n" + "\n".join(rows) + "\n"
    (out_dir / "eval_report.txt").write_text(report)
    write_manifest(out_dir, "eval", inputs, "", filename="eval_manifest.txt")
    return report
