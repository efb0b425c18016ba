"""On-disk formats shared by the pipeline commands.

Everything here is either plain text with shortest-round-trip floats or a
small binary tensor container, chosen so artifacts diff cleanly and rerunning
a command with identical inputs reproduces identical bytes: no timestamps, no
environment echoes, fixed orderings throughout.
"""
from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_type_hints

import numpy as np

from ..depth import DepthRefineConfig
from ..errors import InvalidSpecError
from ..geometry import Camera, RigidTransform
from ..masks import DEFAULT_GAPS, EPI_THRESHOLD, MIN_EPI_FRACTION, MIN_SEGMENT_FRACTION
from ..recon import LossWeights, OptimizerConfig, VirtualViewConfig
from ..tracks import ReIdConfig, SamplerConfig

# --- tensor container -------------------------------------------------------

_TENSOR_MAGIC = b"PTEN"
_TENSOR_VERSION = 1
_DTYPE_FLOAT32 = 0
_DTYPE_UINT8 = 1


def write_tensor(path: Path | str, array: np.ndarray) -> None:
    """Write an array as a little-endian row-major tensor file.

    Floats are stored as float32, bools and uint8 as uint8; other dtypes are
    rejected rather than silently converted.
    """
    array = np.asarray(array)
    if array.dtype == bool or array.dtype == np.uint8:
        payload = np.ascontiguousarray(array, dtype=np.uint8)
        code = _DTYPE_UINT8
    elif array.dtype.kind == "f":
        payload = np.ascontiguousarray(array, dtype="<f4")
        code = _DTYPE_FLOAT32
    else:
        raise ValueError(f"unsupported tensor dtype {array.dtype}")
    header = struct.pack("<4sII", _TENSOR_MAGIC, _TENSOR_VERSION, payload.ndim)
    header += struct.pack(f"<{payload.ndim}Q", *payload.shape)
    header += struct.pack("<B", code)
    Path(path).write_bytes(header + payload.tobytes())


def read_tensor(path: Path | str) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != _TENSOR_MAGIC:
        raise ValueError(f"{path}: not a tensor file")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != _TENSOR_VERSION:
        raise ValueError(f"{path}: unsupported tensor version {version}")
    dims = struct.unpack_from(f"<{ndim}Q", raw, 12)
    offset = 12 + 8 * ndim
    (code,) = struct.unpack_from("<B", raw, offset)
    offset += 1
    if code == _DTYPE_FLOAT32:
        dtype = np.dtype("<f4")
    elif code == _DTYPE_UINT8:
        dtype = np.dtype(np.uint8)
    else:
        raise ValueError(f"{path}: unknown dtype code {code}")
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) - offset != expected:
        raise ValueError(
            f"{path}: payload is {len(raw) - offset} bytes, dims say {expected}"
        )
    return np.frombuffer(raw[offset:], dtype=dtype).reshape(dims).copy()


# --- portable pixmaps -------------------------------------------------------


def write_ppm(path: Path | str, rgb: np.ndarray) -> None:
    """8-bit binary PPM; float input in [0, 1] is quantized with rounding."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM wants (H, W, 3), got {rgb.shape}")
    if rgb.dtype != np.uint8:
        rgb = np.rint(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = rgb.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def read_ppm(path: Path | str) -> np.ndarray:
    magic, (w, h), data = _read_pnm(path, b"P6")
    return data.reshape(h, w, 3)


def write_pgm(path: Path | str, gray: np.ndarray) -> None:
    """8-bit binary PGM; boolean input maps to 0/255."""
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError(f"PGM wants (H, W), got {gray.shape}")
    if gray.dtype == bool:
        gray = np.where(gray, np.uint8(255), np.uint8(0))
    elif gray.dtype != np.uint8:
        gray = np.rint(np.clip(gray, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + gray.tobytes())


def read_pgm(path: Path | str) -> np.ndarray:
    magic, (w, h), data = _read_pnm(path, b"P5")
    return data.reshape(h, w)


def _read_pnm(path: Path | str, magic: bytes) -> tuple[bytes, tuple[int, int], np.ndarray]:
    raw = Path(path).read_bytes()
    # exactly one whitespace byte separates the maxval from the payload, so a
    # payload whose first bytes look like whitespace is not eaten
    match = re.match(rb"(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if match is None or match.group(1) != magic:
        raise ValueError(f"{path}: not a {magic.decode()} pixmap")
    w, h, maxval = int(match.group(2)), int(match.group(3)), int(match.group(4))
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit pixmaps supported, maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    count = w * h * channels
    if len(raw) - match.end() < count:
        raise ValueError(f"{path}: truncated pixel data")
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=match.end())
    return magic, (w, h), data.copy()


# --- camera trajectories ----------------------------------------------------


def _fmt(value: float) -> str:
    return repr(float(value))


def serialize_cameras(cameras: list[Camera]) -> str:
    lines = [f"# cameras v1 count={len(cameras)}"]
    for cam in cameras:
        q = ":".join(_fmt(v) for v in cam.pose.q)
        t = ":".join(_fmt(v) for v in cam.pose.t)
        lines.append(
            f"camera {_fmt(cam.fx)} {_fmt(cam.fy)} {_fmt(cam.cx)} {_fmt(cam.cy)} "
            f"{cam.width} {cam.height} {q} {t}"
        )
    return "\n".join(lines) + "\n"


def deserialize_cameras(text: str) -> list[Camera]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("# cameras v1"):
        raise ValueError("not a camera trajectory file")
    cameras = []
    for ln in lines[1:]:
        tokens = ln.split()
        if tokens[0] != "camera" or len(tokens) != 9:
            raise ValueError(f"bad camera record: {ln!r}")
        fx, fy, cx, cy = (float(v) for v in tokens[1:5])
        width, height = int(tokens[5]), int(tokens[6])
        q = np.array([float(v) for v in tokens[7].split(":")])
        t = np.array([float(v) for v in tokens[8].split(":")])
        cameras.append(
            Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
                   pose=RigidTransform(q, t))
        )
    return cameras


# --- pipeline configuration -------------------------------------------------


@dataclass
class MaskSelectionConfig:
    """Motion-mask thresholds; defaults mirror the mask module's constants."""

    epi_threshold: float = EPI_THRESHOLD
    min_epi_fraction: float = MIN_EPI_FRACTION
    min_segment_fraction: float = MIN_SEGMENT_FRACTION
    gaps: tuple[int, ...] = DEFAULT_GAPS

    def __post_init__(self) -> None:
        if self.epi_threshold <= 0:
            raise ValueError("epipolar threshold must be positive")
        if not (0 <= self.min_epi_fraction <= 1 and 0 <= self.min_segment_fraction <= 1):
            raise ValueError("selection fractions must lie in [0, 1]")
        self.gaps = tuple(int(g) for g in self.gaps)
        if any(g < 1 for g in self.gaps) or not self.gaps:
            raise ValueError("flow gaps must be positive")


@dataclass
class PipelineConfig:
    """Every stage's knobs in one place, plus the global seed.

    Per-stage RNG seeds are not stored in the file; they all derive from the
    global seed when a command instantiates its stage config.
    """

    seed: int = 0
    cloud_stride: int = 2
    masks: MaskSelectionConfig = field(default_factory=MaskSelectionConfig)
    depth: DepthRefineConfig = field(default_factory=DepthRefineConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    reid: ReIdConfig = field(default_factory=ReIdConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    virtual: VirtualViewConfig = field(default_factory=VirtualViewConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.cloud_stride < 1:
            raise ValueError("cloud stride must be at least 1")


_SECTIONS: tuple[tuple[str, str | None, tuple[str, ...]], ...] = (
    ("pipeline", None, ("seed", "cloud_stride")),
    ("masks", "masks", ("epi_threshold", "min_epi_fraction", "min_segment_fraction", "gaps")),
    ("depth", "depth", ("lambda_anchor", "lambda_object", "iterations", "step_size",
                        "min_mask_pixels")),
    ("sampler", "sampler", ("n_total", "n_skeleton", "skeleton_dilate_px",
                            "working_long_side")),
    ("reid", "reid", ("tau_self_occ", "window")),
    ("loss", "loss", ("rgb", "ssim", "depth", "track_gaussian", "arap", "vel", "acc",
                      "track_scaffold", "depth_virtual")),
    ("virtual", "virtual", ("max_offset_factor", "samples_per_step")),
    ("optimizer", "optimizer", ("iterations", "step_means", "step_colors",
                                "step_opacities", "step_nodes", "log_every")),
)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def serialize_config(cfg: PipelineConfig) -> str:
    lines = ["# config v1"]
    for section, attr, keys in _SECTIONS:
        lines.append(f"[{section}]")
        holder = cfg if attr is None else getattr(cfg, attr)
        for key in keys:
            lines.append(f"{key} = {_format_value(getattr(holder, key))}")
    return "\n".join(lines) + "\n"


def _coerce(raw: str, annotation):
    if annotation is float:
        return float(raw)
    if annotation is int:
        return int(raw)
    if annotation is bool:
        if raw not in ("true", "false"):
            raise ValueError(f"expected true/false, got {raw!r}")
        return raw == "true"
    # the only structured field is a tuple of ints (flow gaps)
    return tuple(int(v) for v in raw.split(",") if v)


def deserialize_config(text: str) -> PipelineConfig:
    """Parse key=value sections back into a PipelineConfig.

    Unknown sections or keys are errors; missing ones keep their defaults, so
    a partial file overrides only what it names.
    """
    section_keys = {name: (attr, set(keys)) for name, attr, keys in _SECTIONS}
    values: dict[str, dict[str, str]] = {name: {} for name in section_keys}
    current: str | None = None
    for number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip() if not raw_line.startswith("#") else ""
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in section_keys:
                raise InvalidSpecError(f"line {number}: unknown config section [{current}]")
            continue
        if "=" not in line:
            raise InvalidSpecError(f"line {number}: expected key = value, got {line!r}")
        if current is None:
            raise InvalidSpecError(f"line {number}: key outside any [section]")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in section_keys[current][1]:
            raise InvalidSpecError(f"line {number}: unknown key {key!r} in [{current}]")
        values[current][key] = raw

    cfg = PipelineConfig()
    for section, attr, _keys in _SECTIONS:
        holder = cfg if attr is None else getattr(cfg, attr)
        hints = get_type_hints(type(holder))
        for key, raw in values[section].items():
            try:
                setattr(holder, key, _coerce(raw, hints.get(key)))
            except ValueError as exc:
                raise InvalidSpecError(f"[{section}] {key}: {exc}") from exc
        # rerun the dataclass validation on the overridden values
        try:
            holder.__post_init__()
        except ValueError as exc:
            raise InvalidSpecError(f"[{section}]: {exc}") from exc
    return cfg


# --- manifests ---------------------------------------------------------------


def sha256_file(path: Path | str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(
    out_dir: Path | str,
    command: str,
    inputs: dict[str, str],
    config_text: str,
    filename: str = "manifest.txt",
) -> None:
    """Record what a command consumed: input hashes plus the config verbatim.

    The hash list is sorted by name and nothing time- or host-dependent is
    written, so the manifest changes iff an input or the config changed.
    """
    lines = [f"# manifest v1 command={command}"]
    for name in sorted(inputs):
        lines.append(f"input {name} sha256 {inputs[name]}")
    lines.append(f"config sha256 {hashlib.sha256(config_text.encode()).hexdigest()}")
    lines.append("[config]")
    body = "\n".join(lines) + "\n" + config_text
    if not body.endswith("\n"):
        body += "\n"
    (Path(out_dir) / filename).write_text(body)
