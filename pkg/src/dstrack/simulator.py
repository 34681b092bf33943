"""Deterministic synthetic multi-target videos: boxes, appearance patches,
elliptical attention masks and ground-truth identities.

Appearance is generated directly at RoI resolution: each identity owns a
base pattern interpolated between one shared pattern (distinctness 0) and
an identity-specific one (distinctness 1). Patch cells outside the target's
inscribed ellipse carry fresh background noise every frame, and cells
covered by a nearer overlapping target take that target's pattern, so
bounding boxes in clutter really do contain foreign pixels. A target whose
box is more than half covered by a nearer one emits no detection.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .association import AttentionMask
from .container import load_container, save_container, save_manifest
from .encoding import BBox, ImageGeometry, RoISpec
from .training import ClipSample, Detection

SCENARIO_KINDS = ("crossing", "parallel", "occlusion", "random_walk")

OCCLUSION_IOU = 0.5
MASK_BAND = 0.08


@dataclass(frozen=True)
class ScenarioConfig:
    kind: str = "crossing"
    width: int = 96
    height: int = 96
    channels: int = 64
    roi_width: int = 7
    roi_height: int = 7
    targets: int = 2
    speed_min: float = 0.8
    speed_max: float = 2.0
    appearance_noise: float = 0.05
    appearance_distinctness: float = 1.0
    frames: int = 40
    box_min: float = 10.0
    box_max: float = 16.0
    lane_gap: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"kind must be one of {SCENARIO_KINDS}")
        if self.targets < 1:
            raise ValueError("targets must be >= 1")
        if self.appearance_noise < 0:
            raise ValueError("appearance_noise must be >= 0")
        if not (0.0 <= self.appearance_distinctness <= 1.0):
            raise ValueError("appearance_distinctness must lie in [0, 1]")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if not (0 < self.speed_min <= self.speed_max):
            raise ValueError("need 0 < speed_min <= speed_max")
        if not (0 < self.box_min <= self.box_max):
            raise ValueError("need 0 < box_min <= box_max")
        if self.width < 8 or self.height < 8:
            raise ValueError("image must be at least 8x8")

    @property
    def geom(self) -> ImageGeometry:
        return ImageGeometry(self.width, self.height, self.channels)

    @property
    def roi(self) -> RoISpec:
        return RoISpec(width=self.roi_width, height=self.roi_height)


@dataclass
class SyntheticDetection(Detection):
    identity: int = -1
    visible: bool = True


@dataclass
class SyntheticVideo:
    config: ScenarioConfig
    frames: list[list[SyntheticDetection]]
    visibility: list[list[bool]]  # [identity][frame]

    @property
    def geom(self) -> ImageGeometry:
        return self.config.geom

    @property
    def roi(self) -> RoISpec:
        return self.config.roi


# ---------------------------------------------------------------------------
# attention mask


def _grid_radius(roi: RoISpec) -> np.ndarray:
    ys = np.arange(roi.height, dtype=np.float64)
    xs = np.arange(roi.width, dtype=np.float64)
    cy, cx = (roi.height - 1) / 2.0, (roi.width - 1) / 2.0
    ay, ax = roi.height / 2.0, roi.width / 2.0
    dy = (ys[:, None] - cy) / ay
    dx = (xs[None, :] - cx) / ax
    return np.sqrt(dy * dy + dx * dx)


def elliptical_mask(box: BBox, roi: RoISpec) -> AttentionMask:
    """1 inside the RoI grid's inscribed ellipse, 0 outside, 0.5 on the
    boundary ring. The box argument is validated only; the grid ellipse is
    the box's inscribed ellipse mapped onto the RoI grid."""
    if box.w <= 0 or box.h <= 0:
        raise ValueError("box must have positive size")
    rho = _grid_radius(roi)
    grid = np.zeros(rho.shape)
    grid[rho <= 1.0 + MASK_BAND] = 0.5
    grid[rho < 1.0 - MASK_BAND] = 1.0
    return AttentionMask(grid)


# ---------------------------------------------------------------------------
# motion models


def _build_paths(config: ScenarioConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-target box sizes (n, 2) and center paths (n, frames, 2)."""
    n, f = config.targets, config.frames
    w, h = float(config.width), float(config.height)
    sizes = rng.uniform(config.box_min, config.box_max, size=(n, 2))
    margin = sizes.max() / 2.0 + 1.0
    lo = np.array([margin, margin])
    hi = np.array([w - margin, h - margin])
    t = np.arange(f, dtype=np.float64)
    centers = np.zeros((n, f, 2))

    if config.kind == "crossing":
        cross_pt = np.array([w / 2.0, h / 2.0]) + rng.uniform(-4, 4, size=2)
        t_cross = (f - 1) / 2.0 + rng.uniform(-2, 2)
        base = rng.uniform(0, 2 * np.pi)
        for i in range(n):
            ang = base + 2 * np.pi * i / n + rng.uniform(-0.35, 0.35)
            d = np.array([np.cos(ang), np.sin(ang)])
            speed = rng.uniform(config.speed_min, config.speed_max)
            extent = max(t_cross, f - 1 - t_cross)
            for ax in range(2):
                if abs(d[ax]) > 1e-9:
                    room = min(cross_pt[ax] - lo[ax], hi[ax] - cross_pt[ax])
                    speed = min(speed, 0.95 * room / (abs(d[ax]) * extent))
            centers[i] = cross_pt + (t[:, None] - t_cross) * speed * d
    elif config.kind in ("parallel", "occlusion"):
        gap = config.lane_gap if config.kind == "parallel" else 0.0
        y0 = h / 2.0 - gap * (n - 1) / 2.0
        for i in range(n):
            y = np.clip(y0 + i * gap + rng.uniform(-1, 1), lo[1], hi[1])
            if config.kind == "occlusion":
                # nearer target (lower index) starts behind and overtakes
                speed = config.speed_max if i % 2 == 0 else config.speed_min
                x0 = lo[0] + (0.0 if i % 2 == 0 else 0.3 * (hi[0] - lo[0]))
            else:
                speed = rng.uniform(config.speed_min, config.speed_max)
                x0 = lo[0] + rng.uniform(0, 0.15 * (hi[0] - lo[0]))
            speed = min(speed, (hi[0] - x0) / max(f - 1, 1))
            centers[i, :, 0] = x0 + speed * t
            centers[i, :, 1] = y
    elif config.kind == "random_walk":
        for i in range(n):
            pos = rng.uniform(lo, hi)
            ang = rng.uniform(0, 2 * np.pi)
            speed = rng.uniform(config.speed_min, config.speed_max)
            vel = speed * np.array([np.cos(ang), np.sin(ang)])
            for k in range(f):
                centers[i, k] = pos
                vel = _rotate(vel, rng.normal(0.0, 0.25))
                nxt = pos + vel
                for ax in range(2):
                    if not (lo[ax] <= nxt[ax] <= hi[ax]):
                        vel[ax] = -vel[ax]
                        nxt[ax] = pos[ax] + vel[ax]
                pos = np.clip(nxt, lo, hi)
    return sizes, centers


def _rotate(v: np.ndarray, ang: float) -> np.ndarray:
    c, s = np.cos(ang), np.sin(ang)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


# ---------------------------------------------------------------------------
# appearance synthesis


def _cell_centers(box: BBox, roi: RoISpec) -> tuple[np.ndarray, np.ndarray]:
    xs = box.u + (np.arange(roi.width) + 0.5) * box.w / roi.width
    ys = box.v + (np.arange(roi.height) + 0.5) * box.h / roi.height
    return np.meshgrid(xs, ys)  # (H,W) image coords


def _make_patch(
    identity: int,
    box: BBox,
    occluders: list[tuple[BBox, np.ndarray]],
    base: np.ndarray,
    roi: RoISpec,
    sigma: float,
    rng: np.random.Generator,
) -> np.ndarray:
    patch = base.copy()
    inside = _grid_radius(roi) <= 1.0
    bg = rng.standard_normal(base.shape)
    patch[:, ~inside] = bg[:, ~inside]
    px, py = _cell_centers(box, roi)
    for obox, obase in occluders:
        ocx, ocy = obox.center
        rho = np.sqrt(
            ((px - ocx) / (obox.w / 2.0)) ** 2 + ((py - ocy) / (obox.h / 2.0)) ** 2
        )
        covered = rho <= 1.0
        if not covered.any():
            continue
        gx = np.clip(((px - obox.u) / obox.w * roi.width - 0.5).round(), 0, roi.width - 1).astype(int)
        gy = np.clip(((py - obox.v) / obox.h * roi.height - 0.5).round(), 0, roi.height - 1).astype(int)
        patch[:, covered] = obase[:, gy[covered], gx[covered]]
    if sigma > 0:
        patch = patch + rng.normal(0.0, sigma, size=patch.shape)
    return patch


# ---------------------------------------------------------------------------
# generation


def generate(config: ScenarioConfig) -> SyntheticVideo:
    """Seeded scenario rollout; identical config ⇒ bit-identical video."""
    rng = np.random.default_rng(config.seed)
    geom, roi = config.geom, config.roi
    sizes, centers = _build_paths(config, rng)
    c = config.channels
    shared = rng.standard_normal((c, roi.height, roi.width))
    indiv = rng.standard_normal((config.targets, c, roi.height, roi.width))
    delta = config.appearance_distinctness
    bases = (1.0 - delta) * shared[None] + delta * indiv

    frames: list[list[SyntheticDetection]] = []
    visibility = [[False] * config.frames for _ in range(config.targets)]
    for f in range(config.frames):
        boxes = []
        for i in range(config.targets):
            bw, bh = sizes[i]
            cx, cy = centers[i, f]
            boxes.append(BBox(cx - bw / 2.0, cy - bh / 2.0, bw, bh))
        dets: list[SyntheticDetection] = []
        for i, box in enumerate(boxes):
            in_image = (
                box.u + box.w > 0
                and box.v + box.h > 0
                and box.u < config.width
                and box.v < config.height
            )
            occluded = any(box.iou(boxes[j]) > OCCLUSION_IOU for j in range(i))
            if not in_image or occluded:
                continue
            visibility[i][f] = True
            occluders = [
                (boxes[j], bases[j])
                for j in range(i)
                if box.iou(boxes[j]) > 0.0
            ]
            patch = _make_patch(
                i, box, occluders, bases[i], roi, config.appearance_noise, rng
            )
            dets.append(
                SyntheticDetection(
                    frame=f,
                    box=box,
                    appearance=patch,
                    mask=elliptical_mask(box, roi),
                    identity=i,
                    visible=True,
                )
            )
        frames.append(dets)
    return SyntheticVideo(config=config, frames=frames, visibility=visibility)


def sample_clips(video: SyntheticVideo, clip_length: int):
    """Stride-1 contiguous windows as labeled training clips."""
    n = len(video.frames)
    if n < 1:
        raise ValueError("video must have at least one frame")
    length = min(clip_length, n)
    for start in range(n - length + 1):
        yield clip_from_video(video, start, length)


def clip_from_video(video: SyntheticVideo, start: int, length: int) -> ClipSample:
    frames = []
    identities = []
    for f in range(start, start + length):
        dets = video.frames[f]
        frames.append(
            [
                Detection(frame=f - start, box=d.box, appearance=d.appearance, mask=d.mask)
                for d in dets
            ]
        )
        identities.append([d.identity for d in dets])
    return ClipSample(frames=frames, identities=identities, geom=video.geom)


# ---------------------------------------------------------------------------
# serialization


VIDEO_SCHEMA_VERSION = 1


def video_header(video: SyntheticVideo) -> dict:
    return {
        "kind": "video",
        "schema_version": VIDEO_SCHEMA_VERSION,
        "config": asdict(video.config),
        "visibility": video.visibility,
        "detections": [
            {
                "frame": d.frame,
                "identity": d.identity,
                "box": list(d.box.as_tuple()),
                "visible": d.visible,
            }
            for dets in video.frames
            for d in dets
        ],
    }


def save_video(path, video: SyntheticVideo, manifest_path=None) -> None:
    dets = [d for dets in video.frames for d in dets]
    arrays = {
        "appearance": np.stack([d.appearance for d in dets])
        if dets
        else np.zeros((0, video.config.channels, video.roi.height, video.roi.width)),
        "mask": np.stack([d.mask.grid for d in dets])
        if dets
        else np.zeros((0, video.roi.height, video.roi.width)),
    }
    header = video_header(video)
    save_container(path, header, arrays)
    if manifest_path is not None:
        save_manifest(manifest_path, header, arrays)


def load_video(path) -> SyntheticVideo:
    header, arrays = load_container(path)
    if header.get("kind") != "video":
        raise ValueError(f"{path}: not a video container")
    config = ScenarioConfig(**header["config"])
    frames: list[list[SyntheticDetection]] = [[] for _ in range(config.frames)]
    for rec, app, mask in zip(header["detections"], arrays["appearance"], arrays["mask"]):
        u, v, w, h = rec["box"]
        frames[rec["frame"]].append(
            SyntheticDetection(
                frame=rec["frame"],
                box=BBox(u, v, w, h),
                appearance=app,
                mask=AttentionMask(mask),
                identity=rec["identity"],
                visible=rec["visible"],
            )
        )
    return SyntheticVideo(config=config, frames=frames, visibility=header["visibility"])
