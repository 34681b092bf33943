"""Dense per-pixel position encoding, its RoI form, and trajectory sums.

Every pixel of a W×H image gets a C-channel sinusoidal code that is unique
per position and zero-centered over the image. For a bounding box the code
is evaluated on a fixed RoI grid, where the oscillation period depends on
the box size, so the code carries both position and shape. Codes of one
target over time add linearly into a trajectory code, and any strictly
linear map applied to them preserves that additivity, which is what lets a
single model treat detections and trajectories uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ImageGeometry:
    """Image plane: width, height and (even) channel count."""

    width: int
    height: int
    channels: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        if self.channels < 2 or self.channels % 2 != 0:
            raise ValueError("channel count must be even and >= 2")


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box: top-left (u, v) plus width/height in pixels.

    Boxes may extend past the image border; clamping is the caller's concern.
    """

    u: float
    v: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError("box width/height must be positive")

    @property
    def center(self) -> tuple[float, float]:
        return (self.u + self.w / 2.0, self.v + self.h / 2.0)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.u, self.v, self.w, self.h)

    def iou(self, other: "BBox") -> float:
        x1 = max(self.u, other.u)
        y1 = max(self.v, other.v)
        x2 = min(self.u + self.w, other.u + other.w)
        y2 = min(self.v + self.h, other.v + other.h)
        inter = max(0.0, x2 - x1) * max(0.0, y2 - y1)
        union = self.w * self.h + other.w * other.h - inter
        return inter / union if union > 0 else 0.0


@dataclass(frozen=True)
class RoISpec:
    """Fixed RoI grid size (columns × rows)."""

    width: int = 7
    height: int = 7

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("RoI grid must be at least 1×1")


def _channel_phases(channels: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    i = np.arange(channels)
    even = i % 2 == 0
    odd = ~even
    phase = 2.0 * i * math.pi / channels
    return even, odd, phase[even], phase[odd]


def encode_image(geom: ImageGeometry) -> np.ndarray:
    """Dense C×H×W encoding of every pixel of the image plane.

    Even channels oscillate mainly along y, odd channels mainly along x;
    the per-channel phase offset 2iπ/C spreads sensitivity over the image.
    """
    w, h, c = geom.width, geom.height, geom.channels
    x = np.arange(w, dtype=np.float64)
    y = np.arange(h, dtype=np.float64)
    even, odd, ph_even, ph_odd = _channel_phases(c)

    spatial_even = (y[:, None] / h + x[None, :] / (w * h)) * math.pi
    spatial_odd = (x[None, :] / w + y[:, None] / (w * h)) * math.pi

    grid = np.empty((c, h, w), dtype=np.float64)
    grid[even] = np.cos(spatial_even[None, :, :] + ph_even[:, None, None])
    grid[odd] = -np.cos(spatial_odd[None, :, :] + ph_odd[:, None, None])
    return grid


def encode_roi(box: BBox, geom: ImageGeometry, roi: RoISpec) -> np.ndarray:
    """C×H_R×W_R encoding of a box, sampled at integer RoI grid points.

    The slope terms scale with the box/RoI size ratio (shape information);
    the constant terms carry the top-left corner (position information).
    For the full-image box with an image-sized grid this reduces exactly to
    :func:`encode_image`.
    """
    w_img, h_img, c = geom.width, geom.height, geom.channels
    u, v, bw, bh = box.u, box.v, box.w, box.h
    xs = np.arange(roi.width, dtype=np.float64)
    ys = np.arange(roi.height, dtype=np.float64)
    even, odd, ph_even, ph_odd = _channel_phases(c)

    spatial_even = (
        (bh / (h_img * roi.height)) * ys[:, None]
        + (bw / (w_img * h_img * roi.width)) * xs[None, :]
        + (v / h_img + u / (w_img * h_img))
    ) * math.pi
    spatial_odd = (
        (bw / (w_img * roi.width)) * xs[None, :]
        + (bh / (w_img * h_img * roi.height)) * ys[:, None]
        + (u / w_img + v / (w_img * h_img))
    ) * math.pi

    patch = np.empty((c, roi.height, roi.width), dtype=np.float64)
    patch[even] = np.cos(spatial_even[None, :, :] + ph_even[:, None, None])
    patch[odd] = -np.cos(spatial_odd[None, :, :] + ph_odd[:, None, None])
    return patch


# ---------------------------------------------------------------------------
# trajectory accumulation


@dataclass(frozen=True)
class TrajectoryEncoding:
    """Weighted sum of per-frame RoI encodings for one target."""

    tensor: np.ndarray
    frame_count: int
    weights_used: tuple[float, ...]

    def scaled(self, factor: float) -> "TrajectoryEncoding":
        """Rescale the whole accumulated history (used by decay policies)."""
        return TrajectoryEncoding(
            self.tensor * factor,
            self.frame_count,
            tuple(w * factor for w in self.weights_used),
        )


def accumulate_trajectory(patches, alphas) -> TrajectoryEncoding:
    """Elementwise Σ αₜ · patchₜ over an ordered frame sequence."""
    patches = list(patches)
    alphas = [float(a) for a in alphas]
    if not patches or len(patches) != len(alphas):
        raise ValueError("need equally many patches and weights, at least one")
    shape = patches[0].shape
    for p in patches:
        if p.shape != shape:
            raise ValueError("all patches must share one shape")
    total = np.zeros(shape, dtype=np.float64)
    for a, p in zip(alphas, patches):
        total += a * p
    return TrajectoryEncoding(total, len(patches), tuple(alphas))


def extend_trajectory(traj: TrajectoryEncoding, new_patch: np.ndarray, alpha: float) -> TrajectoryEncoding:
    """Append one frame: tensor + α · patch, frame count + 1."""
    if new_patch.shape != traj.tensor.shape:
        raise ValueError(
            f"patch shape {new_patch.shape} != trajectory shape {traj.tensor.shape}"
        )
    return TrajectoryEncoding(
        traj.tensor + float(alpha) * new_patch,
        traj.frame_count + 1,
        traj.weights_used + (float(alpha),),
    )


@dataclass(frozen=True)
class AlphaPolicy:
    """Frame weighting for trajectory accumulation.

    ``ones`` weights every frame 1 (the default). ``exp_decay`` weights
    frame t of T by gamma^(T-t), i.e. the newest frame always gets 1 and
    the history is geometrically discounted, keeping the accumulated sum
    bounded by 1/(1-gamma) no matter how long the track lives.
    """

    kind: str = "ones"
    gamma: float = 0.9

    def __post_init__(self):
        if self.kind not in ("ones", "exp_decay"):
            raise ValueError(f"unknown alpha policy {self.kind!r}")
        if self.kind == "exp_decay" and not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must lie in (0, 1]")

    def weights(self, length: int) -> list[float]:
        if self.kind == "ones":
            return [1.0] * length
        return [self.gamma ** (length - 1 - j) for j in range(length)]

    @property
    def carry_factor(self) -> float:
        """Factor applied to the existing sum when one frame is appended."""
        return 1.0 if self.kind == "ones" else self.gamma


def accumulate_with_policy(patches, policy: AlphaPolicy) -> TrajectoryEncoding:
    patches = list(patches)
    return accumulate_trajectory(patches, policy.weights(len(patches)))


# ---------------------------------------------------------------------------
# classic 1D token encoding (ablation baseline only)


def classic_encoding(position: int, dim: int, temperature: float = 10000.0) -> np.ndarray:
    """Standard 1D sinusoidal token encoding: alternating sin/cos over
    geometrically spaced frequencies."""
    if dim % 2 != 0 or dim < 2:
        raise ValueError("encoding dimension must be even and >= 2")
    if position < 0:
        raise ValueError("position must be nonnegative")
    i = np.arange(dim // 2, dtype=np.float64)
    freq = temperature ** (2.0 * i / dim)
    angles = float(position) / freq
    code = np.empty(dim, dtype=np.float64)
    code[0::2] = np.sin(angles)
    code[1::2] = np.cos(angles)
    return code


def classic_token_code(box: BBox, geom: ImageGeometry, dim: int) -> np.ndarray:
    """2D token code for the ablation arm: box center x and y, each rounded
    to a pixel index and classically encoded into half the channels."""
    if dim % 4 != 0:
        raise ValueError("token code dimension must be divisible by 4")
    cx, cy = box.center
    px = max(0, int(round(cx)))
    py = max(0, int(round(cy)))
    half = dim // 2
    return np.concatenate([classic_encoding(px, half), classic_encoding(py, half)])
