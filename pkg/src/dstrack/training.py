"""Ground-truth association targets from labeled clips and the training loop.

The clip loss is the mean squared error between the predicted and the
ground-truth detection-detection matrix; the detection-trajectory loss is a
logistic loss over per-frame matrices built against history-truncated
ground-truth trajectories (the empty trajectory is a legal target for
newborn identities). Their unweighted sum is optimized with Adam.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .association import (
    AttentionMask,
    EmbeddingStack,
    detection_attention_graph,
    det_traj_attention_graph,
    embed_batch,
)
from .encoding import (
    AlphaPolicy,
    BBox,
    ImageGeometry,
    RoISpec,
    accumulate_with_policy,
    encode_roi,
)
from .optim import OptimizerConfig, adam_step

log = logging.getLogger("dstrack")


@dataclass
class Detection:
    """One localized object: frame index, box, appearance patch, mask."""

    frame: int
    box: BBox
    appearance: np.ndarray
    mask: AttentionMask


@dataclass(frozen=True)
class TruncatedTrajectory:
    """A ground-truth trajectory restricted to frames before a cut point.

    ``entries`` are (frame, index within that frame's detection list),
    ascending in frame.
    """

    identity: int
    entries: tuple[tuple[int, int], ...]

    @property
    def frames(self) -> tuple[int, ...]:
        return tuple(f for f, _ in self.entries)

    @property
    def last_entry(self) -> tuple[int, int]:
        return self.entries[-1]


@dataclass
class PerFrameTargets:
    """Detection-trajectory supervision for one frame of a clip."""

    t: int
    trajectories: list[TruncatedTrajectory]
    det_target: np.ndarray  # (m, k+1), rows one-hot over trajectories + null
    traj_target: np.ndarray  # (k+1, m), non-null rows one-hot or zero


@dataclass
class GroundTruthTargets:
    clip_matrix: np.ndarray
    clip_key_groups: list
    per_frame: list[PerFrameTargets]


@dataclass
class ClipSample:
    """T consecutive frames of labeled detections plus derived targets."""

    frames: list[list[Detection]]
    identities: list[list[int]]
    geom: ImageGeometry
    targets: GroundTruthTargets | None = None

    def __post_init__(self):
        if len(self.frames) != len(self.identities):
            raise ValueError("frames and identity labels must align")
        for dets, ids in zip(self.frames, self.identities):
            if len(dets) != len(ids):
                raise ValueError("one identity label per detection required")
            if len(set(ids)) != len(ids):
                raise ValueError("an identity may appear at most once per frame")
        if self.targets is None:
            self.targets = build_targets(self)

    def flatten(self) -> list[tuple[int, int, Detection, int]]:
        """(frame, index-in-frame, detection, identity) in clip order."""
        out = []
        for f, (dets, ids) in enumerate(zip(self.frames, self.identities)):
            for i, (d, ident) in enumerate(zip(dets, ids)):
                out.append((f, i, d, ident))
        return out


# ---------------------------------------------------------------------------
# ground-truth construction


def build_gt_clip_matrix(clip: ClipSample) -> np.ndarray:
    """N×(N+F) matrix: per query and per other frame, 1 on the identity's
    detection there, or on that frame's sink column when it has none.

    Columns: detections in clip order, then one sink per frame (ascending).
    """
    flat = clip.flatten()
    n = len(flat)
    frames_present = sorted(set(range(len(clip.frames))))
    sink_col = {f: n + j for j, f in enumerate(frames_present)}
    where = {(ident, f): col for col, (f, _, _, ident) in enumerate(flat)}
    s = np.zeros((n, n + len(frames_present)))
    for row, (f, _, _, ident) in enumerate(flat):
        for f2 in frames_present:
            if f2 == f:
                continue
            col = where.get((ident, f2))
            s[row, col if col is not None else sink_col[f2]] = 1.0
    return s


def truncate_trajectories(clip: ClipSample, t: int) -> list[TruncatedTrajectory]:
    """Ground-truth trajectories with all footage on/after frame t removed.

    Identities with no detection before t are dropped (the empty trajectory
    covers them downstream). Requires 1 <= t < clip length.
    """
    if not (1 <= t < len(clip.frames)):
        raise ValueError(f"cut frame {t} outside [1, {len(clip.frames)})")
    entries: dict[int, list[tuple[int, int]]] = {}
    for f in range(t):
        for i, ident in enumerate(clip.identities[f]):
            entries.setdefault(ident, []).append((f, i))
    return [
        TruncatedTrajectory(ident, tuple(e))
        for ident, e in sorted(entries.items())
    ]


def build_targets(clip: ClipSample) -> GroundTruthTargets:
    n = len(clip.flatten())
    frames_present = sorted(set(range(len(clip.frames))))
    key_groups = list(
        f for f in range(len(clip.frames)) for _ in clip.frames[f]
    ) + frames_present
    per_frame = []
    for t in range(1, len(clip.frames)):
        dets = clip.frames[t]
        idents = clip.identities[t]
        if not dets:
            continue
        trajs = truncate_trajectories(clip, t)
        traj_of = {tr.identity: j for j, tr in enumerate(trajs)}
        k, m = len(trajs), len(dets)
        det_target = np.zeros((m, k + 1))
        traj_target = np.zeros((k + 1, m))
        for j, ident in enumerate(idents):
            col = traj_of.get(ident, k)  # null column is last
            det_target[j, col] = 1.0
            if col != k:
                traj_target[col, j] = 1.0
        per_frame.append(PerFrameTargets(t, trajs, det_target, traj_target))
    return GroundTruthTargets(build_gt_clip_matrix(clip), key_groups, per_frame)


# ---------------------------------------------------------------------------
# losses


def _clip_loss_graph(predicted: Tensor, target: np.ndarray) -> Tensor:
    n_rows = target.shape[0]
    diff = ad.sub_const(predicted, target)
    return ad.scale(ad.sum_all(ad.square(diff)), 1.0 / float(n_rows * n_rows))


def loss_clip(target, predicted) -> float:
    """Mean squared error between association matrices, normalized by the
    squared detection count (the row count)."""
    target = np.asarray(target, dtype=np.float64)
    pred_t = predicted if isinstance(predicted, Tensor) else ad.constant(predicted)
    if pred_t.shape != target.shape:
        raise ValueError(f"shape mismatch {target.shape} vs {pred_t.shape}")
    return float(_clip_loss_graph(pred_t, target).value)


def _logistic_loss_graph(
    predicted: Tensor, target: np.ndarray, floor: float = 1e-12
) -> Tensor:
    bad = (target >= 1.0) & (predicted.value <= floor)
    if bad.any():
        warnings.warn(
            "predicted probability 0 at a ground-truth pair; clamping log at 1e-12",
            RuntimeWarning,
        )
    return ad.scale(
        ad.sum_all(ad.mul_const(ad.log_clamped(predicted, floor), target)), -1.0
    )


def loss_det_traj(targets, predictions, floor: float = 1e-12) -> float:
    """Summed logistic loss -ΣΣΣ S log Ŝ over matched matrix pairs."""
    total = 0.0
    targets, predictions = list(targets), list(predictions)
    if len(targets) != len(predictions):
        raise ValueError("need one prediction per target matrix")
    for s, s_hat in zip(targets, predictions):
        s = np.asarray(s, dtype=np.float64)
        p = s_hat if isinstance(s_hat, Tensor) else ad.constant(s_hat)
        if p.shape != s.shape:
            raise ValueError(f"shape mismatch {s.shape} vs {p.shape}")
        total += float(_logistic_loss_graph(p, s, floor).value)
    return total


# ---------------------------------------------------------------------------
# forward pass shared by training and the gradient checks


def clip_loss_forward(
    stack: EmbeddingStack,
    clip: ClipSample,
    roi: RoISpec,
    alpha_policy: AlphaPolicy = AlphaPolicy(),
    floor: float = 1e-12,
) -> tuple[Tensor, Tensor, Tensor]:
    """Build the full differentiable loss for one clip.

    Returns (l_clip, l_det_traj, l_asso) graph nodes; backward on l_asso
    populates every stack parameter gradient.
    """
    flat = clip.flatten()
    if not flat:
        raise ValueError("clip has no detections")
    geom = clip.geom
    dets = [d for _, _, d, _ in flat]
    frames = [f for f, _, _, _ in flat]
    encodings = [
        encode_roi(d.box, geom, roi) if stack.mode == "dst" else None for d in dets
    ]
    emb = embed_batch(
        stack,
        [d.appearance for d in dets],
        encodings,
        [d.mask for d in dets],
        boxes=[d.box for d in dets],
    )
    probs, _, key_groups, _ = detection_attention_graph(
        stack, emb, frames, with_sinks=True,
        frame_universe=range(len(clip.frames)),
    )
    targets = clip.targets
    l_clip = _clip_loss_graph(probs, targets.clip_matrix)

    enc_by_entry = {
        (f, i): e for (f, i, _, _), e in zip(flat, encodings)
    }
    row_of = {(f, i): r for r, (f, i, _, _) in enumerate(flat)}

    # one embedding batch for every truncated trajectory of every frame
    traj_apps, traj_encs, traj_masks, traj_boxes, spans = [], [], [], [], []
    for pf in targets.per_frame:
        spans.append((len(traj_apps), len(pf.trajectories)))
        for tr in pf.trajectories:
            lf, li = tr.last_entry
            last_det = clip.frames[lf][li]
            if stack.mode == "dst":
                patches = [enc_by_entry[e] for e in tr.entries]
                traj_encs.append(accumulate_with_policy(patches, alpha_policy).tensor)
            else:
                traj_encs.append(None)
            traj_apps.append(last_det.appearance)
            traj_masks.append(last_det.mask)
            traj_boxes.append(last_det.box)
    all_traj = (
        embed_batch(stack, traj_apps, traj_encs, traj_masks, traj_boxes)
        if traj_apps
        else None
    )

    l_dt = ad.constant(np.zeros(()))
    for pf, (off, k) in zip(targets.per_frame, spans):
        det_rows = [row_of[(pf.t, i)] for i in range(len(clip.frames[pf.t]))]
        det_emb_t = ad.take_rows(emb, det_rows)
        traj_emb = ad.take_rows(all_traj, range(off, off + k)) if k else None
        det_norm, traj_norm = det_traj_attention_graph(stack, det_emb_t, traj_emb)
        l_dt = ad.add(l_dt, _logistic_loss_graph(det_norm, pf.det_target, floor))
        l_dt = ad.add(l_dt, _logistic_loss_graph(traj_norm, pf.traj_target, floor))
    l_asso = ad.add(l_clip, l_dt)
    return l_clip, l_dt, l_asso


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    mode: str = "dst"
    embed_dim: int = 128
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    alpha_policy: AlphaPolicy = field(default_factory=AlphaPolicy)
    seed: int = 0
    floor: float = 1e-12

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


class TrainingAborted(RuntimeError):
    """Non-finite loss/gradient; carries the last finite state."""

    def __init__(self, message, stack, trace):
        super().__init__(message)
        self.stack = stack
        self.trace = trace


def train(
    clips,
    config: TrainConfig,
    stack: EmbeddingStack | None = None,
    start_iteration: int = 0,
) -> tuple[EmbeddingStack, list[tuple[int, float, float, float]]]:
    """Optimize the combined association loss over a clip stream.

    ``clips`` is an iterable of :class:`ClipSample`; exactly
    ``config.iterations`` clips are consumed. Returns the trained stack and
    the loss trace [(iteration, l_clip, l_det_traj, l_asso), ...]. The trace
    is deterministic given the stream and config.
    """
    clip_iter = iter(clips)
    trace: list[tuple[int, float, float, float]] = []
    roi = None
    snapshot: dict[str, np.ndarray] | None = None
    for step in range(config.iterations):
        try:
            clip = next(clip_iter)
        except StopIteration:
            raise ValueError(
                f"clip stream exhausted after {step} of {config.iterations} iterations"
            ) from None
        if stack is None:
            first = clip.flatten()[0][2]
            c, hr, wr = first.appearance.shape
            stack = EmbeddingStack(
                channels=c,
                roi=RoISpec(width=wr, height=hr),
                embed_dim=config.embed_dim,
                mode=config.mode,
                geom=clip.geom,
                seed=config.seed,
            )
        if roi is None:
            roi = stack.roi
        l_clip, l_dt, l_asso = clip_loss_forward(
            stack, clip, roi, config.alpha_policy, config.floor
        )
        values = (float(l_clip.value), float(l_dt.value), float(l_asso.value))
        if not all(np.isfinite(values)):
            if snapshot is not None:
                for name, p in stack.params.items():
                    p.value[...] = snapshot[name]
            raise TrainingAborted(
                f"non-finite loss at iteration {start_iteration + step + 1}",
                stack,
                trace,
            )
        snapshot = {name: p.value.copy() for name, p in stack.params.items()}
        l_asso.backward()
        try:
            adam_step(stack.parameters(), config.optimizer)
        except NonFiniteError as exc:
            for name, p in stack.params.items():
                p.value[...] = snapshot[name]
            stack.zero_grads()
            raise TrainingAborted(str(exc), stack, trace) from exc
        trace.append((start_iteration + step + 1, *values))
    if stack is None:
        raise ValueError("zero-iteration training needs an existing stack")
    return stack, trace
