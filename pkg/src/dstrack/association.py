"""Embedding of masked RoI features and attention-based association scores.

Tokens are built as g(mask ⊙ (appearance + L(position code))): the bias-free
linear map L acts per RoI cell on the channel axis of the position code, the
mask is copied across channels, and g is a two linear+ReLU projection down
to a D-vector. Detection-detection scores are the scaled dot products of
projected tokens, softmax-normalized per key frame; detection-trajectory
scores come from the same logits normalized over each of the two axes.
Trajectory tokens run through the identical pipeline, only with the
accumulated trajectory code in place of a single-frame code, so a length-1
trajectory embeds bit-identically to its detection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .encoding import (
    AlphaPolicy,
    BBox,
    ImageGeometry,
    RoISpec,
    TrajectoryEncoding,
    classic_token_code,
)

ENCODING_MODES = ("dst", "classic", "none")


@dataclass(frozen=True)
class AttentionMask:
    """Per-RoI-cell weight in [0, 1] selecting which cells are attended."""

    grid: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float64)
        object.__setattr__(self, "grid", g)
        if g.ndim != 2:
            raise ValueError("mask must be a 2D grid")
        if g.min() < 0.0 or g.max() > 1.0:
            raise ValueError("mask values must lie in [0, 1]")
        if not g.any():
            raise ValueError("mask must not be all zero")

    @classmethod
    def ones(cls, roi: RoISpec) -> "AttentionMask":
        return cls(np.ones((roi.height, roi.width)))


def apply_mask(features: np.ndarray, mask: AttentionMask) -> np.ndarray:
    """Scale every channel of a C×H×W patch by the per-cell mask."""
    if features.ndim != 3 or features.shape[1:] != mask.grid.shape:
        raise ValueError(
            f"feature spatial shape {features.shape[1:]} != mask {mask.grid.shape}"
        )
    return features * mask.grid[None, :, :]


class EmbeddingStack:
    """All learned pieces of the association model.

    ``mode`` selects the position-information arm: "dst" (per-cell code
    through L), "classic" (1D token code added after projection) or "none".
    """

    def __init__(
        self,
        channels: int = 64,
        roi: RoISpec = RoISpec(),
        embed_dim: int = 128,
        mode: str = "dst",
        geom: ImageGeometry | None = None,
        seed: int = 0,
    ):
        if mode not in ENCODING_MODES:
            raise ValueError(f"mode must be one of {ENCODING_MODES}")
        self.channels = channels
        self.roi = roi
        self.embed_dim = embed_dim
        self.mode = mode
        self.geom = geom
        self.seed = seed
        c, d = channels, embed_dim
        flat = c * roi.height * roi.width
        rng = np.random.default_rng(seed)

        def uniform(shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        self.params: dict[str, Parameter] = {}
        if mode == "dst":
            # near-identity start keeps untrained codes position-separating
            self.params["l_map"] = Parameter(
                np.eye(c) + rng.uniform(-0.01, 0.01, size=(c, c)), "l_map"
            )
        self.params["g1_w"] = Parameter(uniform((flat, d), flat), "g1_w")
        self.params["g1_b"] = Parameter(np.zeros(d), "g1_b")
        self.params["g2_w"] = Parameter(uniform((d, d), d), "g2_w")
        self.params["g2_b"] = Parameter(np.zeros(d), "g2_b")
        self.params["q_w"] = Parameter(uniform((d, d), d), "q_w")
        self.params["q_b"] = Parameter(np.zeros(d), "q_b")
        self.params["k_w"] = Parameter(uniform((d, d), d), "k_w")
        self.params["k_b"] = Parameter(np.zeros(d), "k_b")
        self.params["null_key"] = Parameter(uniform((1, d), d), "null_key")
        self.params["sink_key"] = Parameter(uniform((1, d), d), "sink_key")

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- persistence -------------------------------------------------------

    def state_header(self) -> dict:
        return {
            "channels": self.channels,
            "roi": [self.roi.height, self.roi.width],
            "embed_dim": self.embed_dim,
            "mode": self.mode,
            "geom": [self.geom.width, self.geom.height, self.geom.channels]
            if self.geom
            else None,
            "seed": self.seed,
        }

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays: dict[str, np.ndarray] = {}
        for name, p in self.params.items():
            arrays[f"param/{name}"] = p.value.copy()
            arrays[f"adam_m/{name}"] = p.m.copy()
            arrays[f"adam_v/{name}"] = p.v.copy()
            arrays[f"adam_t/{name}"] = np.array([p.steps], dtype=np.int64)
        return arrays

    @classmethod
    def from_state(cls, header: dict, arrays: dict[str, np.ndarray]) -> "EmbeddingStack":
        geom = None
        if header.get("geom"):
            gw, gh, gc = header["geom"]
            geom = ImageGeometry(gw, gh, gc)
        stack = cls(
            channels=header["channels"],
            roi=RoISpec(width=header["roi"][1], height=header["roi"][0]),
            embed_dim=header["embed_dim"],
            mode=header["mode"],
            geom=geom,
            seed=header.get("seed", 0),
        )
        for name, p in stack.params.items():
            p.value[...] = arrays[f"param/{name}"]
            p.m[...] = arrays[f"adam_m/{name}"]
            p.v[...] = arrays[f"adam_v/{name}"]
            p.steps = int(arrays[f"adam_t/{name}"][0])
        return stack


# ---------------------------------------------------------------------------
# embedding


def _stack_patches(patches) -> np.ndarray:
    return np.stack([np.asarray(p, dtype=np.float64) for p in patches])


def embed_batch(
    stack: EmbeddingStack,
    appearances,
    encodings,
    masks,
    boxes=None,
) -> Tensor:
    """Differentiable token embeddings, one row per detection/trajectory.

    ``encodings`` entries may be None in the classic/none modes; ``boxes``
    is required by the classic mode for the token position code.
    """
    apps = _stack_patches(appearances)
    n, c, hr, wr = apps.shape
    if (c, hr, wr) != (stack.channels, stack.roi.height, stack.roi.width):
        raise ValueError(f"patch shape {(c, hr, wr)} does not match stack dims")
    mask_grid = _stack_patches([m.grid for m in masks])
    if mask_grid.shape != (n, hr, wr):
        raise ValueError("need one mask per patch with matching spatial shape")

    cells = n * hr * wr
    app_cells = np.moveaxis(apps, 1, 3).reshape(cells, c)
    mask_cells = mask_grid.reshape(cells, 1)

    if stack.mode == "dst":
        if any(e is None for e in encodings):
            raise ValueError("dst mode requires a position code per token")
        encs = _stack_patches(encodings)
        if encs.shape != apps.shape:
            raise ValueError("position codes must match appearance shape")
        enc_cells = ad.constant(np.moveaxis(encs, 1, 3).reshape(cells, c))
        base = ad.add(
            ad.constant(app_cells), ad.matmul(enc_cells, stack.params["l_map"].tensor())
        )
    else:
        base = ad.constant(app_cells)

    masked = ad.mul_const(base, mask_cells)
    flat = ad.reshape(masked, (n, hr * wr * c))
    h1 = ad.relu(ad.linear(flat, stack.params["g1_w"], stack.params["g1_b"]))
    h2 = ad.relu(ad.linear(h1, stack.params["g2_w"], stack.params["g2_b"]))

    if stack.mode == "classic":
        if boxes is None or any(b is None for b in boxes):
            raise ValueError("classic mode requires a box per token")
        if stack.geom is None:
            raise ValueError("classic mode requires the stack to know the image geometry")
        codes = np.stack(
            [classic_token_code(b, stack.geom, stack.embed_dim) for b in boxes]
        )
        h2 = ad.add(h2, ad.constant(codes))
    return h2


def embed_detection(
    appearance: np.ndarray,
    encoding: np.ndarray | None,
    mask: AttentionMask,
    stack: EmbeddingStack,
    box: BBox | None = None,
) -> np.ndarray:
    """Token for one detection; deterministic given the stack parameters."""
    out = embed_batch(stack, [appearance], [encoding], [mask], boxes=[box])
    return out.value[0]


def embed_trajectory(
    traj: TrajectoryEncoding,
    last_snapshot: np.ndarray,
    last_mask: AttentionMask,
    stack: EmbeddingStack,
    last_box: BBox | None = None,
) -> np.ndarray:
    """Token for a trajectory: same pipeline, accumulated code as input."""
    encoding = traj.tensor if stack.mode == "dst" else None
    out = embed_batch(stack, [last_snapshot], [encoding], [last_mask], boxes=[last_box])
    return out.value[0]


# ---------------------------------------------------------------------------
# association matrices


@dataclass
class AssociationMatrix:
    """Scores between queries and grouped keys, row-stochastic per group."""

    scores: np.ndarray
    query_ids: list
    key_ids: list
    key_groups: list

    def __post_init__(self):
        s = self.scores
        if s.shape != (len(self.query_ids), len(self.key_ids)):
            raise ValueError("score shape does not match id lists")
        if len(self.key_groups) != len(self.key_ids):
            raise ValueError("need one group label per key")
        for r, gsum in self.group_sums():
            if not (abs(gsum) <= 1e-6 or abs(gsum - 1.0) <= 1e-6):
                raise ValueError(
                    f"row {r}: key-group mass {gsum} is neither 0 nor 1"
                )
        self._qidx = {q: i for i, q in enumerate(self.query_ids)}
        self._kidx = {k: j for j, k in enumerate(self.key_ids)}

    def group_sums(self):
        groups: dict = {}
        for j, g in enumerate(self.key_groups):
            groups.setdefault(g, []).append(j)
        for r in range(self.scores.shape[0]):
            for g, idx in groups.items():
                yield r, float(self.scores[r, idx].sum())

    def score(self, query_id, key_id) -> float:
        return float(self.scores[self._qidx[query_id], self._kidx[key_id]])


def sink_id(frame: int) -> tuple[str, int]:
    return ("sink", frame)


NULL_ID = "null"


def _project(stack: EmbeddingStack, emb: Tensor, which: str) -> Tensor:
    return ad.linear(emb, stack.params[f"{which}_w"], stack.params[f"{which}_b"])


def detection_attention_graph(
    stack: EmbeddingStack,
    embeddings: Tensor,
    frames,
    with_sinks: bool = False,
    frame_universe=None,
):
    """Per-frame-normalized detection-detection score graph.

    Returns (probs Tensor, key_ids, key_groups, valid mask). Key columns are
    the detections in input order, then one shared learned sink key per
    frame when ``with_sinks``; a query's own frame group is excluded.
    ``frame_universe`` widens the sink set to frames without detections.
    """
    frames = list(frames)
    n = embeddings.shape[0]
    if len(frames) != n:
        raise ValueError("need one frame label per embedding")
    q = _project(stack, embeddings, "q")
    k = _project(stack, embeddings, "k")
    key_groups: list = list(frames)
    key_ids: list = list(range(n))
    universe = set(frames) | (set(frame_universe) if frame_universe is not None else set())
    unique_frames = sorted(universe)
    if with_sinks:
        sink_rows = ad.concat_rows(
            [stack.params["sink_key"].tensor() for _ in unique_frames]
        )
        k = ad.concat_rows([k, sink_rows])
        key_groups += unique_frames
        key_ids += [sink_id(f) for f in unique_frames]
    logits = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(stack.embed_dim))
    valid = np.array(
        [[kg != qf for kg in key_groups] for qf in frames], dtype=bool
    )
    probs = ad.grouped_softmax(logits, key_groups, valid=valid)
    return probs, key_ids, key_groups, valid


def detection_attention(
    embeddings,
    frames,
    stack: EmbeddingStack,
    with_sinks: bool = False,
    detection_ids=None,
    frame_universe=None,
) -> AssociationMatrix:
    """Associate detections across frames (no association inside a frame)."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2:
        emb = np.stack(list(embeddings))
    probs, key_ids, key_groups, _ = detection_attention_graph(
        stack, ad.constant(emb), frames, with_sinks=with_sinks,
        frame_universe=frame_universe,
    )
    frames = list(frames)
    ids = list(detection_ids) if detection_ids is not None else list(range(len(frames)))
    key_ids = [ids[k] if isinstance(k, int) else k for k in key_ids]
    return AssociationMatrix(probs.value, ids, key_ids, key_groups)


def det_traj_attention_graph(
    stack: EmbeddingStack,
    det_embeddings: Tensor,
    traj_embeddings: Tensor | None,
):
    """Cross-attention between detections and trajectories plus the learned
    null key. Returns (det-normalized Tensor m×(k+1), traj-normalized
    Tensor (k+1)×m) from one shared logit matrix."""
    q = _project(stack, det_embeddings, "q")
    if traj_embeddings is not None and traj_embeddings.shape[0] > 0:
        k = ad.concat_rows(
            [_project(stack, traj_embeddings, "k"), stack.params["null_key"].tensor()]
        )
        n_keys = traj_embeddings.shape[0] + 1
    else:
        k = stack.params["null_key"].tensor()
        n_keys = 1
    logits = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(stack.embed_dim))
    det_norm = ad.grouped_softmax(logits, ["t"] * n_keys)
    traj_norm = ad.grouped_softmax(ad.transpose(logits), ["d"] * det_embeddings.shape[0])
    return det_norm, traj_norm


def det_traj_attention(
    det_embeddings,
    traj_embeddings,
    stack: EmbeddingStack,
    detection_ids=None,
    trajectory_ids=None,
) -> tuple[AssociationMatrix, AssociationMatrix]:
    """Score detections against trajectories (the null key is always a key).

    Returns two matrices built from the same logits: one normalized over
    trajectory keys per detection, one over detection keys per trajectory.
    """
    demb = np.asarray(det_embeddings, dtype=np.float64)
    if demb.ndim != 2:
        demb = np.stack(list(det_embeddings))
    tlist = list(traj_embeddings)
    temb = np.stack(tlist) if tlist else None
    det_norm, traj_norm = det_traj_attention_graph(
        stack,
        ad.constant(demb),
        ad.constant(temb) if temb is not None else None,
    )
    det_ids = (
        list(detection_ids) if detection_ids is not None else list(range(demb.shape[0]))
    )
    traj_ids = (
        list(trajectory_ids) if trajectory_ids is not None else list(range(len(tlist)))
    )
    traj_keys = traj_ids + [NULL_ID]
    over_traj = AssociationMatrix(
        det_norm.value, det_ids, traj_keys, ["trajectories"] * len(traj_keys)
    )
    over_det = AssociationMatrix(
        traj_norm.value, traj_keys, det_ids, ["detections"] * len(det_ids)
    )
    return over_traj, over_det
