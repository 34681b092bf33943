"""Online tracking: windowed association scoring, one-to-one assignment,
track birth, extension and retirement.

A video is consumed frame by frame with a stride-1 window of length T. The
first window links detections frame-by-frame into initial tracks; each
later frame scores its detections against live tracks by averaging the
detection-trajectory attention score with the mean detection-detection
score over the track's in-window members, assigns with the Hungarian
algorithm on (1 - score) with sub-threshold pairs forbidden, extends
matched tracks and births new ones from the rest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .association import (
    AttentionMask,
    EmbeddingStack,
    detection_attention,
    det_traj_attention,
    embed_batch,
)
from .encoding import (
    AlphaPolicy,
    BBox,
    RoISpec,
    TrajectoryEncoding,
    accumulate_with_policy,
    encode_roi,
    extend_trajectory,
)
from .training import Detection


@dataclass(frozen=True)
class TrackerConfig:
    window: int = 16
    birth_threshold: float = 0.3
    alpha_policy: AlphaPolicy = field(default_factory=AlphaPolicy)

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("window length must be >= 2")
        if not (0.0 < self.birth_threshold < 1.0):
            raise ValueError("birth threshold must lie in (0, 1)")


@dataclass
class TrackState:
    track_id: int
    encoding: TrajectoryEncoding | None
    last_snapshot: np.ndarray
    last_mask: AttentionMask
    last_box: BBox
    history: list[tuple[int, BBox]]
    members: list[tuple[int, int]]  # (frame, index-in-frame) of owned detections
    scores: list[float]
    active: bool = True

    @property
    def last_frame(self) -> int:
        return self.history[-1][0]


@dataclass(frozen=True)
class TrackRecord:
    frame: int
    track_id: int
    box: BBox
    score: float


@dataclass
class TrackOutput:
    records: list[TrackRecord]

    def by_track(self) -> dict[int, list[TrackRecord]]:
        out: dict[int, list[TrackRecord]] = {}
        for r in self.records:
            out.setdefault(r.track_id, []).append(r)
        for rs in out.values():
            rs.sort(key=lambda r: r.frame)
        return out


# ---------------------------------------------------------------------------
# assignment


def hungarian(cost) -> dict[int, int]:
    """Minimum-total-cost one-to-one assignment {row: column}.

    np.inf marks forbidden pairs: among feasible assignments the result has
    maximum cardinality first, minimum cost second. Rectangular inputs
    leave extras unassigned; a row with no finite entry stays unassigned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    if cost.size == 0:
        return {}
    if np.isnan(cost).any():
        raise ValueError("cost matrix contains NaN")
    finite = np.isfinite(cost)
    if not finite.any():
        return {}
    big = 2.0 * np.abs(cost[finite]).sum() + 1.0
    filled = np.where(finite, cost, big)
    rows, cols = linear_sum_assignment(filled)
    return {int(r): int(c) for r, c in zip(rows, cols) if finite[r, c]}


def assign_by_scores(scores: np.ndarray, threshold: float) -> dict[int, int]:
    """Hungarian on cost 1 - score with pairs below the threshold forbidden."""
    scores = np.asarray(scores, dtype=np.float64)
    cost = np.where(scores >= threshold, 1.0 - scores, np.inf)
    return hungarian(cost)


# ---------------------------------------------------------------------------
# engine


class Tracker:
    """One online engine per video; internally sequential."""

    def __init__(self, stack: EmbeddingStack, config: TrackerConfig = TrackerConfig()):
        self.stack = stack
        self.config = config
        self.roi = stack.roi
        self.tracks: list[TrackState] = []
        self.records: list[TrackRecord] = []
        self._window: dict[int, list[Detection]] = {}
        self._embeddings: dict[tuple[int, int], np.ndarray] = {}
        self._next_id = 0
        self._frames_seen = 0

    # -- embedding helpers ---------------------------------------------------

    def _detection_embeddings(self, frame: int, dets: list[Detection]) -> None:
        if not dets:
            return
        encs = [
            encode_roi(d.box, self.stack.geom, self.roi)
            if self.stack.mode == "dst"
            else None
            for d in dets
        ]
        embs = embed_batch(
            self.stack,
            [d.appearance for d in dets],
            encs,
            [d.mask for d in dets],
            boxes=[d.box for d in dets],
        ).value
        for i, e in enumerate(embs):
            self._embeddings[(frame, i)] = e

    def _track_embeddings(self, tracks: list[TrackState]) -> np.ndarray:
        encs = [t.encoding.tensor if t.encoding is not None else None for t in tracks]
        return embed_batch(
            self.stack,
            [t.last_snapshot for t in tracks],
            encs,
            [t.last_mask for t in tracks],
            boxes=[t.last_box for t in tracks],
        ).value

    def _window_matrix(self):
        """Detection-detection attention over the current window."""
        keys = [
            (f, i)
            for f in sorted(self._window)
            for i in range(len(self._window[f]))
        ]
        if not keys:
            return None, {}
        embs = np.stack([self._embeddings[k] for k in keys])
        frames = [f for f, _ in keys]
        matrix = detection_attention(
            embs,
            frames,
            self.stack,
            with_sinks=True,
            detection_ids=keys,
            frame_universe=sorted(self._window),
        )
        return matrix, {k: j for j, k in enumerate(keys)}

    # -- track bookkeeping ----------------------------------------------------

    def _birth(self, frame: int, idx: int, det: Detection, score: float) -> TrackState:
        enc = None
        if self.stack.mode == "dst":
            patch = encode_roi(det.box, self.stack.geom, self.roi)
            enc = accumulate_with_policy([patch], self.config.alpha_policy)
        track = TrackState(
            track_id=self._next_id,
            encoding=enc,
            last_snapshot=det.appearance,
            last_mask=det.mask,
            last_box=det.box,
            history=[(frame, det.box)],
            members=[(frame, idx)],
            scores=[score],
        )
        self._next_id += 1
        self.tracks.append(track)
        self.records.append(TrackRecord(frame, track.track_id, det.box, score))
        return track

    def _extend(self, track: TrackState, frame: int, idx: int, det: Detection, score: float) -> None:
        if self.stack.mode == "dst":
            patch = encode_roi(det.box, self.stack.geom, self.roi)
            carried = track.encoding.scaled(self.config.alpha_policy.carry_factor)
            track.encoding = extend_trajectory(carried, patch, 1.0)
        track.last_snapshot = det.appearance
        track.last_mask = det.mask
        track.last_box = det.box
        track.history.append((frame, det.box))
        track.members.append((frame, idx))
        track.scores.append(score)
        self.records.append(TrackRecord(frame, track.track_id, det.box, score))

    def _slide_window(self, frame: int, dets: list[Detection]) -> None:
        self._window[frame] = dets
        horizon = frame - self.config.window + 1
        for f in [f for f in self._window if f < horizon]:
            for i in range(len(self._window[f])):
                self._embeddings.pop((f, i), None)
            del self._window[f]

    def _retire(self, frame: int) -> None:
        for t in self.tracks:
            if t.active and frame - t.last_frame > self.config.window:
                t.active = False

    # -- spec operations -------------------------------------------------------

    def init_from_first_clip(self, clip_frames: list[list[Detection]]) -> list[TrackState]:
        """Greedy frame-by-frame linking of the first window's detections."""
        for f, dets in enumerate(clip_frames):
            self._slide_window(f, dets)
            self._detection_embeddings(f, dets)
        matrix, col_of = self._window_matrix()
        chains: list[TrackState] = []
        for f, dets in enumerate(clip_frames):
            if not dets:
                self._frames_seen = f + 1
                continue
            if f == 0 or not chains:
                for i, d in enumerate(dets):
                    chains.append(self._birth(f, i, d, 1.0))
                self._frames_seen = f + 1
                continue
            scores = np.zeros((len(dets), len(chains)))
            for di in range(len(dets)):
                for ci, chain in enumerate(chains):
                    vals = [
                        matrix.scores[col_of[(f, di)], col_of[m]]
                        for m in chain.members
                    ]
                    scores[di, ci] = float(np.mean(vals))
            assigned = assign_by_scores(scores, self.config.birth_threshold)
            for di, d in enumerate(dets):
                if di in assigned:
                    self._extend(chains[assigned[di]], f, di, d, scores[di, assigned[di]])
                else:
                    chains.append(self._birth(f, di, d, 1.0))
            self._frames_seen = f + 1
        return self.tracks

    def step(self, frame: int, dets: list[Detection]) -> list[TrackState]:
        """Associate one new frame against live tracks; extend or birth."""
        self._slide_window(frame, dets)
        self._detection_embeddings(frame, dets)
        live = [t for t in self.tracks if t.active]
        if dets and live:
            matrix, col_of = self._window_matrix()
            det_embs = np.stack([self._embeddings[(frame, i)] for i in range(len(dets))])
            traj_embs = self._track_embeddings(live)
            over_traj, _ = det_traj_attention(
                det_embs,
                traj_embs,
                self.stack,
                trajectory_ids=[t.track_id for t in live],
            )
            horizon = frame - self.config.window + 1
            scores = np.zeros((len(dets), len(live)))
            for di in range(len(dets)):
                for ti, track in enumerate(live):
                    dt = over_traj.scores[di, ti]
                    members = [
                        m for m in track.members if horizon <= m[0] < frame
                    ]
                    if members:
                        dd = float(
                            np.mean(
                                [matrix.scores[col_of[(frame, di)], col_of[m]] for m in members]
                            )
                        )
                        scores[di, ti] = 0.5 * (dt + dd)
                    else:
                        scores[di, ti] = dt
            assigned = assign_by_scores(scores, self.config.birth_threshold)
        else:
            assigned = {}
        for di, d in enumerate(dets):
            if di in assigned:
                track = live[assigned[di]]
                self._extend(track, frame, di, d, scores[di, assigned[di]])
            else:
                self._birth(frame, di, d, 1.0)
        self._frames_seen = frame + 1
        self._retire(frame)
        return self.tracks

    def run(self, video_frames: list[list[Detection]]) -> TrackOutput:
        """Track a whole video; every detection lands in exactly one track."""
        if not video_frames:
            return TrackOutput([])
        head = min(self.config.window, len(video_frames))
        self.init_from_first_clip(video_frames[:head])
        for f in range(head, len(video_frames)):
            self.step(f, video_frames[f])
        records = sorted(self.records, key=lambda r: (r.frame, r.track_id))
        return TrackOutput(records)


def run(video_frames, stack: EmbeddingStack, config: TrackerConfig = TrackerConfig()) -> TrackOutput:
    return Tracker(stack, config).run(video_frames)


# ---------------------------------------------------------------------------
# serialization

TRACK_SCHEMA_VERSION = 1


def to_mot_text(output: TrackOutput) -> str:
    """MOTChallenge-style lines `frame,id,u,v,w,h,score` (1-based frame/id,
    floats with 6 decimals)."""
    lines = []
    for r in output.records:
        u, v, w, h = r.box.as_tuple()
        lines.append(
            f"{r.frame + 1},{r.track_id + 1},{u:.6f},{v:.6f},{w:.6f},{h:.6f},{r.score:.6f}"
        )
    return "\n".join(lines) + ("\n" if lines else "")


def to_json_doc(output: TrackOutput) -> dict:
    """Lossless per-track arrays (exact float round-trip via JSON repr)."""
    tracks = []
    for tid, records in sorted(output.by_track().items()):
        tracks.append(
            {
                "id": tid,
                "frames": [r.frame for r in records],
                "boxes": [list(r.box.as_tuple()) for r in records],
                "scores": [r.score for r in records],
            }
        )
    return {"format": "dst-tracks", "schema_version": TRACK_SCHEMA_VERSION, "tracks": tracks}


def from_json_doc(doc: dict) -> TrackOutput:
    if doc.get("format") != "dst-tracks":
        raise ValueError("not a track document")
    records = []
    for tr in doc["tracks"]:
        for f, box, s in zip(tr["frames"], tr["boxes"], tr["scores"]):
            records.append(TrackRecord(f, tr["id"], BBox(*box), s))
    return TrackOutput(sorted(records, key=lambda r: (r.frame, r.track_id)))


def save_track_output(prefix, output: TrackOutput) -> tuple[str, str]:
    """Write `<prefix>.txt` (MOT text) and `<prefix>.json`; returns paths."""
    txt = f"{prefix}.txt"
    js = f"{prefix}.json"
    with open(txt, "w") as fh:
        fh.write(to_mot_text(output))
    with open(js, "w") as fh:
        json.dump(to_json_doc(output), fh, sort_keys=True, indent=1)
        fh.write("\n")
    return txt, js


def load_track_output(path) -> TrackOutput:
    with open(path) as fh:
        return from_json_doc(json.load(fh))
