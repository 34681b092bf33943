"""Tracking quality scores against simulator ground truth.

Detections correspond to ground truth by exact (frame, box) equality; the
simulator hands the tracker its own boxes, so no IoU matching stage is
needed and the scores isolate pure association quality.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .tracker import TrackOutput, hungarian


def _box_key(box) -> tuple:
    return tuple(float(x) for x in box.as_tuple())


def _pred_index(pred: TrackOutput) -> dict[tuple, int]:
    return {(r.frame, _box_key(r.box)): r.track_id for r in pred.records}


def _gt_sequences(gt_frames) -> dict[int, list[tuple[int, tuple]]]:
    """Per ground-truth identity, its (frame, box-key) detections in order."""
    seqs: dict[int, list[tuple[int, tuple]]] = {}
    for f, dets in enumerate(gt_frames):
        for d in dets:
            seqs.setdefault(d.identity, []).append((f, _box_key(d.box)))
    for s in seqs.values():
        s.sort(key=lambda e: e[0])
    return seqs


def association_accuracy(pred: TrackOutput, gt_frames) -> float:
    """Fraction of consecutive same-identity detection pairs kept in one
    predicted track. With no pairs at all, reports 1.0 and warns."""
    assigned = _pred_index(pred)
    kept = 0
    total = 0
    for seq in _gt_sequences(gt_frames).values():
        for (f1, k1), (f2, k2) in zip(seq, seq[1:]):
            total += 1
            t1 = assigned.get((f1, k1))
            t2 = assigned.get((f2, k2))
            if t1 is not None and t1 == t2:
                kept += 1
    if total == 0:
        warnings.warn("no consecutive ground-truth pairs to score", RuntimeWarning)
        return 1.0
    return kept / total


def id_switches(pred: TrackOutput, gt_frames) -> int:
    """Count assignment changes along each ground-truth identity."""
    assigned = _pred_index(pred)
    switches = 0
    for seq in _gt_sequences(gt_frames).values():
        prev = None
        for f, k in seq:
            tid = assigned.get((f, k))
            if tid is None:
                continue
            if prev is not None and tid != prev:
                switches += 1
            prev = tid
    return switches


def idf1(pred: TrackOutput, gt_frames) -> float:
    """Identity F1 after the optimal identity-to-track bipartite matching."""
    assigned = _pred_index(pred)
    gt_seqs = _gt_sequences(gt_frames)
    n_gt = sum(len(s) for s in gt_seqs.values())
    n_pred = len(pred.records)
    if n_gt == 0 and n_pred == 0:
        return 1.0
    if n_gt == 0 or n_pred == 0:
        return 0.0
    gt_ids = sorted(gt_seqs)
    track_ids = sorted({r.track_id for r in pred.records})
    tidx = {t: j for j, t in enumerate(track_ids)}
    overlap = np.zeros((len(gt_ids), len(track_ids)))
    for i, g in enumerate(gt_ids):
        for f, k in gt_seqs[g]:
            tid = assigned.get((f, k))
            if tid is not None:
                overlap[i, tidx[tid]] += 1.0
    match = hungarian(-overlap)
    idtp = sum(overlap[r, c] for r, c in match.items())
    idfp = n_pred - idtp
    idfn = n_gt - idtp
    return float(2.0 * idtp / (2.0 * idtp + idfp + idfn))


@dataclass
class EvalReport:
    association_accuracy: float
    id_switches: int
    idf1: float
    per_scenario: dict[str, dict] = field(default_factory=dict)
    no_pairs_warning: bool = False

    def __post_init__(self):
        if not (0.0 <= self.association_accuracy <= 1.0):
            raise ValueError("association accuracy must lie in [0, 1]")
        if not (0.0 <= self.idf1 <= 1.0):
            raise ValueError("idf1 must lie in [0, 1]")
        if self.id_switches < 0:
            raise ValueError("switch count must be nonnegative")

    def to_json(self) -> dict:
        return {
            "format": "dst-eval",
            "schema_version": 1,
            "association_accuracy": self.association_accuracy,
            "id_switches": self.id_switches,
            "idf1": self.idf1,
            "no_pairs_warning": self.no_pairs_warning,
            "per_scenario": self.per_scenario,
        }

    CSV_COLUMNS = "association_accuracy,id_switches,idf1,no_pairs_warning"

    def to_csv_row(self) -> str:
        return (
            f"{self.association_accuracy!r},{self.id_switches},"
            f"{self.idf1!r},{int(self.no_pairs_warning)}"
        )


def evaluate(pred: TrackOutput, gt_frames, scenario: str | None = None) -> EvalReport:
    """Full report for one video."""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        acc = association_accuracy(pred, gt_frames)
    no_pairs = any(issubclass(w.category, RuntimeWarning) for w in caught)
    report = EvalReport(
        association_accuracy=acc,
        id_switches=id_switches(pred, gt_frames),
        idf1=idf1(pred, gt_frames),
        no_pairs_warning=no_pairs,
    )
    if scenario is not None:
        report.per_scenario[scenario] = {
            "association_accuracy": report.association_accuracy,
            "id_switches": report.id_switches,
            "idf1": report.idf1,
        }
    return report


def save_report(prefix, report: EvalReport) -> tuple[str, str]:
    js, csv = f"{prefix}.json", f"{prefix}.csv"
    with open(js, "w") as fh:
        json.dump(report.to_json(), fh, sort_keys=True, indent=1)
        fh.write("\n")
    with open(csv, "w") as fh:
        fh.write(EvalReport.CSV_COLUMNS + "\n" + report.to_csv_row() + "\n")
    return js, csv
