"""Command-line surface: simulate, train, track, eval, ablate.

Every command is deterministic given its config file and seed. Exit codes:
0 success, 2 config validation, 3 numeric failure, 4 I/O. Set DST_LOG_LEVEL
(DEBUG/INFO/WARNING/...) to control verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .ablation import config_from_dict, run_ablation
from .association import EmbeddingStack
from .container import load_container, save_container
from .encoding import AlphaPolicy
from .metrics import evaluate, save_report
from .optim import OptimizerConfig
from .simulator import (
    ScenarioConfig,
    SyntheticVideo,
    clip_from_video,
    generate,
    load_video,
    save_video,
)
from .tracker import Tracker, TrackerConfig, load_track_output, save_track_output
from .training import TrainConfig, TrainingAborted, train

log = logging.getLogger("dstrack")

CHECKPOINT_SCHEMA_VERSION = 1
LOSS_CSV_COLUMNS = "iteration,l_clip,l_det_traj,l_asso"


class ConfigError(Exception):
    """Invalid configuration; maps to exit code 2."""


def _load_json_config(path, section: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if section not in doc:
        raise ConfigError(f"{path}: missing required section {section!r}")
    body = doc[section]
    if not isinstance(body, dict):
        raise ConfigError(f"{path}: section {section!r} must be an object")
    return body


def _build(cls, body: dict, path, label: str):
    try:
        return cls(**body)
    except TypeError as exc:
        raise ConfigError(f"{path}: bad {label} config: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{path}: bad {label} config: {exc}") from exc


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, stack: EmbeddingStack, iteration: int,
                    alpha_policy: AlphaPolicy, train_config: dict | None = None) -> None:
    header = {
        "kind": "checkpoint",
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "stack": stack.state_header(),
        "iteration": iteration,
        "alpha_policy": asdict(alpha_policy),
        "train_config": train_config or {},
    }
    save_container(path, header, stack.state_arrays())


def load_checkpoint(path) -> tuple[EmbeddingStack, int, AlphaPolicy]:
    header, arrays = load_container(path)
    if header.get("kind") != "checkpoint":
        raise ConfigError(f"{path}: not a checkpoint container")
    stack = EmbeddingStack.from_state(header["stack"], arrays)
    policy = AlphaPolicy(**header.get("alpha_policy", {"kind": "ones"}))
    return stack, int(header.get("iteration", 0)), policy


def write_loss_csv(path, trace) -> None:
    lines = [LOSS_CSV_COLUMNS]
    for it, lc, ldt, la in trace:
        lines.append(f"{it},{lc!r},{ldt!r},{la!r}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    body = _load_json_config(args.config, "scenario")
    scenario = _build(ScenarioConfig, body, args.config, "scenario")
    video = generate(scenario)
    save_video(args.out, video, manifest_path=args.manifest)
    log.info("wrote %s (%d frames)", args.out, len(video.frames))
    return 0


def _load_videos(data_path) -> list[SyntheticVideo]:
    p = Path(data_path)
    if p.is_dir():
        files = sorted(p.glob("*.dstc"))
        if not files:
            raise FileNotFoundError(f"{data_path}: no .dstc videos found")
        return [load_video(f) for f in files]
    return [load_video(p)]


def cmd_train(args) -> int:
    body = _load_json_config(args.config, "training")
    clip_length = int(body.pop("clip_length", 16))
    lr = float(body.pop("learning_rate", 1e-3))
    weight_decay = float(body.pop("weight_decay", 0.0))
    alpha = body.pop("alpha_policy", {"kind": "ones"})
    try:
        policy = AlphaPolicy(**alpha)
        optimizer = OptimizerConfig(learning_rate=lr, weight_decay=weight_decay)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{args.config}: bad training config: {exc}") from exc
    cfg = _build(
        lambda **kw: TrainConfig(optimizer=optimizer, alpha_policy=policy, **kw),
        body, args.config, "training",
    )

    videos = _load_videos(args.data)
    geom, roi = videos[0].geom, videos[0].roi

    start_iteration = 0
    if args.resume:
        stack, start_iteration, _ = load_checkpoint(args.resume)
    else:
        stack = EmbeddingStack(
            channels=geom.channels, roi=roi, embed_dim=cfg.embed_dim,
            mode=cfg.mode, geom=geom, seed=cfg.seed,
        )

    def stream():
        rng = np.random.default_rng(cfg.seed + 777)
        while True:
            v = videos[int(rng.integers(len(videos)))]
            length = min(clip_length, len(v.frames))
            start = int(rng.integers(len(v.frames) - length + 1))
            clip = clip_from_video(v, start, length)
            if clip.flatten():
                yield clip

    try:
        stack, trace = train(stream(), cfg, stack=stack, start_iteration=start_iteration)
    except TrainingAborted as exc:
        log.error("training aborted: %s; writing last finite state", exc)
        save_checkpoint(args.out, exc.stack, start_iteration + len(exc.trace),
                        policy, body)
        if args.loss_csv:
            write_loss_csv(args.loss_csv, exc.trace)
        return 3
    save_checkpoint(args.out, stack, start_iteration + len(trace), policy, body)
    if args.loss_csv:
        write_loss_csv(args.loss_csv, trace)
    log.info("wrote %s after %d iterations", args.out, start_iteration + len(trace))
    return 0


def cmd_track(args) -> int:
    stack, _, policy = load_checkpoint(args.checkpoint)
    video = load_video(args.video)
    try:
        config = TrackerConfig(
            window=args.window, birth_threshold=args.birth_threshold,
            alpha_policy=policy,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    output = Tracker(stack, config).run(video.frames)
    txt, js = save_track_output(args.out, output)
    log.info("wrote %s and %s (%d records)", txt, js, len(output.records))
    return 0


def cmd_eval(args) -> int:
    pred = load_track_output(args.pred)
    gt = load_video(args.gt)
    report = evaluate(pred, gt.frames, scenario=gt.config.kind)
    js, csv = save_report(args.out, report)
    log.info("wrote %s and %s", js, csv)
    print(
        f"association_accuracy={report.association_accuracy:.4f} "
        f"id_switches={report.id_switches} idf1={report.idf1:.4f}"
    )
    return 0


def cmd_ablate(args) -> int:
    body = _load_json_config(args.config, "ablation")
    try:
        config = config_from_dict(body)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{args.config}: bad ablation config: {exc}") from exc
    doc = run_ablation(config, args.out_dir)
    for res in doc["results"]:
        print(
            f"{res['arm']}: mean_association_accuracy="
            f"{res['mean_association_accuracy']:.4f} mean_idf1={res['mean_idf1']:.4f}"
        )
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dst",
        description="Dense spatio-temporal track association toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic labeled video")
    p.add_argument("--config", required=True, help="JSON file with a 'scenario' section")
    p.add_argument("--out", required=True, help="output video container (.dstc)")
    p.add_argument("--manifest", help="also write a JSON manifest here")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the association model on videos")
    p.add_argument("--config", required=True, help="JSON file with a 'training' section")
    p.add_argument("--data", required=True, help="video container or directory of them")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--loss-csv", help="write the loss trace CSV here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="run the online tracker on a video")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--video", required=True, help="video container to track")
    p.add_argument("--out", required=True, help="output prefix (.txt and .json)")
    p.add_argument("--window", type=int, default=16, help="sliding window length")
    p.add_argument("--birth-threshold", type=float, default=0.3,
                   help="minimum association score to extend a track")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score a tracking result against ground truth")
    p.add_argument("--pred", required=True, help="tracking result JSON")
    p.add_argument("--gt", required=True, help="ground-truth video container")
    p.add_argument("--out", required=True, help="report prefix (.json and .csv)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run encoding/mask comparison arms")
    p.add_argument("--config", required=True, help="JSON file with an 'ablation' section")
    p.add_argument("--out-dir", required=True, help="directory for CSV/JSON/SVG outputs")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("DST_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
