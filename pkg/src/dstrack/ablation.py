"""Controlled comparison runs: train arm variants on identical data seeds,
track a shared evaluation set, score, and emit CSV/JSON/SVG artifacts."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .association import AttentionMask, EmbeddingStack
from .container import save_container
from .encoding import AlphaPolicy, RoISpec
from .metrics import evaluate
from .optim import OptimizerConfig
from .simulator import ScenarioConfig, SyntheticVideo, clip_from_video, generate
from .tracker import Tracker, TrackerConfig
from .training import ClipSample, TrainConfig, train

log = logging.getLogger("dstrack")

CSV_COLUMNS = (
    "arm,encoding,mask,videos,mean_association_accuracy,mean_idf1,"
    "id_switches_total,iterations,seed"
)


@dataclass(frozen=True)
class ArmSpec:
    name: str
    encoding: str = "dst"
    mask: bool = True


@dataclass(frozen=True)
class AblationConfig:
    scenario: ScenarioConfig
    arms: tuple[ArmSpec, ...] = (
        ArmSpec("dst", "dst"),
        ArmSpec("classic", "classic"),
        ArmSpec("none", "none"),
    )
    eval_videos: int = 100
    train_videos: int = 48
    iterations: int = 1500
    clip_length: int = 16
    embed_dim: int = 128
    learning_rate: float = 1e-3
    alpha_policy: AlphaPolicy = field(default_factory=lambda: AlphaPolicy("exp_decay", 0.9))
    birth_threshold: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.eval_videos < 1 or self.train_videos < 1:
            raise ValueError("need at least one train and one eval video")
        if len({a.name for a in self.arms}) != len(self.arms):
            raise ValueError("arm names must be unique")


def _strip_masks(dets, roi: RoISpec):
    ones = AttentionMask.ones(roi)
    return [replace(d, mask=ones) for d in dets]


def _clip_stream(videos: list[SyntheticVideo], clip_length: int, seed: int, use_mask: bool):
    rng = np.random.default_rng(seed)
    roi = videos[0].roi
    while True:
        v = videos[int(rng.integers(len(videos)))]
        length = min(clip_length, len(v.frames))
        start = int(rng.integers(len(v.frames) - length + 1))
        clip = clip_from_video(v, start, length)
        if not use_mask:
            clip = ClipSample(
                frames=[_strip_masks(f, roi) for f in clip.frames],
                identities=clip.identities,
                geom=clip.geom,
            )
        if clip.flatten():
            yield clip


def train_arm(
    arm: ArmSpec,
    config: AblationConfig,
    train_videos: list[SyntheticVideo],
) -> tuple[EmbeddingStack, list]:
    scenario = config.scenario
    stack = EmbeddingStack(
        channels=scenario.channels,
        roi=scenario.roi,
        embed_dim=config.embed_dim,
        mode=arm.encoding,
        geom=scenario.geom,
        seed=config.seed,
    )
    train_cfg = TrainConfig(
        iterations=config.iterations,
        mode=arm.encoding,
        embed_dim=config.embed_dim,
        optimizer=OptimizerConfig(learning_rate=config.learning_rate),
        alpha_policy=config.alpha_policy,
        seed=config.seed,
    )
    stream = _clip_stream(train_videos, config.clip_length, config.seed + 777, arm.mask)
    return train(stream, train_cfg, stack=stack)


def evaluate_arm(
    arm: ArmSpec,
    config: AblationConfig,
    stack: EmbeddingStack,
    eval_videos: list[SyntheticVideo],
) -> dict:
    tracker_cfg = TrackerConfig(
        window=config.clip_length,
        birth_threshold=config.birth_threshold,
        alpha_policy=config.alpha_policy,
    )
    accs, idf1s, switches = [], [], []
    for video in eval_videos:
        frames = video.frames
        if not arm.mask:
            frames = [_strip_masks(f, video.roi) for f in frames]
        pred = Tracker(stack, tracker_cfg).run(frames)
        report = evaluate(pred, video.frames)
        accs.append(report.association_accuracy)
        idf1s.append(report.idf1)
        switches.append(report.id_switches)
    return {
        "arm": arm.name,
        "encoding": arm.encoding,
        "mask": arm.mask,
        "videos": len(eval_videos),
        "association_accuracy": accs,
        "idf1": idf1s,
        "id_switches": switches,
        "mean_association_accuracy": float(np.mean(accs)),
        "mean_idf1": float(np.mean(idf1s)),
        "id_switches_total": int(np.sum(switches)),
    }


def paired_p_greater(a, b) -> float:
    """One-sided paired t-test p-value for mean(a) > mean(b)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diffs = a - b
    if np.allclose(diffs.std(), 0.0):
        return 0.0 if diffs.mean() > 0 else 1.0
    return float(stats.ttest_rel(a, b, alternative="greater").pvalue)


def eval_seeds(config: AblationConfig) -> list[int]:
    return [config.seed + 100_000 + i for i in range(config.eval_videos)]


def train_seeds(config: AblationConfig) -> list[int]:
    return [config.seed + i for i in range(config.train_videos)]


def run_ablation(config: AblationConfig, out_dir) -> dict:
    """Run every arm under identical seeds and budgets; write artifacts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenario = config.scenario
    log.info("ablation: generating %d eval videos", config.eval_videos)
    eval_vids = [generate(replace(scenario, seed=s)) for s in eval_seeds(config)]
    train_vids = [generate(replace(scenario, seed=s)) for s in train_seeds(config)]

    results = []
    for arm in config.arms:
        log.info("ablation: training arm %s (%d iterations)", arm.name, config.iterations)
        stack, trace = train_arm(arm, config, train_vids)
        save_container(
            out / f"checkpoint_{arm.name}.dstc",
            {
                "kind": "checkpoint",
                "schema_version": 1,
                "stack": stack.state_header(),
                "iteration": len(trace),
                "alpha_policy": asdict(config.alpha_policy),
            },
            stack.state_arrays(),
        )
        log.info("ablation: evaluating arm %s on %d videos", arm.name, len(eval_vids))
        res = evaluate_arm(arm, config, stack, eval_vids)
        res["final_loss"] = trace[-1][3] if trace else None
        res["initial_loss"] = trace[0][3] if trace else None
        results.append(res)

    pvalues = {}
    for ra in results:
        for rb in results:
            if ra["arm"] != rb["arm"]:
                pvalues[f"{ra['arm']}>{rb['arm']}"] = paired_p_greater(
                    ra["association_accuracy"], rb["association_accuracy"]
                )

    csv_lines = [CSV_COLUMNS]
    for r in results:
        csv_lines.append(
            f"{r['arm']},{r['encoding']},{int(r['mask'])},{r['videos']},"
            f"{r['mean_association_accuracy']!r},{r['mean_idf1']!r},"
            f"{r['id_switches_total']},{config.iterations},{config.seed}"
        )
    (out / "ablation.csv").write_text("\n".join(csv_lines) + "\n")

    doc = {
        "format": "dst-ablation",
        "schema_version": 1,
        "config": config_to_dict(config),
        "results": results,
        "paired_p_greater": pvalues,
    }
    (out / "results.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    svg_bar_chart(
        [r["arm"] for r in results],
        [r["mean_association_accuracy"] for r in results],
        "mean association accuracy",
        out / "chart.svg",
    )
    return doc


# ---------------------------------------------------------------------------
# config (de)serialization


def config_to_dict(config: AblationConfig) -> dict:
    d = asdict(config)
    d["arms"] = [asdict(a) for a in config.arms]
    return d


def config_from_dict(d: dict) -> AblationConfig:
    d = dict(d)
    scenario = ScenarioConfig(**d.pop("scenario"))
    arms = tuple(ArmSpec(**a) for a in d.pop("arms"))
    alpha = d.pop("alpha_policy", None)
    policy = AlphaPolicy(**alpha) if alpha else AlphaPolicy("exp_decay", 0.9)
    return AblationConfig(scenario=scenario, arms=arms, alpha_policy=policy, **d)


# ---------------------------------------------------------------------------
# chart


def svg_bar_chart(labels, values, title, path, width=480, height=280) -> None:
    """Minimal deterministic SVG bar chart (values expected in [0, 1])."""
    n = len(labels)
    pad, base, top = 50, height - 40, 30
    span = base - top
    bar_w = (width - 2 * pad) / max(n, 1) * 0.6
    step = (width - 2 * pad) / max(n, 1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>',
        f'<line x1="{pad}" y1="{base}" x2="{width - pad}" y2="{base}" stroke="black"/>',
        f'<line x1="{pad}" y1="{base}" x2="{pad}" y2="{top}" stroke="black"/>',
    ]
    for frac in (0.0, 0.5, 1.0):
        y = base - span * frac
        parts.append(
            f'<text x="{pad - 6}" y="{y + 4:.1f}" text-anchor="end" font-size="10">{frac:.1f}</text>'
        )
        parts.append(
            f'<line x1="{pad - 3}" y1="{y:.1f}" x2="{pad}" y2="{y:.1f}" stroke="black"/>'
        )
    for i, (lab, val) in enumerate(zip(labels, values)):
        x = pad + i * step + (step - bar_w) / 2
        h = span * max(0.0, min(1.0, float(val)))
        parts.append(
            f'<rect x="{x:.1f}" y="{base - h:.1f}" width="{bar_w:.1f}" height="{h:.1f}" fill="#4878a8"/>'
        )
        parts.append(
            f'<text x="{x + bar_w / 2:.1f}" y="{base + 14}" text-anchor="middle" font-size="11">{lab}</text>'
        )
        parts.append(
            f'<text x="{x + bar_w / 2:.1f}" y="{base - h - 4:.1f}" text-anchor="middle" font-size="10">{float(val):.3f}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
