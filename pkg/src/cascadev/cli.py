"""Command-line pipeline over the library: gen, run, eval, train.

Each subcommand reads an optional JSON config (unknown keys rejected),
applies flag overrides, and writes versioned artifacts into --out.
Commands are deterministic given config and seeds, so rerunning one
reproduces its files byte for byte. Scene generation and cascade runs
fan out over a thread pool capped by CASCADEV_THREADS; outputs are
merged in scene-index order so parallelism never reaches the files.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

from .assignment import CpaSchedule
from .cascade import ensemble_stages, run_cascade
from .errors import ConfigError, DataError, NumericalError
from .evaluation import (
    AP_MODES,
    IOU_VARIANTS,
    cascade_stats,
    evaluate_scenes,
)
from .formats import (
    RNG_FAMILY,
    SCHEMA_VERSION,
    config_hash,
    detection_doc,
    loss_csv,
    model_from_doc,
    model_to_doc,
    read_json,
    scene_config_doc,
    scene_config_from_doc,
    scene_from_doc,
    scene_to_doc,
    stats_csv,
    trace_from_doc,
    trace_to_doc,
    write_json,
)
from .learner import (
    LossWeights,
    head_predictors,
    train_cascade,
    uniform_seed_scores,
)
from .synth import (
    OracleNoise,
    SceneConfig,
    SyntheticScene,
    gen_scene,
    oracle_predictor,
    oracle_seed_centerness,
    scene_proposals,
)
from .voting import WEIGHTINGS

PREDICTORS = ("oracle", "head")


def _checked_kwargs(cls, doc: dict, what: str) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    return dict(doc)


def _build(cls, doc: dict, what: str):
    try:
        return cls(**_checked_kwargs(cls, doc, what))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what}: {exc}") from exc


@dataclass
class RunConfig:
    """Resolved parameters for one CLI invocation."""

    num_scenes: int = 100
    b: int = 64
    seed: int = 0
    predictor: str = "oracle"
    model: str | None = None
    scene: SceneConfig = field(default_factory=SceneConfig)
    schedule: CpaSchedule = field(default_factory=CpaSchedule)
    noise: OracleNoise = field(default_factory=OracleNoise)
    iou_thresholds: tuple[float, ...] = (0.25, 0.5)
    weighting: str = "exp_neg_dist"
    iou: str = "rotated"
    ap: str = "continuous"
    ensemble: tuple[int, int] | None = None
    nms_iou: float = 0.25
    steps: int = 2500
    lr: float = 1e-2
    hidden: int = 32
    denoising_k: int = 4
    batch_scenes: int = 1
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self) -> None:
        if self.num_scenes < 1:
            raise ConfigError(f"need num_scenes >= 1, got {self.num_scenes}")
        if self.b < 1:
            raise ConfigError(f"need b >= 1, got {self.b}")
        if not (0 <= self.seed < 2**64):
            raise ConfigError(f"seed must be a u64, got {self.seed}")
        if self.predictor not in PREDICTORS:
            raise ConfigError(f"unknown predictor {self.predictor!r}, expected {PREDICTORS}")
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"unknown weighting {self.weighting!r}, expected {WEIGHTINGS}")
        if self.iou not in IOU_VARIANTS:
            raise ConfigError(f"unknown iou variant {self.iou!r}, expected {IOU_VARIANTS}")
        if self.ap not in AP_MODES:
            raise ConfigError(f"unknown ap mode {self.ap!r}, expected {AP_MODES}")
        if not self.iou_thresholds:
            raise ConfigError("need at least one IoU threshold")
        for t in self.iou_thresholds:
            if not (0.0 < t < 1.0):
                raise ConfigError(f"IoU threshold outside (0, 1): {t}")
        if not (0.0 < self.nms_iou < 1.0):
            raise ConfigError(f"nms_iou outside (0, 1): {self.nms_iou}")
        if self.ensemble is None:
            self.ensemble = (1, self.schedule.num_stages)
        i, j = self.ensemble
        if not (1 <= i <= j <= self.schedule.num_stages):
            raise ConfigError(
                f"ensemble range {self.ensemble} invalid for {self.schedule.num_stages} stages"
            )
        if self.steps < 1 or self.lr <= 0.0:
            raise ConfigError(f"need steps >= 1 and lr > 0, got {self.steps}, {self.lr}")
        if self.hidden < 1 or self.denoising_k < 1 or self.batch_scenes < 1:
            raise ConfigError("hidden, denoising_k, and batch_scenes must be >= 1")

    def resolved_doc(self) -> dict:
        """The full effective config as plain JSON-ready data."""
        doc = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "scene":
                v = scene_config_doc(v)
            elif f.name in ("schedule", "noise", "loss_weights"):
                v = {g.name: getattr(v, g.name) for g in fields(v)}
            elif isinstance(v, tuple):
                v = list(v)
            doc[f.name] = v
        return doc


def run_config_from_doc(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    kwargs = _checked_kwargs(RunConfig, doc, "run config")
    if "scene" in kwargs:
        try:
            kwargs["scene"] = scene_config_from_doc(kwargs["scene"])
        except DataError as exc:
            raise ConfigError(str(exc)) from exc
    if "schedule" in kwargs:
        kwargs["schedule"] = _build(CpaSchedule, kwargs["schedule"], "schedule config")
    if "noise" in kwargs:
        kwargs["noise"] = _build(OracleNoise, kwargs["noise"], "noise config")
    if "loss_weights" in kwargs:
        kwargs["loss_weights"] = _build(LossWeights, kwargs["loss_weights"], "loss weight config")
    for key in ("iou_thresholds", "ensemble"):
        if kwargs.get(key) is not None:
            kwargs[key] = tuple(kwargs[key])
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"invalid run config: {exc}") from exc


def _max_workers() -> int:
    raw = os.environ.get("CASCADEV_THREADS")
    if raw is None:
        return min(4, os.cpu_count() or 1)
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CASCADEV_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"CASCADEV_THREADS must be >= 1, got {n}")
    return n


def _load_scenes(dirpath: str) -> list[tuple[str, SyntheticScene]]:
    if not os.path.isdir(dirpath):
        raise DataError(f"scene directory {dirpath!r} does not exist")
    names = sorted(
        n for n in os.listdir(dirpath) if n.startswith("scene_") and n.endswith(".json")
    )
    if not names:
        raise DataError(f"no scene_*.json files in {dirpath!r}")
    return [
        (n, scene_from_doc(read_json(os.path.join(dirpath, n), "scene"))) for n in names
    ]


def _load_traces(dirpath: str):
    if not os.path.isdir(dirpath):
        raise DataError(f"trace directory {dirpath!r} does not exist")
    names = sorted(
        n for n in os.listdir(dirpath) if n.startswith("trace_") and n.endswith(".json")
    )
    if not names:
        raise DataError(f"no trace_*.json files in {dirpath!r}")
    return [trace_from_doc(read_json(os.path.join(dirpath, n), "trace")) for n in names]


def cmd_gen(cfg: RunConfig, out: str) -> None:
    os.makedirs(out, exist_ok=True)
    seeds = [cfg.seed + i for i in range(cfg.num_scenes)]
    with ThreadPoolExecutor(max_workers=_max_workers()) as pool:
        scenes = list(pool.map(lambda s: gen_scene(cfg.scene, s), seeds))
    entries = []
    for i, scene in enumerate(scenes):
        name = f"scene_{i:04d}.json"
        write_json(os.path.join(out, name), scene_to_doc(scene))
        entries.append(
            {
                "file": name,
                "seed": scene.seed,
                "num_gt": len(scene.gt_boxes),
                "num_points": scene.num_points,
            }
        )
    resolved = cfg.resolved_doc()
    manifest = {
        "kind": "manifest",
        "schema_version": SCHEMA_VERSION,
        "command": "gen",
        "rng": RNG_FAMILY,
        "config": resolved,
        "config_hash": config_hash(resolved),
        "scenes": entries,
    }
    write_json(os.path.join(out, "manifest.json"), manifest)
    print(f"wrote {len(entries)} scenes and manifest.json to {out}")


def cmd_run(cfg: RunConfig, scenes_dir: str, out: str) -> None:
    scenes = _load_scenes(scenes_dir)
    params = None
    if cfg.predictor == "head":
        if cfg.model is None:
            raise ConfigError("predictor 'head' requires a model path in the config")
        params = model_from_doc(read_json(cfg.model, "model"))
        feature_dim = scenes[0][1].features.shape[1]
        if params.feature_dim != feature_dim:
            raise DataError(
                f"model expects feature_dim {params.feature_dim}, scenes have {feature_dim}"
            )
        if params.num_stages != cfg.schedule.num_stages:
            raise DataError(
                f"model has {params.num_stages} stages, schedule expects "
                f"{cfg.schedule.num_stages}"
            )

    def one(scene: SyntheticScene):
        if cfg.predictor == "oracle":
            scores = oracle_seed_centerness(scene, cfg.noise, seed=scene.seed)
            predictor = oracle_predictor(scene, cfg.noise, seed=scene.seed)
        else:
            scores = uniform_seed_scores(scene)
            predictor = head_predictors(params)
        props = scene_proposals(scene, scores, cfg.b)
        return run_cascade(
            props, predictor, cfg.schedule, gts=scene.gt_boxes, weighting=cfg.weighting
        )

    with ThreadPoolExecutor(max_workers=_max_workers()) as pool:
        traces = list(pool.map(lambda pair: one(pair[1]), scenes))
    os.makedirs(out, exist_ok=True)
    det_entries = []
    for i, ((_, scene), trace) in enumerate(zip(scenes, traces)):
        name = f"trace_{i:04d}.json"
        write_json(os.path.join(out, name), trace_to_doc(trace, scene_seed=scene.seed))
        dets = ensemble_stages(trace, cfg.ensemble, cfg.nms_iou)
        det_entries.append(
            {
                "trace": name,
                "scene_seed": scene.seed,
                "detections": [detection_doc(d) for d in dets],
            }
        )
    write_json(
        os.path.join(out, "detections.json"),
        {
            "kind": "detections",
            "schema_version": SCHEMA_VERSION,
            "ensemble": list(cfg.ensemble),
            "nms_iou": cfg.nms_iou,
            "scenes": det_entries,
        },
    )
    print(f"wrote {len(traces)} traces and detections.json to {out}")


def cmd_eval(cfg: RunConfig, traces_dir: str, out: str) -> None:
    traces = _load_traces(traces_dir)
    for t in traces:
        if t.gts is None:
            raise DataError("evaluation needs traces recorded with ground truth")
    scene_results = [
        (ensemble_stages(t, cfg.ensemble, cfg.nms_iou), t.gts) for t in traces
    ]
    ap = evaluate_scenes(
        scene_results, list(cfg.iou_thresholds), iou=cfg.iou, ap=cfg.ap
    )
    stats = cascade_stats(traces)
    os.makedirs(out, exist_ok=True)
    from .formats import ap_to_doc

    write_json(os.path.join(out, "ap.json"), ap_to_doc(ap))
    with open(os.path.join(out, "stats.csv"), "w", encoding="utf-8") as fh:
        fh.write(stats_csv(stats))
    for r in ap.results:
        print(f"mAP@{r.iou_threshold:g} = {r.mean_ap:.4f}")
    print(f"wrote ap.json and stats.csv to {out}")


def cmd_train(cfg: RunConfig, scenes_dir: str, out: str) -> None:
    scenes = [scene for _, scene in _load_scenes(scenes_dir)]
    params, history = train_cascade(
        scenes,
        cfg.schedule,
        cfg.steps,
        cfg.lr,
        cfg.seed,
        b=cfg.b,
        hidden=cfg.hidden,
        denoising_k=cfg.denoising_k,
        batch_scenes=cfg.batch_scenes,
        weights=cfg.loss_weights,
        weighting=cfg.weighting,
    )
    os.makedirs(out, exist_ok=True)
    write_json(os.path.join(out, "model.json"), model_to_doc(params))
    with open(os.path.join(out, "loss.csv"), "w", encoding="utf-8") as fh:
        fh.write(loss_csv(history, cfg.schedule.num_stages))
    last = [r for r in history if r.step == cfg.steps - 1]
    total = sum(r.total for r in last)
    print(f"trained {cfg.steps} steps; final summed stage loss {total:.4f}")
    print(f"wrote model.json and loss.csv to {out}")


def _add_common_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", help="JSON run config file")
    sp.add_argument("--seed", type=int, help="base seed (u64)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--stages", type=int, help="number of cascade stages")
    sp.add_argument("--mu-max", type=float, dest="mu_max", help="first-stage assignment scale")
    sp.add_argument("--mu-min", type=float, dest="mu_min", help="last-stage assignment scale")
    sp.add_argument("--weighting", choices=list(WEIGHTINGS), help="voting weight variant")
    sp.add_argument("--iou", choices=list(IOU_VARIANTS), help="IoU matcher variant")
    sp.add_argument("--ap", choices=list(AP_MODES), help="AP interpolation mode")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cascadev",
        description="Synthetic cascade point-voting detection pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    gen = sub.add_parser("gen", help="generate seeded scenes plus a manifest")
    run = sub.add_parser("run", help="run the cascade over generated scenes")
    run.add_argument("scenes", help="directory holding scene_*.json")
    ev = sub.add_parser("eval", help="evaluate trace files")
    ev.add_argument("traces", help="directory holding trace_*.json")
    train = sub.add_parser("train", help="train the cascade head on scenes")
    train.add_argument("scenes", help="directory holding scene_*.json")
    for sp in (gen, run, ev, train):
        _add_common_flags(sp)
    return parser


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    doc: dict = {}
    if args.config is not None:
        try:
            with open(args.config, encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config!r}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in config {args.config!r}: {exc}") from exc
    cfg = run_config_from_doc(doc)
    if args.seed is not None:
        cfg.seed = args.seed
    sched = cfg.schedule
    if args.stages is not None or args.mu_max is not None or args.mu_min is not None:
        try:
            cfg.schedule = CpaSchedule(
                mu_max=args.mu_max if args.mu_max is not None else sched.mu_max,
                mu_min=args.mu_min if args.mu_min is not None else sched.mu_min,
                num_stages=args.stages if args.stages is not None else sched.num_stages,
            )
        except ValueError as exc:
            raise ConfigError(f"invalid schedule: {exc}") from exc
        if "ensemble" not in (doc or {}):
            cfg.ensemble = (1, cfg.schedule.num_stages)
    if args.weighting is not None:
        cfg.weighting = args.weighting
    if args.iou is not None:
        cfg.iou = args.iou
    if args.ap is not None:
        cfg.ap = args.ap
    return RunConfig(**{f.name: getattr(cfg, f.name) for f in fields(RunConfig)})


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.command == "gen":
            cmd_gen(cfg, args.out)
        elif args.command == "run":
            cmd_run(cfg, args.scenes, args.out)
        elif args.command == "eval":
            cmd_eval(cfg, args.traces, args.out)
        else:
            cmd_train(cfg, args.scenes, args.out)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
