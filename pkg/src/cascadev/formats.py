"""Versioned JSON/CSV serialization for pipeline artifacts.

Every JSON document carries a `kind` tag and a `schema_version`;
readers accept any minor revision of the supported major version and
reject the rest. Dumps are canonical (sorted keys, fixed indentation,
shortest-roundtrip floats), so rerunning a command with the same config
and seeds reproduces files byte for byte. CSV numbers use repr for the
same reason.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict

import numpy as np

from .assignment import Assignment
from .cascade import Prediction, Proposal, StageRecord, StageTrace
from .errors import DataError, SchemaVersionError
from .evaluation import ApResult, CascadeStats, ThresholdResult
from .geometry import Deltas, OrientedBox, Point3
from .learner import BranchParams, HeadParams, LossReport, StageParams
from .synth import SceneConfig, SyntheticScene

SCHEMA_VERSION = "1.0"
RNG_FAMILY = "philox4x64"

STATS_CSV_COLUMNS = (
    "stage",
    "mu",
    "positives",
    "mean_centerness_before",
    "mean_centerness_after",
    "spearman_rho",
)


def canonical_dumps(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def config_hash(doc: dict) -> str:
    """sha256 over the compact canonical encoding of a config mapping."""
    payload = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _parse_version(text: str) -> tuple[int, int]:
    try:
        major, minor = text.split(".")
        return int(major), int(minor)
    except (AttributeError, ValueError) as exc:
        raise DataError(f"malformed schema_version {text!r}") from exc


def check_schema(doc: dict, kind: str) -> None:
    """Validate the version/kind envelope of a loaded document."""
    if not isinstance(doc, dict):
        raise DataError(f"expected a JSON object for a {kind} document")
    if "schema_version" not in doc:
        raise DataError(f"{kind} document lacks schema_version")
    major, _ = _parse_version(doc["schema_version"])
    supported, _ = _parse_version(SCHEMA_VERSION)
    if major != supported:
        raise SchemaVersionError(
            f"unsupported major schema version {doc['schema_version']!r}"
            f" (reader supports {SCHEMA_VERSION})"
        )
    if doc.get("kind") != kind:
        raise DataError(f"expected a {kind} document, got kind {doc.get('kind')!r}")


def _envelope(kind: str) -> dict:
    return {"kind": kind, "schema_version": SCHEMA_VERSION}


def write_json(path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_dumps(doc))


def read_json(path, kind: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON in {path}: {exc}") from exc
    check_schema(doc, kind)
    return doc


def _point_doc(p: Point3) -> list[float]:
    return [p.x, p.y, p.z]


def _box_doc(b: OrientedBox) -> dict:
    doc = {
        "center": _point_doc(b.center),
        "size": list(b.size),
        "yaw": b.yaw,
        "class_id": b.class_id,
    }
    if b.score is not None:
        doc["score"] = b.score
    return doc


def _box_from(doc: dict) -> OrientedBox:
    return OrientedBox(
        center=Point3(*doc["center"]),
        size=tuple(doc["size"]),
        yaw=doc["yaw"],
        class_id=doc["class_id"],
        score=doc.get("score"),
    )


def scene_config_doc(cfg: SceneConfig) -> dict:
    return asdict(cfg)


def scene_config_from_doc(doc: dict) -> SceneConfig:
    known = set(SceneConfig.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise DataError(f"unknown scene config keys: {sorted(unknown)}")
    kwargs = dict(doc)
    for key in ("num_gt", "size_range", "workspace"):
        if key in kwargs:
            v = kwargs[key]
            kwargs[key] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
    return SceneConfig(**kwargs)


def scene_to_doc(scene: SyntheticScene) -> dict:
    doc = _envelope("scene")
    doc.update(
        seed=scene.seed,
        rng=RNG_FAMILY,
        config=scene_config_doc(scene.config),
        gt_boxes=[_box_doc(b) for b in scene.gt_boxes],
        points=[_point_doc(p) for p in scene.points],
        features=scene.features.tolist(),
        point_gt_labels=list(scene.point_gt_labels),
    )
    return doc


def scene_from_doc(doc: dict) -> SyntheticScene:
    check_schema(doc, "scene")
    try:
        return SyntheticScene(
            gt_boxes=[_box_from(b) for b in doc["gt_boxes"]],
            points=[Point3(*p) for p in doc["points"]],
            features=np.asarray(doc["features"], dtype=np.float64),
            point_gt_labels=list(doc["point_gt_labels"]),
            seed=doc["seed"],
            config=scene_config_from_doc(doc["config"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed scene document: {exc}") from exc


def _deltas_doc(d: Deltas) -> list[float]:
    return [float(v) for v in d.as_array()]


def _assignment_doc(a: Assignment) -> dict:
    return {
        "mu": a.mu,
        "matched_gt": list(a.matched_gt),
        "target_deltas": [
            None if d is None else _deltas_doc(d) for d in a.target_deltas
        ],
        "target_centerness": list(a.target_centerness),
        "target_class": list(a.target_class),
        "is_denoising": list(a.is_denoising),
    }


def _assignment_from(doc: dict) -> Assignment:
    return Assignment(
        mu=doc["mu"],
        matched_gt=list(doc["matched_gt"]),
        target_deltas=[
            None if d is None else Deltas.from_array(d) for d in doc["target_deltas"]
        ],
        target_centerness=list(doc["target_centerness"]),
        target_class=list(doc["target_class"]),
        is_denoising=list(doc["is_denoising"]),
    )


def detection_doc(d) -> dict:
    return {
        "box": _box_doc(d.box),
        "score": d.score,
        "class_id": d.class_id,
        "stage": d.stage,
    }


def detection_from_doc(doc: dict):
    from .overlap import Detection

    return Detection(
        box=_box_from(doc["box"]),
        score=doc["score"],
        class_id=doc["class_id"],
        stage=doc["stage"],
    )


def trace_to_doc(trace: StageTrace, scene_seed: int | None = None) -> dict:
    doc = _envelope("trace")
    if scene_seed is not None:
        doc["scene_seed"] = scene_seed
    doc["gts"] = None if trace.gts is None else [_box_doc(b) for b in trace.gts]
    doc["stages"] = [
        {
            "stage": rec.stage,
            "mu": rec.mu,
            "proposals_in": [
                {
                    "point": _point_doc(p.point),
                    "feature": np.asarray(p.feature, dtype=np.float64).tolist(),
                    "origin_index": p.origin_index,
                    "is_denoising": p.is_denoising,
                    "denoising_gt": p.denoising_gt,
                }
                for p in rec.proposals_in
            ],
            "predictions": [
                {
                    "class_probs": np.asarray(pr.class_probs, dtype=np.float64).tolist(),
                    "deltas": _deltas_doc(pr.deltas),
                    "heading": pr.heading,
                    "centerness": pr.centerness,
                }
                for pr in rec.predictions
            ],
            "updated_points": [_point_doc(p) for p in rec.updated_points],
            "assignment": None if rec.assignment is None else _assignment_doc(rec.assignment),
            "detections": [detection_doc(d) for d in rec.detections],
        }
        for rec in trace.stages
    ]
    return doc


def trace_from_doc(doc: dict) -> StageTrace:
    check_schema(doc, "trace")
    try:
        stages = []
        for rec in doc["stages"]:
            stages.append(
                StageRecord(
                    stage=rec["stage"],
                    mu=rec["mu"],
                    proposals_in=[
                        Proposal(
                            point=Point3(*p["point"]),
                            feature=np.asarray(p["feature"], dtype=np.float64),
                            origin_index=p["origin_index"],
                            is_denoising=p["is_denoising"],
                            denoising_gt=p["denoising_gt"],
                        )
                        for p in rec["proposals_in"]
                    ],
                    predictions=[
                        Prediction(
                            class_probs=np.asarray(pr["class_probs"], dtype=np.float64),
                            deltas=Deltas.from_array(pr["deltas"]),
                            heading=pr["heading"],
                            centerness=pr["centerness"],
                        )
                        for pr in rec["predictions"]
                    ],
                    updated_points=[Point3(*p) for p in rec["updated_points"]],
                    assignment=(
                        None if rec["assignment"] is None else _assignment_from(rec["assignment"])
                    ),
                    detections=[detection_from_doc(d) for d in rec["detections"]],
                )
            )
        gts = doc["gts"]
        return StageTrace(
            stages=stages, gts=None if gts is None else [_box_from(b) for b in gts]
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed trace document: {exc}") from exc


def _branch_doc(bp: BranchParams) -> dict:
    return {
        "w1": bp.w1.tolist(),
        "b1": bp.b1.tolist(),
        "w2": bp.w2.tolist(),
        "b2": bp.b2.tolist(),
    }


def _branch_from(doc: dict) -> BranchParams:
    return BranchParams(
        w1=np.asarray(doc["w1"], dtype=np.float64),
        b1=np.asarray(doc["b1"], dtype=np.float64),
        w2=np.asarray(doc["w2"], dtype=np.float64),
        b2=np.asarray(doc["b2"], dtype=np.float64),
    )


def model_to_doc(params: HeadParams) -> dict:
    doc = _envelope("model")
    doc.update(
        feature_dim=params.feature_dim,
        num_classes=params.num_classes,
        hidden=params.hidden,
        num_stages=params.num_stages,
        stages=[
            {name: _branch_doc(bp) for name, bp in sp.branches().items()}
            for sp in params.stages
        ],
    )
    return doc


def model_from_doc(doc: dict) -> HeadParams:
    check_schema(doc, "model")
    try:
        stages = [
            StageParams(
                cls=_branch_from(sp["cls"]),
                reg=_branch_from(sp["reg"]),
                cent=_branch_from(sp["cent"]),
            )
            for sp in doc["stages"]
        ]
        params = HeadParams(
            stages=stages,
            feature_dim=doc["feature_dim"],
            num_classes=doc["num_classes"],
            hidden=doc["hidden"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed model document: {exc}") from exc
    if doc["num_stages"] != params.num_stages:
        raise DataError(
            f"model declares {doc['num_stages']} stages but carries {params.num_stages}"
        )
    return params


def ap_to_doc(result: ApResult) -> dict:
    doc = _envelope("ap")
    doc["results"] = [
        {
            "iou_threshold": r.iou_threshold,
            "mean_ap": r.mean_ap,
            "ap_per_class": {str(c): ap for c, ap in sorted(r.ap_per_class.items())},
            "pr_curves": {
                str(c): {"recalls": list(rec), "precisions": list(prec)}
                for c, (rec, prec) in sorted(r.pr_curves.items())
            },
        }
        for r in result.results
    ]
    return doc


def ap_from_doc(doc: dict) -> ApResult:
    check_schema(doc, "ap")
    try:
        results = [
            ThresholdResult(
                iou_threshold=r["iou_threshold"],
                ap_per_class={int(c): ap for c, ap in r["ap_per_class"].items()},
                mean_ap=r["mean_ap"],
                pr_curves={
                    int(c): (list(v["recalls"]), list(v["precisions"]))
                    for c, v in r["pr_curves"].items()
                },
            )
            for r in doc["results"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed ap document: {exc}") from exc
    return ApResult(results=results)


def _csv_num(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def stats_csv(stats: CascadeStats) -> str:
    """One row per stage with the pinned column set."""
    lines = [",".join(STATS_CSV_COLUMNS)]
    for s in stats.stages:
        lines.append(
            ",".join(
                _csv_num(v)
                for v in (
                    s.stage,
                    s.mu,
                    s.positives,
                    s.mean_centerness_before,
                    s.mean_centerness_after,
                    s.spearman_rho,
                )
            )
        )
    return "\n".join(lines) + "\n"


def loss_csv(history: list[LossReport], num_stages: int) -> str:
    """One row per step; per stage a (cls, reg, cent, total, positives) group."""
    by_step: dict[int, dict[int, LossReport]] = {}
    for rep in history:
        by_step.setdefault(rep.step, {})[rep.stage] = rep
    header = ["step"]
    for l in range(1, num_stages + 1):
        header.extend(
            f"{name}_s{l}" for name in ("cls", "reg", "cent", "total", "positives")
        )
    lines = [",".join(header)]
    for step in sorted(by_step):
        row = [str(step)]
        for l in range(1, num_stages + 1):
            rep = by_step[step].get(l)
            if rep is None:
                raise DataError(f"loss history missing stage {l} at step {step}")
            row.extend(
                _csv_num(v)
                for v in (
                    rep.classification_loss,
                    rep.regression_loss,
                    rep.centerness_loss,
                    rep.total,
                    rep.positive_count,
                )
            )
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
