"""Command-line interface: generate scenes, fit them, evaluate and report.

Every command writes a ``manifest.json`` into its output directory after all
other outputs. The manifest holds the effective configuration, so
``canonpose rerun <manifest>`` repeats the command without the original config
file and reproduces the numeric outputs byte for byte.

Exit codes: 0 success, 2 config error, 3 input error, 4 partial batch
failure, 5 fitter divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .body_model import ModelError, default_model_path, keypoints_of, load_model
from .fitting import DivergenceError, FitConfig, FitError, run_pipeline, screen_best_view
from .metrics import AUC_THRESHOLDS_MM, PCK_THRESHOLD_MM, MetricError, evaluate
from .observations import CameraView, ObservationError, filter_confidence
from .synth import (
    VARIANTS,
    SceneConfig,
    SceneError,
    atomic_write_text,
    generate_scene,
    read_scene,
    select_variant,
    subset_scene,
    survivor_counts,
    write_scene,
)

log = logging.getLogger("canonpose")

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_PARTIAL = 4
EXIT_DIVERGENCE = 5

METRIC_COLUMNS = ("mpjpe", "pa_mpjpe", "pck", "auc", "pa_pck", "pa_auc")
CSV_COLUMNS = ("scene_id", "seed") + METRIC_COLUMNS + ("config_hash",)
LOWER_IS_BETTER = {"mpjpe", "pa_mpjpe"}
CONFIG_SECTIONS = ("scene", "fit", "eval")


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration


def default_eval_config() -> dict:
    return {
        "root_relative": True,
        "pck_threshold_mm": PCK_THRESHOLD_MM,
        "auc_thresholds_mm": list(AUC_THRESHOLDS_MM),
        "with_scale": True,
    }


def load_config(path) -> dict:
    """Read a YAML (or JSON) config file with optional ``scene``/``fit``/``eval`` sections."""
    if path is None:
        return {}
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML/JSON: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    unknown = set(data) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}; expected {list(CONFIG_SECTIONS)}")
    for name, section in data.items():
        if section is not None and not isinstance(section, dict):
            raise ConfigError(f"config section '{name}' must be a mapping")
    return {k: dict(v or {}) for k, v in data.items()}


def scene_config(raw: dict, seed: int | None) -> SceneConfig:
    try:
        cfg = SceneConfig.from_dict(raw.get("scene", {}))
        return replace(cfg, seed=seed) if seed is not None else cfg
    except (SceneError, TypeError, ValueError) as exc:
        raise ConfigError(f"scene config: {exc}") from exc


def fit_config(raw: dict, overrides: dict) -> FitConfig:
    try:
        return FitConfig.from_dict({**raw.get("fit", {}), **overrides})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"fit config: {exc}") from exc


def eval_config(raw: dict) -> dict:
    cfg = default_eval_config()
    section = raw.get("eval", {})
    unknown = set(section) - set(cfg)
    if unknown:
        raise ConfigError(f"unknown eval config keys: {sorted(unknown)}")
    cfg.update(section)
    thresholds = cfg["auc_thresholds_mm"]
    if not thresholds or any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ConfigError("eval.auc_thresholds_mm must be a non-empty ascending list")
    return cfg


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# output helpers


def dump_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def write_json(path, obj) -> None:
    atomic_write_text(path, dump_json(obj))


def write_manifest(out_dir: Path, manifest: dict) -> Path:
    path = out_dir / MANIFEST_NAME
    write_json(path, manifest)
    return path


def _manifest(command, config, args_record, seeds, inputs, outputs, started, **extra) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "manifest",
        "command": command,
        "tool_version": __version__,
        "config": config,
        "config_hash": config_hash(config),
        "args": args_record,
        "seeds": seeds,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "duration_s": round(time.perf_counter() - started, 3),
        **extra,
    }


def _ensure_out(out) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _without_manifests(paths) -> list:
    """Drop manifest files a shell glob over an output directory picks up."""
    kept = [p for p in paths if Path(p).name != MANIFEST_NAME]
    if len(kept) != len(paths):
        print(f"ignoring {len(paths) - len(kept)} manifest file(s) among the inputs", file=sys.stderr)
    return kept


def _model(path):
    try:
        return load_model(path)
    except ModelError as exc:
        raise InputError(str(exc)) from exc


# --------------------------------------------------------------------------
# gen


def cmd_gen(config: dict, out, count: int, variant: str | None = None, model_path=None, args_record=None) -> dict:
    """Write ``count`` scenes with seeds ``seed .. seed + count - 1``.

    With ``variant`` each scene keeps only the views that ablation variant
    selects (by surviving keypoints at ``fit.threshold``).
    """
    started = time.perf_counter()
    if count < 0:
        raise ConfigError("count must be non-negative")
    if variant is not None and variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    out = _ensure_out(out)
    model_path = Path(model_path or default_model_path())
    model = _model(model_path)
    base = SceneConfig.from_dict(config["scene"])
    threshold = config["fit"]["threshold"]
    seeds = [base.seed + n for n in range(count)]
    outputs = []
    for seed in seeds:
        scene = generate_scene(model, replace(base, seed=seed))
        if variant is not None:
            views = select_variant(survivor_counts(scene, threshold), variant)
            scene = subset_scene(model, scene, views, suffix=f"_{variant}")
        path = out / f"{scene.scene_id}.json"
        write_scene(scene, path)
        outputs.append(path)
    notice = None
    if count == 0:
        notice = "count is 0: no scenes generated, manifest only"
        print(notice, file=sys.stderr)
    manifest = _manifest(
        "gen",
        config,
        args_record or {"count": count, "variant": variant},
        seeds,
        [model_path],
        outputs,
        started,
        model_sha256=file_digest(model_path),
        notice=notice,
    )
    write_manifest(out, manifest)
    return manifest


# --------------------------------------------------------------------------
# fit


_WORKER_MODELS: dict = {}


def _worker_model(path: str):
    if path not in _WORKER_MODELS:
        _WORKER_MODELS[path] = load_model(path)
    return _WORKER_MODELS[path]


def fit_result_document(model, scene, result, mode: str, chash: str) -> dict:
    """Serializable result of one scene.

    Stage-one camera-frame keypoints are included per view so that evaluation
    needs no body model.
    """
    stage1 = result.stage1.to_dict()
    stage1["keypoints_camera"] = [
        (keypoints_of(model, v.params) + np.asarray(v.translation)).tolist() for v in result.stage1.views
    ]
    doc = {
        "schema_version": SCHEMA_VERSION,
        "kind": "fit_result",
        "manifest": MANIFEST_NAME,
        "config_hash": chash,
        "scene_id": scene.scene_id,
        "seed": scene.seed,
        "mode": mode,
        "units": {"length": "m", "loss": "px^2", "angles": "rad (axis-angle)"},
        "screened_view": result.screened_view,
        "stage1": stage1,
    }
    if result.stage2 is not None:
        s2 = result.stage2
        doc["canonical_init"] = result.canonical_init.to_dict()
        doc["canonical"] = s2.canonical.to_dict()
        doc["stage2_source"] = result.stage2_source
        doc["reference_view"] = s2.reference_view
        doc["keypoints_body"] = s2.keypoints_body.tolist()
        doc["keypoints_camera"] = s2.keypoints_camera.tolist()
        doc["inert_views"] = list(s2.inert_views)
        doc["loss_2d"] = s2.loss_2d
        doc["anchor_loss"] = s2.anchor_loss
        doc["total_loss"] = s2.total_loss
        doc["first_round"] = list(s2.first_round) if s2.first_round else None
        doc["stage2_rounds"] = [d.to_dict() for d in s2.rounds]
    return doc


def _fit_one(scene_path: str, model_path: str, cfg_dict: dict, mode: str, out_dir: str, chash: str) -> dict:
    """Fit one scene file; never raises, reports the outcome instead."""
    try:
        scene = read_scene(scene_path)
    except SceneError as exc:
        return {"input": scene_path, "status": "input_error", "error": str(exc)}
    try:
        model = _worker_model(model_path)
        cfg = FitConfig.from_dict(cfg_dict)
        result = run_pipeline(model, scene.intrinsics, scene.detections, cfg, mode=mode)
        if mode == "stage1":
            dets = [filter_confidence(d, cfg.threshold) for d in scene.detections]
            cams = [CameraView(k, np.zeros(3)) for k in scene.intrinsics]
            try:
                result.screened_view = screen_best_view(model, result.stage1, cams, dets)[0]
            except FitError:
                result.screened_view = None
        doc = fit_result_document(model, scene, result, mode, chash)
    except DivergenceError as exc:
        return {"input": scene_path, "scene_id": scene.scene_id, "status": "divergence", "error": str(exc)}
    except (FitError, ObservationError, ValueError) as exc:
        return {"input": scene_path, "scene_id": scene.scene_id, "status": "fit_error", "error": str(exc)}
    path = Path(out_dir) / f"{scene.scene_id}.result.json"
    write_json(path, doc)
    return {"input": scene_path, "scene_id": scene.scene_id, "status": "ok", "output": str(path)}


def cmd_fit(config: dict, scenes, out, mode: str = "full", jobs: int = 1, model_path=None, args_record=None) -> tuple[dict, int]:
    """Fit every scene file; failures are recorded and the batch continues."""
    started = time.perf_counter()
    if mode not in ("stage1", "full"):
        raise ConfigError(f"mode must be 'stage1' or 'full', got {mode!r}")
    if jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    scenes = _without_manifests(scenes)
    if not scenes:
        raise InputError("fit needs at least one scene file")
    out = _ensure_out(out)
    model_path = Path(model_path or default_model_path())
    _model(model_path)
    chash = config_hash(config)
    cfg_dict = config["fit"]
    work = [(str(p), str(model_path), cfg_dict, mode, str(out), chash) for p in scenes]
    if jobs == 1:
        outcomes = [_fit_one(*w) for w in work]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_fit_one, *zip(*work)))
    failures = [o for o in outcomes if o["status"] != "ok"]
    for f in failures:
        print(f"fit failed for {f['input']}: {f['status']}: {f['error']}", file=sys.stderr)
    manifest = _manifest(
        "fit",
        config,
        args_record or {"mode": mode, "jobs": jobs},
        [],
        [model_path, *scenes],
        [o["output"] for o in outcomes if o["status"] == "ok"],
        started,
        model_sha256=file_digest(model_path),
        mode=mode,
        failures=failures,
    )
    write_manifest(out, manifest)
    return manifest, _fit_exit_code(outcomes)


def _fit_exit_code(outcomes) -> int:
    statuses = [o["status"] for o in outcomes]
    if all(s == "ok" for s in statuses):
        return EXIT_OK
    if any(s == "ok" for s in statuses):
        return EXIT_PARTIAL
    if any(s == "divergence" for s in statuses):
        return EXIT_DIVERGENCE
    if all(s == "input_error" for s in statuses):
        return EXIT_INPUT
    return EXIT_PARTIAL


# --------------------------------------------------------------------------
# eval


def _read_json(path, kind: str) -> dict:
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise InputError(f"{kind} file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"malformed {kind} file {path}: {exc}") from exc
    if d.get("kind") != kind:
        raise InputError(f"{path} is not a {kind} document")
    if d.get("schema_version") != SCHEMA_VERSION:
        raise InputError(f"{path}: unsupported schema_version {d.get('schema_version')}")
    return d


def prediction_of(doc: dict) -> tuple[int, np.ndarray]:
    """``(view, (k, 3) camera-frame keypoints in meters)`` a result is scored on.

    Full mode: the stage-two reference view. Stage-one mode: the screened
    view's own stage-one fit.
    """
    if doc["mode"] == "full":
        view = doc["reference_view"]
        return view, np.asarray(doc["keypoints_camera"][view], dtype=float)
    view = doc["screened_view"]
    if view is None:
        raise InputError(f"result {doc['scene_id']} has no screened view to evaluate")
    return view, np.asarray(doc["stage1"]["keypoints_camera"][view], dtype=float)


def format_float(x: float) -> str:
    return repr(float(x))


def metrics_csv_text(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: format_float(v) if k in METRIC_COLUMNS else v for k, v in row.items()})
    return buf.getvalue()


def read_metrics_csv(path) -> list[dict]:
    try:
        text = Path(path).read_text()
    except FileNotFoundError as exc:
        raise InputError(f"metrics file not found: {path}") from exc
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise InputError(f"{path}: columns {reader.fieldnames} differ from {list(CSV_COLUMNS)}")
    rows = []
    for r in reader:
        row = dict(r)
        row["seed"] = int(row["seed"])
        for k in METRIC_COLUMNS:
            row[k] = float(row[k])
        rows.append(row)
    return rows


def cmd_eval(config: dict, results, scenes, out, args_record=None) -> dict:
    """Score each result against the ground-truth scene with the same id."""
    started = time.perf_counter()
    out = _ensure_out(out)
    ecfg = config["eval"]
    chash = config_hash(config)
    results, scenes = _without_manifests(results), _without_manifests(scenes)
    gt_by_id = {}
    for p in scenes:
        try:
            s = read_scene(p)
        except SceneError as exc:
            raise InputError(str(exc)) from exc
        gt_by_id[s.scene_id] = s
    rows, skipped = [], []
    for p in results:
        doc = _read_json(p, "fit_result")
        sid = doc["scene_id"]
        scene = gt_by_id.get(sid)
        if scene is None or scene.ground_truth is None:
            notice = f"no ground truth for scene {sid}; row skipped"
            print(notice, file=sys.stderr)
            skipped.append({"scene_id": sid, "reason": notice})
            continue
        view, pred = prediction_of(doc)
        gt = scene.ground_truth.keypoints_camera[view]
        try:
            err = evaluate(
                pred * 1000.0,
                gt * 1000.0,
                root_relative_eval=ecfg["root_relative"],
                pck_threshold_mm=ecfg["pck_threshold_mm"],
                auc_thresholds_mm=ecfg["auc_thresholds_mm"],
                with_scale=ecfg["with_scale"],
            )
        except MetricError as exc:
            raise InputError(f"result {sid}: {exc}") from exc
        rows.append({"scene_id": sid, "seed": doc["seed"], **err.row(), "config_hash": chash})
    rows.sort(key=lambda r: r["scene_id"])
    csv_path = out / "metrics.csv"
    atomic_write_text(csv_path, metrics_csv_text(rows))
    summary = {
        "schema_version": SCHEMA_VERSION,
        "kind": "eval_summary",
        "manifest": MANIFEST_NAME,
        "config_hash": chash,
        "units": {"mpjpe": "mm", "pa_mpjpe": "mm", "pck": "%", "auc": "%", "pa_pck": "%", "pa_auc": "%"},
        "n_rows": len(rows),
        "skipped": skipped,
        "mean": {k: float(np.mean([r[k] for r in rows])) if rows else None for k in METRIC_COLUMNS},
        "median": {k: float(np.median([r[k] for r in rows])) if rows else None for k in METRIC_COLUMNS},
    }
    summary_path = out / "summary.json"
    write_json(summary_path, summary)
    manifest = _manifest(
        "eval",
        config,
        args_record or {},
        sorted({r["seed"] for r in rows}),
        [*results, *scenes],
        [csv_path, summary_path],
        started,
    )
    write_manifest(out, manifest)
    return manifest


# --------------------------------------------------------------------------
# report


def report_table(means: dict[str, dict[str, float]]) -> tuple[list[dict], dict[str, str]]:
    """Rows of per-label means and, per column, the label holding the best value."""
    labels = list(means)
    best = {}
    for col in METRIC_COLUMNS:
        vals = np.array([means[lab][col] for lab in labels])
        idx = int(np.argmin(vals)) if col in LOWER_IS_BETTER else int(np.argmax(vals))
        best[col] = labels[idx]
    rows = [{"label": lab, **means[lab]} for lab in labels]
    return rows, best


def report_text(rows, best) -> str:
    header = ["label"] + [c + (" (mm)" if c in LOWER_IS_BETTER else " (%)") for c in METRIC_COLUMNS]
    body = []
    for r in rows:
        cells = [r["label"]]
        for c in METRIC_COLUMNS:
            cells.append(f"{r[c]:.2f}" + ("*" if best[c] == r["label"] else ""))
        body.append(cells)
    widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
    fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    lines = [fmt(header), fmt(["-" * w for w in widths])] + [fmt(b) for b in body]
    return "\n".join(lines) + "\n* best value per column\n"


def report_csv_text(rows, best) -> str:
    buf = io.StringIO()
    fields = ["label", *METRIC_COLUMNS, *(f"best_{c}" for c in METRIC_COLUMNS)]
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        rec = {"label": r["label"]}
        for c in METRIC_COLUMNS:
            rec[c] = format_float(r[c])
            rec[f"best_{c}"] = int(best[c] == r["label"])
        w.writerow(rec)
    return buf.getvalue()


def cmd_report(config: dict, metrics, labels, out, args_record=None) -> dict:
    """Compare metrics CSVs: one row per label, best value per column marked."""
    started = time.perf_counter()
    if not metrics:
        raise InputError("report needs at least one metrics CSV")
    labels = list(labels) if labels else [Path(p).parent.name or Path(p).stem for p in metrics]
    if len(labels) != len(metrics):
        raise ConfigError(f"{len(labels)} labels for {len(metrics)} metrics files")
    if len(set(labels)) != len(labels):
        raise ConfigError("report labels must be unique")
    out = _ensure_out(out)
    means = {}
    for lab, p in zip(labels, metrics):
        rows = read_metrics_csv(p)
        if not rows:
            raise InputError(f"{p} has no rows")
        means[lab] = {c: float(np.mean([r[c] for r in rows])) for c in METRIC_COLUMNS}
    rows, best = report_table(means)
    txt_path, csv_path = out / "report.txt", out / "report.csv"
    atomic_write_text(txt_path, report_text(rows, best))
    atomic_write_text(csv_path, report_csv_text(rows, best))
    manifest = _manifest(
        "report", config, args_record or {"labels": labels}, [], list(metrics), [txt_path, csv_path], started
    )
    write_manifest(out, manifest)
    return manifest


# --------------------------------------------------------------------------
# argument parsing


def _effective_config(args) -> tuple[dict, dict]:
    raw = load_config(args.config)
    overrides = {}
    if getattr(args, "lam", None) is not None:
        overrides["threshold"] = args.lam
    if getattr(args, "alpha", None) is not None:
        overrides["alpha"] = args.alpha
    if getattr(args, "gamma", None) is not None:
        overrides["gamma"] = args.gamma
    seed = getattr(args, "seed", None)
    config = {
        "scene": scene_config(raw, seed).to_dict(),
        "fit": fit_config(raw, overrides).to_dict(),
        "eval": eval_config(raw),
    }
    flags = dict(overrides)
    if seed is not None:
        flags["seed"] = seed
    return config, flags


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="canonpose", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, fit_flags=False):
        p.add_argument("--config", help="YAML/JSON config with scene/fit/eval sections")
        p.add_argument("--out", required=True, help="output directory")
        if fit_flags:
            p.add_argument("--model", help="body model JSON (default: shipped toy model)")
            p.add_argument("--seed", type=int, help="first scene seed")
            p.add_argument("--lambda", dest="lam", type=float, help="confidence threshold")
            p.add_argument("--alpha", type=float, help="reprojection weight")
            p.add_argument("--gamma", type=float, help="stage-two anchor weight")

    p = sub.add_parser("gen", help="generate synthetic scenes")
    common(p, fit_flags=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--variant", choices=VARIANTS, help="keep only the views of an ablation variant")

    p = sub.add_parser("fit", help="fit scene files")
    common(p, fit_flags=True)
    p.add_argument("scenes", nargs="+")
    p.add_argument("--mode", choices=("stage1", "full"), default="full")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("eval", help="score fit results against ground truth")
    common(p)
    p.add_argument("--results", nargs="+", required=True)
    p.add_argument("--scenes", nargs="+", required=True)

    p = sub.add_parser("report", help="compare metrics CSVs")
    common(p)
    p.add_argument("metrics", nargs="+")
    p.add_argument("--labels", nargs="+")

    p = sub.add_parser("rerun", help="repeat a command from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", help="output directory (default: the manifest's own)")
    return parser


def _dispatch(command: str, config: dict, record: dict, out):
    """Run ``command`` from an effective config and an argument record."""
    if command == "gen":
        cmd_gen(config, out, record["count"], record.get("variant"), record.get("model"), record)
        return EXIT_OK
    if command == "fit":
        _, code = cmd_fit(config, record["scenes"], out, record["mode"], record["jobs"], record.get("model"), record)
        return code
    if command == "eval":
        cmd_eval(config, record["results"], record["scenes"], out, record)
        return EXIT_OK
    if command == "report":
        cmd_report(config, record["metrics"], record.get("labels"), out, record)
        return EXIT_OK
    raise ConfigError(f"unknown command {command!r}")


def _record(args, flags: dict) -> dict:
    rec = {"overrides": flags}
    if args.command == "gen":
        rec.update(count=args.count, variant=args.variant, model=args.model)
    elif args.command == "fit":
        rec.update(scenes=list(args.scenes), mode=args.mode, jobs=args.jobs, model=args.model)
    elif args.command == "eval":
        rec.update(results=list(args.results), scenes=list(args.scenes))
    elif args.command == "report":
        rec.update(metrics=list(args.metrics), labels=args.labels)
    return rec


def rerun(manifest_path, out=None) -> int:
    manifest_path = Path(manifest_path)
    try:
        m = json.loads(manifest_path.read_text())
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if m.get("kind") != "manifest":
        raise InputError(f"{manifest_path} is not a manifest")
    if config_hash(m["config"]) != m["config_hash"]:
        raise ConfigError(f"{manifest_path}: config does not match its recorded hash")
    return _dispatch(m["command"], m["config"], m["args"], out or manifest_path.parent)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "rerun":
            return rerun(args.manifest, args.out)
        config, flags = _effective_config(args)
        return _dispatch(args.command, config, _record(args, flags), args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, SceneError, ModelError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
