"""``handfit`` command line: synth, track, assess, eval, calibrate-uncertainty.

Exit codes: 0 success, 1 pipeline failure, 2 usage or configuration error.
A JSON config file (``--config``) holds one section per module; command line
flags override it.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from .energy import EnergyWeights
from .hand_model import ModelError, PoseParams, keypoints, load_model, pose_hand
from .matching import MatchConfig
from .metrics import angle_trace, filter_by_uncertainty, mepe, pck, variance_report
from .optimizer import OptimizerConfig, track
from .raster import Camera
from .synth import SceneError, SceneSpec, generate, load_sequence
from .uncertainty import (UncertaintyConfig, UncertaintyReport, assess, reports_from_json,
                          reports_to_json, write_ply)

log = logging.getLogger("handfit")

SECTIONS = ("model", "camera", "matching", "energy", "optimizer", "uncertainty", "synth")


class UsageError(Exception):
    """Bad arguments, config or input files (exit code 2)."""


class PipelineError(Exception):
    """The pipeline ran but could not produce a result (exit code 1)."""


# ---------------------------------------------------------------------------
# configuration


def _section(cls, d, name):
    if not isinstance(d, dict):
        raise UsageError(f"config section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise UsageError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config section {name!r}: {exc}") from None


@dataclass
class RunConfig:
    model_path: str | None = None
    camera: Camera | None = None
    matching: MatchConfig = field(default_factory=MatchConfig)
    energy: EnergyWeights = field(default_factory=EnergyWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    uncertainty: UncertaintyConfig = field(default_factory=UncertaintyConfig)
    synth: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise UsageError("config must be a JSON object")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise UsageError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls()
        if "model" in d:
            m = d["model"]
            if not isinstance(m, dict) or set(m) - {"path"}:
                raise UsageError("config section 'model' accepts only {\"path\": ...}")
            cfg.model_path = m.get("path")
        if "camera" in d:
            try:
                cfg.camera = Camera.from_dict(d["camera"])
            except (KeyError, TypeError, ValueError) as exc:
                raise UsageError(f"config section 'camera': {exc}") from None
        if "matching" in d:
            cfg.matching = _section(MatchConfig, d["matching"], "matching")
        if "energy" in d:
            cfg.energy = _section(EnergyWeights, d["energy"], "energy")
        if "optimizer" in d:
            cfg.optimizer = _section(OptimizerConfig, d["optimizer"], "optimizer")
        if "uncertainty" in d:
            cfg.uncertainty = _section(UncertaintyConfig, d["uncertainty"], "uncertainty")
        if "synth" in d:
            if not isinstance(d["synth"], dict):
                raise UsageError("config section 'synth' must be an object")
            cfg.synth = dict(d["synth"])
        return cfg

    def validate(self):
        if self.model_path is not None and not os.path.exists(self.model_path):
            raise UsageError(f"model file not found: {self.model_path}")


def read_json(path, what="input"):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"{what} file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def load_config(args):
    cfg = RunConfig.from_dict(read_json(args.config, "config")) if args.config else RunConfig()
    if getattr(args, "model", None):
        cfg.model_path = args.model
    overrides = {}
    for flag, key in (("t_d", "t_d"), ("t_3d", "t_3d"), ("pixel_stride", "pixel_stride")):
        val = getattr(args, flag, None)
        if val is not None:
            overrides[key] = val
    if getattr(args, "t_n", None) is not None:
        overrides["t_n"] = float(np.deg2rad(args.t_n))
    if overrides:
        d = {f.name: getattr(cfg.matching, f.name) for f in fields(MatchConfig)}
        d.update(overrides)
        cfg.matching = _section(MatchConfig, d, "matching")
    cfg.validate()
    return cfg


def _load_model(cfg):
    try:
        return load_model(cfg.model_path)
    except FileNotFoundError:
        raise UsageError(f"model file not found: {cfg.model_path}") from None
    except ModelError as exc:
        raise UsageError(str(exc)) from None


def _dump(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    cfg = load_config(args)
    scene = dict(cfg.synth)
    if args.scene:
        scene.update(read_json(args.scene, "scene"))
    for flag, key in (("script", "script"), ("frames", "n_frames"), ("seed", "seed"),
                      ("depth_noise", "depth_noise_sigma"), ("corr_noise", "corr_noise_sigma")):
        val = getattr(args, flag)
        if val is not None:
            scene[key] = val
    if cfg.model_path is not None:
        scene["model_path"] = cfg.model_path
    if cfg.camera is not None:
        scene["camera"] = cfg.camera.to_dict()
    try:
        spec = SceneSpec.from_dict(scene)
    except (SceneError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid scene: {exc}") from None
    model = _load_model(cfg)
    frames = generate(spec, args.out, model, jobs=args.jobs)
    log.info("wrote %d frames to %s", len(frames), args.out)
    return 0


def _energy_logger(path):
    if not path:
        return None, None
    fh = open(path, "a")

    def callback(frame, mode, iteration, energy):
        rec = {"frame": frame, "mode": mode, "iteration": iteration, **energy.to_dict()}
        fh.write(json.dumps(rec, sort_keys=True) + "\n")

    return callback, fh


def cmd_track(args):
    cfg = load_config(args)
    model = _load_model(cfg)
    try:
        frames = load_sequence(args.inp, cfg.camera)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    except ValueError as exc:
        raise UsageError(f"unreadable frames in {args.inp}: {exc}") from None
    if args.max_iters is not None:
        d = {f.name: getattr(cfg.optimizer, f.name) for f in fields(OptimizerConfig)}
        d["max_iters"] = args.max_iters
        cfg.optimizer = OptimizerConfig(**d)

    def assess_frame(obs, res):
        return assess(obs, res.params, res.pairs, model, cfg.uncertainty)

    callback, fh = _energy_logger(args.dump_energy)
    try:
        results = track(frames, model, None, cfg.energy, cfg.optimizer, cfg.matching,
                        assess=assess_frame, callback=callback)
    finally:
        if fh:
            fh.close()

    os.makedirs(args.out, exist_ok=True)
    records = []
    for res in results:
        rec = res.to_dict()
        rec["joints"] = (None if res.params is None
                         else keypoints(pose_hand(res.params, model), model).tolist())
        records.append(rec)
        if res.status == "lost":
            log.warning("frame %d lost: %s", res.frame, res.error)
    _dump(os.path.join(args.out, "fits.json"),
          {"camera": frames[0].cam.to_dict(), "model": cfg.model_path, "frames": records})
    with open(os.path.join(args.out, "unc.json"), "w") as fh:
        fh.write(reports_to_json([r.uncertainty for r in results]) + "\n")
    if args.ply:
        for res in results:
            if res.params is not None:
                write_ply(os.path.join(args.out, f"frame_{res.frame:04d}.ply"),
                          pose_hand(res.params, model), model, res.uncertainty)
    n_ok = sum(r.params is not None for r in results)
    log.info("tracked %d of %d frames", n_ok, len(results))
    if n_ok == 0:
        raise PipelineError("tracking failed on every frame")
    return 0


def _fit_params(fits):
    try:
        return [None if f["params"] is None else PoseParams.from_dict(f["params"])
                for f in fits["frames"]]
    except (KeyError, TypeError) as exc:
        raise UsageError(f"fits file lacks per-frame params: {exc}") from None


def _write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "finger", "angle_deg", "valid"])
        for frame, finger, angle, valid in trace.rows():
            w.writerow([frame, finger, "" if angle is None else f"{angle:.6f}", int(valid)])


def _variance_dict(trace):
    rep = variance_report(trace)
    return {"fingers": rep.fingers, "omitted": rep.omitted}


def cmd_assess(args):
    cfg = load_config(args)
    model = _load_model(cfg)
    fits = read_json(args.inp, "fits")
    params = _fit_params(fits)
    if args.reports:
        try:
            with open(args.reports) as fh:
                reports = reports_from_json(fh.read())
        except FileNotFoundError:
            raise UsageError(f"reports file not found: {args.reports}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.reports}: malformed JSON at line {exc.lineno} "
                             f"column {exc.colno}: {exc.msg}") from None
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"{args.reports}: invalid report: {exc}") from None
    else:
        reports = [UncertaintyReport.from_list([
            {"segment_id": i, "u": 0, "reason": "observed-ok", "visibility": 1.0, "r2d": 0.0,
             "r3d": 0.0} for i in range(1, 21)]) if p is not None else None for p in params]
    raw = angle_trace(params, model)
    try:
        filtered = filter_by_uncertainty(raw, reports, args.window)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _write_trace(args.out, filtered)
    stem, ext = os.path.splitext(args.out)
    _write_trace(f"{stem}.unfiltered{ext or '.csv'}", raw)
    summary = {"filtered": _variance_dict(filtered), "unfiltered": _variance_dict(raw)}
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


def _frame_joints(frames, model, jobs=1):
    def one(rec):
        if rec.get("joints") is not None:
            return np.asarray(rec["joints"], dtype=float)
        if rec.get("params") is None:
            return None
        return keypoints(pose_hand(PoseParams.from_dict(rec["params"]), model), model)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            return list(pool.map(one, frames))
    return [one(r) for r in frames]


def cmd_eval(args):
    cfg = load_config(args)
    model = _load_model(cfg)
    pred = read_json(args.pred, "prediction")
    gt = read_json(args.gt, "ground-truth")
    try:
        thresholds = [float(t) for t in args.pck.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--pck expects comma-separated numbers, got {args.pck!r}") from None
    try:
        pj = _frame_joints(pred["frames"], model, args.jobs)
        gj = _frame_joints(gt["frames"], model, args.jobs)
    except (KeyError, TypeError) as exc:
        raise UsageError(f"missing frame data: {exc}") from None
    if len(pj) != len(gj):
        raise UsageError(f"prediction has {len(pj)} frames, ground truth {len(gj)}")
    keep = [k for k in range(len(pj)) if pj[k] is not None and gj[k] is not None]
    if not keep:
        raise PipelineError("no frame has both a prediction and ground truth")
    P = np.stack([pj[k] for k in keep])
    G = np.stack([gj[k] for k in keep])
    try:
        out = {"mepe_mm": mepe(P, G),
               "pck": {f"{t:g}": pck(P, G, t) for t in thresholds},
               "n_frames": len(keep), "n_missing": len(pj) - len(keep)}
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_calibrate(args):
    from .calibration import build_suite, calibration_report, collect_evidence

    cfg = load_config(args)
    model = _load_model(cfg)
    cases = build_suite(model, args.per_kind)
    evidence = collect_evidence(cases, model, cfg.energy, cfg.optimizer, cfg.matching,
                                progress=lambda c: log.info("fitted %s case %d", c.kind, c.index))
    report = calibration_report(evidence, cfg.uncertainty)
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0 if report["score"]["passed"] else 1


# ---------------------------------------------------------------------------
# entry point


class JsonFormatter(logging.Formatter):
    def format(self, record):
        rec = {"level": record.levelname.lower(), "logger": record.name,
               "message": record.getMessage()}
        if record.exc_info:
            rec["exception"] = self.formatException(record.exc_info)
        return json.dumps(rec)


def _setup_logging(args):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter() if args.log_json
                         else logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("handfit")
    root.handlers[:] = [handler]
    root.propagate = False
    root.setLevel(logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config with per-module sections")
    common.add_argument("--model", help="hand model JSON (default: bundled)")
    common.add_argument("--log-json", action="store_true", help="log to stderr as JSON lines")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="handfit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic sequence")
    s.add_argument("--script", help="abduction_adduction, hyperextension or ball_rotation")
    s.add_argument("--frames", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--depth-noise", type=float, help="depth noise sigma (m)")
    s.add_argument("--corr-noise", type=float, help="correspondence noise sigma")
    s.add_argument("--scene", help="JSON scene description (occluders, corruptions, ...)")
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("track", parents=[common], help="fit every frame of a sequence")
    t.add_argument("--in", dest="inp", required=True, help="frame directory")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--ply", action="store_true", help="write a mesh per frame")
    t.add_argument("--dump-energy", help="append per-iteration energies (JSON lines) to this file")
    t.add_argument("--t-d", type=float, help="depth gate around the median (m)")
    t.add_argument("--t-n", type=float, help="normal angle gate (degrees)")
    t.add_argument("--t-3d", type=float, help="3D pair distance gate (m)")
    t.add_argument("--pixel-stride", type=int)
    t.add_argument("--max-iters", type=int)
    t.set_defaults(func=cmd_track)

    a = sub.add_parser("assess", parents=[common], help="finger abduction traces")
    a.add_argument("--in", dest="inp", required=True, help="fits.json")
    a.add_argument("--reports", help="unc.json")
    a.add_argument("--window", type=int, default=3)
    a.add_argument("--out", required=True, help="filtered trace CSV")
    a.set_defaults(func=cmd_assess)

    e = sub.add_parser("eval", parents=[common], help="MEPE and PCK against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--pck", default="15,30", help="thresholds in mm")
    e.add_argument("--jobs", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("calibrate-uncertainty", parents=[common],
                       help="score thresholds on the constructed suite")
    c.add_argument("--per-kind", type=int, default=10)
    c.add_argument("--out")
    c.set_defaults(func=cmd_calibrate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args)
    try:
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc)
        return 2
    except PipelineError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
