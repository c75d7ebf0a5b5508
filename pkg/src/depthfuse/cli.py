"""``depthfuse`` command line.

Exit codes: 0 ok, 2 unreadable file, 3 size mismatch, 4 bad configuration,
5 solver did not converge.  Set ``DEPTHFUSE_LOG`` (e.g. ``DEBUG``) for
progress logging on stderr.
"""
from __future__ import annotations

import argparse
import glob
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import __version__, _kernels
from . import config as cfgmod
from . import io as dio
from .config import Config, ConfigError
from .core import DepthMap, Resolution, bilateral_filter, gradient, resample_to_shape
from .corpus import make_scene, standard_corpus
from .distill import NonConvergenceError, default_sigma_range, run_distillation
from .fusion import derive_omega, poisson_fuse
from .metrics import evaluate
from .noise import compute_alpha, fit_noise, simulate_predictor, synthesize

log = logging.getLogger("depthfuse")

EXIT_OK, EXIT_FORMAT, EXIT_SHAPE, EXIT_CONFIG, EXIT_NONCONV = 0, 2, 3, 4, 5
REPORT_SCHEMA = "depthfuse/metrics-report/1"
RUN_SCHEMA = "depthfuse/distill-run/1"


class ShapeMismatch(ValueError):
    pass


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path, obj):
    with open(path, "w") as f:
        f.write(dumps(obj))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        h.update(f.read())
    return h.hexdigest()


def provenance(cfg: Config) -> dict:
    return {"config_sha256": cfg.digest(), "seed": cfg.seed, "version": __version__,
            "backend": _kernels.BACKEND}


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args) -> Config:
    """Config file plus command-line overrides, validated before any work."""
    base = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                base = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError([f"config is not valid JSON: {e}"]) from None
        if not isinstance(base, dict):
            raise ConfigError(["config must be a JSON object"])
    for name in ("S", "seed", "tau", "overlap_frac", "r_hat"):
        v = getattr(args, name, None)
        if v is not None:
            base[name] = v
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError([f"--set expects key=value, got '{item}'"])
        key, val = item.split("=", 1)
        parts = key.split(".")
        node = base
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError([f"'{p}' is not a section"])
        node[parts[-1]] = _parse_value(val)
    return cfgmod.from_dict(base)


def _shape_check(a: DepthMap, b: DepthMap, what="prediction and ground truth"):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what} differ in size: {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# commands


def cmd_synth_corpus(cfg: Config, out_dir: str, n: int = 20):
    """Ideal depth plus two simulated predictions per scene, and a checksummed manifest."""
    os.makedirs(out_dir, exist_ok=True)
    low_res = Resolution(max(cfg.r_hat.long_side // 2, 2))
    entries = []
    for i in range(n):
        name, ideal = make_scene(i, cfg.seed, cfg.r_hat.long_side)
        sub = os.path.join(out_dir, f"{i:02d}_{name}")
        os.makedirs(sub, exist_ok=True)
        noise = cfg.scene_noise(i)
        files = {
            "ideal.pfm": ideal,
            f"pred_{low_res.long_side}.pfm": simulate_predictor(ideal, low_res, noise),
            f"pred_{cfg.r_hat.long_side}.pfm": simulate_predictor(ideal, cfg.r_hat, noise),
        }
        sums = {}
        for fn, d in files.items():
            p = os.path.join(sub, fn)
            dio.write_depth(p, d)
            sums[f"{i:02d}_{name}/{fn}"] = sha256_file(p)
        entries.append({"index": i, "name": name, "height": ideal.height, "width": ideal.width,
                        "files": sums})
        log.info("scene %d %s", i, name)
    manifest = {"scenes": entries, "provenance": provenance(cfg)}
    write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


def cmd_synth_noise(cfg: Config, ideal_path: str, out_dir: str, fit: bool = False):
    ideal = dio.read_any_depth(ideal_path)
    os.makedirs(out_dir, exist_ok=True)
    f = synthesize(ideal, cfg.noise)
    degraded = DepthMap(ideal.values + f.total)
    dio.write_depth(os.path.join(out_dir, "degraded.pfm"), degraded)
    dio.write_depth(os.path.join(out_dir, "noise_cons.pfm"), DepthMap(f.cons))
    dio.write_depth(os.path.join(out_dir, "noise_edge.pfm"), DepthMap(f.edge))
    summary = {"provenance": provenance(cfg)}
    if fit:
        _, p = fit_noise(ideal, degraded, cfg.noise)
        summary["fit_psnr_db"] = p if np.isfinite(p) else "inf"
    write_json(os.path.join(out_dir, "noise.json"), summary)
    return summary


def cmd_refine(cfg: Config, low_path: str, high_path: str, out_path: str, guide_path=None):
    """One fusion solve on the grid of the high-resolution prediction."""
    high = dio.read_any_depth(high_path)
    low = resample_to_shape(dio.read_any_depth(low_path), high.shape)
    if guide_path:
        guide = dio.read_gradient(guide_path)
        if guide.shape != high.shape:
            raise ShapeMismatch(f"guide {guide.shape} vs prediction {high.shape}")
    else:
        g = gradient(low)
        guide = bilateral_filter(g, cfg.sigma_spatial, cfg.sigma_range or default_sigma_range(g))
    res = poisson_fuse(low, high, derive_omega(guide, cfg.qspec.a, cfg.qspec.n_w), cfg.fusion)
    if not res.converged:
        raise NonConvergenceError(f"fusion stopped at residual {res.residual:.3e}")
    dio.write_depth(out_path, res.depth)
    summary = {"iterations": res.iters, "residual": res.residual, "provenance": provenance(cfg)}
    write_json(os.path.splitext(out_path)[0] + ".json", summary)
    return summary


def _load_scene(cfg: Config, scene: str):
    if scene.isdigit():
        i = int(scene)
        name, ideal = make_scene(i, cfg.seed, cfg.r_hat.long_side)
        return name, ideal, cfg.scene_noise(i)
    return os.path.splitext(os.path.basename(scene))[0], dio.read_any_depth(scene), cfg.noise


def corpus_alpha(cfg: Config) -> float:
    return compute_alpha([d for _, d in standard_corpus(cfg.seed, long_side=cfg.r_hat.long_side)])


def cmd_distill(cfg: Config, scene: str, out_dir: str):
    name, ideal, noise = _load_scene(cfg, scene)
    params = cfg.distill_params(alpha=corpus_alpha(cfg))
    state, history, records = run_distillation(ideal, noise, cfg.S, params, keep_states=True)
    os.makedirs(out_dir, exist_ok=True)
    for r in records:
        dio.write_depth(os.path.join(out_dir, f"depth_s{r.s}.pfm"), r.state.D)
    dio.write_gradient(os.path.join(out_dir, f"edges_s{cfg.S}.pfm"), state.G)
    run = {
        "schema": RUN_SCHEMA,
        "scene": name,
        "S": cfg.S,
        "iterations": [{"s": r.s, "resolutions": list(r.resolutions), "report": h.to_dict()}
                       for r, h in zip(records, history)],
        "provenance": provenance(cfg),
    }
    write_json(os.path.join(out_dir, "metrics.json"), run)
    return run


def cmd_eval(cfg: Config, pred_path: str, gt_path: str, out_path=None, align=True, pgm_scale=1.0):
    pred = dio.read_any_depth(pred_path, pgm_scale)
    gt = dio.read_any_depth(gt_path, pgm_scale)
    _shape_check(pred, gt)
    rep = evaluate(pred, gt, cfg.tau, cfg.n_pairs, cfg.seed, cfg.cell, align=align)
    out = {"schema": REPORT_SCHEMA, "report": rep.to_dict(), "provenance": provenance(cfg)}
    text = dumps(out)
    if out_path:
        with open(out_path, "w") as f:
            f.write(text)
    sys.stdout.write(text)
    return out


def cmd_report(paths, out_path=None):
    """Per-iteration means over distill runs, as JSON and a plain table."""
    files = []
    for p in paths:
        if os.path.isdir(p):
            files.extend(sorted(glob.glob(os.path.join(p, "**", "metrics.json"), recursive=True)))
        else:
            files.append(p)
    if not files:
        raise FileNotFoundError("no metrics.json files found")
    runs = []
    for fp in files:
        with open(fp) as f:
            runs.append(json.load(f))
    keys = ("abs_rel", "rmse", "delta1", "ord", "d3r")
    n_it = min(len(r["iterations"]) for r in runs)
    rows = []
    for s in range(n_it):
        row = {"s": s, "n_runs": len(runs)}
        for k in keys:
            row[k] = float(np.mean([r["iterations"][s]["report"][k] for r in runs]))
        rows.append(row)
    summary = {"runs": [r["scene"] for r in runs], "iterations": rows}
    lines = ["s  " + "  ".join(f"{k:>9}" for k in keys)]
    for row in rows:
        lines.append(f"{row['s']:<2} " + "  ".join(f"{row[k]:9.5f}" for k in keys))
    sys.stdout.write("\n".join(lines) + "\n")
    if out_path:
        write_json(out_path, summary)
    return summary


# --------------------------------------------------------------------------
# argument handling


def _add_config_flags(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--S", type=int, help="number of coarse-to-fine iterations")
    p.add_argument("--seed", type=int)
    p.add_argument("--tau", type=float, help="ordinal ratio threshold")
    p.add_argument("--overlap-frac", dest="overlap_frac", type=float)
    p.add_argument("--r-hat", dest="r_hat", type=int, help="predictor training resolution")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config field, e.g. noise.scale_sigma=0.03")


def build_parser():
    ap = argparse.ArgumentParser(prog="depthfuse", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-corpus", help="write the seeded synthetic corpus")
    _add_config_flags(p)
    p.add_argument("out_dir")
    p.add_argument("--n", type=int, default=20)

    p = sub.add_parser("synth-noise", help="degrade an ideal depth map")
    _add_config_flags(p)
    p.add_argument("ideal")
    p.add_argument("out_dir")
    p.add_argument("--fit", action="store_true", help="also fit the noise back and report PSNR")

    p = sub.add_parser("refine", help="one fusion solve of a low and a high prediction")
    _add_config_flags(p)
    p.add_argument("low")
    p.add_argument("high")
    p.add_argument("out")
    p.add_argument("--guide", help="gradient PFM used to derive the mask")

    p = sub.add_parser("distill", help="coarse-to-fine edge representation for one scene")
    _add_config_flags(p)
    p.add_argument("scene", help="corpus scene index or an ideal depth file")
    p.add_argument("out_dir")

    p = sub.add_parser("eval", help="metrics of a prediction against ground truth")
    _add_config_flags(p)
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--out", help="also write the JSON report here")
    p.add_argument("--no-align", dest="align", action="store_false")
    p.add_argument("--pgm-scale", type=float, default=1.0, help="depth units per PGM16 step")

    p = sub.add_parser("report", help="aggregate distill metrics into a summary table")
    p.add_argument("paths", nargs="+")
    p.add_argument("--out")
    return ap


def _fail(code, kind, message, problems=None):
    err = {"error": kind, "message": message}
    if problems:
        err["problems"] = problems
    sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("DEPTHFUSE_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            cmd_report(args.paths, args.out)
            return EXIT_OK
        cfg = resolve_config(args)
        if args.command == "synth-corpus":
            cmd_synth_corpus(cfg, args.out_dir, args.n)
        elif args.command == "synth-noise":
            cmd_synth_noise(cfg, args.ideal, args.out_dir, args.fit)
        elif args.command == "refine":
            cmd_refine(cfg, args.low, args.high, args.out, args.guide)
        elif args.command == "distill":
            cmd_distill(cfg, args.scene, args.out_dir)
        elif args.command == "eval":
            cmd_eval(cfg, args.pred, args.gt, args.out, args.align, args.pgm_scale)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, "config", str(e), e.problems)
    except dio.PFMFormatError as e:
        return _fail(EXIT_FORMAT, "format", f"{type(e).__name__}: {e}")
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        return _fail(EXIT_FORMAT, "format", str(e))
    except ShapeMismatch as e:
        return _fail(EXIT_SHAPE, "shape", str(e))
    except NonConvergenceError as e:
        return _fail(EXIT_NONCONV, "nonconvergence", str(e))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())


__all__ = ["main", "build_parser", "cmd_synth_corpus", "cmd_synth_noise", "cmd_refine",
           "cmd_distill", "cmd_eval", "cmd_report"]
