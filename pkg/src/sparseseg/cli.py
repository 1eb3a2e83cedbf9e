"""Command-line entry point: ``sparseseg <command> [--config FILE] [--set key=value ...]``.

Every command writes ``report.json`` (plus any figures) into ``--out`` and
prints the same report between ``--- report ---`` / ``--- end report ---``
lines. The exit code is 0 only when every check the command runs passes.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from .config import from_dict, parse_config
from .errors import CheckpointError, SparseSegError, TrainingDiverged

log = logging.getLogger("sparseseg")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def _clean(obj):
    """Replace non-finite floats by None so the report stays strict JSON."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def emit_report(report, out_dir, stream=None):
    stream = stream or sys.stdout
    out_dir.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_clean(json.loads(json.dumps(report, default=_json_default))), indent=2, sort_keys=True)
    (out_dir / "report.json").write_text(text + "\n")
    print("--- report ---", file=stream)
    print(text, file=stream)
    print("--- end report ---", file=stream)


def _load_model(cfg, checkpoint):
    from .checkpoint import load_checkpoint
    from .model import SCDModel

    if checkpoint is None:
        return SCDModel(cfg)
    path = Path(checkpoint)
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    state, saved_cfg = load_checkpoint(path)
    model = SCDModel(from_dict(saved_cfg) if saved_cfg else cfg)
    model.load_state_dict(state)
    return model


def _input_volume(args, cfg):
    """Volume from ``--input`` (.npy), else a synthetic sample; returns (volume, labels or None)."""
    from .data import generate_synthetic

    if args.input:
        vol = np.load(args.input)
        if vol.ndim == 3:
            vol = vol[..., None]
        return vol.astype(cfg.dtype), None
    sample = generate_synthetic(args.sample_seed, cfg.encoder.extents, cfg.decoder.num_classes, cfg.encoder.in_channels)
    return sample.intensities, sample.labels


# -- commands -------------------------------------------------------------------

def cmd_train(args, cfg, out):
    from .plotting import plot_loss_curve
    from .train import train

    start = time.perf_counter()
    try:
        result = train(cfg, out_dir=out, metrics_path=out / "metrics.jsonl")
    except TrainingDiverged as exc:
        return {"command": "train", "ok": False, "error": str(exc), "diagnostics": exc.diagnostics}
    plot_loss_curve(result.losses, out / "loss.png")
    report = {"command": "train", "ok": True, "steps": len(result.losses),
              "final_loss": result.losses[-1] if result.losses else None,
              "seconds": time.perf_counter() - start, "checkpoint": result.checkpoint,
              "figures": ["loss.png"], "config": cfg.to_dict()}
    if result.report is not None:
        report["validation"] = result.report.to_dict()
    return report


def cmd_infer(args, cfg, out):
    from .inference import sliding_window_infer
    from .metrics import evaluate
    from .plotting import plot_prediction

    if args.checkpoint is None:
        raise UsageError("infer requires --checkpoint")
    model = _load_model(cfg, args.checkpoint)
    volume, labels = _input_volume(args, model.cfg)
    pred = sliding_window_infer(model, volume, model.cfg.infer.overlap)
    np.save(out / "prediction.npy", pred)
    plot_prediction(volume, labels, pred, out / "prediction.png")
    report = {"command": "infer", "ok": True, "prediction": "prediction.npy", "shape": list(pred.shape),
              "class_counts": np.bincount(pred.ravel(), minlength=model.cfg.decoder.num_classes).tolist(),
              "figures": ["prediction.png"]}
    if labels is not None:
        report["metrics"] = evaluate([pred], [labels], model.cfg.decoder.num_classes).to_dict()
    return report


def _parse_ratios(text):
    key, sep, values = text.partition("=")
    if not sep or key.strip() != "r":
        raise UsageError(f"--compare expects r=v1,v2,..., got {text!r}")
    try:
        return [float(v) for v in values.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--compare: {exc}") from None


def cmd_bench(args, cfg, out):
    from .model import SCDModel
    from .plotting import plot_mac_comparison
    from .profiling import count_macs, measure_throughput

    ratios = _parse_ratios(args.compare) if args.compare else list(cfg.bench.ratios)
    bench_cfg = cfg.replace(encoder={"extents": list(cfg.bench.extents)})
    reports, entries = [], []
    for r in ratios:
        rcfg = bench_cfg.replace(encoder={"r": r})
        rep = count_macs(rcfg)
        reports.append(rep)
        entry = {"r": r, "macs": rep.to_dict()}
        if args.throughput:
            entry["throughput"] = measure_throughput(SCDModel(rcfg), warmup=cfg.bench.warmup, iters=cfg.bench.iters)
        entries.append(entry)
    enc_totals = [rep.encoder_total for rep in reports]
    order = np.argsort(ratios)
    decreasing = all(enc_totals[order[i]] > enc_totals[order[i + 1]] for i in range(len(order) - 1))
    plot_mac_comparison(ratios, reports, out / "macs.png")
    for e in entries:
        line = f"r={e['r']:g}: encoder {e['macs']['encoder_total'] / 1e9:.3f} GMACs, total {e['macs']['grand_total'] / 1e9:.3f} GMACs"
        if "throughput" in e:
            line += f", encoder {e['throughput']['encoder_imgs_per_s']:.2f} img/s"
        print(line)
    return {"command": "bench", "ok": bool(decreasing), "extents": list(cfg.bench.extents),
            "encoder_macs_strictly_decreasing": bool(decreasing), "runs": entries, "figures": ["macs.png"]}


def cmd_gradcheck(args, cfg, out):
    from .gradcheck import REL_TOL, check_ops, check_pipeline, pipeline_config

    enc = cfg.encoder
    small = pipeline_config(r=enc.r, tau=enc.tau, eps=enc.eps, perturb=enc.perturb)
    start = time.perf_counter()
    ops = check_ops(seed=args.seed)
    pipe = check_pipeline(small, coords_per_tensor=args.coords, seed=args.seed)
    worst = max(max(ops.values()), max(pipe.values()))
    for name, err in sorted(ops.items()):
        print(f"op {name:<12} max rel err {err:.2e}")
    top = max(pipe, key=pipe.get)
    print(f"pipeline: {len(pipe)} tensors, max rel err {pipe[top]:.2e} ({top})")
    return {"command": "gradcheck", "ok": bool(worst < REL_TOL), "tolerance": REL_TOL,
            "max_rel_error": worst, "ops": ops, "pipeline": pipe, "seconds": time.perf_counter() - start}


def cmd_sample_check(args, cfg, out):
    from .stp import inclusion_frequencies

    if args.scores:
        scores = np.array([float(v) for v in args.scores.split(",")])
        if scores.size != args.n:
            raise UsageError(f"--scores has {scores.size} values but --n is {args.n}")
    else:
        scores = np.full(args.n, 0.5)
    if not 1 <= args.k <= args.n:
        raise UsageError("--k must lie in [1, n]")
    rng = np.random.default_rng(args.seed)
    freqs = inclusion_frequencies(scores, args.k, args.trials, rng, tau=cfg.encoder.tau)
    report = {"command": "sample-check", "n": args.n, "k": args.k, "trials": args.trials,
              "scores": scores.tolist(), "frequencies": freqs.tolist(), "tolerance": args.tol}
    if np.all(scores == scores[0]):
        target = args.k / args.n
        dev = np.abs(freqs - target)
        report.update(check="symmetry", target=target, deviations=dev.tolist(), max_deviation=float(dev.max()),
                      ok=bool(dev.max() <= args.tol))
        for i, (f, d) in enumerate(zip(freqs, dev)):
            print(f"token {i}: inclusion {f:.4f}  deviation {d:.4f}")
    else:
        order = np.argsort(scores, kind="stable")
        monotone = bool(np.all(np.diff(freqs[order]) >= 0))
        report.update(check="monotone", ok=monotone)
        for i in order:
            print(f"score {scores[i]:.4f}: inclusion {freqs[i]:.4f}")
    return report


def cmd_depth_map(args, cfg, out):
    from .plotting import plot_depth_map
    from .profiling import export_depth_map

    model = _load_model(cfg, args.checkpoint)
    volume, _ = _input_volume(args, model.cfg)
    dmap = export_depth_map(model, volume, out / "depth_map.txt")
    plot_depth_map(dmap, out / "depth_map.png", volume)
    hist = {str(k): v for k, v in dmap.histogram().items()}
    print("histogram " + ", ".join(f"{k}: {v}" for k, v in hist.items()))
    return {"command": "depth-map", "ok": True, "histogram": hist, "sentinel": dmap.sentinel,
            "files": ["depth_map.txt", "depth_map.pgm"], "figures": ["depth_map.png"]}


COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
    "sample-check": cmd_sample_check,
    "depth-map": cmd_depth_map,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (omitted fields take defaults)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. encoder.r=0.75 (repeatable)")
    common.add_argument("--out", default="sparseseg-out", help="directory for report.json and figures")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sparseseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train on the synthetic task")

    volume_src = argparse.ArgumentParser(add_help=False)
    volume_src.add_argument("--input", help=".npy volume [H,W,D] or [H,W,D,C]")
    volume_src.add_argument("--sample-seed", type=int, default=0, help="synthetic sample when --input is absent")

    p = sub.add_parser("infer", parents=[common, volume_src], help="sliding-window inference")
    p.add_argument("--checkpoint")
    p = sub.add_parser("bench", parents=[common], help="MAC counts (and optionally throughput)")
    p.add_argument("--compare", help="ratios to compare, e.g. r=0,0.5,0.9")
    p.add_argument("--throughput", action="store_true", help="also time inference")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks in float64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=3, help="random coordinates checked per tensor")
    p = sub.add_parser("sample-check", parents=[common], help="Monte-Carlo inclusion probabilities")
    p.add_argument("--n", type=int, default=6)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--scores", help="comma-separated scores (default: all equal)")
    p.add_argument("--tol", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p = sub.add_parser("depth-map", parents=[common, volume_src], help="export the pruning-depth map")
    p.add_argument("--checkpoint")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        cfg = parse_config(args.config, args.overrides)
        out.mkdir(parents=True, exist_ok=True)
        report = COMMANDS[args.command](args, cfg, out)
    except UsageError as exc:
        parser.error(str(exc))
    except (SparseSegError, CheckpointError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        emit_report({"command": args.command, "ok": False, "error": str(exc)}, out)
        return EXIT_CHECK_FAILED
    emit_report(report, out)
    return EXIT_OK if report.get("ok", False) else EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
