"""Command-line front-end for the compile/simulate toolchain."""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import report, runtime, soc, zoo
from .errors import QsepError
from .ir import load_model, save_model, count_ops, count_params_mbits
from .kernels import qexec
from .kernels.reference import make_calibration_inputs
from .quantize import (CalibrationStats, QNetModel, calibrate,
                       fuse_activation, fuse_graph_bn)


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_qnet(path) -> QNetModel:
    qnet = QNetModel(load_model(path))
    qnet.validate()
    return qnet


def _device(args) -> soc.DeviceProfile:
    return soc.load_device_profile(args.device)


def cmd_make_model(args) -> int:
    kwargs = {"seed": args.seed}
    if args.arch == "mobilenet-v2":
        kwargs.update(alpha=args.alpha, resolution=args.resolution)
    elif args.arch == "efficientnet-compressed":
        kwargs.update(resolution=args.resolution)
    g = zoo.build_arch(args.arch, **kwargs)
    out = Path(args.out_dir) / "model"
    save_model(g, out)
    print(f"{args.arch}: {count_params_mbits(g):.2f} Mbit, "
          f"{count_ops(g) / 1e6:.1f} Mops -> {out}")
    return 0


def cmd_fuse(args) -> int:
    g = load_model(args.model)
    fused = fuse_graph_bn(g)
    out = Path(args.out_dir) / "fused"
    save_model(fused, out)
    print(f"batch-norm fused -> {out}")
    return 0


def cmd_calibrate(args) -> int:
    g = load_model(args.model)
    data = make_calibration_inputs(g, args.samples, seed=args.seed)
    stats = calibrate(g, data)
    out = Path(args.out_dir) / "calibration.json"
    _write_json(out, stats.to_doc())
    print(f"calibrated over {stats.samples} samples, "
          f"{len(stats.mins)} tensors -> {out}")
    return 0


def cmd_quantize(args) -> int:
    g = load_model(args.model)
    stats = CalibrationStats.from_doc(
        json.loads(Path(args.calibration).read_text()))
    qnet = fuse_activation(g, stats, bw=args.bw, mode=args.mode,
                           input_bw=args.input_bw)
    out = Path(args.out_dir) / "qnet"
    save_model(qnet.graph, out)
    print(f"quantized at {args.bw}-bit -> {out}")
    return 0


def cmd_compile(args) -> int:
    qnet = _load_qnet(args.model)
    plan = soc.compile_plan(qnet, _device(args))
    out = Path(args.out_dir) / "plan.json"
    _write_json(out, plan.to_doc())
    r = plan.resources
    print(f"{plan.assignment.invocations()} invocations, dsp {r.dsp} "
          f"({r.dsp_utilization:.0%}), "
          f"{'feasible' if r.feasible else 'INFEASIBLE'} -> {out}")
    return 0


def cmd_simulate(args) -> int:
    qnet = _load_qnet(args.model)
    plan = soc.compile_plan(qnet, _device(args))
    g = qnet.graph
    rng = np.random.default_rng(args.seed)
    results = []
    exact = True
    for i in range(args.samples):
        x = rng.random((g.input_channels, g.input_resolution,
                        g.input_resolution))
        res = runtime.run_inference(qnet, x, plan, mode=args.mode)
        oracle = qexec.graph_forward_ref(qnet, qnet.input_spec.quantize(x))
        same = bool(np.array_equal(res.logits_q.reshape(-1),
                                   oracle.reshape(-1)))
        exact = exact and same
        analytic = runtime.transaction_totals(
            runtime.trace_transactions(qnet, plan, fused=True))
        results.append({
            "sample": i,
            "bit_exact": same,
            "argmax": res.argmax,
            "measured": res.measured,
            "analytic": analytic,
            "transactions_match": res.measured == analytic,
        })
    perf = runtime.estimate_performance(qnet, plan)
    doc = {"mode": args.mode, "samples": results, "bit_exact": exact,
           "performance": perf}
    out = Path(args.out_dir) / "simulation.json"
    _write_json(out, doc)
    print(f"{args.samples} sample(s), mode={args.mode}, "
          f"bit-exact={exact} -> {out}")
    return 0 if exact else 1


def cmd_report(args) -> int:
    qnet = _load_qnet(args.model)
    plan = soc.compile_plan(qnet, _device(args))
    out = Path(args.out_dir) / "report"
    try:
        paths = report.full_report(qnet, plan, out,
                                   resolution=args.resolution)
    except Exception:
        shutil.rmtree(out, ignore_errors=True)  # no partial reports
        raise
    for p in paths:
        print(p)
    return 0


def _apply_config(args, parser) -> None:
    """Flat toml config supplies defaults for any long option."""
    if not args.config:
        return
    doc = soc.parse_flat_toml(Path(args.config).read_text())
    defaults = {a.dest: a.default for a in parser._actions}
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sp in action.choices.values():
                defaults.update({a.dest: a.default for a in sp._actions})
    for key, value in doc.items():
        dest = key.replace("-", "_")
        if hasattr(args, dest) and getattr(args, dest) == defaults.get(dest):
            setattr(args, dest, value)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="qsep",
        description="quantizing compiler and bit-exact simulator for "
                    "separable CNNs")
    p.add_argument("--config", help="flat toml file with option defaults")
    p.add_argument("--out-dir", default="out", help="artifact directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--device", default="xczu9eg",
                   help="device name or profile toml path")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-model", help="emit a built-in architecture")
    s.add_argument("--arch", default="mobilenet-v2",
                   choices=sorted(zoo.ARCH_BUILDERS))
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--resolution", type=int, default=224)
    s.set_defaults(func=cmd_make_model)

    s = sub.add_parser("fuse", help="fold batch-norm into convolutions")
    s.add_argument("--model", required=True)
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("calibrate", help="collect activation ranges")
    s.add_argument("--model", required=True, help="batch-norm fused model")
    s.add_argument("--samples", type=int, default=8)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("quantize", help="emit the integer model")
    s.add_argument("--model", required=True, help="batch-norm fused model")
    s.add_argument("--calibration", required=True)
    s.add_argument("--bw", type=int, default=4)
    s.add_argument("--input-bw", type=int, default=8)
    s.add_argument("--mode", default="asymmetric",
                   choices=["asymmetric", "symmetric"])
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("compile", help="map onto compute units")
    s.add_argument("--model", required=True, help="quantized model")
    s.set_defaults(func=cmd_compile)

    s = sub.add_parser("simulate", help="bit-exact scheduled inference")
    s.add_argument("--model", required=True, help="quantized model")
    s.add_argument("--mode", default="fast",
                   choices=["fast", "reference", "reference-shift",
                            "stream", "stream-threaded"])
    s.add_argument("--samples", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("report", help="tables and figures")
    s.add_argument("--model", required=True, help="quantized model")
    s.add_argument("--resolution", type=int, default=224,
                   help="resolution for the width-multiplier sweep")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_config(args, parser)
        return args.func(args)
    except QsepError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
