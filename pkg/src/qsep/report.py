"""CSV tables and figures for compiled models.

Everything lands in one output directory: delimited tables for the
numbers, PNG renderings next to them for eyeballing trends.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

import numpy as np  # noqa: E402

from .ir import NetworkGraph, count_ops, count_params_mbits, network_complexity
from . import runtime, soc, zoo
from .quantize import QNetModel


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    return path


def model_rows(graphs) -> list[list]:
    rows = []
    for g in graphs:
        rows.append([
            g.arch_name, g.alpha, g.input_resolution,
            round(count_params_mbits(g), 3),
            round(count_ops(g) / 1e6, 3),
            round(network_complexity(g), 2),
        ])
    return rows


MODEL_HEADER = ["arch", "alpha", "resolution", "params_mbit", "ops_m",
                "complexity_mbit_mops"]


def alpha_sweep(resolution: int = 224,
                alphas=(0.35, 0.5, 0.75, 1.0)) -> list[dict]:
    """Width-multiplier sweep with plan feasibility per point."""
    out = []
    for a in alphas:
        g = zoo.build_mobilenet_v2(alpha=a, resolution=resolution,
                                   with_weights=False)
        plan = soc.compile_plan(QNetModel(g))
        r = plan.resources
        out.append({
            "alpha": a,
            "params_mbit": count_params_mbits(g),
            "ops_m": count_ops(g) / 1e6,
            "complexity": network_complexity(g),
            "dsp": r.dsp,
            "dsp_utilization": r.dsp_utilization,
            "bram_utilization": r.bram_utilization,
            "lut_utilization": r.lut_utilization,
            "feasible": r.feasible,
            "fps": plan.fps,
        })
    return out


def sweep_report(out_dir, resolution: int = 224) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = alpha_sweep(resolution)
    paths = [write_csv(
        out / "alpha_sweep.csv",
        list(rows[0].keys()),
        [[round(v, 4) if isinstance(v, float) else v for v in r.values()]
         for r in rows])]

    alphas = [r["alpha"] for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    axes[0].plot(alphas, [r["params_mbit"] for r in rows], "o-")
    axes[0].set_xlabel("width multiplier")
    axes[0].set_ylabel("params (Mbit)")
    axes[1].plot(alphas, [r["ops_m"] for r in rows], "o-", color="tab:orange")
    axes[1].set_xlabel("width multiplier")
    axes[1].set_ylabel("ops (M)")
    axes[2].axhline(1.0, color="red", ls="--", lw=1)
    axes[2].plot(alphas, [r["dsp_utilization"] for r in rows], "o-",
                 label="dsp")
    axes[2].plot(alphas, [r["lut_utilization"] for r in rows], "s-",
                 label="lut")
    axes[2].plot(alphas, [r["bram_utilization"] for r in rows], "^-",
                 label="bram")
    axes[2].set_xlabel("width multiplier")
    axes[2].set_ylabel("utilization")
    axes[2].legend(fontsize=8)
    fig.tight_layout()
    p = out / "alpha_sweep.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)
    return paths


def plan_report(qnet: QNetModel, plan: soc.HardwarePlan, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    rows = [[c.name, ",".join(map(str, c.blocks)), len(c.slots),
             c.lanes(), c.dsp_lanes(), c.buffer_bits()] for c in plan.cus]
    paths.append(write_csv(out / "compute_units.csv",
                           ["cu", "blocks", "slots", "lanes", "dsp_lanes",
                            "buffer_bits"], rows))

    rows = [[i, inv.cu, ",".join(map(str, inv.blocks)), inv.fill_cycles,
             inv.cycles] for i, inv in enumerate(plan.schedule)]
    paths.append(write_csv(out / "schedule.csv",
                           ["invocation", "cu", "blocks", "fill_cycles",
                            "cycles"], rows))

    r = plan.resources
    paths.append(write_csv(
        out / "resources.csv",
        ["device", "dsp", "dsp_utilization", "bram_bits",
         "bram_utilization", "lut", "lut_utilization", "feasible",
         "total_cycles", "fps"],
        [[plan.device.name, r.dsp, round(r.dsp_utilization, 4), r.bram_bits,
          round(r.bram_utilization, 4), r.lut, round(r.lut_utilization, 4),
          r.feasible, plan.total_cycles, round(plan.fps, 2)]]))

    tr_f = runtime.trace_transactions(qnet, plan, fused=True)
    tr_u = runtime.trace_transactions(qnet, plan, fused=False)
    rows = [[t.invocation, t.cu, ",".join(map(str, t.blocks)), t.burst_bytes,
             t.stream_in_bytes, t.stream_out_bytes,
             u.stream_in_bytes, u.stream_out_bytes]
            for t, u in zip(tr_f, tr_u)]
    paths.append(write_csv(
        out / "transactions.csv",
        ["invocation", "cu", "blocks", "burst_bytes", "fused_in_bytes",
         "fused_out_bytes", "unfused_in_bytes", "unfused_out_bytes"], rows))

    fig, axes = plt.subplots(1, 2, figsize=(11, 3.5))
    idx = np.arange(len(plan.schedule))
    axes[0].bar(idx, [inv.cycles for inv in plan.schedule],
                color="tab:blue")
    axes[0].set_xlabel("invocation")
    axes[0].set_ylabel("cycles")
    axes[0].set_title("schedule")
    fused = [t.stream_in_bytes + t.stream_out_bytes for t in tr_f]
    unfused = [t.stream_in_bytes + t.stream_out_bytes for t in tr_u]
    axes[1].bar(idx - 0.2, fused, width=0.4, label="fused")
    axes[1].bar(idx + 0.2, unfused, width=0.4, label="unfused")
    axes[1].set_xlabel("invocation")
    axes[1].set_ylabel("stream bytes")
    axes[1].set_title("memory traffic")
    axes[1].legend(fontsize=8)
    fig.tight_layout()
    p = out / "plan.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)
    return paths


def full_report(qnet: QNetModel, plan: soc.HardwarePlan, out_dir,
                resolution: int = 224) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [write_csv(out / "model.csv", MODEL_HEADER,
                       model_rows([qnet.graph]))]
    paths += plan_report(qnet, plan, out)
    paths += sweep_report(out, resolution)
    perf = runtime.estimate_performance(qnet, plan)
    paths.append(write_csv(out / "performance.csv",
                           list(perf.keys()),
                           [[round(v, 4) if isinstance(v, float) else v
                             for v in perf.values()]]))
    return paths
