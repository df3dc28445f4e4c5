"""Run the saturation scenarios and write CSV + SVG for each.

    python scripts/reproduce_figures.py [--out results]
"""
import argparse
from pathlib import Path

from pemgrid import harness

RUNS = ["fig4_agc_saturation", "fig4_agc_saturation_ideal", "fig5_mpc"]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="results")
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    traces = {}
    for name in RUNS:
        tr = harness.run_scenario(name, seed=args.seed)
        harness.export(tr, out / f"{name}.csv", out / f"{name}.svg")
        traces[name] = tr
        m = harness.trace_metrics(tr)
        sat = m["vpp1_saturation_s"]
        print(f"{name:28s} battery full at {'never' if sat is None else f'{sat / 60:.1f} min'}, "
              f"peak |df| {m['peak_abs_df_hz']:.4f} Hz")

    a, b = traces["fig4_agc_saturation"], traces["fig5_mpc"]
    n = min(len(a), len(b))
    a = harness.SimTrace(a.columns, a.data[:n], a.meta)
    b = harness.SimTrace(b.columns, b.data[:n], b.meta)
    print(f"\n{'metric (AGC -> MPC)':24s} {'agc':>10s} {'mpc':>10s}")
    for k, (va, vb, _) in harness.compare_runs(a, b).items():
        fmt = lambda v: "-" if v is None else f"{v:.4g}"
        print(f"{k:24s} {fmt(va):>10s} {fmt(vb):>10s}")


if __name__ == "__main__":
    main()
