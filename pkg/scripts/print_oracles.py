"""Recompute the reference values frozen into the test suite."""
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from oracles import (dc_flows, droop_settled_df_hz, tcl_duty_cycle,  # noqa: E402
                     tiny_dispatch_bruteforce)
from pemgrid.grid import bundled_network  # noqa: E402

best, cost = tiny_dispatch_bruteforce()
print(f"single-bus dispatch: p_ch = {best}, cost = {cost:.4f}")

print(f"settled df, 10 MW step on five_bus: {droop_settled_df_hz(bundled_network('five_bus'), 10.0):.9f} Hz")

lines = [(1, 2, 10.0), (1, 3, 8.0), (2, 3, 12.0), (2, 4, 10.0), (3, 4, 8.0), (4, 5, 5.0)]
inj = {1: 120.0, 2: -130.0, 3: 105.0, 4: -159.0, 5: 64.0}
print("five_bus flows (MW):", [round(f, 4) for f in dc_flows([1, 2, 3, 4, 5], lines, inj, 5)])

duty = tcl_duty_cycle(4.5, 0.29, 67.5, 20.0, 45.0, 55.0, 1 / 60, 300.0)
print(f"water-heater duty cycle, every request granted: {duty:.4f}")
