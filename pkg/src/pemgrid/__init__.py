"""Two-area grid simulator with energy-aware VPP dispatch (AGC and MPC)."""
from .grid import GridModel, PtdfFlow, bundled_network, dc_power_flow, load_grid
from .harness import (ScenarioScript, SimTrace, compare_runs, load_scenario, run_scenario,
                      validate_scenario)
from .mpc import MpcConfig, MpcController
from .pem import Fleet, PemDeviceConfig
from .qp import QpProblem, solve

__version__ = "0.1.0"
