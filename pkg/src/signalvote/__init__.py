"""Traffic signal control with sampling-and-voting agent ensembles."""

from .ensemble import EnsembleController, VoteRecord, majority_vote, sample_actions
from .harness import RunConfig, RunResult, compare, run, train_mplight
from .metrics import MetricsAccumulator, MetricsReport
from .policies import FixedTimePolicy, MaxPressurePolicy, fixed_decide, maxpressure_decide
from .scenario import SyntheticGridSpec, generate_grid, load_scenario, validate
from .sim import ObservationState, Phase, RoadNetwork, SimConfig, TrafficEnv

__version__ = "0.1.0"
