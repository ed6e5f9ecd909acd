"""Forward-looking dispatch for two-seat ride-pooling: prediction, matching and simulation."""

from .domain import Mode, Order, PairingConfig, Vehicle
from .network import ODPair, RoadNetwork, grid_network, load_network
from .prediction import DemandProfile, PredictionTables, build_state_space, solve_fixed_point
from .simulator import SimConfig, generate_demand, run
from .strategies import Strategy, UtilityContext, dispatch_round, solve_assignment

__all__ = [
    "DemandProfile", "Mode", "ODPair", "Order", "PairingConfig", "PredictionTables", "RoadNetwork",
    "SimConfig", "Strategy", "UtilityContext", "Vehicle", "build_state_space", "dispatch_round",
    "generate_demand", "grid_network", "load_network", "run", "solve_assignment",
    "solve_fixed_point",
]
