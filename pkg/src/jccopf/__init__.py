"""Joint chance-constrained OPF for PV curtailment with learned active sets."""

from jccopf.feeder import FeederModel, GridState, build_sensitivities, compute_voltages

__all__ = ["FeederModel", "GridState", "build_sensitivities", "compute_voltages"]
__version__ = "0.1.0"
