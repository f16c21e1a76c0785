"""Safety verification for feed-forward ReLU networks.

Symbolic linear relaxation bounds every ReLU; overestimated nodes are split
and the resulting linear systems are discharged with a simplex solver.
"""

from .engine import EngineConfig, RefinementTask, Verdict, VerdictReport, refine_output_range, validate_counterexample, verify
from .interval import BoundPair, ConcreteInterval, InputBox, LinearExpression, concrete_bounds, evaluate, linear_map, outward_round
from .lp import Constraint, LinearProgram, LpOutcome, LpStatus, Relation, SolverFailure, feasible, solve
from .network import Conv, Dense, Network, Normalization, Relu, forward, load_network, parse_nnet, serialize_nnet
from .oracle import exact_output_range
from .properties import (
    BoxRegion,
    Classification,
    L1Region,
    LInfRegion,
    LinearSafe,
    RegressionBand,
    SegmentRegion,
    brightness_region,
    build_violation_systems,
    contrast_region,
    parse_property,
    region_to_box,
)
from .propagation import (
    NodeStatus,
    PropagationTrace,
    bisect_region,
    conv_map,
    interval_gradient,
    nia_forward,
    relax_relu,
    sia_forward,
    slr_forward,
)

__version__ = "0.1.0"
