"""Markov cohort models for cost-effectiveness analysis."""

from .analysis import StrategyTotals, efficiency_frontier, format_summary, icer, nmb
from .engine import RunResult, correct_counts, run_cohort, run_model
from .expr import EvalContext, eval_expression, parse_expression
from .lifetable import LifeTable, mortality_prob
from .model import C, ModelSpec, StateSpec, StrategySpec, TransitionSpec, expand_tunnels, transition_dot
from .modelfile import LoadedModel, load_model
from .params import ParameterSet, SurvivalDecl, build_parameter_set, evaluate_parameters, modify_parameter_set
from .survival import compute_surv, define_survival, km_estimate
from .uncertainty import (
    DsaSpec,
    PopulationTable,
    PsaSpec,
    ceac,
    evpi,
    export_psa,
    psa_summary,
    read_psa,
    run_dsa,
    run_psa,
    sample_psa,
    update_heterogeneity,
)

__version__ = "0.1.0"
