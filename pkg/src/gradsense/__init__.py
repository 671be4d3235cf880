"""Gradient-attribution value signals on a differentiable surrogate weather model.

Modules cover the pipeline end to end: synthetic gridded data (grid, synth),
surrogate models with exact reverse-mode gradients (model), the attribution
proxy family (attribution), counterfactual reference utilities (ablation),
statistics (metrics), selection/payment analytics (incentive), adversarial
scenarios and detectors (gaming), and the experiment runner (runner, cli).
"""

__version__ = "0.1.0"

from .grid import (
    Climatology,
    FieldTensor,
    GridConfig,
    GridSpec,
    StationGrid,
    TargetSpec,
    haversine,
    make_grid,
    make_station_grid,
    make_target,
)
from .synth import synth_fields
from .model import (
    ForecastOutcome,
    make_desk_model,
    make_linear_model,
    make_truth,
    model_from_config,
)
from .attribution import (
    AttributionConfig,
    AttributionMap,
    attribute,
    gradient_times_input,
    integrated_gradients,
    persistence_baseline,
    spatial_importance,
    time_average,
    vanilla_gradient,
    variable_importance,
)
from .ablation import (
    PerturbationSpec,
    global_ablation,
    joint_ablation,
    perturb_patch,
    spatial_utility,
)
from .incentive import (
    captured_utility,
    decile_calibration,
    overpayment,
    payment,
    payment_stability,
    select,
    shrinkage_fit,
)
from .gaming import AttackScenario, apply_attack, run_gaming_experiment
from .runner import ExperimentConfig, load_config, run_full, save_config
