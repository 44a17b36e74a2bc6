"""Domain-aware neural-ODE system identification for a torpedo-style AUV.

The package rolls a small stack of hand-written numpy pieces into one
reproducible pipeline: a ground-truth vehicle plant, randomized excitation
and dataset generation, an exact reverse-mode kernel for Euler-unrolled
rollouts, six gray-to-black model variants, curriculum training with
Adam-W, and a fixed evaluation protocol with outlier-fenced aggregation.
"""

__version__ = "0.1.0"

from .plant import TruthParams, SingularityError, integrate_truth, output_map, truth_rhs
from .excitation import build_dataset, gen_input_trajectory, sample_initial_condition
from .models import VARIANTS, build_model
from .train import train_model, run_experiment_grid
from .evaluate import build_test_set, evaluate_instance, aggregate_report

__all__ = [
    "TruthParams",
    "SingularityError",
    "integrate_truth",
    "output_map",
    "truth_rhs",
    "build_dataset",
    "gen_input_trajectory",
    "sample_initial_condition",
    "VARIANTS",
    "build_model",
    "train_model",
    "run_experiment_grid",
    "build_test_set",
    "evaluate_instance",
    "aggregate_report",
    "__version__",
]
