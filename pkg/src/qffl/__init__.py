"""Fair federated optimization (q-FFL) over linear models.

Submodules: ``rngdet`` (seeded streams), ``data`` (federated datasets),
``models`` (softmax / linear SVM), ``objective`` (q-fair objective and
curvature bound), ``solvers`` (FedAvg, q-FedSGD, q-FedAvg, AFL),
``metrics`` (accuracy-distribution statistics), ``harness`` (sweeps) and
``cli``.
"""

from .data import FederatedDataset, SyntheticSpec, generate_synthetic, load_csv_manifest, split_dataset
from .metrics import distribution_stats
from .models import ModelSpec
from .objective import lipschitz_estimate, qffl_value
from .solvers import RunResult, SolverConfig, run

__all__ = [
    "FederatedDataset", "SyntheticSpec", "generate_synthetic", "load_csv_manifest", "split_dataset",
    "distribution_stats", "ModelSpec", "lipschitz_estimate", "qffl_value", "RunResult", "SolverConfig", "run",
]
__version__ = "0.1.0"
