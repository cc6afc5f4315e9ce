"""Central-node selective inference."""

from .barrier import OptResult, barrier, solve_selection_opt
from .bundle import (
    LocalSummary,
    MatrixBundle,
    assemble_matrices,
    assemble_matrices_wr,
    reconstruct_randomization,
)
from .inference import (
    InferenceReport,
    approx_selective_loglik,
    baseline_infer,
    infer,
    selective_fisher,
    selective_mle,
)

__all__ = [
    "InferenceReport",
    "LocalSummary",
    "MatrixBundle",
    "OptResult",
    "approx_selective_loglik",
    "assemble_matrices",
    "assemble_matrices_wr",
    "barrier",
    "baseline_infer",
    "infer",
    "reconstruct_randomization",
    "selective_fisher",
    "selective_mle",
    "solve_selection_opt",
]
