"""Numerical spectral theory of random block-Jacobi operators on the half-strip."""

from .model import (
    OperatorModel,
    PotentialSample,
    PotentialSpec,
    SummabilityWarning,
    build_model,
    fold_full_line,
    restrict,
    sample_potential,
)
from .channels import (
    BandStructure,
    Channel,
    ChannelError,
    ChannelSplit,
    GapEstimate,
    band_structure,
    channel_split,
    classify_channels,
    spectral_gap,
)
from .transfer import (
    AdmissibilityError,
    BoundaryData,
    SingularSolveError,
    TransferMatrix,
    boundary_data,
    conjugated_step,
    transfer_from_boundary,
    transfer_product,
    transfer_single,
    truncate_potential,
)
from .schur import (
    HeadSteps,
    RankDeficientError,
    RankDiagnostic,
    SchurState,
    construct_uy,
    find_rank_deficiencies,
    head_steps,
    rank_matrix,
    rank_scan,
    schur_init,
    schur_run,
    schur_step,
    solve_uy,
)
from .spectral import (
    ACReport,
    DensityEstimate,
    OracleDensity,
    RootVector,
    ac_criterion,
    density_curves,
    density_estimate,
    truncation_spectral_oracle,
)
from .montecarlo import BoundReport, EnsembleConfig, EnsembleResult, ensemble_run, seed_plan

__version__ = "0.1.0"

__all__ = [
    "OperatorModel",
    "PotentialSample",
    "PotentialSpec",
    "SummabilityWarning",
    "build_model",
    "fold_full_line",
    "restrict",
    "sample_potential",
    "BandStructure",
    "Channel",
    "ChannelError",
    "ChannelSplit",
    "GapEstimate",
    "band_structure",
    "channel_split",
    "classify_channels",
    "spectral_gap",
    "AdmissibilityError",
    "BoundaryData",
    "SingularSolveError",
    "TransferMatrix",
    "boundary_data",
    "conjugated_step",
    "transfer_from_boundary",
    "transfer_product",
    "transfer_single",
    "truncate_potential",
    "HeadSteps",
    "RankDeficientError",
    "RankDiagnostic",
    "SchurState",
    "construct_uy",
    "find_rank_deficiencies",
    "head_steps",
    "rank_matrix",
    "rank_scan",
    "schur_init",
    "schur_run",
    "schur_step",
    "solve_uy",
    "ACReport",
    "DensityEstimate",
    "OracleDensity",
    "RootVector",
    "ac_criterion",
    "density_curves",
    "density_estimate",
    "truncation_spectral_oracle",
    "BoundReport",
    "EnsembleConfig",
    "EnsembleResult",
    "ensemble_run",
    "seed_plan",
]
