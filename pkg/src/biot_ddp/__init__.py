"""Dual-primal substructured solver for the three-field consolidation system."""

from .decomposition import (
    DofClassification,
    InternalError,
    JumpOperator,
    RestrictionSet,
    ScalingWeights,
    SubdomainPartition,
    build_jump,
    build_restrictions,
    build_scalings,
    classify_dofs,
    partition,
    recover_nodal,
    transform_system,
)
from .harness import (
    ExperimentConfig,
    Pipeline,
    RunResult,
    build_pipeline,
    fit_polylog,
    oracle_solution,
    run_case,
    run_sweep,
    write_csv,
    write_json,
)
from .krylov import PcgConfig, PcgResult, SpdViolationError, filter_spectrum, pcg, ritz_values
from .mesh_fem import (
    BlockSystem,
    BoundarySpec,
    ConfigurationError,
    FeSpaceSet,
    LoadSpec,
    MaterialDomainError,
    MaterialField,
    StructuredMesh,
    assemble_blocks,
    build_mesh,
    build_spaces,
    check_saddle_inequalities,
    derive_lame,
)
from .preconditioner import BlockPreconditioner, build_preconditioner
from .reduced_system import ReducedSystem, build_reduced_system

__all__ = [
    "BlockPreconditioner",
    "BlockSystem",
    "BoundarySpec",
    "ConfigurationError",
    "DofClassification",
    "ExperimentConfig",
    "FeSpaceSet",
    "InternalError",
    "JumpOperator",
    "LoadSpec",
    "MaterialDomainError",
    "MaterialField",
    "PcgConfig",
    "PcgResult",
    "Pipeline",
    "ReducedSystem",
    "RestrictionSet",
    "RunResult",
    "ScalingWeights",
    "SpdViolationError",
    "StructuredMesh",
    "SubdomainPartition",
    "assemble_blocks",
    "build_jump",
    "build_mesh",
    "build_pipeline",
    "build_preconditioner",
    "build_reduced_system",
    "build_restrictions",
    "build_scalings",
    "build_spaces",
    "check_saddle_inequalities",
    "classify_dofs",
    "derive_lame",
    "filter_spectrum",
    "fit_polylog",
    "oracle_solution",
    "partition",
    "pcg",
    "recover_nodal",
    "ritz_values",
    "run_case",
    "run_sweep",
    "transform_system",
    "write_csv",
    "write_json",
]
