"""Warm-started differentiable architecture search with task-similarity
driven transfer.

The package searches cell-based architecture spaces with a first-order
bilevel loop, compresses them progressively into transfer architectures,
fingerprints tasks by the diagonal Fisher information of a shared probe
network, and warm-starts new searches from the most similar prior task at a
fraction of the from-scratch cost.
"""

from .autodiff import Graph, Tensor
from .cells import Alpha, CellSpec
from .distance import SimilarityMatrix, build_similarity_matrix, d_sym
from .evaluation import GenotypeClassifier, retrain_genotype
from .fim import (
    FimEstimatorConfig,
    TaskEmbedder,
    TaskEmbedding,
    empirical_fim_diag,
    robust_fim_diag,
)
from .genotype import Genotype, derive_genotype, discretize, export_dot, refine_skip_connects
from .network import NetworkSpec, SearchNetwork
from .optim import Adam, AdamConfig, Sgd, SgdConfig
from .probe import ProbeNetwork, fit_head
from .progressive import (
    Stage,
    StagePlan,
    TransferArchitecture,
    TransferArchitectureSearch,
    prune_ops,
    tas_meta,
    tas_single,
)
from .search import DartsConfig, DartsSearch, SearchReport, SplitData, search
from .taskgen import TaskBundle, generate_task, load_bundle, save_bundle, stratified_split
from .warmstart import (
    ArchiveEntry,
    WarmStartConfig,
    dropout_sweep,
    report_savings,
    select_transfer,
    warm_start_search,
)

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "AdamConfig",
    "Alpha",
    "ArchiveEntry",
    "CellSpec",
    "DartsConfig",
    "DartsSearch",
    "FimEstimatorConfig",
    "Genotype",
    "GenotypeClassifier",
    "Graph",
    "NetworkSpec",
    "ProbeNetwork",
    "SearchNetwork",
    "SearchReport",
    "Sgd",
    "SgdConfig",
    "SimilarityMatrix",
    "SplitData",
    "Stage",
    "StagePlan",
    "TaskBundle",
    "TaskEmbedder",
    "TaskEmbedding",
    "Tensor",
    "TransferArchitecture",
    "TransferArchitectureSearch",
    "WarmStartConfig",
    "build_similarity_matrix",
    "d_sym",
    "derive_genotype",
    "discretize",
    "dropout_sweep",
    "empirical_fim_diag",
    "export_dot",
    "fit_head",
    "generate_task",
    "load_bundle",
    "prune_ops",
    "refine_skip_connects",
    "report_savings",
    "retrain_genotype",
    "robust_fim_diag",
    "save_bundle",
    "search",
    "select_transfer",
    "stratified_split",
    "tas_meta",
    "tas_single",
    "warm_start_search",
]
