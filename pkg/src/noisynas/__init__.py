"""Differentiable architecture search under label noise, at desk scale:
a numpy autodiff core, a cell search space with noise-injecting
convolution operators, a variational-bottleneck training objective,
bilevel search dynamics, label-noise models, and analysis tooling."""

from .tensor import Tensor, ParamStore, no_grad
from .operators import OPERATOR_KINDS, NoiseInjector, SiteStats
from .objective import LossReport, kl_diag_gaussian, nas_loss
from .search_space import (
    AlphaParams,
    CellSpec,
    Genotype,
    Supernet,
    build_discrete_network,
    derive_genotype,
    genotype_from_json,
    genotype_to_json,
)
from .bilevel import (
    SearchConfig,
    arch_grad_first_order,
    arch_grad_second_order,
    cosine_lr,
    evaluation_phase,
    search_phase,
)
from .data import (
    BatchStream,
    NoiseSpec,
    NoisyDataset,
    corrupt_asymmetric,
    corrupt_symmetric,
    generate_image_dataset,
    generate_toy_dataset,
    load_dataset_file,
    split,
)
from .analysis import (
    GradNormRecord,
    MIRecord,
    OpHistogram,
    bin_activations,
    grad_norm_split,
    mi_trajectory,
    mutual_information,
    op_histogram,
)
from .mlp import MLPTrainer, ToyMLP

__version__ = "0.1.0"
