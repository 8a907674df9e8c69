"""Channel-sparse convolutional network engine and experiment harness."""

from .connectivity import (
    ArchSpec, Conv, FC, Flatten, MaxPool, SoftmaxXent,
    ConnectivityMask, TransformSpec,
    full_mask, sparse_random_mask, densify, depth_multiplier_arch,
    sparsify_arch, apply_transform, match_budget, validate_aliveness,
    conv_param_count, arch_to_json, arch_from_json, mask_to_json, mask_from_json,
    DEPTH_MULTIPLIER, SPARSE_RANDOM, HYBRID,
)
from .data import Dataset, SynthSpec, load_idx, synth_dataset
from .equivalence import (
    EquivalenceReport, equivalence_class_size, inverse_permutations,
    permute_network, random_permutation_set, verify_equivalence,
)
from .errors import (
    CheckpointError, ConfigError, DataFormatError, ShapeError, TrainingDiverged,
)
from .network import Network, CostReport, cost_report, load_checkpoint, save_checkpoint
from .training import (
    DensifySchedule, EvalPoint, RunRecord, TrainConfig, Trainer,
    apply_densification, evaluate, run_training, sgd_update, target_density,
)

__version__ = "0.1.0"
