"""Synthetic artifacts, poisoned datasets and Clever-Hans sensitivity studies."""

from .artifacts import (
    KINDS,
    ArtifactMask,
    channel_stats,
    inject,
    make_artifact,
    relevance_mass_fraction,
    remove,
    rounded_corner_support,
)
from .dataset import (
    SHAPES,
    GeneratorParams,
    PoisonedDataset,
    build_poisoned_dataset,
    generate_shapes,
)
from .studies import (
    ABLATION_HEADER,
    AblationResult,
    UnhansRecord,
    addition_study,
    blind_to_mask,
    read_ablation_csv,
    removal_study,
    train_blind_control,
    unhans_experiment,
    write_ablation_csv,
    write_unhans_csv,
)
