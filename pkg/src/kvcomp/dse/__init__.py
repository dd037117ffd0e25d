"""Design-space exploration: pruning thresholds by NSGA-II, then bit-widths."""

from .evaluator import (
    DEFAULT_VALUE_SCALE,
    EvaluatorSpec,
    avg_pruning_ratio,
    causal_attention,
    config_to_genome,
    evaluate_reconstruction,
    genome_to_config,
    make_evaluator,
    pruning_objectives,
    reconstructed_kv,
    run_external_evaluator,
    synthetic_queries,
)
from .nsga2 import (
    Individual,
    NsgaRun,
    assign_rank_and_crowding,
    crowding_distance,
    dominates,
    fast_non_dominated_sort,
    hypervolume_2d,
    nsga2,
    pareto_front,
    random_search,
    run_nsga2,
    search_space_size,
)
from .stage2 import Stage2Result, layer_spreads, stage2_bitwidth_search

DEFAULT_OPTIONS = (0, 1, 2, 3, 4)
