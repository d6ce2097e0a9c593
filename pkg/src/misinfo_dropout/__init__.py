"""Class-level dropout control of true/false content cascades on block models."""

from .cascade import (CascadeRecord, CascadeStats, SirState, cascade_statistics, read_jsonl, run_cascade,
                      run_cascade_on_instance, sir_step, write_jsonl)
from .controller import (ControlConfig, ControlledRunRecord, PairedUniformObserver, SbmObserver,
                         TreeReplayObserver, run_algorithm1, run_algorithm2, run_controlled)
from .dropout import (DropoutMatrix, InfeasibleError, SolverReport, StepCounts, apply_dropout,
                      expected_next_infected_asymptotic, expected_next_infected_exact,
                      expected_next_infected_linear, feasibility_convex, feasibility_lp, lemma1_bound,
                      solve_convex, solve_lp, solve_soft)
from .experiments import (GridRange, SweepResult, SyntheticConfig, bound_check, emit_outputs, generate_dataset,
                          run_dataset_pipeline, run_sweep, synthetic_matrices)
from .fit import (ClassTransfer, ContentModelPair, InsufficientDataError, UserParams, build_block_matrices,
                  estimate_block_matrices, merge_small_partitions)
from .graph import DirectedGraphInstance, Partition, SbmModel, edge_prob, sample_instance

__version__ = "0.1.0"
