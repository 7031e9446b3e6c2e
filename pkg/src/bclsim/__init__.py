"""bclsim: layer-wise backdoor attacks and robust aggregation, simulated.

A small numpy laboratory for studying which layers of a neural network
carry a backdoor task in federated learning: substitution analysis to
identify backdoor-critical layers, layer-wise poisoning/flipping attacks
built on them, and the standard robust aggregation defenses to test
against (MultiKrum, FLAME, FLTrust, RLR, and friends).
"""

from .attacks import (AttackConfig, BCLayerReport, LsaAbort,
                      adaptive_layer_control, baseline_badnets,
                      compute_u_average, constraint_loss_train, craft_lf,
                      craft_lp, lsa_forward_rank, lsa_step1_train_pair,
                      lsa_step3_backward_select, random_lp_mask, run_lsa,
                      scale_update)
from .data import (FormatError, LabeledSet, PartitionPlan, PoisonSpec,
                   SyntheticSpec, build_poison_splits, dba_subtrigger,
                   embed_trigger, embed_trigger_batch, generate_synthetic,
                   load_dataset, load_idx_pair, partition, poison_testset,
                   stratified_subset)
from .defenses import (AggregationVerdict, DefenseConfig, agg_fedavg,
                       agg_flame, agg_fltrust, agg_layerwise_multikrum,
                       agg_multikrum, agg_rlr, aggregate, krum_scores)
from .federation import (ExperimentState, ExperimentSummary, FLConfig,
                         RoundRecord, build_state, compute_metrics,
                         run_experiment, run_round, select_clients)
from .layermap import (ArchitectureError, LayerEntry, LayerMap, SelectionMask,
                       average_layermaps, linear_combine, load_checkpoint,
                       save_checkpoint, substitute_layers)
from .models import Architecture, cnn5, get_architecture, mlp_small
from .train import TrainSpec, evaluate, train_local

__version__ = "0.1.0"
