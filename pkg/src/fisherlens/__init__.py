"""Desk-scale lab for probing how classifier accuracy, output-divergence
geometry, and adversarial robustness co-evolve during training."""

__version__ = "0.1.0"

from .attacks import AttackConfig, AttackResult, cw_loss, fgsm, fisher_eig_attack, pgd
from .data import (Dataset, ProtoSpec, StripeSpec, SynthSpec, generate,
                   load_idx, make_proto_dataset, make_stripe_dataset, split)
from .divergences import PairSamplingPlan, cckl, cross_entropy, js, kl, lin_lower_bound
from .errors import (ConfigError, ContractError, DegenerateInputError,
                     DimensionError, FormatError, NumericError, StateError)
from .fisher import (Disentanglement, FisherInfo, TaylorProfile,
                     adversarial_divergence, cramer_rao_ratio, disentangle,
                     fisher_at, fisher_fro_norm, fisher_spectral, taylor_profile)
from .network import (Architecture, Network, forward, init_network,
                      input_jacobian_logp, load_checkpoint, save_checkpoint)
from .config import ResolvedConfig, load_config
from .harness import (build_dataset, cmd_eval, cmd_plot, cmd_sweep_complexity,
                      cmd_train, evaluate_checkpoint, read_metrics_csv)
from .plots import render
from .training import (EvalPlan, MetricRecord, TrainConfig, TrainResult,
                       natural_loss, pgdat_loss, run_training, sgd_step, trades_loss)

__all__ = [
    "__version__",
    "AttackConfig", "AttackResult", "cw_loss", "fgsm", "fisher_eig_attack", "pgd",
    "Dataset", "ProtoSpec", "StripeSpec", "SynthSpec", "generate", "load_idx",
    "make_proto_dataset", "make_stripe_dataset", "split",
    "PairSamplingPlan", "cckl", "cross_entropy", "js", "kl", "lin_lower_bound",
    "ConfigError", "ContractError", "DegenerateInputError", "DimensionError",
    "FormatError", "NumericError", "StateError",
    "Disentanglement", "FisherInfo", "TaylorProfile", "adversarial_divergence",
    "cramer_rao_ratio", "disentangle", "fisher_at", "fisher_fro_norm",
    "fisher_spectral", "taylor_profile",
    "Architecture", "Network", "forward", "init_network", "input_jacobian_logp",
    "load_checkpoint", "save_checkpoint",
    "EvalPlan", "MetricRecord", "TrainConfig", "TrainResult", "natural_loss",
    "pgdat_loss", "run_training", "sgd_step", "trades_loss",
    "ResolvedConfig", "load_config",
    "build_dataset", "cmd_eval", "cmd_plot", "cmd_sweep_complexity",
    "cmd_train", "evaluate_checkpoint", "read_metrics_csv",
    "render",
]
