"""Class-incremental intent classification with multi-strategy rebalancing."""

__version__ = "0.1.0"

from .autodiff import Graph, backward, finite_diff_check, forward  # noqa: F401
from .data import (BenchmarkSchedule, Sample, build_schedule, load_jsonl,  # noqa: F401
                   synth_generate, synthetic_schedule)
from .encoder import Vocab, build_vocab, encode  # noqa: F401
from .engine import (ABLATION_VARIANTS, Hyperparams, ModelState, RunReport,  # noqa: F401
                     Strategy, evaluate, run_benchmark, run_step, strategy_preset)
from .losses import (ClassEmbeddings, LossWeights, cosine_probs, cross_entropy,  # noqa: F401
                     dot_scores, fkd_loss, icml_loss, kd_loss, total_loss)
from .memory import (ReplayMemory, class_prototype, random_select,  # noqa: F401
                     select_exemplars, shrink_memory)
