"""Compressed knowledge-graph embeddings by dynamic magnitude pruning and
meta-learned mutual self-distillation.

Submodules:

- ``graph``: triple files, vocabularies, reciprocal augmentation, filter
  indexes, quiz sampling, long-tail selection, batching.
- ``models``: ComplEx, CP and RESCAL scoring with analytic gradients.
- ``objectives``: cross-entropy, KL distillation and auxiliary losses.
- ``pruning``: magnitude masks and the sparse export format.
- ``training``: the virtual / meta / actual training loop and Adagrad.
- ``checkpoint``: binary checkpoints.
- ``evaluation``: filtered MRR and Hits@k, long-tail reports.
- ``synthetic``: toy graphs with planted structure.
- ``experiment``: desk-scale ablation runs.
- ``cli``: the ``metasd`` command (``python -m metasd``).
"""

__version__ = "0.1.0"

from .graph import (Dataset, FilterIndex, SplitData, Vocab, augment_reciprocal, batches,
                    build_filter_index, load_dataset, load_triples, long_tail_relations,
                    sample_quiz)
from .models import (ParamStore, SparseGrad, Triple, backward_tails, init_params,
                     parameter_count, score_all_relations, score_all_tails, score_triple)
from .objectives import (LossConfig, LossValue, kl_div, n3_reg, softmax_ce, student_loss,
                         teacher_loss)
from .pruning import (PruneMask, compute_mask, export_sparse, load_sparse, random_mask,
                      refresh_policy, sparsity_stats)
from .training import (AdagradState, TrainConfig, TrainState, actual_train_step,
                       adagrad_update, meta_train_step, train, virtual_train_step)
from .checkpoint import load_checkpoint, save_checkpoint
from .evaluation import EvalReport, evaluate, filtered_rank, long_tail_report
from .synthetic import make_synthetic_kg
