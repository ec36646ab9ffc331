"""
Does the meta step and dynamic pruning pay off?
================================================

Compare the full method against plain mutual distillation with a frozen random
mask of the same sparsity, at dim 64 / 100 epochs over several seeds. Each
full-method run takes a few minutes on one core; pass a smaller seed count on
the command line to go faster, e.g. ``python desk_ablation.py 1``.
"""
import sys

from metasd.experiment import is_decreasing, run_ablation, window_means

seeds = range(int(sys.argv[1]) if len(sys.argv) > 1 else 5)


def progress(run):
    print(f"{run.variant:14s} seed {run.seed}  teacher {run.teacher_mrr:.4f}  "
          f"student {run.student_mrr:.4f}  ({run.seconds:.0f}s)", flush=True)


result = run_ablation(variants=("metasd", "wo-prune-meta"), seeds=seeds, progress=progress)

###############################################################################
# Median valid MRR per variant, and whether training CE fell in every
# 10-epoch window.

for variant in ("metasd", "wo-prune-meta"):
    runs = result.by_variant(variant)
    smooth = all(is_decreasing(window_means(r.student_ce, 10)) for r in runs)
    print(f"{variant:14s} student {result.median(variant):.4f}  "
          f"teacher {result.median(variant, 'teacher_mrr'):.4f}  smooth student CE: {smooth}")
ratio = result.median("metasd") / result.median("metasd", "teacher_mrr")
print(f"student / teacher MRR: {ratio:.3f}")
