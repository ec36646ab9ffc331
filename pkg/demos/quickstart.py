"""
Distilling a pruned student on a toy knowledge graph
=====================================================

Train a dense ComplEx teacher and its 90%-pruned student together on the
bundled 150-entity graph, then score both with filtered MRR / Hits@k.
"""

from metasd import evaluate, load_dataset, train, TrainConfig
from metasd.graph import build_filter_index
from metasd.training import student_params

###############################################################################
# The bundled graph has 150 entities, 40 relations and about 5k training
# triples. ``splits`` adds reciprocal relations and carves a fixed quiz set
# out of the training triples for the meta step.

data = load_dataset("toy150")
config = TrainConfig(backbone="ComplEx", dim=32, gamma=0.9, epochs=20, batch_size=512,
                     quiz_size=200, n3_weight=0.02, eval_every=5, seed=0)
splits = data.splits(config.quiz_size, config.seed)
print(f"{data.entity_count} entities, {data.relation_count} relations, "
      f"{len(splits.train)} training triples (with reciprocals)")

###############################################################################
# Training prints nothing by itself; the callback shows the per-epoch record.

def show(state, record):
    line = (f"epoch {record['epoch']:3d}  student ce {record['student']['ce']:.3f}  "
            f"teacher ce {record['teacher']['ce']:.3f}  flips {record['mask_flips']}")
    if "valid" in record:
        line += (f"  valid mrr S {record['valid']['student']['mrr']:.3f} "
                 f"T {record['valid']['teacher']['mrr']:.3f}")
    print(line)


state = train(splits, config, on_epoch=show)

###############################################################################
# The student is the teacher seen through the mask: only 10% of the weights
# survive.

index = build_filter_index(splits)
teacher = evaluate(state.params, None, splits.test, index, split="test", view="teacher")
student = evaluate(student_params(state), state.mask, splits.test, index, split="test",
                   view="student")
print(teacher.summary())
print(student.summary())
print(f"student keeps {student.effective_params} of {state.params.size} weights")
