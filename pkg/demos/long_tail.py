"""
Rare relations and the sparse export
=====================================

Most relations of the toy graph are rare. After a short run, break the test
metrics down into rare-relation triples and write the student in the sparse
format that stores only its surviving weights.
"""
import tempfile
from pathlib import Path

from metasd import load_dataset, long_tail_report, train, TrainConfig
from metasd.graph import build_filter_index, relation_counts
from metasd.pruning import export_sparse, load_sparse
from metasd.training import student_params

data = load_dataset("toy150")
counts = relation_counts(data.train, data.relation_count)
print("training triples per relation, most to least frequent:")
print(sorted(counts.values(), reverse=True))

config = TrainConfig(dim=32, gamma=0.9, epochs=15, batch_size=512, quiz_size=200,
                     n3_weight=0.02, eval_every=0, seed=1)
splits = data.splits(config.quiz_size, config.seed)
state = train(splits, config)

###############################################################################
# Relations with fewer than 200 training triples count as long-tail here.

index = build_filter_index(splits)
report = long_tail_report(state.params, state.mask, splits, index, threshold=200)
print(f"{len(report['relations'])} long-tail relations")
for view in ("teacher", "student"):
    print(report[view].summary())

###############################################################################
# The export keeps values and flat positions of the surviving 10%.

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "student.msds"
    stored = export_sparse(student_params(state), state.mask, path, state.config)
    params, mask, _ = load_sparse(path)
    print(f"{stored} of {state.params.size} weights stored, "
          f"{path.stat().st_size} bytes on disk")
