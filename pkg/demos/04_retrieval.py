"""Content-based retrieval with the pretrained encoder.

Loads the checkpoint from demo 03 (run that first), builds an exact
k-NN index over the archive, then compares trained retrieval against an
untrained encoder of identical architecture. Ends with one worked query.
"""

import os
import sys

from featpred.config import archive_from_config, build_run_config
from featpred.model import model_for_archive, pooled_embedding
from featpred.retrieval import build_index, evaluate_archive, query
from featpred.training import load_checkpoint

CKPT = os.path.join("demo_out", "pretrain", "final.npz")
if not os.path.exists(CKPT):
    sys.exit("run demos/03_pretraining.py first (writes demo_out/pretrain)")

state = load_checkpoint(CKPT)
run = build_run_config(state.extra_meta)
records, _, eval_recs = archive_from_config(run.data, run.seed)
k = run.retrieval.k

trained_idx = build_index(state.model, records, metric=run.retrieval.metric)
trained = evaluate_archive(state.model, trained_idx, eval_recs, k=k)

# same architecture, fresh weights: the control every claim is judged against
control = model_for_archive(run.encoder, run.predictor, run.data.side,
                            seed=run.seed)
control_idx = build_index(control, records, metric=run.retrieval.metric)
untrained = evaluate_archive(control, control_idx, eval_recs, k=k)

print(f"archive {len(records)} images, eval split {len(eval_recs)}, k={k}")
print(f"mean F1@{k}  trained:   {trained['mean_f1']:.4f}")
print(f"mean F1@{k}  untrained: {untrained['mean_f1']:.4f}")

probe = eval_recs[0]
vec = pooled_embedding(state.model, probe.image, which=run.retrieval.which)
neighbors = query(trained_idx, vec, k, exclude_id=probe.id)
lab = {r.id: sorted(r.labels)[0] for r in records}
print(f"\nquery {probe.id} ({sorted(probe.labels)[0]}), "
      f"top {k} neighbors:")
for nid, dist in neighbors:
    mark = "ok " if lab[nid] in probe.labels else "MISS"
    print(f"  {mark} {nid}  {lab[nid]}  dist={dist:.4f}")
