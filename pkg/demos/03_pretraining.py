"""Pretrain a small model and watch the anti-collapse machinery work.

Runs a reduced-scale version of the default recipe (fewer images and
epochs) and prints the loss decomposition plus collapse diagnostics as
training proceeds. Writes the checkpoint that demo 04 reuses.
"""

import os

import numpy as np

from featpred.config import (archive_from_config, build_run_config,
                             default_run_config, run_config_to_dict)
from featpred.model import model_for_archive, pooled_embeddings_batch
from featpred.training import collapse_monitor, fit

OUT = os.path.join("demo_out", "pretrain")

doc = run_config_to_dict(default_run_config())
doc["data"]["n_images"] = 160
doc["data"]["n_eval"] = 32
doc["train"]["epochs"] = 30
doc["train"]["warmup_epochs"] = 5
run = build_run_config(doc)

records, train_recs, _ = archive_from_config(run.data, run.seed)

print(f"{len(train_recs)} training images, {run.train.epochs} epochs, "
      f"batch {run.train.batch_size}")

images = np.stack([r.image for r in train_recs])
before = model_for_archive(run.encoder, run.predictor, run.data.side,
                           seed=run.seed)
mon0 = collapse_monitor(pooled_embeddings_batch(before, images))
print(f"untrained embeddings: mean_std={mon0['mean_std']:.4f} "
      f"eff_rank={mon0['eff_rank']:.1f}")

state = fit(run.encoder, run.predictor, run.train, train_recs,
            out_dir=OUT, quiet=True, extra_meta=run_config_to_dict(run))

# the history carries one row per step with the full loss decomposition
h = state.history
span = max(1, len(h) // 6)
print("\n step   total    L_pred   v        c        L_inv")
for row in h[::span]:
    print(f"{row['step']:5d}  {row['total']:8.3f} {row['L_pred']:8.3f} "
          f"{row['v']:8.4f} {row['c']:8.4f} {row['L_inv']:8.3f}")

mon1 = collapse_monitor(pooled_embeddings_batch(state.model, images))
print(f"\ntrained embeddings:   mean_std={mon1['mean_std']:.4f} "
      f"eff_rank={mon1['eff_rank']:.1f}")
print(f"checkpoint written to {os.path.join(OUT, 'final.npz')}")
