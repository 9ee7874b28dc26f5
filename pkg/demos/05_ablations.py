"""Sweep one design axis and rank the settings by retrieval quality.

Runs the ablation harness on the masking-ratio axis at reduced scale:
three ratios, two trials each, every trial a full train-then-evaluate
cycle with its own seed. Writes the ranked CSV the CLI would produce.
"""

import os

from featpred.ablation import AblationSpec, run_ablation
from featpred.config import (archive_from_config, build_run_config,
                             default_run_config, run_config_to_dict)

OUT = os.path.join("demo_out", "ablation")

doc = run_config_to_dict(default_run_config())
doc["data"]["n_images"] = 160
doc["data"]["n_eval"] = 32
doc["train"]["epochs"] = 20
doc["train"]["warmup_epochs"] = 3
base = build_run_config(doc)

records, _, _ = archive_from_config(base.data, base.seed)
spec = AblationSpec(axis="masking_ratio", values=(0.25, 0.5, 0.75),
                    base=base, trials=2)

print(f"axis {spec.axis}, values {list(spec.values)}, "
      f"{spec.trials} trials each")
result = run_ablation(spec, records, out_dir=OUT, quiet=True)

print("\nranked results (higher mean F1 first):")
for row in result.ranked():
    print(f"  ratio {row.setting}: mean_f1={row.mean_f1:.4f} "
          f"std={row.std:.4f} over {row.n_trials} trials")
for f in result.failures:
    print(f"  FAILED {f['setting']} trial {f['trial']}: {f['error']}")
print(f"\ntable written to {os.path.join(OUT, f'ablation_{spec.axis}.csv')}")
