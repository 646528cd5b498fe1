"""Run the whole seven-stage pipeline on a small configuration.

Stages: corpus -> encoders -> base -> bank -> extractor -> xattn -> eval.
Each stage writes a manifest with a content hash; rerunning this script skips
everything that is already cached and intact.

Roughly a coffee break at these sizes on one CPU core. For the full desk run
use the CLI: `snapdiff run all --artifacts artifacts`.
"""

import json
import os

from snapdiff.config import make_config
from snapdiff.pipeline import Pipeline, STAGES

root = os.path.join(os.path.dirname(__file__), "out", "pipeline_small")
cfg = make_config("desk", n_concepts=10, n_train=7, base_epochs=60,
                  enc_epochs=30, ti_steps=80, mlp_epochs=60, ft_epochs=4,
                  unet_width=16)

pipe = Pipeline(cfg, root)
for stage in STAGES:
    manifest, ran = pipe.run_stage(stage, log=lambda s, m: print(f"  [{s}] {m}"))
    status = "ran" if ran else "cached"
    print(f"{stage:10s} {status:6s} {manifest['wall_time_s']:7.1f}s "
          f"hash {manifest['content_hash'][:12]}")

report = json.load(open(os.path.join(pipe.stage_dir("eval"), "report.json")))
print()
print("evaluation report:")
print(f"  subject fidelity (oracle color match): {report['oracle_subject_acc']:.2f}")
print(f"  prompt fidelity (green background):    {report['oracle_prompt_acc']:.2f}")
print(f"  image similarity (cross-pair cosine):  {report['clip_i']:.3f}")
print(f"  text similarity:                       {report['clip_t']:.3f}")
print(f"  embedding cluster margin:              {report['cluster_stats']['margin']:.3f}")
