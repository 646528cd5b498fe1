"""Timing comparison and embedding geometry.

Compares per-image token optimization (the slow baseline) against the
single-forward-pass path on the same held-out images, then projects the
inversion bank to 2D to show per-identity clustering.

Needs the artifacts from demos/02_train_pipeline.py.
"""

import os
import sys

from snapdiff.config import make_config
from snapdiff.diffusion import make_schedule
from snapdiff.evalkit import bench_speed, project_embeddings
from snapdiff.inversion import EmbeddingBank
from snapdiff.pipeline import Pipeline

root = os.path.join(os.path.dirname(__file__), "out", "pipeline_small")
if not os.path.exists(os.path.join(root, "xattn", "stage_manifest.json")):
    sys.exit("run demos/02_train_pipeline.py first")

cfg = make_config("desk", n_concepts=10, n_train=7, base_epochs=60,
                  enc_epochs=30, ti_steps=80, mlp_epochs=60, ft_epochs=4,
                  unet_width=16)
pipe = Pipeline(cfg, root)
corpus = pipe.load_corpus()
schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)

samples = [corpus.samples_of(cid)[0] for cid in corpus.split.test_ids[:1]]
print(f"benchmarking on {len(samples)} held-out image(s); the baseline runs "
      f"{cfg.bench_ti_steps} optimization steps per image")
result = bench_speed(samples, pipe.load_extractor(), pipe.load_encoder(),
                     pipe.load_base(), pipe.load_xattn(), schedule, cfg)
print(f"  per-image optimization: {result['ti_seconds']:.1f} s "
      f"({result['ti_grad_steps']} gradient steps)")
print(f"  single forward pass:    {result['zeroshot_seconds']:.1f} s "
      f"({result['zeroshot_grad_steps']} gradient steps)")
print(f"  speedup: {result['speedup']:.0f}x")
print()

bank = EmbeddingBank.load(pipe.stage_dir("bank"))
out_dir = os.path.join(os.path.dirname(__file__), "out")
coords, stats = project_embeddings(
    bank, seed=0,
    csv_path=os.path.join(out_dir, "embedding_projection.csv"),
    png_path=os.path.join(out_dir, "embedding_projection.png"))
print("inversion-bank cluster geometry (cosine):")
print(f"  intra-identity {stats['intra_cos']:.3f}  "
      f"inter-identity {stats['inter_cos']:.3f}  margin {stats['margin']:.3f}")
print("scatter plot:", os.path.join(out_dir, "embedding_projection.png"))
