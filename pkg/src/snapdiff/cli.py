"""Command-line entry points for the five-stage pipeline, inference and the
evaluation tools.

Exit codes: 0 success, 2 config error, 3 lineage error, 4 numeric failure.
"""

import argparse
import json
import os
import sys

import numpy as np

from .config import ConfigError, make_config, validate_config
from .pipeline import Pipeline, STAGES, LineageError

DEFAULT_ROOT = os.environ.get("SNAPDIFF_ARTIFACTS", "artifacts")

STAGE_COMMANDS = {
    "gen-data": "corpus",
    "train-encoders": "encoders",
    "train-base": "base",
    "invert": "bank",
    "train-extractor": "extractor",
    "finetune-xattn": "xattn",
    "evaluate": "eval",
}


def _load_cfg(args, **overrides):
    if args.config:
        cfg = validate_config(args.config)
        if overrides:
            merged = cfg.to_dict()
            merged.update(overrides)
            cfg = make_config(**merged)
        return cfg
    return make_config(args.profile, **overrides)


def _add_common(p):
    p.add_argument("--config", help="JSON config file (profile + overrides)")
    p.add_argument("--profile", default="desk", help="built-in profile: desk or paper")
    p.add_argument("--artifacts", default=DEFAULT_ROOT,
                   help="artifact root directory (env SNAPDIFF_ARTIFACTS)")
    p.add_argument("--seed", type=int, help="root seed override")
    p.add_argument("--force", action="store_true", help="rerun even if cached")


def build_parser():
    ap = argparse.ArgumentParser(prog="snapdiff",
                                 description="zero-shot diffusion personalization, desk scale")
    sub = ap.add_subparsers(dest="command", required=True)
    for cmd in STAGE_COMMANDS:
        p = sub.add_parser(cmd, help=f"run the {STAGE_COMMANDS[cmd]} stage")
        _add_common(p)
        if cmd == "invert":
            p.add_argument("--images-per-concept", type=int, dest="ti_images_per_concept")
            p.add_argument("--steps", type=int, dest="ti_steps")
        if cmd == "train-extractor":
            p.add_argument("--no-residual", action="store_true")
            p.add_argument("--mse-only", action="store_true")
        if cmd == "finetune-xattn":
            p.add_argument("--whole-model", action="store_true")
            p.add_argument("--kv-only", action="store_true")
            p.add_argument("--epochs", type=int, dest="ft_epochs")
            p.add_argument("--lr", type=float, dest="ft_lr")

    p = sub.add_parser("run", help="run stages in dependency order")
    _add_common(p)
    p.add_argument("stages", nargs="+", help="stage names, or 'all'")

    p = sub.add_parser("infer", help="personalize a test image with a prompt")
    _add_common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--steps", type=int, dest="ddim_steps")
    p.add_argument("--scale", type=float, dest="guidance_scale")
    p.add_argument("--out", default="outputs")

    p = sub.add_parser("bench-timing", help="single-pass vs per-image optimization timing")
    _add_common(p)
    p.add_argument("--n-images", type=int, default=1)

    p = sub.add_parser("project-embeddings", help="2D projection of the inversion bank")
    _add_common(p)
    p.add_argument("--out", default=None)

    p = sub.add_parser("run-ablations", help="the three ablation axes, multi-seed")
    _add_common(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--samples-per-id", type=int, default=2)
    p.add_argument("--out", default=None)
    return ap


def _log(stage, msg):
    print(f"[{stage}] {msg}", flush=True)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except LineageError as e:
        print(f"lineage error: {e}", file=sys.stderr)
        return 3
    except (FloatingPointError, ArithmeticError, RuntimeError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4


def _dispatch(args):
    overrides = {}
    for field in ("seed", "ti_images_per_concept", "ti_steps", "ft_epochs", "ft_lr",
                  "ddim_steps", "guidance_scale"):
        val = getattr(args, field, None)
        if val is not None:
            overrides[field] = val
    if getattr(args, "no_residual", False):
        overrides["residual"] = False
    if getattr(args, "mse_only", False):
        overrides["ce_coef"] = 0.0
    if getattr(args, "whole_model", False):
        overrides["ft_mode"] = "whole"
    if getattr(args, "kv_only", False):
        overrides["ft_mode"] = "kv"
    cfg = _load_cfg(args, **overrides)
    pipe = Pipeline(cfg, args.artifacts)

    if args.command in STAGE_COMMANDS:
        manifest, ran = pipe.run_stage(STAGE_COMMANDS[args.command], force=args.force, log=_log)
        _log(manifest["stage"], "done" if ran else "cached, skipped")
        return 0

    if args.command == "run":
        stages = STAGES if args.stages == ["all"] else args.stages
        for stage in stages:
            manifest, ran = pipe.run_stage(stage, force=args.force, log=_log)
            _log(stage, "done" if ran else "cached, skipped")
        return 0

    if args.command == "infer":
        from PIL import Image
        from .diffusion import make_schedule
        from .zeroshot import personalize
        img = np.asarray(Image.open(args.image), dtype=np.float64) / 255.0
        schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
        images, meta = personalize(img, args.prompt, pipe.load_extractor(),
                                   pipe.load_encoder(), pipe.load_xattn(), schedule,
                                   cfg, n_samples=args.n, seed=cfg.seed)
        os.makedirs(args.out, exist_ok=True)
        for k, out in enumerate(images):
            Image.fromarray(np.round(out * 255).astype(np.uint8)).save(
                os.path.join(args.out, f"sample{k}.png"))
        with open(os.path.join(args.out, "meta.json"), "w") as f:
            json.dump(meta, f, indent=1)
        _log("infer", f"wrote {len(images)} samples to {args.out}")
        return 0

    if args.command == "bench-timing":
        from .diffusion import make_schedule
        from .evalkit import bench_speed
        corpus = pipe.load_corpus()
        schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
        samples = [corpus.samples_of(cid)[0] for cid in corpus.split.test_ids[:args.n_images]]
        result = bench_speed(samples, pipe.load_extractor(), pipe.load_encoder(),
                             pipe.load_base(), pipe.load_xattn(), schedule, cfg)
        print(json.dumps(result, indent=1))
        return 0

    if args.command == "project-embeddings":
        from .evalkit import project_embeddings
        from .inversion import EmbeddingBank
        bank = EmbeddingBank.load(pipe.stage_dir("bank"))
        out = args.out or pipe.stage_dir("bank")
        _, stats = project_embeddings(bank, seed=cfg.seed,
                                      csv_path=os.path.join(out, "embedding_projection.csv"),
                                      png_path=os.path.join(out, "embedding_projection.png"))
        print(json.dumps(stats, indent=1))
        return 0

    if args.command == "run-ablations":
        from .evalkit import AttributeOracle, run_ablations
        from .inversion import EmbeddingBank
        corpus = pipe.load_corpus()
        oracle = AttributeOracle(cfg.canvas)
        oracle.fit()
        out = args.out or os.path.join(args.artifacts, "ablations.csv")
        results = run_ablations(corpus, pipe.load_encoder(), pipe.load_base(),
                                EmbeddingBank.load(pipe.stage_dir("bank")), cfg, oracle,
                                seeds=tuple(args.seeds), samples_per_id=args.samples_per_id,
                                csv_path=out,
                                log=lambda s, a, r: _log("ablate", f"seed {s} {a}: {r}"))
        _log("ablate", f"wrote {out}")
        return 0

    raise ValueError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
