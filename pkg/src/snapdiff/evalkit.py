"""Measurement apparatus: subject/prompt fidelity metrics, the synthetic
attribute oracle, the timing comparison against per-image optimization,
embedding-cluster projection and the ablation grid."""

import csv
import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from PIL import Image
from sklearn.decomposition import PCA
from sklearn.neighbors import KNeighborsClassifier

from . import corpus as corpus_mod
from . import instrument
from .diffusion import ddim_sample, make_schedule, uncond_states
from .encoders import encode_image, to_tensor_images
from .extractor import train_extractor
from .inversion import anchor_embedding, cluster_margin, invert_token, TokenEmbedding
from .tokenizer import Tokenizer
from .zeroshot import personalize


# ---------------------------------------------------------------------------
# similarity metrics

def clip_i(encoder, generated, real):
    """Mean cosine over all (generated, real) cross pairs."""
    if len(generated) == 0 or len(real) == 0:
        raise ValueError("both image sets must be non-empty")
    g = encode_image(encoder, np.stack(generated).astype(np.float32))
    r = encode_image(encoder, np.stack(real).astype(np.float32))
    return float((g @ r.T).mean())


def clip_t(encoder, generated, prompt_text, tok=None):
    """Mean cosine between the pooled prompt embedding and each image."""
    if len(generated) == 0:
        raise ValueError("image set must be non-empty")
    tok = tok or Tokenizer()
    ids = torch.tensor([tok.encode(prompt_text)])
    with torch.no_grad():
        txt, _ = encoder.text_tower(ids)
        g = encode_image(encoder, np.stack(generated).astype(np.float32))
    return float((g @ txt.T).mean())


# ---------------------------------------------------------------------------
# attribute oracle

_PALETTE_HUES = None


def _hues():
    global _PALETTE_HUES
    if _PALETTE_HUES is None:
        _PALETTE_HUES = {name: _rgb_to_hue(np.array(rgb)) for name, rgb in corpus_mod.PALETTE.items()}
    return _PALETTE_HUES


def _rgb_to_hue(rgb):
    """Hue in [0, 1) for rgb arrays of shape (..., 3)."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = np.maximum(np.maximum(r, g), b)
    mn = np.minimum(np.minimum(r, g), b)
    d = np.where(mx > mn, mx - mn, 1.0)
    h = np.where(mx == r, ((g - b) / d) % 6,
                 np.where(mx == g, (b - r) / d + 2, (r - g) / d + 4))
    return (h / 6.0) % 1.0


def foreground_mask(image, sat_thresh=0.2, val_thresh=0.3):
    img = np.asarray(image)
    mx = img.max(axis=-1)
    mn = img.min(axis=-1)
    return ((mx - mn) > sat_thresh) & (mx > val_thresh)


def dominant_color(image, min_pixels=8):
    """Nearest palette color by circular mean hue of foreground pixels."""
    mask = foreground_mask(image)
    if mask.sum() < min_pixels:
        return "none"
    hues = _rgb_to_hue(np.asarray(image)[mask])
    ang = hues * 2 * np.pi
    mean_hue = (np.arctan2(np.sin(ang).mean(), np.cos(ang).mean()) / (2 * np.pi)) % 1.0
    best, best_d = "none", 1.0
    for name, h in _hues().items():
        d = abs(mean_hue - h)
        d = min(d, 1 - d)
        if d < best_d:
            best, best_d = name, d
    return best


def background_color(image, min_pixels=32):
    """Palette name of the (dark tinted) background, or 'black'/'none'."""
    img = np.asarray(image)
    mask = ~foreground_mask(img)
    if mask.sum() < min_pixels:
        return "none"
    px = img[mask]
    mx = px.max(axis=-1)
    mn = px.min(axis=-1)
    tinted = (mx > 0.08) & (mx < 0.45) & ((mx - mn) > 0.04)
    if tinted.mean() < 0.5:
        return "black"
    hues = _rgb_to_hue(px[tinted])
    ang = hues * 2 * np.pi
    mean_hue = (np.arctan2(np.sin(ang).mean(), np.cos(ang).mean()) / (2 * np.pi)) % 1.0
    best, best_d = "none", 1.0
    for name, h in _hues().items():
        d = abs(mean_hue - h)
        d = min(d, 1 - d)
        if d < best_d:
            best, best_d = name, d
    return best


def _shape_texture_features(image):
    """(mask16 flat, texture stats) from the foreground of an image.

    Shape: the binary mask tightly cropped and resized to 16x16, which is
    translation and scale invariant. Texture: phase-invariant statistics of
    the brightness field inside the (eroded) mask, since the pattern phase is
    a nuisance variable.
    """
    img = np.asarray(image)
    mask = foreground_mask(img)
    if mask.sum() < 8:
        return None
    ys, xs = np.where(mask)
    crop = mask[ys.min():ys.max() + 1, xs.min():xs.max() + 1]
    m16 = np.asarray(Image.fromarray(crop.astype(np.uint8) * 255).resize((16, 16))) / 255.0

    bright = img.max(axis=-1)
    core = (mask & np.roll(mask, 1, 0) & np.roll(mask, -1, 0)
            & np.roll(mask, 1, 1) & np.roll(mask, -1, 1))
    if core.sum() < 8:
        core = mask
    top = np.percentile(bright[core], 95)
    b = bright / max(top, 1e-6)
    dark_frac = float(((b < 0.78) & core).sum() / core.sum())
    dx = np.abs(np.diff(b, axis=1))
    dy = np.abs(np.diff(b, axis=0))
    vx = core[:, 1:] & core[:, :-1]
    vy = core[1:] & core[:-1]
    gx = float(dx[vx].mean()) if vx.any() else 0.0
    gy = float(dy[vy].mean()) if vy.any() else 0.0
    stats = np.array([dark_frac, 3.0 * gx, 3.0 * gy])
    return m16.ravel(), stats


class OracleCalibrationError(RuntimeError):
    pass


class AttributeOracle:
    """Recovers (shape, color, texture) from an image at corpus resolution.

    Color is rule-based (dominant hue); shape and texture are nearest-neighbor
    classifiers trained on a calibration grid covering every attribute combo.
    """

    def __init__(self, canvas=32):
        self.canvas = canvas
        self.shape_clf = KNeighborsClassifier(n_neighbors=3)
        self.texture_clf = KNeighborsClassifier(n_neighbors=3)
        self.heldout_accuracy = None

    def _grid(self, nuisance_seeds, colors):
        feats_s, ys_s, feats_t, ys_t = [], [], [], []
        for shape in corpus_mod.SHAPES:
            for texture in corpus_mod.TEXTURES:
                for ci, color in enumerate(colors):
                    for k, ns in enumerate(nuisance_seeds):
                        concept = corpus_mod.ConceptSpec(0, shape, color, texture,
                                                         scale=0.4 + 0.05 * ((ci + k) % 5))
                        img = corpus_mod.render_concept(concept, background_id=(ci + k) % corpus_mod.N_BACKGROUNDS,
                                                        nuisance_seed=ns, size=self.canvas).image
                        f = _shape_texture_features(img)
                        if f is None:
                            continue
                        feats_s.append(f[0])
                        ys_s.append(shape)
                        feats_t.append(f[1])
                        ys_t.append(texture)
        return np.stack(feats_s), ys_s, np.stack(feats_t), ys_t

    def fit(self, seed=0, min_accuracy=0.95):
        colors = corpus_mod.COLORS[:6]
        xs, ys, xt, yt = self._grid([0, seed * 10 + 11, seed * 10 + 12], colors)
        self.shape_clf.fit(xs, ys)
        self.texture_clf.fit(xt, yt)
        hx, hy, htx, hty = self._grid([seed * 10 + 17, seed * 10 + 23], corpus_mod.COLORS[6:])
        acc_s = self.shape_clf.score(hx, hy)
        acc_t = self.texture_clf.score(htx, hty)
        self.heldout_accuracy = min(acc_s, acc_t)
        if self.heldout_accuracy < min_accuracy:
            raise OracleCalibrationError(
                f"oracle held-out accuracy {self.heldout_accuracy:.3f} below {min_accuracy}")
        return self.heldout_accuracy

    def classify(self, image):
        color = dominant_color(image)
        f = _shape_texture_features(image)
        if f is None or color == "none":
            return ("none", "none", "none")
        shape = self.shape_clf.predict(f[0][None])[0]
        texture = self.texture_clf.predict(f[1][None])[0]
        return (str(shape), color, str(texture))


# ---------------------------------------------------------------------------
# timing comparison

def bench_speed(test_samples, extractor, encoder, base_model, tuned_model,
                schedule, cfg, n_samples=1):
    """Wall-clock per personalization: per-image TI optimization + sampling
    vs the single-pass path, identical sampler config."""
    tok = Tokenizer(max_len=cfg.max_len)
    null = uncond_states(encoder, tok)
    anchor = anchor_embedding(encoder, tok)
    prompt = "a photo of a {}"
    ti_times, zs_times = [], []
    ti_grad_steps = zs_grad_steps = 0
    for i, sample in enumerate(test_samples):
        # baseline: optimize a fresh token for this image, then sample
        before = instrument.grad_steps()
        t0 = time.perf_counter()
        emb = invert_token([sample.image], base_model, encoder, schedule,
                           steps=cfg.bench_ti_steps, lr=cfg.ti_lr,
                           init=TokenEmbedding(anchor.vector.copy()), seed=100 + i, tok=tok)
        from .zeroshot import splice_placeholder
        states = splice_placeholder(prompt, emb.vector, encoder, tok)
        ddim_sample(states, base_model, schedule, steps=cfg.ddim_steps,
                    scale=cfg.guidance_scale, seed=200 + i, null_states=null,
                    n=n_samples, canvas=cfg.canvas)
        ti_times.append(time.perf_counter() - t0)
        ti_grad_steps += instrument.grad_steps() - before

        before = instrument.grad_steps()
        t0 = time.perf_counter()
        personalize(sample.image, prompt, extractor, encoder, tuned_model,
                    schedule, cfg, n_samples=n_samples, seed=300 + i)
        zs_times.append(time.perf_counter() - t0)
        zs_grad_steps += instrument.grad_steps() - before
    ti = float(np.mean(ti_times))
    zs = float(np.mean(zs_times))
    return {"ti_seconds": ti, "zeroshot_seconds": zs, "speedup": ti / zs,
            "ti_grad_steps": ti_grad_steps, "zeroshot_grad_steps": zs_grad_steps,
            "n_images": len(test_samples)}


# ---------------------------------------------------------------------------
# embedding projection

def project_embeddings(bank, seed=0, csv_path=None, png_path=None):
    """Deterministic 2D PCA layout plus cluster stats in the original space."""
    groups = bank.by_concept()
    if len(groups) < 2:
        raise ValueError("need at least two identities to project")
    vecs = np.stack(bank.vectors)
    labels = [r["concept_id"] for r in bank.records]
    coords = PCA(n_components=2, random_state=seed).fit_transform(vecs)
    intra, inter, margin = cluster_margin(bank)
    stats = {"intra_cos": intra, "inter_cos": inter, "margin": margin}
    if csv_path:
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["concept_id", "x", "y"])
            for lab, (x, y) in zip(labels, coords):
                w.writerow([lab, x, y])
    if png_path:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.scatter(coords[:, 0], coords[:, 1], c=labels, cmap="tab20", s=18)
        ax.set_title(f"inversion embeddings (margin={margin:.3f})")
        fig.savefig(png_path, dpi=100)
        plt.close(fig)
    return coords, stats


# ---------------------------------------------------------------------------
# reports and ablation grid

@dataclass
class EvalReport:
    clip_i: float
    clip_t: float
    oracle_subject_acc: float
    oracle_prompt_acc: float
    timings: dict = field(default_factory=dict)
    cluster_stats: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=1)


def evaluate_arm(corpus, encoder, model, extractor_model, schedule, cfg, oracle,
                 test_ids=None, samples_per_id=2, seed=0):
    """Personalize each test identity from one image and score the outputs.

    Subject accuracy is the oracle color match rate against the concept's own
    color; prompt accuracy checks the prompt-requested attribute instead.
    """
    test_ids = list(test_ids if test_ids is not None else corpus.split.test_ids)
    concepts = {c.identity_id: c for c in corpus.concepts}
    prompt = "a photo of a {}"
    tok = Tokenizer(max_len=cfg.max_len)
    color_hits = shape_hits = total = 0
    ci_vals, ct_vals = [], []
    for k, cid in enumerate(test_ids):
        concept = concepts[cid]
        real = [s.image for s in corpus.samples_of(cid)]
        images, _ = personalize(real[0], prompt, extractor_model, encoder, model,
                                schedule, cfg, n_samples=samples_per_id,
                                seed=seed * 10007 + k)
        for img in images:
            shape, color, _ = oracle.classify(img)
            color_hits += int(color == concept.color)
            shape_hits += int(shape == concept.shape)
            total += 1
        ci_vals.append(clip_i(encoder, images, real))
        ct_vals.append(clip_t(encoder, images,
                              corpus_mod.caption(concept.name, prompt), tok))
    return {"oracle_color_acc": color_hits / total, "oracle_shape_acc": shape_hits / total,
            "clip_i": float(np.mean(ci_vals)), "clip_t": float(np.mean(ct_vals)),
            "n_images": total}


ABLATION_ARMS = ["w/o RL", "w/ RL", "L_MSE", "L_MSE+L_CE", "Whole", "Cross-attn"]


def run_ablations(corpus, encoder, base_model, bank, cfg, oracle, seeds=(0, 1, 2),
                  samples_per_id=2, test_ids=None, csv_path=None, log=None):
    """Three ablation axes, matching the full method arm against its variants.

    The full configuration (residual + MSE+CE + cross-attention fine-tune) is
    trained once per seed and reported under all three of its column names.
    Returns {arm: [per-seed result dicts]}.
    """
    from .adapt import finetune_xattn
    results = {arm: [] for arm in ABLATION_ARMS}
    results["No finetune"] = []
    schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    for s_i, seed in enumerate(seeds):
        arms = {}
        full_ex, _ = train_extractor(bank, corpus, encoder, cfg, residual=True,
                                     use_ce=True, seed=1000 + seed)
        norl_ex, _ = train_extractor(bank, corpus, encoder, cfg, residual=False,
                                     use_ce=True, seed=1000 + seed)
        msonly_ex, _ = train_extractor(bank, corpus, encoder, cfg, residual=True,
                                       use_ce=False, seed=1000 + seed)
        full_model, _ = finetune_xattn(base_model, full_ex, encoder, corpus, cfg,
                                       mode="xattn", seed=2000 + seed)
        whole_model, _ = finetune_xattn(base_model, full_ex, encoder, corpus, cfg,
                                        mode="whole", seed=2000 + seed)
        norl_model, _ = finetune_xattn(base_model, norl_ex, encoder, corpus, cfg,
                                       mode="xattn", seed=2000 + seed)
        msonly_model, _ = finetune_xattn(base_model, msonly_ex, encoder, corpus, cfg,
                                         mode="xattn", seed=2000 + seed)
        arms["w/ RL"] = (full_ex, full_model)
        arms["L_MSE+L_CE"] = (full_ex, full_model)
        arms["Cross-attn"] = (full_ex, full_model)
        arms["w/o RL"] = (norl_ex, norl_model)
        arms["L_MSE"] = (msonly_ex, msonly_model)
        arms["Whole"] = (full_ex, whole_model)
        arms["No finetune"] = (full_ex, base_model)
        cache = {}
        for arm, (ex, model) in arms.items():
            key = id(model), id(ex)
            if key not in cache:
                cache[key] = evaluate_arm(corpus, encoder, model, ex, schedule, cfg,
                                          oracle, test_ids=test_ids,
                                          samples_per_id=samples_per_id, seed=seed)
            results[arm].append(cache[key])
            if log:
                log(seed, arm, cache[key])
    if csv_path:
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["arm", "seed", "oracle_color_acc", "oracle_shape_acc", "clip_i", "clip_t"])
            for arm in ABLATION_ARMS + ["No finetune"]:
                for seed, res in zip(seeds, results[arm]):
                    w.writerow([arm, seed, res["oracle_color_acc"], res["oracle_shape_acc"],
                                res["clip_i"], res["clip_t"]])
    return results
