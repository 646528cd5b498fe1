"""End-to-end acceptance suite.

Each test covers one numbered criterion and prints a single PASS/FAIL line.
The desk pipeline is trained on first use (tens of minutes on one CPU core)
and cached under the artifact root afterwards; set SNAPDIFF_ARTIFACTS to
point at an existing run.
"""

import json
import os

import numpy as np
import pytest
import torch

from snapdiff import corpus as corpus_mod
from snapdiff import instrument
from snapdiff.config import make_config
from snapdiff.diffusion import (cfg_combine, ddim_generate, ldm_loss,
                                make_schedule, q_sample)
from snapdiff.encoders import DualEncoder
from snapdiff.evalkit import AttributeOracle, bench_speed, clip_t, dominant_color
from snapdiff.extractor import Extractor
from snapdiff.inversion import EmbeddingBank, anchor_embedding, cluster_margin
from snapdiff.pipeline import Pipeline
from snapdiff.tokenizer import Tokenizer
from snapdiff.unet import UNet
from snapdiff.zeroshot import personalize

from conftest import micro_config

ARTIFACT_ROOT = os.environ.get(
    "SNAPDIFF_ARTIFACTS",
    os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "artifacts"))

# regression bound for the inversion-bank cluster margin, pinned from the
# first calibrated desk run (measured 0.167, pinned with ~50% slack)
PINNED_MARGIN_BOUND = 0.08


def _report(num, name, ok, detail=""):
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {num} ({name}): {detail}")
    assert ok, f"criterion {num} ({name}) failed: {detail}"


@pytest.fixture(scope="session")
def desk(desk_cfg):
    pipe = Pipeline(desk_cfg, ARTIFACT_ROOT)
    pipe.run_all()
    return pipe


# ---------------------------------------------------------------------------
# 1. gradient oracles (double precision, tiny config)

def test_criterion_1_gradient_oracles():
    torch.manual_seed(0)
    tok = Tokenizer()
    cfg = make_config("desk", d_tok=16, d_img_out=16, d_txt_out=16,
                      n_heads=2, unet_width=8, timesteps=20, ddim_steps=5)
    encoder = DualEncoder(cfg, len(tok)).double()
    model = UNet(cfg.unet_width, cfg.d_tok, cfg.n_heads).double()
    schedule = make_schedule(cfg.timesteps)
    x0 = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    eps = torch.randn(1, 3, 32, 32, dtype=torch.float64)
    t = np.array([7])
    ids = torch.tensor([tok.encode("a photo of a {}")])

    def loss_of(vec):
        _, states = encoder.text_tower(ids, placeholder_vec=vec)
        return ldm_loss(x0, states, t, eps, model, schedule)

    # (a) gradient w.r.t. the substituted token vector
    v = torch.randn(cfg.d_tok, dtype=torch.float64, requires_grad=True)
    loss_of(v).backward()
    h = 1e-6
    worst = 0.0
    rng = np.random.default_rng(0)
    for i in rng.choice(cfg.d_tok, 6, replace=False):
        vp, vm = v.detach().clone(), v.detach().clone()
        vp[i] += h
        vm[i] -= h
        with torch.no_grad():
            fd = (float(loss_of(vp)) - float(loss_of(vm))) / (2 * h)
        an = float(v.grad[i])
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-10))

    # (b) gradient w.r.t. cross-attention weights
    model.zero_grad()
    vfix = v.detach()
    loss_of(vfix).backward()
    xattn_params = [(n, p) for n, p in model.named_parameters() if "xattn" in n]
    assert xattn_params
    for name, p in [xattn_params[0], xattn_params[-1]]:
        i = int(rng.integers(p.numel()))
        with torch.no_grad():
            orig = p.view(-1)[i].item()
            p.view(-1)[i] = orig + h
            lp = float(loss_of(vfix))
            p.view(-1)[i] = orig - h
            lm = float(loss_of(vfix))
            p.view(-1)[i] = orig
        fd = (lp - lm) / (2 * h)
        an = float(p.grad.view(-1)[i])
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-10))

    _report(1, "gradient oracles", worst <= 1e-3,
            f"worst relative error {worst:.2e} (tolerance 1e-3)")


# ---------------------------------------------------------------------------
# 2. sampler/schedule property suite

def test_criterion_2_sampler_suite():
    sch = make_schedule(400)
    ok = bool(np.all(np.diff(sch.alpha_bar) < 0) and 0 < sch.alpha_bar[-1])

    # moment identity over 1e3 draws
    rng = np.random.default_rng(1)
    x0 = np.full((1000, 1), 0.4)
    eps = rng.standard_normal(x0.shape)
    xt = q_sample(x0, 30, eps, sch)
    ab = sch.ab(30)
    mean_err = abs(xt.mean() - np.sqrt(ab) * 0.4) / max(abs(np.sqrt(ab) * 0.4), 1e-9)
    var_err = abs(xt.var() - (1 - ab)) / (1 - ab)
    ok = ok and mean_err < 0.05 and var_err < 0.05

    # DDIM bit-determinism
    def eps_fn(z, t):
        return 0.3 * z
    a = ddim_generate(eps_fn, sch, (1, 3, 8, 8), 25, seed=9)
    b = ddim_generate(eps_fn, sch, (1, 3, 8, 8), 25, seed=9)
    ok = ok and torch.equal(a, b)

    # guidance boundary identities
    c, u = torch.randn(2, 4), torch.randn(2, 4)
    ok = ok and torch.allclose(cfg_combine(c, u, 1.0), c, atol=1e-6)
    ok = ok and torch.allclose(cfg_combine(c, c, 5.0), c, atol=1e-6)

    _report(2, "sampler/schedule suite", ok,
            f"moment errors mean {mean_err:.3f} var {var_err:.3f} (5% tolerance)")


# ---------------------------------------------------------------------------
# 3. base model competence

def test_criterion_3_base_competence(desk, desk_cfg):
    from snapdiff.diffusion import ddim_sample, uncond_states
    corpus = desk.load_corpus()
    encoder = desk.load_encoder()
    base = desk.load_base()
    schedule = make_schedule(desk_cfg.timesteps, desk_cfg.beta_start, desk_cfg.beta_end)
    tok = Tokenizer(max_len=desk_cfg.max_len)
    null = uncond_states(encoder, tok)
    rng = np.random.default_rng(0)
    train_concepts = [c for c in corpus.concepts
                      if c.identity_id in set(corpus.split.train_ids)]
    hits = total = 0
    picks = rng.choice(len(train_concepts), 10, replace=False)
    for k, ci in enumerate(picks):
        c = train_concepts[ci]
        ids = torch.tensor([tok.encode(f"a photo of a {c.name}")])
        with torch.no_grad():
            _, states = encoder.text_tower(ids)
        imgs = ddim_sample(states, base, schedule, steps=desk_cfg.ddim_steps,
                           scale=desk_cfg.guidance_scale, seed=500 + k,
                           null_states=null, n=5, canvas=desk_cfg.canvas)
        for img in imgs:
            hits += int(dominant_color(img) == c.color)
            total += 1
    acc = hits / total
    _report(3, "base competence", total == 50 and acc >= 0.70,
            f"color-oracle match {acc:.2f} over {total} conditional samples (need >= 0.70)")


# ---------------------------------------------------------------------------
# 4. inversion bank clustering

def test_criterion_4_bank_clustering(desk):
    bank = EmbeddingBank.load(desk.stage_dir("bank"))
    intra, inter, margin = cluster_margin(bank)
    ok = margin > 0 and margin >= PINNED_MARGIN_BOUND
    _report(4, "bank clustering", ok,
            f"intra {intra:.3f} inter {inter:.3f} margin {margin:.3f} "
            f"(need > 0 and >= pinned {PINNED_MARGIN_BOUND})")


# ---------------------------------------------------------------------------
# 5. ablation directions over three seeds

def _ablation_results(desk, desk_cfg):
    from snapdiff.evalkit import run_ablations
    cache_path = os.path.join(ARTIFACT_ROOT, "ablation_results.json")
    if os.path.exists(cache_path):
        cached = json.load(open(cache_path))
        if cached.get("config_hash") == desk_cfg.content_hash():
            return cached["results"]
    corpus = desk.load_corpus()
    oracle = AttributeOracle(desk_cfg.canvas)
    oracle.fit(seed=0)
    results = run_ablations(corpus, desk.load_encoder(), desk.load_base(),
                            EmbeddingBank.load(desk.stage_dir("bank")),
                            desk_cfg, oracle, seeds=(0, 1, 2), samples_per_id=2,
                            test_ids=corpus.split.test_ids[:5],
                            csv_path=os.path.join(ARTIFACT_ROOT, "ablations.csv"))
    with open(cache_path, "w") as f:
        json.dump({"config_hash": desk_cfg.content_hash(), "results": results}, f, indent=1)
    return results


def test_criterion_5_ablation_directions(desk, desk_cfg):
    results = _ablation_results(desk, desk_cfg)

    def accs(arm):
        return [r["oracle_color_acc"] for r in results[arm]]

    def majority_ge(a, b):
        return sum(x >= y for x, y in zip(accs(a), accs(b))) >= 2

    d1 = majority_ge("w/ RL", "w/o RL")
    d2 = majority_ge("L_MSE+L_CE", "L_MSE")
    d3 = majority_ge("Cross-attn", "No finetune")

    # cross-attention arm leaves everything outside the mask bit-identical
    from snapdiff.adapt import mask_trainable, param_change_report
    base = desk.load_base()
    tuned = desk.load_xattn()
    mask = mask_trainable(base, "xattn")
    frozen_ok = all(delta == 0.0 for name, _, delta in param_change_report(base, tuned)
                    if not mask.get(name, False))

    detail = (f"w/RL {accs('w/ RL')} vs w/oRL {accs('w/o RL')}; "
              f"MSE+CE {accs('L_MSE+L_CE')} vs MSE {accs('L_MSE')}; "
              f"xattn {accs('Cross-attn')} vs none {accs('No finetune')}; "
              f"frozen params bit-identical: {frozen_ok}")
    _report(5, "ablation directions", d1 and d2 and d3 and frozen_ok, detail)


# ---------------------------------------------------------------------------
# 6. speedup and zero gradient steps

def test_criterion_6_speedup(desk, desk_cfg):
    corpus = desk.load_corpus()
    schedule = make_schedule(desk_cfg.timesteps, desk_cfg.beta_start, desk_cfg.beta_end)
    samples = [corpus.samples_of(corpus.split.test_ids[0])[0]]
    result = bench_speed(samples, desk.load_extractor(), desk.load_encoder(),
                         desk.load_base(), desk.load_xattn(), schedule, desk_cfg)
    ok = result["speedup"] >= 50.0 and result["zeroshot_grad_steps"] == 0
    _report(6, "speedup", ok,
            f"{result['ti_seconds']:.1f}s vs {result['zeroshot_seconds']:.2f}s = "
            f"{result['speedup']:.0f}x (need >= 50x); zero-shot grad steps "
            f"{result['zeroshot_grad_steps']} (need 0), baseline {result['ti_grad_steps']}")


# ---------------------------------------------------------------------------
# 7. zero-shot generalization to held-out identities

def test_criterion_7_zeroshot_generalization(desk, desk_cfg):
    corpus = desk.load_corpus()
    encoder = desk.load_encoder()
    tuned = desk.load_xattn()
    extractor = desk.load_extractor()
    bank = EmbeddingBank.load(desk.stage_dir("bank"))
    schedule = make_schedule(desk_cfg.timesteps, desk_cfg.beta_start, desk_cfg.beta_end)
    tok = Tokenizer(max_len=desk_cfg.max_len)
    test_ids = corpus.split.test_ids
    assert len(test_ids) >= 5
    train_set = set(corpus.split.train_ids)
    inverted = {r["concept_id"] for r in bank.records}
    assert not (set(test_ids) & train_set), "test identity appeared in training"
    assert not (set(test_ids) & inverted), "test identity appeared in the bank"

    concepts = {c.identity_id: c for c in corpus.concepts}
    before = instrument.grad_steps()
    hits = total = 0
    matched, mismatched = [], []
    for k, cid in enumerate(test_ids):
        c = concepts[cid]
        img = corpus.samples_of(cid)[0].image
        outs, _ = personalize(img, "a photo of a {}", extractor, encoder, tuned,
                              schedule, desk_cfg, n_samples=2, seed=900 + k)
        for out in outs:
            hits += int(dominant_color(out) == c.color)
            total += 1
        other = concepts[test_ids[(k + 1) % len(test_ids)]]
        matched.append(clip_t(encoder, outs, f"a photo of a {c.name}", tok))
        mismatched.append(clip_t(encoder, outs, f"a photo of a {other.name}", tok))
    acc = hits / total
    chance = 1.0 / len(corpus_mod.COLORS)
    m, mm = float(np.mean(matched)), float(np.mean(mismatched))
    ok = (acc >= 3 * chance) and (m > mm) and instrument.grad_steps() == before
    _report(7, "zero-shot generalization", ok,
            f"color acc {acc:.2f} on {len(test_ids)} held-out identities "
            f"(chance {chance:.3f}, need >= {3 * chance:.2f}); "
            f"matched CLIP-T {m:.3f} > mismatched {mm:.3f}")


# ---------------------------------------------------------------------------
# 8. residual and splice identities (exact)

def test_criterion_8_exact_identities(desk, desk_cfg):
    encoder = desk.load_encoder()
    tok = Tokenizer(max_len=desk_cfg.max_len)
    anchor = anchor_embedding(encoder, tok)

    ex = Extractor(desk_cfg.fused_dim, desk_cfg.mlp_hidden, desk_cfg.d_tok,
                   desk_cfg.n_train, anchor.vector, residual=True)
    with torch.no_grad():
        ex.fc3.weight.zero_()
        ex.fc3.bias.zero_()
    ex.eval()
    fused = torch.randn(3, desk_cfg.fused_dim)
    with torch.no_grad():
        out, _ = ex(fused)
    residual_ok = all(np.array_equal(o.numpy(), anchor.vector) for o in out)

    ids = torch.tensor([tok.encode("a photo of a *")])
    row = encoder.text_tower.token_vector(tok.placeholder_id)
    with torch.no_grad():
        _, plain = encoder.text_tower(ids)
        _, sub = encoder.text_tower(ids, placeholder_vec=row)
    splice_ok = torch.equal(plain, sub)

    _report(8, "exact identities", residual_ok and splice_ok,
            f"zero-delta == anchor: {residual_ok}; table-row splice == plain "
            f"encoding: {splice_ok}")


# ---------------------------------------------------------------------------
# 9. full-pipeline reproducibility

def test_criterion_9_reproducibility(tmp_path_factory):
    cfg = micro_config(seed=11)
    hashes = []
    for run in range(2):
        root = tmp_path_factory.mktemp(f"repro{run}")
        pipe = Pipeline(cfg, str(root))
        results = pipe.run_all()
        hashes.append({s: m["content_hash"] for s, (m, _) in results.items()})
    same = hashes[0] == hashes[1]
    diff = [s for s in hashes[0] if hashes[0][s] != hashes[1][s]]
    _report(9, "reproducibility", same,
            "two runs with the same seed produced identical stage hashes"
            if same else f"stage hashes differ: {diff}")
