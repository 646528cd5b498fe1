"""Per-image token-embedding optimization against the frozen base model, and
the persisted bank of (concept, image, template) -> optimized vector records."""

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import corpus as corpus_mod
from . import instrument
from .checkpoints import _deterministic_npz_bytes
from .diffusion import ldm_loss, make_schedule
from .tokenizer import Tokenizer

ANCHOR_WORD = "object"


@dataclass
class TokenEmbedding:
    vector: np.ndarray
    concept_id: int = -1
    provenance: str = "anchor"  # optimized | predicted | anchor
    meta: dict = field(default_factory=dict)


def anchor_embedding(encoder, tok):
    row = encoder.text_tower.token_vector(tok.index[ANCHOR_WORD])
    return TokenEmbedding(row.numpy().copy(), provenance="anchor")


def placeholder_states(encoder, tok, template, v):
    """Token states for a template whose slot holds the substituted vector v."""
    ids = torch.tensor([tok.encode(template)])
    _, states = encoder.text_tower(ids, placeholder_vec=v)
    return states


class InversionDiverged(RuntimeError):
    pass


def invert_token(images, model, encoder, schedule, steps, lr, init, seed,
                 templates=None, tok=None):
    """Optimize a token vector so the frozen model denoises the given images.

    Each step draws a fresh (image, template, t, epsilon); the model and
    encoder stay bit-unchanged. steps == 0 returns init exactly.
    """
    if len(images) == 0:
        raise ValueError("need at least one image to invert")
    tok = tok or Tokenizer()
    templates = templates or corpus_mod.TEMPLATES
    v = torch.tensor(np.array(init.vector, dtype=np.float32), requires_grad=True)
    if steps == 0:
        return TokenEmbedding(v.detach().numpy().copy(), init.concept_id, "anchor",
                              {"steps": 0, "seed": seed})

    frozen = [p for p in list(model.parameters()) + list(encoder.parameters()) if p.requires_grad]
    for p in frozen:
        p.requires_grad_(False)
    try:
        opt = torch.optim.Adam([v], lr=lr)
        rng = np.random.Generator(np.random.PCG64(seed))
        imgs = torch.from_numpy(np.stack([np.asarray(im, dtype=np.float32) for im in images])
                                ).permute(0, 3, 1, 2)
        final_loss = None
        for step in range(steps):
            i = rng.integers(len(images))
            template = templates[rng.integers(len(templates))]
            states = placeholder_states(encoder, tok, template, v)
            t = int(rng.integers(1, schedule.T + 1))
            eps = torch.randn(imgs[i:i + 1].shape,
                              generator=torch.Generator().manual_seed(int(rng.integers(2**31))))
            loss = ldm_loss(imgs[i:i + 1], states, np.array([t]), eps, model, schedule)
            if not torch.isfinite(loss):
                raise InversionDiverged(f"loss not finite at inversion step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            instrument.count_grad_step()
            final_loss = loss.item()
    finally:
        for p in frozen:
            p.requires_grad_(True)
    return TokenEmbedding(v.detach().numpy().copy(), init.concept_id, "optimized",
                          {"steps": steps, "final_loss": final_loss, "seed": seed, "lr": lr})


def make_probe(image, schedule, n=64, seed=0, templates=None):
    """Frozen (t, epsilon, template) probe set for deterministic descent checks."""
    templates = templates or corpus_mod.TEMPLATES
    rng = np.random.Generator(np.random.PCG64(seed))
    probes = []
    for _ in range(n):
        t = int(rng.integers(1, schedule.T + 1))
        eps_seed = int(rng.integers(2**31))
        template = templates[rng.integers(len(templates))]
        probes.append((t, eps_seed, template))
    return probes


def probe_loss(v, image, probes, model, encoder, schedule, tok=None):
    """Mean denoising loss of a token vector over a frozen probe set."""
    tok = tok or Tokenizer()
    img = torch.from_numpy(np.asarray(image, dtype=np.float32))[None].permute(0, 3, 1, 2)
    vt = torch.as_tensor(np.asarray(v.vector if isinstance(v, TokenEmbedding) else v,
                                    dtype=np.float32))
    total = 0.0
    with torch.no_grad():
        for t, eps_seed, template in probes:
            states = placeholder_states(encoder, tok, template, vt)
            eps = torch.randn(img.shape, generator=torch.Generator().manual_seed(eps_seed))
            total += float(ldm_loss(img, states, np.array([t]), eps, model, schedule))
    return total / len(probes)


class EmbeddingBank:
    """Records of (concept_id, image_id, template_id) -> optimized vector."""

    def __init__(self, d_tok, records=None, vectors=None, meta=None):
        self.d_tok = d_tok
        self.records = records or []
        self.vectors = [] if vectors is None else [np.asarray(v) for v in vectors]
        self.meta = meta or {}

    def key(self, concept_id, image_id, template_id):
        return (concept_id, image_id, template_id)

    def has(self, concept_id, image_id, template_id=-1):
        return any(r["concept_id"] == concept_id and r["image_id"] == image_id
                   and r["template_id"] == template_id for r in self.records)

    def add(self, concept_id, image_id, template_id, emb):
        if self.has(concept_id, image_id, template_id):
            raise ValueError("duplicate bank record")
        vec = np.asarray(emb.vector, dtype=np.float32)
        if vec.shape != (self.d_tok,):
            raise ValueError(f"vector dimension {vec.shape} != ({self.d_tok},)")
        self.records.append({"concept_id": int(concept_id), "image_id": int(image_id),
                             "template_id": int(template_id), **emb.meta})
        self.vectors.append(vec)

    def __len__(self):
        return len(self.records)

    def by_concept(self):
        out = {}
        for rec, vec in zip(self.records, self.vectors):
            out.setdefault(rec["concept_id"], []).append(vec)
        return out

    def save(self, root):
        os.makedirs(root, exist_ok=True)
        arrays = {"vectors": np.stack(self.vectors) if self.vectors else np.zeros((0, self.d_tok), np.float32)}
        blob = _deterministic_npz_bytes(arrays)
        with open(os.path.join(root, "vectors.npz"), "wb") as f:
            f.write(blob)
        with open(os.path.join(root, "index.json"), "w") as f:
            json.dump({"d_tok": self.d_tok, "records": self.records, "meta": self.meta},
                      f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, root):
        with open(os.path.join(root, "index.json")) as f:
            idx = json.load(f)
        with np.load(os.path.join(root, "vectors.npz")) as z:
            vectors = list(z["vectors"])
        return cls(idx["d_tok"], idx["records"], vectors, idx.get("meta", {}))


def cluster_margin(bank):
    """mean(intra-identity cosine) - mean(inter-identity cosine), original space."""
    groups = bank.by_concept()
    if len(groups) < 2:
        raise ValueError("need at least two identities")
    vecs, labels = [], []
    for cid, lst in groups.items():
        for v in lst:
            vecs.append(v / np.linalg.norm(v))
            labels.append(cid)
    vecs = np.stack(vecs)
    labels = np.array(labels)
    sims = vecs @ vecs.T
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(vecs), dtype=bool)
    intra = sims[same & off].mean()
    inter = sims[~same].mean()
    return float(intra), float(inter), float(intra - inter)


def build_bank(corpus, model, encoder, cfg, out_dir=None, force=False, progress=None,
               lineage=None):
    """One optimized embedding per (train concept, image) pair; resumable.

    ``lineage`` identifies the inputs the records were optimized against;
    existing records with a different stamp are discarded rather than
    resumed, since inversions against a different base model or corpus are
    not interchangeable.
    """
    tok = Tokenizer(max_len=cfg.max_len)
    anchor = anchor_embedding(encoder, tok)
    bank = None
    if out_dir and not force and os.path.exists(os.path.join(out_dir, "index.json")):
        bank = EmbeddingBank.load(out_dir)
        if lineage is not None and bank.meta.get("lineage") != lineage:
            bank = None
    if bank is None:
        meta = {"anchor_word": ANCHOR_WORD}
        if lineage is not None:
            meta["lineage"] = lineage
        bank = EmbeddingBank(cfg.d_tok, meta=meta)
    schedule_seed = cfg.stage_seed("bank")
    schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    new = 0
    for cid in corpus.split.train_ids:
        samples = corpus.samples_of(cid)[:cfg.ti_images_per_concept]
        for j, sample in enumerate(samples):
            if bank.has(cid, j):
                continue
            init = TokenEmbedding(anchor.vector.copy(), cid, "anchor")
            emb = invert_token([sample.image], model, encoder, schedule,
                               steps=cfg.ti_steps, lr=cfg.ti_lr, init=init,
                               seed=schedule_seed + 1000 * cid + j, tok=tok)
            bank.add(cid, j, -1, emb)
            new += 1
            if out_dir:
                bank.save(out_dir)
            if progress:
                progress(cid, j, emb)
    return bank, new
