"""From-scratch dual image/text encoder with a symmetric contrastive objective.

The text tower does double duty: its pooled output is the prompt-fidelity
embedding, its per-token states condition the denoiser's cross-attention.
"""

import math

import numpy as np
import torch
from torch import nn

from . import corpus as corpus_mod
from .tokenizer import Tokenizer


class ImageTower(nn.Module):
    def __init__(self, canvas=32, d_out=64, width=32):
        super().__init__()
        w = width
        self.net = nn.Sequential(
            nn.Conv2d(3, w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, 3 * w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(3 * w, 4 * w, 3, stride=2, padding=1), nn.SiLU(),
        )
        self.proj = nn.Linear(4 * w * (canvas // 16) ** 2, d_out)
        self.canvas = canvas

    def forward(self, images):
        if images.shape[-2:] != (self.canvas, self.canvas):
            raise ValueError(f"expected {self.canvas}x{self.canvas} images, got {tuple(images.shape[-2:])}")
        h = self.net(images)
        h = self.proj(h.flatten(1))
        return h / h.norm(dim=-1, keepdim=True)


class SelfAttentionBlock(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class TextTower(nn.Module):
    """Embedding table + self-attention blocks + mean-pool projection."""

    def __init__(self, vocab_size, max_len=16, d_tok=64, n_layers=2, heads=4,
                 d_out=64, pad_id=0, placeholder_id=1):
        super().__init__()
        self.table = nn.Embedding(vocab_size, d_tok)
        self.pos = nn.Parameter(torch.zeros(max_len, d_tok))
        self.blocks = nn.ModuleList(SelfAttentionBlock(d_tok, heads) for _ in range(n_layers))
        self.proj = nn.Linear(d_tok, d_out)
        self.pad_id = pad_id
        self.placeholder_id = placeholder_id
        self.d_tok = d_tok

    def token_vector(self, token_id):
        """Copy of one embedding-table row."""
        return self.table.weight[token_id].detach().clone()

    def forward(self, ids, placeholder_vec=None):
        """Returns (pooled unit-norm embedding, per-token states L x d_tok).

        If placeholder_vec is given, the table lookup at the (unique)
        placeholder position is replaced by it before the contextual layers.
        """
        if ids.dim() == 1:
            ids = ids[None]
        if (ids >= self.table.num_embeddings).any() or (ids < 0).any():
            raise ValueError("token id outside vocabulary")
        x = self.table(ids)
        if placeholder_vec is not None:
            where = ids == self.placeholder_id
            if not torch.all(where.sum(dim=1) == 1):
                raise ValueError("sequence must contain the placeholder exactly once")
            if placeholder_vec.dim() == 1:
                placeholder_vec = placeholder_vec.expand(ids.shape[0], -1)
            x = torch.where(where[..., None], placeholder_vec[:, None, :].to(x.dtype), x)
        x = x + self.pos[None, : ids.shape[1]]
        for blk in self.blocks:
            x = blk(x)
        mask = (ids != self.pad_id).float()
        denom = mask.sum(dim=1, keepdim=True)
        # empty prompt: fall back to pooling the pad states
        pooled = torch.where(denom > 0,
                             (x * mask[..., None]).sum(dim=1) / denom.clamp(min=1),
                             x.mean(dim=1))
        pooled = self.proj(pooled)
        pooled = pooled / pooled.norm(dim=-1, keepdim=True)
        return pooled, x


class DualEncoder(nn.Module):
    def __init__(self, cfg, vocab_size):
        super().__init__()
        self.image_tower = ImageTower(cfg.canvas, cfg.d_img_out)
        self.text_tower = TextTower(vocab_size, cfg.max_len, cfg.d_tok,
                                    cfg.n_text_layers, cfg.n_heads, cfg.d_txt_out)
        self.log_scale = nn.Parameter(torch.tensor(math.log(1 / cfg.temperature_init)))


def contrastive_loss(img_emb, txt_emb, logit_scale):
    """Symmetric InfoNCE, summed over both retrieval directions."""
    logits = logit_scale * img_emb @ txt_emb.T
    labels = torch.arange(img_emb.shape[0])
    return nn.functional.cross_entropy(logits, labels) + \
        nn.functional.cross_entropy(logits.T, labels)


def to_tensor_images(images):
    """N x H x W x 3 float array in [0,1] -> N x 3 x H x W tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def encode_image(model, images):
    model.eval()
    with torch.no_grad():
        return model.image_tower(to_tensor_images(images))


def encode_text(model, ids):
    model.eval()
    with torch.no_grad():
        return model.text_tower(torch.as_tensor(ids))


class EncoderTrainingDiverged(RuntimeError):
    pass


def contrastive_pretrain(corpus, cfg, epochs=None, batch=None, temperature=None, seed=None):
    """Train the dual encoder on train-split samples with attribute captions.

    Two images per train concept are held out; returns (model, held-out
    caption->image retrieval accuracy at batch size 32).
    """
    tok = Tokenizer(max_len=cfg.max_len)
    epochs = epochs or cfg.enc_epochs
    batch = batch or cfg.enc_batch
    seed = cfg.stage_seed("encoders") if seed is None else seed
    torch.manual_seed(seed)
    model = DualEncoder(cfg, len(tok))
    if temperature is not None:
        with torch.no_grad():
            model.log_scale.fill_(math.log(1 / temperature))

    by_concept = {cid: corpus.samples_of(cid) for cid in corpus.split.train_ids}
    train_pool = {cid: s[:-2] for cid, s in by_concept.items()}
    heldout = [(cid, s) for cid, lst in by_concept.items() for s in lst[-2:]]

    opt = torch.optim.Adam(model.parameters(), lr=cfg.enc_lr)
    rng = np.random.Generator(np.random.PCG64(seed))
    concepts = {c.identity_id: c for c in corpus.concepts}
    model.train()
    for epoch in range(epochs):
        cids = list(train_pool)
        rng.shuffle(cids)
        for start in range(0, len(cids), batch):
            chunk = cids[start:start + batch]
            imgs, caps = [], []
            for cid in chunk:
                samples = train_pool[cid]
                imgs.append(samples[rng.integers(len(samples))].image)
                template = corpus_mod.TEMPLATES[rng.integers(len(corpus_mod.TEMPLATES))]
                caps.append(tok.encode(corpus_mod.caption(concepts[cid].name, template)))
            img_emb = model.image_tower(to_tensor_images(imgs))
            txt_emb, _ = model.text_tower(torch.tensor(caps))
            loss = contrastive_loss(img_emb, txt_emb, model.log_scale.exp())
            if not torch.isfinite(loss):
                raise EncoderTrainingDiverged(f"contrastive loss not finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()

    acc = retrieval_accuracy(model, tok, heldout, concepts, batch=32, seed=seed + 1)
    return model, acc


def retrieval_accuracy(model, tok, pairs, concepts, batch=32, seed=0):
    """Caption -> image top-1 accuracy within batches; identity match counts."""
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(pairs))
    hits, total = 0, 0
    model.eval()
    for start in range(0, len(order), batch):
        idx = order[start:start + batch]
        if len(idx) < 2:
            continue
        cids = [pairs[i][0] for i in idx]
        imgs = [pairs[i][1].image for i in idx]
        caps = [tok.encode(corpus_mod.caption(concepts[c].name, "a photo of a {}")) for c in cids]
        with torch.no_grad():
            img_emb = model.image_tower(to_tensor_images(imgs))
            txt_emb, _ = model.text_tower(torch.tensor(caps))
            picks = (txt_emb @ img_emb.T).argmax(dim=1)
        for row, col in enumerate(picks.tolist()):
            hits += int(cids[col] == cids[row])
            total += 1
    return hits / max(total, 1)
