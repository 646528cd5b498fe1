"""Concept-extraction network: a 3-layer MLP over fused image+text features
predicting an inversion token as a residual from the 'object' anchor row,
trained with MSE to the bank plus an auxiliary identity cross-entropy."""

import numpy as np
import torch
from torch import nn

from . import corpus as corpus_mod
from . import instrument
from .encoders import to_tensor_images
from .inversion import ANCHOR_WORD, TokenEmbedding
from .tokenizer import Tokenizer

INFERENCE_TEMPLATE = "a photo of a {}"


class Extractor(nn.Module):
    def __init__(self, d_in, d_hidden, d_tok, n_classes, anchor, residual=True):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.bn1 = nn.BatchNorm1d(d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_hidden)
        self.bn2 = nn.BatchNorm1d(d_hidden)
        self.fc3 = nn.Linear(d_hidden, d_tok)
        self.classifier = nn.Linear(d_hidden, n_classes)
        self.residual = residual
        self.register_buffer("anchor", torch.as_tensor(np.asarray(anchor, dtype=np.float32)))

    def forward(self, fused):
        h = torch.relu(self.bn1(self.fc1(fused)))
        h = torch.relu(self.bn2(self.fc2(h)))
        delta = self.fc3(h)
        logits = self.classifier(h)
        out = delta + self.anchor if self.residual else delta
        return out, logits


def fuse_features(encoder, images, template_text, tok=None):
    """Concatenate unit-norm image and pooled text embeddings, image first.

    The template's slot is rendered with the literal anchor word.
    """
    tok = tok or Tokenizer()
    text = corpus_mod.caption(ANCHOR_WORD, template_text) \
        if corpus_mod.PLACEHOLDER in template_text else template_text
    ids = torch.tensor([tok.encode(text)])
    img_emb = encoder.image_tower(to_tensor_images(images))
    txt_emb, _ = encoder.text_tower(ids)
    txt_emb = txt_emb.expand(img_emb.shape[0], -1)
    return torch.cat([img_emb, txt_emb], dim=1)


def predict_token(images, template, extractor, encoder, tok=None):
    """Single forward pass from an image (batch) to predicted token vectors."""
    extractor.eval()
    encoder.eval()
    with torch.no_grad():
        fused = fuse_features(encoder, images, template, tok)
        vec, _ = extractor(fused)
    vec = vec.numpy()
    if vec.shape[0] == 1:
        return TokenEmbedding(vec[0].copy(), provenance="predicted")
    return [TokenEmbedding(v.copy(), provenance="predicted") for v in vec]


def extractor_loss(predicted, target, logits, identity_label, mse_coef=1.0, ce_coef=1.0):
    """mse_coef * MSE(predicted, target) + ce_coef * CE(logits, label)."""
    labels = torch.as_tensor(identity_label)
    if labels.dim() == 0:
        labels = labels[None]
    if (labels < 0).any() or (labels >= logits.shape[-1]).any():
        raise ValueError("identity label out of range")
    mse = torch.mean((predicted - target) ** 2)
    ce = nn.functional.cross_entropy(logits, labels)
    return mse_coef * mse + ce_coef * ce


class ExtractorTrainingDiverged(RuntimeError):
    pass


def train_extractor(bank, corpus, encoder, cfg, residual=None, use_ce=True,
                    epochs=None, seed=None, log=None):
    """Fit the MLP to the bank's optimized vectors with template augmentation.

    Held-out images of train concepts (those beyond the inverted ones) give a
    validation MSE; returns (model, history dict).
    """
    tok = Tokenizer(max_len=cfg.max_len)
    residual = cfg.residual if residual is None else residual
    seed = cfg.stage_seed("extractor") if seed is None else seed
    torch.manual_seed(seed)
    anchor = encoder.text_tower.token_vector(tok.index[ANCHOR_WORD]).numpy()
    train_ids = list(corpus.split.train_ids)
    class_of = {cid: k for k, cid in enumerate(train_ids)}
    model = Extractor(cfg.fused_dim, cfg.mlp_hidden, cfg.d_tok, len(train_ids),
                      anchor, residual=residual)

    # (image, target vector, class) triples from the bank
    entries = []
    for rec, vec in zip(bank.records, bank.vectors):
        img = corpus.samples_of(rec["concept_id"])[rec["image_id"]].image
        entries.append((img, vec, class_of[rec["concept_id"]]))
    # validation: held-out images paired with their concept's mean bank vector
    concept_mean = {cid: np.mean(vs, axis=0) for cid, vs in bank.by_concept().items()}
    val = []
    for cid in train_ids:
        for s in corpus.samples_of(cid)[cfg.ti_images_per_concept:]:
            val.append((s.image, concept_mean[cid], class_of[cid]))

    opt = torch.optim.AdamW(model.parameters(), lr=cfg.mlp_lr)
    rng = np.random.Generator(np.random.PCG64(seed))
    epochs = epochs or cfg.mlp_epochs
    history = {"val_mse": [], "val_acc": []}
    encoder.eval()
    for epoch in range(epochs):
        model.train()
        order = rng.permutation(len(entries))
        for start in range(0, len(order), cfg.mlp_batch):
            idx = order[start:start + cfg.mlp_batch]
            if len(idx) < 2:
                continue  # batch norm needs more than one row
            imgs = [entries[i][0] for i in idx]
            targets = torch.tensor(np.stack([entries[i][1] for i in idx]))
            labels = torch.tensor([entries[i][2] for i in idx])
            template = corpus_mod.TEMPLATES[rng.integers(len(corpus_mod.TEMPLATES))]
            with torch.no_grad():
                fused = fuse_features(encoder, imgs, template, tok)
            pred, logits = model(fused)
            loss = extractor_loss(pred, targets, logits, labels,
                                  cfg.mse_coef, cfg.ce_coef if use_ce else 0.0)
            if not torch.isfinite(loss):
                raise ExtractorTrainingDiverged(f"loss not finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            instrument.count_grad_step()
        if val and (epoch % 10 == 0 or epoch == epochs - 1):
            mse, acc = validate(model, encoder, val, tok)
            history["val_mse"].append(mse)
            history["val_acc"].append(acc)
            if log:
                log(epoch, mse, acc)
    return model, history


def validate(model, encoder, val, tok=None):
    """Validation MSE against concept-mean targets and classifier accuracy."""
    tok = tok or Tokenizer()
    model.eval()
    imgs = [v[0] for v in val]
    targets = torch.tensor(np.stack([v[1] for v in val]))
    labels = np.array([v[2] for v in val])
    with torch.no_grad():
        fused = fuse_features(encoder, imgs, INFERENCE_TEMPLATE, tok)
        pred, logits = model(fused)
    mse = float(torch.mean((pred - targets) ** 2))
    acc = float((logits.argmax(dim=1).numpy() == labels).mean())
    return mse, acc


def anchor_baseline_mse(encoder, val, tok=None):
    """Validation MSE of the zero-delta (anchor only) predictor."""
    tok = tok or Tokenizer()
    anchor = encoder.text_tower.token_vector(tok.index[ANCHOR_WORD]).numpy()
    targets = np.stack([v[1] for v in val])
    return float(np.mean((targets - anchor[None]) ** 2))
