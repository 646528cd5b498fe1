import numpy as np
import pytest
import torch

from snapdiff.extractor import (Extractor, INFERENCE_TEMPLATE, extractor_loss,
                                fuse_features, predict_token, train_extractor)
from snapdiff.inversion import EmbeddingBank, TokenEmbedding, build_bank
from snapdiff.tokenizer import Tokenizer


@pytest.fixture(scope="module")
def tok():
    return Tokenizer()


@pytest.fixture(scope="module")
def micro_bank(micro_cfg, micro_corpus, micro_stack):
    encoder, model, schedule = micro_stack
    bank, _ = build_bank(micro_corpus, model, encoder, micro_cfg)
    return bank


def _fresh_extractor(micro_cfg, micro_corpus, residual=True):
    anchor = np.zeros(micro_cfg.d_tok, dtype=np.float32)
    return Extractor(micro_cfg.fused_dim, micro_cfg.mlp_hidden, micro_cfg.d_tok,
                     len(micro_corpus.split.train_ids), anchor, residual=residual)


def test_fused_feature_layout(micro_cfg, micro_corpus, micro_stack, tok):
    encoder, _, _ = micro_stack
    imgs = [micro_corpus.samples[0].image, micro_corpus.samples[1].image]
    fused = fuse_features(encoder, imgs, INFERENCE_TEMPLATE, tok)
    assert fused.shape == (2, micro_cfg.fused_dim)
    # image half is the unit-norm image embedding, text half the pooled text
    img_part = fused[:, :micro_cfg.d_img_out]
    txt_part = fused[:, micro_cfg.d_img_out:]
    assert torch.allclose(img_part.norm(dim=1), torch.ones(2), atol=1e-5)
    assert torch.equal(txt_part[0], txt_part[1])  # same template for both


def test_residual_flag_changes_output_by_anchor(micro_cfg, micro_corpus):
    torch.manual_seed(0)
    anchor = np.arange(micro_cfg.d_tok, dtype=np.float32)
    m1 = Extractor(micro_cfg.fused_dim, 16, micro_cfg.d_tok, 4, anchor, residual=True)
    m2 = Extractor(micro_cfg.fused_dim, 16, micro_cfg.d_tok, 4, anchor, residual=False)
    m2.load_state_dict(m1.state_dict())
    m1.eval(), m2.eval()
    x = torch.randn(3, micro_cfg.fused_dim)
    with torch.no_grad():
        out1, log1 = m1(x)
        out2, log2 = m2(x)
    assert torch.allclose(out1 - out2, torch.as_tensor(anchor).expand(3, -1))
    assert torch.equal(log1, log2)


def test_extractor_loss_components():
    pred = torch.zeros(2, 4)
    target = torch.ones(2, 4)
    logits = torch.tensor([[10.0, -10.0], [-10.0, 10.0]])
    labels = torch.tensor([0, 1])
    # perfect classification: CE ~ 0, so loss ~ MSE = 1
    loss = extractor_loss(pred, target, logits, labels, mse_coef=1.0, ce_coef=1.0)
    assert float(loss) == pytest.approx(1.0, abs=1e-6)
    # coefficient scaling
    loss3 = extractor_loss(pred, target, logits, labels, mse_coef=3.0, ce_coef=0.0)
    assert float(loss3) == pytest.approx(3.0, abs=1e-6)


def test_extractor_loss_label_range():
    with pytest.raises(ValueError):
        extractor_loss(torch.zeros(1, 4), torch.zeros(1, 4),
                       torch.zeros(1, 3), torch.tensor([5]))


def test_extractor_loss_gradient_finite_difference():
    torch.manual_seed(1)
    pred = torch.randn(4, 8, dtype=torch.float64, requires_grad=True)
    target = torch.randn(4, 8, dtype=torch.float64)
    logits = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    labels = torch.tensor([0, 1, 2, 1])
    loss = extractor_loss(pred, target, logits, labels, 1.0, 1.0)
    loss.backward()
    h = 1e-6
    for tensor in (pred, logits):
        i = 3
        plus = tensor.detach().clone()
        minus = tensor.detach().clone()
        plus.view(-1)[i] += h
        minus.view(-1)[i] -= h
        if tensor is pred:
            lp = extractor_loss(plus, target, logits.detach(), labels, 1.0, 1.0)
            lm = extractor_loss(minus, target, logits.detach(), labels, 1.0, 1.0)
        else:
            lp = extractor_loss(pred.detach(), target, plus, labels, 1.0, 1.0)
            lm = extractor_loss(pred.detach(), target, minus, labels, 1.0, 1.0)
        fd = (float(lp) - float(lm)) / (2 * h)
        an = float(tensor.grad.view(-1)[i])
        assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-8)


def test_predict_token_single_and_batch(micro_cfg, micro_corpus):
    from snapdiff.encoders import DualEncoder
    tok = Tokenizer()
    torch.manual_seed(2)
    encoder = DualEncoder(micro_cfg, len(tok))
    model = _fresh_extractor(micro_cfg, micro_corpus)
    one = predict_token([micro_corpus.samples[0].image], INFERENCE_TEMPLATE,
                        model, encoder, tok)
    assert isinstance(one, TokenEmbedding)
    assert one.provenance == "predicted"
    assert one.vector.shape == (micro_cfg.d_tok,)
    many = predict_token([s.image for s in micro_corpus.samples[:3]],
                         INFERENCE_TEMPLATE, model, encoder, tok)
    assert len(many) == 3
    assert np.allclose(many[0].vector, one.vector, atol=1e-5)


def test_train_extractor_learns_separated_targets(micro_cfg, micro_corpus, micro_stack):
    """With well-separated per-concept targets the MLP must beat the anchor."""
    encoder, _, _ = micro_stack
    rng = np.random.default_rng(4)
    bank = EmbeddingBank(micro_cfg.d_tok)
    centers = {cid: rng.normal(scale=0.5, size=micro_cfg.d_tok).astype(np.float32)
               for cid in micro_corpus.split.train_ids}
    for cid in micro_corpus.split.train_ids:
        for j in range(micro_cfg.ti_images_per_concept):
            v = centers[cid] + rng.normal(scale=0.01, size=micro_cfg.d_tok).astype(np.float32)
            bank.add(cid, j, -1, TokenEmbedding(v, cid, "optimized"))
    model, history = train_extractor(bank, micro_corpus, encoder, micro_cfg,
                                     epochs=60, seed=0)
    assert history["val_mse"][-1] < history["val_mse"][0]
    cid = micro_corpus.split.train_ids[0]
    img = micro_corpus.samples_of(cid)[0].image
    pred = predict_token([img], INFERENCE_TEMPLATE, model, encoder)
    own = centers[cid]
    assert np.mean((pred.vector - own) ** 2) < np.mean((model.anchor.numpy() - own) ** 2)


def test_train_extractor_deterministic(micro_cfg, micro_corpus, micro_stack, micro_bank):
    encoder, _, _ = micro_stack
    m1, _ = train_extractor(micro_bank, micro_corpus, encoder, micro_cfg, epochs=2, seed=9)
    m2, _ = train_extractor(micro_bank, micro_corpus, encoder, micro_cfg, epochs=2, seed=9)
    for (k, a), (_, b) in zip(m1.state_dict().items(), m2.state_dict().items()):
        assert torch.equal(a, b), k
