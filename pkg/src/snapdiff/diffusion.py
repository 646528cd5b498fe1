"""Noise schedule, forward corruption, conditional denoising loss, base-model
training and deterministic DDIM sampling with classifier-free guidance."""

from dataclasses import dataclass

import numpy as np
import torch

from . import corpus as corpus_mod
from . import instrument
from .tokenizer import Tokenizer
from .unet import UNet


@dataclass
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def ab(self, t):
        """alpha_bar at 1-based timestep t (scalar or array)."""
        t = np.asarray(t)
        if np.any((t < 1) | (t > self.T)):
            raise ValueError(f"timestep out of range [1, {self.T}]")
        return self.alpha_bar[t - 1]


def make_schedule(T, beta_start=1e-4, beta_end=2e-2):
    if not 0 < beta_start < beta_end < 1:
        raise ValueError("need 0 < beta_start < beta_end < 1")
    if T < 1:
        raise ValueError("T must be positive")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    return NoiseSchedule(T, beta, alpha, np.cumprod(alpha))


def q_sample(x0, t, epsilon, schedule):
    """Closed-form corruption: x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    if epsilon.shape != x0.shape:
        raise ValueError("epsilon must match x0's shape")
    ab = schedule.ab(t)
    if torch.is_tensor(x0):
        ab = torch.as_tensor(ab, dtype=x0.dtype)
        while ab.dim() < x0.dim():
            ab = ab[..., None]
        return torch.sqrt(ab) * x0 + torch.sqrt(1 - ab) * epsilon
    ab = np.reshape(ab, np.shape(ab) + (1,) * (x0.ndim - np.ndim(ab)))
    return np.sqrt(ab) * x0 + np.sqrt(1 - ab) * epsilon


def cfg_combine(eps_cond, eps_uncond, scale):
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError("shape mismatch between conditional and unconditional predictions")
    return eps_uncond + scale * (eps_cond - eps_uncond)


def ldm_loss(x0, token_states, t, epsilon, model, schedule):
    """Conditional denoising MSE. x0 in [0,1], rescaled to [-1,1] here.

    Differentiable through the model parameters and through token_states, so
    it also drives token-vector optimization.
    """
    x0 = 2.0 * x0 - 1.0
    z = q_sample(x0, t, epsilon, schedule)
    t_tensor = torch.as_tensor(t, dtype=x0.dtype)
    if t_tensor.dim() == 0:
        t_tensor = t_tensor.expand(x0.shape[0])
    pred = model(z, t_tensor, token_states)
    return torch.mean((epsilon - pred) ** 2)


class TrainingDiverged(RuntimeError):
    pass


def uncond_states(encoder, tok):
    """Token states of the all-pad sequence; the CFG null conditioning."""
    ids = torch.full((1, tok.max_len), tok.pad_id)
    with torch.no_grad():
        _, states = encoder.text_tower(ids)
    return states


def train_base(corpus, encoder, cfg, epochs=None, log=None):
    """Train the conditional denoiser on the train split.

    Captions pair each image with a random template filled with the concept's
    attribute words; 10% of batches use null conditioning so classifier-free
    guidance is meaningful at sampling time.
    """
    seed = cfg.stage_seed("base")
    torch.manual_seed(seed)
    schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    model = UNet(cfg.unet_width, cfg.d_tok, cfg.n_heads, alpha_bar=schedule.alpha_bar)
    tok = Tokenizer(max_len=cfg.max_len)
    encoder.eval()
    null_states = uncond_states(encoder, tok)

    samples = [s for s in corpus.samples if s.concept.identity_id in set(corpus.split.train_ids)]
    images = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32)).permute(0, 3, 1, 2)
    names = [s.concept.name for s in samples]
    bgs = [s.background_id for s in samples]

    opt = torch.optim.Adam(model.parameters(), lr=cfg.base_lr)
    rng = np.random.Generator(np.random.PCG64(seed))
    epochs = epochs or cfg.base_epochs
    losses = []
    last_good = None
    # exponential moving average of the weights; sampling quality at this
    # scale is noticeably better from the averaged model. The horizon must be
    # short relative to the run or the average still carries the random init.
    ema_decay = 0.995
    ema = {k: v.detach().clone() for k, v in model.state_dict().items()}
    for epoch in range(epochs):
        order = rng.permutation(len(samples))
        for start in range(0, len(order), cfg.base_batch):
            idx = order[start:start + cfg.base_batch]
            x0 = images[idx]
            if rng.random() < cfg.cond_dropout:
                states = null_states.expand(len(idx), -1, -1)
            else:
                caps = []
                for i in idx:
                    template = corpus_mod.TEMPLATES[rng.integers(len(corpus_mod.TEMPLATES))]
                    if rng.random() < 0.5:
                        text = corpus_mod.caption_with_background(names[i], template, bgs[i])
                    else:
                        text = corpus_mod.caption(names[i], template)
                    caps.append(tok.encode(text))
                with torch.no_grad():
                    _, states = encoder.text_tower(torch.tensor(caps))
            t = rng.integers(1, schedule.T + 1, size=len(idx))
            eps = torch.randn(x0.shape, generator=torch.Generator().manual_seed(int(rng.integers(2**31))))
            loss = ldm_loss(x0, states, t, eps, model, schedule)
            if not torch.isfinite(loss):
                if last_good is not None:
                    model.load_state_dict(last_good)
                raise TrainingDiverged(f"loss not finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            instrument.count_grad_step()
            losses.append(loss.item())
            with torch.no_grad():
                for k, v in model.state_dict().items():
                    if v.dtype.is_floating_point:
                        ema[k].mul_(ema_decay).add_(v, alpha=1 - ema_decay)
                    else:
                        ema[k] = v.detach().clone()
        if epoch % 20 == 0:
            last_good = {k: v.clone() for k, v in model.state_dict().items()}
            if log:
                log(epoch, float(np.mean(losses[-len(order) // cfg.base_batch - 1:])))
    model.load_state_dict(ema)
    return model, schedule, losses


def ddim_timesteps(T, steps):
    """Strictly increasing 1-based subsequence ending at T."""
    if steps > T:
        raise ValueError("steps must not exceed T")
    taus = np.unique(np.round(np.linspace(1, T, steps)).astype(int))
    return taus


def ddim_generate(eps_fn, schedule, shape, steps, seed=None, x_init=None):
    """Deterministic DDIM (eta = 0) in the [-1, 1] domain.

    eps_fn(z, t_batch) must return the predicted noise; guidance, if any, is
    the caller's business. Returns the raw final x0 estimate (not clipped).
    """
    taus = ddim_timesteps(schedule.T, steps)[::-1]
    if x_init is None:
        g = torch.Generator().manual_seed(int(seed))
        z = torch.randn(shape, generator=g)
    else:
        z = x_init.clone()
    for i, t in enumerate(taus):
        t_batch = torch.full((shape[0],), float(t))
        eps = eps_fn(z, t_batch)
        ab_t = float(schedule.ab(t))
        x0_hat = (z - np.sqrt(1 - ab_t) * eps) / np.sqrt(ab_t)
        if i + 1 < len(taus):
            ab_prev = float(schedule.ab(int(taus[i + 1])))
            z = np.sqrt(ab_prev) * x0_hat + np.sqrt(1 - ab_prev) * eps
        else:
            z = x0_hat
    return z


def ddim_sample(token_states, model, schedule, steps=50, scale=10.0, seed=0,
                null_states=None, n=1, canvas=32):
    """Sample images in [0,1] for one conditioning; bit-deterministic given seed."""
    model.eval()
    if token_states.dim() == 2:
        token_states = token_states[None]
    cond = token_states.expand(n, -1, -1)
    if null_states is None:
        null = torch.zeros_like(cond)
    else:
        null = null_states.expand(n, -1, -1)

    def eps_fn(z, t_batch):
        with torch.no_grad():
            eps_c = model(z, t_batch, cond)
            if scale == 1.0 or null_states is None:
                return eps_c
            eps_u = model(z, t_batch, null)
        return cfg_combine(eps_c, eps_u, scale)

    x = ddim_generate(eps_fn, schedule, (n, 3, canvas, canvas), steps, seed=seed)
    x = torch.clamp((x + 1) / 2, 0.0, 1.0)
    return x.permute(0, 2, 3, 1).numpy().astype(np.float64)
