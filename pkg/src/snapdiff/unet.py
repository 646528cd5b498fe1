"""Small text-conditional UNet: two resolutions, sinusoidal time embedding,
cross-attention from spatial features to per-token text states.

Cross-attention submodules are all named ``xattn*`` so the fine-tuning stage
can select their q/k/v/out projections by parameter name.
"""

import math

import torch
from torch import nn


def sinusoidal_embedding(t, dim):
    """t: float tensor of shape (B,). Returns (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / (half - 1))
    ang = t[:, None] * freqs[None]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out, time_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(8, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Spatial queries attend to the per-token text states."""

    def __init__(self, channels, d_cond, heads=4):
        super().__init__()
        assert channels % heads == 0
        self.heads = heads
        self.norm = nn.GroupNorm(8, channels)
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(d_cond, channels)
        self.v = nn.Linear(d_cond, channels)
        self.out = nn.Linear(channels, channels)

    def forward(self, x, cond):
        b, c, hh, ww = x.shape
        h = self.norm(x).flatten(2).transpose(1, 2)  # B, HW, C
        q = self.q(h)
        k = self.k(cond)
        v = self.v(cond)

        def split(z):
            return z.view(b, -1, self.heads, c // self.heads).transpose(1, 2)

        att = torch.softmax(split(q) @ split(k).transpose(-1, -2) / math.sqrt(c // self.heads), dim=-1)
        out = (att @ split(v)).transpose(1, 2).reshape(b, -1, c)
        out = self.out(out).transpose(1, 2).view(b, c, hh, ww)
        return x + out


class UNet(nn.Module):
    """Conditional denoiser returning the predicted noise.

    When ``alpha_bar`` is given, the network predicts the velocity
    v = sqrt(ab) eps - sqrt(1-ab) x0 internally and the output is converted
    to noise via eps = sqrt(1-ab) z + sqrt(ab) v. The velocity target stays
    image-like at high noise levels, so the conditioning circuit learned at
    mid noise keeps working where composition is decided; a plain noise
    target there is almost pure noise and the conditional signal in it decays
    with alpha_bar. The returned quantity (and every loss built on it) is
    still the predicted noise either way.
    """

    def __init__(self, width=32, d_cond=64, heads=4, alpha_bar=None):
        super().__init__()
        w = width
        time_dim = 4 * w
        self.width = w
        self.time_mlp = nn.Sequential(nn.Linear(w, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        # pooled conditioning joins the time embedding; per-token detail still
        # enters through the cross-attention blocks
        self.cond_pool = nn.Linear(d_cond, time_dim)
        self.in_conv = nn.Conv2d(3, w, 3, padding=1)
        self.down1 = ResBlock(w, w, time_dim)
        self.down2 = ResBlock(w, w, time_dim)
        self.xattn0 = CrossAttention(w, d_cond, heads)
        self.downsample = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
        self.mid1 = ResBlock(2 * w, 2 * w, time_dim)
        self.xattn1 = CrossAttention(2 * w, d_cond, heads)
        self.mid2 = ResBlock(2 * w, 2 * w, time_dim)
        self.xattn2 = CrossAttention(2 * w, d_cond, heads)
        self.mid3 = ResBlock(2 * w, 2 * w, time_dim)
        self.upsample = nn.ConvTranspose2d(2 * w, w, 4, stride=2, padding=1)
        self.up1 = ResBlock(2 * w, w, time_dim)
        self.xattn3 = CrossAttention(w, d_cond, heads)
        self.up2 = ResBlock(w, w, time_dim)
        self.out_norm = nn.GroupNorm(8, w)
        self.out_conv = nn.Conv2d(w, 3, 3, padding=1)
        if alpha_bar is None:
            self.ab_table = None
        else:
            # non-persistent: the schedule is config, not a learned weight
            self.register_buffer(
                "ab_table", torch.as_tensor(alpha_bar, dtype=torch.float32),
                persistent=False)

    def forward(self, z, t, cond):
        """z: B x 3 x H x W; t: (B,) timestep indices in [1, T]; cond: B x L x d_cond."""
        temb = self.time_mlp(sinusoidal_embedding(t.to(z.dtype), self.width))
        temb = temb + self.cond_pool(cond.mean(dim=1))
        h = self.in_conv(z)
        h = self.down1(h, temb)
        h = self.down2(h, temb)
        skip = self.xattn0(h, cond)
        h = self.downsample(skip)
        h = self.mid1(h, temb)
        h = self.xattn1(h, cond)
        h = self.mid2(h, temb)
        h = self.xattn2(h, cond)
        h = self.mid3(h, temb)
        h = self.upsample(h)
        h = self.up1(torch.cat([h, skip], dim=1), temb)
        h = self.xattn3(h, cond)
        h = self.up2(h, temb)
        out = self.out_conv(nn.functional.silu(self.out_norm(h)))
        if self.ab_table is None:
            return out
        ab = self.ab_table[t.long() - 1].to(z.dtype)
        ab = ab[:, None, None, None]
        return torch.sqrt(1 - ab) * z + torch.sqrt(ab) * out
