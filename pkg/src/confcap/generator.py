"""Quality-conditioned latent diffusion over toy mel features.

A small VAE compresses a 16 x 64 mel patch into a 4-channel 4 x 16 latent.
A U-Net (two down / two up stages, cross-attention to encoded caption states
in the bottleneck) predicts the noise added by a linear-beta forward process.
The conditioning signal is a sinusoidal timestep embedding concatenated with
one row of a learned 5 x 64 quality-level table, projected back to the
timestep width; the level row is the only path by which the quality level
enters the network. Classifier-free guidance drops the caption with
probability 0.1 during training and mixes conditional and unconditional noise
estimates at sampling time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .captioner import pad_id_batch
from .layers import MultiHeadAttention, sinusoidal_table, timestep_embedding
from .tokenizer import VOCAB_SIZE, TokenSequence

MEL_BINS = 16
MEL_FRAMES = 64
N_LEVELS = 5


@dataclass
class GeneratorConfig:
    latent_channels: int = 4
    base_channels: int = 32
    t_max: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    d_time: int = 64
    d_text: int = 64
    text_layers: int = 2
    text_heads: int = 4
    vocab_size: int = VOCAB_SIZE
    guidance_scale: float = 3.0
    cond_dropout: float = 0.1
    kl_weight: float = 1e-6

    def __post_init__(self):
        if self.t_max < 1:
            raise ValueError("t_max must be at least 1")
        if not 0 < self.beta_start < self.beta_end < 1:
            raise ValueError("need 0 < beta_start < beta_end < 1")


class NoiseSchedule:
    """Linear betas over t = 1..t_max with alpha_bar[0] = 1 (t = 0 is identity)."""

    def __init__(self, cfg: GeneratorConfig):
        self.t_max = cfg.t_max
        betas = torch.linspace(cfg.beta_start, cfg.beta_end, cfg.t_max)
        alphas = 1.0 - betas
        self.betas = torch.cat([torch.zeros(1), betas])  # index by t
        self.alpha_bar = torch.cat([torch.ones(1), torch.cumprod(alphas, dim=0)])

    def diffuse(self, z0: torch.Tensor, t: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) noise; t may be per-item [B]."""
        t = torch.as_tensor(t, dtype=torch.long)
        if (t < 0).any() or (t > self.t_max).any():
            raise ValueError(f"timestep outside 0..{self.t_max}")
        abar = self.alpha_bar[t].to(z0.dtype)
        while abar.dim() < z0.dim():
            abar = abar.unsqueeze(-1)
        return abar.sqrt() * z0 + (1.0 - abar).sqrt() * noise


class MelVAE(nn.Module):
    """Two-stride-2 conv encoder to a diagonal Gaussian latent, mirrored decoder."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        c = cfg.latent_channels
        self.enc = nn.Sequential(
            nn.Conv2d(1, 16, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(16, 32, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(32, 2 * c, 3, padding=1),
        )
        self.dec = nn.Sequential(
            nn.Conv2d(c, 32, 3, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(32, 16, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(16, 8, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(8, 1, 3, padding=1),
        )

    def encode(self, mel: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """mel [B, 1, 16, 64] -> (mean, logvar), each [B, C, 4, 16]."""
        h = self.enc(mel)
        mean, logvar = h.chunk(2, dim=1)
        return mean, logvar

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.dec(z)

    @staticmethod
    def kl(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
        """Mean KL(q || N(0, I)) per element; zero exactly at (0, 0)."""
        return (-0.5 * (1.0 + logvar - mean.pow(2) - logvar.exp())).mean()


class TextEncoder(nn.Module):
    """Tiny bidirectional transformer over caption word ids."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        d = cfg.d_text
        self.tok_emb = nn.Embedding(cfg.vocab_size, d)
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        self.register_buffer("pos", sinusoidal_table(64, d), persistent=False)
        self.attn = nn.ModuleList(
            MultiHeadAttention(d, cfg.text_heads) for _ in range(cfg.text_layers)
        )
        self.norms1 = nn.ModuleList(nn.LayerNorm(d) for _ in range(cfg.text_layers))
        self.norms2 = nn.ModuleList(nn.LayerNorm(d) for _ in range(cfg.text_layers))
        self.ffns = nn.ModuleList(
            nn.Sequential(nn.Linear(d, 2 * d), nn.GELU(), nn.Linear(2 * d, d))
            for _ in range(cfg.text_layers)
        )
        self.ln_out = nn.LayerNorm(d)

    def forward(self, ids: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        b, length = ids.shape
        x = self.tok_emb(ids) + self.pos[:length]
        mask = None
        if valid is not None:
            mask = valid[:, None, :].expand(b, length, length)
            mask = mask | torch.eye(length, dtype=torch.bool, device=ids.device)
        for attn, n1, n2, ffn in zip(self.attn, self.norms1, self.norms2, self.ffns):
            h = n1(x)
            x = x + attn(h, h, mask)
            x = x + ffn(n2(x))
        return self.ln_out(x)


class _ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, d_emb: int):
        super().__init__()
        groups = 4
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb_proj = nn.Linear(d_emb, c_out)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """U-Net noise predictor conditioned on timestep, quality level, and text."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        b = cfg.base_channels
        c = cfg.latent_channels
        d_t = cfg.d_time
        # Level rows live in a learned table; one row is concatenated with the
        # timestep embedding and projected back to the timestep width.
        self.level_table = nn.Parameter(torch.empty(N_LEVELS, d_t).normal_(std=0.5))
        self.emb_proj = nn.Sequential(nn.Linear(2 * d_t, d_t), nn.SiLU(), nn.Linear(d_t, d_t))
        self.null_text = nn.Parameter(torch.zeros(1, 1, cfg.d_text))

        self.conv_in = nn.Conv2d(c, b, 3, padding=1)
        self.down_res1 = _ResBlock(b, b, d_t)
        self.down1 = nn.Conv2d(b, b, 4, stride=2, padding=1)
        self.down_res2 = _ResBlock(b, 2 * b, d_t)
        self.down2 = nn.Conv2d(2 * b, 2 * b, 4, stride=2, padding=1)
        self.mid_res1 = _ResBlock(2 * b, 2 * b, d_t)
        self.mid_norm = nn.GroupNorm(4, 2 * b)
        self.mid_q = nn.Linear(2 * b, 2 * b)
        self.cross = MultiHeadAttention(2 * b, 4, kv_dim=cfg.d_text)
        self.mid_res2 = _ResBlock(2 * b, 2 * b, d_t)
        self.up2 = nn.ConvTranspose2d(2 * b, 2 * b, 4, stride=2, padding=1)
        self.up_res2 = _ResBlock(4 * b, b, d_t)
        self.up1 = nn.ConvTranspose2d(b, b, 4, stride=2, padding=1)
        self.up_res1 = _ResBlock(2 * b, b, d_t)
        self.norm_out = nn.GroupNorm(4, b)
        self.conv_out = nn.Conv2d(b, c, 3, padding=1)

    def forward(
        self,
        z_t: torch.Tensor,
        t: torch.Tensor,
        text_states: torch.Tensor,
        level: torch.Tensor,
    ) -> torch.Tensor:
        """z_t [B, C, 4, 16], t [B], text_states [B, L, d_text], level [B] -> noise estimate."""
        t = torch.as_tensor(t, dtype=torch.long)
        level = torch.as_tensor(level, dtype=torch.long)
        if (level < 0).any() or (level >= N_LEVELS).any():
            raise ValueError(f"quality level outside 0..{N_LEVELS - 1}")
        emb = torch.cat(
            [timestep_embedding(t, self.cfg.d_time).to(z_t.dtype), self.level_table[level]],
            dim=-1,
        )
        emb = self.emb_proj(emb)

        h0 = self.conv_in(z_t)
        d1 = self.down_res1(h0, emb)
        h = self.down1(d1)
        d2 = self.down_res2(h, emb)
        h = self.down2(d2)
        h = self.mid_res1(h, emb)
        b, ch, fh, fw = h.shape
        flat = self.mid_norm(h).flatten(2).transpose(1, 2)  # [B, fh*fw, ch]
        flat = self.cross(self.mid_q(flat), text_states)
        h = h + flat.transpose(1, 2).reshape(b, ch, fh, fw)
        h = self.mid_res2(h, emb)
        h = self.up2(h)
        h = self.up_res2(torch.cat([h, d2], dim=1), emb)
        h = self.up1(h)
        h = self.up_res1(torch.cat([h, d1], dim=1), emb)
        return self.conv_out(F.silu(self.norm_out(h)))


class QualityDiffusion(nn.Module):
    """VAE + text encoder + denoiser bundle with training and sampling ops."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.vae = MelVAE(cfg)
        self.text = TextEncoder(cfg)
        self.denoiser = Denoiser(cfg)
        self.schedule = NoiseSchedule(cfg)

    def encode_captions(self, captions: list[TokenSequence]) -> torch.Tensor:
        ids, valid = pad_id_batch([c.encoder_ids() for c in captions])
        return self.text(ids, valid)

    def null_states(self, batch: int) -> torch.Tensor:
        return self.denoiser.null_text.expand(batch, -1, -1)

    def vae_loss(
        self, mel: torch.Tensor, g: torch.Generator | None = None
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        mean, logvar = self.vae.encode(mel)
        eps = torch.randn(mean.shape, generator=g, dtype=mean.dtype)
        z = mean + (0.5 * logvar).exp() * eps
        recon = self.vae.decode(z)
        mse = F.mse_loss(recon, mel)
        kl = self.vae.kl(mean, logvar)
        return mse + self.cfg.kl_weight * kl, mse, kl

    def diffusion_loss(
        self,
        mel: torch.Tensor,
        captions: list[TokenSequence],
        levels: torch.Tensor,
        g: torch.Generator | None = None,
    ) -> torch.Tensor:
        """One denoising-MSE step with classifier-free condition dropout."""
        with torch.no_grad():
            z0, _ = self.vae.encode(mel)
        b = z0.shape[0]
        t = torch.randint(1, self.cfg.t_max + 1, (b,), generator=g)
        noise = torch.randn(z0.shape, generator=g, dtype=z0.dtype)
        z_t = self.schedule.diffuse(z0, t, noise)
        text_states = self.encode_captions(captions)
        drop = torch.rand(b, generator=g) < self.cfg.cond_dropout
        if bool(drop.any()):
            null = self.null_states(b).expand(-1, text_states.shape[1], -1)
            text_states = torch.where(drop[:, None, None], null, text_states)
        pred = self.denoiser(z_t, t, text_states, levels)
        return F.mse_loss(pred, noise)

    @torch.no_grad()
    def sample(
        self,
        caption: TokenSequence,
        level: int = N_LEVELS - 1,
        steps: int | None = None,
        guidance_scale: float | None = None,
        seed: int = 0,
    ) -> np.ndarray:
        """Ancestral sampling to a [16, 64] mel; deterministic given the seed."""
        cfg = self.cfg
        steps = cfg.t_max if steps is None else steps
        if not 1 <= steps <= cfg.t_max:
            raise ValueError(f"steps must be in 1..{cfg.t_max}")
        scale = cfg.guidance_scale if guidance_scale is None else guidance_scale
        g = torch.Generator()
        g.manual_seed(seed)
        taus = np.unique(np.linspace(0, cfg.t_max, steps + 1).round().astype(int))
        abar = self.schedule.alpha_bar
        z = torch.randn(1, cfg.latent_channels, MEL_BINS // 4, MEL_FRAMES // 4, generator=g)
        cond = self.encode_captions([caption])
        uncond = self.null_states(1)
        level_t = torch.tensor([level])
        for i in range(len(taus) - 1, 0, -1):
            t_cur, t_prev = int(taus[i]), int(taus[i - 1])
            t_batch = torch.tensor([t_cur])
            eps = self.denoiser(z, t_batch, cond, level_t)
            if scale != 1.0:
                eps_u = self.denoiser(z, t_batch, uncond, level_t)
                eps = eps_u + scale * (eps - eps_u)
            a_cur, a_prev = float(abar[t_cur]), float(abar[t_prev])
            alpha = a_cur / a_prev
            beta = 1.0 - alpha
            z = (z - beta / math.sqrt(1.0 - a_cur) * eps) / math.sqrt(alpha)
            if t_prev > 0:
                var = beta * (1.0 - a_prev) / (1.0 - a_cur)
                z = z + math.sqrt(var) * torch.randn(z.shape, generator=g)
        mel = self.vae.decode(z)
        return mel[0, 0].numpy()


def mel_from_features(feats: np.ndarray) -> np.ndarray:
    """Deterministic [T, 32] feature matrix -> [16, 64] mel patch (mean pooling)."""
    x = torch.as_tensor(np.asarray(feats, dtype=np.float32).T).unsqueeze(0).unsqueeze(0)
    return F.adaptive_avg_pool2d(x, (MEL_BINS, MEL_FRAMES))[0, 0].numpy()
