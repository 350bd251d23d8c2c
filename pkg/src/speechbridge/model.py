"""The four networks and their joint container.

Topology is fixed (layer counts below); only widths scale between the toy
and full presets.  All sub-networks preserve the time axis: convolutions are
stride-1 with same padding, so a T-frame input always yields T output rows.
That alignment is what makes the frame-level diagonal-positive contrastive
construction well-defined.

Sub-networks:

* speech encoder   - 2 convs (GELU) + 6 transformer layers + linear -> d
* phoneme encoder  - embedding -> duration expansion -> 1 conv (ReLU)
                     + 4 transformer layers + linear -> d
* prompt encoder   - 6 convs (ReLU) + squeeze-excite residual block,
                     masked mean pool, linear heads for (mu, sigma)
* decoder          - shared for both embedding streams: 6 transformer layers
                     + 5 convs (Tanh after the first 4) + linear -> 40 mels
* phoneme decoder  - recognition head: 6 transformer layers + linear -> V

Encoder outputs are layer-normalized per row without affine parameters, so
every embedding row has zero mean and unit variance across its d components.
Transformer blocks are pre-norm with sinusoidal positions added at stack
input and a feed-forward ratio of 4.  Dropout is active in training mode
only; forward passes in eval mode are pure functions of (parameters, input).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .frontend import N_MELS, PROMPT_FRAMES

SPEECH_CONV_LAYERS = 2
SPEECH_TRANSFORMER_LAYERS = 6
PHONEME_CONV_LAYERS = 1
PHONEME_TRANSFORMER_LAYERS = 4
PROMPT_CONV_LAYERS = 6
DECODER_TRANSFORMER_LAYERS = 6
DECODER_CONV_LAYERS = 5
ASR_TRANSFORMER_LAYERS = 6
FF_RATIO = 4
CONV_KERNEL = 3

SUBNETWORKS = ("speech_encoder", "phoneme_encoder", "prompt_encoder",
               "decoder", "phoneme_decoder", "temperature")


class ModelError(ValueError):
    """Inconsistent configuration or shape contract violation."""


@dataclass(frozen=True)
class ModelConfig:
    """Width configuration; layer counts are fixed module constants."""

    inventory_size: int
    d: int = 16                 # joint embedding dimension
    hidden: int = 32            # transformer / conv width
    phoneme_dim: int = 64       # embedding table width
    prompt_dim: int = 32        # prompt latent width
    heads: int = 4
    dropout: float = 0.1
    n_mels: int = N_MELS
    kl_margin: float = 0.5
    tau_init: float = 1.0 / 0.07
    tau_max: float = 100.0
    learnable_tau: bool = True
    toy_scale: bool = True

    def __post_init__(self) -> None:
        if self.d < 2:
            raise ModelError("d must be >= 2")
        if self.hidden < self.d:
            raise ModelError(f"hidden ({self.hidden}) must be >= d ({self.d})")
        if self.inventory_size < 2:
            raise ModelError("inventory_size must be >= 2")
        if self.heads < 1 or self.hidden % self.heads != 0:
            raise ModelError("heads must divide hidden")
        if self.n_mels != N_MELS:
            raise ModelError(f"n_mels is fixed at {N_MELS}")
        if min(self.phoneme_dim, self.prompt_dim) < 1:
            raise ModelError("phoneme_dim and prompt_dim must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must be in [0, 1)")
        if self.tau_init <= 0 or self.tau_max <= 0:
            raise ModelError("temperature must be positive")
        if self.kl_margin < 0:
            raise ModelError("kl_margin must be >= 0")

    @classmethod
    def toy(cls, inventory_size: int, **overrides) -> "ModelConfig":
        return cls(inventory_size=inventory_size, **overrides)

    @classmethod
    def full(cls, inventory_size: int, **overrides) -> "ModelConfig":
        params = dict(d=512, hidden=512, phoneme_dim=256, prompt_dim=128,
                      heads=8, toy_scale=False)
        params.update(overrides)
        return cls(inventory_size=inventory_size, **params)

    @classmethod
    def from_flat(cls, cfg: dict, inventory_size: int | None = None) -> "ModelConfig":
        size = cfg["model.inventory_size"] if inventory_size is None else inventory_size
        return cls(
            inventory_size=size,
            d=cfg["model.d"],
            hidden=cfg["model.hidden"],
            phoneme_dim=cfg["model.phoneme_dim"],
            prompt_dim=cfg["model.prompt_dim"],
            heads=cfg["model.heads"],
            dropout=cfg["model.dropout"],
            kl_margin=cfg["loss.kl_margin"],
            tau_init=cfg["loss.tau_init"],
            tau_max=cfg["loss.tau_max"],
            learnable_tau=cfg["loss.learnable_tau"],
            toy_scale=cfg["model.toy_scale"],
        )


@dataclass
class PromptLatent:
    """VAE posterior plus the sampled conditioning vector."""

    mu: Tensor
    sigma: Tensor
    g: Tensor

    def __post_init__(self) -> None:
        if not bool((self.sigma > 0).all()):
            raise ModelError("sigma must be strictly positive")


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

_PE_CACHE: dict[tuple, Tensor] = {}


def positional_encoding(length: int, width: int, dtype: torch.dtype,
                        device: torch.device) -> Tensor:
    """(length, width) sinusoidal table; cached, never trained."""
    key = (length, width, dtype, str(device))
    table = _PE_CACHE.get(key)
    if table is None:
        if width % 2 != 0:
            raise ModelError("positional encoding needs an even width")
        pos = torch.arange(length, dtype=torch.float64)[:, None]
        idx = torch.arange(width // 2, dtype=torch.float64)[None, :]
        angle = pos / torch.pow(10000.0, 2.0 * idx / width)
        table = torch.empty(length, width, dtype=torch.float64)
        table[:, 0::2] = torch.sin(angle)
        table[:, 1::2] = torch.cos(angle)
        table = table.to(dtype=dtype, device=device)
        _PE_CACHE[key] = table
    return table


class TimeConv(nn.Conv1d):
    """Stride-1, same-padded Conv1d applied to (B, T, C) tensors."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(in_channels, out_channels, CONV_KERNEL,
                         padding=CONV_KERNEL // 2)

    def forward(self, x: Tensor) -> Tensor:
        return super().forward(x.transpose(1, 2)).transpose(1, 2)


class TransformerLayer(nn.Module):
    """Pre-norm self-attention block with a GELU feed-forward."""

    def __init__(self, width: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.ln2 = nn.LayerNorm(width)
        self.ff1 = nn.Linear(width, FF_RATIO * width)
        self.ff2 = nn.Linear(FF_RATIO * width, width)
        self.drop = nn.Dropout(dropout)

    def _attention(self, x: Tensor, valid: Tensor | None) -> Tensor:
        b, t, c = x.shape
        hd = c // self.heads
        q, k, v = self.qkv(x).view(b, t, 3, self.heads, hd).permute(2, 0, 3, 1, 4)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        if valid is not None:
            scores = scores.masked_fill(~valid[:, None, None, :], float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.proj(out.permute(0, 2, 1, 3).reshape(b, t, c))

    def forward(self, x: Tensor, valid: Tensor | None = None) -> Tensor:
        x = x + self.drop(self._attention(self.ln1(x), valid))
        return x + self.drop(self.ff2(F.gelu(self.ff1(self.ln2(x)))))


class TransformerStack(nn.Module):
    """Positional encoding + N pre-norm layers + final LayerNorm."""

    def __init__(self, width: int, layers: int, heads: int, dropout: float):
        super().__init__()
        self.layers = nn.ModuleList(
            TransformerLayer(width, heads, dropout) for _ in range(layers))
        self.final_ln = nn.LayerNorm(width)

    def forward(self, x: Tensor, valid: Tensor | None = None) -> Tensor:
        x = x + positional_encoding(x.shape[1], x.shape[2], x.dtype, x.device)
        for layer in self.layers:
            x = layer(x, valid)
        return self.final_ln(x)


def masked_mean(x: Tensor, valid: Tensor | None) -> Tensor:
    """Mean over time (dim 1) restricted to valid frames."""
    if valid is None:
        return x.mean(dim=1)
    w = valid.to(x.dtype)
    return (x * w[:, :, None]).sum(dim=1) / w.sum(dim=1).clamp(min=1.0)[:, None]


class SqueezeExciteBlock(nn.Module):
    """Residual conv pair with channel gating from a squeezed time summary."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        squeezed = max(1, channels // reduction)
        self.conv1 = TimeConv(channels, channels)
        self.conv2 = TimeConv(channels, channels)
        self.fc1 = nn.Linear(channels, squeezed)
        self.fc2 = nn.Linear(squeezed, channels)

    def forward(self, x: Tensor, valid: Tensor | None = None) -> Tensor:
        h = self.conv2(F.relu(self.conv1(x)))
        gate = torch.sigmoid(self.fc2(F.relu(self.fc1(masked_mean(h, valid)))))
        return F.relu(x + h * gate[:, None, :])


# ---------------------------------------------------------------------------
# length regulation
# ---------------------------------------------------------------------------

def length_regulate(embedded: Tensor, durations) -> Tensor:
    """Repeat row i of ``embedded`` (N, D) ``durations[i]`` times, in order."""
    durations = torch.as_tensor(durations, dtype=torch.long,
                                device=embedded.device)
    if embedded.ndim != 2:
        raise ModelError("length_regulate expects an (N, D) matrix")
    if durations.ndim != 1 or durations.shape[0] != embedded.shape[0]:
        raise ModelError("durations must have one entry per row")
    if durations.numel() > 0 and int(durations.min()) < 1:
        raise ModelError("all durations must be >= 1")
    return torch.repeat_interleave(embedded, durations, dim=0)


# ---------------------------------------------------------------------------
# sub-networks
# ---------------------------------------------------------------------------

class SpeechEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_mels = cfg.n_mels
        self.convs = nn.ModuleList([TimeConv(cfg.n_mels, cfg.hidden),
                                    TimeConv(cfg.hidden, cfg.hidden)])
        self.stack = TransformerStack(cfg.hidden, SPEECH_TRANSFORMER_LAYERS,
                                      cfg.heads, cfg.dropout)
        self.out = nn.Linear(cfg.hidden, cfg.d)
        self.row_norm = nn.LayerNorm(cfg.d, elementwise_affine=False)

    def forward(self, mel: Tensor, valid: Tensor | None = None) -> Tensor:
        if mel.ndim != 3 or mel.shape[-1] != self.n_mels:
            raise ModelError(f"expected (B, T, {self.n_mels}) mel input, got {tuple(mel.shape)}")
        x = mel
        for conv in self.convs:
            x = F.gelu(conv(x))
        x = self.stack(x, valid)
        return self.row_norm(self.out(x))


class PhonemeEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.inventory_size = cfg.inventory_size
        self.embedding = nn.Embedding(cfg.inventory_size, cfg.phoneme_dim)
        self.conv = TimeConv(cfg.phoneme_dim, cfg.hidden)
        self.stack = TransformerStack(cfg.hidden, PHONEME_TRANSFORMER_LAYERS,
                                      cfg.heads, cfg.dropout)
        self.out = nn.Linear(cfg.hidden, cfg.d)
        self.row_norm = nn.LayerNorm(cfg.d, elementwise_affine=False)

    def embed(self, ids: Tensor) -> Tensor:
        ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.numel() > 0 and (int(ids.min()) < 0 or int(ids.max()) >= self.inventory_size):
            raise ModelError(f"phoneme id outside inventory of size {self.inventory_size}")
        return self.embedding(ids)

    def forward(self, frames: Tensor, valid: Tensor | None = None) -> Tensor:
        """``frames`` are duration-expanded embeddings, (B, T, phoneme_dim)."""
        x = F.relu(self.conv(frames))
        x = self.stack(x, valid)
        return self.row_norm(self.out(x))


class PromptEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        channels = [cfg.n_mels] + [cfg.hidden] * PROMPT_CONV_LAYERS
        self.convs = nn.ModuleList(TimeConv(a, b)
                                   for a, b in zip(channels[:-1], channels[1:]))
        self.se = SqueezeExciteBlock(cfg.hidden)
        self.mu_head = nn.Linear(cfg.hidden, cfg.prompt_dim)
        self.sigma_head = nn.Linear(cfg.hidden, cfg.prompt_dim)

    def forward(self, clip: Tensor, valid: Tensor | None = None) -> tuple[Tensor, Tensor]:
        if clip.ndim != 3 or clip.shape[1] != PROMPT_FRAMES:
            raise ModelError(f"prompt clip must be (B, {PROMPT_FRAMES}, {N_MELS}), got {tuple(clip.shape)}")
        x = clip
        for conv in self.convs:
            x = F.relu(conv(x))
        x = self.se(x, valid)
        pooled = masked_mean(x, valid)
        mu = self.mu_head(pooled)
        sigma = F.softplus(self.sigma_head(pooled)) + 1e-6
        return mu, sigma


class Decoder(nn.Module):
    """Shared mel decoder; both embedding streams pass through this one module."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.d = cfg.d
        self.in_proj = nn.Linear(cfg.d, cfg.hidden)
        self.g_proj = nn.Linear(cfg.prompt_dim, cfg.hidden)
        self.stack = TransformerStack(cfg.hidden, DECODER_TRANSFORMER_LAYERS,
                                      cfg.heads, cfg.dropout)
        self.convs = nn.ModuleList(TimeConv(cfg.hidden, cfg.hidden)
                                   for _ in range(DECODER_CONV_LAYERS))
        self.out = nn.Linear(cfg.hidden, cfg.n_mels)

    def forward(self, emb: Tensor, g: Tensor, valid: Tensor | None = None) -> Tensor:
        if emb.ndim != 3 or emb.shape[-1] != self.d:
            raise ModelError(f"expected (B, T, {self.d}) embedding, got {tuple(emb.shape)}")
        if g.ndim != 2 or g.shape[0] != emb.shape[0]:
            raise ModelError("g must be (B, prompt_dim)")
        x = self.in_proj(emb) + self.g_proj(g)[:, None, :]
        x = self.stack(x, valid)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < DECODER_CONV_LAYERS - 1:   # Tanh after the first 4 convs
                x = torch.tanh(x)
        return self.out(x)


class PhonemeDecoder(nn.Module):
    """Frame-level phoneme recognition head over speech embeddings."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.d = cfg.d
        self.in_proj = nn.Linear(cfg.d, cfg.hidden)
        self.stack = TransformerStack(cfg.hidden, ASR_TRANSFORMER_LAYERS,
                                      cfg.heads, cfg.dropout)
        self.out = nn.Linear(cfg.hidden, cfg.inventory_size)

    def forward(self, emb: Tensor, valid: Tensor | None = None) -> Tensor:
        if emb.ndim != 3 or emb.shape[-1] != self.d:
            raise ModelError(f"expected (B, T, {self.d}) embedding, got {tuple(emb.shape)}")
        return self.out(self.stack(self.in_proj(emb), valid))


# ---------------------------------------------------------------------------
# joint model
# ---------------------------------------------------------------------------

def _inference_op(fn):
    """Run an op in eval mode under no_grad, restoring the previous mode."""
    def wrapped(self, *args, **kwargs):
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                return fn(self, *args, **kwargs)
        finally:
            self.train(was_training)
    wrapped.__name__ = fn.__name__
    wrapped.__doc__ = fn.__doc__
    return wrapped


class BridgeModel(nn.Module):
    """Joint frame-level speech/phoneme embedding model with shared decoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.speech_encoder = SpeechEncoder(config)
        self.phoneme_encoder = PhonemeEncoder(config)
        self.prompt_encoder = PromptEncoder(config)
        self.decoder = Decoder(config)
        self.phoneme_decoder = PhonemeDecoder(config)
        log_tau = torch.tensor(math.log(config.tau_init))
        if config.learnable_tau:
            self.log_tau = nn.Parameter(log_tau)
        else:
            self.register_buffer("log_tau", log_tau)

    def temperature(self) -> Tensor:
        return self.log_tau.exp().clamp(max=self.config.tau_max)

    def parameter_counts(self) -> dict[str, int]:
        counts = {}
        for name in SUBNETWORKS[:-1]:
            module = getattr(self, name)
            counts[name] = sum(p.numel() for p in module.parameters())
        counts["temperature"] = self.log_tau.numel() if isinstance(self.log_tau, nn.Parameter) else 0
        counts["total"] = sum(counts.values())
        return counts

    # -- inference conveniences (eval mode, no grad, single sequence) -------

    @_inference_op
    def encode_speech(self, mel_frames) -> Tensor:
        """(T, 40) log-mel frames -> (T, d) layer-normalized embedding."""
        mel = torch.as_tensor(mel_frames, dtype=torch.float32)
        if mel.ndim != 2:
            raise ModelError("encode_speech expects a single (T, 40) matrix")
        return self.speech_encoder(mel[None])[0]

    @_inference_op
    def encode_phonemes(self, ids, durations) -> Tensor:
        """Lookup -> duration expansion -> encoder; (sum(durations), d) rows."""
        table = self.phoneme_encoder.embed(torch.as_tensor(ids, dtype=torch.long))
        expanded = length_regulate(table, durations)
        return self.phoneme_encoder(expanded[None])[0]

    @_inference_op
    def encode_prompt(self, clip_frames, n_valid: int | None = None,
                      mode: str = "infer", seed: int = 0) -> PromptLatent:
        """(300, 40) clip -> posterior; train mode samples g = mu + sigma*eps."""
        clip = torch.as_tensor(clip_frames, dtype=torch.float32)
        if clip.ndim != 2:
            raise ModelError("encode_prompt expects a single (300, 40) clip")
        valid = None
        if n_valid is not None:
            valid = (torch.arange(PROMPT_FRAMES) < n_valid)[None]
        mu, sigma = self.prompt_encoder(clip[None], valid)
        if mode == "infer":
            g = mu
        elif mode == "train":
            gen = torch.Generator().manual_seed(seed)
            eps = torch.randn(mu.shape, generator=gen, dtype=mu.dtype)
            g = mu + sigma * eps
        else:
            raise ModelError(f"unknown prompt mode {mode!r}")
        return PromptLatent(mu=mu[0], sigma=sigma[0], g=g[0])

    @_inference_op
    def decode(self, emb, g) -> Tensor:
        """(T, d) embedding + (prompt_dim,) g -> (T, 40) mel prediction."""
        emb = torch.as_tensor(emb, dtype=torch.float32)
        g = torch.as_tensor(g, dtype=torch.float32)
        if emb.ndim != 2 or g.ndim != 1:
            raise ModelError("decode expects (T, d) embedding and (prompt_dim,) g")
        return self.decoder(emb[None], g[None])[0]

    @_inference_op
    def decode_phonemes(self, emb) -> Tensor:
        """(T, d) embedding -> (T, inventory_size) frame logits."""
        emb = torch.as_tensor(emb, dtype=torch.float32)
        if emb.ndim != 2:
            raise ModelError("decode_phonemes expects a single (T, d) matrix")
        return self.phoneme_decoder(emb[None])[0]


def init_model(config: ModelConfig, seed: int = 0) -> BridgeModel:
    """Deterministically initialized model for a given seed."""
    torch.manual_seed(seed)
    return BridgeModel(config)
