"""Training objectives.

The central object is the flattened similarity matrix: both embedding
batches (B, T, d) are reshaped row-major to (B*T, d) so that row k of the
speech side and row k of the phoneme side describe the same (utterance,
frame) slot.  Only those index-matched pairs are positives; every other
entry of the (B*T) x (B*T) matrix is a negative, including other frames of
the same phoneme elsewhere in the batch (a known characteristic of the
frame-level construction, not a bug).

Padded frames contribute nothing anywhere: their rows and columns are
dropped from the similarity softmaxes and their terms are excluded from the
reconstruction and cross-entropy means.  All functions take torch tensors
(float32 for training, float64 in the numerics tests) and are pure.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

VARIANTS = ("full", "no_decoder", "plus_embed_mse", "plus_phoneme_decoder")


class LossError(ValueError):
    """Shape mismatch, bad temperature, or variant/component inconsistency."""


@dataclass
class SimilarityMatrix:
    """Temperature-scaled logits with diagonal positives.

    ``valid`` flags which flattened (utterance, frame) slots are real; rows
    and columns at padded slots are excluded downstream.
    """

    logits: Tensor              # (B*T, B*T)
    tau: Tensor | float
    valid: Tensor | None = None

    def __post_init__(self) -> None:
        if self.logits.ndim != 2 or self.logits.shape[0] != self.logits.shape[1]:
            raise LossError(f"similarity matrix must be square, got {tuple(self.logits.shape)}")
        if self.valid is not None and self.valid.shape[0] != self.logits.shape[0]:
            raise LossError("valid mask length must match the matrix size")


def similarity_matrix(speech: Tensor, phoneme: Tensor, tau: Tensor | float,
                      l2_normalize: bool = True,
                      valid_mask: Tensor | None = None) -> SimilarityMatrix:
    """tau * (S_re @ P_re^T) over row-major flattened (B, T, d) batches."""
    if speech.shape != phoneme.shape:
        raise LossError(f"shape mismatch: {tuple(speech.shape)} vs {tuple(phoneme.shape)}")
    if speech.ndim != 3:
        raise LossError("expected (B, T, d) embedding batches")
    tau_value = float(tau.detach()) if torch.is_tensor(tau) else float(tau)
    if tau_value <= 0:
        raise LossError("tau must be positive")
    b, t, d = speech.shape
    s_re = speech.reshape(b * t, d)
    p_re = phoneme.reshape(b * t, d)
    if l2_normalize:
        s_re = F.normalize(s_re, dim=-1, eps=1e-12)
        p_re = F.normalize(p_re, dim=-1, eps=1e-12)
    logits = tau * (s_re @ p_re.T)
    flat_valid = None
    if valid_mask is not None:
        if valid_mask.shape != (b, t):
            raise LossError("valid_mask must be (B, T)")
        flat_valid = valid_mask.reshape(b * t)
    return SimilarityMatrix(logits=logits, tau=tau, valid=flat_valid)


def contrastive_loss(sim: SimilarityMatrix) -> Tensor:
    """Symmetric cross-entropy on the diagonal positives.

    Mean over rows of -log softmax(row)[diag] plus the same over columns,
    halved.  Exactly zero only when every softmax concentrates on the
    diagonal; a 1x1 matrix gives 0 because its softmax is the constant 1.
    """
    logits = sim.logits
    if sim.valid is not None:
        keep = sim.valid.nonzero(as_tuple=True)[0]
        if keep.numel() == 0:
            raise LossError("no valid frames in similarity matrix")
        logits = logits[keep][:, keep]
    targets = torch.arange(logits.shape[0], device=logits.device)
    loss_speech = F.cross_entropy(logits, targets)
    loss_phoneme = F.cross_entropy(logits.T, targets)
    return 0.5 * (loss_speech + loss_phoneme)


def masked_mse(pred: Tensor, target: Tensor, valid: Tensor | None = None) -> Tensor:
    """Mean squared error over valid frames (all frames when no mask)."""
    if pred.shape != target.shape:
        raise LossError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    sq = (pred - target) ** 2
    if valid is None:
        return sq.mean()
    if valid.shape != pred.shape[:-1]:
        raise LossError("valid mask must match the frame axes")
    w = valid.to(pred.dtype)
    return (sq * w[..., None]).sum() / (w.sum() * pred.shape[-1]).clamp(min=1.0)


def mse_loss(mel_s_pred: Tensor, mel_p_pred: Tensor, mel_gt: Tensor,
             valid: Tensor | None = None) -> Tensor:
    """Dual reconstruction error, half the sum of the two stream MSEs."""
    return 0.5 * (masked_mse(mel_s_pred, mel_gt, valid)
                  + masked_mse(mel_p_pred, mel_gt, valid))


def kl_margin_loss(mu: Tensor, sigma: Tensor, margin: float) -> Tensor:
    """Hinged Gaussian KL against the standard normal, in nats.

    KL = 0.5 * sum(mu^2 + sigma^2 - 1 - log sigma^2) per latent; values below
    ``margin`` are forgiven (free bits against posterior collapse).  Batched
    inputs hinge each row, then average.
    """
    if mu.shape != sigma.shape:
        raise LossError("mu and sigma must have the same shape")
    if not bool((sigma > 0).all()):
        raise LossError("sigma must be strictly positive")
    if margin < 0:
        raise LossError("margin must be >= 0")
    var = sigma ** 2
    kl = 0.5 * (mu ** 2 + var - 1.0 - torch.log(var)).sum(dim=-1)
    return torch.clamp(kl - margin, min=0.0).mean()


def embedding_mse_loss(speech: Tensor, phoneme: Tensor,
                       valid: Tensor | None = None) -> Tensor:
    """Direct agreement penalty between the two streams (ablation)."""
    return masked_mse(speech, phoneme, valid)


def phoneme_ce_loss(logits: Tensor, targets: Tensor,
                    valid: Tensor | None = None) -> Tensor:
    """Mean per-frame cross-entropy of recognition logits."""
    if logits.shape[:-1] != targets.shape:
        raise LossError("targets must match the frame axes of logits")
    n_classes = logits.shape[-1]
    if targets.numel() > 0 and (int(targets.min()) < 0 or int(targets.max()) >= n_classes):
        raise LossError(f"target id outside [0, {n_classes})")
    flat_logits = logits.reshape(-1, n_classes)
    flat_targets = targets.reshape(-1)
    if valid is not None:
        if valid.shape != targets.shape:
            raise LossError("valid mask must match targets")
        keep = valid.reshape(-1)
        flat_logits = flat_logits[keep]
        flat_targets = flat_targets[keep]
    return F.cross_entropy(flat_logits, flat_targets)


@dataclass
class LossBreakdown:
    """Per-component values plus their sum; total is always the exact sum."""

    variant: str
    contrastive: Tensor | float | None = None
    mse: Tensor | float | None = None
    kl: Tensor | float | None = None
    embed_mse: Tensor | float | None = None
    phoneme_ce: Tensor | float | None = None
    total: Tensor | float = 0.0

    def to_floats(self) -> dict[str, float]:
        out = {"variant": self.variant}
        for name in ("contrastive", "mse", "kl", "embed_mse", "phoneme_ce", "total"):
            value = getattr(self, name)
            if value is not None:
                out[name] = float(value)
        return out


_REQUIRED = {
    "full": ("contrastive", "mse", "kl"),
    "no_decoder": ("contrastive",),
    "plus_embed_mse": ("contrastive", "mse", "kl", "embed_mse"),
    "plus_phoneme_decoder": ("contrastive", "mse", "kl", "phoneme_ce"),
}


def total_loss(variant: str, contrastive=None, mse=None, kl=None,
               embed_mse=None, phoneme_ce=None) -> LossBreakdown:
    """Combine components per training variant; strict about what may appear."""
    if variant not in VARIANTS:
        raise LossError(f"unknown variant {variant!r}")
    given = {"contrastive": contrastive, "mse": mse, "kl": kl,
             "embed_mse": embed_mse, "phoneme_ce": phoneme_ce}
    required = _REQUIRED[variant]
    for name in required:
        if given[name] is None:
            raise LossError(f"variant {variant!r} requires component {name!r}")
    for name, value in given.items():
        if value is not None and name not in required:
            raise LossError(f"variant {variant!r} does not take component {name!r}")
    total = sum(given[name] for name in required)
    return LossBreakdown(variant=variant, total=total, **given)
