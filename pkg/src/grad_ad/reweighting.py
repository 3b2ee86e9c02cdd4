"""Feature-density reweighting of training patches.

Two FIFO memory banks hold recent detector features: one for positive
(normal) patches and one for negative patches.  A patch's density under a
bank is the sum of ``exp(beta * cos(z, z'))`` over the bank entries; its
weight is the reciprocal of that density.

* noisy weight (negatives, against the positive bank) suppresses generated
  patches that look normal;
* tail weight (each class against its own bank) suppresses over-represented
  patterns.
"""

from __future__ import annotations

import csv
from pathlib import Path

import torch

EPS_COS = 1e-12
EPS_PROB = 1e-7


class MemoryBank:
    """Bounded FIFO queue of detached feature vectors."""

    def __init__(self, capacity: int = 512, dim: int = 256):
        self.capacity = capacity
        self.dim = dim
        self.entries = torch.empty(0, dim)

    def __len__(self) -> int:
        return len(self.entries)

    def push(self, features: torch.Tensor) -> "MemoryBank":
        features = features.detach().reshape(-1, features.shape[-1]).to(self.entries.dtype).cpu()
        if features.shape[1] != self.dim:
            raise ValueError(f"feature dim {features.shape[1]} does not match bank dim {self.dim}")
        self.entries = torch.cat([self.entries, features])[-self.capacity:]
        return self

    def snapshot(self) -> torch.Tensor:
        return self.entries.clone()


def bank_update(bank: MemoryBank, features_batch: torch.Tensor) -> MemoryBank:
    return bank.push(features_batch)


def cosine_sim(z: torch.Tensor, z2: torch.Tensor) -> float:
    nz, nz2 = torch.linalg.vector_norm(z), torch.linalg.vector_norm(z2)
    if nz == 0 or nz2 == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(torch.dot(z, z2) / (nz * nz2 + EPS_COS))


def _cosine_matrix(z: torch.Tensor, bank: torch.Tensor) -> torch.Tensor:
    zn = z / (torch.linalg.vector_norm(z, dim=1, keepdim=True) + EPS_COS)
    bn = bank / (torch.linalg.vector_norm(bank, dim=1, keepdim=True) + EPS_COS)
    return zn @ bn.T


def density_weight(z: torch.Tensor, bank: MemoryBank | torch.Tensor, beta: float,
                   min_entries: int = 1) -> torch.Tensor:
    """1 / sum_{z' in bank} exp(beta * cos(z', z)), evaluated in log space.

    ``z`` may be a single vector (returns a 0-d tensor) or an (N, D) batch.
    Banks holding fewer than ``min_entries`` vectors give weight 1.
    """
    if beta <= 0:
        raise ValueError(f"beta_density must be positive, got {beta}")
    entries = bank.entries if isinstance(bank, MemoryBank) else bank
    single = z.dim() == 1
    z = z.detach().reshape(-1, z.shape[-1])
    if len(entries) < max(min_entries, 1):
        w = torch.ones(len(z), dtype=z.dtype, device=z.device)
    else:
        sims = _cosine_matrix(z, entries.to(z.device, z.dtype))
        w = torch.exp(-torch.logsumexp(beta * sims, dim=1))
    return w[0] if single else w


def noisy_weight(z_neg: torch.Tensor, bank_pos: MemoryBank | torch.Tensor, beta: float,
                 min_entries: int = 1) -> torch.Tensor:
    """Weight of negative features by their density under the positive bank."""
    return density_weight(z_neg, bank_pos, beta, min_entries)


def tail_weights(z: torch.Tensor, bank_same_class: MemoryBank | torch.Tensor, beta: float,
                 min_entries: int = 1) -> torch.Tensor:
    """Weight of features by their density under the bank of their own class."""
    return density_weight(z, bank_same_class, beta, min_entries)


def normalize(weights: torch.Tensor) -> torch.Tensor:
    return weights / weights.sum()


def rbce_loss(pos_probs: torch.Tensor, neg_probs: torch.Tensor, w_tail_pos: torch.Tensor,
              w_tail_neg: torch.Tensor, w_noisy_neg: torch.Tensor) -> torch.Tensor:
    """Reweighted binary cross-entropy.

    ``f`` is the anomaly probability, so positives (normal patches) are pushed
    toward 0 and negatives toward 1.  Each class's weights are normalised to
    sum to one before weighting its log-likelihood terms.
    """
    pos = pos_probs.reshape(-1).clamp(EPS_PROB, 1 - EPS_PROB)
    neg = neg_probs.reshape(-1).clamp(EPS_PROB, 1 - EPS_PROB)
    wp = normalize(w_tail_pos.reshape(-1).detach().to(pos.dtype))
    wn = normalize((w_tail_neg.reshape(-1) * w_noisy_neg.reshape(-1)).detach().to(neg.dtype))
    loss = pos.new_zeros(())
    if len(pos):
        loss = loss - (wp * torch.log1p(-pos)).sum()
    if len(neg):
        loss = loss - (wn * torch.log(neg)).sum()
    return loss


class WeightDump:
    """CSV writer for (step, provenance, w_noisy, w_tail) rows."""

    header = ("step", "provenance", "w_noisy", "w_tail")

    def __init__(self, path: str | Path):
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(self.header)

    def write(self, step: int, provenance, w_noisy, w_tail) -> None:
        for tag, a, b in zip(provenance, w_noisy.tolist(), w_tail.tolist()):
            self._writer.writerow((step, tag, f"{a:.6e}", f"{b:.6e}"))

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
