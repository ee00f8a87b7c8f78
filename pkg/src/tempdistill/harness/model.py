"""Small causal transformer used for both teacher and student."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from tempdistill.harness.tokens import VOCAB


@dataclass(frozen=True)
class ModelSpec:
    n_layers: int = 2
    width: int = 32
    n_heads: int = 4
    vocab_size: int = len(VOCAB)
    max_len: int = 160
    mlp_ratio: int = 2
    smeared_keys: bool = True  # mix each key with the previous position's key

    def __post_init__(self):
        if self.width % self.n_heads or (self.width // self.n_heads) % 2:
            raise ValueError("width / n_heads must be an even integer")

    def n_parameters(self) -> int:
        d, v, h = self.width, self.vocab_size, self.mlp_ratio * self.width
        attn = 4 * d * d + 4 * d  # qkv (3d x d + 3d) + out (d x d + d)
        mlp = d * h + h + h * d + d
        norms = 2 * 2 * d
        smear = self.n_heads if self.smeared_keys else 0
        return v * d + self.n_layers * (attn + mlp + norms + smear) + 2 * d + d * v + v


TEACHER_SPEC = ModelSpec(n_layers=3, width=64, n_heads=4)
STUDENT_SPEC = ModelSpec(n_layers=2, width=32, n_heads=4)


def _rotary(L: int, dh: int, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    inv = 1.0 / (10000 ** (torch.arange(0, dh, 2, dtype=torch.float64) / dh))
    ang = torch.arange(L, dtype=torch.float64)[:, None] * inv[None, :]
    return ang.cos().to(dtype), ang.sin().to(dtype)


def _rotate(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    x1, x2 = x[..., 0::2], x[..., 1::2]
    return torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1).flatten(-2)


class Block(nn.Module):
    def __init__(self, d: int, n_heads: int, hidden: int, smeared_keys: bool = False):
        super().__init__()
        self.n_heads = n_heads
        self.smear = nn.Parameter(torch.zeros(n_heads)) if smeared_keys else None
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, hidden), nn.GELU(), nn.Linear(hidden, d))

    def forward(self, x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
        B, L, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).view(B, L, 3, self.n_heads, d // self.n_heads).permute(2, 0, 3, 1, 4)
        if self.smear is not None:
            a = torch.sigmoid(self.smear)[:, None, None]
            k = (1 - a) * k + a * F.pad(k, (0, 0, 1, 0))[:, :, :-1]
        q, k = _rotate(q, cos, sin), _rotate(k, cos, sin)
        a = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        x = x + self.out(a.transpose(1, 2).reshape(B, L, d))
        return x + self.mlp(self.ln2(x))


class ToyModel(nn.Module):
    """Pre-norm causal transformer with rotary positions that exposes
    per-layer activations.

    ``forward`` returns ``(logits, hidden)`` where ``hidden[0]`` is the
    embedding output, ``hidden[k]`` the output of block ``k`` and
    ``hidden[-1]`` the normalized state fed to the unembedding.
    """

    def __init__(self, spec: ModelSpec, model_id: str = "model", seed: int = 0):
        super().__init__()
        self.spec = spec
        self.model_id = model_id
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        d = spec.width
        self.tok = nn.Embedding(spec.vocab_size, d)
        self.blocks = nn.ModuleList(Block(d, spec.n_heads, spec.mlp_ratio * d, spec.smeared_keys) for _ in range(spec.n_layers))
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, spec.vocab_size)
        for p in self.parameters():
            if p.dim() > 1:
                nn.init.normal_(p, std=d**-0.5)
        self.double()
        torch.random.set_rng_state(gen_state)

    def forward(self, ids: torch.Tensor, return_hidden: bool = False):
        L = ids.shape[1]
        if L > self.spec.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {self.spec.max_len}")
        x = self.tok(ids)
        cos, sin = _rotary(L, self.spec.width // self.spec.n_heads, x.dtype)
        hidden = [x]
        for blk in self.blocks:
            x = blk(x, cos, sin)
            hidden.append(x)
        h = self.norm(x)
        logits = self.head(h)
        if return_hidden:
            return logits, hidden + [h]
        return logits

    def flat_parameters(self) -> np.ndarray:
        return nn.utils.parameters_to_vector(self.parameters()).detach().numpy().copy()

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().numpy().tobytes())
        return h.hexdigest()

    def describe(self) -> dict:
        return {"model_id": self.model_id, **asdict(self.spec), "n_parameters": self.spec.n_parameters()}


def pad_batch(seqs, pad_id: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad to a (B, L) tensor; returns ids and the real-token mask."""
    L = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), L), pad_id, dtype=torch.long)
    mask = torch.zeros((len(seqs), L), dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(s, dtype=torch.long)
        mask[i, : len(s)] = True
    return ids, mask
