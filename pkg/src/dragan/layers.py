"""Small pre-LayerNorm transformer blocks shared by the generator and classifier."""
from __future__ import annotations

import contextlib
import math

import torch
from torch import nn


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model={d_model} not divisible by heads={heads}")
        self.heads = heads
        self.d_head = d_model // heads
        self.q = nn.Linear(d_model, d_model)
        self.kv = nn.Linear(d_model, 2 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x, ctx=None, key_mask=None, causal=False):
        # key_mask: (N, Tk) bool, True where the key is a real token
        ctx = x if ctx is None else ctx
        n, tq, d = x.shape
        tk = ctx.shape[1]
        q = self.q(x).view(n, tq, self.heads, self.d_head).transpose(1, 2)
        k, v = self.kv(ctx).view(n, tk, 2, self.heads, self.d_head).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(self.d_head)
        allowed = None
        if key_mask is not None:
            allowed = key_mask[:, None, None, :]
        if causal:
            tri = torch.ones(tq, tk, dtype=torch.bool, device=x.device).tril(tk - tq)
            allowed = tri if allowed is None else allowed & tri
        if allowed is not None:
            att = att.masked_fill(~allowed, float("-inf"))
        att = torch.softmax(att, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(n, tq, d)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, d_model: int, heads: int, d_ff: int, cross: bool = False):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads)
        self.cross = None
        if cross:
            self.ln_c = nn.LayerNorm(d_model)
            self.cross = MultiHeadAttention(d_model, heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, d_ff), nn.GELU(), nn.Linear(d_ff, d_model))

    def forward(self, x, mask=None, causal=False, memory=None, memory_mask=None):
        x = x + self.attn(self.ln1(x), key_mask=mask, causal=causal)
        if self.cross is not None:
            x = x + self.cross(self.ln_c(x), ctx=memory, key_mask=memory_mask)
        return x + self.ff(self.ln2(x))


def init_weights(module: nn.Module, std: float = 0.02):
    """GPT-style init; call under a seeded RNG for reproducibility."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, 0.0, std)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.normal_(m.weight, 0.0, std)


def masked_mean(h: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    w = mask.to(h.dtype).unsqueeze(-1)
    return (h * w).sum(1) / w.sum(1).clamp_min(1.0)


def pad_sequences(seqs, pad_id: int = 0, min_len: int = 1, dtype=torch.long):
    """Right-pad integer sequences; returns (ids, mask)."""
    t = max([min_len] + [len(s) for s in seqs])
    ids = torch.full((len(seqs), t), pad_id, dtype=dtype)
    mask = torch.zeros((len(seqs), t), dtype=torch.bool)
    for i, s in enumerate(seqs):
        if len(s):
            ids[i, : len(s)] = torch.as_tensor(list(s), dtype=dtype)
            mask[i, : len(s)] = True
    return ids, mask


@contextlib.contextmanager
def seeded(seed: int):
    """Run a block under a fixed torch seed without disturbing the global RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield
