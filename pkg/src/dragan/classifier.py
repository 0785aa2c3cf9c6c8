"""Knowledge-augmented classifier over ``CLS x SEP z SEP``."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import torch
from torch import nn

from .exceptions import ContractError
from .layers import Block, init_weights, pad_sequences, seeded
from .numerics import log_softmax
from .text_data import CLS_ID, PAD_ID, Q_MAX, SEP_ID


@dataclass
class ClassifierConfig:
    vocab_size: int
    num_categories: int
    layers: int = 2
    heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    max_len: int = Q_MAX + 8 + 3
    cls_id: int = CLS_ID
    sep_id: int = SEP_ID
    pad_id: int = PAD_ID
    seed: int = 0

    def validate(self, min_len: Optional[int] = None):
        if self.d_model % self.heads:
            raise ContractError("d_model must be divisible by heads")
        if self.num_categories < 1:
            raise ContractError("num_categories must be >= 1")
        if min_len is not None and self.max_len < min_len:
            raise ContractError(f"max_len={self.max_len} below required {min_len}")
        return self

    def to_dict(self):
        return asdict(self)


def pack_inputs(x_ids, x_len, z_ids, z_len, cfg: ClassifierConfig):
    """Lay out rows as CLS x SEP z SEP followed by padding.

    ``x_ids`` (R, Tx) and ``z_ids`` (R, Tz) are right-padded with true
    lengths ``x_len`` / ``z_len``. Returns (ids, mask).
    """
    r = x_ids.shape[0]
    t = int((x_len + z_len).max()) + 3 if r else 3
    if t > cfg.max_len:
        raise ContractError(f"packed input length {t} exceeds max_len={cfg.max_len}; truncate first")
    ids = torch.full((r, t), cfg.pad_id, dtype=torch.long)
    ids[:, 0] = cfg.cls_id
    rows = torch.arange(r)[:, None]

    tx = x_ids.shape[1]
    xpos = 1 + torch.arange(tx)[None, :].expand(r, tx)
    xvalid = torch.arange(tx)[None, :] < x_len[:, None]
    ids[rows.expand(r, tx)[xvalid], xpos[xvalid]] = x_ids[xvalid]
    ids[torch.arange(r), x_len + 1] = cfg.sep_id

    tz = z_ids.shape[1]
    if tz:
        zpos = (x_len + 2)[:, None] + torch.arange(tz)[None, :]
        zvalid = torch.arange(tz)[None, :] < z_len[:, None]
        ids[rows.expand(r, tz)[zvalid], zpos[zvalid]] = z_ids[zvalid]
    ids[torch.arange(r), x_len + z_len + 2] = cfg.sep_id
    mask = torch.arange(t)[None, :] < (x_len + z_len + 3)[:, None]
    return ids, mask


class KnowledgeClassifier(nn.Module):
    def __init__(self, cfg: ClassifierConfig):
        super().__init__()
        self.cfg = cfg.validate()
        d = cfg.d_model
        with seeded(cfg.seed):
            self.tok_emb = nn.Embedding(cfg.vocab_size, d)
            self.pos_emb = nn.Embedding(cfg.max_len, d)
            self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.d_ff) for _ in range(cfg.layers))
            self.norm = nn.LayerNorm(d)
            self.head = nn.Linear(d, cfg.num_categories)
            init_weights(self)
            init_head(self.head)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Log-distribution over categories, (R, C)."""
        h = self.tok_emb(ids) + self.pos_emb(torch.arange(ids.shape[1]))
        for blk in self.blocks:
            h = blk(h, mask=mask)
        return log_softmax(self.head(self.norm(h[:, 0])), dim=-1)

    def classify_packed(self, x_ids, x_len, z_ids, z_len) -> torch.Tensor:
        return self(*pack_inputs(x_ids, x_len, z_ids, z_len, self.cfg))

    def classify(self, x: Sequence[int], z: Sequence[int]) -> torch.Tensor:
        x_ids, _ = pad_sequences([x], self.cfg.pad_id)
        z_ids, _ = pad_sequences([z], self.cfg.pad_id, min_len=0)
        return self.classify_packed(
            x_ids, torch.tensor([len(x)]), z_ids, torch.tensor([len(z)])
        )[0]

    def classify_query_only(self, x: Sequence[int]) -> torch.Tensor:
        return self.classify(x, [])


def init_head(head: nn.Linear, generator: Optional[torch.Generator] = None):
    bound = 1.0 / math.sqrt(head.in_features)
    with torch.no_grad():
        head.weight.uniform_(-bound, bound, generator=generator)
        head.bias.uniform_(-bound, bound, generator=generator)


def reinit_output_layer(model: KnowledgeClassifier, seed: int) -> None:
    """Redraw only the final affine map from its init distribution."""
    g = torch.Generator().manual_seed(seed)
    init_head(model.head, g)


def output_layer_names(model: KnowledgeClassifier):
    return [f"head.{n}" for n, _ in model.head.named_parameters()]
