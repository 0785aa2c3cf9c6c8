"""Fragment generator: start-position head plus encoder-decoder over title text.

The decoder is conditioned on a start position ``s``: its first input is a
learned embedding of ``s`` and every decoder step ``j`` carries the absolute
title position ``s + j``. Decoding from ``s = 0`` for ``S_max`` steps yields
the full-title variant with the same weights.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence

import torch
from torch import nn

from .exceptions import ContractError
from .layers import Block, init_weights, masked_mean, pad_sequences, seeded
from .numerics import log_softmax
from .text_data import PAD_ID, Q_MAX, S_MAX


@dataclass
class GeneratorConfig:
    vocab_size: int
    layers: int = 2
    heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    fragment_len: int = 8
    s_max: int = S_MAX
    beam_size: int = 3
    num_starts: int = 5
    q_max: int = Q_MAX
    seed: int = 0

    def validate(self):
        if self.fragment_len < 1 or self.num_starts < 1 or self.beam_size < 1:
            raise ContractError("fragment_len, num_starts and beam_size must all be >= 1")
        if self.d_model % self.heads:
            raise ContractError("d_model must be divisible by heads")
        if self.num_starts > self.s_max:
            raise ContractError("num_starts cannot exceed s_max")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class FragmentCandidate:
    start: int
    tokens: List[int]
    log_p_s: float
    log_p_z: float


@dataclass
class CandidateBatch:
    """Candidates for N queries, k = m * B per query.

    ``log_p_s`` and ``log_p_z`` carry autograd history when produced with
    ``with_grad=True``.
    """

    starts: torch.Tensor  # (N, k) long
    tokens: torch.Tensor  # (N, k, L) long
    log_p_s: torch.Tensor  # (N, k)
    log_p_z: torch.Tensor  # (N, k)

    @property
    def k(self) -> int:
        return self.starts.shape[1]

    def __len__(self):
        return self.starts.shape[0]

    def detach(self) -> "CandidateBatch":
        return CandidateBatch(self.starts, self.tokens, self.log_p_s.detach(), self.log_p_z.detach())

    def example(self, i: int) -> List[FragmentCandidate]:
        return [
            FragmentCandidate(
                int(self.starts[i, j]),
                self.tokens[i, j].tolist(),
                float(self.log_p_s[i, j]),
                float(self.log_p_z[i, j]),
            )
            for j in range(self.k)
        ]


def gumbel_noise(shape, generator: Optional[torch.Generator] = None, dtype=torch.float64) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=torch.float64)
    u = u.clamp(min=torch.finfo(torch.float64).tiny)
    return (-torch.log(-torch.log(u))).to(dtype)


def sample_start_positions(
    logits: torch.Tensor,
    m: int,
    generator: Optional[torch.Generator] = None,
    noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Top-``m`` of ``logits + Gumbel`` along the last axis (distinct, ordered).

    Passing ``noise`` overrides the sampled perturbation.
    """
    if m > logits.shape[-1]:
        raise ContractError(f"cannot pick {m} distinct positions out of {logits.shape[-1]}")
    if m < 1:
        raise ContractError("m must be >= 1")
    if noise is None:
        noise = gumbel_noise(logits.shape, generator, logits.dtype)
    return torch.topk(logits.detach() + noise, m, dim=-1).indices


class FragmentGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg.validate()
        d = cfg.d_model
        with seeded(cfg.seed):
            self.tok_emb = nn.Embedding(cfg.vocab_size, d)
            self.enc_pos = nn.Embedding(cfg.q_max, d)
            self.dec_pos = nn.Embedding(cfg.s_max + cfg.fragment_len, d)
            self.start_emb = nn.Embedding(cfg.s_max, d)
            self.encoder = nn.ModuleList(Block(d, cfg.heads, cfg.d_ff) for _ in range(cfg.layers))
            self.enc_norm = nn.LayerNorm(d)
            self.decoder = nn.ModuleList(Block(d, cfg.heads, cfg.d_ff, cross=True) for _ in range(cfg.layers))
            self.dec_norm = nn.LayerNorm(d)
            self.start_head = nn.Linear(d, cfg.s_max)
            self.out = nn.Linear(d, cfg.vocab_size)
            init_weights(self)

    # -- encoder side ------------------------------------------------------

    def encode(self, x_ids: torch.Tensor, x_mask: torch.Tensor) -> torch.Tensor:
        if x_ids.shape[1] > self.cfg.q_max:
            raise ContractError(f"query length {x_ids.shape[1]} exceeds q_max={self.cfg.q_max}")
        pos = torch.arange(x_ids.shape[1])
        h = self.tok_emb(x_ids) + self.enc_pos(pos)
        for blk in self.encoder:
            h = blk(h, mask=x_mask)
        return self.enc_norm(h)

    def start_logits(self, memory: torch.Tensor, x_mask: torch.Tensor) -> torch.Tensor:
        return self.start_head(masked_mean(memory, x_mask))

    def start_position_logits(self, x: Sequence[int]) -> torch.Tensor:
        """Logits over the ``s_max`` start-position classes for one query."""
        if len(x) == 0:
            raise ContractError("query must be nonempty")
        ids, mask = pad_sequences([x], PAD_ID)
        return self.start_logits(self.encode(ids, mask), mask)[0]

    # -- decoder side ------------------------------------------------------

    def decode_logits(self, memory, x_mask, starts, prefix) -> torch.Tensor:
        """Next-token logits for every decoder step: (N, t + 1, V) for prefix (N, t)."""
        n, t = prefix.shape
        steps = torch.arange(t + 1)
        pos = starts[:, None] + steps[None, :]
        h = torch.cat([self.start_emb(starts)[:, None, :], self.tok_emb(prefix)], dim=1)
        h = h + self.dec_pos(pos)
        for blk in self.decoder:
            h = blk(h, causal=True, memory=memory, memory_mask=x_mask)
        return self.out(self.dec_norm(h))

    def step_log_probs(self, memory, x_mask, starts, prefix) -> torch.Tensor:
        return log_softmax(self.decode_logits(memory, x_mask, starts, prefix), dim=-1)

    def fragment_logprob(self, memory, x_mask, starts, z) -> torch.Tensor:
        """Teacher-forced log p(z | x, s), summed over steps: (N,)."""
        if z.numel() and (int(z.min()) < 0 or int(z.max()) >= self.cfg.vocab_size):
            raise ContractError("fragment token id out of vocabulary range")
        lp = self.step_log_probs(memory, x_mask, starts, z[:, :-1])
        return lp.gather(-1, z.unsqueeze(-1)).squeeze(-1).sum(-1)

    @torch.no_grad()
    def beam_search(self, memory, x_mask, starts, beam_size: int, length: int):
        """Fixed-length beam search for each row; returns (tokens (N, B', L), scores (N, B')).

        ``B' = min(beam_size, V ** length)``; beams are distinct and sorted by
        score, descending.
        """
        if beam_size < 1:
            raise ContractError("beam size must be >= 1")
        n = starts.shape[0]
        V = self.cfg.vocab_size
        seqs = torch.zeros((n, 1, 0), dtype=torch.long)
        scores = torch.zeros((n, 1), dtype=memory.dtype)
        for _ in range(length):
            nb = seqs.shape[1]
            lp = self.step_log_probs(
                memory.repeat_interleave(nb, 0),
                x_mask.repeat_interleave(nb, 0),
                starts.repeat_interleave(nb, 0),
                seqs.reshape(n * nb, -1),
            )[:, -1, :].reshape(n, nb, V)
            total = (scores.unsqueeze(-1) + lp).reshape(n, nb * V)
            k = min(beam_size, nb * V)
            scores, idx = torch.topk(total, k, dim=-1)
            beam, tok = idx // V, idx % V
            seqs = torch.cat([seqs.gather(1, beam[..., None].expand(-1, -1, seqs.shape[2])), tok[..., None]], dim=2)
        return seqs, scores

    # -- candidate generation ----------------------------------------------

    def generate_candidates(
        self,
        x_ids: torch.Tensor,
        x_mask: torch.Tensor,
        m: Optional[int] = None,
        beam_size: Optional[int] = None,
        *,
        train: bool = False,
        generator: Optional[torch.Generator] = None,
        full_title: bool = False,
        with_grad: bool = False,
        gumbel_in_weights: bool = False,
    ) -> CandidateBatch:
        """Start positions, beam-decoded fragments and their log-probabilities.

        Train mode selects positions by Gumbel-top-m; eval mode takes the
        noise-free top-m. ``full_title`` fixes ``s = 0`` and decodes ``s_max``
        tokens.
        """
        cfg = self.cfg
        m = cfg.num_starts if m is None else m
        B = cfg.beam_size if beam_size is None else beam_size
        n = x_ids.shape[0]
        length = cfg.s_max if full_title else cfg.fragment_len

        with torch.no_grad():
            memory = self.encode(x_ids, x_mask)
            logits = self.start_logits(memory, x_mask)
            noise = None
            if full_title:
                starts = torch.zeros((n, 1), dtype=torch.long)
            elif train:
                noise = gumbel_noise(logits.shape, generator, logits.dtype)
                starts = sample_start_positions(logits, m, noise=noise)
            else:
                starts = torch.topk(logits, m, dim=-1).indices
            mm = starts.shape[1]
            flat_starts = starts.reshape(-1)
            toks, beam_scores = self.beam_search(
                memory.repeat_interleave(mm, 0), x_mask.repeat_interleave(mm, 0), flat_starts, B, length
            )
        nb = toks.shape[1]
        k = mm * nb
        cand_starts = flat_starts.view(n, mm, 1).expand(n, mm, nb).reshape(n, k)
        tokens = toks.view(n, k, length)

        if not with_grad:
            lps = log_softmax(logits + noise if gumbel_in_weights and noise is not None else logits, dim=-1)
            return CandidateBatch(
                cand_starts, tokens, lps.gather(1, cand_starts), beam_scores.reshape(n, k)
            )

        memory = self.encode(x_ids, x_mask)
        logits = self.start_logits(memory, x_mask)
        if gumbel_in_weights and noise is not None:
            logits = logits + noise
        log_p_s = log_softmax(logits, dim=-1).gather(1, cand_starts)
        log_p_z = self.fragment_logprob(
            memory.repeat_interleave(k, 0),
            x_mask.repeat_interleave(k, 0),
            cand_starts.reshape(-1),
            tokens.reshape(n * k, length),
        ).view(n, k)
        return CandidateBatch(cand_starts, tokens, log_p_s, log_p_z)

    def score_candidates(self, x_ids, x_mask, starts, tokens) -> CandidateBatch:
        """Differentiable log-probabilities for fixed (s, z) candidates."""
        n, k, length = tokens.shape
        memory = self.encode(x_ids, x_mask)
        log_p_s = log_softmax(self.start_logits(memory, x_mask), dim=-1).gather(1, starts)
        log_p_z = self.fragment_logprob(
            memory.repeat_interleave(k, 0),
            x_mask.repeat_interleave(k, 0),
            starts.reshape(-1),
            tokens.reshape(n * k, length),
        ).view(n, k)
        return CandidateBatch(starts, tokens, log_p_s, log_p_z)

