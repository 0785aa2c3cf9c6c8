"""Marginal likelihood over generated fragments and its gradients.

    log p~(y|x) = logsumexp_i [ log p(y | z_i, x) + log w_i ]

where the candidates (s_i, z_i) come from the generator and the weights are
either the generator's joint probabilities p(z_i|x,s_i) p(s_i|x)
(renormalized over the candidate set by default) or uniform.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Optional

import torch

from .classifier import KnowledgeClassifier
from .exceptions import ContractError
from .generator import CandidateBatch, FragmentGenerator
from .numerics import ParamStore, backward, logsumexp, module_grad
from .text_data import SEP_ID

MODES = ("joint", "fixed_generator", "equal_probability")


@dataclass
class QueryBatch:
    x_ids: torch.Tensor  # (N, Tx)
    x_mask: torch.Tensor  # (N, Tx)
    y: torch.Tensor  # (N,)

    @property
    def x_len(self) -> torch.Tensor:
        return self.x_mask.sum(1)

    def __len__(self):
        return self.x_ids.shape[0]


@dataclass
class LossBreakdown:
    log_marginal: torch.Tensor  # (N,) log p~(y|x)
    loss: float  # mean of -log p~(y|x)
    posterior: Optional[torch.Tensor]  # (N, k) p(z_i | x, y)
    log_weights: Optional[torch.Tensor] = None


def candidate_weights(
    log_p_s: torch.Tensor,
    log_p_z: torch.Tensor,
    mode: str = "learned",
    renormalize: bool = True,
) -> torch.Tensor:
    """Log candidate weights along the last axis.

    ``learned``: log p(s) + log p(z|s), optionally renormalized over the set.
    ``equal``: -log k, independent of the generator.
    """
    if log_p_z.shape[-1] == 0:
        raise ContractError("candidate set is empty")
    if mode == "equal":
        k = log_p_z.shape[-1]
        return torch.full_like(log_p_z.detach(), -math.log(k))
    if mode != "learned":
        raise ContractError(f"unknown weight mode {mode!r}")
    joint = log_p_s + log_p_z
    if renormalize:
        joint = joint - logsumexp(joint, dim=-1, keepdim=True)
    return joint


def marginal_log_likelihood(log_p_y: torch.Tensor, log_weights: torch.Tensor) -> torch.Tensor:
    """logsumexp over candidates of log p(y|z_i,x) + log w_i."""
    return logsumexp(log_p_y + log_weights, dim=-1)


def posterior(log_p_y: torch.Tensor, log_weights: torch.Tensor) -> torch.Tensor:
    joint = log_p_y + log_weights
    return (joint - logsumexp(joint, dim=-1, keepdim=True)).exp()


def candidate_log_likelihoods(
    classifier: KnowledgeClassifier, batch: QueryBatch, tokens: torch.Tensor
) -> torch.Tensor:
    """log p(y | z_i, x) for every candidate: (N, k)."""
    n, k, length = tokens.shape
    x_len = batch.x_len.repeat_interleave(k)
    logp = classifier.classify_packed(
        batch.x_ids.repeat_interleave(k, 0),
        x_len,
        tokens.reshape(n * k, length),
        torch.full((n * k,), length, dtype=torch.long),
    )
    return logp.gather(1, batch.y.repeat_interleave(k)[:, None]).view(n, k)


def query_only_log_likelihood(classifier: KnowledgeClassifier, batch: QueryBatch) -> torch.Tensor:
    n = len(batch)
    logp = classifier.classify_packed(
        batch.x_ids, batch.x_len, torch.zeros((n, 0), dtype=torch.long), torch.zeros(n, dtype=torch.long)
    )
    return logp.gather(1, batch.y[:, None]).squeeze(1)


def concat_tokens(tokens: torch.Tensor, sep_id: int = SEP_ID) -> torch.Tensor:
    """Join the k fragments of each row with SEP: (N, k*L + k - 1)."""
    n, k, length = tokens.shape
    sep = torch.full((n, k, 1), sep_id, dtype=tokens.dtype)
    return torch.cat([tokens, sep], dim=2).reshape(n, k * (length + 1))[:, :-1]


def concat_all_log_likelihood(classifier: KnowledgeClassifier, batch: QueryBatch, tokens: torch.Tensor):
    z = concat_tokens(tokens, classifier.cfg.sep_id)
    logp = classifier.classify_packed(
        batch.x_ids, batch.x_len, z, torch.full((len(batch),), z.shape[1], dtype=torch.long)
    )
    return logp.gather(1, batch.y[:, None]).squeeze(1)


def log_marginal(
    generator: Optional[FragmentGenerator],
    classifier: KnowledgeClassifier,
    batch: QueryBatch,
    candidates: Optional[CandidateBatch],
    mode: str = "joint",
    renormalize: bool = True,
    rescore: bool = True,
    concat_all: bool = False,
):
    """Per-example log p~(y|x) with autograd history, plus the pieces.

    With ``rescore`` the generator log-probabilities are recomputed from the
    candidate tokens so gradients reach the generator; otherwise the ones
    stored in ``candidates`` are used as-is.
    """
    if mode not in MODES:
        raise ContractError(f"unknown mode {mode!r}; expected one of {MODES}")
    if candidates is None:
        return query_only_log_likelihood(classifier, batch), None, None
    if concat_all:
        return concat_all_log_likelihood(classifier, batch, candidates.tokens), None, None

    if mode == "equal_probability":
        log_w = candidate_weights(candidates.log_p_s, candidates.log_p_z, "equal")
    else:
        if rescore and generator is not None:
            scored = generator.score_candidates(batch.x_ids, batch.x_mask, candidates.starts, candidates.tokens)
            log_p_s, log_p_z = scored.log_p_s, scored.log_p_z
        else:
            log_p_s, log_p_z = candidates.log_p_s, candidates.log_p_z
        if mode == "fixed_generator":
            log_p_s, log_p_z = log_p_s.detach(), log_p_z.detach()
        log_w = candidate_weights(log_p_s, log_p_z, "learned", renormalize)
    log_p_y = candidate_log_likelihoods(classifier, batch, candidates.tokens)
    return marginal_log_likelihood(log_p_y, log_w), log_p_y, log_w


def loss_and_grads(
    generator: Optional[FragmentGenerator],
    classifier: KnowledgeClassifier,
    params: ParamStore,
    batch: QueryBatch,
    candidates: Optional[CandidateBatch],
    mode: str = "joint",
    expected_k: Optional[int] = None,
    renormalize: bool = True,
    concat_all: bool = False,
    rescore: bool = True,
) -> LossBreakdown:
    """Mean negative log marginal likelihood; gradients land in ``params``."""
    if len(batch) == 0:
        raise ContractError("empty batch")
    if candidates is not None:
        if len(candidates) != len(batch):
            raise ContractError(f"{len(candidates)} candidate rows for {len(batch)} examples")
        if expected_k is not None and candidates.k != expected_k:
            raise ContractError(f"expected {expected_k} candidates per example, got {candidates.k}")
    lm, log_p_y, log_w = log_marginal(
        generator, classifier, batch, candidates, mode, renormalize, rescore=rescore, concat_all=concat_all
    )
    loss = -lm.mean()
    backward(loss, params)
    post = None if log_p_y is None else posterior(log_p_y.detach(), log_w.detach())
    return LossBreakdown(
        log_marginal=lm.detach(),
        loss=float(loss.detach()),
        posterior=post,
        log_weights=None if log_w is None else log_w.detach(),
    )


def closed_form_gradients(
    generator: FragmentGenerator,
    classifier: KnowledgeClassifier,
    params: ParamStore,
    batch: QueryBatch,
    candidates: CandidateBatch,
    mode: str = "joint",
    renormalize: bool = True,
) -> Dict[str, torch.Tensor]:
    """Gradient of mean -log p~(y|x) assembled term by term.

    For each example, with p_i = p(y|z_i,x) and weight w_i playing p(z_i|x):

        d/d theta_c = sum_i w_i dp_i/d theta_c / sum_i p_i w_i
        d/d theta_g = sum_i p_i dw_i/d theta_g / sum_i p_i w_i

    Each dp_i and dw_i is differentiated on its own, never through the
    log-sum-exp, so this is an independent route to the tape gradient.
    """
    names = params.names()
    plist = params.parameters()
    total = OrderedDict((n, torch.zeros_like(p)) for n, p in zip(names, plist))
    n_ex = len(batch)
    for e in range(n_ex):
        sub = QueryBatch(batch.x_ids[e : e + 1], batch.x_mask[e : e + 1], batch.y[e : e + 1])
        sub_c = CandidateBatch(
            candidates.starts[e : e + 1], candidates.tokens[e : e + 1],
            candidates.log_p_s[e : e + 1], candidates.log_p_z[e : e + 1],
        )
        _, log_p_y, log_w = log_marginal(generator, classifier, sub, sub_c, mode, renormalize)
        p = log_p_y[0].exp()
        w = log_w[0].exp()
        denom = float((p * w).sum().detach())
        for i in range(p.shape[0]):
            dp = module_grad(p[i], plist)
            dw = module_grad(w[i], plist) if w.requires_grad else tuple(torch.zeros_like(q) for q in plist)
            for name, gp, gw in zip(names, dp, dw):
                total[name] -= (float(w[i].detach()) * gp + float(p[i].detach()) * gw) / (denom * n_ex)
    return total
