"""Two-stage training, evaluation metrics and latency benchmarking."""
from __future__ import annotations

import copy
import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import torch

from .checkpoint import Checkpoint
from .classifier import ClassifierConfig, KnowledgeClassifier, reinit_output_layer
from .exceptions import ConfigError, ContractError, DataError
from .generator import FragmentGenerator, GeneratorConfig
from .layers import pad_sequences
from .numerics import GradCheckReport, ParamStore, backward, check_finite, grad_check, logsumexp
from .objective import (
    QueryBatch,
    candidate_log_likelihoods,
    candidate_weights,
    closed_form_gradients,
    log_marginal,
    concat_all_log_likelihood,
    concat_tokens,
    loss_and_grads,
    query_only_log_likelihood,
)
from .text_data import PAD_ID, Q_MAX, S_MAX, CorpusSpec, Example, Vocab, build_vocab, is_opaque_query, synth_corpus

log = logging.getLogger(__name__)

STAGES = ("pretrain_gen", "pretrain_cls", "joint")
DEFAULT_LR = {"pretrain_gen": 1e-3, "pretrain_cls": 1e-3, "joint": 3e-4}
EXCLUSIVE_FLAGS = ("fixed_generator", "equal_probability", "query_only", "concat_all")


@dataclass
class TrainConfig:
    stage: str
    epochs: int = 1
    batch_size: int = 32
    lr: Optional[float] = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    clip_norm: Optional[float] = 1.0
    start_loss_weight: float = 1.0
    renormalize: bool = True
    fixed_generator: bool = False
    equal_probability: bool = False
    full_title: bool = False
    query_only: bool = False
    concat_all: bool = False
    gumbel_in_weights: bool = False
    gold_fragments: bool = False

    def __post_init__(self):
        if self.lr is None and self.stage in DEFAULT_LR:
            self.lr = DEFAULT_LR[self.stage]

    def validate(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.lr is None or not self.lr > 0:
            raise ConfigError("learning rate must be > 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        on = [f for f in EXCLUSIVE_FLAGS if getattr(self, f)]
        if len(on) > 1:
            raise ConfigError(f"mode flags are mutually exclusive: {on}")
        if self.gold_fragments and self.full_title:
            raise ConfigError("gold_fragments is only defined for fragment mode")
        return self

    @property
    def mode(self) -> str:
        if self.fixed_generator:
            return "fixed_generator"
        if self.equal_probability:
            return "equal_probability"
        return "joint"

    def variant(self) -> dict:
        return {f: getattr(self, f) for f in EXCLUSIVE_FLAGS + ("full_title", "gumbel_in_weights", "renormalize")}


# -- encoding -----------------------------------------------------------------

def encode_queries(vocab: Vocab, queries: Sequence[str]):
    seqs = [vocab.encode(q[:Q_MAX]) for q in queries]
    if any(len(s) == 0 for s in seqs):
        raise DataError("empty query")
    return pad_sequences(seqs, PAD_ID)


def make_batch(ckpt: Checkpoint, examples: Sequence[Example]) -> QueryBatch:
    index = {c: i for i, c in enumerate(ckpt.categories)}
    try:
        y = torch.tensor([index[ex.category] for ex in examples], dtype=torch.long)
    except KeyError as exc:
        raise DataError(f"unknown category {exc.args[0]!r}") from None
    ids, mask = encode_queries(ckpt.vocab, [ex.query for ex in examples])
    return QueryBatch(ids, mask, y)


def new_checkpoint(
    vocab: Vocab,
    categories: Sequence[str],
    generator: Optional[dict] = None,
    classifier: Optional[dict] = None,
    seed: int = 0,
    dtype=torch.float32,
    with_generator: bool = True,
) -> Checkpoint:
    gcfg = GeneratorConfig(vocab_size=len(vocab), seed=seed, **(generator or {}))
    ccfg_kw = dict(max_len=Q_MAX + max(gcfg.s_max, gcfg.fragment_len) + 3)
    ccfg_kw.update(classifier or {})
    ccfg = ClassifierConfig(vocab_size=len(vocab), num_categories=len(categories), seed=seed + 1, **ccfg_kw)
    ccfg.validate(min_len=gcfg.q_max + gcfg.fragment_len + 3)
    gen = FragmentGenerator(gcfg).to(dtype) if with_generator else None
    return Checkpoint(
        vocab=vocab,
        categories=list(categories),
        generator=gen,
        classifier=KnowledgeClassifier(ccfg).to(dtype),
        meta={"history": [], "reinit_steps": []},
    )


def clone_checkpoint(ckpt: Checkpoint) -> Checkpoint:
    return copy.deepcopy(ckpt)


# -- trainer ------------------------------------------------------------------

def make_optimizer(params: Sequence[torch.nn.Parameter], cfg: TrainConfig) -> torch.optim.Adam:
    """Adam with constant learning rate, no weight decay."""
    return torch.optim.Adam(list(params), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)


class Trainer:
    """Owns the optimizer and RNG for one training stage on a checkpoint."""

    def __init__(self, ckpt: Checkpoint, cfg: TrainConfig):
        self.ckpt = ckpt
        self.cfg = cfg.validate()
        self.stats = {"skipped_short_titles": 0, "steps": 0}
        gen, cls = ckpt.generator, ckpt.classifier
        if cfg.stage == "pretrain_gen" and gen is None:
            raise ContractError("pretrain_gen needs a generator")
        if cfg.stage != "pretrain_gen" and cls is None:
            raise ContractError(f"{cfg.stage} needs a classifier")
        if cfg.stage != "pretrain_gen" and gen is None and not cfg.query_only:
            raise ContractError(f"{cfg.stage} needs a generator unless query_only")
        groups = {}
        if gen is not None:
            groups["generator"] = gen
        if cls is not None:
            groups["classifier"] = cls
        self.params = ParamStore(groups)

        if cfg.stage == "pretrain_gen":
            trainable = self.params.names("generator")
        elif cfg.stage == "pretrain_cls":
            trainable = self.params.names("classifier")
        else:
            frozen_gen = cfg.fixed_generator or cfg.equal_probability or cfg.query_only or cfg.concat_all
            trainable = self.params.names("classifier")
            if not frozen_gen:
                trainable = self.params.names("generator") + trainable
        self.trainable = trainable
        self.optimizer = make_optimizer([self.params[n] for n in trainable], cfg)
        self.rng = torch.Generator()
        resumed = ckpt.meta.get("stage") == cfg.stage and ckpt.meta.get("trainable") == trainable
        if resumed and ckpt.optimizer_state:
            self._load_optimizer(ckpt.optimizer_state)
        if resumed and ckpt.rng_state is not None:
            self.rng.set_state(ckpt.rng_state.clone())
        else:
            self.rng.manual_seed(cfg.seed)

        if not resumed:
            ckpt.meta["stage"] = cfg.stage
            ckpt.meta["trainable"] = trainable
            ckpt.meta["variant"] = cfg.variant()
            ckpt.meta.setdefault("history", []).append(cfg.stage)
            if cfg.stage == "joint":
                reinit_output_layer(cls, cfg.seed)
                ckpt.meta.setdefault("reinit_steps", []).append(ckpt.step)

    # optimizer state keyed by parameter name so checkpoints are order-proof
    def _export_optimizer(self) -> Dict[str, Dict[str, torch.Tensor]]:
        state = self.optimizer.state_dict()["state"]
        return {
            name: {k: v.detach().clone() for k, v in state[i].items()}
            for i, name in enumerate(self.trainable)
            if i in state
        }

    def _load_optimizer(self, named: Dict[str, Dict[str, torch.Tensor]]):
        sd = self.optimizer.state_dict()
        sd["state"] = {
            i: {k: v.clone() for k, v in named[name].items()}
            for i, name in enumerate(self.trainable)
            if name in named
        }
        self.optimizer.load_state_dict(sd)

    def checkpoint(self) -> Checkpoint:
        self.ckpt.optimizer_state = self._export_optimizer()
        self.ckpt.rng_state = self.rng.get_state()
        return self.ckpt

    # -- steps ----------------------------------------------------------------

    def _apply(self, loss: torch.Tensor):
        backward(loss, self.params)
        self._update()

    def _update(self):
        plist = [self.params[n] for n in self.trainable]
        if self.cfg.clip_norm:
            torch.nn.utils.clip_grad_norm_(plist, self.cfg.clip_norm)
        self.optimizer.step()
        self.ckpt.step += 1
        self.stats["steps"] += 1

    def step(self, examples: Sequence[Example]) -> float:
        stage = self.cfg.stage
        if stage == "pretrain_gen":
            return self._step_pretrain_gen(examples)
        if stage == "pretrain_cls":
            return self._step_pretrain_cls(examples)
        return self._step_joint(examples)

    def _clips(self, examples, length):
        """Random gold clips title[s:s+length]; returns kept indices, starts, tokens."""
        keep, starts, toks = [], [], []
        for i, ex in enumerate(examples):
            t = self.ckpt.vocab.encode(ex.title[:S_MAX])
            hi = len(t) - length
            if hi < 0:
                self.stats["skipped_short_titles"] += 1
                continue
            s = int(torch.randint(0, hi + 1, (1,), generator=self.rng))
            keep.append(i)
            starts.append(s)
            toks.append(t[s : s + length])
        return keep, torch.tensor(starts, dtype=torch.long), torch.tensor(toks, dtype=torch.long).view(len(keep), length)

    def _step_pretrain_gen(self, examples) -> float:
        gen = self.ckpt.generator
        L = gen.cfg.fragment_len
        keep, starts, z = self._clips(examples, L)
        if not keep:
            return float("nan")
        ids, mask = encode_queries(self.ckpt.vocab, [examples[i].query for i in keep])
        memory = gen.encode(ids, mask)
        lp_s = torch.log_softmax(gen.start_logits(memory, mask), -1).gather(1, starts[:, None]).squeeze(1)
        lp_z = gen.fragment_logprob(memory, mask, starts, z)
        loss = -lp_z.mean() - self.cfg.start_loss_weight * lp_s.mean()
        self._apply(loss)
        return float(loss.detach())

    def _candidates(self, batch: QueryBatch, with_grad: bool):
        gen = self.ckpt.generator
        return gen.generate_candidates(
            batch.x_ids,
            batch.x_mask,
            train=True,
            generator=self.rng,
            full_title=self.cfg.full_title,
            with_grad=with_grad,
            gumbel_in_weights=self.cfg.gumbel_in_weights,
        )

    def _step_pretrain_cls(self, examples) -> float:
        cls = self.ckpt.classifier
        cfg = self.cfg
        if cfg.query_only:
            batch = make_batch(self.ckpt, examples)
            loss = -query_only_log_likelihood(cls, batch).mean()
        elif cfg.gold_fragments:
            keep, _, z = self._clips(examples, self.ckpt.generator.cfg.fragment_len)
            batch = make_batch(self.ckpt, [examples[i] for i in keep])
            loss = -candidate_log_likelihoods(cls, batch, z[:, None, :]).mean()
        else:
            batch = make_batch(self.ckpt, examples)
            cand = self._candidates(batch, with_grad=False)
            if cfg.concat_all:
                loss = -concat_all_log_likelihood(cls, batch, cand.tokens).mean()
            else:
                loss = -candidate_log_likelihoods(cls, batch, cand.tokens).mean()
        self._apply(loss)
        return float(loss.detach())

    def _step_joint(self, examples) -> float:
        cfg = self.cfg
        batch = make_batch(self.ckpt, examples)
        gen = self.ckpt.generator
        cand = None
        expected_k = None
        if not cfg.query_only:
            trains_gen = cfg.mode == "joint" and not cfg.concat_all
            cand = self._candidates(batch, with_grad=trains_gen)
            length = gen.cfg.s_max if cfg.full_title else gen.cfg.fragment_len
            beams = min(gen.cfg.beam_size, gen.cfg.vocab_size ** length)
            expected_k = beams * (1 if cfg.full_title else gen.cfg.num_starts)
        out = loss_and_grads(
            gen, self.ckpt.classifier, self.params, batch, cand,
            mode=cfg.mode, expected_k=expected_k, renormalize=cfg.renormalize,
            concat_all=cfg.concat_all, rescore=False,
        )
        self._update()
        return out.loss

    # -- epochs ---------------------------------------------------------------

    def epoch(self, data: Sequence[Example]) -> float:
        if not data:
            raise DataError("empty training set")
        perm = torch.randperm(len(data), generator=self.rng).tolist()
        losses, weights = [], []
        bs = self.cfg.batch_size
        for i in range(0, len(perm), bs):
            chunk = [data[j] for j in perm[i : i + bs]]
            loss = self.step(chunk)
            if not math.isnan(loss):
                losses.append(loss * len(chunk))
                weights.append(len(chunk))
        if not weights:
            raise DataError("no usable training examples (all titles shorter than the fragment length?)")
        mean = sum(losses) / sum(weights)
        check_finite(torch.tensor(mean), f"{self.cfg.stage} epoch loss")
        return mean

    def run(self, data: Sequence[Example], epochs: Optional[int] = None) -> List[float]:
        history = []
        for e in range(self.cfg.epochs if epochs is None else epochs):
            loss = self.epoch(data)
            history.append(loss)
            log.info("%s epoch %d loss %.4f", self.cfg.stage, e + 1, loss)
        return history


def pretrain_generator(dataset: Sequence[Example], cfg: TrainConfig, ckpt: Checkpoint) -> List[float]:
    cfg.stage = "pretrain_gen"
    trainer = Trainer(ckpt, cfg)
    hist = trainer.run(dataset)
    trainer.checkpoint()
    ckpt.meta["pretrain_gen_skipped"] = trainer.stats["skipped_short_titles"]
    return hist


def pretrain_classifier(dataset: Sequence[Example], cfg: TrainConfig, ckpt: Checkpoint) -> List[float]:
    cfg.stage = "pretrain_cls"
    trainer = Trainer(ckpt, cfg)
    hist = trainer.run(dataset)
    trainer.checkpoint()
    return hist


def joint_train(dataset: Sequence[Example], cfg: TrainConfig, ckpt: Checkpoint) -> List[float]:
    cfg.stage = "joint"
    trainer = Trainer(ckpt, cfg)
    hist = trainer.run(dataset)
    trainer.checkpoint()
    return hist


@torch.no_grad()
def teacher_forced_perplexity(ckpt: Checkpoint, examples: Sequence[Example], seed: int = 0) -> float:
    """Per-token perplexity of gold clips at one random valid start per example."""
    gen = ckpt.generator
    L = gen.cfg.fragment_len
    g = torch.Generator().manual_seed(seed)
    nll, count = 0.0, 0
    for i in range(0, len(examples), 256):
        chunk = examples[i : i + 256]
        starts, toks, qs = [], [], []
        for ex in chunk:
            t = ckpt.vocab.encode(ex.title[:S_MAX])
            if len(t) < L:
                continue
            s = int(torch.randint(0, len(t) - L + 1, (1,), generator=g))
            starts.append(s)
            toks.append(t[s : s + L])
            qs.append(ex.query)
        if not qs:
            continue
        ids, mask = encode_queries(ckpt.vocab, qs)
        lp = gen.fragment_logprob(gen.encode(ids, mask), mask, torch.tensor(starts), torch.tensor(toks))
        nll -= float(lp.sum())
        count += len(qs) * L
    return math.exp(nll / count)


# -- evaluation ---------------------------------------------------------------

@dataclass
class SplitMetrics:
    n: int
    precision: float
    recall: float
    f1: float
    start_histogram: List[int]
    confusion: List[List[int]]


@dataclass
class MetricsReport:
    tau: float
    splits: Dict[str, SplitMetrics]
    variant: dict = field(default_factory=dict)
    inference_ms_per_query: Dict[str, float] = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def write_histogram_tsv(self, path) -> Path:
        path = Path(path)
        names = list(self.splits)
        width = max((len(self.splits[n].start_histogram) for n in names), default=0)
        lines = ["position\t" + "\t".join(names)]
        for pos in range(width):
            row = [str(self.splits[n].start_histogram[pos]) if pos < len(self.splits[n].start_histogram) else "0" for n in names]
            lines.append(f"{pos}\t" + "\t".join(row))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path


def f1_score(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def prediction_sets(proba: torch.Tensor, tau: float) -> torch.Tensor:
    """{y : p(y|x) >= tau}, with the argmax forced in when the set is empty."""
    sets = proba >= tau
    empty = ~sets.any(1)
    if empty.any():
        sets[empty, proba[empty].argmax(1)] = True
    return sets


def precision_recall_f1(gold: torch.Tensor, proba: torch.Tensor, tau: float = 0.5):
    """Micro-averaged P/R/F1 over thresholded prediction sets."""
    if not 0.0 < tau < 1.0:
        raise ContractError("tau must lie in (0, 1)")
    sets = prediction_sets(proba, tau)
    hits = sets[torch.arange(len(gold)), gold]
    p = float(hits.sum()) / float(sets.sum())
    r = float(hits.float().mean())
    return p, r, f1_score(p, r)


@torch.no_grad()
def predict_log_proba(
    ckpt: Checkpoint,
    queries: Sequence[str],
    variant: Optional[dict] = None,
    batch_size: int = 64,
    return_starts: bool = False,
):
    """log p~(y|x) for every category, eval-mode candidates: (N, C)."""
    variant = dict(ckpt.meta.get("variant", {}), **(variant or {}))
    gen, cls = ckpt.generator, ckpt.classifier
    outs, tops = [], []
    for i in range(0, len(queries), batch_size):
        ids, mask = encode_queries(ckpt.vocab, queries[i : i + batch_size])
        n = ids.shape[0]
        if gen is not None:
            memory = gen.encode(ids, mask)
            tops.append(gen.start_logits(memory, mask).argmax(1))
        if variant.get("query_only"):
            outs.append(cls.classify_packed(ids, mask.sum(1), torch.zeros((n, 0), dtype=torch.long), torch.zeros(n, dtype=torch.long)))
            continue
        cand = gen.generate_candidates(ids, mask, train=False, full_title=variant.get("full_title", False))
        n, k, length = cand.tokens.shape
        x_len = mask.sum(1)
        if variant.get("concat_all"):
            z = concat_tokens(cand.tokens, cls.cfg.sep_id)
            outs.append(cls.classify_packed(ids, x_len, z, torch.full((n,), z.shape[1], dtype=torch.long)))
            continue
        logp = cls.classify_packed(
            ids.repeat_interleave(k, 0), x_len.repeat_interleave(k),
            cand.tokens.reshape(n * k, length), torch.full((n * k,), length, dtype=torch.long),
        ).view(n, k, -1)
        mode = "equal" if variant.get("equal_probability") else "learned"
        log_w = candidate_weights(cand.log_p_s, cand.log_p_z, mode, variant.get("renormalize", True))
        outs.append(logsumexp(logp + log_w[..., None], dim=1))
    out = torch.cat(outs)
    if return_starts:
        return out, (torch.cat(tops) if tops else None)
    return out


def evaluate(
    ckpt: Checkpoint,
    eval_sets: Dict[str, Sequence[Example]],
    tau: float = 0.5,
    variant: Optional[dict] = None,
) -> MetricsReport:
    if not 0.0 < tau < 1.0:
        raise ContractError("tau must lie in (0, 1)")
    if not eval_sets:
        raise DataError("no evaluation sets given")
    s_max = ckpt.generator.cfg.s_max if ckpt.generator is not None else S_MAX
    splits, timing = {}, {}
    for name, examples in eval_sets.items():
        if not examples:
            raise DataError(f"evaluation set {name!r} is empty")
        batch = make_batch(ckpt, examples)
        t0 = time.perf_counter()
        logp, tops = predict_log_proba(ckpt, [ex.query for ex in examples], variant, return_starts=True)
        timing[name] = 1000.0 * (time.perf_counter() - t0) / len(examples)
        proba = logp.exp()
        p, r, f1 = precision_recall_f1(batch.y, proba, tau)
        hist = torch.zeros(s_max, dtype=torch.long)
        if tops is not None:
            hist += torch.bincount(tops, minlength=s_max)
        c = len(ckpt.categories)
        conf = torch.zeros((c, c), dtype=torch.long)
        conf.index_put_((batch.y, proba.argmax(1)), torch.ones(len(examples), dtype=torch.long), accumulate=True)
        splits[name] = SplitMetrics(len(examples), p, r, f1, hist.tolist(), conf.tolist())
    return MetricsReport(
        tau=tau,
        splits=splits,
        variant=dict(ckpt.meta.get("variant", {}), **(variant or {})),
        inference_ms_per_query=timing,
    )


def standard_eval_sets(overall: Sequence[Example], longtail: Sequence[Example]) -> Dict[str, List[Example]]:
    sets = {"overall": list(overall), "overall_opaque": [e for e in overall if is_opaque_query(e.query)]}
    if longtail:
        sets["long_tail"] = list(longtail)
        sets["long_tail_opaque"] = [e for e in longtail if is_opaque_query(e.query)]
    return {k: v for k, v in sets.items() if v}


# -- latency ------------------------------------------------------------------

@dataclass
class LatencyStats:
    mode: str
    n: int
    median_ms: float
    p95_ms: float


def benchmark_inference(
    ckpt: Checkpoint,
    queries: Sequence[str],
    mode: str = "fragment",
    n_queries: int = 100,
    warmup: int = 5,
) -> LatencyStats:
    """Single-threaded per-query wall time of candidate generation plus classification."""
    if mode not in ("fragment", "full_title"):
        raise ContractError(f"unknown benchmark mode {mode!r}")
    if n_queries < 100:
        raise ContractError("n_queries must be >= 100")
    if not queries:
        raise DataError("no queries to benchmark")
    variant = {"full_title": mode == "full_title", "query_only": False, "concat_all": False}
    qs = [queries[i % len(queries)] for i in range(n_queries)]
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        for q in qs[:warmup]:
            predict_log_proba(ckpt, [q], variant)
        times = []
        for q in qs:
            t0 = time.perf_counter()
            predict_log_proba(ckpt, [q], variant)
            times.append(1000.0 * (time.perf_counter() - t0))
    finally:
        torch.set_num_threads(threads)
    times.sort()
    p95 = times[min(len(times) - 1, int(math.ceil(0.95 * len(times))) - 1)]
    return LatencyStats(mode, len(times), statistics.median(times), p95)


# -- gradient fidelity --------------------------------------------------------

TINY_GENERATOR = dict(layers=1, heads=2, d_model=8, d_ff=16, fragment_len=3, s_max=6, num_starts=2, beam_size=2)
TINY_CLASSIFIER = dict(layers=1, heads=2, d_model=8, d_ff=16)


@dataclass
class GradientFidelity:
    finite_difference: GradCheckReport
    closed_form_max_abs_diff: float
    n_params: int
    seconds: float


def joint_gradient_check(
    seed: int = 0, eps: float = 1e-5, n_examples: int = 2, scale: Optional[float] = 1.0
) -> GradientFidelity:
    """Check the full joint loss of a tiny 64-bit model two independent ways.

    Central differences over every parameter of both groups, and the
    term-by-term closed-form gradients, are each compared with the tape.
    With ``scale`` set, every parameter is redrawn from N(0, scale^2) first:
    at the 0.02 init several attention tensors carry gradients near 1e-8,
    which is the round-off floor of central differences on an O(1) loss.
    """
    t0 = time.perf_counter()
    corpus = synth_corpus(CorpusSpec(
        num_categories=4, num_brands=6, num_model_codes=24, n_pretrain=60, n_joint=20, n_eval=10, seed=seed,
    ))
    vocab = build_vocab(corpus.pretrain + corpus.joint)
    ckpt = new_checkpoint(vocab, corpus.categories, TINY_GENERATOR, TINY_CLASSIFIER, seed=seed, dtype=torch.float64)
    gen, cls = ckpt.generator, ckpt.classifier
    params = ParamStore({"generator": gen, "classifier": cls})
    if scale is not None:
        g = torch.Generator().manual_seed(seed + 1)
        with torch.no_grad():
            for p in params.parameters():
                p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    batch = make_batch(ckpt, corpus.joint[:n_examples])
    cand = gen.generate_candidates(
        batch.x_ids, batch.x_mask, train=True, generator=torch.Generator().manual_seed(seed)
    )

    def f():
        lm, _, _ = log_marginal(gen, cls, batch, cand, "joint")
        return -lm.mean()

    fd = grad_check(f, params, eps=eps)
    loss_and_grads(gen, cls, params, batch, cand, "joint")
    tape = params.grads()
    closed = closed_form_gradients(gen, cls, params, batch, cand, "joint")
    diff = max(float((tape[n] - closed[n]).abs().max()) for n in tape)
    return GradientFidelity(fd, diff, sum(p.numel() for p in params.parameters()), time.perf_counter() - t0)
