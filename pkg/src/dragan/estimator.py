"""scikit-learn style wrapper around the two-stage training pipeline."""
from __future__ import annotations

from typing import List, Optional, Tuple

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigError, DataError
from .text_data import Example, build_vocab
from .training import (
    TrainConfig,
    encode_queries,
    joint_train,
    new_checkpoint,
    predict_log_proba,
    prediction_sets,
    pretrain_classifier,
    pretrain_generator,
)


def _check_strings(X, name="X") -> List[str]:
    if isinstance(X, str):
        raise DataError(f"{name} must be a sequence of strings, not a single string")
    arr = np.asarray(X, dtype=object)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 1:
        raise DataError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise DataError(f"{name} is empty")
    out = []
    for i, v in enumerate(arr):
        if not isinstance(v, str) or not v:
            raise DataError(f"{name}[{i}] is not a nonempty string: {v!r}")
        out.append(v)
    return out


class DraganClassifier(ClassifierMixin, BaseEstimator):
    """Query classifier augmented with generated title fragments.

    ``fit`` needs a gold title per training query: it pre-trains the
    fragment generator on (query, title) pairs, pre-trains the classifier on
    generated fragments, then trains both jointly through the marginal
    likelihood.

    Parameters mirror the model and schedule knobs; ``mode`` is one of
    ``joint``, ``fixed_generator``, ``equal_probability``, ``query_only``.
    """

    def __init__(
        self,
        fragment_len: int = 8,
        num_starts: int = 5,
        beam_size: int = 3,
        s_max: int = 48,
        layers: int = 2,
        heads: int = 4,
        d_model: int = 64,
        d_ff: int = 128,
        gen_epochs: int = 30,
        cls_epochs: int = 2,
        joint_epochs: int = 3,
        batch_size: int = 32,
        mode: str = "joint",
        full_title: bool = False,
        tau: float = 0.5,
        random_state: int = 0,
    ):
        self.fragment_len = fragment_len
        self.num_starts = num_starts
        self.beam_size = beam_size
        self.s_max = s_max
        self.layers = layers
        self.heads = heads
        self.d_model = d_model
        self.d_ff = d_ff
        self.gen_epochs = gen_epochs
        self.cls_epochs = cls_epochs
        self.joint_epochs = joint_epochs
        self.batch_size = batch_size
        self.mode = mode
        self.full_title = full_title
        self.tau = tau
        self.random_state = random_state

    def _flags(self):
        if self.mode not in ("joint", "fixed_generator", "equal_probability", "query_only"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        flags = {"full_title": bool(self.full_title)}
        if self.mode != "joint":
            flags[self.mode] = True
        return flags

    def fit(self, X, y, titles=None, pretrain_X=None, pretrain_titles=None):
        X = _check_strings(X)
        y = np.asarray(y)
        if y.ndim != 1 or y.shape[0] != len(X):
            raise DataError(f"y must be 1-D with {len(X)} entries, got shape {y.shape}")
        check_classification_targets(y)
        flags = self._flags()
        query_only = flags.get("query_only", False)
        if titles is None and not query_only:
            raise DataError("titles are required unless mode='query_only'")
        titles = _check_strings(titles, "titles") if titles is not None else [""] * len(X)
        if len(titles) != len(X):
            raise DataError("titles and X differ in length")
        if (pretrain_X is None) != (pretrain_titles is None):
            raise DataError("pretrain_X and pretrain_titles go together")

        self.classes_ = np.unique(y)
        labels = [str(i) for i in range(len(self.classes_))]
        index = {c: str(i) for i, c in enumerate(self.classes_.tolist())}
        data = [Example(q, t, index[c]) for q, t, c in zip(X, titles, y.tolist())]
        if pretrain_X is not None:
            pX, pT = _check_strings(pretrain_X, "pretrain_X"), _check_strings(pretrain_titles, "pretrain_titles")
            if len(pX) != len(pT):
                raise DataError("pretrain_X and pretrain_titles differ in length")
            pre = [Example(q, t, labels[0]) for q, t in zip(pX, pT)]
        else:
            pre = data

        vocab = build_vocab(pre + data if not query_only else data)
        arch = dict(layers=self.layers, heads=self.heads, d_model=self.d_model, d_ff=self.d_ff)
        gen_kw = dict(arch, fragment_len=self.fragment_len, s_max=self.s_max,
                      num_starts=self.num_starts, beam_size=self.beam_size)
        ckpt = new_checkpoint(vocab, labels, gen_kw, arch, seed=self.random_state, with_generator=not query_only)
        seed = self.random_state
        if not query_only:
            pretrain_generator(pre, TrainConfig("pretrain_gen", epochs=self.gen_epochs,
                                                batch_size=self.batch_size, seed=seed), ckpt)
        cls_flags = {"query_only": True} if query_only else {}
        pretrain_classifier(data, TrainConfig("pretrain_cls", epochs=self.cls_epochs, batch_size=self.batch_size,
                                              seed=seed, full_title=self.full_title, **cls_flags), ckpt)
        joint_train(data, TrainConfig("joint", epochs=self.joint_epochs, batch_size=self.batch_size,
                                      seed=seed, **flags), ckpt)
        self.checkpoint_ = ckpt
        self.vocab_ = vocab
        return self

    def predict_log_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "checkpoint_")
        return predict_log_proba(self.checkpoint_, _check_strings(X)).numpy()

    def predict_proba(self, X) -> np.ndarray:
        return np.exp(self.predict_log_proba(X))

    def predict(self, X) -> np.ndarray:
        logp = self.predict_log_proba(X)
        return self.classes_[np.argmax(logp, axis=1)]

    def predict_sets(self, X) -> List[list]:
        """Thresholded prediction sets at ``tau`` (argmax kept when nothing clears it)."""
        proba = self.predict_proba(X)
        sets = prediction_sets(torch.from_numpy(proba), self.tau)
        return [self.classes_[row.numpy()].tolist() for row in sets]

    @torch.no_grad()
    def generate_fragments(self, X) -> List[List[Tuple[int, str, float]]]:
        """Eval-mode candidates per query as (start, text, log p(s) + log p(z|s))."""
        check_is_fitted(self, "checkpoint_")
        gen = self.checkpoint_.generator
        if gen is None:
            return [[] for _ in _check_strings(X)]
        ids, mask = encode_queries(self.vocab_, _check_strings(X))
        cand = gen.generate_candidates(ids, mask, full_title=self.full_title)
        return [
            [(c.start, self.vocab_.decode(c.tokens), c.log_p_s + c.log_p_z) for c in cand.example(i)]
            for i in range(len(cand))
        ]
