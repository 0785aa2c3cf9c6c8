"""Single-file binary checkpoints.

Layout (little-endian)::

    b"DRGN"  u32 format  u32 n_records
    n_records x [ u32 name_len | name (utf-8) | u8 dtype | u8 ndim |
                  ndim x u64 dims | u64 n_bytes | raw data ]

Configs, vocabulary, categories and free-form metadata travel in a uint8
record named ``meta.json``.
"""
from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from .classifier import ClassifierConfig, KnowledgeClassifier
from .exceptions import DataError
from .generator import FragmentGenerator, GeneratorConfig
from .text_data import Vocab

MAGIC = b"DRGN"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: (0, "<f4"),
    torch.float64: (1, "<f8"),
    torch.int64: (2, "<i8"),
    torch.uint8: (3, "u1"),
    torch.bool: (4, "?"),
}
_CODES = {code: (dt, np_dt) for dt, (code, np_dt) in _DTYPES.items()}


@dataclass
class Checkpoint:
    vocab: Vocab
    categories: List[str]
    generator: Optional[FragmentGenerator] = None
    classifier: Optional[KnowledgeClassifier] = None
    optimizer_state: Dict[str, Dict[str, torch.Tensor]] = field(default_factory=dict)
    step: int = 0
    rng_state: Optional[torch.Tensor] = None
    meta: dict = field(default_factory=dict)


def write_tensors(fh, records: "OrderedDict[str, torch.Tensor]"):
    fh.write(MAGIC)
    fh.write(struct.pack("<II", FORMAT_VERSION, len(records)))
    for name, t in records.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {t.dtype} for record {name}")
        code, np_dt = _DTYPES[t.dtype]
        raw = np.ascontiguousarray(t.numpy()).astype(np_dt, copy=False).tobytes()
        key = name.encode("utf-8")
        fh.write(struct.pack("<I", len(key)))
        fh.write(key)
        fh.write(struct.pack("<BB", code, t.dim()))
        fh.write(struct.pack(f"<{t.dim()}Q", *t.shape))
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)


def read_tensors(fh) -> "OrderedDict[str, torch.Tensor]":
    def take(n):
        b = fh.read(n)
        if len(b) != n:
            raise DataError("truncated checkpoint")
        return b

    if take(4) != MAGIC:
        raise DataError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint format {version}")
    out = OrderedDict()
    for _ in range(count):
        (klen,) = struct.unpack("<I", take(4))
        name = take(klen).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        (nbytes,) = struct.unpack("<Q", take(8))
        if code not in _CODES:
            raise DataError(f"unknown dtype code {code} in record {name}")
        dt, np_dt = _CODES[code]
        arr = np.frombuffer(take(nbytes), dtype=np_dt).reshape(shape)
        out[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return out


def _json_record(obj) -> torch.Tensor:
    return torch.frombuffer(bytearray(json.dumps(obj, sort_keys=True).encode("utf-8")), dtype=torch.uint8)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    records: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    header = {
        "vocab": ckpt.vocab.chars,
        "categories": ckpt.categories,
        "generator_config": ckpt.generator.cfg.to_dict() if ckpt.generator is not None else None,
        "classifier_config": ckpt.classifier.cfg.to_dict() if ckpt.classifier is not None else None,
        "generator_dtype": str(next(ckpt.generator.parameters()).dtype) if ckpt.generator is not None else None,
        "step": ckpt.step,
        "meta": ckpt.meta,
    }
    records["meta.json"] = _json_record(header)
    for prefix, module in (("generator", ckpt.generator), ("classifier", ckpt.classifier)):
        if module is None:
            continue
        for name, t in module.state_dict().items():
            records[f"{prefix}/{name}"] = t
    for pname, state in ckpt.optimizer_state.items():
        for key, t in state.items():
            records[f"optim/{pname}/{key}"] = torch.as_tensor(t)
    if ckpt.rng_state is not None:
        records["rng"] = ckpt.rng_state
    path = Path(path)
    buf = io.BytesIO()
    write_tensors(buf, records)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        records = read_tensors(fh)
    if "meta.json" not in records:
        raise DataError("checkpoint lacks meta.json record")
    header = json.loads(bytes(records.pop("meta.json").numpy()).decode("utf-8"))
    vocab = Vocab(header["vocab"])

    def build(prefix, module):
        state = OrderedDict(
            (k[len(prefix) + 1 :], v) for k, v in records.items() if k.startswith(prefix + "/")
        )
        dtype = next(iter(state.values())).dtype
        module = module.to(dtype)
        module.load_state_dict(state)
        return module

    generator = classifier = None
    if header["generator_config"] is not None:
        generator = build("generator", FragmentGenerator(GeneratorConfig(**header["generator_config"])))
    if header["classifier_config"] is not None:
        classifier = build("classifier", KnowledgeClassifier(ClassifierConfig(**header["classifier_config"])))

    optim: Dict[str, Dict[str, torch.Tensor]] = {}
    for k, v in records.items():
        if k.startswith("optim/"):
            pname, key = k[len("optim/") :].rsplit("/", 1)
            optim.setdefault(pname, {})[key] = v
    return Checkpoint(
        vocab=vocab,
        categories=list(header["categories"]),
        generator=generator,
        classifier=classifier,
        optimizer_state=optim,
        step=int(header["step"]),
        rng_state=records.get("rng"),
        meta=header["meta"],
    )
