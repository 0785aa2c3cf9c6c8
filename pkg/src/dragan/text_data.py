"""Vocabulary, dataset files and the synthetic query/title corpus."""
from __future__ import annotations

import json
import random
import re
import string
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .exceptions import ConfigError, ContractError, DataError

PAD, BOS, EOS, SEP, CLS, UNK = "<pad>", "<bos>", "<eos>", "<sep>", "<cls>", "<unk>"
SPECIALS = (PAD, BOS, EOS, SEP, CLS, UNK)
PAD_ID, BOS_ID, EOS_ID, SEP_ID, CLS_ID, UNK_ID = range(len(SPECIALS))

Q_MAX = 16
S_MAX = 48


class Vocab:
    """Character vocabulary with the six specials at ids 0-5."""

    def __init__(self, chars: Iterable[str]):
        seen = []
        for c in chars:
            if c in SPECIALS or c in seen:
                continue
            if len(c) != 1:
                raise ContractError(f"vocab entries must be single characters, got {c!r}")
            seen.append(c)
        self.tokens: List[str] = list(SPECIALS) + seen
        self.index: Dict[str, int] = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, ch):
        return ch in self.index

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def encode(self, text: str) -> List[int]:
        return [self.index.get(c, UNK_ID) for c in text]

    def decode(self, ids: Iterable[int], skip_specials: bool = True) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i < len(SPECIALS):
                if not skip_specials:
                    out.append(self.tokens[i])
                continue
            out.append(self.tokens[i])
        return "".join(out)

    @property
    def chars(self) -> List[str]:
        return self.tokens[len(SPECIALS):]


def build_vocab(corpus: Iterable) -> Vocab:
    """Vocabulary over every character of the given examples or strings."""
    chars = set()
    n = 0
    for item in corpus:
        n += 1
        if isinstance(item, Example):
            chars.update(item.query)
            chars.update(item.title)
        else:
            chars.update(item)
    if n == 0:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    return Vocab(sorted(chars))


@dataclass(frozen=True)
class Example:
    query: str
    title: str
    category: str


# Dataset files: one example per line, query<TAB>title<TAB>category.

def save_dataset(path, examples: Sequence[Example]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            for value in (ex.query, ex.title, ex.category):
                if "\t" in value or "\n" in value:
                    raise DataError(f"field contains a tab or newline: {value!r}")
            fh.write(f"{ex.query}\t{ex.title}\t{ex.category}\n")


def load_dataset(path, categories: Optional[Sequence[str]] = None) -> List[Example]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    known = set(categories) if categories is not None else None
    examples, problems = [], []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                problems.append((lineno, f"expected 3 tab-separated fields, got {len(fields)}"))
                continue
            query, title, category = fields
            if not query:
                problems.append((lineno, "empty query"))
            elif not title:
                problems.append((lineno, "empty title"))
            elif not category:
                problems.append((lineno, "empty category"))
            elif known is not None and category not in known:
                problems.append((lineno, f"unknown category {category!r}"))
            else:
                examples.append(Example(query, title, category))
    if problems:
        detail = "; ".join(f"line {n}: {msg}" for n, msg in problems[:20])
        raise DataError(f"{path}: {len(problems)} malformed line(s): {detail}", [n for n, _ in problems])
    return examples


# Synthetic corpus. Titles are "brand product attr... CODE"; the product word
# alone determines the category, and model codes carry no category signal.

PRODUCT_WORDS = (
    "kettle", "camera", "fridge", "laptop", "monitor", "blender", "speaker",
    "jacket", "sneaker", "watch", "printer", "router", "toaster", "vacuum",
    "drill", "tent", "helmet", "guitar", "mattress", "stroller", "heater",
    "mixer", "scooter", "lamp",
)
ATTRIBUTE_WORDS = (
    "red", "blue", "black", "white", "gray", "gold", "steel", "mini", "pro",
    "max", "slim", "lite", "plus", "home", "smart", "eco",
)
BRAND_CONSONANTS = "bdfgklmnprstvz"
BRAND_VOWELS = "aeiou"
CODE_LETTERS = string.ascii_uppercase
CODE_DIGITS = string.digits
CODE_PATTERN = re.compile(r"^[A-Z]{2}-[0-9]{3}[A-Z]$")


def is_opaque_query(query: str) -> bool:
    return bool(CODE_PATTERN.match(query))


def code_space_size() -> int:
    return len(CODE_LETTERS) ** 3 * len(CODE_DIGITS) ** 3


def template_alphabet(spec: "CorpusSpec") -> List[str]:
    """Every character the title/query templates can emit for ``spec``."""
    chars = set(" -") | set(CODE_LETTERS) | set(CODE_DIGITS)
    for w in product_words(spec.num_categories, spec.seed):
        chars.update(w)
    for w in ATTRIBUTE_WORDS:
        chars.update(w)
    chars.update(BRAND_CONSONANTS)
    chars.update(BRAND_VOWELS)
    return sorted(chars)


@dataclass
class CorpusSpec:
    num_categories: int = 20
    num_brands: int = 30
    num_model_codes: int = 300
    title_length: Tuple[int, int] = (20, 44)
    long_tail_fraction: float = 0.3
    opaque_fraction: float = 0.5
    n_pretrain: int = 6000
    n_joint: int = 2000
    n_eval: int = 500
    seed: int = 0

    def validate(self):
        for name in ("num_categories", "num_brands", "num_model_codes", "n_pretrain", "n_joint"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_eval < 0:
            raise ConfigError("n_eval must be >= 0")
        for name in ("long_tail_fraction", "opaque_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        lo, hi = self.title_length
        if not 1 <= lo <= hi <= S_MAX:
            raise ConfigError(f"title_length must satisfy 1 <= lo <= hi <= {S_MAX}")
        if self.num_model_codes > code_space_size():
            raise ConfigError(
                f"{self.num_model_codes} unique model codes requested, code space holds {code_space_size()}"
            )
        if self.num_model_codes < self.num_categories:
            raise ConfigError("need at least one catalog item per category")
        per_cat = -(-self.num_model_codes // self.num_categories)
        if per_cat > self.num_brands:
            raise ConfigError(
                f"{per_cat} items per category need distinct brands but only {self.num_brands} exist"
            )
        return self


@dataclass(frozen=True)
class Item:
    brand: str
    product: str
    attributes: Tuple[str, ...]
    code: str
    category: str
    held_out: bool

    @property
    def title(self) -> str:
        return " ".join((self.brand, self.product) + self.attributes + (self.code,))


@dataclass
class Corpus:
    spec: CorpusSpec
    categories: List[str]
    product_words: Dict[str, str]
    items: List[Item]
    pretrain: List[Example]
    joint: List[Example]
    eval_overall: List[Example]
    eval_longtail: List[Example]

    def splits(self) -> Dict[str, List[Example]]:
        return {
            "pretrain": self.pretrain,
            "joint": self.joint,
            "eval_overall": self.eval_overall,
            "eval_longtail": self.eval_longtail,
        }


def product_words(n: int, seed: int) -> List[str]:
    words = list(PRODUCT_WORDS[:n])
    rng = random.Random(f"product-words-{seed}")
    while len(words) < n:
        w = _pseudo_word(rng, 5, 7)
        if w not in words and w not in ATTRIBUTE_WORDS:
            words.append(w)
    return words


def category_name(product: str) -> str:
    return product.capitalize()


def _pseudo_word(rng: random.Random, lo: int, hi: int) -> str:
    n = rng.randint(lo, hi)
    return "".join(
        rng.choice(BRAND_CONSONANTS) if i % 2 == 0 else rng.choice(BRAND_VOWELS) for i in range(n)
    )


def _brands(spec: CorpusSpec, rng: random.Random, taken: set) -> List[str]:
    out: List[str] = []
    while len(out) < spec.num_brands:
        w = _pseudo_word(rng, 4, 6)
        if w not in taken and w not in out:
            out.append(w)
    return out


def _code(rng: random.Random) -> str:
    return (
        rng.choice(CODE_LETTERS) + rng.choice(CODE_LETTERS) + "-"
        + "".join(rng.choice(CODE_DIGITS) for _ in range(3))
        + rng.choice(CODE_LETTERS)
    )


def _make_items(spec: CorpusSpec, rng: random.Random, pwords: List[str]) -> List[Item]:
    lo, hi = spec.title_length
    brands = _brands(spec, rng, set(pwords) | set(ATTRIBUTE_WORDS))
    counts = [spec.num_model_codes // spec.num_categories] * spec.num_categories
    for i in range(spec.num_model_codes % spec.num_categories):
        counts[i] += 1

    codes: set = set()
    items: List[Item] = []
    for cat_idx, pw in enumerate(pwords):
        n = counts[cat_idx]
        n_held = int(round(n * spec.long_tail_fraction))
        if spec.long_tail_fraction < 1.0:
            n_held = min(n_held, n - 1)
        cat_brands = rng.sample(brands, n)
        for j in range(n):
            code = _code(rng)
            while code in codes:
                code = _code(rng)
            codes.add(code)
            for _ in range(200):
                k = rng.randint(1, 3)
                attrs = tuple(rng.sample(ATTRIBUTE_WORDS, k))
                item = Item(cat_brands[j], pw, attrs, code, category_name(pw), j < n_held)
                if lo <= len(item.title) <= hi:
                    break
            else:
                raise ConfigError(f"cannot build a title within length range {spec.title_length}")
            items.append(item)
    return items


def _query(item: Item, rng: random.Random, opaque_fraction: float) -> str:
    if rng.random() < opaque_fraction:
        return item.code
    if rng.random() < 0.5:
        return f"{item.brand} {item.product}"[:Q_MAX]
    return f"{item.brand} {item.product} {item.attributes[0]}"[:Q_MAX]


def _sample(items: List[Item], n: int, rng: random.Random, opaque_fraction: float) -> List[Example]:
    out = []
    for _ in range(n):
        it = rng.choice(items)
        out.append(Example(_query(it, rng, opaque_fraction), it.title[:S_MAX], it.category))
    return out


def synth_corpus(spec: Optional[CorpusSpec] = None) -> Corpus:
    """Deterministic four-way synthetic corpus.

    The pretraining split is a click log over the whole catalog, so the
    generator can learn every item. Held-out items never reach the joint
    split; the long-tail eval draws only from them.
    """
    spec = (spec or CorpusSpec()).validate()
    rng = random.Random(spec.seed)
    pwords = product_words(spec.num_categories, spec.seed)
    items = _make_items(spec, rng, pwords)
    train_items = [it for it in items if not it.held_out]
    held_items = [it for it in items if it.held_out]

    pretrain = []
    for it in items:
        pretrain.append(Example(it.code, it.title, it.category))
        pretrain.append(Example(f"{it.brand} {it.product}"[:Q_MAX], it.title, it.category))
    pretrain = pretrain[: spec.n_pretrain]
    pretrain += _sample(items, spec.n_pretrain - len(pretrain), rng, spec.opaque_fraction)
    rng.shuffle(pretrain)

    joint = _sample(train_items, spec.n_joint, rng, spec.opaque_fraction)
    eval_overall = _sample(items, spec.n_eval, rng, spec.opaque_fraction)
    if held_items and spec.n_eval > 0:
        seen = {ex.query for ex in joint}
        eval_longtail = [
            ex for ex in _sample(held_items, spec.n_eval, rng, spec.opaque_fraction)
            if ex.query not in seen
        ]
    else:
        eval_longtail = []

    categories = [category_name(w) for w in pwords]
    missing = set(categories) - {ex.category for ex in joint}
    if missing:
        raise ConfigError(f"joint split lacks categories {sorted(missing)}; raise n_joint")
    return Corpus(
        spec=spec,
        categories=categories,
        product_words={category_name(w): w for w in pwords},
        items=items,
        pretrain=pretrain,
        joint=joint,
        eval_overall=eval_overall,
        eval_longtail=eval_longtail,
    )


def product_word_start(title: str, product_words: Iterable[str]) -> Optional[int]:
    """Character offset of the first product word in ``title`` (word-aligned)."""
    words = set(product_words)
    pos = 0
    for w in title.split(" "):
        if w in words:
            return pos
        pos += len(w) + 1
    return None


def write_corpus(corpus: Corpus, outdir) -> Path:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    counts = {}
    for name, examples in corpus.splits().items():
        save_dataset(outdir / f"{name}.tsv", examples)
        counts[name] = len(examples)
    manifest = {
        "format": 1,
        "seed": corpus.spec.seed,
        "spec": asdict(corpus.spec),
        "counts": counts,
        "categories": corpus.categories,
        "product_words": corpus.product_words,
        "opaque_counts": {
            name: sum(is_opaque_query(ex.query) for ex in exs) for name, exs in corpus.splits().items()
        },
    }
    path = outdir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"manifest not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
