import pytest
import torch

from dragan.classifier import ClassifierConfig, KnowledgeClassifier
from dragan.generator import FragmentGenerator, GeneratorConfig
from dragan.layers import pad_sequences
from dragan.objective import QueryBatch

# Tiny enumerable setup: generator tokens 0..3, classifier adds pad/cls/sep.
TINY_V = 4
TINY_PAD, TINY_CLS, TINY_SEP = 4, 5, 6


def spread(module, seed, scale=0.5):
    """Re-draw every parameter with a wider normal so distributions are far from uniform."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype) * scale)
    return module


def tiny_generator(seed=0, vocab_size=TINY_V, fragment_len=2, s_max=2, num_starts=2, beam_size=2, dtype=torch.float64):
    cfg = GeneratorConfig(
        vocab_size=vocab_size, layers=1, heads=2, d_model=8, d_ff=16,
        fragment_len=fragment_len, s_max=s_max, beam_size=beam_size,
        num_starts=num_starts, q_max=4, seed=seed,
    )
    return spread(FragmentGenerator(cfg).to(dtype), seed + 100)


def tiny_classifier(seed=0, num_categories=3, max_len=4 + 6 + 3, dtype=torch.float64):
    cfg = ClassifierConfig(
        vocab_size=7, num_categories=num_categories, layers=1, heads=2, d_model=8, d_ff=16,
        max_len=max_len, cls_id=TINY_CLS, sep_id=TINY_SEP, pad_id=TINY_PAD, seed=seed,
    )
    return spread(KnowledgeClassifier(cfg).to(dtype), seed + 200)


def tiny_batch(queries, labels):
    ids, mask = pad_sequences(queries, pad_id=0)
    return QueryBatch(ids, mask, torch.tensor(labels, dtype=torch.long))


@pytest.fixture
def tiny_gen():
    return tiny_generator()


@pytest.fixture
def tiny_cls():
    return tiny_classifier()


# One pass/fail line per acceptance criterion, repeated in the terminal summary.
ACCEPTANCE_LINES = []


def record_criterion(name, ok, detail):
    line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
