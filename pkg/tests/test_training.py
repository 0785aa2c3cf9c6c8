import json
import math

import pytest
import torch

from dragan.checkpoint import load_checkpoint, save_checkpoint
from dragan.exceptions import ConfigError, ContractError, DataError
from dragan.text_data import CorpusSpec, Example, build_vocab, synth_corpus
from dragan.training import (
    MetricsReport,
    TrainConfig,
    Trainer,
    benchmark_inference,
    clone_checkpoint,
    evaluate,
    f1_score,
    joint_train,
    make_optimizer,
    new_checkpoint,
    precision_recall_f1,
    pretrain_classifier,
    pretrain_generator,
    standard_eval_sets,
)

SMALL = dict(layers=1, heads=2, d_model=16, d_ff=32)


@pytest.fixture(scope="module")
def small_corpus():
    return synth_corpus(CorpusSpec(
        num_categories=4, num_brands=6, num_model_codes=24,
        n_pretrain=200, n_joint=96, n_eval=40, seed=3,
    ))


def small_ckpt(corpus, seed=0, dtype=torch.float32, **gen_kw):
    vocab = build_vocab(corpus.pretrain + corpus.joint)
    return new_checkpoint(vocab, corpus.categories, dict(SMALL, **gen_kw), dict(SMALL), seed=seed, dtype=dtype)


@pytest.fixture(scope="module")
def pretrained(small_corpus):
    ckpt = small_ckpt(small_corpus)
    pretrain_generator(small_corpus.pretrain, TrainConfig("pretrain_gen", epochs=2), ckpt)
    pretrain_classifier(small_corpus.joint, TrainConfig("pretrain_cls", epochs=1), ckpt)
    return ckpt


class TestConfig:
    def test_default_learning_rates(self):
        assert TrainConfig("pretrain_gen").lr == 1e-3
        assert TrainConfig("joint").lr == 3e-4

    def test_exclusive_flags(self):
        with pytest.raises(ConfigError):
            TrainConfig("joint", fixed_generator=True, equal_probability=True).validate()

    @pytest.mark.parametrize("kw", [dict(stage="warmup"), dict(stage="joint", lr=0.0), dict(stage="joint", lr=-1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw).validate()


def test_adam_matches_scalar_reference():
    w = torch.nn.Parameter(torch.tensor([0.5], dtype=torch.float64))
    cfg = TrainConfig("joint", lr=0.01)
    opt = make_optimizer([w], cfg)
    ref, m, v = 0.5, 0.0, 0.0
    for t in range(1, 26):
        opt.zero_grad()
        loss = (w - 3.0) ** 2 * (1 + 0.1 * t)
        loss.backward()
        opt.step()
        g = 2 * (ref - 3.0) * (1 + 0.1 * t)
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        m_hat = m / (1 - cfg.beta1 ** t)
        v_hat = v / (1 - cfg.beta2 ** t)
        ref -= cfg.lr * m_hat / (math.sqrt(v_hat) + cfg.eps)
        assert abs(float(w.detach()) - ref) < 1e-12


class TestPretrainGenerator:
    def test_loss_decreases(self, small_corpus):
        ckpt = small_ckpt(small_corpus)
        hist = pretrain_generator(small_corpus.pretrain, TrainConfig("pretrain_gen", epochs=3), ckpt)
        assert hist[-1] < hist[0]

    def test_title_of_fragment_length_only_start_zero(self, small_corpus):
        ckpt = small_ckpt(small_corpus)
        trainer = Trainer(ckpt, TrainConfig("pretrain_gen"))
        L = ckpt.generator.cfg.fragment_len
        ex = Example("ab", "x" * L, small_corpus.categories[0])
        for _ in range(20):
            keep, starts, _ = trainer._clips([ex], L)
            assert keep == [0] and starts.tolist() == [0]

    def test_short_title_skipped(self, small_corpus):
        ckpt = small_ckpt(small_corpus)
        trainer = Trainer(ckpt, TrainConfig("pretrain_gen"))
        ok = small_corpus.pretrain[0]
        trainer.step([ok, Example("ab", "xyz", ok.category)])
        assert trainer.stats["skipped_short_titles"] == 1

    def test_zero_start_weight_leaves_start_head_alone(self, small_corpus):
        ckpt = small_ckpt(small_corpus)
        trainer = Trainer(ckpt, TrainConfig("pretrain_gen", start_loss_weight=0.0))
        trainer.step(small_corpus.pretrain[:16])
        grads = trainer.params.grads("generator")
        assert float(grads["generator.start_head.weight"].abs().sum()) == 0.0
        assert float(grads["generator.start_head.bias"].abs().sum()) == 0.0
        assert float(grads["generator.out.weight"].abs().sum()) > 0.0


class TestPretrainClassifier:
    def test_loss_decreases(self, pretrained, small_corpus):
        ckpt = clone_checkpoint(pretrained)
        hist = pretrain_classifier(small_corpus.joint, TrainConfig("pretrain_cls", epochs=3), ckpt)
        assert hist[-1] < hist[0]

    def test_query_only_without_generator(self, small_corpus):
        vocab = build_vocab(small_corpus.pretrain + small_corpus.joint)
        ckpt = new_checkpoint(vocab, small_corpus.categories, dict(SMALL), dict(SMALL), with_generator=False)
        hist = pretrain_classifier(small_corpus.joint, TrainConfig("pretrain_cls", epochs=1, query_only=True), ckpt)
        assert math.isfinite(hist[0])
        with pytest.raises(ContractError):
            Trainer(ckpt, TrainConfig("pretrain_cls"))

    def test_gold_fragments(self, pretrained, small_corpus):
        ckpt = clone_checkpoint(pretrained)
        hist = pretrain_classifier(small_corpus.joint, TrainConfig("pretrain_cls", gold_fragments=True), ckpt)
        assert math.isfinite(hist[0])


class TestJoint:
    def test_fixed_generator_is_bitwise_frozen(self, pretrained, small_corpus):
        ckpt = clone_checkpoint(pretrained)
        before = {n: p.detach().clone() for n, p in ckpt.generator.named_parameters()}
        joint_train(small_corpus.joint, TrainConfig("joint", fixed_generator=True), ckpt)
        for n, p in ckpt.generator.named_parameters():
            assert torch.equal(p, before[n]), n

    def test_joint_moves_generator(self, pretrained, small_corpus):
        ckpt = clone_checkpoint(pretrained)
        before = torch.cat([p.detach().reshape(-1).clone() for p in ckpt.generator.parameters()])
        joint_train(small_corpus.joint[:32], TrainConfig("joint"), ckpt)
        after = torch.cat([p.detach().reshape(-1) for p in ckpt.generator.parameters()])
        assert not torch.equal(before, after)

    def test_reinit_exactly_once(self, pretrained, small_corpus):
        ckpt = clone_checkpoint(pretrained)
        head = ckpt.classifier.head.weight.detach().clone()
        joint_train(small_corpus.joint[:32], TrainConfig("joint"), ckpt)
        first = ckpt.meta["reinit_steps"]
        assert len(first) == 1 and first[0] == pretrained.step
        assert not torch.equal(head, ckpt.classifier.head.weight)
        joint_train(small_corpus.joint[:32], TrainConfig("joint"), ckpt)
        assert ckpt.meta["reinit_steps"] == first

    def test_fifteen_candidates_per_example(self, small_corpus):
        vocab = build_vocab(small_corpus.pretrain + small_corpus.joint)
        ckpt = new_checkpoint(vocab, small_corpus.categories, dict(SMALL), dict(SMALL))
        seen = []
        orig = ckpt.generator.generate_candidates

        def spy(*args, **kw):
            out = orig(*args, **kw)
            seen.append(out.k)
            return out

        ckpt.generator.generate_candidates = spy
        trainer = Trainer(ckpt, TrainConfig("joint"))
        trainer.step(small_corpus.joint[:4])
        assert seen == [15]

    def test_checkpoint_round_trip_is_transparent(self, pretrained, small_corpus, tmp_path):
        ckpt = clone_checkpoint(pretrained)
        cfg = TrainConfig("joint", batch_size=8)
        trainer = Trainer(ckpt, cfg)
        trainer.step(small_corpus.joint[:8])
        trainer.step(small_corpus.joint[8:16])
        save_checkpoint(trainer.checkpoint(), tmp_path / "c.drgn")

        nxt = small_corpus.joint[16:24]
        trainer.step(nxt)
        resumed = Trainer(load_checkpoint(tmp_path / "c.drgn"), cfg)
        resumed.step(nxt)
        a = dict(trainer.params)
        for name, p in resumed.params:
            assert torch.equal(p, a[name]), name
        assert resumed.ckpt.step == trainer.ckpt.step


class TestMetrics:
    def test_perfect_predictor(self):
        gold = torch.tensor([0, 2, 1, 2])
        proba = torch.nn.functional.one_hot(gold, 3).double()
        assert precision_recall_f1(gold, proba, 0.5) == (1.0, 1.0, 1.0)

    def test_all_labels(self):
        gold = torch.tensor([0, 2, 1, 2])
        p, r, _ = precision_recall_f1(gold, torch.ones(4, 5), 0.5)
        assert r == 1.0 and abs(p - 1 / 5) < 1e-12

    def test_empty_set_gets_argmax(self):
        gold = torch.tensor([1])
        proba = torch.tensor([[0.3, 0.4, 0.3]])
        assert precision_recall_f1(gold, proba, 0.5) == (1.0, 1.0, 1.0)

    def test_f1_identity(self):
        assert f1_score(0.5, 0.25) == pytest.approx(2 * 0.5 * 0.25 / 0.75)
        assert f1_score(0.0, 0.0) == 0.0

    def test_bad_tau(self):
        with pytest.raises(ContractError):
            precision_recall_f1(torch.tensor([0]), torch.ones(1, 2), 1.0)

    def test_empty_eval_set(self, pretrained):
        with pytest.raises(DataError):
            evaluate(pretrained, {"overall": []})

    def test_report_contents(self, pretrained, small_corpus, tmp_path):
        report = evaluate(pretrained, standard_eval_sets(small_corpus.eval_overall, small_corpus.eval_longtail))
        assert set(report.splits) == {"overall", "overall_opaque", "long_tail", "long_tail_opaque"}
        s = report.splits["overall"]
        assert s.f1 == pytest.approx(f1_score(s.precision, s.recall))
        assert sum(s.start_histogram) == s.n == len(small_corpus.eval_overall)
        assert sum(map(sum, s.confusion)) == s.n
        data = json.loads(report.write_json(tmp_path / "m.json").read_text())
        assert data["splits"]["overall"]["f1"] == s.f1
        lines = report.write_histogram_tsv(tmp_path / "h.tsv").read_text().splitlines()
        assert lines[0].split("\t")[0] == "position" and len(lines) == 1 + len(s.start_histogram)

    def test_fixed_seed_reproduces_report(self, small_corpus):
        def run():
            ckpt = small_ckpt(small_corpus, seed=5)
            pretrain_generator(small_corpus.pretrain[:64], TrainConfig("pretrain_gen", seed=5), ckpt)
            pretrain_classifier(small_corpus.joint[:32], TrainConfig("pretrain_cls", seed=5), ckpt)
            joint_train(small_corpus.joint[:32], TrainConfig("joint", seed=5), ckpt)
            return evaluate(ckpt, {"overall": small_corpus.eval_overall})

        a, b = run(), run()
        assert isinstance(a, MetricsReport) and a == b


class TestBenchmark:
    def test_too_few_queries(self, pretrained):
        with pytest.raises(ContractError):
            benchmark_inference(pretrained, ["ab"], n_queries=50)

    def test_stats(self, pretrained, small_corpus):
        st = benchmark_inference(pretrained, [e.query for e in small_corpus.eval_overall], "fragment", 100)
        assert st.n == 100 and 0 < st.median_ms <= st.p95_ms

    def test_eval_candidates_repeatable(self, pretrained, small_corpus):
        from dragan.training import predict_log_proba

        qs = [e.query for e in small_corpus.eval_overall[:10]]
        assert torch.equal(predict_log_proba(pretrained, qs), predict_log_proba(pretrained, qs))
