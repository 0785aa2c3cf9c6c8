import string
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from dragan.exceptions import ConfigError, ContractError, DataError
from dragan.text_data import (
    ATTRIBUTE_WORDS,
    CODE_DIGITS,
    CODE_LETTERS,
    SPECIALS,
    UNK_ID,
    CorpusSpec,
    Example,
    build_vocab,
    is_opaque_query,
    load_dataset,
    read_manifest,
    save_dataset,
    synth_corpus,
    template_alphabet,
    write_corpus,
)


@pytest.fixture(scope="module")
def corpus():
    return synth_corpus(CorpusSpec())


class TestVocab:
    def test_small_corpus(self):
        v = build_vocab(["ab", "bc"])
        assert v.tokens == list(SPECIALS) + ["a", "b", "c"]
        assert [v.index[s] for s in SPECIALS] == list(range(6))

    def test_unseen_is_unk(self):
        v = build_vocab(["ab"])
        assert v.encode("az") == [v.index["a"], UNK_ID]

    def test_empty_corpus(self):
        with pytest.raises(ContractError):
            build_vocab([])

    @settings(max_examples=100, deadline=None)
    @given(st.text(alphabet="abcxyz -09", min_size=0, max_size=30))
    def test_round_trip(self, text):
        v = build_vocab(["abcxyz -09"])
        assert v.decode(v.encode(text)) == text

    def test_default_synthetic_vocab_size(self, corpus):
        # enumerate every character the templates put into item fields
        emitted = {" "}
        for it in corpus.items:
            for part in (it.brand, it.product, it.code) + it.attributes:
                emitted.update(part)
        v = build_vocab(corpus.pretrain + corpus.joint)
        assert len(v) == 6 + len(emitted)
        assert v.chars == template_alphabet(corpus.spec)
        assert len(v) <= 128


class TestSynthCorpus:
    def test_split_sizes(self, corpus):
        spec = corpus.spec
        assert len(corpus.pretrain) == spec.n_pretrain
        assert len(corpus.joint) == spec.n_joint
        assert len(corpus.eval_overall) == spec.n_eval
        assert 0 < len(corpus.eval_longtail) <= spec.n_eval

    def test_no_long_tail_when_fraction_zero(self):
        c = synth_corpus(CorpusSpec(long_tail_fraction=0.0, n_pretrain=700, n_joint=400, n_eval=50))
        assert c.eval_longtail == []

    def test_deterministic(self, tmp_path):
        a = write_corpus(synth_corpus(CorpusSpec(seed=7)), tmp_path / "a").parent
        b = write_corpus(synth_corpus(CorpusSpec(seed=7)), tmp_path / "b").parent
        for name in ("pretrain.tsv", "joint.tsv", "eval_overall.tsv", "eval_longtail.tsv", "manifest.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_seed_changes_data(self):
        assert synth_corpus(CorpusSpec(seed=1)).joint != synth_corpus(CorpusSpec(seed=2)).joint

    def test_infeasible_code_space(self):
        with pytest.raises(ConfigError):
            synth_corpus(CorpusSpec(num_model_codes=10 ** 9))

    def test_infeasible_brands(self):
        with pytest.raises(ConfigError):
            synth_corpus(CorpusSpec(num_brands=3))

    @pytest.mark.parametrize("field,value", [("long_tail_fraction", 1.5), ("num_categories", 0), ("opaque_fraction", -0.1)])
    def test_invalid_spec(self, field, value):
        with pytest.raises(ConfigError):
            synth_corpus(CorpusSpec(**{field: value}))

    def test_long_tail_unseen(self, corpus):
        joint_queries = {ex.query for ex in corpus.joint}
        assert {ex.query for ex in corpus.eval_longtail} & joint_queries == set()

    def test_every_category_in_train(self, corpus):
        assert {ex.category for ex in corpus.joint} == set(corpus.categories)

    def test_opaque_fraction(self, corpus):
        frac = sum(is_opaque_query(e.query) for e in corpus.joint) / len(corpus.joint)
        assert abs(frac - corpus.spec.opaque_fraction) < 0.05

    def test_label_distribution(self, corpus):
        counts = Counter(ex.category for ex in corpus.joint)
        observed = [counts[c] for c in corpus.categories]
        assert chisquare(observed).pvalue > 0.01

    def test_category_only_from_product_word(self, corpus):
        # Oracle: read the product word out of query + gold title.
        lookup = {w: c for c, w in corpus.product_words.items()}
        for ex in corpus.eval_overall + corpus.eval_longtail:
            words = (ex.query + " " + ex.title).split()
            hits = {lookup[w] for w in words if w in lookup}
            assert hits == {ex.category}

    def test_opaque_queries_carry_no_category_signal(self):
        # Bag-of-characters classifier trained on opaque joint queries, scored
        # on unseen opaque codes, against the best constant predictor. One
        # corpus holds only ~90 distinct held-out codes, so pool 8 seeds.
        from sklearn.feature_extraction.text import CountVectorizer
        from sklearn.linear_model import LogisticRegression

        correct = majority = total = 0
        for seed in range(8):
            c = synth_corpus(CorpusSpec(seed=seed))
            train = [e for e in c.joint if is_opaque_query(e.query)]
            test = [e for e in c.eval_longtail if is_opaque_query(e.query)]
            vec = CountVectorizer(analyzer="char", lowercase=False)
            X = vec.fit_transform([e.query for e in train])
            clf = LogisticRegression(max_iter=2000).fit(X, [e.category for e in train])
            pred = clf.predict(vec.transform([e.query for e in test]))
            correct += sum(p == e.category for p, e in zip(pred, test))
            majority += max(Counter(e.category for e in test).values())
            total += len(test)
        assert correct / total <= majority / total

    def test_oracle_with_gold_title_is_perfect(self, corpus):
        lookup = {w: c for c, w in corpus.product_words.items()}

        def predict(ex):
            for w in (ex.query + " " + ex.title).split():
                if w in lookup:
                    return lookup[w]
            return None

        evals = corpus.eval_overall
        assert sum(predict(e) == e.category for e in evals) / len(evals) == 1.0

    def test_title_template(self, corpus):
        for it in corpus.items[:50]:
            parts = it.title.split(" ")
            assert parts[0] == it.brand and parts[1] == it.product and parts[-1] == it.code
            assert set(parts[2:-1]) <= set(ATTRIBUTE_WORDS)
            assert is_opaque_query(it.code)
            assert set(it.code) <= set(CODE_LETTERS) | set(CODE_DIGITS) | {"-"}

    def test_manifest(self, corpus, tmp_path):
        write_corpus(corpus, tmp_path)
        m = read_manifest(tmp_path)
        assert m["counts"]["joint"] == len(corpus.joint)
        assert m["seed"] == corpus.spec.seed
        assert m["categories"] == corpus.categories
        assert load_dataset(tmp_path / "joint.tsv", m["categories"]) == corpus.joint


class TestDatasetFiles:
    def test_three_lines(self, tmp_path):
        p = tmp_path / "d.tsv"
        p.write_text("a\tt1\tX\nb\tt2\tY\nc\tt3\tX\n", encoding="utf-8")
        assert len(load_dataset(p)) == 3

    def test_missing_category_names_line(self, tmp_path):
        p = tmp_path / "d.tsv"
        p.write_text("a\tt1\tX\nb\tt2\nc\tt3\tX\n", encoding="utf-8")
        with pytest.raises(DataError) as err:
            load_dataset(p)
        assert err.value.lines == [2]
        assert "line 2" in str(err.value)

    def test_unknown_category(self, tmp_path):
        p = tmp_path / "d.tsv"
        p.write_text("a\tt1\tX\nb\tt2\tZ\n", encoding="utf-8")
        with pytest.raises(DataError) as err:
            load_dataset(p, categories=["X", "Y"])
        assert err.value.lines == [2]

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path / "nope.tsv")

    field_text = st.text(
        alphabet=st.characters(blacklist_characters="\t\n\r", blacklist_categories=("Cs",)),
        min_size=1,
        max_size=20,
    )

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.builds(Example, field_text, field_text, field_text), min_size=1, max_size=15))
    def test_round_trip(self, tmp_path_factory, examples):
        p = tmp_path_factory.mktemp("rt") / "d.tsv"
        save_dataset(p, examples)
        assert load_dataset(p) == examples
