import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snislm.corpus import (
    Batch,
    Corpus,
    SyntheticTask,
    UNK_TOKEN,
    build_vocabulary,
    corpus_pairs,
    encode_corpus,
    generate_synthetic_task,
    load_task,
    make_batches,
    read_corpus_text,
    sample_corpus,
    save_task,
    write_corpus_text,
)
from snislm.rng import stream_rng


class TestBuildVocabulary:
    def test_frequency_ordering_with_unk(self):
        vocab = build_vocabulary(["a a b"], min_count=1)
        assert vocab.tokens == ("a", "b", UNK_TOKEN)
        assert vocab.size == 3
        assert list(vocab.counts) == [2, 1, 0]

    def test_min_count_folds_into_unk(self):
        vocab = build_vocabulary(["a b b"], min_count=2)
        assert vocab.tokens == ("b", UNK_TOKEN)
        assert list(vocab.counts) == [2, 1]

    def test_empty_input_is_an_error(self):
        with pytest.raises(ValueError):
            build_vocabulary([])
        with pytest.raises(ValueError):
            build_vocabulary(["", "   "])

    def test_counting_oracle_on_synthetic_text(self):
        rng = stream_rng(5, 1)
        words = [f"w{i:02d}" for i in range(40)]
        weights = rng.random(40)
        weights /= weights.sum()
        lines = [
            " ".join(rng.choice(words, size=12, p=weights)) for _ in range(1000)
        ]
        # independent counting oracle
        from collections import Counter

        oracle = Counter(tok for line in lines for tok in line.split())
        vocab = build_vocabulary(lines, min_count=1)
        counts = list(vocab.counts)
        assert counts == sorted(counts, reverse=True)
        for token, count in oracle.items():
            assert vocab.counts[vocab.id_of(token)] == count

    def test_ties_broken_lexicographically(self):
        vocab = build_vocabulary(["b a", "d c"], min_count=1)
        assert vocab.tokens == ("a", "b", "c", "d", UNK_TOKEN)

    def test_unknown_token_maps_to_unk(self):
        vocab = build_vocabulary(["a a b"], min_count=2)
        assert vocab.token_of(vocab.id_of("zzz")) == UNK_TOKEN

    @given(
        st.lists(
            st.text(alphabet="abcde", min_size=1, max_size=3), min_size=1, max_size=60
        )
    )
    @settings(max_examples=50, deadline=None)
    def test_ordering_total_and_stable(self, tokens):
        vocab = build_vocabulary([" ".join(tokens)], min_count=1)
        pairs = [(-int(c), t) for t, c in zip(vocab.tokens, vocab.counts)]
        assert pairs == sorted(pairs)
        again = build_vocabulary([" ".join(tokens)], min_count=1)
        assert vocab.tokens == again.tokens


class TestSyntheticTask:
    def test_rows_are_probability_vectors(self):
        task = generate_synthetic_task(50, 1, 0.1, seed=7)
        assert task.table.shape == (50, 50)
        assert np.all(task.table >= 0)
        np.testing.assert_allclose(task.table.sum(axis=1), 1.0, atol=1e-9)

    def test_large_concentration_approaches_uniform(self):
        task = generate_synthetic_task(2, 1, 1e9, seed=0)
        np.testing.assert_allclose(task.table, 0.5, atol=1e-3)

    def test_deterministic_given_seed(self):
        a = generate_synthetic_task(20, 2, 0.5, seed=3)
        b = generate_synthetic_task(20, 2, 0.5, seed=3)
        assert np.array_equal(a.table, b.table)  # TV distance exactly 0
        c = generate_synthetic_task(20, 2, 0.5, seed=4)
        assert not np.array_equal(a.table, c.table)

    def test_small_concentration_gives_peaked_rows(self):
        # threshold recorded from the generation run: measured fraction 0.98
        task = generate_synthetic_task(50, 1, 0.1, seed=7)
        assert (task.table.max(axis=1) > 0.5).mean() >= 0.6

    def test_state_cap_bounds_states(self):
        task = generate_synthetic_task(30, 3, 1.0, seed=1, state_cap=128)
        assert task.num_states == 128
        assert not task.exhaustive_states
        states = task.states_of(np.array([[0, 1, 2], [29, 29, 29]]))
        assert np.all((0 <= states) & (states < 128))

    def test_exhaustive_states_are_bijective(self):
        task = generate_synthetic_task(5, 2, 1.0, seed=1, state_cap=512)
        assert task.exhaustive_states and task.num_states == 25
        seen = {
            task.state_of((a, b)) for a in range(5) for b in range(5)
        }
        assert seen == set(range(25))

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            generate_synthetic_task(1, 1, 1.0, seed=0)
        with pytest.raises(ValueError):
            generate_synthetic_task(10, 1, 0.0, seed=0)
        with pytest.raises(ValueError):
            generate_synthetic_task(10, 0, 1.0, seed=0)


class TestTaskSerialization:
    def test_round_trip(self, tmp_path):
        task = generate_synthetic_task(17, 2, 0.7, seed=9, state_cap=128)
        path = tmp_path / "task.bin"
        save_task(task, path)
        loaded = load_task(path)
        assert loaded.vocab_size == 17
        assert loaded.order == 2
        assert loaded.state_cap == 128
        assert np.array_equal(loaded.table, task.table)

    def test_header_layout(self, tmp_path):
        task = generate_synthetic_task(4, 1, 1.0, seed=0)
        path = tmp_path / "task.bin"
        save_task(task, path)
        blob = path.read_bytes()
        assert blob[:8] == b"SNISTASK"
        assert int.from_bytes(blob[8:12], "little") == 1  # version
        assert int.from_bytes(blob[12:16], "little") == 4  # C
        assert int.from_bytes(blob[16:20], "little") == 1  # m
        assert int.from_bytes(blob[20:24], "little") == 512  # state cap
        assert len(blob) == 24 + 4 * 4 * 8

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTATASK" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_task(path)

    def test_truncated_rejected(self, tmp_path):
        task = generate_synthetic_task(4, 1, 1.0, seed=0)
        path = tmp_path / "task.bin"
        save_task(task, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError, match="truncated"):
            load_task(path)


class TestSampleCorpus:
    def test_one_hot_rows_force_the_sequence(self):
        # cyclic permutation: state i always emits (i + 1) % C
        c = 6
        table = np.zeros((c, c))
        table[np.arange(c), (np.arange(c) + 1) % c] = 1.0
        task = SyntheticTask(order=1, vocab_size=c, table=table)
        corpus = sample_corpus(task, 12, seed=0)
        assert list(corpus.ids) == [(i + 1) % c for i in range(12)]

    def test_determinism(self):
        task = generate_synthetic_task(20, 1, 0.5, seed=2)
        a = sample_corpus(task, 5000, seed=9)
        b = sample_corpus(task, 5000, seed=9)
        assert np.array_equal(a.ids, b.ids)
        c = sample_corpus(task, 5000, seed=10)
        assert not np.array_equal(a.ids, c.ids)

    def test_num_tokens_precondition(self):
        task = generate_synthetic_task(5, 2, 1.0, seed=0)
        with pytest.raises(ValueError):
            sample_corpus(task, 2, seed=0)

    @pytest.mark.slow
    def test_empirical_conditionals_match_table(self):
        task = generate_synthetic_task(50, 1, 2.0, seed=7)
        corpus = sample_corpus(task, 10**6, seed=13)
        histories, targets = corpus_pairs(corpus, 1)
        states = task.states_of(histories)
        for state in range(task.num_states):
            mask = states == state
            if mask.sum() < 10**4:
                continue
            empirical = np.bincount(targets[mask], minlength=50) / mask.sum()
            tv = 0.5 * np.abs(empirical - task.table[state]).sum()
            assert tv < 0.02, f"state {state}: tv={tv}"


class TestBatching:
    def test_enumeration_example(self):
        corpus = Corpus(ids=np.array([0, 1, 2, 3]), vocab_size=4)
        batches = list(make_batches(corpus, batch_size=2, order=1))
        assert len(batches) == 2
        assert batches[0].histories.tolist() == [[0], [1]]
        assert batches[0].targets.tolist() == [1, 2]
        assert batches[1].histories.tolist() == [[2]]
        assert batches[1].targets.tolist() == [3]

    def test_pair_count_equals_len_minus_order(self):
        task = generate_synthetic_task(10, 1, 1.0, seed=0)
        corpus = sample_corpus(task, 1000, seed=0)
        for order in (1, 2, 3):
            total = sum(
                b.size for b in make_batches(corpus, batch_size=7, order=order)
            )
            assert total == len(corpus) - order

    def test_shuffle_deterministic_per_seed_and_epoch(self):
        corpus = Corpus(ids=np.arange(100) % 10, vocab_size=10)

        def flatten(seed, epoch):
            return np.concatenate(
                [
                    b.targets
                    for b in make_batches(
                        corpus, 8, 1, shuffle=True, seed=seed, epoch=epoch
                    )
                ]
            )

        assert np.array_equal(flatten(3, 0), flatten(3, 0))
        assert not np.array_equal(flatten(3, 0), flatten(4, 0))
        assert not np.array_equal(flatten(3, 0), flatten(3, 1))

    @given(st.integers(2, 40), st.integers(1, 3), st.integers(1, 9))
    @settings(max_examples=40, deadline=None)
    def test_partition_no_pair_duplicated_or_dropped(self, n, order, batch_size):
        if n <= order:
            return
        corpus = Corpus(ids=np.arange(n) % 5, vocab_size=5)
        seen = []
        for batch in make_batches(corpus, batch_size, order, shuffle=True, seed=1):
            assert batch.histories.shape[1] == order
            for h, t in zip(batch.histories, batch.targets):
                seen.append((tuple(h), int(t)))
        expected = [
            (tuple(corpus.ids[i - order : i]), int(corpus.ids[i]))
            for i in range(order, n)
        ]
        assert sorted(seen) == sorted(expected)

    def test_batch_invariants(self):
        with pytest.raises(ValueError):
            Batch(histories=np.zeros((2, 1), dtype=np.int64), targets=np.zeros(3, dtype=np.int64))


class TestCorpusText:
    def test_round_trip(self, tmp_path):
        task = generate_synthetic_task(30, 1, 1.0, seed=5)
        corpus = sample_corpus(task, 997, seed=5)
        path = tmp_path / "corpus.txt"
        write_corpus_text(corpus, path)
        loaded = read_corpus_text(path, 30)
        assert np.array_equal(loaded.ids, corpus.ids)

    def test_encode_through_vocabulary(self):
        vocab = build_vocabulary(["a a b c"], min_count=1)
        corpus = encode_corpus(["a b", "c a zzz"], vocab)
        assert corpus.vocab_size == vocab.size
        assert corpus.boundaries == (2, 5)
        assert corpus.ids[-1] == vocab.id_of(UNK_TOKEN)

    def test_id_out_of_range_rejected(self, tmp_path):
        path = tmp_path / "corpus.txt"
        path.write_text("0 1 7\n", encoding="utf-8")
        with pytest.raises(ValueError):
            read_corpus_text(path, 5)
