import os
import tempfile
import unittest
import warnings
import numpy as np
from scipy import stats
from contrastive_nmt.augment import (SynonymDictionary, augment, load_synonym_dictionary, make_pseudo_pairs,
                                     preview_rows, replaced_positions, synthetic_synonym_dictionary)
from contrastive_nmt.corpus import MonolingualSentence, PairKind, SentencePair, cipher_translate
from contrastive_nmt.errors import DataError
from contrastive_nmt.utils import write_lines
from testing.helpers import TestHelper


def one_synonym_dictionary(words, src_lang="L1", tgt_lang="L2"):
    dictionary = SynonymDictionary()
    for w in words:
        dictionary.add(src_lang, w, tgt_lang, f"{w}_{tgt_lang}")
    return dictionary


class TestLoadSynonymDictionary(unittest.TestCase):
    def setUp(self) -> None:
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, "dict.tsv")

    def tearDown(self) -> None:
        self.tmp.cleanup()

    def load(self, lines):
        write_lines(self.path, lines)
        return load_synonym_dictionary(self.path)

    def test_single_line(self):
        dictionary = self.load(["L1\tapple\tL2\tapfel"])
        self.assertEqual(dictionary.lookup("L1", "apple"), [("L2", "apfel")])
        self.assertEqual(dictionary.lookup("L2", "apfel"), [])

    def test_empty_file_gives_identity_augmentation(self):
        dictionary = self.load([])
        self.assertEqual(len(dictionary), 0)
        self.assertEqual(augment(["a", "b"], "L1", dictionary, 1.0, 0), ["a", "b"])

    def test_duplicates_are_dropped_in_order(self):
        dictionary = self.load(["L1\ta\tL2\tx", "L1\ta\tL3\ty", "L1\ta\tL2\tx", "", "L1\ta\tL2\tz"])
        self.assertEqual(dictionary.lookup("L1", "a"), [("L2", "x"), ("L3", "y"), ("L2", "z")])

    def test_malformed_line_names_its_number(self):
        with self.assertRaises(DataError) as ctx:
            self.load(["L1\ta\tL2\tx", "L1\tb\tL2"])
        self.assertIn(":2:", str(ctx.exception))

    def test_self_mapping_is_dropped_with_a_warning(self):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            dictionary = self.load(["L1\ta\tL1\ta"])
        self.assertEqual(len(dictionary), 0)
        self.assertEqual(len(caught), 1)

    def test_save_load(self):
        dictionary = synthetic_synonym_dictionary(TestHelper().corpora.ciphers, 0.3, seed=2)
        dictionary.save(self.path)
        self.assertEqual(list(load_synonym_dictionary(self.path)), list(dictionary))


class TestAugment(unittest.TestCase):
    def setUp(self) -> None:
        self.dictionary = one_synonym_dictionary(["a", "b", "c"])

    def test_zero_probability_is_a_no_op(self):
        x = ["a", "q", "b", "c"]
        self.assertEqual(augment(x, "L1", self.dictionary, 0.0, 5), x)

    def test_unit_probability_substitutes_every_covered_token(self):
        x = ["a", "q", "b", "c"]
        expected = ["a_L2", "q", "b_L2", "c_L2"]
        self.assertEqual(augment(x, "L1", self.dictionary, 1.0, 5), expected)
        self.assertEqual(augment(x, "L1", self.dictionary, 1.0, 6), expected)

    def test_other_language_entries_are_ignored(self):
        self.assertEqual(augment(["a", "b"], "L3", self.dictionary, 1.0, 0), ["a", "b"])

    def test_pure_function_of_the_seed(self):
        x = ["a", "b", "c"] * 5
        self.assertEqual(augment(x, "L1", self.dictionary, 0.5, (1, 2, 3, 4)),
                         augment(x, "L1", self.dictionary, 0.5, (1, 2, 3, 4)))

    def test_length_and_uncovered_positions_preserved(self):
        x = ["q", "a", "r", "b", "s"]
        for seed in range(20):
            out = augment(x, "L1", self.dictionary, 0.7, seed)
            self.assertEqual(len(out), len(x))
            self.assertEqual([out[i] for i in (0, 2, 4)], ["q", "r", "s"])
            self.assertTrue(set(replaced_positions(x, out)) <= {1, 3})

    def test_synonym_choice_is_uniform(self):
        dictionary = SynonymDictionary()
        for lang in ("L2", "L3", "L4", "L5"):
            dictionary.add("L1", "a", lang, f"a_{lang}")
        out = [augment(["a"], "L1", dictionary, 1.0, seed)[0] for seed in range(4000)]
        for lang in ("L2", "L3", "L4", "L5"):
            self.assertLess(abs(out.count(f"a_{lang}") / 4000 - 0.25), 0.03)

    def test_replacement_rate(self):
        x = ["a"] * 1000
        replaced = sum(len(replaced_positions(x, augment(x, "L1", self.dictionary, 0.9, (0, 0, i, 0))))
                       for i in range(100))
        self.assertLess(abs(replaced / 100_000 - 0.9), 0.005)

    def test_replaced_counts_are_binomial(self):
        k, n, p = 10, 2000, 0.9
        x = ["a", "b", "c", "a", "b", "c", "a", "b", "c", "a"]
        counts = np.asarray([len(replaced_positions(x, augment(x, "L1", self.dictionary, p, (7, 0, i, 0))))
                             for i in range(n)])
        observed = np.bincount(counts, minlength=k + 1).astype(float)
        expected = n * stats.binom.pmf(np.arange(k + 1), k, p)
        # Pool the sparse low tail into one bin.
        cut = int(np.argmax(expected >= 5))
        observed = np.concatenate([[observed[:cut + 1].sum()], observed[cut + 1:]])
        expected = np.concatenate([[expected[:cut + 1].sum()], expected[cut + 1:]])
        expected *= observed.sum() / expected.sum()
        self.assertGreater(stats.chisquare(observed, expected).pvalue, 0.001)


class TestPseudoPairs(unittest.TestCase):
    def test_monolingual_with_empty_dictionary_is_a_copy_task(self):
        pair = make_pseudo_pairs(MonolingualSentence("L1", ["a", "b"]), SynonymDictionary(), 0.9, 0)
        self.assertEqual((pair.src, pair.tgt), (["a", "b"], ["a", "b"]))
        self.assertEqual(pair.kind, PairKind.PSEUDO_SELF_PARALLEL)
        self.assertEqual(pair.src_lang, pair.tgt_lang)

    def test_parallel_with_zero_probability_is_relabelled(self):
        original = SentencePair("L1", "L2", ["a", "b"], ["x", "y"])
        pair = make_pseudo_pairs(original, one_synonym_dictionary(["a"]), 0.0, 0)
        self.assertEqual((pair.src, pair.tgt), (original.src, original.tgt))
        self.assertEqual(pair.kind, PairKind.PSEUDO_PARALLEL)

    def test_monolingual_full_coverage_is_fully_code_switched(self):
        corpora = TestHelper().corpora
        dictionary = synthetic_synonym_dictionary(corpora.ciphers, 1.0, seed=0)
        sentence = corpora.multiway["l2"][0]
        pair = make_pseudo_pairs(MonolingualSentence("l2", sentence), dictionary, 1.0, 3)
        self.assertEqual(pair.tgt, sentence)
        self.assertTrue(all(not t.startswith("l2_") for t in pair.src))

    def test_code_switched_tokens_are_cipher_synonyms(self):
        corpora = TestHelper().corpora
        sentence = corpora.multiway["l1"][1]
        switched = augment(sentence, "l1", TestHelper().dictionary, 1.0, 0)
        for original, token in zip(sentence, switched):
            lang = token.rpartition("_")[0]
            self.assertEqual(cipher_translate([original], "l1", lang, corpora.ciphers), [token])

    def test_unsupported_example_type(self):
        with self.assertRaises(TypeError):
            make_pseudo_pairs(["a"], SynonymDictionary(), 0.5, 0)


class TestSyntheticDictionary(unittest.TestCase):
    def test_coverage_controls_the_number_of_entries(self):
        ciphers = TestHelper().corpora.ciphers
        n_concepts, n_langs = len(ciphers["l1"]), len(ciphers)
        for coverage in (0.0, 0.5, 1.0):
            dictionary = synthetic_synonym_dictionary(ciphers, coverage, seed=0)
            self.assertEqual(len(dictionary), int(round(coverage * n_concepts)) * n_langs)

    def test_no_entry_maps_to_its_own_language(self):
        for src_lang, _, tgt_lang, _ in TestHelper().dictionary:
            self.assertNotEqual(src_lang, tgt_lang)


class TestPreview(unittest.TestCase):
    def test_rows_keep_length_and_guess_language(self):
        dictionary = one_synonym_dictionary(["a", "b"])
        frame = preview_rows(["a b q", "q r"], dictionary, 1.0, seed=0)
        self.assertEqual(list(frame.columns), ["original", "augmented"])
        self.assertEqual(frame["augmented"].tolist(), ["a_L2 b_L2 q", "q r"])

    def test_explicit_language(self):
        frame = preview_rows(["a b"], one_synonym_dictionary(["a", "b"]), 1.0, seed=0, lang="L9")
        self.assertEqual(frame["augmented"].tolist(), ["a b"])


if __name__ == '__main__':
    unittest.main()
