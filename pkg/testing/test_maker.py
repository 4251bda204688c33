import filecmp
import os
import tempfile
import unittest
from abc import abstractmethod
from typing import Dict
from contrastive_nmt import maker
from contrastive_nmt.errors import DataError


class CipherLanguageTests:
    def setUp(self) -> None:
        self.verification_errors = []

    def tearDown(self) -> None:
        self.assertEqual([], self.verification_errors)

    @property
    @abstractmethod
    def kwargs(self) -> Dict:
        return {}

    def make(self, n_samples=10, **overrides):
        return maker.CipherLanguages(**{**self.kwargs, **overrides}).make(n_samples)

    def test_correct_corpus_lengths(self):
        corpora = self.make(10)
        for name, n in corpora.counts().items():
            try:
                self.assertEqual(n, 10, msg=name)
            except AssertionError as e:
                self.verification_errors.append(str(e))

    def test_sentence_lengths_in_range(self):
        lo, hi = self.kwargs.get("sentence_len_range", (4, 12))
        for sentence in self.make(10).training_sentences():
            try:
                self.assertTrue(lo <= len(sentence) <= hi, msg=str(sentence))
            except AssertionError as e:
                self.verification_errors.append(str(e))

    def test_parallel_corpora_are_hub_centric(self):
        corpora = self.make(10)
        for c in corpora.parallel.values():
            try:
                self.assertEqual(c.src_lang, corpora.hub)
                self.assertTrue(all(t.startswith(f"{c.tgt_lang}_") for s in c.tgt for t in s))
            except AssertionError as e:
                self.verification_errors.append(str(e))

    def test_languages_without_parallel_data_have_monolingual_data(self):
        corpora = self.make(10)
        for lang in corpora.monolingual_only_languages():
            try:
                self.assertIn(lang, corpora.monolingual)
                self.assertFalse(corpora.has_parallel(corpora.hub, lang))
            except AssertionError as e:
                self.verification_errors.append(str(e))

    def test_multiway_set_is_aligned(self):
        corpora = self.make(10, n_heldout=7)
        self.assertEqual(sorted(corpora.multiway), sorted(corpora.languages))
        self.assertEqual({len(v) for v in corpora.multiway.values()}, {7})

    def test_same_seed_gives_identical_files(self):
        with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
            self.make(10, seed=11).save(a)
            self.make(10, seed=11).save(b)
            for root, _, files in os.walk(a):
                for name in files:
                    left = os.path.join(root, name)
                    right = os.path.join(b, os.path.relpath(left, a))
                    try:
                        self.assertTrue(filecmp.cmp(left, right, shallow=False), msg=left)
                    except AssertionError as e:
                        self.verification_errors.append(str(e))

    def test_different_seeds_differ(self):
        self.assertNotEqual(self.make(10, seed=1).multiway, self.make(10, seed=2).multiway)


class TestTwoLanguages(CipherLanguageTests, unittest.TestCase):
    @property
    def kwargs(self):
        return {"base_vocab_size": 20, "n_languages": 2, "sentence_len_range": (1, 3)}

    def test_single_parallel_pair_no_monolingual_only_language(self):
        corpora = self.make(1)
        self.assertEqual(list(corpora.parallel), ["l1-l2"])
        self.assertEqual(corpora.monolingual_only_languages(), [])


class TestFourLanguages(CipherLanguageTests, unittest.TestCase):
    @property
    def kwargs(self):
        return {"base_vocab_size": 50, "n_languages": 4, "sentence_len_range": (3, 6)}

    def test_topology(self):
        corpora = self.make(5)
        self.assertEqual(sorted(corpora.parallel), ["l1-l2", "l1-l3"])
        self.assertEqual(corpora.monolingual_only_languages(), ["l4"])


class TestTwoMonolingualOnlyLanguages(CipherLanguageTests, unittest.TestCase):
    @property
    def kwargs(self):
        return {"base_vocab_size": 30, "n_languages": 5, "sentence_len_range": (2, 8), "n_mono_only": 2}

    def test_topology(self):
        self.assertEqual(self.make(5).monolingual_only_languages(), ["l4", "l5"])


class TestInvalidRanges(unittest.TestCase):
    def test_invalid_arguments_are_data_errors(self):
        bad = [
            {"n_languages": 1},
            {"base_vocab_size": 0},
            {"sentence_len_range": (5, 2)},
            {"sentence_len_range": (0, 2)},
            {"n_languages": 3, "n_mono_only": 2},
            {"n_heldout": -1},
            {"zipf_exponent": -0.5},
        ]
        for kwargs in bad:
            with self.subTest(**{k: str(v) for k, v in kwargs.items()}):
                with self.assertRaises(DataError):
                    maker.CipherLanguages(**kwargs)

    def test_no_samples_is_a_data_error(self):
        with self.assertRaises(DataError):
            maker.generate_synthetic_languages(10, 2, 0)


if __name__ == '__main__':
    unittest.main()
