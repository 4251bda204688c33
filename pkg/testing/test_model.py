import unittest
from dataclasses import replace
import numpy as np
from contrastive_nmt import tensor as T
from contrastive_nmt.corpus import SourceBatch, collate_pairs, collate_sources, SentencePair
from contrastive_nmt.errors import DataError, NumericError, ShapeError
from contrastive_nmt.model import (ModelConfig, ModelParams, beam_search, decode_train, encode, greedy_decode,
                                   greedy_or_beam_decode, model_log_prob_fn, non_generated_ids)
from contrastive_nmt.tensor import Tensor, gradient_check
from contrastive_nmt.vocab import BOS_ID, EOS_ID, PAD_ID, build_vocabulary_from_sentences
from testing.helpers import TestHelper, tiny_config, weighted_sum


def small_vocab():
    return build_vocabulary_from_sentences([["a", "b", "c"], ["x", "y"]], ["L1", "L2"])


class TestModelConfig(unittest.TestCase):
    def test_invalid_configs_are_data_errors(self):
        for kwargs in ({"d_model": 10, "n_heads": 4}, {"n_layers_enc": 0}, {"vocab_size": 0},
                       {"dropout_rate": 1.0}, {"max_len": -1}, {"n_languages": 17}, {"n_languages": -1}):
            with self.subTest(**kwargs):
                with self.assertRaises(DataError):
                    ModelParams.init(replace(tiny_config(20), **kwargs))

    def test_dict_round_trip_ignores_unknown_keys(self):
        cfg = tiny_config(20, pool_lang_token=False)
        self.assertEqual(ModelConfig.from_dict({**cfg.to_dict(), "unused": 3}), cfg)

    def test_parameter_shapes_are_checked(self):
        params = ModelParams.init(tiny_config(20))
        tensors = dict(params.items())
        tensors["embed"] = Tensor(np.zeros((21, 8)))
        with self.assertRaises(ShapeError):
            ModelParams(params.config, tensors)
        del tensors["embed"]
        with self.assertRaises(ShapeError):
            ModelParams(params.config, tensors)

    def test_init_is_seeded(self):
        a, b, c = (ModelParams.init(tiny_config(20), seed) for seed in (1, 1, 2))
        np.testing.assert_array_equal(a["enc.0.ffn.w1"].data, b["enc.0.ffn.w1"].data)
        self.assertFalse(np.array_equal(a["enc.0.ffn.w1"].data, c["enc.0.ffn.w1"].data))
        np.testing.assert_array_equal(a["dec.final_ln.gain"].data, np.ones(8))
        np.testing.assert_array_equal(a["dec.0.ffn.b1"].data, np.zeros(16))

    def test_parameter_count(self):
        # embeddings 160, encoder 16 + 2 * 600 + 16, decoder 16 + 2 * 904 + 16
        self.assertEqual(ModelParams.init(tiny_config(20)).n_parameters(), 3232)

    def test_copy_is_independent_and_finite_check(self):
        params = ModelParams.init(tiny_config(20))
        clone = params.copy()
        clone["embed"].data[0, 0] = np.inf
        params.check_finite()
        with self.assertRaises(NumericError):
            clone.check_finite()


class TestEncode(unittest.TestCase):
    def setUp(self) -> None:
        self.vocab = TestHelper().vocab
        self.corpora = TestHelper().corpora
        self.params = TestHelper().params(seed=3)
        self.sentences = self.corpora.multiway["l1"][:6]

    def test_one_token_row_pools_to_its_state(self):
        lang = self.vocab.lang_id("l1")
        batch = collate_sources(self.vocab, [self.sentences[0]], "l1")
        ids = batch.src.copy()
        ids[0, 1:] = PAD_ID
        mask = np.zeros_like(batch.src_mask)
        mask[0, 0] = 1.0
        self.assertEqual(ids[0, 0], lang)
        encoded = encode(self.params, SourceBatch(ids, mask, ["l1"]))
        np.testing.assert_allclose(encoded.pooled.data[0], encoded.states.data[0, 0], rtol=0, atol=1e-14)

    def test_pooled_is_the_masked_mean_of_states(self):
        encoded = encode(self.params, collate_sources(self.vocab, self.sentences, "l1"))
        mask = encoded.src_mask
        expected = (encoded.states.data * mask[..., None]).sum(axis=1) / mask.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(encoded.pooled.data, expected, rtol=1e-12, atol=1e-14)

    def test_duplicate_rows_pool_identically(self):
        s = self.sentences[1]
        pooled = encode(self.params, collate_sources(self.vocab, [s, s, s], "l1")).pooled.data
        np.testing.assert_array_equal(pooled[0], pooled[1])
        np.testing.assert_array_equal(pooled[0], pooled[2])

    def test_padding_does_not_change_the_representation(self):
        s = self.sentences[2]
        alone = encode(self.params, collate_sources(self.vocab, [s], "l1")).pooled.data[0]
        longest = max(self.sentences, key=len)
        padded = encode(self.params, collate_sources(self.vocab, [s, longest + longest[:2]], "l1")).pooled.data[0]
        np.testing.assert_allclose(padded, alone, rtol=0, atol=1e-12)

    def test_batch_permutation_equivariance(self):
        batch = collate_sources(self.vocab, self.sentences, "l1")
        order = np.random.default_rng(0).permutation(len(self.sentences))
        permuted = SourceBatch(batch.src[order], batch.src_mask[order], [batch.src_langs[i] for i in order])
        np.testing.assert_allclose(encode(self.params, permuted).pooled.data,
                                   encode(self.params, batch).pooled.data[order], rtol=0, atol=1e-12)

    def test_excluding_the_language_token_changes_pooling(self):
        params = TestHelper().params(seed=3, pool_lang_token=False)
        encoded = encode(params, collate_sources(self.vocab, self.sentences[:2], "l1"))
        mask = encoded.src_mask.copy()
        mask[:, 0] = 0.0
        expected = (encoded.states.data * mask[..., None]).sum(axis=1) / mask.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(encoded.pooled.data, expected, rtol=1e-12, atol=1e-14)

    def test_deterministic_without_dropout_rng(self):
        params = TestHelper().params(seed=3, dropout_rate=0.3)
        batch = collate_sources(self.vocab, self.sentences, "l1")
        np.testing.assert_array_equal(encode(params, batch).pooled.data, encode(params, batch).pooled.data)
        dropped = encode(params, batch, rng=np.random.default_rng(0)).pooled.data
        self.assertFalse(np.allclose(dropped, encode(params, batch).pooled.data))

    def test_too_long_input_is_a_data_error(self):
        long_sentence = (self.sentences[0] * 10)[:20]
        with self.assertRaises(DataError):
            encode(self.params, collate_sources(self.vocab, [long_sentence], "l1"))

    def test_out_of_vocabulary_ids_are_a_data_error(self):
        batch = collate_sources(self.vocab, self.sentences[:1], "l1")
        batch.src[0, 1] = len(self.vocab)
        with self.assertRaises(DataError):
            encode(self.params, batch)

    def test_pooled_gradient_matches_finite_differences(self):
        vocab = small_vocab()
        params = ModelParams.init(tiny_config(len(vocab)), seed=0)
        batch = collate_sources(vocab, [["a", "b", "c"], ["b"], ["c", "a"]], "L1")
        error = gradient_check(lambda embed: weighted_sum(encode(params, batch).pooled), [params["embed"]])
        self.assertLess(error, 1e-4)


class TestDecodeTrain(unittest.TestCase):
    def setUp(self) -> None:
        self.vocab = small_vocab()
        self.params = ModelParams.init(tiny_config(len(self.vocab)), seed=1)
        self.batch = collate_pairs(self.vocab, [SentencePair("L1", "L2", ["a", "b", "c"], ["x", "y", "x"]),
                                                SentencePair("L1", "L2", ["c"], ["y"])])

    def test_single_token_target_shape(self):
        encoded = encode(self.params, self.batch)
        logits = decode_train(self.params, encoded, self.batch.tgt_input[:, :1], self.batch.tgt_mask[:, :1])
        self.assertEqual(logits.shape, (2, 1, len(self.vocab)))

    def test_future_tokens_do_not_change_earlier_logits(self):
        encoded = encode(self.params, self.batch)
        base = decode_train(self.params, encoded, self.batch.tgt_input, self.batch.tgt_mask).data
        n = self.batch.tgt_input.shape[1]
        for t in range(n - 1):
            changed = self.batch.tgt_input.copy()
            changed[:, t + 1:] = self.vocab.id("a")
            logits = decode_train(self.params, encoded, changed, self.batch.tgt_mask).data
            np.testing.assert_array_equal(logits[:, :t + 1], base[:, :t + 1])

    def test_shape_mismatch_is_a_shape_error(self):
        encoded = encode(self.params, self.batch)
        with self.assertRaises(ShapeError):
            decode_train(self.params, encoded, self.batch.tgt_input, self.batch.tgt_mask[:, :-1])
        with self.assertRaises(ShapeError):
            decode_train(self.params, encoded, self.batch.tgt_input[:1], self.batch.tgt_mask[:1])

    def test_end_to_end_gradient_matches_finite_differences(self):
        checked = ["embed", "enc.1.self_attn.wq", "dec.0.cross_attn.wv", "dec.1.ffn.w2", "dec.final_ln.gain"]

        def loss(*_):
            encoded = encode(self.params, self.batch)
            logits = decode_train(self.params, encoded, self.batch.tgt_input, self.batch.tgt_mask)
            return T.cross_entropy(logits, self.batch.tgt_output, self.batch.tgt_mask)

        for name in checked:
            with self.subTest(parameter=name):
                self.assertLess(gradient_check(loss, [self.params[name]]), 1e-4)

    def test_zero_residual_scale_leaves_embeddings_and_norms(self):
        params = ModelParams.init(tiny_config(len(self.vocab), residual_scale=0.0), seed=1)
        encoded = encode(params, self.batch)
        x = T.scale(T.embedding(params["embed"], self.batch.src), np.sqrt(8))
        x = T.add(x, Tensor(np.broadcast_to(params.positions[:self.batch.src.shape[1]], x.shape).copy()))
        x = T.layer_norm(x, params["enc.emb_ln.gain"], params["enc.emb_ln.bias"])
        x = T.layer_norm(x, params["enc.final_ln.gain"], params["enc.final_ln.bias"])
        np.testing.assert_allclose(encoded.states.data, x.data, rtol=0, atol=1e-12)

        other = collate_pairs(self.vocab, [SentencePair("L1", "L2", ["b", "b"], ["x", "y", "x"]),
                                           SentencePair("L1", "L2", ["a", "a", "a", "a"], ["y"])])
        logits = decode_train(params, encoded, self.batch.tgt_input, self.batch.tgt_mask).data
        other_logits = decode_train(params, encode(params, other), other.tgt_input, other.tgt_mask).data
        np.testing.assert_allclose(logits, other_logits, rtol=0, atol=1e-12)


def forced_log_prob_fn(sequence, vocab_size):
    def log_probs(rows, prefixes):
        t = prefixes.shape[1] - 1
        out = np.full((len(rows), vocab_size), -20.0)
        out[:, sequence[t] if t < len(sequence) else EOS_ID] = -1e-6
        return out
    return log_probs


class TestDecoding(unittest.TestCase):
    def setUp(self) -> None:
        self.vocab = small_vocab()
        self.params = ModelParams.init(tiny_config(len(self.vocab), n_languages=len(self.vocab.languages)), seed=2)
        self.src = collate_sources(self.vocab, [["a", "b"], ["c"], ["b", "c", "a"]], "L1")
        self.lang = self.vocab.lang_id("L2")

    def test_forced_sequence_is_reproduced(self):
        forced = [self.vocab.id("x"), self.vocab.id("y"), self.vocab.id("x"), EOS_ID]
        fn = forced_log_prob_fn(forced, len(self.vocab))
        for beam in (1, 2, 4):
            out = greedy_or_beam_decode(None, self.src, self.lang, beam=beam, max_len=10, log_prob_fn=fn)
            self.assertEqual(out, [forced[:3]] * 3, msg=f"beam {beam}")

    def test_max_len_bounds_the_output(self):
        fn = forced_log_prob_fn([self.vocab.id("y")] * 50, len(self.vocab))
        out = greedy_decode(None, self.src, self.lang, max_len=5, log_prob_fn=fn)
        self.assertEqual([len(o) for o in out], [5, 5, 5])

    def test_greedy_matches_single_beam_search(self):
        self.assertEqual(greedy_decode(self.params, self.src, self.lang, max_len=8),
                         beam_search(self.params, self.src, self.lang, beam=1, max_len=8))

    def test_outputs_exclude_special_tokens(self):
        specials = {PAD_ID, BOS_ID, EOS_ID, self.vocab.lang_id("L1"), self.lang}
        for beam in (1, 3):
            for row in greedy_or_beam_decode(self.params, self.src, self.lang, beam=beam, max_len=6):
                self.assertEqual(specials & set(row), set(), msg=f"beam {beam}")
                self.assertLessEqual(len(row), 6)

    def test_untrained_greedy_matches_single_beam_search_for_every_target(self):
        for seed in range(4):
            params = ModelParams.init(tiny_config(len(self.vocab), n_languages=2), seed=seed)
            for lang in ("L1", "L2"):
                greedy = greedy_decode(params, self.src, self.vocab.lang_id(lang), max_len=8)
                self.assertEqual(greedy, beam_search(params, self.src, self.vocab.lang_id(lang), beam=1, max_len=8))

    def test_special_tokens_have_no_probability(self):
        fn = model_log_prob_fn(self.params, encode(self.params, self.src))
        log_probs = fn(np.arange(3), np.full((3, 1), self.lang))
        banned = non_generated_ids(self.params.config)
        self.assertEqual(sorted(banned.tolist()), sorted([PAD_ID, BOS_ID, self.vocab.lang_id("L1"), self.lang]))
        self.assertTrue(np.all(np.isneginf(log_probs[:, banned])))
        self.assertTrue(np.all(np.isfinite(np.delete(log_probs, banned, axis=1))))

    def test_beam_prefers_the_best_normalised_hypothesis(self):
        a, b = self.vocab.id("a"), self.vocab.id("b")

        def log_probs(rows, prefixes):
            out = np.full((len(rows), len(self.vocab)), -30.0)
            for i, prefix in enumerate(prefixes):
                if len(prefix) == 1:
                    out[i, a], out[i, b] = np.log(0.6), np.log(0.4)
                elif prefix[1] == a:
                    out[i, EOS_ID], out[i, b] = np.log(0.3), np.log(0.3)
                else:
                    out[i, EOS_ID] = 0.0
            return out
        # Greedy commits to "a" (0.6 * 0.3), the beam finds "b" (0.4 * 1.0).
        self.assertEqual(greedy_decode(None, self.src, self.lang, max_len=4, log_prob_fn=log_probs)[0][0], a)
        self.assertEqual(beam_search(None, self.src, self.lang, beam=2, max_len=4, log_prob_fn=log_probs)[0], [b])

    def test_model_log_probs_are_normalised(self):
        fn = model_log_prob_fn(self.params, encode(self.params, self.src))
        prefixes = np.full((3, 1), self.lang)
        np.testing.assert_allclose(np.exp(fn(np.arange(3), prefixes)).sum(axis=1), 1.0, rtol=1e-12)


if __name__ == '__main__':
    unittest.main()
