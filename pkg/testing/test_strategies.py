import unittest
from contrastive_nmt.errors import UsageError
from contrastive_nmt.evaluation import EvaluationSuites, Projections
from contrastive_nmt.patterns import Strategies, SingletonStrategies, strategy_method
from contrastive_nmt.train import TrainConfig, TrainingModes, apply_mode


class TestStrategies(unittest.TestCase):
    def setUp(self) -> None:
        self.strategies = Strategies()

    def test_strategies_added_and_called(self):
        key, value = "a", lambda: "foxyfox"
        self.strategies.add(key, value)
        self.assertEqual(self.strategies.get(key), "foxyfox")

    def test_strategies_added_and_inputs_args(self):
        key, value = "a", lambda x, y: x + y
        args = ("foxy", "fox")
        self.strategies.add(key, value)
        self.assertEqual(self.strategies.get(key, *args), "foxyfox")

    def test_strategies_added_and_inputs_kwargs(self):
        key, value = "a", lambda x, y: x + y
        kwargs = {"y": "foxy", "x": "fox"}
        self.strategies.add(key, value)
        self.assertEqual(self.strategies.get(key, **kwargs), "foxfoxy")

    def test_strategies_add_mix_get_different_mix(self):
        key, value = "aBc", lambda: "foxyfox"
        self.strategies.add(key, value)
        self.assertEqual(self.strategies.get("ABc"), "foxyfox")

    def test_strategies_names_stored(self):
        key, value = "aBc", lambda: "foxyfox"
        self.strategies.add(key, value)
        self.assertEqual(self.strategies.names(), [key])
        self.assertIn("abc", self.strategies)

    def test_strategies_new_same_add_updates_mixed_keys(self):
        key, value = "aBC", lambda: "foxyfox"
        self.strategies.add(key, value)
        new_key, new_value = "abc", lambda: "foxybox"
        self.strategies.add(new_key, new_value)
        self.assertEqual(self.strategies.get(key), "foxybox")

    def test_unknown_strategy_is_a_usage_error(self):
        self.strategies.add("a", lambda: 1)
        with self.assertRaises(UsageError) as ctx:
            self.strategies.get("b")
        self.assertIn("a", str(ctx.exception))


class Registry(SingletonStrategies):
    def __init__(self):
        super().__init__()


@strategy_method(Registry)
class Registered:
    pass


@strategy_method(Registry, "renamed")
class AlsoRegistered:
    pass


class TestSingletonStrategies(unittest.TestCase):
    def test_registry_is_a_singleton(self):
        self.assertIs(Registry(), Registry())

    def test_decorator_registers_class_name_and_given_name(self):
        self.assertIsInstance(Registry().get("Registered"), Registered)
        self.assertIsInstance(Registry().get("RENAMED"), AlsoRegistered)

    def test_registries_do_not_share_entries(self):
        self.assertNotIn("renamed", TrainingModes())
        self.assertNotIn("baseline", Registry())

    def test_package_registries(self):
        self.assertEqual(TrainingModes().names(), ["baseline", "ctl", "aa", "aa-ctl", "full"])
        self.assertEqual(EvaluationSuites().names(), ["retrieval", "bleu", "all"])
        self.assertEqual(Projections().names(), ["none", "pca2"])

    def test_training_mode_flags(self):
        expected = {
            "baseline": (False, False, False),
            "ctl": (True, False, False),
            "aa": (False, True, False),
            "aa-ctl": (True, True, False),
            "full": (True, True, True),
        }
        for mode, flags in expected.items():
            cfg = apply_mode(TrainConfig(), mode)
            self.assertEqual((cfg.use_ctl, cfg.use_aa, cfg.use_mono), flags, msg=mode)


if __name__ == '__main__':
    unittest.main()
