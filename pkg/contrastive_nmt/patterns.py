from contrastive_nmt.types_utils import F
from contrastive_nmt.errors import UsageError
from typing import Type, Any, List


class Singleton(type):
    """
    Define an instance operation that lets clients access its unique
    instance.
    """
    def __init__(cls, name, bases, attrs, **kwargs):
        super().__init__(name, bases, attrs)
        cls._instance = None

    def __call__(cls, *args, **kwargs):
        if cls._instance is None:
            cls._instance = super().__call__(*args, **kwargs)
        return cls._instance


class Strategies:
    """
    Named registry of interchangeable implementations, e.g. training modes or embedding projections.
    """
    def __init__(self):
        self.strategies = {}

    def add(self, name: str, class_reference: object) -> None:
        """
        Register a strategy.
        :param name: The name of the strategy, its lowercase value acts as the key.
        :param class_reference: The class (or any callable) building the strategy.
        """
        self.strategies[name.lower()] = (name, class_reference)

    def get(self, name: str, *args, **kwargs) -> Any:
        """
        Get the strategy class and initialise an instance of it.
        :param name: The name of the strategy, looked up case insensitively.
        :param kwargs: Extra strategy specific information.
        :return: The initialised strategy.
        :raise UsageError: If no strategy is registered under the name.
        """
        if name.lower() not in self.strategies:
            raise UsageError(f"Unknown {type(self).__name__} entry {name!r}, known: {', '.join(self.names())}.")
        return self.strategies[name.lower()][1](*args, **kwargs)

    def names(self) -> List[str]:
        """
        :return: The registered names, as given at registration, in registration order.
        """
        return [n for n, _ in self.strategies.values()]

    def __contains__(self, name: str) -> bool:
        return name.lower() in self.strategies

    def __str__(self):
        return f"{type(self).__name__}: \n" + \
               "\n".join([f"{i:3}: {n}" for i, n in enumerate(self.names())])


class SingletonStrategies(Strategies, metaclass=Singleton):
    def __init__(self):
        super().__init__()


def strategy_method(parent: Type[SingletonStrategies], name: str = None) -> F:
    """
    Class decorator registering the class in the singleton registry :param parent.
    :param parent: The registry class.
    :param name: The registration name, defaults to the class name.
    """
    assert isinstance(parent, SingletonStrategies) or issubclass(parent, SingletonStrategies), \
        f"{parent} is not a SingletonStrategies registry."

    def inner(cls):
        parent().add(cls.__name__ if name is None else name, cls)
        return cls
    return inner
