from typing import Callable, Any, TypeVar, List, Sequence, Union

# Functions
F = TypeVar('F', bound=Callable[..., Any])

# Sentences are whitespace tokenised
Tokens = List[str]
TokenIds = List[int]

# Anything numpy.random.default_rng accepts, e.g. (seed, corpus_id, line, epoch)
Seed = Union[int, Sequence[int]]
