import hashlib
import os
import queue
import tempfile
import threading
from contextlib import contextmanager
from itertools import islice
from typing import Iterable, Iterator, List, Sequence, TypeVar, IO
import contextlib2

T = TypeVar("T")

_END = object()


def chunks(data: Sequence[T], size: int) -> Iterator[Sequence[T]]:
    """
    Splits a sequence into consecutive pieces of at most :param size elements.
    """
    assert size > 0, f"size {size} needs to be greater than zero."
    it = iter(data)
    for _ in range(0, len(data), size):
        yield list(islice(it, size))


def open_aligned_files(exit_stack: contextlib2.ExitStack, paths: Sequence[str], mode: str = "r") -> List[IO]:
    """
    Opens several line aligned text files at once, e.g. the two sides of a parallel corpus or every language
    of a multi-way set.
    :param exit_stack: The stack which closes the files when it exits.
    :param paths: The file paths.
    :param mode: The open mode, "r" or "w".
    :return: The open file objects in the order of :param paths.
    """
    return [exit_stack.enter_context(open(p, mode, encoding="utf-8", newline="\n")) for p in paths]


def read_lines(path: str) -> List[str]:
    with open(path, "r", encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f]


def write_lines(path: str, lines: Iterable[str]) -> None:
    with atomic_write(path, "w") as f:
        for line in lines:
            f.write(f"{line}\n")


@contextmanager
def atomic_write(path: str, mode: str = "w"):
    """
    Writes to a temporary file next to :param path and renames it into place on success.
    """
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        kwargs = {} if "b" in mode else {"encoding": "utf-8", "newline": "\n"}
        with os.fdopen(fd, mode, **kwargs) as f:
            yield f
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def text_sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def prefetch(iterable: Iterable[T], size: int = 4) -> Iterator[T]:
    """
    Runs :param iterable on a producer thread and yields its items through a bounded queue.
    Item order is the order of the iterable, so seeded streams stay deterministic.
    :param iterable: The item producer.
    :param size: The queue bound.
    """
    assert size > 0, f"size {size} needs to be greater than zero."
    q = queue.Queue(maxsize=size)
    stop = threading.Event()

    def produce():
        try:
            for item in iterable:
                if stop.is_set():
                    return
                q.put((item, None))
        except BaseException as e:
            q.put((_END, e))
            return
        q.put((_END, None))

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    try:
        while True:
            item, error = q.get()
            if item is _END:
                if error is not None:
                    raise error
                return
            yield item
    finally:
        stop.set()
        # Unblock a producer waiting on a full queue.
        while not q.empty():
            q.get_nowait()
