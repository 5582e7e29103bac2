from typing import Generic, TypeVar, overload
import hashlib
import time
from pathlib import Path

T = TypeVar("T")


class FriendlyException(Exception):
    """Friendly exceptions are used to hide stacktraces from user.
    `exit_code` is what the CLI exits with when one escapes a command."""
    exit_code: int = 2


class ConfigurationError(FriendlyException, ValueError):
    exit_code = 2


class ShapeError(FriendlyException, ValueError):
    exit_code = 2


class DataError(FriendlyException, ValueError):
    exit_code = 2


class NumericalError(FriendlyException, ArithmeticError):
    exit_code = 3


class IsolatedElementError(NumericalError):
    def __init__(self, row: int) -> None:
        super().__init__(f"Element {row} has zero degree in the kernel matrix")
        self.row = row


class VerificationError(FriendlyException):
    exit_code = 4


class LateInit(Generic[T]):
    def __set_name__(self, owner, name):
        self.name = name

    @overload
    def __get__(self, instance: None, owner) -> "LateInit[T]": ...

    @overload
    def __get__(self, instance, owner) -> T: ...

    def __get__(self, instance: object, owner):
        if instance is None:
            return self
        if self.name not in instance.__dict__:
            raise AttributeError(
                f"LateInit variable {self.name!r} accessed before initialization")
        return instance.__dict__[self.name]

    def __set__(self, instance: object, value: T) -> None:
        instance.__dict__[self.name] = value

    def __delete__(self, instance: object) -> None:
        instance.__dict__.pop(self.name, None)


def millis():
    return int(time.time()*1000)


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_atomic(path: Path, text: str):
    """Writes text next to `path` first and renames it over, so readers
    never observe a half-written artifact."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)
