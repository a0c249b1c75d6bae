from fractions import Fraction
from typing import Iterable, List, Tuple, Union

from .exceptions import ValidationError

__all__ = ['ceil_div', 'ceil_fraction', 'factor_pairs', 'partition_sizes',
           'patch_bounds', 'format_number', 'ValidationResult']


def ceil_div(a, b):
    # type: (int, int) -> int
    return -(-a // b)                                           # 7, 2  => 4


def ceil_fraction(value):
    # type: (Union[int, Fraction]) -> int
    value = Fraction(value)
    return ceil_div(value.numerator, value.denominator)         # 7/2   => 4


def factor_pairs(n):
    # type: (int) -> List[Tuple[int, int]]
    """
    All (a, b) with a * b == n, ordered by a.
    """
    return [(a, n // a) for a in range(1, n + 1) if n % a == 0]


def partition_sizes(total, parts):
    # type: (int, int) -> List[int]
    """
    Split `total` items into `parts` contiguous blocks, the first `total % parts` blocks one item larger.
    """
    if parts < 1:
        raise ValueError('parts shall be positive')
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def patch_bounds(total, parts):
    # type: (int, int) -> List[Tuple[int, int]]
    """
    [start, stop) row ranges of `parts` contiguous blocks covering `total` rows.
    """
    bounds = []
    start = 0
    for size in partition_sizes(total, parts):
        bounds.append((start, start + size))
        start += size
    return bounds


def format_number(value):
    # type: (object) -> str
    """
    Locale independent text form used in CSV output. Floats keep full precision.
    """
    if value is None:
        return ''
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    return str(value)


class ValidationResult(object):
    """
    Outcome of a check that collects every violation instead of stopping at the first one.
    """

    def __init__(self, errors=()):
        # type: (Iterable[str]) -> None
        self.errors = tuple(errors)

    @property
    def ok(self):
        # type: () -> bool
        return not self.errors

    def raise_for_errors(self, exc_class=ValidationError):
        # type: (type) -> None
        if self.errors:
            raise exc_class('; '.join(self.errors))

    def __bool__(self):
        return self.ok

    def __repr__(self):
        return 'ValidationResult(errors=%r)' % (self.errors,)
