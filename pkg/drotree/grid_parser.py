import math

from lark import Lark, Transformer
from lark.exceptions import LarkError, VisitError

from drotree.errors import ParseError

grammar = r"""
grid: number ":" number ":" number

numlist: number ("," number)*

idlist: ID ("," ID)*

genspec: INT "," INT "," INT

number: SIGNED_NUMBER

ID: /[A-Za-z0-9_.\-]+/

%import common.SIGNED_NUMBER
%import common.INT
%import common.WS
%ignore WS
"""


def expand_grid(start, stop, step):
    """Inclusive grid start, start+step, ..., stop, rounded to 12 decimals."""
    if step <= 0.0 or stop < start:
        raise ParseError(f"empty grid {start}:{stop}:{step}")
    # the slack absorbs float error in steps that divide the range exactly
    n = math.floor((stop - start) / step + 1e-9)
    return [round(start + k * step, 12) for k in range(n + 1)]


class ArgTransformer(Transformer):
    def number(self, args):
        return float(args[0])

    def grid(self, args):
        return expand_grid(*args)

    def numlist(self, args):
        return list(args)

    def idlist(self, args):
        return [str(tok) for tok in args]

    def genspec(self, args):
        return tuple(int(tok) for tok in args)


parser = Lark(grammar, parser="lalr", start=["grid", "numlist", "idlist", "genspec"])
transformer = ArgTransformer()


def _parse(text, start):
    try:
        return transformer.transform(parser.parse(text, start=start))
    except VisitError as e:
        if isinstance(e.orig_exc, ParseError):
            raise e.orig_exc from None
        raise ParseError(f"cannot read {text!r}: {e.orig_exc}") from None
    except LarkError as e:
        raise ParseError(f"cannot read {text!r} as {start}: {e}") from None


def parse_grid(text):
    """'a:b:step' -> list of floats."""
    return _parse(text, "grid")


def parse_numbers(text):
    """'0.3' or '0.3,0.5' -> list of floats."""
    return _parse(text, "numlist")


def parse_ids(text):
    """'n1,n2' -> list of node ids."""
    return _parse(text, "idlist")


def parse_genspec(text):
    """'seed,T,branching' -> (seed, T, branching)."""
    return _parse(text, "genspec")
