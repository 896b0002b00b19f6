"""Exception types shared across the toolkit."""


class RalabError(Exception):
    """Base class for all toolkit errors."""


# -- tensor math / autodiff ------------------------------------------------

class ShapeMismatch(RalabError):
    pass


class NonFinite(RalabError):
    """An operation produced NaN or Inf; the value is an error state."""


class LabelOutOfRange(RalabError):
    pass


class NoGraph(RalabError):
    """backward() was called on a tensor that no graph recorded."""


class DoubleBackward(RalabError):
    """The graph behind this tensor was already consumed by a backward pass."""


class MissingGrad(RalabError):
    pass


class StepSizeZero(RalabError):
    pass


# -- models ----------------------------------------------------------------

class InvalidSpec(RalabError):
    pass


class DropoutDisabled(RalabError):
    pass


# -- data ------------------------------------------------------------------

class BadMagic(RalabError):
    pass


class CountMismatch(RalabError):
    pass


class TruncatedFile(RalabError):
    pass


class InvalidParams(RalabError):
    pass


class TooSmall(RalabError):
    pass


class CountTooLarge(RalabError):
    pass


class EmptyDataset(RalabError):
    pass


# -- acquisition / selection -----------------------------------------------

class NotDistribution(RalabError):
    """Rows fail the probability-vector check (sum off by more than 1e-4)."""


class BudgetTooLarge(RalabError):
    pass


class DimMismatch(RalabError):
    pass


class EmptyInput(RalabError):
    pass


# -- training loop ----------------------------------------------------------

class EmptyPool(RalabError):
    pass


class ConfigInvalid(RalabError):
    pass


# -- cli ---------------------------------------------------------------------

class ParseError(ConfigInvalid):
    pass


class SchemaError(ConfigInvalid):
    """A config field is missing or has the wrong shape; names the field."""


class UnknownCommand(ConfigInvalid):
    pass


# -- analysis ----------------------------------------------------------------

class LengthMismatch(RalabError):
    pass


class ZeroVariance(RalabError):
    """Pearson correlation is undefined for a constant sample."""


class AllZeroDifferences(RalabError):
    """Every paired difference is zero; no signed-rank test is possible."""


class MissingDump(RalabError):
    pass
