"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`LoopError`.
Validation problems (bad input, violated preconditions) also derive from
``ValueError`` so callers may catch them generically.
"""


class LoopError(Exception):
    """Base class for all package errors."""


class DomainError(LoopError, ValueError):
    """An argument lies outside its mathematical domain."""


class InsufficientArm(LoopError, ValueError):
    """A treatment arm has too few units for the requested computation."""


class NonConstantP(LoopError, ValueError):
    """Variance estimation needs a common treatment probability."""


class StratumTooSmall(LoopError, ValueError):
    def __init__(self, stratum, n_treated, n_control):
        self.stratum = stratum
        self.n_treated = n_treated
        self.n_control = n_control
        super().__init__(
            f"stratum {stratum!r} has {n_treated} treated and {n_control} control "
            "units; at least 2 of each are required"
        )


class RankDeficient(LoopError, ValueError):
    """A least-squares design matrix is singular and no fallback is allowed."""


class NoOobTrees(LoopError):
    def __init__(self, index):
        self.index = index
        super().__init__(
            f"unit {index} is in the bootstrap sample of every tree; "
            "grow more trees"
        )


class UnsupportedImputer(LoopError, ValueError):
    """The imputer cannot perform the requested operation."""


class EmptyOppositeArm(LoopError, ValueError):
    def __init__(self, unit, block=None):
        self.unit = unit
        self.block = block
        where = "" if block is None else f" in block {block!r}"
        super().__init__(f"no opposite-arm unit available to drop for unit {unit}{where}")


class SupportTooLarge(LoopError, ValueError):
    """The randomization distribution is too large to enumerate."""


class UndefinedOnAssignment(LoopError):
    def __init__(self, assignment, cause):
        self.assignment = tuple(int(a) for a in assignment)
        self.cause = cause
        super().__init__(
            f"estimator undefined on assignment {self.assignment}: {cause}"
        )


class InputError(LoopError, ValueError):
    """Base class for data-file problems."""


class ParseError(InputError):
    def __init__(self, row, column, value):
        self.row = row
        self.column = column
        super().__init__(f"row {row}, column {column!r}: cannot parse {value!r}")


class MissingColumn(InputError):
    def __init__(self, column):
        self.column = column
        super().__init__(f"column {column!r} not found")


class NonBinaryTreatment(InputError):
    def __init__(self, row, value):
        self.row = row
        super().__init__(f"row {row}: treatment value {value!r} is not 0 or 1")


class ProbabilityOutOfRange(InputError):
    def __init__(self, row, value):
        self.row = row
        super().__init__(f"row {row}: probability {value!r} outside (0, 1)")


class MissingValues(InputError):
    def __init__(self, rows):
        self.rows = list(rows)
        super().__init__(f"missing values in rows {self.rows}")
