"""Exception hierarchy shared by all modules."""


class LobliqError(Exception):
    """Base class for every error raised by the package."""


class NonConvergence(LobliqError):
    """A continued fraction did not settle within its term budget."""


class PivotBreakdown(LobliqError):
    """A Lentz denominator stayed degenerate after the tiny-value rescue."""


class AccuracyLoss(LobliqError):
    """Euler summation oscillates more than the allowed tolerance."""


class GridTooShort(LobliqError):
    """The time grid does not carry enough first-passage mass."""


class MaxIterations(LobliqError):
    """An iterative solver exhausted its update budget."""


class NonTermination(LobliqError):
    """A simulated episode ran past the epoch guard."""


class DataError(LobliqError):
    """Base class for problems with input market data."""


class MalformedRow(DataError):
    def __init__(self, path, line_no, reason):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {reason}")


class NonMonotoneTime(DataError):
    def __init__(self, path, line_no):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: timestamp goes backwards")


class MissingKind(DataError):
    """No event of a required kind was found."""


class DegenerateData(DataError):
    """Exposure (duration or volume) is zero for some side/direction."""
