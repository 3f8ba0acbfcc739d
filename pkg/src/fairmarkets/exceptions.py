"""Exception hierarchy.

The CLI maps each family to a distinct exit code, so new errors should
subclass one of the family bases below rather than ``Exception`` directly.
"""


class FairMarketsError(Exception):
    """Base class for every error raised by this package."""


# -- validation family (CLI exit 2) -------------------------------------------


class ValidationError(FairMarketsError, ValueError):
    pass


class DimensionMismatch(ValidationError):
    pass


class NonPositiveValuation(ValidationError):
    def __init__(self, i, j, value=None):
        self.i, self.j, self.value = int(i), int(j), value
        super().__init__(f"valuation at ({self.i}, {self.j}) must be > 0, got {value!r}")


class ValuationAboveMax(ValidationError):
    def __init__(self, i, j, value, max_valuation):
        self.i, self.j = int(i), int(j)
        super().__init__(
            f"valuation at ({self.i}, {self.j}) = {value!r} exceeds max_valuation {max_valuation!r}"
        )


class NonPositiveBudget(ValidationError):
    def __init__(self, i, value=None):
        self.i = int(i)
        super().__init__(f"budget of buyer {self.i} must be > 0, got {value!r}")


class NonPositiveSupply(ValidationError):
    def __init__(self, j, value=None):
        self.j = int(j)
        super().__init__(f"supply of item {self.j} must be > 0, got {value!r}")


class InvalidGroupLabel(ValidationError):
    def __init__(self, i, value=None):
        self.i = int(i)
        super().__init__(f"group label of buyer {self.i} must be 0 or 1, got {value!r}")


class MarketFileError(ValidationError):
    """Malformed market JSON (unknown keys, missing fields, wrong types)."""


class ParseError(ValidationError):
    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")


class DuplicateRating(ValidationError):
    def __init__(self, user, item, line=None):
        self.user, self.item, self.line = user, item, line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"duplicate rating for user {user!r}, item {item!r}{where}")


class EmptyDataset(ValidationError):
    pass


class IndexOutOfRange(ValidationError):
    pass


class UnbalancedGroups(ValidationError):
    pass


class EmptyGroup(ValidationError):
    def __init__(self, z):
        self.z = int(z)
        super().__init__(f"protected class {self.z} has no members")


class EmptySample(ValidationError):
    pass


class InvalidMatching(ValidationError):
    pass


class OddN(ValidationError):
    pass


class DegenerateSplit(ValidationError):
    pass


class OracleScaleExceeded(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


# -- numerical / evaluation errors (CLI exit 2 unless noted) ------------------


class UnboundedDemand(FairMarketsError, ValueError):
    def __init__(self, i, j):
        self.i, self.j = int(i), int(j)
        super().__init__(f"buyer {self.i} values item {self.j} but its price is zero")


class ZeroUtility(FairMarketsError, ValueError):
    def __init__(self, i):
        self.i = int(i)
        super().__init__(f"buyer {self.i} has zero utility")


class ZeroDemandUtility(ZeroUtility):
    pass


class DegenerateAllocation(FairMarketsError, ValueError):
    def __init__(self, i):
        self.i = int(i)
        super().__init__(f"every bundle is worthless to buyer {self.i}")


class ZeroReferenceWelfare(FairMarketsError, ValueError):
    pass


class LpInfeasible(FairMarketsError, ArithmeticError):
    pass


class LpUnbounded(FairMarketsError, ArithmeticError):
    pass


# -- solver family (CLI exit 3) ------------------------------------------------


class NotConverged(FairMarketsError, ArithmeticError):
    def __init__(self, message, residuals=None, iterations=None):
        self.residuals = residuals
        self.iterations = iterations
        super().__init__(message)


class TrainingDiverged(FairMarketsError, ArithmeticError):
    """Factorization loss became non-finite (CLI exit 5)."""


# -- CEEqI family (CLI exit 4) -------------------------------------------------


class WrongOrientation(FairMarketsError, ValueError):
    def __init__(self, disparity):
        self.disparity = disparity
        super().__init__(
            f"group 1 is not disadvantaged at equal budgets (U1 - U0 = {disparity:.6g}); "
            "flip the labels or use auto-orientation"
        )


class BracketFailure(FairMarketsError, ArithmeticError):
    pass


# -- incentive audits ----------------------------------------------------------


class BoundViolation(FairMarketsError, AssertionError):
    def __init__(self, j, excess):
        self.j, self.excess = int(j), float(excess)
        super().__init__(f"price of item {self.j} moved outside its bound by {self.excess:.3g}")


class ScenarioDegenerate(FairMarketsError, ValueError):
    pass
