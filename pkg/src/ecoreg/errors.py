"""Exception types raised across the package."""


class EcoregError(Exception):
    """Base class for all package errors."""


class ValidationError(EcoregError):
    """Input data does not conform to the declared schema or file contract."""


class SchemaError(ValidationError):
    pass


class SchemaMismatch(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")


class UnknownLevel(ValidationError):
    def __init__(self, variable, level):
        self.variable = variable
        self.level = level
        super().__init__(f"unknown level {level!r} for variable {variable!r}")


class NonFiniteInput(ValidationError):
    pass


class ConstantVariable(ValidationError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"variable {name!r} has zero weighted variance")


class EmptySubset(EcoregError):
    pass


class EmptySubgroup(EcoregError):
    def __init__(self, state, group):
        self.state = state
        self.group = group
        super().__init__(f"subgroup {group!r} matches no records in state {state!r}")


class UnmappedGeography(ValidationError):
    def __init__(self, geo_id):
        self.geo_id = geo_id
        super().__init__(f"geography {geo_id!r} is missing from the crosswalk")


class MissingYear(ValidationError):
    def __init__(self, year):
        self.year = year
        super().__init__(f"no records for year {year!r}")


class AlphaZero(EcoregError):
    pass


class NotConverged(EcoregError):
    """Solver hit the sweep limit.

    ``partial`` holds the last iterate as a :class:`~ecoreg.solver.ModelFit`
    and ``change`` the final relative coefficient change.
    """

    def __init__(self, lam, partial, change):
        self.lam = lam
        self.partial = partial
        self.change = change
        super().__init__(f"not converged at lambda={lam:.6g} (change {change:.3g})")


class NotCategorical(EcoregError):
    pass


class IncompatibleVersion(EcoregError):
    pass


class HashMismatch(EcoregError):
    pass
