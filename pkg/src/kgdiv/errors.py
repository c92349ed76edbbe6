"""Exception types shared across the package."""


class KGDivError(Exception):
    pass


class ParseError(KGDivError, ValueError):
    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class EmptyDatasetError(KGDivError, ValueError):
    pass


class SchemaError(KGDivError, ValueError):
    pass


class ConsistencyError(KGDivError, ValueError):
    pass


class ContractError(KGDivError, ValueError):
    """A caller violated an operation's precondition (shapes, sizes, ids)."""


class NumericError(KGDivError, ArithmeticError):
    """A non-finite value appeared; ``where`` names the primitive or loss term."""

    def __init__(self, where: str, message: str = "non-finite value"):
        super().__init__(f"{where}: {message}")
        self.where = where
