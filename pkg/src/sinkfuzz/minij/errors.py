class MiniJError(Exception):
    """Base class for MiniJ front-end errors."""


class MiniJSyntaxError(MiniJError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{message} at line {line}, column {col}")
        self.line = line
        self.col = col


class MiniJRuntimeError(Exception):
    """Raised inside the interpreter; always converted into a trace verdict."""
