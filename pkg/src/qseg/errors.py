"""Exception hierarchy shared across the toolkit."""


class QsegError(Exception):
    """Base class; `module` tags the subsystem for CLI error reporting."""

    module = "qseg"

    def __str__(self):
        return f"[{self.module}] {super().__str__()}"


class ShapeError(QsegError):
    module = "tensor"


class ContractError(QsegError):
    module = "quant"


class ConfigurationError(QsegError):
    module = "config"


class FormatError(QsegError):
    module = "store"
