# bdcfm/errors.py
"""
Error taxonomy shared by every module.

Each error carries a stable ``code`` (written to stderr as JSON by the CLI)
and an optional ``context`` dict with locations, counts or iteration indices.
"""


class BdcfmError(Exception):
    code = "BdcfmError"

    def __init__(self, message: str = "", **context):
        super().__init__(message or self.code)
        self.message = message or self.code
        self.context = dict(context)

    def to_dict(self):
        return {"error": self.code, "message": self.message, "context": self.context}


class NotPositiveDefinite(BdcfmError, ValueError):
    code = "NotPositiveDefinite"


class InvalidParameter(BdcfmError, ValueError):
    code = "InvalidParameter"


class ConvergenceFailure(BdcfmError):
    code = "ConvergenceFailure"


class SingularTopBlock(BdcfmError):
    code = "SingularTopBlock"


class SingularGram(BdcfmError):
    code = "SingularGram"


class EmptyCluster(BdcfmError):
    code = "EmptyCluster"


class InsufficientDraws(BdcfmError):
    code = "InsufficientDraws"


class DimensionMismatch(BdcfmError):
    code = "DimensionMismatch"


class IncompletePanel(BdcfmError):
    code = "IncompletePanel"


class NonFiniteValue(BdcfmError):
    code = "NonFiniteValue"


class DuplicateCell(BdcfmError):
    code = "DuplicateCell"


class MissingChains(BdcfmError):
    code = "MissingChains"


class ConfigError(BdcfmError):
    code = "ConfigError"
