class ConsensusError(Exception):
    """Base error carrying a short machine-parsable category.

    The CLI prints ``error: <category>: <message>`` and exits nonzero.
    """

    category = "error"

    def __init__(self, message: str = "", category: str | None = None):
        super().__init__(message)
        if category is not None:
            self.category = category


class PgmError(ConsensusError):
    category = "malformed-pgm"


class DimensionMismatch(ConsensusError):
    category = "dimension-mismatch"


class ManifestError(ConsensusError):
    category = "manifest"
