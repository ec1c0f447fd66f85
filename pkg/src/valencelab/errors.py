"""Exception taxonomy shared across the package.

Exit-code mapping for the CLI lives in ``cli.py``; library code raises these
and never calls ``sys.exit`` itself.
"""


class ValenceLabError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ValenceLabError):
    """Invalid user-supplied configuration (bad counts, missing paths)."""


class ContractViolationError(ValenceLabError):
    """A documented precondition was violated by the caller."""


class PipelineError(ValenceLabError):
    """A pipeline stage failed mid-run; partial outputs may exist."""


class AuthError(ValenceLabError):
    """Envelope verification or data-scope failure.

    ``kind`` is ``"reject"`` for bad signatures and ``"scope"`` when a valid
    signer asks for another entity's data.
    """

    def __init__(self, kind: str, message: str = ""):
        self.kind = kind
        super().__init__(message or f"auth failure: {kind}")


class NotFoundError(ValenceLabError):
    """Unknown entity, or no trained model registered for it."""


class NoStructureError(ValenceLabError):
    """Cluster parameter search found no partition with usable structure."""


class EmptyDatasetError(ValenceLabError):
    """Dataset assembly produced zero usable rows."""


class UnsupportedModelError(ValenceLabError):
    """Operation applied to a model kind that does not support it."""
