"""Exception classes shared across the package.

The CLI maps these onto its exit-code contract: validation problems exit 1,
missing inputs exit 2 (builtin FileNotFoundError), backend failures exit 3.
"""


class PhenotagError(Exception):
    """Base class for all package errors."""


class ValidationError(PhenotagError):
    """Input data violates a format or invariant (bad line, duplicate id, ...)."""


class BackendError(PhenotagError):
    """A remote backend (NER service, LLM, embedding endpoint) failed."""
