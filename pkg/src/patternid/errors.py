"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
RuntimeAbort -> 4.
"""


class PatternIdError(Exception):
    """Base class for all package errors."""


class ConfigError(PatternIdError):
    """Invalid configuration (bad value, unknown key, violated invariant)."""


class DataError(PatternIdError):
    """Bad or inconsistent data (corpus, containers, protocol inputs)."""


class GenerationError(DataError):
    """Pattern generation failed (e.g. persistent near-duplicate rejection)."""


class RenderError(DataError):
    """A view could not be rendered (e.g. silhouette warped out of frame)."""


class ShapeError(DataError):
    """Tensor shape mismatch or spatial underflow in the network."""


class MiningError(DataError):
    """Batch violates a miner precondition (class sizes, class count)."""


class EvalError(DataError):
    """Evaluation protocol violated (pair counts, images per individual)."""


class FormatError(DataError):
    """A persisted container failed validation (magic, version, truncation)."""


class FingerprintMismatch(DataError):
    """Embedding database and model checkpoint come from different models."""


class RuntimeAbort(PatternIdError):
    """Unrecoverable runtime failure (non-finite loss, aborted step)."""


class OptimizerError(RuntimeAbort):
    """Optimizer step aborted (non-finite gradient)."""
