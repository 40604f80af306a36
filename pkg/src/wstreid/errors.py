"""Exception types with stable machine-readable categories.

The CLI prints ``error:<category>: <message>`` on stderr and exits nonzero,
so the ``category`` attribute is part of the tool's external contract.
"""


class ToolError(Exception):
    category = "error"


class DimensionError(ToolError):
    """Operand shapes are incompatible."""

    category = "dimension"


class ContractError(ToolError):
    """A precondition on arguments or configuration was violated."""

    category = "contract"


class DatasetError(ToolError):
    """Dataset content is unusable (empty, inconsistent labels, ...)."""

    category = "dataset"


class SamplingError(ToolError):
    """The batch sampler cannot satisfy its batch-shape requirements."""

    category = "sampling"


class ParseError(ToolError):
    """A manifest, config, or container file is malformed."""

    category = "parse"


class EvaluationError(ToolError):
    """Retrieval evaluation has no valid query to score."""

    category = "evaluation"
