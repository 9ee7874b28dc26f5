"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration. Carries field-level violations when available.

    `violations` is a list of {"field": dotted.path, "message": str} dicts;
    the string form enumerates every offending field.
    """

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [{"field": "", "message": violations}]
        self.violations = violations
        lines = "; ".join(
            f"{v['field']}: {v['message']}" if v["field"] else v["message"]
            for v in violations
        )
        super().__init__(lines)


class IngestionError(ValueError):
    """Malformed archive manifest or image file. Names the record id."""


class ShapeError(ValueError):
    """Tensor shape violates a documented invariant (e.g. patch divisibility)."""


class ContractError(ValueError):
    """An operation's precondition was violated by the caller."""


class EvaluationError(ValueError):
    """Retrieval evaluation asked for something the data cannot support."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss. Carries the last finite metrics."""

    def __init__(self, message, last_metrics=None):
        super().__init__(message)
        self.last_metrics = last_metrics
