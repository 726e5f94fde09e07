"""Shared exception types for the kprompt pipeline."""


class KpromptError(Exception):
    """Base class for all pipeline errors."""


class ParseError(KpromptError):
    def __init__(self, path, line_no, message):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class EmptyCorpusError(KpromptError):
    pass


class MissingTemplateError(KpromptError):
    def __init__(self, relation):
        self.relation = relation
        super().__init__(f"no relation template for relation {relation!r}")


class MissingNameError(KpromptError):
    def __init__(self, entity):
        self.entity = entity
        super().__init__(f"no display name for entity {entity!r}")


class BudgetExceededError(KpromptError):
    """Fused prompt would not fit the token budget.

    Carries the required and available sizes so callers can lower
    degree or hops instead of silently clipping.
    """

    def __init__(self, required, available, context=None):
        self.required = required
        self.available = available
        self.context = context
        suffix = f" (while compiling {context})" if context else ""
        super().__init__(
            f"fused prompt needs {required} tokens but the budget is "
            f"{available}; lower the tree degree first, then the hops{suffix}"
        )


class CoverageError(KpromptError):
    """A token index is not covered by any knowledge-tree node."""


class NumericError(KpromptError):
    pass


class TrainingDivergedError(KpromptError):
    def __init__(self, epoch, step, message="loss became non-finite"):
        self.epoch = epoch
        self.step = step
        super().__init__(f"{message} at epoch {epoch}, step {step}")


class ConfigError(KpromptError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"config field {field!r}: {message}")
