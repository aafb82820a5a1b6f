class ContractViolation(ValueError):
    """A caller broke an operation's precondition (shapes, ranges, ids)."""


class NumericError(ArithmeticError):
    """A non-finite value showed up where finite numbers are required."""


class ConfigError(ValueError):
    """Invalid run configuration or corpus layout."""


class NonFiniteLossError(NumericError):
    """Training produced a non-finite loss; carries the offending step and batch."""

    def __init__(self, step, sample_ids, loss):
        self.step = step
        self.sample_ids = list(sample_ids)
        self.loss = loss
        preview = ", ".join(self.sample_ids[:8])
        more = "" if len(self.sample_ids) <= 8 else f", ... ({len(self.sample_ids)} total)"
        super().__init__(f"non-finite loss {loss!r} at step {step}; batch: {preview}{more}")


class MissingArtifactError(FileNotFoundError):
    """An upstream pipeline stage has not produced what this stage needs."""

    def __init__(self, path, stage):
        self.path = path
        self.stage = stage
        super().__init__(f"missing {path}: run {stage} first")
