"""Exception types shared across the package."""


class NonFiniteError(FloatingPointError):
    """A kernel produced NaN or Inf."""


class FormatError(ValueError):
    """A file on disk does not match the expected layout."""

    def __init__(self, message, path=None, offset=None):
        parts = [message]
        if path is not None:
            parts.append(f"file={path}")
        if offset is not None:
            parts.append(f"offset={offset}")
        super().__init__(" ".join(parts) if len(parts) == 1 else f"{parts[0]} ({', '.join(parts[1:])})")
        self.path = path
        self.offset = offset


class ConfigMismatchError(FormatError):
    """Stored tensors disagree with the configuration they claim to belong to."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, iteration=None):
        super().__init__(message if iteration is None else f"{message} at iteration {iteration}")
        self.iteration = iteration
