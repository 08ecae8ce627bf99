"""Exception types shared across the package."""


class ParseError(ValueError):
    """Malformed text input (OFF/XYZ files, manifests, config files)."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(ValueError):
    """Malformed binary payload (field files, checkpoints)."""


class TrainingDiverged(RuntimeError):
    """Raised when the training loss turns non-finite; carries the diagnostic checkpoint path."""

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
