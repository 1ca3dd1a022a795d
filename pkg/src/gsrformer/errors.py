"""Exception types shared across modules."""


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field when known."""

    def __init__(self, message: str, path: str | None = None):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class ValidationError(ValueError):
    """Input data failed schema or lexicon validation."""


class LexiconError(KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""
