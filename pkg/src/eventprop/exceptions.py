class ConfigurationError(ValueError):
    """Raised for invalid parameters or run configurations."""


class ProtocolError(RuntimeError):
    """Raised when the event fabric sees a packet or phase it cannot handle."""


class DatasetParseError(ValueError):
    """Raised when a dataset file contains a malformed record."""

    def __init__(self, path, lineno, message):
        self.path = path
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")
