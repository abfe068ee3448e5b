"""Exception hierarchy. CLI maps ValidationError -> exit 2, everything else -> exit 3."""


class LipFDError(Exception):
    pass


class ValidationError(LipFDError, ValueError):
    """Bad input data, arguments or configuration."""


class ManifestParseError(ValidationError):
    def __init__(self, path, line_no, message):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class MissingMediaError(ValidationError):
    def __init__(self, clip_ids):
        self.clip_ids = list(clip_ids)
        super().__init__("missing media for clips: " + ", ".join(self.clip_ids))


class ConfigError(ValidationError):
    pass


class WindowRangeError(ValidationError, IndexError):
    pass


class StateError(LipFDError, RuntimeError):
    pass


class NumericError(LipFDError, ArithmeticError):
    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)
