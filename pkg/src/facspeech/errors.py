"""Exception types shared across the toolkit."""


class FacspeechError(Exception):
    """Base class for toolkit-specific failures."""


class LexiconError(FacspeechError):
    """A word has no phone expansion in the active lexicon."""


class GrammarParseError(FacspeechError):
    """Grammar source could not be parsed; carries a location."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DecodeFailure(FacspeechError):
    """No complete joint path survived decoding (beam too small)."""


class DivergenceError(FacspeechError):
    """Training produced non-finite parameters; carries the epoch."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class TrainingPhaseError(FacspeechError):
    """A training phase was invoked out of order."""
