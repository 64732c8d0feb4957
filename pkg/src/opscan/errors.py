"""Exception hierarchy shared across the toolkit."""


class OpscanError(Exception):
    """Base class for all toolkit errors."""


class UnrecognizedArtifact(OpscanError):
    """Input is neither an APK, a DEX file, nor a smali directory."""


class MalformedDex(OpscanError):
    """DEX container violates the format (bad magic, out-of-bounds offset,
    truncated instruction stream, ...)."""


class NoSmaliFiles(OpscanError):
    """Directory holds no .smali files."""


class NoDexEntries(OpscanError):
    """APK archive holds no classes.dex / classesN.dex entries."""


class ParseError(OpscanError):
    """Malformed CSV input; carries the 1-based line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.line = line


class DuplicateAppId(ParseError):
    """Manifest declares the same app_id twice."""


class UnknownLabel(ParseError):
    """Label is neither benign nor malware."""


class EmptyClass(OpscanError):
    """An operation needs at least one instance of each class."""


class DegenerateClass(OpscanError):
    """A split would leave a class with an empty training partition."""


class EmptyDataset(OpscanError):
    """Training requires at least one instance."""


class InvalidParam(OpscanError):
    """A hyperparameter or configuration value is out of range."""


class DimensionMismatch(OpscanError):
    """Feature vector length does not match the trained model."""


class EmptyMatrix(OpscanError):
    """Confusion matrix holds no instances."""


class TooFewInstances(OpscanError):
    """Not enough instances per class for the requested fold count."""


class VersionMismatch(OpscanError):
    """Model file was written by an unsupported format version."""


class CorruptModel(OpscanError):
    """Model file fails checksum or structural validation."""
