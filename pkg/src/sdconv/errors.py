"""Exception hierarchy. Each class carries a short category used by the CLI."""


class SDConvError(Exception):
    category = "error"


class DimensionError(SDConvError, ValueError):
    category = "dimension"


class ContractError(SDConvError, RuntimeError):
    category = "contract"


class ConfigError(SDConvError, ValueError):
    category = "config"


class IngestionError(SDConvError, IOError):
    category = "ingestion"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(SDConvError, ValueError):
    category = "data"


class AnalysisError(SDConvError, ValueError):
    category = "analysis"


class TrainingDiverged(SDConvError, FloatingPointError):
    category = "diverged"
