"""Exception hierarchy.  Every error carries a short machine-readable ``code``."""


class MtadvError(Exception):
    code = "ERROR"


class ConfigError(MtadvError, ValueError):
    code = "CONFIG_ERROR"


class ProtocolError(MtadvError, ValueError):
    code = "PROTOCOL_ERROR"


class ShapeError(MtadvError, ValueError):
    code = "SHAPE_ERROR"


class ModelFormatError(MtadvError):
    code = "MODEL_FORMAT"


class ChecksumError(ModelFormatError):
    code = "CHECKSUM"


class VersionError(ModelFormatError):
    code = "VERSION"


class TrainingFailure(MtadvError):
    code = "TRAINING_FAILURE"

    def __init__(self, message, eer=None):
        super().__init__(message)
        self.eer = eer


class CalibrationError(MtadvError, ValueError):
    code = "CALIBRATION_ERROR"


class ProvenanceError(MtadvError, ValueError):
    code = "PROVENANCE_ERROR"
