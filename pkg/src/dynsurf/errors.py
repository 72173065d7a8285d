"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for all dynsurf errors."""


class DegenerateQuaternion(EngineError):
    """Real part of a dual quaternion has (near-)zero norm."""


class ZeroBlend(EngineError):
    """Blended dual quaternion collapsed to zero real part."""


class ShapeMismatch(EngineError):
    pass


class EmptyField(EngineError):
    """Scalar field has no zero crossing; no surface to extract."""


class EmptyMesh(EngineError):
    pass


class EmptyMask(EngineError):
    pass


class NonFiniteLoss(EngineError):
    """A loss term became NaN/inf; carries the offending term name."""

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term '{term}' = {value}")
        self.term = term
        self.value = value


class DatasetEmpty(EngineError):
    pass


class MissingFile(EngineError):
    pass


class BadImage(EngineError):
    pass


class BadManifest(EngineError):
    pass


class BadMagic(EngineError):
    pass


class VersionMismatch(EngineError):
    pass


class TruncatedFile(EngineError):
    pass


class InvalidTau(EngineError):
    pass
