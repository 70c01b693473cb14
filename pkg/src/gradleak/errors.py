"""Exception hierarchy shared by every module of the package."""


class GradLeakError(Exception):
    """Base class for all errors raised by gradleak."""


class NonFiniteGradient(GradLeakError, FloatingPointError):
    def __init__(self, name, message=None):
        self.name = name
        super().__init__(message or f"non-finite value in gradient of {name!r}")


class ZeroNormGradient(GradLeakError, ValueError):
    pass


class LayoutMismatch(GradLeakError, ValueError):
    pass


class UnsupportedNoise(GradLeakError, ValueError):
    pass


class ShapeError(GradLeakError, ValueError):
    pass


class LabelError(GradLeakError, ValueError):
    pass


class ScheduleError(GradLeakError, ValueError):
    pass


class SingularStep(GradLeakError, ZeroDivisionError):
    pass


class StepRangeError(GradLeakError, ValueError):
    pass


class SamplerSpecError(GradLeakError, ValueError):
    pass


class WindowError(GradLeakError, ValueError):
    pass


class ConfigError(GradLeakError, ValueError):
    pass


class IngestError(GradLeakError, OSError):
    pass
