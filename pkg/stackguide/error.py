class GuideError(Exception):
    exit_code = 1

    def __init__(self, message):
        super().__init__(message)


class InputError(GuideError):
    exit_code = 2


class GeometryError(GuideError):
    exit_code = 3


class NetworkError(GuideError):
    exit_code = 4


class RegistrationError(GuideError):
    exit_code = 5


class EvaluationError(GuideError):
    exit_code = 6


class ConfigError(InputError):
    pass


class UnreadableRaster(InputError):
    pass


class MalformedWorldFile(InputError):
    pass


class UnreadableWeights(InputError):
    pass


class UnsupportedBitDepth(InputError):
    pass


class AnnotationError(InputError):
    pass


class SingularGeoTransform(GeometryError):
    pass


class DegenerateRange(GeometryError):
    """raised only when radiometry is asked to be strict"""


class RejectionOverflow(GeometryError):
    pass


class SingularTransform(GeometryError):
    pass


class PointAtInfinity(GeometryError):
    pass


class InvalidCount(GeometryError):
    pass


class ShapeMismatch(NetworkError):
    pass


class NonFiniteActivation(NetworkError):
    pass


class NonFiniteGradient(NetworkError):
    pass


class NonFiniteWeights(NetworkError):
    pass


class TargetOutOfGrid(NetworkError):
    pass


class DivergedLoss(NetworkError):

    def __init__(self, message, stage=None, step=None):
        super().__init__(message)
        self.stage = stage
        self.step = step


class ImageTooSmall(RegistrationError):
    pass


class SupportOutOfBounds(RegistrationError):
    pass


class EmptyInput(RegistrationError):
    pass


class NotEnoughMatches(RegistrationError):
    pass


class DegenerateConfiguration(RegistrationError):
    pass


class RansacFailed(RegistrationError):
    pass


class EmptyTrajectory(EvaluationError):
    pass


class EmptyResults(EvaluationError):
    pass


class WriteFailure(EvaluationError):
    pass
