"""Exception types raised across the package."""


class Ovdet3dError(Exception):
    """Base class for all package errors."""


# geometry
class BehindCameraError(Ovdet3dError, ValueError):
    pass


class DegenerateBoxError(Ovdet3dError, ValueError):
    pass


class NoSupportPointsError(Ovdet3dError, ValueError):
    pass


class BadDimsError(Ovdet3dError, ValueError):
    pass


# datamodel / IO
class ParseError(Ovdet3dError, ValueError):
    """Malformed record. Carries the offending line number and field path."""

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        prefix = []
        if line is not None:
            prefix.append(f"line {line}")
        if field:
            prefix.append(field)
        super().__init__(f"{': '.join(prefix)}: {message}" if prefix else message)


class SchemaVersionMismatch(ParseError):
    pass


class DimensionMismatch(Ovdet3dError, ValueError):
    pass


# alignment
class ZeroVectorError(Ovdet3dError, ValueError):
    pass


class BadTemperatureError(Ovdet3dError, ValueError):
    pass


class NoPositivesError(Ovdet3dError, ValueError):
    pass


class EmptySceneError(Ovdet3dError, ValueError):
    pass


class LengthMismatch(Ovdet3dError, ValueError):
    pass


class EmptyNameError(Ovdet3dError, ValueError):
    pass


# eval
class UnknownClassError(Ovdet3dError, ValueError):
    pass
