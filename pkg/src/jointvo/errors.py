"""Exception hierarchy.

Everything raised on purpose by the package derives from :class:`JointVOError`.
:class:`DataError` marks problems with input data (bad files, degenerate
geometry) as opposed to programming or usage errors; the CLI maps it to exit
code 2.
"""


class JointVOError(Exception):
    pass


class DataError(JointVOError):
    pass


class InvalidConfig(JointVOError, ValueError):
    pass


class UpToScaleComposition(JointVOError, ValueError):
    pass


class BehindCamera(DataError):
    pass


class CropOutOfBounds(JointVOError, ValueError):
    pass


class DimensionMismatch(DataError):
    pass


class FrameOutOfRange(JointVOError, IndexError):
    pass


class NotDivisible(DataError):
    pass


class BadMagic(DataError):
    pass


class TruncatedFile(DataError):
    pass


class NoOverlap(DataError):
    pass


class DegenerateMotion(DataError):
    pass


class InsufficientStaticSupport(DataError):
    def __init__(self, message, support=None, iteration=None):
        super().__init__(message)
        self.support = support
        self.iteration = iteration


class AllDynamic(DataError):
    def __init__(self, message, fraction=None, iteration=None):
        super().__init__(message)
        self.fraction = fraction
        self.iteration = iteration


class DegenerateSpread(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.line = line
        self.path = path


class EmptyTrajectory(DataError):
    pass
