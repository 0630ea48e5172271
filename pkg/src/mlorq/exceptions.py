"""Exception hierarchy.

Every error raised by the package derives from :class:`MLoRQError`. The CLI
maps the three families below onto exit codes.
"""


class MLoRQError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class InputError(MLoRQError):
    """Malformed files, manifests or arguments (exit code 2)."""

    exit_code = 2


class BadMagic(InputError):
    pass


class UnsupportedVersion(InputError):
    pass


class TruncatedBuffer(InputError):
    pass


class DuplicateName(InputError):
    pass


class ShapeMismatch(InputError, ValueError):
    pass


class MissingTensor(InputError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class BrokenChain(InputError):
    pass


class EmptyCalibration(InputError, ValueError):
    pass


class EmptyInput(InputError, ValueError):
    pass


class IndexOutOfRange(InputError, IndexError):
    pass


class Infeasible(MLoRQError):
    """The memory budget cannot be met by any assignment (exit code 3)."""

    exit_code = 3


class NoFeasibleBit(Infeasible):
    pass


class NumericalError(MLoRQError):
    """Numerical breakdown (exit code 4)."""

    exit_code = 4


class ZeroSignal(NumericalError):
    pass


class SvdNoConvergence(NumericalError):
    pass


class DegenerateAnchorsWarning(UserWarning):
    """Two interpolation anchors share the same local loss."""
