"""Version handling for ltpeft."""

from importlib.metadata import version

from packaging import version as pkg_version

try:
    __version__ = version("ltpeft")
except Exception:
    __version__ = "unknown"


def is_compatible(producer: str, current: str | None = None) -> bool:
    """Check whether a checkpoint written by ``producer`` can be read.

    Checkpoints are readable across minor and patch releases; a major
    version bump may change the tensor layout.

    Args:
        producer: Version string stored in the checkpoint
        current: Version to compare against (default: installed version)

    Returns:
        True unless both versions parse and their major versions differ

    """
    current = __version__ if current is None else current
    try:
        left = pkg_version.parse(producer)
        right = pkg_version.parse(current)
    except pkg_version.InvalidVersion:
        return True
    return left.release[0] == right.release[0]
