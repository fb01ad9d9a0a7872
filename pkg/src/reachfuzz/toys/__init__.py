"""Standalone toy targets used by the test suite and the packaged demo.

Each toy is a plain script executed as a child process; none of them import
this package. They report executed functions through the trace protocol: one
function name per line appended to the file named by the ``RF_TRACE_FILE``
environment variable.
"""

from importlib import resources
from pathlib import Path


def toy_path(name: str) -> Path:
    """Filesystem path of a shipped toy target script."""
    return Path(str(resources.files(__name__) / f"{name}.py"))
