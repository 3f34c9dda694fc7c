"""Track HPC system behavior from resource usage telemetry using tensor decompositions"""

from pluggy import HookimplMarker

from ._version import __version__

hookimpl = HookimplMarker("tensortrack")
