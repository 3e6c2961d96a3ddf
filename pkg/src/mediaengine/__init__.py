"""Self-hosted NBMP media workflow system.

A workflow API gateway, a declarative resource store with reconciliation
controllers, a local execution backend, a task-shim function adapter, a
helper sidecar with event reporting/replay, a stream IO layer and a set of
built-in media functions.
"""

__version__ = "0.1.0"
