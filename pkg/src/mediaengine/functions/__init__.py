"""Built-in media functions and the multi-call dispatch.

Every function takes a parsed TDD and a run context; the binary name (or the
first argument when invoked under the generic name) selects the function, the
remaining argument is the TDD file path.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

from mediaengine import nbmp
from mediaengine.runtime import StopToken
from mediaengine.streamio import Connection, IOManager, Stream, group_fanout_ports
from mediaengine.streamio.build import ports_from_tdd

logger = logging.getLogger("mediaengine.functions")

GENERIC_BINARY = "functions"

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


@dataclass
class FunctionContext:
    stop: StopToken = field(default_factory=StopToken)
    log: logging.Logger = logger


class FunctionError(Exception):
    pass


class MultipleInputs(FunctionError):
    pass


_REGISTRY: dict[str, object] = {}


def register(name: str):
    def wrap(fn):
        _REGISTRY[name] = fn
        return fn

    return wrap


def lookup(name: str):
    return _REGISTRY.get(name)


def names() -> list[str]:
    return sorted(_REGISTRY)


@dataclass
class FunctionIO:
    """Ports built from the TDD: inputs as (port, params) and output fan-out
    groups, each group fed by one Stream."""

    inputs: list = field(default_factory=list)
    output_groups: dict[str, Stream] = field(default_factory=dict)
    output_ports: list = field(default_factory=list)
    manager: IOManager = field(default_factory=IOManager)

    def close_outputs(self) -> None:
        for stream in self.output_groups.values():
            try:
                stream.close()
            except Exception:
                pass


def assemble_io(tdd: nbmp.Description, inputs_critical: bool = True) -> FunctionIO:
    """Build ports and fan-out streams for a TDD.

    Output ports with dot-suffixed names group under their base name and all
    receive identical bytes from one Stream.
    """
    io = FunctionIO()
    inputs, outputs = ports_from_tdd(tdd)
    io.inputs = inputs
    for port, _ in inputs:
        io.manager.add_port(port, critical=inputs_critical)
    by_name = {port.name: port for port, _ in outputs}
    groups = group_fanout_ports(list(by_name))
    for base, members in groups.items():
        stream = Stream([Connection(by_name[m], closer=by_name[m].close) for m in members])
        io.output_groups[base] = stream
    for port, _ in outputs:
        io.manager.add_port(port, critical=False)
        io.output_ports.append(port)
    return io


def run_function(name: str, tdd: nbmp.Description, ctx: FunctionContext | None = None) -> int:
    fn = lookup(name)
    if fn is None:
        logger.error("unknown function %r (available: %s)", name, ", ".join(names()))
        return EXIT_USAGE
    ctx = ctx or FunctionContext()
    try:
        fn(tdd, ctx)
    except FunctionError as e:
        ctx.log.error("%s failed: %s", name, e)
        return EXIT_FAILED
    except Exception:
        ctx.log.exception("%s crashed", name)
        return EXIT_FAILED
    return EXIT_OK


def dispatch(argv: list[str], prog: str = "") -> int:
    """Multi-call entry: the binary basename selects the function, falling
    back to the first argument; the remaining argument is the TDD path."""
    basename = os.path.basename(prog or "")
    args = list(argv)
    if basename in _REGISTRY:
        name = basename
    else:
        if not args:
            logger.error("usage: functions <name> <tdd-file>")
            return EXIT_USAGE
        name = args.pop(0)
    if name not in _REGISTRY:
        logger.error("unknown function %r", name)
        return EXIT_USAGE
    if not args:
        logger.error("missing TDD file argument")
        return EXIT_USAGE
    tdd_path = args[0]
    try:
        with open(tdd_path, "rb") as f:
            tdd = nbmp.parse_document(f.read(), nbmp.TDD)
    except (OSError, nbmp.NbmpError) as e:
        logger.error("cannot load TDD %s: %s", tdd_path, e)
        return EXIT_USAGE
    nbmp.default_description(tdd)
    return run_function(name, tdd, FunctionContext())


from mediaengine.functions import builtins as _builtins  # noqa: E402,F401  (registers functions)
from mediaengine.functions import script as _script  # noqa: E402,F401
