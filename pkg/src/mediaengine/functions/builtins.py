"""The built-in media functions (all but the script host).

External encoder and generator commands are configuration; the defaults are
the repo-shipped pattern/passthrough stubs so pipeline tests never require
codec binaries.

When the TDD carries a reporting descriptor, the byte-moving functions emit a
final io-summary event with the SHA-256 digest of every stream they touched;
workflow-level tests verify byte conservation from the recorded events.
"""

from __future__ import annotations

import hashlib
import shlex
import subprocess
import sys
import threading

from mediaengine import nbmp
from mediaengine.events import EventError, EventRecord, HttpClient
from mediaengine.functions import (
    FunctionContext,
    FunctionError,
    MultipleInputs,
    assemble_io,
    register,
)
from mediaengine.runtime import BadDuration, parse_duration

PATTERN_STUB = [sys.executable, "-m", "mediaengine.functions.stubs", "pattern"]
PASSTHROUGH_STUB = [sys.executable, "-m", "mediaengine.functions.stubs", "passthrough"]

IO_SUMMARY_EVENT_TYPE = "media.nagare.engine.function.io-summary"


def report_io_summary(tdd: nbmp.Description, function_name: str,
                      digests: dict[str, str], ctx: FunctionContext) -> None:
    """Best-effort custom event carrying per-stream SHA-256 digests."""
    url = tdd.reporting.url if tdd.reporting else ""
    if not url:
        return
    record = EventRecord.new(
        source=f"/nagare-media-engine/functions/{function_name}",
        type=IO_SUMMARY_EVENT_TYPE,
        subject=tdd.general.id,
        data={"function": function_name, "digests": digests},
    )
    try:
        HttpClient(url, timeout=5).send([record])
    except EventError as e:
        ctx.log.warning("io-summary event delivery failed: %s", e)


class DigestSink:
    """Null sink that hashes everything it swallows."""

    def __init__(self):
        self.received = 0
        self._hash = hashlib.sha256()
        self.closed = threading.Event()

    def write(self, data: bytes) -> None:
        self._hash.update(data)
        self.received += len(data)

    def write_all_from(self, reader, chunk_size: int = 64 * 1024) -> int:
        total = 0
        while True:
            chunk = reader.read(chunk_size)
            if not chunk:
                return total
            self.write(chunk)
            total += len(chunk)

    def close(self) -> None:
        self.closed.set()

    @property
    def digest(self) -> str:
        return self._hash.hexdigest()


class BadDurationConfig(FunctionError):
    pass


class SpawnFailed(FunctionError):
    pass


class NonZeroExit(FunctionError):
    pass


@register("generic-noop")
def generic_noop(tdd: nbmp.Description, ctx: FunctionContext) -> None:
    """Does nothing and terminates directly, ignoring all bindings."""
    ctx.log.info("generic-noop: nothing to do")


@register("generic-sleep")
def generic_sleep(tdd: nbmp.Description, ctx: FunctionContext) -> None:
    duration_text = tdd.configuration.get("duration")
    if not duration_text:
        raise BadDurationConfig("configuration key 'duration' is required")
    try:
        duration = parse_duration(duration_text)
    except BadDuration as e:
        raise BadDurationConfig(str(e)) from e
    ctx.log.info("generic-sleep: sleeping %.3fs", duration)
    if ctx.stop.wait(timeout=duration):
        raise FunctionError("cancelled while sleeping")


@register("data-discard")
def data_discard(tdd: nbmp.Description, ctx: FunctionContext) -> None:
    """Drains every input to a null sink; completes when all inputs close."""
    io = assemble_io(tdd, inputs_critical=False)
    if not io.inputs:
        ctx.log.info("data-discard: no inputs")
        return
    sinks: dict[str, DigestSink] = {}
    for port, _ in io.inputs:
        sink = DigestSink()
        port.connect(sink)
        sinks[port.name] = sink
    io.manager.run(ctx.stop)
    if io.manager.errors:
        raise FunctionError("; ".join(f"{k}: {v}" for k, v in io.manager.errors.items()))
    ctx.log.info("data-discard: consumed %s bytes", sum(s.received for s in sinks.values()))
    report_io_summary(tdd, "data-discard", {name: s.digest for name, s in sinks.items()}, ctx)


@register("data-copy")
def data_copy(tdd: nbmp.Description, ctx: FunctionContext) -> None:
    """Copies the single input byte-identically to all outputs."""
    io = assemble_io(tdd, inputs_critical=False)
    if len(io.inputs) != 1:
        raise MultipleInputs(f"data-copy takes a single input, got {len(io.inputs)}")
    input_port = io.inputs[0][0]
    fanout = _combined_stream(io)
    input_port.connect(fanout)
    io.manager.run(ctx.stop)
    if io.manager.errors:
        raise FunctionError("; ".join(f"{k}: {v}" for k, v in io.manager.errors.items()))
    report_io_summary(tdd, "data-copy", {"out": fanout.digest}, ctx)


class _CombinedStream:
    """Feeds every output group the same bytes and closes them together."""

    def __init__(self, streams):
        self.streams = streams
        self._hash = hashlib.sha256()

    @property
    def digest(self) -> str:
        return self._hash.hexdigest()

    def write(self, data: bytes) -> None:
        self._hash.update(data)
        for stream in self.streams:
            stream.write(data)

    def write_all_from(self, reader, chunk_size: int = 64 * 1024) -> int:
        total = 0
        while True:
            chunk = reader.read(chunk_size)
            if not chunk:
                return total
            self.write(chunk)
            total += len(chunk)

    def close(self) -> None:
        for stream in self.streams:
            stream.close()


def _combined_stream(io) -> _CombinedStream:
    return _CombinedStream(list(io.output_groups.values()))


def _spawn(argv: list[str], ctx: FunctionContext, stdin=None) -> subprocess.Popen:
    try:
        return subprocess.Popen(argv, stdin=stdin, stdout=subprocess.PIPE,
                                stderr=subprocess.PIPE, start_new_session=True)
    except OSError as e:
        raise SpawnFailed(f"cannot spawn {argv[0]!r}: {e}") from e


def _forward_stderr(proc: subprocess.Popen, ctx: FunctionContext, name: str) -> threading.Thread:
    def pump():
        for line in proc.stderr:
            ctx.log.info("%s: %s", name, line.decode(errors="replace").rstrip())

    t = threading.Thread(target=pump, daemon=True)
    t.start()
    return t


def _terminate(proc: subprocess.Popen) -> None:
    import os
    import signal

    if proc.poll() is None:
        try:
            os.killpg(os.getpgid(proc.pid), signal.SIGTERM)
        except (ProcessLookupError, PermissionError):
            pass
        try:
            proc.wait(timeout=1)
        except subprocess.TimeoutExpired:
            try:
                os.killpg(os.getpgid(proc.pid), signal.SIGKILL)
            except (ProcessLookupError, PermissionError):
                pass


@register("media-generate-testpattern")
def media_generate_testpattern(tdd: nbmp.Description, ctx: FunctionContext) -> None:
    """Runs the generator command; its standard output feeds the outputs."""
    io = assemble_io(tdd)
    if not io.output_groups:
        raise FunctionError("media-generate-testpattern needs at least one output")
    config = tdd.configuration
    if config.get("command"):
        argv = shlex.split(config["command"])
    else:
        argv = list(PATTERN_STUB) + ["--bytes", config.get("bytes", "4096")]
    duration = None
    if config.get("duration"):
        try:
            duration = parse_duration(config["duration"])
        except BadDuration as e:
            raise BadDurationConfig(str(e)) from e

    fanout = _combined_stream(io)

    def processor(stop) -> None:
        proc = _spawn(argv, ctx)
        _forward_stderr(proc, ctx, "generator")
        killer = None
        if duration is not None:
            killer = threading.Timer(duration, _terminate, args=(proc,))
            killer.daemon = True
            killer.start()
        stop_watch = threading.Thread(target=lambda: (stop.wait(), _terminate(proc)), daemon=True)
        stop_watch.start()
        try:
            while True:
                chunk = proc.stdout.read(64 * 1024)
                if not chunk:
                    break
                fanout.write(chunk)
        finally:
            fanout.close()
            if killer is not None:
                killer.cancel()
        rc = proc.wait()
        if rc != 0 and duration is None and not stop.stopped:
            raise NonZeroExit(f"generator exited with {rc}")

    io.manager.add_member("generator", processor, critical=False)
    io.manager.run(ctx.stop)
    if io.manager.errors:
        raise FunctionError("; ".join(f"{k}: {v}" for k, v in io.manager.errors.items()))
    report_io_summary(tdd, "media-generate-testpattern", {"out": fanout.digest}, ctx)


@register("media-encode")
def media_encode(tdd: nbmp.Description, ctx: FunctionContext) -> None:
    """Pipes the single input through the encoder command to all outputs.

    With a configured encoder command the default argument template targets
    H.264 in an MPEG-TS container over stdin/stdout pipes; rawInputFlags and
    rawOutputFlags pass through verbatim (and override the codec defaults) so
    arbitrary encoder CLIs and codecs can be driven. Without a command the
    passthrough stub moves the bytes untouched.
    """
    io = assemble_io(tdd, inputs_critical=False)
    if len(io.inputs) != 1:
        raise MultipleInputs(f"media-encode takes a single input, got {len(io.inputs)}")
    if not io.output_groups:
        raise FunctionError("media-encode needs at least one output")
    config = tdd.configuration
    argv = _encoder_argv(config)

    proc = _spawn(argv, ctx, stdin=subprocess.PIPE)
    _forward_stderr(proc, ctx, "encoder")
    input_port = io.inputs[0][0]
    input_port.connect(_StdinConnection(proc))
    fanout = _combined_stream(io)

    def processor(stop) -> None:
        stop_watch = threading.Thread(target=lambda: (stop.wait(), _terminate(proc)), daemon=True)
        stop_watch.start()
        try:
            while True:
                chunk = proc.stdout.read(64 * 1024)
                if not chunk:
                    break
                fanout.write(chunk)
        finally:
            fanout.close()
        rc = proc.wait()
        if rc != 0 and not stop.stopped:
            raise NonZeroExit(f"encoder exited with {rc}")

    io.manager.add_member("encoder", processor, critical=False)
    io.manager.run(ctx.stop)
    if io.manager.errors:
        raise FunctionError("; ".join(f"{k}: {v}" for k, v in io.manager.errors.items()))
    report_io_summary(tdd, "media-encode", {"out": fanout.digest}, ctx)


def _encoder_argv(config: dict[str, str]) -> list[str]:
    if not config.get("command"):
        return list(PASSTHROUGH_STUB)
    argv = shlex.split(config["command"])
    argv += shlex.split(config.get("rawInputFlags", ""))
    argv += ["-i", "pipe:0"]
    if config.get("resolution"):
        argv += ["-s", config["resolution"]]
    if config.get("bitrate"):
        argv += ["-b:v", config["bitrate"]]
    raw_output = config.get("rawOutputFlags", "")
    if raw_output:
        argv += shlex.split(raw_output)
    else:
        argv += ["-c:v", "libx264", "-f", "mpegts"]
    argv += ["pipe:1"]
    return argv


class _StdinConnection:
    def __init__(self, proc: subprocess.Popen):
        self.proc = proc

    def write(self, data: bytes) -> None:
        try:
            self.proc.stdin.write(data)
            self.proc.stdin.flush()
        except (BrokenPipeError, ValueError) as e:
            raise FunctionError(f"encoder closed its input: {e}") from e

    def write_all_from(self, reader, chunk_size: int = 64 * 1024) -> int:
        total = 0
        while True:
            chunk = reader.read(chunk_size)
            if not chunk:
                return total
            self.write(chunk)
            total += len(chunk)

    def close(self) -> None:
        try:
            self.proc.stdin.close()
        except (BrokenPipeError, ValueError):
            pass
