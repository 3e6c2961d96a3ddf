"""Executable entry points.

One umbrella executable with subcommands for each component; the media
functions additionally dispatch on the binary basename, so a symlink named
media-encode runs that function directly.

    engine gateway --config gateway.yaml
    engine workflow-manager --config manager.yaml [--apply resources.yaml]...
    engine workflow-manager-helper [--config helper.yaml] [--data data.json]
    engine task-shim --config shim.yaml
    engine functions <name> <tdd.json>
"""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys

import yaml

from mediaengine import config as configmod
from mediaengine import functions, model
from mediaengine.runtime import StarterManager, StopToken
from mediaengine.store import ResourceStore

logger = logging.getLogger("mediaengine.cli")

COMPONENTS = ("gateway", "workflow-manager", "workflow-manager-helper", "task-shim", "functions")


def _stop_on_signals(stop: StopToken) -> None:
    def handler(signum, frame):
        logger.info("received signal %d, shutting down", signum)
        stop.stop()

    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            signal.signal(sig, handler)
        except ValueError:
            pass  # not the main thread (tests)


def apply_resource_files(store: ResourceStore, paths: list[str]) -> int:
    """Load MPE/Function/MediaLocation/TaskTemplate definitions into the
    store; existing resources are patched."""
    from mediaengine.store import AlreadyExists

    count = 0
    for path in paths:
        with open(path, encoding="utf-8") as f:
            for doc in yaml.safe_load_all(f):
                if not doc:
                    continue
                try:
                    store.create(doc)
                except AlreadyExists:
                    store.patch(doc)
                count += 1
    return count


def run_gateway(args) -> int:
    from mediaengine.gateway import Gateway

    config = configmod.load_config(args.config, configmod.KIND_GATEWAY)
    store = ResourceStore(snapshot_path=args.snapshot or None)
    model.register_engine_kinds(store)
    if args.apply:
        apply_resource_files(store, args.apply)
    gateway = Gateway(store, config)
    stop = StopToken()
    _stop_on_signals(stop)
    gateway.server.bind()
    logger.info("gateway serving on %s", gateway.server.base_url())
    gateway.start(stop)
    return 0


def run_workflow_manager(args) -> int:
    from mediaengine.controllers import WorkflowManager
    from mediaengine.controllers.manager import decode_workflow_manager_config
    from mediaengine.gateway import Gateway, GatewayConfig

    with open(args.config, "rb") as f:
        doc = yaml.safe_load(f)
    if not isinstance(doc, dict) or doc.get("kind") != configmod.KIND_WORKFLOW_MANAGER:
        raise configmod.WrongKind(f"expected kind {configmod.KIND_WORKFLOW_MANAGER}")
    settings = decode_workflow_manager_config(doc)
    store = ResourceStore(snapshot_path=settings.store_snapshot_path or None)
    model.register_engine_kinds(store)
    if args.apply:
        applied = apply_resource_files(store, args.apply)
        logger.info("applied %d resources", applied)

    manager = WorkflowManager(store, settings)
    runner = StarterManager("engine")
    runner.manage("workflow-manager", manager.start)

    gateway_section = doc.get("gateway")
    if gateway_section:
        # the resource store is in-process, so the NBMP gateway is served from
        # this process when configured
        errors: list[str] = []
        gateway_config = GatewayConfig(
            webserver=configmod.webserver_from_dict(gateway_section.get("webserver"), errors, "gateway.webserver"),
            namespace=str(gateway_section.get("namespace", "") or ""),
            gpu_resource_name=str(gateway_section.get("gpuResourceName", "") or ""),
        )
        if not gateway_config.namespace:
            errors.append("gateway.namespace is required")
        if errors:
            raise configmod.InvalidConfig(errors)
        gateway = Gateway(store, gateway_config)
        gateway.server.bind()
        logger.info("gateway serving on %s", gateway.server.base_url())
        runner.manage("gateway", gateway.start)

    stop = StopToken()
    _stop_on_signals(stop)
    runner.start(stop)
    return 1 if runner.failed else 0


def run_helper(args) -> int:
    from mediaengine.helper import Helper, HelperConfig, apply_env_overrides
    from mediaengine.runtime import watch_file

    if args.config:
        config = configmod.load_config(args.config, configmod.KIND_HELPER)
    else:
        config = HelperConfig()
    apply_env_overrides(config)
    data_path = args.data or os.environ.get("NME_DATA_FILE", "")
    if not data_path:
        logger.error("no data file: pass --data or set NME_DATA_FILE")
        return 2

    import json

    data = watch_file(data_path, transform=lambda raw: json.loads(raw))
    stop = StopToken()
    _stop_on_signals(stop)
    data.start_background(stop)
    helper = Helper(config, data)
    return helper.run(stop)


def run_task_shim(args) -> int:
    from mediaengine.shim import TaskShim, TaskShimConfig

    if args.config:
        config = configmod.load_config(args.config, configmod.KIND_TASK_SHIM)
    else:
        config = TaskShimConfig()
    shim = TaskShim(config)
    stop = StopToken()
    _stop_on_signals(stop)
    return shim.run(stop)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("NME_LOG_LEVEL", "INFO"),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    argv = list(sys.argv[1:] if argv is None else argv)
    prog = os.path.basename(sys.argv[0])
    if prog in functions.names():
        return functions.dispatch(argv, prog=prog)

    parser = argparse.ArgumentParser(prog="engine", description="NBMP media workflow engine")
    sub = parser.add_subparsers(dest="component", required=True)

    gateway_parser = sub.add_parser("gateway", help="NBMP workflow API gateway")
    gateway_parser.add_argument("--config", required=True)
    gateway_parser.add_argument("--snapshot", default="", help="store snapshot file")
    gateway_parser.add_argument("--apply", action="append", default=[],
                                help="resource YAML to load at startup (repeatable)")

    manager_parser = sub.add_parser("workflow-manager", help="controllers (and optionally the gateway)")
    manager_parser.add_argument("--config", required=True)
    manager_parser.add_argument("--apply", action="append", default=[],
                                help="resource YAML to load at startup (repeatable)")

    helper_parser = sub.add_parser("workflow-manager-helper", help="per-task sidecar")
    helper_parser.add_argument("--config", default="")
    helper_parser.add_argument("--data", default="", help="helper data file (default: NME_DATA_FILE)")

    shim_parser = sub.add_parser("task-shim", help="NBMP task API adapter")
    shim_parser.add_argument("--config", default="")

    functions_parser = sub.add_parser("functions", help="run a media function")
    functions_parser.add_argument("rest", nargs=argparse.REMAINDER)

    args = parser.parse_args(argv)
    try:
        if args.component == "gateway":
            return run_gateway(args)
        if args.component == "workflow-manager":
            return run_workflow_manager(args)
        if args.component == "workflow-manager-helper":
            return run_helper(args)
        if args.component == "task-shim":
            return run_task_shim(args)
        if args.component == "functions":
            return functions.dispatch(args.rest, prog="functions")
    except configmod.ConfigError as e:
        logger.error("configuration error: %s", e)
        return 1
    except OSError as e:
        logger.error("%s", e)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
