"""Component configuration files.

All configuration files are YAML documents with an apiVersion/kind envelope.
load_config checks the kind, applies per-kind defaults and aggregates
validation errors. Component config dataclasses live with their components;
they register a decoder here.
"""

from __future__ import annotations

from typing import Any, Callable

import yaml

CONFIG_API_VERSION = "engine.nagare.media/v1alpha1"

KIND_GATEWAY = "GatewayNBMPConfig"
KIND_WORKFLOW_MANAGER = "WorkflowManagerConfig"
KIND_HELPER = "WorkflowManagerHelperConfig"
KIND_TASK_SHIM = "TaskShimConfig"


class ConfigError(Exception):
    pass


class WrongKind(ConfigError):
    pass


class InvalidConfig(ConfigError):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


_decoders: dict[str, Callable[[dict], Any]] = {}


def register_config_kind(kind: str, decoder: Callable[[dict], Any]) -> None:
    _decoders[kind] = decoder


def _ensure_decoders() -> None:
    # decoders register as an import side effect of their component modules
    import mediaengine.controllers.manager  # noqa: F401
    import mediaengine.gateway  # noqa: F401
    import mediaengine.helper  # noqa: F401
    import mediaengine.shim  # noqa: F401


def load_config_bytes(data: bytes, expected_kind: str) -> Any:
    try:
        doc = yaml.safe_load(data)
    except yaml.YAMLError as e:
        raise InvalidConfig([f"not valid YAML: {e}"]) from e
    if not isinstance(doc, dict):
        raise InvalidConfig(["config must be a mapping"])
    kind = doc.get("kind")
    if kind != expected_kind:
        raise WrongKind(f"expected kind {expected_kind}, got {kind!r}")
    if expected_kind not in _decoders:
        _ensure_decoders()
    decoder = _decoders.get(expected_kind)
    if decoder is None:
        raise ConfigError(f"no decoder registered for {expected_kind}")
    return decoder(doc)


def load_config(path: str, expected_kind: str) -> Any:
    """Load a config file; builtin:<name> resolves configs shipped inside the
    package (the analog of configuration baked into a container image)."""
    if path.startswith("builtin:"):
        from importlib import resources

        name = path[len("builtin:"):]
        data = resources.files("mediaengine.data").joinpath(f"task-shim-{name}.yaml").read_bytes()
        return load_config_bytes(data, expected_kind)
    with open(path, "rb") as f:
        return load_config_bytes(f.read(), expected_kind)


def webserver_from_dict(obj: dict | None, errors: list[str], prefix: str = "webserver"):
    """Decode a webserver section into a WebserverConfig with defaults."""
    from mediaengine.httpkit import WebserverConfig
    from mediaengine.runtime import BadDuration, parse_duration

    obj = obj or {}
    config = WebserverConfig()
    if "bindAddress" in obj:
        config.bind_address = str(obj["bindAddress"])
    if "network" in obj:
        config.network = str(obj["network"])
    if "publicBaseURL" in obj:
        config.public_base_url = str(obj["publicBaseURL"])
    for yaml_name, attr in (("idleTimeout", "idle_timeout"), ("readTimeout", "read_timeout"),
                            ("writeTimeout", "write_timeout")):
        if yaml_name in obj:
            try:
                setattr(config, attr, parse_duration(obj[yaml_name]))
            except BadDuration as e:
                errors.append(f"{prefix}.{yaml_name}: {e}")
    errors.extend(f"{prefix}.{e}" for e in config.validate())
    return config


def duration_field(obj: dict, key: str, default: float, errors: list[str], prefix: str = "") -> float:
    from mediaengine.runtime import BadDuration, parse_duration

    if key not in obj:
        return default
    try:
        return parse_duration(obj[key])
    except BadDuration as e:
        errors.append(f"{prefix}{key}: {e}")
        return default
