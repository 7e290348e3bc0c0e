import dataclasses
import os

import torch

from .errors import ConfigError

FORMAT = "pwsynth-checkpoint"
VERSION = 1


def save(path, kind, config, modules, extra=None):
    """Write named weight arrays plus the config that built them."""
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "config": dataclasses.asdict(config) if dataclasses.is_dataclass(config) else dict(config),
        "state": {name: m.state_dict() for name, m in modules.items()},
    }
    if extra:
        payload["extra"] = extra
    tmp = f"{path}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load(path, kind):
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise ConfigError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise ConfigError(f"{path}: not a {FORMAT} file")
    if payload.get("version") != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    if payload.get("kind") != kind:
        raise ConfigError(f"{path}: holds a {payload.get('kind')!r} checkpoint, expected {kind!r}")
    return payload
