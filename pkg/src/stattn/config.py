"""Line-oriented ``key = value`` configuration files for dataclass configs."""

from __future__ import annotations

from dataclasses import asdict, fields

from .autodiff import UsageError


def config_to_text(obj) -> str:
    return "".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n" for k, v in asdict(obj).items())


def parse_config_text(text: str, cls):
    """Parse ``key = value`` lines into a dataclass, coercing by field type."""
    kinds = {f.name: f.type for f in fields(cls)}
    values = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or key not in kinds:
            raise UsageError(f"bad config line: {raw!r}")
        values[key] = coerce(val, kinds[key])
    return cls(**values)


def coerce(text: str, kind) -> object:
    kind = kind if isinstance(kind, str) else kind.__name__
    if kind == "bool":
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"not a boolean: {text!r}")
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return text
