"""Binary checkpoint files: an 8-byte magic, a key=value text header and little-endian float32 arrays.

Layout::

    CNRF0001\\n
    schema=1\\n
    <key>=<value>\\n ...          free-form metadata, order preserved
    tensor=<name> <d0,d1,...>\\n ... one line per array, payload order
    payload_bytes=<n>\\n
    \\n
    <n bytes of '<f4' data>
"""

from __future__ import annotations

import dataclasses
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError

MAGIC = b"CNRF0001"
SCHEMA = "1"
_RESERVED = ("schema", "tensor", "payload_bytes")


@dataclass
class Checkpoint:
    meta: OrderedDict = field(default_factory=OrderedDict)
    tensors: OrderedDict = field(default_factory=OrderedDict)

    def to_bytes(self):
        lines = [f"schema={SCHEMA}"]
        for key, value in self.meta.items():
            value = str(value)
            if key in _RESERVED or "=" in key or "\n" in key or "\n" in value or not key:
                raise ContractError(f"invalid checkpoint header key/value {key!r}")
            lines.append(f"{key}={value}")
        payload = []
        for name, arr in self.tensors.items():
            if any(c.isspace() for c in name) or not name:
                raise ContractError(f"invalid tensor name {name!r}")
            arr = np.asarray(arr)
            if not np.all(np.isfinite(arr)):
                raise ContractError(f"tensor {name} has non-finite values")
            lines.append(f"tensor={name} {','.join(str(d) for d in arr.shape)}")
            payload.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        body = b"".join(payload)
        lines.append(f"payload_bytes={len(body)}")
        header = ("\n".join(lines) + "\n\n").encode("utf-8")
        return MAGIC + b"\n" + header + body

    @classmethod
    def from_bytes(cls, data, source="<bytes>"):
        if data[:8] != MAGIC:
            raise FormatError(f"{source}: bad magic {data[:8]!r}, expected {MAGIC!r}")
        end = data.find(b"\n\n", 9)
        if data[8:9] != b"\n" or end < 0:
            raise FormatError(f"{source}: truncated header")
        meta, specs, declared, schema = OrderedDict(), [], None, None
        try:
            text = data[9:end].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{source}: header is not UTF-8") from None
        for lineno, line in enumerate(text.split("\n"), start=2):
            key, sep, value = line.partition("=")
            if not sep:
                raise FormatError(f"{source}: header line {lineno} is not key=value")
            if key == "schema":
                schema = value
            elif key == "tensor":
                name, _, dims = value.partition(" ")
                try:
                    shape = tuple(int(d) for d in dims.split(",")) if dims else ()
                except ValueError:
                    raise FormatError(f"{source}: bad tensor shape on header line {lineno}") from None
                specs.append((name, shape))
            elif key == "payload_bytes":
                try:
                    declared = int(value)
                except ValueError:
                    raise FormatError(f"{source}: bad payload size on header line {lineno}") from None
            else:
                meta[key] = value
        if schema != SCHEMA:
            raise FormatError(f"{source}: unsupported schema {schema!r}")
        body = data[end + 2 :]
        expected = sum(4 * int(np.prod(s)) for _, s in specs)
        if declared != expected or len(body) != declared:
            raise FormatError(f"{source}: payload is {len(body)} bytes, header declares {declared} (shapes need {expected})")
        tensors, offset = OrderedDict(), 0
        for name, shape in specs:
            count = int(np.prod(shape))
            tensors[name] = np.frombuffer(body, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
            offset += 4 * count
        return cls(meta, tensors)


def save_checkpoint(path, checkpoint):
    Path(path).write_bytes(checkpoint.to_bytes())


def load_checkpoint(path):
    path = Path(path)
    return Checkpoint.from_bytes(path.read_bytes(), str(path))


# config <-> header helpers -------------------------------------------------


def config_to_meta(prefix, config):
    """Flatten a (possibly nested) config dataclass into ``prefix.field=value`` entries."""
    out = OrderedDict()
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        key = f"{prefix}.{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(config_to_meta(key, value))
        elif isinstance(value, (tuple, list)):
            out[key] = ",".join(repr(v) for v in value)
        else:
            out[key] = repr(value)
    return out


def _parse(text, template):
    if isinstance(template, bool):
        if text not in ("True", "False"):
            raise FormatError(f"bad boolean {text!r}")
        return text == "True"
    if isinstance(template, int):
        return int(text)
    if isinstance(template, float):
        return float(text)
    if isinstance(template, tuple):
        if not text:
            return ()
        kind = type(template[0]) if template else float
        return tuple(kind(v) for v in text.split(","))
    return text.strip("'\"")


def config_from_meta(cls, prefix, meta):
    """Inverse of :func:`config_to_meta`; missing keys keep the class defaults."""
    default = cls()
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = f"{prefix}.{f.name}"
        value = getattr(default, f.name)
        if dataclasses.is_dataclass(value):
            kwargs[f.name] = config_from_meta(type(value), key, meta)
        elif key in meta:
            try:
                kwargs[f.name] = _parse(meta[key], value)
            except ValueError:
                raise FormatError(f"bad value for {key}: {meta[key]!r}") from None
    return cls(**kwargs)


def module_tensors(prefix, module):
    return OrderedDict((f"{prefix}.{n}", np.asarray(v, dtype=np.float32)) for n, v in module.state_dict().items())


def load_module_tensors(prefix, module, tensors):
    start = prefix + "."
    module.load_state_dict({k[len(start) :]: v for k, v in tensors.items() if k.startswith(start)})
