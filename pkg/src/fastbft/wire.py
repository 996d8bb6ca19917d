"""Canonical binary encoding for dataclass records.

Every field is written as a 4-octet big-endian length followed by its body.
Integers are 8-octet big-endian (unsigned), booleans one octet, strings UTF-8.
Tuples carry a 4-octet element count.  ``Optional`` fields carry a presence
octet.  A type may define ``to_wire()``/``from_wire()`` to take over its body.
"""

from __future__ import annotations

import dataclasses
import struct
import sys
import types
import typing
from functools import lru_cache
from typing import Any, Union


class WireError(ValueError):
    pass


@lru_cache(maxsize=None)
def _fields(cls: type) -> tuple[tuple[str, Any], ...]:
    hints = typing.get_type_hints(cls, vars(sys.modules[cls.__module__]))
    return tuple((f.name, hints[f.name]) for f in dataclasses.fields(cls) if f.init)


def _is_optional(tp: Any) -> Any:
    origin = typing.get_origin(tp)
    if origin is Union or origin is types.UnionType:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1 and len(typing.get_args(tp)) == 2:
            return args[0]
    return None


def _frame(body: bytes) -> bytes:
    return struct.pack(">I", len(body)) + body


def encode_value(value: Any, tp: Any) -> bytes:
    inner = _is_optional(tp)
    if inner is not None:
        return b"\x00" if value is None else b"\x01" + encode_value(value, inner)
    if tp is bool:
        return b"\x01" if value else b"\x00"
    if tp is int:
        if value < 0:
            raise WireError(f"negative integer {value}")
        return struct.pack(">Q", value)
    if tp is bytes:
        return _frame(value)
    if tp is str:
        return _frame(value.encode())
    origin = typing.get_origin(tp)
    if origin is tuple:
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return struct.pack(">I", len(value)) + b"".join(encode_value(v, args[0]) for v in value)
        return b"".join(encode_value(v, a) for v, a in zip(value, args))
    if hasattr(tp, "to_wire"):
        return _frame(value.to_wire())
    if dataclasses.is_dataclass(tp):
        return _frame(encode_record(value))
    raise WireError(f"unsupported wire type {tp!r}")


def encode_record(obj: Any) -> bytes:
    return b"".join(encode_value(getattr(obj, name), tp) for name, tp in _fields(type(obj)))


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise WireError("truncated input")
        out = self.data[self.pos : self.pos + size]
        self.pos += size
        return out

    def framed(self) -> bytes:
        (size,) = struct.unpack(">I", self.take(4))
        return self.take(size)


def decode_value(reader: _Reader, tp: Any) -> Any:
    inner = _is_optional(tp)
    if inner is not None:
        flag = reader.take(1)
        return None if flag == b"\x00" else decode_value(reader, inner)
    if tp is bool:
        return reader.take(1) == b"\x01"
    if tp is int:
        return struct.unpack(">Q", reader.take(8))[0]
    if tp is bytes:
        return reader.framed()
    if tp is str:
        return reader.framed().decode()
    origin = typing.get_origin(tp)
    if origin is tuple:
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            (count,) = struct.unpack(">I", reader.take(4))
            return tuple(decode_value(reader, args[0]) for _ in range(count))
        return tuple(decode_value(reader, a) for a in args)
    if hasattr(tp, "from_wire"):
        return tp.from_wire(reader.framed())
    if dataclasses.is_dataclass(tp):
        return decode_record(tp, reader.framed())
    raise WireError(f"unsupported wire type {tp!r}")


def decode_record(cls: type, data: bytes) -> Any:
    reader = _Reader(data)
    values = {name: decode_value(reader, tp) for name, tp in _fields(cls)}
    if reader.pos != len(data):
        raise WireError("trailing bytes")
    return cls(**values)
