"""Binary storage of network controls.

Layout (all integers little-endian)::

    8 bytes   magic  b"LPCTRL\\0\\0"
    uint32    format version (1)
    uint32    q, N, n_f, n_c, d (parameters per layer)
    uint8     layer kind (0 dense, 1 conv)
    uint8     opening (0 identity, 1 dense)
    uint16    reserved (0)
    uint32    channels (0 for dense layers)
    float64[] NetworkControls.to_vector()
"""

from __future__ import annotations

import struct

import numpy as np

from .data import DataFormatError
from .network import Conv, DimensionError

MAGIC = b"LPCTRL\0\0"
VERSION = 1
_HEADER = struct.Struct("<8sI5IBBHI")
_KINDS = {"dense": 0, "conv": 1}


def _header_fields(net):
    channels = net.kind.channels if isinstance(net.kind, Conv) else 0
    return dict(q=net.width, N=net.n_layers, n_f=net.n_features, n_c=net.n_classes,
                d=net.kind.n_params, kind=_KINDS[net.kind.name],
                opening=int(net.opening == "dense"), channels=channels)


def save_controls(path, net, controls):
    net.check_controls(controls)
    h = _header_fields(net)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, h["q"], h["N"], h["n_f"], h["n_c"], h["d"],
                              h["kind"], h["opening"], 0, h["channels"]))
        fh.write(controls.to_vector().astype("<f8").tobytes())


def load_controls(path, net):
    """Read controls written by :func:`save_controls` for a network shaped like ``net``.

    Raises ``OSError`` for unreadable files, ``DataFormatError`` for corrupt
    ones and ``DimensionError`` when the stored shapes differ from ``net``.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise DataFormatError(f"{path}: truncated header ({len(raw)} of {_HEADER.size} bytes)")
    magic, version, q, N, n_f, n_c, d, kind, opening, _, channels = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataFormatError(f"{path}: not a controls file (bad magic at byte offset 0)")
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported format version {version}")
    found = dict(q=q, N=N, n_f=n_f, n_c=n_c, d=d, kind=kind, opening=opening, channels=channels)
    expected = _header_fields(net)
    diff = [f"{k}: expected {expected[k]}, found {found[k]}" for k in expected if expected[k] != found[k]]
    if diff:
        raise DimensionError(f"{path}: stored network does not match configuration ({'; '.join(diff)})")
    template = net.init_controls(np.random.default_rng(0), 0.0)
    payload = raw[_HEADER.size:]
    if len(payload) != 8 * template.size:
        raise DataFormatError(
            f"{path}: expected {8 * template.size} parameter bytes after offset {_HEADER.size}, "
            f"found {len(payload)}")
    return template.from_vector(np.frombuffer(payload, dtype="<f8").astype(float))
