"""Tensor-bundle file format.

Layout: one UTF-8 JSON manifest line per tensor
    {"name": ..., "shape": [...], "dtype": "f64", "offset": ..., "len": ...}
then a single blank line, then the concatenated raw little-endian 64-bit
floats. `offset` and `len` are byte positions within the payload region.
Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import sys
from array import array
from typing import Mapping

from mea_lab.tensor import Tensor


class BundleError(ValueError):
    """Malformed bundle file or inconsistent manifest."""


def _payload_bytes(t: Tensor) -> bytes:
    arr = t.data
    if sys.byteorder == "big":
        arr = array("d", arr)
        arr.byteswap()
    return arr.tobytes()


def _floats_from(raw: bytes) -> array:
    arr = array("d")
    arr.frombytes(raw)
    if sys.byteorder == "big":
        arr.byteswap()
    return arr


def write_bundle(path: str, tensors: Mapping[str, Tensor]) -> None:
    entries = []
    payloads = []
    offset = 0
    for name, t in tensors.items():
        if "\n" in name:
            raise BundleError(f"tensor name {name!r} contains a newline")
        blob = _payload_bytes(t)
        entries.append({
            "name": name,
            "shape": list(t.shape),
            "dtype": "f64",
            "offset": offset,
            "len": len(blob),
        })
        payloads.append(blob)
        offset += len(blob)
    with open(path, "wb") as fh:
        for e in entries:
            fh.write(json.dumps(e, separators=(",", ":")).encode("utf-8"))
            fh.write(b"\n")
        fh.write(b"\n")
        for blob in payloads:
            fh.write(blob)


def read_manifest(path: str) -> list[dict]:
    """Manifest entries only (no payload decode)."""
    entries = []
    with open(path, "rb") as fh:
        for raw in fh:
            line = raw.rstrip(b"\n")
            if line == b"":
                return entries
            try:
                e = json.loads(line.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise BundleError(f"bad manifest line in {path}: {exc}") from exc
            for field in ("name", "shape", "dtype", "offset", "len"):
                if field not in e:
                    raise BundleError(f"manifest entry missing {field!r} in {path}")
            if e["dtype"] != "f64":
                raise BundleError(f"unsupported dtype {e['dtype']!r} in {path}")
            entries.append(e)
    raise BundleError(f"no blank line terminating manifest in {path}")


def read_bundle(path: str) -> dict[str, Tensor]:
    entries = read_manifest(path)
    if not entries:
        return {}
    with open(path, "rb") as fh:
        data = fh.read()
    sep = data.find(b"\n\n")
    if sep < 0:
        raise BundleError(f"no payload separator in {path}")
    payload = data[sep + 2:]
    out: dict[str, Tensor] = {}
    for e in entries:
        name, shape, off, ln = e["name"], e["shape"], e["offset"], e["len"]
        want = 8
        for s in shape:
            want *= s
        if ln != want:
            raise BundleError(
                f"tensor {name!r}: len {ln} != 8 * product(shape {shape})")
        if off < 0 or off + ln > len(payload):
            raise BundleError(f"tensor {name!r}: payload range out of bounds")
        if name in out:
            raise BundleError(f"duplicate tensor name {name!r}")
        out[name] = Tensor(shape, _floats_from(payload[off:off + ln]))
    return out
