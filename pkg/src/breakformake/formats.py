"""Binary adapter files and seed-based task files.

Layout shared by both kinds::

    magic      4 bytes   b"PLPA" (adapter) or b"PLPT" (task)
    version    u32 LE    currently 1
    hdr_len    u32 LE    length of the UTF-8 JSON header that follows
    header     hdr_len bytes
    blocks     (adapter files only) for each block named in header["blocks"]:
                   rows u32 LE, cols u32 LE, count u64 LE,
                   count float64 LE values in row-major order

Task files carry no blocks: the task is regenerated from its parameters and
the SHA-256 of the regenerated ``W0`` must match the stored checksum.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .plp import (
    APPROX,
    EXACT,
    DownHalf,
    FrozenTamperError,
    PlainLoraAdapter,
    PlpAdapter,
    UpHalf,
    check_frozen,
    frozen_blocks,
    orth_leakage,
)
from .synth import SynthTask, gen_task

ADAPTER_MAGIC = b"PLPA"
TASK_MAGIC = b"PLPT"
FORMAT_VERSION = 1

_BLOCKS = {
    "plp": ("A", "B", "C", "D"),
    "plain": ("W_up", "W_down"),
    "plp-up": ("A", "B"),
    "plp-down": ("C", "D"),
}


class FormatError(ValueError):
    """Malformed, truncated or version-mismatched file."""


def _tuplify(history) -> tuple:
    return tuple(history or ())


def _pack(magic: bytes, header: dict, blocks: list[np.ndarray]) -> bytes:
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [magic, struct.pack("<II", FORMAT_VERSION, len(hdr)), hdr]
    for arr in blocks:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        rows, cols = arr.shape
        parts.append(struct.pack("<IIQ", rows, cols, arr.size))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def _unpack(data: bytes, magic: bytes) -> tuple[dict, int]:
    if len(data) < 12 or data[:4] != magic:
        raise FormatError(f"bad magic: expected {magic!r}")
    version, hdr_len = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    end = 12 + hdr_len
    if len(data) < end:
        raise FormatError("truncated header")
    try:
        header = json.loads(data[12:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from exc
    return header, end


def _read_blocks(data: bytes, offset: int, names) -> dict[str, np.ndarray]:
    out = {}
    for name in names:
        if len(data) < offset + 16:
            raise FormatError(f"truncated before block {name}")
        rows, cols, count = struct.unpack_from("<IIQ", data, offset)
        offset += 16
        if count != rows * cols:
            raise FormatError(f"block {name}: count {count} != {rows}x{cols}")
        nbytes = 8 * count
        if len(data) < offset + nbytes:
            raise FormatError(f"truncated block {name}")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(rows, cols)
        out[name] = arr.astype(np.float64, copy=True)
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes")
    return out


# --- adapters ---------------------------------------------------------------


def adapter_to_bytes(obj: PlpAdapter | PlainLoraAdapter | UpHalf | DownHalf) -> bytes:
    if isinstance(obj, PlainLoraAdapter):
        kind = "plain"
        header = {"kind": kind, "m": obj.m, "n": obj.n, "r": obj.r}
    else:
        kind = {PlpAdapter: "plp", UpHalf: "plp-up", DownHalf: "plp-down"}[type(obj)]
        header = {"kind": kind, "m": obj.m, "n": obj.n, "r": obj.r, "d": obj.d,
                  "init_mode": obj.init_mode, "frozen_seed": obj.frozen_seed, "eps_orth": obj.eps_orth}
    header.update(tag=obj.tag, history=list(obj.history), blocks=list(_BLOCKS[kind]))
    return _pack(ADAPTER_MAGIC, header, [getattr(obj, b) for b in _BLOCKS[kind]])


def _verify_frozen(header: dict, A: np.ndarray | None, C: np.ndarray | None) -> None:
    d, r, mode, seed = header["d"], header["r"], header["init_mode"], header["frozen_seed"]
    if mode not in (EXACT, APPROX):
        raise FormatError(f"unknown init_mode {mode!r}")
    A_ref, C_ref = frozen_blocks(d, r, mode, seed)
    check_frozen(A_ref if A is None else A, C_ref if C is None else C, d, r, mode, seed)
    leak = orth_leakage(A_ref if A is None else A, C_ref if C is None else C)
    bound = 0.0 if mode == EXACT else float(header["eps_orth"])
    if leak > bound:
        raise FrozenTamperError("corrupt or tampered frozen blocks")


def adapter_from_bytes(data: bytes):
    header, offset = _unpack(data, ADAPTER_MAGIC)
    kind = header.get("kind")
    if kind not in _BLOCKS:
        raise FormatError(f"unknown adapter kind {kind!r}")
    if header.get("blocks") != list(_BLOCKS[kind]):
        raise FormatError(f"block list {header.get('blocks')} does not match kind {kind}")
    blocks = _read_blocks(data, offset, _BLOCKS[kind])
    tag, history = header.get("tag", ""), _tuplify(header.get("history"))
    m, n, r = header["m"], header["n"], header["r"]
    if kind == "plain":
        return PlainLoraAdapter(m, n, r, blocks["W_up"], blocks["W_down"], tag, history)
    try:
        _verify_frozen(header, blocks.get("A"), blocks.get("C"))
    except ValueError as exc:
        if isinstance(exc, FrozenTamperError):
            raise
        raise FrozenTamperError("corrupt or tampered frozen blocks") from exc
    common = dict(m=m, n=n, r=r, d=header["d"], init_mode=header["init_mode"],
                  frozen_seed=header["frozen_seed"], eps_orth=header["eps_orth"], tag=tag, history=history)
    if kind == "plp":
        return PlpAdapter(A=blocks["A"], B=blocks["B"], C=blocks["C"], D=blocks["D"], **common)
    if kind == "plp-up":
        return UpHalf(A=blocks["A"], B=blocks["B"], **common)
    return DownHalf(C=blocks["C"], D=blocks["D"], **common)


def save_adapter(obj, path) -> None:
    Path(path).write_bytes(adapter_to_bytes(obj))


def load_adapter(path):
    return adapter_from_bytes(Path(path).read_bytes())


# --- tasks --------------------------------------------------------------------


def w0_checksum(task: SynthTask) -> str:
    return hashlib.sha256(np.ascontiguousarray(task.W0, dtype="<f8").tobytes()).hexdigest()


def task_params(task: SynthTask) -> dict:
    return {"m": task.m, "n": task.n, "num_contents": task.num_contents, "num_styles": task.num_styles,
            "gt_rank": task.gt_rank, "seed": task.seed, "base_scale": task.base_scale}


def task_to_bytes(task: SynthTask) -> bytes:
    return _pack(TASK_MAGIC, {"params": task_params(task), "w0_sha256": w0_checksum(task)}, [])


def task_from_bytes(data: bytes) -> SynthTask:
    header, offset = _unpack(data, TASK_MAGIC)
    if offset != len(data):
        raise FormatError("trailing bytes after task header")
    try:
        task = gen_task(**header["params"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"invalid task parameters: {exc}") from exc
    if w0_checksum(task) != header.get("w0_sha256"):
        raise FormatError("task checksum mismatch: regenerated W0 differs from the stored checksum")
    return task


def save_task(task: SynthTask, path) -> None:
    Path(path).write_bytes(task_to_bytes(task))


def load_task(path) -> SynthTask:
    return task_from_bytes(Path(path).read_bytes())
