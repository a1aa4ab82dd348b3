"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"AAMGANCK"
    version      1 byte
    digest      32 bytes   sha256 of everything after this field
    header_len   u32
    header       JSON (utf-8, sorted keys): iteration, config snapshot text,
                 RNG state, optimiser step counters, block count
    blocks       repeated: name_len u16 | name | ndim u8 | dims u32*ndim |
                 float32 data

Blocks hold every network parameter/buffer (``G.*``, ``D.*``, ``head.*``)
and the optimiser moment tensors (``opt_g/<param>/exp_avg`` ...).
Serialisation is canonical, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .errors import CorruptCheckpoint, IOFailure, VersionMismatch
from .trainer import GanState, build_state

MAGIC = b"AAMGANCK"
FORMAT_VERSION = 1
_CONFIG_SECTIONS = ("model", "head", "train")


def _optimizer_blocks(prefix, opt, names):
    """Yield ``(block_name, tensor)`` and collect step counters."""
    steps = {}
    blocks = []
    params = [p for group in opt.param_groups for p in group["params"]]
    for name, p in zip(names, params):
        st = opt.state.get(p)
        if not st:
            continue
        for key in sorted(st):
            val = st[key]
            if key == "step":
                steps[name] = int(float(val))
            elif isinstance(val, torch.Tensor):
                blocks.append((f"{prefix}/{name}/{key}", val))
    return blocks, steps


def _param_names(state: GanState):
    g = [f"G.{n}" for n, _ in state.gen.named_parameters()]
    d = [f"D.{n}" for n, _ in state.disc.named_parameters()] + \
        [f"head.{n}" for n, _ in state.head.named_parameters()]
    return g, d


def encode(state: GanState) -> bytes:
    blocks = []
    for prefix, module in state.named_modules():
        for name, t in module.state_dict().items():
            blocks.append((f"{prefix}.{name}", t))
    g_names, d_names = _param_names(state)
    og, g_steps = _optimizer_blocks("opt_g", state.opt_g, g_names)
    od, d_steps = _optimizer_blocks("opt_d", state.opt_d, d_names)
    blocks += og + od

    cfg = config_mod.RunConfig(model=state.model_cfg, head=state.head_cfg, train=state.train_cfg)
    header = {
        "format_version": FORMAT_VERSION,
        "iteration": state.iteration,
        "optimizer": state.optimizer,
        "config": cfg.to_text(_CONFIG_SECTIONS),
        "rng": base64.b64encode(state.rng.get_state().numpy().tobytes()).decode("ascii"),
        "steps": {"opt_g": g_steps, "opt_d": d_steps},
        "blocks": len(blocks),
    }
    body = io.BytesIO()
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body.write(struct.pack("<I", len(head)))
    body.write(head)
    for name, t in blocks:
        raw = name.encode("utf-8")
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        body.write(struct.pack("<H", len(raw)))
        body.write(raw)
        body.write(struct.pack("<B", arr.ndim))
        body.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        body.write(np.ascontiguousarray(arr).tobytes())
    payload = body.getvalue()
    return MAGIC + bytes([FORMAT_VERSION]) + hashlib.sha256(payload).digest() + payload


def save_checkpoint(state: GanState, path) -> Path:
    path = Path(path)
    data = encode(state)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise IOFailure(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def _read_blocks(payload, offset, count):
    blocks = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", payload, offset)
            offset += 2
            name = payload[offset:offset + n].decode("utf-8")
            offset += n
            (ndim,) = struct.unpack_from("<B", payload, offset)
            offset += 1
            dims = struct.unpack_from(f"<{ndim}I", payload, offset)
            offset += 4 * ndim
            size = int(np.prod(dims, dtype=np.int64)) * 4
            if offset + size > len(payload):
                raise CorruptCheckpoint(f"block {name!r} truncated")
            arr = np.frombuffer(payload, dtype="<f4", count=size // 4, offset=offset).reshape(dims)
            offset += size
            blocks[name] = torch.from_numpy(arr.astype(np.float32))
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"malformed block table: {exc}") from exc
    if offset != len(payload):
        raise CorruptCheckpoint("trailing bytes after block table")
    return blocks


def decode(data: bytes):
    """Parse and verify checkpoint bytes; returns ``(header, blocks)``."""
    if len(data) < 41 or data[:8] != MAGIC:
        raise CorruptCheckpoint("not an aamgan checkpoint (bad magic)")
    version = data[8]
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint format {version}, expected {FORMAT_VERSION}")
    digest, payload = data[9:41], data[41:]
    if hashlib.sha256(payload).digest() != digest:
        raise CorruptCheckpoint("integrity digest mismatch")
    try:
        (hlen,) = struct.unpack_from("<I", payload, 0)
        header = json.loads(payload[4:4 + hlen].decode("utf-8"))
    except (struct.error, ValueError) as exc:
        raise CorruptCheckpoint(f"unreadable header: {exc}") from exc
    return header, _read_blocks(payload, 4 + hlen, header["blocks"])


def _restore_optimizer(opt, names, blocks, steps, prefix):
    params = [p for group in opt.param_groups for p in group["params"]]
    sd = opt.state_dict()
    state = {}
    for idx, (name, p) in enumerate(zip(names, params)):
        if name not in steps:
            continue
        entry = {"step": torch.tensor(float(steps[name]))}
        for key in ("exp_avg", "exp_avg_sq", "momentum_buffer"):
            block = blocks.pop(f"{prefix}/{name}/{key}", None)
            if block is not None:
                entry[key] = block.to(p.dtype)
        state[idx] = entry
    sd["state"] = state
    opt.load_state_dict(sd)


def state_from_bytes(data: bytes) -> GanState:
    header, blocks = decode(data)
    cfg = config_mod.loads(header["config"])
    state = build_state(cfg.model, cfg.head, cfg.train, optimizer=header.get("optimizer", "adam"))
    for prefix, module in state.named_modules():
        own = module.state_dict()
        loaded = {}
        for name, t in own.items():
            key = f"{prefix}.{name}"
            if key not in blocks:
                raise CorruptCheckpoint(f"missing block {key!r}")
            b = blocks.pop(key)
            if tuple(b.shape) != tuple(t.shape):
                raise CorruptCheckpoint(f"block {key!r} has shape {tuple(b.shape)}, expected {tuple(t.shape)}")
            loaded[name] = b.to(t.dtype)
        module.load_state_dict(loaded)
    g_names, d_names = _param_names(state)
    _restore_optimizer(state.opt_g, g_names, blocks, header["steps"]["opt_g"], "opt_g")
    _restore_optimizer(state.opt_d, d_names, blocks, header["steps"]["opt_d"], "opt_d")
    if blocks:
        raise CorruptCheckpoint(f"unexpected blocks: {sorted(blocks)[:3]}")
    rng = base64.b64decode(header["rng"])
    state.rng.set_state(torch.frombuffer(bytearray(rng), dtype=torch.uint8))
    state.iteration = int(header["iteration"])
    return state


def load_checkpoint(path) -> GanState:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IOFailure(f"cannot read checkpoint {path}: {exc}") from exc
    return state_from_bytes(data)


def checkpoint_digest(path) -> str:
    """Hex sha256 of the checkpoint file."""
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError as exc:
        raise IOFailure(f"cannot read checkpoint {path}: {exc}") from exc
