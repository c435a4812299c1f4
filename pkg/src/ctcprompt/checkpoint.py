"""Bit-exact checkpoint files.

Layout: ``magic(8) | version u32 | header length u64 | JSON header | float64
payload | sha256 of everything before it``.  The header lists every tensor by
name, shape and payload offset; it also records the CTC blank index.
"""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from .decoder import DecoderOnlyModel
from .model import CtcPromptASR, ModelConfig, build_external_lm
from .tokenizer import BLANK, Tokenizer

MAGIC = b"CTCPCKPT"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")
_DIGEST = 32


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ParameterShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: object
    tokenizer: Tokenizer
    model_config: ModelConfig
    step: int
    seed: int
    header: dict
    optimizer_state: dict = None


def _model_kind(model):
    if isinstance(model, CtcPromptASR):
        return "asr"
    if isinstance(model, DecoderOnlyModel):
        return "lm"
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def save_checkpoint(path, model, tokenizer, step=0, seed=0, optimizer=None, train_config=None,
                    model_config=None):
    model_config = model_config or getattr(model, "model_config", None) or model.config
    if not isinstance(model_config, ModelConfig):
        raise TypeError("save_checkpoint needs the ModelConfig the model was built from")
    arrays, entries, offset = [], [], 0
    for name, p in model.named_parameters():
        entries.append({"name": name, "shape": list(p.data.shape), "offset": offset})
        arrays.append(p.data)
        offset += p.data.size
    opt_entry = None
    if optimizer is not None:
        state = optimizer.state_dict()
        opt_entry = {"step": state["step"], "offset": offset}
        for a in state["m"] + state["v"]:
            arrays.append(a)
            offset += a.size
    header = {
        "format_version": FORMAT_VERSION,
        "kind": _model_kind(model),
        "blank_index": BLANK,
        "vocab": tokenizer.to_text() if tokenizer is not None else None,
        "model_config": asdict(model_config),
        "train_config": asdict(train_config) if train_config is not None else None,
        "step": int(step),
        "seed": int(seed),
        "params": entries,
        "optimizer": opt_entry,
        "payload_values": offset,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    blob = _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(head)) + head + body
    with open(path, "wb") as f:
        f.write(blob + hashlib.sha256(blob).digest())


def read_checkpoint_header(path):
    header, _ = _read(path)
    return header


def _read(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _PREAMBLE.size + _DIGEST:
        raise CorruptCheckpointError(f"{path}: file truncated ({len(raw)} bytes)")
    magic, version, head_len = _PREAMBLE.unpack_from(raw)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path}: format version {version}, this build reads {FORMAT_VERSION}"
        )
    blob, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if hashlib.sha256(blob).digest() != digest:
        raise CorruptCheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    start = _PREAMBLE.size
    header = json.loads(blob[start:start + head_len].decode("utf-8"))
    payload = np.frombuffer(blob[start + head_len:], dtype="<f8")
    if payload.size != header["payload_values"]:
        raise CorruptCheckpointError(f"{path}: payload size mismatch")
    return header, payload


def _model_config(d):
    known = {f.name for f in fields(ModelConfig)}
    return ModelConfig(**{k: v for k, v in d.items() if k in known})


def load_checkpoint(path, model_config=None):
    """Rebuild the model; ``model_config`` overrides the stored one (shapes are checked)."""
    header, payload = _read(path)
    config = model_config or _model_config(header["model_config"])
    tokenizer = Tokenizer.from_text(header["vocab"]) if header["vocab"] is not None else None
    vocab_size = tokenizer.vocab_size if tokenizer else None
    if header["kind"] == "asr":
        model = CtcPromptASR(vocab_size, config)
    else:
        model = build_external_lm(vocab_size, config)
    named = dict(model.named_parameters())
    stored = {e["name"]: e for e in header["params"]}
    if set(named) != set(stored):
        missing = sorted(set(named) ^ set(stored))
        raise ParameterShapeError(f"parameter set mismatch: {missing[:5]}")
    for name, p in named.items():
        entry = stored[name]
        if tuple(entry["shape"]) != p.data.shape:
            raise ParameterShapeError(
                f"parameter {name}: checkpoint shape {tuple(entry['shape'])} "
                f"!= model shape {p.data.shape}"
            )
        n = p.data.size
        p.data = payload[entry["offset"]:entry["offset"] + n].reshape(p.data.shape).copy()
    opt_state = None
    if header["optimizer"] is not None:
        off = header["optimizer"]["offset"]
        m, v = [], []
        for bucket in (m, v):
            for name, p in model.named_parameters():
                n = p.data.size
                bucket.append(payload[off:off + n].reshape(p.data.shape).copy())
                off += n
        opt_state = {"step": header["optimizer"]["step"], "m": m, "v": v}
    return Checkpoint(model, tokenizer, config, header["step"], header["seed"], header, opt_state)
