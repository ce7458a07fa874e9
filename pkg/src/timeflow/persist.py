"""Single-file checkpoints: a text header followed by raw float64 arrays.

Layout::

    TIMEFLOW-CHECKPOINT\\n
    key=value\\n  ...           (UTF-8; floats written with float.hex)
    end_header\\n
    repeated for every name in the header's ``arrays`` list:
        uint32   name length in bytes
        bytes    name (UTF-8)
        uint32   ndim
        uint64   dim, ndim times
        float64  data, row-major

All integers and floats are little-endian. Besides the parameters, a
golden forward output is stored at save time and re-checked on load.
"""

from __future__ import annotations

import struct
from pathlib import Path
from urllib.parse import quote, unquote

import numpy as np

from .errors import CheckpointError, UnsupportedVersionError
from .meta import AdamState
from .model import ModelConfig, TimeFlowModel

MAGIC = "TIMEFLOW-CHECKPOINT"
FORMAT_VERSION = 1
GOLDEN_POINTS = 17
GOLDEN_TOL = 1e-12


def _golden_inputs(config: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    coords = np.linspace(0.0, 1.0, GOLDEN_POINTS)
    code = np.linspace(-1.0, 1.0, config.latent_dim)
    return coords, code


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(model: TimeFlowModel, path, adam: AdamState | None = None, seed: int | None = None) -> None:
    cfg = model.config
    arrays: dict[str, np.ndarray] = dict(model.named_parameters())
    if adam is not None and adam.step_count > 0:
        for k in model.named_parameters():
            arrays[f"adam.m.{k}"] = adam.first_moment[k]
            arrays[f"adam.v.{k}"] = adam.second_moment[k]
    coords, code = _golden_inputs(cfg)
    arrays["golden.output"] = model.batch_forward(coords, code)

    header = [MAGIC, f"format_version={FORMAT_VERSION}"]
    header += [
        f"num_frequencies={cfg.num_frequencies}",
        f"depth={cfg.depth}",
        f"hidden_dim={cfg.hidden_dim}",
        f"latent_dim={cfg.latent_dim}",
        f"max_frequency_index={'none' if cfg.max_frequency_index is None else cfg.max_frequency_index}",
        f"seed={'none' if seed is None else int(seed)}",
    ]
    if adam is not None and adam.step_count > 0:
        header += [
            f"adam.step={adam.step_count}",
            f"adam.beta1={float(adam.beta1).hex()}",
            f"adam.beta2={float(adam.beta2).hex()}",
            f"adam.epsilon={float(adam.epsilon).hex()}",
        ]
    for sid, (mean, std) in model.norm_stats.items():
        header.append(f"norm.{quote(sid, safe='')}={float(mean).hex()},{float(std).hex()}")
    for key, value in model.metadata.items():
        header.append(f"meta.{quote(key, safe='')}={quote(str(value), safe='')}")
    header.append("arrays=" + ",".join(quote(n, safe="") for n in arrays))
    header.append("end_header")

    blob = ("\n".join(header) + "\n").encode("utf-8")
    blob += b"".join(_pack_array(name, arr) for name, arr in arrays.items())
    Path(path).write_bytes(blob)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated file, missing entry {what!r}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def _parse_header(lines: list[str], path) -> dict[str, str]:
    out = {}
    for line in lines:
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"{path}: malformed header line {line!r}")
        out[key] = value
    return out


def _int_or_none(text: str):
    return None if text == "none" else int(text)


def load_checkpoint(path, verify_golden: bool = True) -> tuple[TimeFlowModel, AdamState | None]:
    """Read a checkpoint; the optimizer state is None when none was saved."""
    data = Path(path).read_bytes()
    marker = b"\nend_header\n"
    end = data.find(marker)
    if not data.startswith(MAGIC.encode()):
        raise CheckpointError(f"{path}: not a checkpoint file")
    if end < 0:
        raise CheckpointError(f"{path}: truncated file, missing entry 'end_header'")
    lines = data[:end].decode("utf-8").split("\n")[1:]
    header = _parse_header(lines, path)
    version = header.get("format_version")
    if version != str(FORMAT_VERSION):
        raise UnsupportedVersionError(f"{path}: unsupported checkpoint format version {version!r}")
    try:
        config = ModelConfig(
            num_frequencies=int(header["num_frequencies"]),
            depth=int(header["depth"]),
            hidden_dim=int(header["hidden_dim"]),
            latent_dim=int(header["latent_dim"]),
            max_frequency_index=_int_or_none(header["max_frequency_index"]),
        )
        names = [unquote(n) for n in header["arrays"].split(",") if n]
    except KeyError as exc:
        raise CheckpointError(f"{path}: header lacks {exc.args[0]!r}") from None

    reader = _Reader(data, path)
    reader.pos = end + len(marker)
    arrays: dict[str, np.ndarray] = {}
    for name in names:
        (nlen,) = struct.unpack("<I", reader.take(4, name))
        stored = reader.take(nlen, name).decode("utf-8")
        if stored != name:
            raise CheckpointError(f"{path}: expected array {name!r}, found {stored!r}")
        (ndim,) = struct.unpack("<I", reader.take(4, name))
        shape = struct.unpack(f"<{ndim}Q", reader.take(8 * ndim, name))
        count = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(reader.take(8 * count, name), dtype="<f8").reshape(shape).astype(np.float64)
    if reader.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - reader.pos} trailing bytes")

    norm_stats = {}
    metadata = {}
    for key, value in header.items():
        if key.startswith("norm."):
            mean, std = value.split(",")
            norm_stats[unquote(key[5:])] = (float.fromhex(mean), float.fromhex(std))
        elif key.startswith("meta."):
            metadata[unquote(key[5:])] = unquote(value)
    try:
        model = TimeFlowModel.from_named_parameters(config, arrays, norm_stats=norm_stats, metadata=metadata)
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing parameter {exc.args[0]!r}") from None
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from None

    adam = None
    if "adam.step" in header:
        adam = AdamState(
            first_moment={k: arrays[f"adam.m.{k}"] for k in model.named_parameters()},
            second_moment={k: arrays[f"adam.v.{k}"] for k in model.named_parameters()},
            step_count=int(header["adam.step"]),
            beta1=float.fromhex(header["adam.beta1"]),
            beta2=float.fromhex(header["adam.beta2"]),
            epsilon=float.fromhex(header["adam.epsilon"]),
        )

    if verify_golden and "golden.output" in arrays:
        coords, code = _golden_inputs(config)
        out = model.batch_forward(coords, code)
        if not np.allclose(out, arrays["golden.output"], rtol=0.0, atol=GOLDEN_TOL):
            raise CheckpointError(f"{path}: forward output does not reproduce the stored golden values")
    return model, adam


def checkpoint_seed(path) -> int | None:
    data = Path(path).read_bytes()
    end = data.find(b"\nend_header\n")
    header = _parse_header(data[:end].decode("utf-8").split("\n")[1:], path)
    return _int_or_none(header.get("seed", "none"))
