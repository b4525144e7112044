"""Self-describing checkpoint files.

Layout: an ASCII header, a text manifest of key=value lines (flat config,
run metadata, and one line per tensor giving shape/dtype/offset/bytes),
then a raw little-endian blob of all tensors back to back. Loading
reproduces every array bit-exactly.
"""

import ast
import io

import numpy as np

from .errors import DataError

MAGIC = "DYNSLIMCKPT 1"


def save_checkpoint(path, config_flat, meta, arrays):
    """arrays: ordered name -> ndarray (float32/float64)."""
    manifest = io.StringIO()
    for key in sorted(config_flat):
        manifest.write(f"config.{key}={config_flat[key]!r}\n")
    for key in sorted(meta):
        manifest.write(f"meta.{key}={meta[key]!r}\n")
    blob = io.BytesIO()
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype == np.float64:
            raw = arr.astype("<f8", copy=False)
        elif arr.dtype == np.float32:
            raw = arr.astype("<f4", copy=False)
        else:
            raise DataError(f"checkpoint: unsupported dtype {arr.dtype} "
                            f"for {name}")
        data = raw.tobytes()
        shape = ",".join(str(d) for d in arr.shape)
        manifest.write(f"tensor.{name}={shape}|{raw.dtype.str}|{offset}|"
                       f"{len(data)}\n")
        blob.write(data)
        offset += len(data)
    mbytes = manifest.getvalue().encode()
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC}\n".encode())
        fh.write(f"manifest_bytes={len(mbytes)}\n".encode())
        fh.write(mbytes)
        fh.write(blob.getvalue())


def load_checkpoint(path):
    """Returns (config_flat, meta, arrays)."""
    with open(path, "rb") as fh:
        magic = fh.readline().decode().strip()
        if magic != MAGIC:
            raise DataError(f"{path}: not a checkpoint (magic {magic!r})")
        head = fh.readline().decode().strip()
        if not head.startswith("manifest_bytes="):
            raise DataError(f"{path}: corrupt header")
        mbytes = int(head.split("=", 1)[1])
        manifest = fh.read(mbytes).decode()
        blob = fh.read()
    config_flat, meta, arrays = {}, {}, {}
    for line in manifest.splitlines():
        key, _, value = line.partition("=")
        if key.startswith("config."):
            config_flat[key[len("config."):]] = ast.literal_eval(value)
        elif key.startswith("meta."):
            meta[key[len("meta."):]] = ast.literal_eval(value)
        elif key.startswith("tensor."):
            name = key[len("tensor."):]
            shape_s, dtype_s, off_s, nbytes_s = value.split("|")
            shape = tuple(int(d) for d in shape_s.split(",") if d)
            off, nbytes = int(off_s), int(nbytes_s)
            arr = np.frombuffer(blob[off:off + nbytes],
                                dtype=np.dtype(dtype_s)).reshape(shape)
            arrays[name] = arr.copy()
        else:
            raise DataError(f"{path}: unknown manifest entry {key!r}")
    return config_flat, meta, arrays


def model_config_from_flat(config_flat):
    """Rebuild a ModelConfig (with router settings) from the flat dict."""
    from .config import ModelConfig, RouterConfig
    model_kwargs = {}
    router_kwargs = {}
    for key, value in config_flat.items():
        section, _, name = key.partition(".")
        if section == "model":
            if isinstance(value, list):
                value = tuple(value)
            model_kwargs[name] = value
        elif section == "router":
            router_kwargs[name] = value
    cfg = ModelConfig(**model_kwargs, router=RouterConfig(**router_kwargs))
    cfg.validate()
    return cfg
