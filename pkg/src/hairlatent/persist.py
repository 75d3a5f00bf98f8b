"""On-disk formats: raw tensors with a JSON header, PNG images, label maps."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

from .core import CLASS_NAMES, SemanticLabel, as_numpy

_DTYPES = {"f32": "<f4", "f64": "<f8"}


def save_tensor(directory, name: str, value, dtype: str = "f32") -> Path:
    """Write ``value`` as ``<directory>/<name>/{header.json,data.bin}``."""
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    arr = np.ascontiguousarray(as_numpy(value), dtype=_DTYPES[dtype])
    entry = Path(directory) / name
    entry.mkdir(parents=True, exist_ok=True)
    header = {
        "name": name,
        "dtype": dtype,
        "shape": list(arr.shape),
        "layout": "row-major",
        "endianness": "little",
    }
    (entry / "data.bin").write_bytes(arr.tobytes(order="C"))
    (entry / "header.json").write_text(json.dumps(header, indent=2))
    return entry


def load_tensor(entry, as_torch: bool = True, torch_dtype=torch.float64):
    entry = Path(entry)
    header = json.loads((entry / "header.json").read_text())
    if header.get("layout") != "row-major" or header.get("endianness") != "little":
        raise ValueError(f"{entry}: unsupported layout/endianness in header")
    dt = _DTYPES.get(header["dtype"])
    if dt is None:
        raise ValueError(f"{entry}: unsupported dtype {header['dtype']!r}")
    arr = np.frombuffer((entry / "data.bin").read_bytes(), dtype=dt)
    arr = arr.reshape(header["shape"]).copy()
    if as_torch:
        return torch.as_tensor(arr.astype(np.float64)).to(torch_dtype)
    return arr


def tensor_exists(entry) -> bool:
    entry = Path(entry)
    return (entry / "header.json").is_file() and (entry / "data.bin").is_file()


def read_image(path, resolution: int | None = None) -> torch.Tensor:
    """Load an RGB image as an H×W×3 float64 tensor in [0, 1]."""
    with PILImage.open(path) as im:
        im = im.convert("RGB")
        if resolution is not None and im.size != (resolution, resolution):
            im = im.resize((resolution, resolution), PILImage.BILINEAR)
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return torch.as_tensor(arr)


def write_image(path, img) -> Path:
    arr = as_numpy(img)
    arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(arr, mode="RGB").save(path)
    return path


def _palette(n: int) -> list[int]:
    rng = np.random.default_rng(1234)
    colors = rng.integers(0, 256, size=(256, 3), dtype=np.uint8)
    colors[0] = 0
    return colors.reshape(-1).tolist()


def write_label_png(path, label: SemanticLabel, class_names=CLASS_NAMES) -> Path:
    """Indexed-color PNG plus a sibling ``.json`` label table."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    im = PILImage.fromarray(label.data.astype(np.uint8), mode="P")
    im.putpalette(_palette(label.n_classes))
    im.save(path)
    table = {"n_classes": label.n_classes, "classes": list(class_names)}
    path.with_suffix(".json").write_text(json.dumps(table, indent=2))
    return path


def read_label_png(path) -> SemanticLabel:
    path = Path(path)
    table = json.loads(path.with_suffix(".json").read_text())
    with PILImage.open(path) as im:
        data = np.asarray(im, dtype=np.int64)
    return SemanticLabel(data, table["n_classes"])


def write_json_atomic(path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path
