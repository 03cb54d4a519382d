"""AlexNet feature extractor ending in a 768-d projection, plus weight files.

Layer names follow the classic AlexNet stages so that converted torchvision
checkpoints map one-to-one (see :func:`from_torchvision_state`).
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
import zlib
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import (
    ConfigError,
    CorruptionError,
    FormatError,
    IncompatibleWeightsError,
    ShapeError,
)

FEATURE_DIM = 768
TRUNK_DIM = 4096

# (name, out_ch, in_ch, kernel, stride, pad, pool_after)
CONV_LAYERS = (
    ("conv1", 64, 3, 11, 4, 2, True),
    ("conv2", 192, 64, 5, 1, 2, True),
    ("conv3", 384, 192, 3, 1, 1, False),
    ("conv4", 256, 384, 3, 1, 1, False),
    ("conv5", 256, 256, 3, 1, 1, True),
)
FC_LAYERS = (("fc6", 256 * 6 * 6, TRUNK_DIM), ("fc7", TRUNK_DIM, TRUNK_DIM))
TRUNK_NAMES = tuple(
    f"{name}.{part}" for name, *_ in CONV_LAYERS + FC_LAYERS for part in ("weight", "bias")
)


@dataclass
class BackboneConfig:
    pretrained: bool = True
    feature_dim: int = FEATURE_DIM
    dropout_rate: float = 0.5
    weights_path: str | None = None

    def __post_init__(self):
        if self.pretrained and not self.weights_path:
            raise ConfigError("pretrained backbone requires weights_path")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


def kaiming_uniform(rng, shape, fan_in, gain=math.sqrt(2.0), dtype=np.float32):
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class AlexNet:
    """Five conv stages, two 4096-unit dense layers, then fc(4096 -> feature_dim).

    The trunk is everything up to the ReLU after ``fc7``; ``proj`` is the
    768-d projection that replaces the removed 1000-way classifier.
    """

    def __init__(self, cfg: BackboneConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.params = ad.ParamStore()
        rng = np.random.default_rng(seed)
        for name, oc, ic, k, *_ in CONV_LAYERS:
            fan_in = ic * k * k
            self.params.add(f"{name}.weight", kaiming_uniform(rng, (oc, ic, k, k), fan_in), dtype)
            self.params.add(f"{name}.bias", np.zeros(oc), dtype)
        for name, fi, fo in FC_LAYERS + (("proj", TRUNK_DIM, cfg.feature_dim),):
            self.params.add(f"{name}.weight", kaiming_uniform(rng, (fi, fo), fi), dtype)
            self.params.add(f"{name}.bias", np.zeros(fo), dtype)
        if cfg.pretrained:
            load_weights(cfg.weights_path, self, require_all=False)

    def trunk_names(self):
        return [n for n in self.params if not n.startswith("proj.")]

    def projection_names(self):
        return [n for n in self.params if n.startswith("proj.")]

    def trunk(self, x: ad.Tensor, train: bool = False, rng=None, trace=None) -> ad.Tensor:
        """(n, 3, 224, 224) -> (n, 4096).  ``trace`` collects per-stage shapes."""
        if x.data.ndim != 4 or x.shape[1:] != (3, 224, 224):
            raise ShapeError(f"backbone expects (n, 3, 224, 224), got {x.shape}")
        p = self.params
        h = x
        for name, _, _, _, stride, pad, pool in CONV_LAYERS:
            h = ad.relu(ad.conv2d(h, p[f"{name}.weight"], p[f"{name}.bias"], stride, pad))
            if trace is not None:
                trace.append((name, h.shape))
            if pool:
                h = ad.maxpool2d(h, 3, 2)
                if trace is not None:
                    trace.append((f"{name}.pool", h.shape))
        h = ad.flatten(h)
        if trace is not None:
            trace.append(("flatten", h.shape))
        for name, *_ in FC_LAYERS:
            h = ad.dropout(h, self.cfg.dropout_rate, rng, train)
            h = ad.relu(ad.linear(h, p[f"{name}.weight"], p[f"{name}.bias"]))
        return h

    def project(self, h: ad.Tensor) -> ad.Tensor:
        return ad.linear(h, self.params["proj.weight"], self.params["proj.bias"])

    def __call__(self, x, train=False, rng=None) -> ad.Tensor:
        return self.project(self.trunk(ad.as_tensor(x), train, rng))


def build_alexnet(cfg: BackboneConfig, seed: int = 0, dtype=np.float32) -> AlexNet:
    return AlexNet(cfg, seed, dtype)


def extract_features(net: AlexNet, image, train_mode: bool = False, rng=None) -> ad.Tensor:
    """One image (3, 224, 224) or a batch (n, 3, 224, 224) -> (n, 768) features."""
    arr = image.pixels if hasattr(image, "pixels") else image
    data = arr.data if isinstance(arr, ad.Tensor) else np.asarray(arr)
    if data.ndim == 3:
        data = data[None]
    if data.shape[1:] != (3, 224, 224):
        raise ShapeError(f"image must be 3x224x224, got {data.shape}")
    x = arr if isinstance(arr, ad.Tensor) and arr.data.ndim == 4 else ad.Tensor(data.astype(_dtype(net)))
    return net(x, train=train_mode, rng=rng)


def _dtype(net):
    return net.params["conv1.weight"].data.dtype


# -------------------------------------------------------------- weight files

_MAGIC = b"HWTS"
_VERSION = 1


def encode_weights(tensors) -> bytes:
    out = bytearray(_MAGIC)
    out += struct.pack("<II", _VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded)) + encoded
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


def decode_weights(data: bytes) -> OrderedDict:
    if len(data) < 16 or data[:4] != _MAGIC:
        raise FormatError("not an HWTS weights file")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise CorruptionError("weights file checksum mismatch")
    version, count = struct.unpack("<II", data[4:12])
    if version != _VERSION:
        raise FormatError(f"unsupported weights version {version}")
    pos, end = 12, len(data) - 4
    tensors = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2 : pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
            pos += 1 + 4 * ndim
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > end:
                raise FormatError(f"tensor {name!r} runs past end of file")
            if name in tensors:
                raise FormatError(f"duplicate tensor name {name!r}")
            tensors[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape)
            pos += nbytes
    except struct.error as exc:
        raise FormatError(f"truncated weights file: {exc}") from None
    if pos != end:
        raise FormatError(f"{end - pos} trailing bytes after last tensor")
    return tensors


def save_state(tensors, path) -> None:
    path = Path(path)
    blob = encode_weights(tensors)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_state(path) -> OrderedDict:
    return decode_weights(Path(path).read_bytes())


def save_weights(net, path, names=None) -> None:
    store = net.params if hasattr(net, "params") else net
    keep = set(names) if names is not None else None
    save_state(OrderedDict((k, t.data) for k, t in store.items() if keep is None or k in keep), path)


def load_weights(path, net, require_all: bool = True):
    """Load a weights file into ``net``; nothing is modified unless every tensor fits."""
    store = net.params if hasattr(net, "params") else net
    tensors = read_state(path)
    for name, arr in tensors.items():
        if name not in store:
            raise IncompatibleWeightsError(f"unknown tensor {name!r} in {path}")
        if tuple(arr.shape) != store[name].shape:
            raise IncompatibleWeightsError(
                f"tensor {name!r}: file shape {tuple(arr.shape)} != model shape {store[name].shape}"
            )
    if require_all:
        missing = [n for n in store if n not in tensors]
        if missing:
            raise IncompatibleWeightsError(f"{path} lacks tensors {missing}")
    for name, arr in tensors.items():
        t = store[name]
        t.data = arr.astype(t.data.dtype, copy=True)
        t.grad = None
    return net


_TORCHVISION_MAP = {
    "features.0": "conv1",
    "features.3": "conv2",
    "features.6": "conv3",
    "features.8": "conv4",
    "features.10": "conv5",
    "classifier.1": "fc6",
    "classifier.4": "fc7",
}


def from_torchvision_state(state) -> OrderedDict:
    """Map a torchvision AlexNet state dict (arrays) onto trunk tensor names.

    Dense weights are transposed to (in, out); the 1000-way classifier
    (``classifier.6``) is dropped.
    """
    out = OrderedDict()
    for key, value in state.items():
        prefix, _, part = key.rpartition(".")
        if prefix not in _TORCHVISION_MAP:
            continue
        arr = np.asarray(value, dtype=np.float32)
        name = _TORCHVISION_MAP[prefix]
        if name.startswith("fc") and part == "weight":
            arr = arr.T
        out[f"{name}.{part}"] = np.ascontiguousarray(arr)
    missing = [n for n in TRUNK_NAMES if n not in out]
    if missing:
        raise IncompatibleWeightsError(f"checkpoint lacks {missing}")
    return out
