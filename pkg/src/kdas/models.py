"""Small convolutional teacher/student segmentation models.

Encoder-decoder networks over numpy float64 arrays, emitting two square
logit maps per image: scale 1 at stride 8 and scale 2 at stride 4. The
backward pass is hand-written (im2col convolutions with scatter-add
adjoints), so training needs no autodiff framework.

Checkpoints are a binary format: magic ``KDAS1``, a 4-byte little-endian
header length, a JSON header (dtype, model config, metadata, per-parameter
name/shape/offset), then the raw little-endian float32 payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

MAGIC = b"KDAS1"
CHECKPOINT_DTYPE = "<f4"

TEACHER_WIDTHS = (32, 64, 128)
STUDENT_WIDTHS = (8, 16, 32)


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class ManifestError(CheckpointError):
    """Header is missing, malformed, or inconsistent with the architecture."""


class OffsetError(CheckpointError):
    """Parameter byte offsets overlap or leave gaps."""


class PayloadError(CheckpointError):
    """Payload length disagrees with the manifest (e.g. truncated file)."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; widths are the three encoder widths."""

    input_side: int
    channel_widths: tuple
    seed: int = 0
    scales_emitted: tuple = (1, 2)

    def __post_init__(self):
        object.__setattr__(self, "channel_widths", tuple(int(w) for w in self.channel_widths))
        if self.input_side <= 0 or self.input_side % 8 != 0:
            raise ValueError(f"input_side must be a positive multiple of 8, got {self.input_side}")
        if len(self.channel_widths) != 3 or any(w < 1 for w in self.channel_widths):
            raise ValueError(f"channel_widths must be 3 positive ints, got {self.channel_widths}")
        if tuple(self.scales_emitted) != (1, 2):
            raise ValueError("models emit exactly scales (1, 2)")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")


@dataclass
class Checkpoint:
    """Parsed checkpoint: JSON-able manifest plus raw float32 payload."""

    manifest: dict
    payload: bytes = field(repr=False)


def teacher_config(input_side: int = 64, seed: int = 0) -> ModelConfig:
    return ModelConfig(input_side, TEACHER_WIDTHS, seed)


def student_config(input_side: int = 64, seed: int = 0) -> ModelConfig:
    return ModelConfig(input_side, STUDENT_WIDTHS, seed)


# ------------------------------------------------------------------- layers

def _im2col(x: np.ndarray, stride: int):
    """Gather 3x3 patches (pad 1) into (B, C*9, out_h*out_w) columns."""
    b, c, h, w = x.shape
    out_h, out_w = h // stride, w // stride
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((b, c, 9, out_h, out_w), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, ky * 3 + kx] = xp[
                :, :, ky : ky + stride * out_h : stride, kx : kx + stride * out_w : stride
            ]
    return cols.reshape(b, c * 9, out_h * out_w), (out_h, out_w)


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int):
    """3x3 convolution, padding 1. Returns output and a cache for backward."""
    cols, (out_h, out_w) = _im2col(x, stride)
    c_out = w.shape[0]
    wf = w.reshape(c_out, -1)
    y = np.matmul(wf, cols) + b[:, None]
    y = y.reshape(x.shape[0], c_out, out_h, out_w)
    return y, (cols, x.shape, w, stride)


def conv_backward(dy: np.ndarray, cache):
    """Adjoint of conv_forward. Returns (dx, dw, db)."""
    cols, x_shape, w, stride = cache
    batch, c_in, h, width = x_shape
    c_out = w.shape[0]
    out_h, out_w = dy.shape[2], dy.shape[3]
    dyf = dy.reshape(batch, c_out, -1)
    dw = np.einsum("bop,bip->oi", dyf, cols).reshape(w.shape)
    db = dyf.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(c_out, -1).T, dyf)
    dcols = dcols.reshape(batch, c_in, 9, out_h, out_w)
    dxp = np.zeros((batch, c_in, h + 2, width + 2))
    for ky in range(3):
        for kx in range(3):
            dxp[
                :, :, ky : ky + stride * out_h : stride, kx : kx + stride * out_w : stride
            ] += dcols[:, :, ky * 3 + kx]
    return dxp[:, :, 1:-1, 1:-1], dw, db


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0.0), x > 0.0


def relu_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dy * mask


def upsample2_forward(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbor 2x upsampling on the spatial axes."""
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample2_backward(dy: np.ndarray) -> np.ndarray:
    b, c, h, w = dy.shape
    return dy.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# -------------------------------------------------------------------- model

def _layer_specs(widths):
    """(name, c_in, c_out, stride) per layer, in parameter order."""
    w1, w2, w3 = widths
    return (
        ("enc1", 3, w1, 2),
        ("enc2", w1, w2, 2),
        ("enc3", w2, w3, 2),
        ("mid", w3, w2, 1),
        ("head1", w2, 1, 1),
        ("dec", w2, w1, 1),
        ("head2", w1, 1, 1),
    )


def _init_params(config: ModelConfig) -> dict:
    """Fan-in-scaled uniform init, drawn in float64 then squeezed through
    float32 so a fresh model round-trips bitwise through a checkpoint."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, c_in, c_out, _ in _layer_specs(config.channel_widths):
        bound = 1.0 / np.sqrt(c_in * 9)
        w = rng.uniform(-bound, bound, size=(c_out, c_in, 3, 3))
        b = rng.uniform(-bound, bound, size=(c_out,))
        params[f"{name}.w"] = w.astype(np.float32).astype(np.float64)
        params[f"{name}.b"] = b.astype(np.float32).astype(np.float64)
    return params


def _expected_shapes(config: ModelConfig) -> dict:
    shapes = {}
    for name, c_in, c_out, _ in _layer_specs(config.channel_widths):
        shapes[f"{name}.w"] = (c_out, c_in, 3, 3)
        shapes[f"{name}.b"] = (c_out,)
    return shapes


class SegModel:
    """Two-headed encoder-decoder over (B, S, S, 3) images in [0, 1].

    forward returns ``{1: (B, S/8, S/8), 2: (B, S/4, S/4)}`` logit maps.
    ``meta`` carries checkpoint metadata when loaded from disk.
    """

    def __init__(self, config: ModelConfig, params: dict | None = None):
        self.config = config
        self.params = params if params is not None else _init_params(config)
        self.meta: dict = {}
        expected = _expected_shapes(config)
        if set(self.params) != set(expected):
            raise ValueError("parameter names do not match the architecture")
        for name, shape in expected.items():
            if tuple(self.params[name].shape) != shape:
                raise ValueError(f"parameter {name} has shape {self.params[name].shape}, "
                                 f"expected {shape}")

    def _check_images(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        if x.ndim != 4 or x.shape[3] != 3:
            raise ValueError(f"images must be (B, S, S, 3), got {x.shape}")
        if x.shape[1] != x.shape[2]:
            raise ValueError(f"images must be square, got {x.shape}")
        if x.shape[1] != self.config.input_side:
            raise ValueError(
                f"model built for side {self.config.input_side}, got {x.shape[1]}"
            )
        return np.ascontiguousarray(x.transpose(0, 3, 1, 2))

    def forward(self, images) -> dict:
        maps, _ = self.forward_with_cache(images)
        return maps

    def forward_with_cache(self, images):
        """Forward pass keeping every intermediate needed by backward."""
        p = self.params
        x = self._check_images(images)
        strides = {name: s for name, _, _, s in _layer_specs(self.config.channel_widths)}

        c1, k1 = conv_forward(x, p["enc1.w"], p["enc1.b"], strides["enc1"])
        h1, m1 = relu_forward(c1)
        c2, k2 = conv_forward(h1, p["enc2.w"], p["enc2.b"], strides["enc2"])
        h2, m2 = relu_forward(c2)
        c3, k3 = conv_forward(h2, p["enc3.w"], p["enc3.b"], strides["enc3"])
        h3, m3 = relu_forward(c3)
        cm, km = conv_forward(h3, p["mid.w"], p["mid.b"], strides["mid"])
        hm, mm = relu_forward(cm)
        z1, kh1 = conv_forward(hm, p["head1.w"], p["head1.b"], strides["head1"])
        u = upsample2_forward(hm) + h2
        cd, kd = conv_forward(u, p["dec.w"], p["dec.b"], strides["dec"])
        hd, md = relu_forward(cd)
        z2, kh2 = conv_forward(hd, p["head2.w"], p["head2.b"], strides["head2"])

        maps = {1: z1[:, 0], 2: z2[:, 0]}
        cache = (k1, m1, k2, m2, k3, m3, km, mm, kh1, kd, md, kh2)
        return maps, cache

    def backward(self, cache, d_maps: Mapping) -> dict:
        """Parameter gradients given gradients of the two logit maps."""
        k1, m1, k2, m2, k3, m3, km, mm, kh1, kd, md, kh2 = cache
        grads = {}

        dz2 = np.asarray(d_maps[2], dtype=np.float64)[:, None]
        dhd, grads["head2.w"], grads["head2.b"] = conv_backward(dz2, kh2)
        dcd = relu_backward(dhd, md)
        du, grads["dec.w"], grads["dec.b"] = conv_backward(dcd, kd)

        dz1 = np.asarray(d_maps[1], dtype=np.float64)[:, None]
        dhm, grads["head1.w"], grads["head1.b"] = conv_backward(dz1, kh1)
        dhm = dhm + upsample2_backward(du)
        dcm = relu_backward(dhm, mm)
        dh3, grads["mid.w"], grads["mid.b"] = conv_backward(dcm, km)
        dc3 = relu_backward(dh3, m3)
        dh2, grads["enc3.w"], grads["enc3.b"] = conv_backward(dc3, k3)
        dh2 = dh2 + du  # skip connection
        dc2 = relu_backward(dh2, m2)
        dh1, grads["enc2.w"], grads["enc2.b"] = conv_backward(dc2, k2)
        dc1 = relu_backward(dh1, m1)
        _, grads["enc1.w"], grads["enc1.b"] = conv_backward(dc1, k1)
        return grads

    def map_sides(self) -> dict:
        s = self.config.input_side
        return {1: s // 8, 2: s // 4}


def build_model(config: ModelConfig) -> SegModel:
    """Deterministically initialized model for the given config."""
    return SegModel(config)


def param_count(model_or_params) -> int:
    """Total scalar parameter count of a model or a name->array mapping."""
    params = model_or_params.params if isinstance(model_or_params, SegModel) else model_or_params
    return int(sum(np.asarray(v).size for v in params.values()))


# -------------------------------------------------------------- checkpoints

def _manifest_for(model: SegModel, meta: dict | None) -> tuple:
    entries = []
    offset = 0
    blobs = []
    for name, arr in model.params.items():
        raw = np.ascontiguousarray(arr, dtype=CHECKPOINT_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += len(raw)
        blobs.append(raw)
    manifest = {
        "dtype": CHECKPOINT_DTYPE,
        "config": {
            "input_side": model.config.input_side,
            "channel_widths": list(model.config.channel_widths),
            "seed": model.config.seed,
        },
        "meta": dict(meta) if meta else {},
        "params": entries,
    }
    return manifest, b"".join(blobs)


def save_checkpoint(model: SegModel, path, meta: dict | None = None) -> Checkpoint:
    """Write the model to ``path``; returns the parsed Checkpoint."""
    manifest, payload = _manifest_for(model, meta if meta is not None else model.meta)
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)
    return Checkpoint(manifest=manifest, payload=payload)


def _read_manifest(blob: bytes) -> tuple:
    if len(blob) < len(MAGIC) + 4:
        raise ManifestError("file too short to hold a checkpoint header")
    if blob[: len(MAGIC)] != MAGIC:
        raise ManifestError(f"bad magic bytes {blob[:len(MAGIC)]!r}")
    (header_len,) = struct.unpack("<I", blob[len(MAGIC) : len(MAGIC) + 4])
    start = len(MAGIC) + 4
    if len(blob) < start + header_len:
        raise ManifestError("declared header length exceeds file size")
    try:
        manifest = json.loads(blob[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"header is not valid JSON: {exc}") from exc
    return manifest, blob[start + header_len :]


def _validate_manifest(manifest: dict, payload: bytes):
    for key in ("dtype", "config", "params"):
        if key not in manifest:
            raise ManifestError(f"manifest missing key {key!r}")
    if manifest["dtype"] != CHECKPOINT_DTYPE:
        raise ManifestError(f"unsupported dtype {manifest['dtype']!r}")
    names = [e.get("name") for e in manifest["params"]]
    if len(names) != len(set(names)):
        raise ManifestError("duplicate parameter names in manifest")
    running = 0
    for entry in manifest["params"]:
        if not isinstance(entry.get("shape"), list) or "offset" not in entry:
            raise ManifestError(f"malformed parameter entry {entry!r}")
        if entry["offset"] != running:
            raise OffsetError(
                f"parameter {entry['name']!r} at offset {entry['offset']}, expected {running}"
            )
        running += int(np.prod(entry["shape"], dtype=np.int64)) * 4
    if len(payload) != running:
        raise PayloadError(f"payload holds {len(payload)} bytes, manifest expects {running}")


def read_checkpoint(path) -> Checkpoint:
    """Parse and validate a checkpoint file without building a model."""
    with open(path, "rb") as fh:
        blob = fh.read()
    manifest, payload = _read_manifest(blob)
    _validate_manifest(manifest, payload)
    return Checkpoint(manifest=manifest, payload=payload)


def load_checkpoint(path) -> SegModel:
    """Rebuild a model from a checkpoint file, validating before reading."""
    ckpt = read_checkpoint(path)
    cfg_raw = ckpt.manifest["config"]
    try:
        config = ModelConfig(
            input_side=cfg_raw["input_side"],
            channel_widths=tuple(cfg_raw["channel_widths"]),
            seed=cfg_raw.get("seed", 0),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"bad model config in manifest: {exc}") from exc
    expected = _expected_shapes(config)
    params = {}
    for entry in ckpt.manifest["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in expected:
            raise ManifestError(f"unknown parameter {name!r} for this architecture")
        if shape != expected[name]:
            raise ManifestError(f"parameter {name!r} has shape {shape}, expected {expected[name]}")
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(
            ckpt.payload, dtype=CHECKPOINT_DTYPE, count=count, offset=entry["offset"]
        )
        params[name] = arr.reshape(shape).astype(np.float64)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        raise ManifestError(f"manifest missing parameters: {missing}")
    model = SegModel(config, params)
    model.meta = dict(ckpt.manifest.get("meta", {}))
    return model


def checkpoint_digest(path) -> str:
    """SHA-256 of the checkpoint file bytes."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
