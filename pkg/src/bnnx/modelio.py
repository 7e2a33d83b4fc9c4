"""Bit-exact model files, extractor bundles, feature caches and dataset parsers.

Model file layout (all integers little-endian)::

    b"BNNX" | u16 format_version | u32 layer_count | layer records...

Each record starts with a one-byte kind tag followed by the kind's geometry
integers and parameter blobs. Binary weights are stored as the packed
64-bit words used by the XNOR kernel (pre-transposed, LSB-first, zeroed
tails); float blobs are float32, row-major. Binary layers may additionally
carry their float32 latent weights so training can resume.
"""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    FingerprintMismatchError,
    FormatError,
    HeaderError,
    ManifestError,
    ShapeError,
    TruncatedError,
    UnknownKindError,
    UnsupportedTypeError,
    VersionError,
)
from .layers import (
    BatchNorm,
    BatchNormState,
    BinaryConv2d,
    BinaryDense,
    Dense,
    Flatten,
    MaxPool2d,
    ShiftFold,
    Sign,
)
from .model import Model
from .tensors import BitMatrix, ConvGeometry, pack_signs, unpack

MAGIC = b"BNNX"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sHI")

KIND_TAGS = {"BinaryDense": 1, "BinaryConv2d": 2, "Dense": 3, "BatchNorm": 4, "Sign": 5, "MaxPool2d": 6, "Flatten": 7}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}

_HAS_LATENT = 1
_HAS_SHIFT = 1
_USE_SHIFT = 2


def fingerprint(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def pack(self, fmt, *vals):
        self.buf.write(struct.pack("<" + fmt, *vals))

    def f32(self, arr):
        self.buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    def words(self, bm: BitMatrix):
        self.buf.write(np.ascontiguousarray(bm.bits, dtype="<u8").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedError(f"need {n} bytes at offset {self.pos}, only {len(self.data) - self.pos} left")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def array(self, dtype, count, shape=None):
        dt = np.dtype(dtype)
        arr = np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()
        if dt.kind == "f" and not np.all(np.isfinite(arr)):
            raise FormatError("non-finite value in float blob")
        return arr.reshape(shape) if shape is not None else arr

    def dims(self, count):
        vals = self.unpack("I" * count)
        if any(v < 1 for v in vals):
            raise FormatError(f"layer dimensions must be positive, got {vals}")
        return vals

    @property
    def remaining(self):
        return len(self.data) - self.pos


def _write_binary_words(w: _Writer, latent2d, include_latent):
    w.pack("B", _HAS_LATENT if include_latent else 0)
    w.words(pack_signs(latent2d))
    if include_latent:
        w.f32(latent2d)


def _read_binary_weights(r: _Reader, rows, cols):
    (flags,) = r.unpack("B")
    if flags & ~_HAS_LATENT:
        raise FormatError(f"unknown binary-layer flags {flags:#x}")
    wpr = (cols + 63) // 64
    if rows * wpr * 8 > r.remaining:
        raise TruncatedError("binary weight words run past the end of the file")
    words = r.array("<u8", rows * wpr, (rows, wpr)).astype(np.uint64)
    try:
        bits = BitMatrix.from_words(rows, cols, words)
    except ShapeError as exc:
        raise FormatError(str(exc)) from exc
    if flags & _HAS_LATENT:
        latent = r.array("<f4", rows * cols, (rows, cols)).astype(np.float32)
        if pack_signs(latent) != bits:
            raise FormatError("binary weight words disagree with the stored latent weights")
        return latent
    return unpack(bits).astype(np.float32)


def save_model(model: Model, include_latent: bool = True) -> bytes:
    """Serialize ``model``. With ``include_latent=False`` binary layers keep only their bits."""
    w = _Writer()
    w.buf.write(HEADER.pack(MAGIC, FORMAT_VERSION, len(model.layers)))
    for layer in model.layers:
        if layer.kind not in KIND_TAGS:
            raise FormatError(f"layer kind {layer.kind!r} is not serializable")
        w.pack("B", KIND_TAGS[layer.kind])
        if isinstance(layer, BinaryDense):
            w.pack("II", layer.in_features, layer.out_features)
            _write_binary_words(w, layer.weight, include_latent)
        elif isinstance(layer, BinaryConv2d):
            g = layer.geometry
            w.pack("IIIIII", g.in_channels, g.out_channels, g.kernel_h, g.kernel_w, g.stride, g.padding)
            _write_binary_words(w, layer.weight.reshape(g.out_channels, -1), include_latent)
        elif isinstance(layer, Dense):
            w.pack("II", layer.in_features, layer.out_features)
            w.f32(layer.weight)
            w.f32(layer.bias)
        elif isinstance(layer, BatchNorm):
            s = layer.state
            flags = (_HAS_SHIFT if layer.shift is not None else 0) | (_USE_SHIFT if layer.use_shift else 0)
            w.pack("IddB", s.channels, s.momentum, s.eps, flags)
            for arr in (s.gamma, s.beta, s.running_mean, s.running_var):
                w.f32(arr)
            if layer.shift is not None:
                w.buf.write(np.ascontiguousarray(layer.shift.exponent, dtype="<i4").tobytes())
                w.buf.write(np.ascontiguousarray(layer.shift.sign, dtype="i1").tobytes())
                w.f32(layer.shift.offset)
        elif isinstance(layer, MaxPool2d):
            w.pack("II", layer.window, layer.stride)
    return w.buf.getvalue()


def _read_layer(r: _Reader, tag: int):
    kind = TAG_KINDS.get(tag)
    if kind is None:
        raise UnknownKindError(f"unknown layer kind tag {tag}")
    if kind == "BinaryDense":
        fin, fout = r.dims(2)
        return BinaryDense(fin, fout, weight=_read_binary_weights(r, fout, fin))
    if kind == "BinaryConv2d":
        cin, cout, kh, kw, stride = r.dims(5)
        (pad,) = r.unpack("I")
        try:
            g = ConvGeometry(cin, cout, kh, kw, stride, pad)
        except ShapeError as exc:
            raise FormatError(str(exc)) from exc
        weight = _read_binary_weights(r, cout, g.patch_size).reshape(cout, cin, kh, kw)
        return BinaryConv2d(g, weight=weight)
    if kind == "Dense":
        fin, fout = r.dims(2)
        if 4 * (fin * fout + fout) > r.remaining:
            raise TruncatedError("dense weights run past the end of the file")
        weight = r.array("<f4", fin * fout, (fout, fin)).astype(np.float32)
        bias = r.array("<f4", fout).astype(np.float32)
        return Dense(fin, fout, weight=weight, bias=bias)
    if kind == "BatchNorm":
        (c,) = r.dims(1)
        momentum, eps, flags = r.unpack("ddB")
        if not (0 < momentum < 1) or not (np.isfinite(eps) and eps > 0):
            raise FormatError(f"invalid batch norm hyperparameters momentum={momentum} eps={eps}")
        if flags & ~(_HAS_SHIFT | _USE_SHIFT) or (flags & _USE_SHIFT and not flags & _HAS_SHIFT):
            raise FormatError(f"invalid batch norm flags {flags:#x}")
        if 16 * c > r.remaining:
            raise TruncatedError("batch norm tensors run past the end of the file")
        gamma, beta, mean, var = (r.array("<f4", c).astype(np.float32) for _ in range(4))
        if np.any(var < 0):
            raise FormatError("negative running variance")
        layer = BatchNorm(state=BatchNormState(gamma, beta, mean, var, momentum, eps))
        if flags & _HAS_SHIFT:
            exponent = r.array("<i4", c).astype(np.int32)
            sign = r.array("i1", c).astype(np.int8)
            if np.any(np.abs(sign) > 1):
                raise FormatError("shift sign must be -1, 0 or 1")
            layer.shift = ShiftFold(exponent, sign, r.array("<f4", c).astype(np.float32))
            layer.use_shift = bool(flags & _USE_SHIFT)
        return layer
    if kind == "MaxPool2d":
        window, stride = r.dims(2)
        return MaxPool2d(window, stride)
    return Sign() if kind == "Sign" else Flatten()


def load_model(data: bytes) -> Model:
    """Parse a model file; every malformation raises a :class:`FormatError` subclass."""
    data = bytes(data)
    if len(data) < HEADER.size:
        if not MAGIC.startswith(data[:4]):
            raise BadMagicError("not a BNNX model file")
        raise TruncatedError(f"header needs {HEADER.size} bytes, got {len(data)}")
    magic, version, count = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    r = _Reader(data)
    r.pos = HEADER.size
    if count > r.remaining:
        raise TruncatedError(f"{count} layers declared but only {r.remaining} bytes follow")
    layers = []
    for _ in range(count):
        (tag,) = r.unpack("B")
        layers.append(_read_layer(r, tag))
    if r.remaining:
        raise FormatError(f"{r.remaining} trailing bytes after the last layer")
    return Model(layers)


def save_model_file(model: Model, path, force: bool = False, include_latent: bool = True) -> bytes:
    blob = save_model(model, include_latent=include_latent)
    write_bytes(path, blob, force)
    return blob


def load_model_file(path) -> Model:
    return load_model(Path(path).read_bytes())


def write_bytes(path, data: bytes, force: bool = False):
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass force to overwrite")
    path.write_bytes(data)


# ---------------------------------------------------------------------------
# Extractor bundles
# ---------------------------------------------------------------------------

BUNDLE_FORMAT = "bnnx-extractor/1"


@dataclass
class ExtractorBundle:
    blob: bytes
    manifest: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.blob)

    def extractor(self) -> Model:
        """Load the frozen extractor, refusing a blob that does not match the manifest."""
        expected = self.manifest.get("fingerprint")
        if expected != self.fingerprint:
            raise FingerprintMismatchError(f"blob fingerprint {self.fingerprint} != manifest {expected}")
        return load_model(self.blob)


def export_extractor(split, fold_shifts: bool = False, input_shape=None, num_classes: int | None = None,
                     head_kind: str | None = None) -> ExtractorBundle:
    """Pack the frozen prefix of ``split`` into an inference-only blob plus manifest.

    Binary layers keep only their bits; batch norms keep running statistics
    and, with ``fold_shifts``, the folded power-of-two scales used at inference.
    """
    if len(split.head) == 0:
        raise ManifestError("cannot describe a head with zero layers")
    ext = Model([layer for layer in split.extractor]).copy()
    ext.set_shift_mode(fold_shifts)
    blob = save_model(ext, include_latent=False)
    head = split.head[-1]
    manifest = {
        "format": BUNDLE_FORMAT,
        "fingerprint": fingerprint(blob),
        "split_index": str(split.split_index),
        "fold_shifts": "1" if fold_shifts else "0",
        "extractor_bytes": str(len(blob)),
        "head_kind": head_kind or ("binary" if isinstance(head, BinaryDense) else "float"),
        "head_layers": str(len(split.head)),
    }
    if input_shape is not None:
        feat = ext.output_shape(input_shape)
        manifest["input_shape"] = "x".join(str(int(s)) for s in input_shape)
        manifest["feature_dim"] = str(int(np.prod(feat)))
    if num_classes is None and hasattr(head, "out_features"):
        num_classes = head.out_features
    if num_classes is not None:
        manifest["num_classes"] = str(int(num_classes))
    return ExtractorBundle(blob, manifest)


def format_manifest(manifest: dict) -> str:
    lines = ["# bnnx extractor bundle"]
    for key, value in manifest.items():
        if "\n" in str(value) or "=" in key:
            raise ManifestError(f"invalid manifest entry {key!r}")
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ManifestError(f"line {lineno}: expected key=value")
        out[key.strip()] = value.strip()
    if out.get("format") != BUNDLE_FORMAT:
        raise ManifestError(f"unsupported bundle format {out.get('format')!r}")
    if "fingerprint" not in out:
        raise ManifestError("manifest lacks an extractor fingerprint")
    return out


def save_bundle(bundle: ExtractorBundle, prefix, force: bool = False) -> tuple[Path, Path]:
    """Write ``prefix.bnnx`` and ``prefix.manifest``."""
    prefix = Path(prefix)
    blob_path = prefix.with_name(prefix.name + ".bnnx")
    man_path = prefix.with_name(prefix.name + ".manifest")
    manifest = dict(bundle.manifest, extractor=blob_path.name)
    for p in (blob_path, man_path):
        if p.exists() and not force:
            raise FileExistsError(f"{p} exists; pass force to overwrite")
    blob_path.write_bytes(bundle.blob)
    man_path.write_text(format_manifest(manifest))
    return blob_path, man_path


def load_bundle(manifest_path) -> ExtractorBundle:
    manifest_path = Path(manifest_path)
    manifest = parse_manifest(manifest_path.read_text())
    blob_name = manifest.get("extractor")
    if not blob_name:
        raise ManifestError("manifest does not name its extractor blob")
    blob = (manifest_path.parent / blob_name).read_bytes()
    return ExtractorBundle(blob, manifest)


# ---------------------------------------------------------------------------
# Feature caches
# ---------------------------------------------------------------------------

FEATURE_MAGIC = b"BNNF"
_FEATURE_HEADER = struct.Struct("<4sH32sII")


def save_features(cache) -> bytes:
    feats = np.ascontiguousarray(cache.features, dtype="<f8")
    n, dim = feats.shape
    digest = bytes.fromhex(cache.fingerprint)
    head = _FEATURE_HEADER.pack(FEATURE_MAGIC, FORMAT_VERSION, digest, n, dim)
    return head + feats.tobytes() + np.ascontiguousarray(cache.labels, dtype="<i4").tobytes()


def load_features(data: bytes):
    from .transfer import FeatureCache

    data = bytes(data)
    if len(data) < _FEATURE_HEADER.size:
        raise TruncatedError("feature cache header truncated")
    magic, version, digest, n, dim = _FEATURE_HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise BadMagicError(f"bad feature cache magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported feature cache version {version}")
    r = _Reader(data)
    r.pos = _FEATURE_HEADER.size
    if n * dim * 8 + n * 4 != r.remaining:
        raise TruncatedError("feature cache payload length does not match its header")
    feats = r.array("<f8", n * dim, (n, dim)).astype(np.float64)
    labels = r.array("<i4", n).astype(np.int64)
    return FeatureCache(feats, labels, digest.hex())


# ---------------------------------------------------------------------------
# IDX tensors
# ---------------------------------------------------------------------------

IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
_IDX_CODES = {np.dtype(v).str.lstrip("<>|"): k for k, v in IDX_TYPES.items()}


@dataclass
class IdxDataset:
    type_code: int
    dims: tuple
    data: np.ndarray

    def to_float(self) -> np.ndarray:
        """Float64 view; uint8 payloads are scaled by 1/255 into [0, 1]."""
        if self.type_code == 0x08:
            return self.data.astype(np.float64) / 255.0
        return self.data.astype(np.float64)


def parse_idx(data: bytes) -> IdxDataset:
    data = bytes(data)
    if len(data) < 4:
        raise TruncatedError("IDX header needs 4 bytes")
    if data[0] != 0 or data[1] != 0:
        raise BadMagicError(f"IDX magic must start with two zero bytes, got {data[:2]!r}")
    code, ndim = data[2], data[3]
    if code not in IDX_TYPES:
        raise UnsupportedTypeError(f"unsupported IDX element type {code:#04x}")
    if ndim == 0:
        raise HeaderError("IDX tensor needs at least one dimension")
    if len(data) < 4 + 4 * ndim:
        raise TruncatedError("IDX dimension list truncated")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    dt = np.dtype(IDX_TYPES[code])
    need = int(np.prod(dims, dtype=object)) * dt.itemsize
    payload = len(data) - 4 - 4 * ndim
    if payload < need:
        raise TruncatedError(f"IDX payload has {payload} bytes, header implies {need}")
    if payload > need:
        raise HeaderError(f"IDX payload has {payload - need} bytes beyond its declared size")
    arr = np.frombuffer(data, dtype=dt, offset=4 + 4 * ndim).reshape(dims)
    return IdxDataset(code, tuple(dims), arr.astype(dt.newbyteorder("=")))


def write_idx(array) -> bytes:
    arr = np.asarray(array)
    key = arr.dtype.str.lstrip("<>|=")
    if key not in _IDX_CODES:
        raise UnsupportedTypeError(f"no IDX type code for dtype {arr.dtype}")
    code = _IDX_CODES[key]
    head = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=IDX_TYPES[code]).tobytes()


def load_idx_dataset(images_path, labels_path):
    """Read an IDX image/label pair into a :class:`~bnnx.training.Dataset` (N x C x H x W in [0, 1])."""
    from .training import Dataset

    images = parse_idx(Path(images_path).read_bytes())
    labels = parse_idx(Path(labels_path).read_bytes())
    x = images.to_float()
    if x.ndim == 3:
        x = x[:, None]
    elif x.ndim == 2:
        pass
    elif x.ndim != 4:
        raise ShapeError(f"IDX images must have rank 2, 3 or 4, got {x.ndim}")
    if labels.data.ndim != 1:
        raise ShapeError("IDX labels must be rank 1")
    return Dataset(x, labels.data.astype(np.int64))


# ---------------------------------------------------------------------------
# netpbm
# ---------------------------------------------------------------------------

_PNM_CHANNELS = {b"P5": 1, b"P6": 3}
_WS = b" \t\n\r\v\f"


@dataclass
class PnmImage:
    format: str
    width: int
    height: int
    maxval: int
    pixels: bytes

    @property
    def channels(self) -> int:
        return _PNM_CHANNELS[self.format.encode()]

    def to_tensor(self) -> np.ndarray:
        """C x H x W float64 in [0, 1]."""
        arr = np.frombuffer(self.pixels, dtype=np.uint8).reshape(self.height, self.width, self.channels)
        return arr.transpose(2, 0, 1).astype(np.float64) / self.maxval


def _pnm_tokens(data: bytes, count: int, pos: int):
    out = []
    n = len(data)
    while len(out) < count:
        while pos < n and (data[pos] in _WS or data[pos] == ord("#")):
            if data[pos] == ord("#"):
                while pos < n and data[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and data[pos] not in _WS and data[pos] != ord("#"):
            pos += 1
        if start == pos:
            raise HeaderError("netpbm header ends early")
        tok = data[start:pos]
        if not tok.isdigit():
            raise HeaderError(f"expected a decimal number in netpbm header, got {tok[:16]!r}")
        out.append(int(tok))
    return out, pos


def parse_pnm(data: bytes) -> PnmImage:
    data = bytes(data)
    magic = data[:2]
    if len(magic) < 2 or magic[0:1] != b"P":
        raise BadMagicError("not a netpbm file")
    if magic not in _PNM_CHANNELS:
        raise UnsupportedTypeError(f"unsupported netpbm format {magic!r} (only P5/P6)")
    if len(data) < 3 or data[2] not in _WS:
        raise HeaderError("netpbm magic must be followed by whitespace")
    (width, height, maxval), pos = _pnm_tokens(data, 3, 2)
    if width < 1 or height < 1:
        raise HeaderError("netpbm image must be at least 1 x 1")
    if maxval != 255:
        raise UnsupportedTypeError(f"only maxval 255 is supported, got {maxval}")
    if pos >= len(data) or data[pos] not in _WS:
        raise HeaderError("netpbm header must end with a single whitespace byte")
    pos += 1
    need = width * height * _PNM_CHANNELS[magic]
    if len(data) - pos < need:
        raise TruncatedError(f"netpbm pixels truncated: need {need} bytes, have {len(data) - pos}")
    return PnmImage(magic.decode(), width, height, maxval, data[pos : pos + need])


def write_pnm(image, comment: str | None = None) -> bytes:
    """Encode a C x H x W float image in [0, 1] (C = 1 or 3) or an H x W(x3) uint8 array."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        if arr.ndim != 3 or arr.shape[0] not in (1, 3):
            raise ShapeError("float images must be C x H x W with C in (1, 3)")
        arr = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    if c not in (1, 3):
        raise ShapeError("netpbm supports 1 or 3 channels")
    header = f"{'P5' if c == 1 else 'P6'}\n"
    if comment:
        header += f"# {comment}\n"
    header += f"{w} {h}\n255\n"
    return header.encode() + np.ascontiguousarray(arr).tobytes()
