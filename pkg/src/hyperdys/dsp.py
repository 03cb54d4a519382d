"""Audio loading and the 3-channel spectro-temporal image transform.

Pipeline: WAV -> mono float clip -> (resample) -> power STFT -> mel
filterbank -> dB -> optional DCT (MFCC) -> delta / delta-delta -> bilinear
resize to 224x224 -> per-channel normalization.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .errors import (
    EmptyInputError,
    FormatError,
    ParameterError,
    TooShortError,
    UnsupportedError,
)

IMAGE_SIZE = 224
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

_WAVE_PCM = 1
_WAVE_FLOAT = 3
_WAVE_EXTENSIBLE = 0xFFFE


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ParameterError("AudioClip must be mono (1-D samples)")
        if self.sample_rate <= 0:
            raise ParameterError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureMatrix:
    values: np.ndarray
    bin_kind: str
    frame_hop: int

    @property
    def n_bins(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass
class SpectrogramImage:
    """3x224x224 image; channel order (base, delta, delta-delta).

    ``shift``/``scale`` record the per-channel affine map that was applied:
    ``pixels[c] = (resized[c] - shift[c]) / scale[c]``.
    """

    pixels: np.ndarray
    shift: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    normalize: str = "unit"

    def unnormalized(self) -> np.ndarray:
        return self.pixels * self.scale[:, None, None] + self.shift[:, None, None]


# --------------------------------------------------------------------- WAV I/O


def load_wav(path) -> AudioClip:
    """Read a PCM16 or float32 RIFF/WAVE file into a mono clip in [-1, 1]."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos : pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4 : pos + 8])
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise FormatError(
                f"{path}: chunk {chunk_id!r} declares {size} bytes, only {len(body)} present"
            )
        if chunk_id == b"fmt ":
            if size < 16:
                raise FormatError(f"{path}: fmt chunk too short")
            fmt = struct.unpack("<HHIIHH", body[:16])
            if fmt[0] == _WAVE_EXTENSIBLE:
                if size < 40:
                    raise FormatError(f"{path}: extensible fmt chunk too short")
                (sub,) = struct.unpack("<H", body[24:26])
                fmt = (sub,) + fmt[1:]
        elif chunk_id == b"data":
            payload = body
        pos += 8 + size + (size & 1)

    if fmt is None or payload is None:
        raise FormatError(f"{path}: missing fmt or data chunk")
    tag, channels, rate, _, block_align, bits = fmt
    if channels not in (1, 2):
        raise UnsupportedError(f"{path}: {channels} channels (only mono/stereo supported)")
    if tag == _WAVE_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _WAVE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedError(f"{path}: format tag {tag} with {bits} bits per sample")
    if rate <= 0:
        raise FormatError(f"{path}: sample rate {rate}")

    frame_bytes = dtype.itemsize * channels
    n_frames = len(payload) // frame_bytes
    if n_frames == 0:
        raise EmptyInputError(f"{path}: no samples")
    raw = np.frombuffer(payload[: n_frames * frame_bytes], dtype=dtype)
    samples = raw.astype(np.float64).reshape(n_frames, channels).mean(axis=1) * scale
    if not np.all(np.isfinite(samples)):
        raise FormatError(f"{path}: non-finite samples")
    return AudioClip(np.clip(samples, -1.0, 1.0), int(rate))


def write_wav(path, samples, sample_rate: int, encoding: str = "pcm16") -> None:
    """Write a mono (1-D) or multi-channel (n, channels) buffer."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    channels = x.shape[1]
    if encoding == "pcm16":
        body = np.round(np.clip(x, -1.0, 32767 / 32768) * 32768).astype("<i2").tobytes()
        tag, bits = _WAVE_PCM, 16
    elif encoding == "float32":
        body = x.astype("<f4").tobytes()
        tag, bits = _WAVE_FLOAT, 32
    else:
        raise ParameterError(f"unknown encoding {encoding!r}")
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, sample_rate, sample_rate * block, block, bits)
    out = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", len(body)) + body
    if len(body) & 1:
        out += b"\x00"
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(out)) + out)


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    if target_rate <= 0:
        raise ParameterError(f"target_rate must be positive, got {target_rate}")
    if target_rate == clip.sample_rate:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    g = math.gcd(int(target_rate), int(clip.sample_rate))
    up, down = int(target_rate) // g, int(clip.sample_rate) // g
    y = resample_poly(clip.samples, up, down)
    return AudioClip(y, int(target_rate))


# ------------------------------------------------------------------- spectra


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window (the DFT-even form used for spectral analysis)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_count(n_samples: int, hop: int) -> int:
    return 1 + n_samples // hop


def stft_power(clip: AudioClip, n_fft: int = 2048, hop: int = 512) -> FeatureMatrix:
    """Centered power spectrogram, shape (n_fft/2 + 1, 1 + len // hop)."""
    if n_fft < 2 or n_fft & (n_fft - 1):
        raise ParameterError(f"n_fft must be a power of two, got {n_fft}")
    if hop < 1:
        raise ParameterError(f"hop must be >= 1, got {hop}")
    x = clip.samples
    if len(x) < 1:
        raise EmptyInputError("clip has no samples")
    pad = n_fft // 2
    # reflect padding needs len > pad; fall back to edge-mirrored tiling for short clips
    if len(x) > pad:
        xp = np.pad(x, pad, mode="reflect")
    else:
        xp = np.pad(x, pad, mode="symmetric") if len(x) > 1 else np.pad(x, pad)
    n_frames = frame_count(len(x), hop)
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = xp[idx] * hann_window(n_fft)
    spec = np.fft.rfft(frames, n=n_fft, axis=1)
    power = (spec.real**2 + spec.imag**2).T
    return FeatureMatrix(power, "power", hop)


_F_SP = 200.0 / 3
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOGSTEP = math.log(6.4) / 27.0


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    lin = f / _F_SP
    log = _MIN_LOG_MEL + np.log(np.maximum(f, _MIN_LOG_HZ) / _MIN_LOG_HZ) / _LOGSTEP
    return np.where(f >= _MIN_LOG_HZ, log, lin)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    lin = _F_SP * m
    log = _MIN_LOG_HZ * np.exp(_LOGSTEP * (np.maximum(m, _MIN_LOG_MEL) - _MIN_LOG_MEL))
    return np.where(m >= _MIN_LOG_MEL, log, lin)


def mel_frequencies(n: int, f_min: float, f_max: float) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n))


def mel_filterbank(
    n_mels: int, n_fft: int, sample_rate: int, f_min: float = 0.0, f_max: float | None = None
) -> np.ndarray:
    """Area-normalized triangular filters, shape (n_mels, n_fft/2 + 1)."""
    if f_max is None:
        f_max = sample_rate / 2
    if n_mels < 1:
        raise ParameterError("n_mels must be >= 1")
    if f_max > sample_rate / 2:
        raise ParameterError(f"f_max {f_max} exceeds Nyquist {sample_rate / 2}")
    if not f_min < f_max:
        raise ParameterError("f_min must be below f_max")
    fft_freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    edges = mel_frequencies(n_mels + 2, f_min, f_max)
    widths = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    rising = -ramps[:-2] / widths[:-1, None]
    falling = ramps[2:] / widths[1:, None]
    weights = np.maximum(0.0, np.minimum(rising, falling))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    return weights


def mel_center_frequencies(n_mels: int, sample_rate: int, f_min: float = 0.0, f_max: float | None = None):
    if f_max is None:
        f_max = sample_rate / 2
    return mel_frequencies(n_mels + 2, f_min, f_max)[1:-1]


def power_to_db(S: np.ndarray, amin: float = 1e-10, top_db: float = 80.0) -> np.ndarray:
    S = np.maximum(S, amin)
    db = 10.0 * np.log10(S) - 10.0 * np.log10(S.max())
    return np.maximum(db, db.max() - top_db)


def log_mel(
    clip: AudioClip,
    n_mels: int = 256,
    n_fft: int = 2048,
    hop: int = 512,
    f_min: float = 0.0,
    f_max: float | None = None,
    top_db: float = 80.0,
) -> FeatureMatrix:
    power = stft_power(clip, n_fft, hop).values
    fb = mel_filterbank(n_mels, n_fft, clip.sample_rate, f_min, f_max)
    return FeatureMatrix(power_to_db(fb @ power, top_db=top_db), "mel", hop)


def dct_basis(n_out: int, n_in: int) -> np.ndarray:
    """Orthonormal DCT-II rows, shape (n_out, n_in)."""
    k = np.arange(n_out)[:, None]
    n = np.arange(n_in)[None, :]
    basis = np.cos(np.pi * k * (2 * n + 1) / (2 * n_in)) * math.sqrt(2.0 / n_in)
    basis[0] /= math.sqrt(2.0)
    return basis


def mfcc(
    clip: AudioClip,
    n_mfcc: int = 20,
    n_mels: int = 256,
    n_fft: int = 2048,
    hop: int = 512,
    f_min: float = 0.0,
    f_max: float | None = None,
    top_db: float = 80.0,
) -> FeatureMatrix:
    if n_mfcc > n_mels:
        raise ParameterError(f"n_mfcc ({n_mfcc}) must not exceed n_mels ({n_mels})")
    mel = log_mel(clip, n_mels, n_fft, hop, f_min, f_max, top_db)
    return cepstrum(mel, n_mfcc)


def cepstrum(mel: FeatureMatrix, n_mfcc: int) -> FeatureMatrix:
    if n_mfcc > mel.n_bins:
        raise ParameterError(f"n_mfcc ({n_mfcc}) must not exceed n_mels ({mel.n_bins})")
    return FeatureMatrix(dct_basis(n_mfcc, mel.n_bins) @ mel.values, "mfcc", mel.frame_hop)


def delta(values: np.ndarray, width: int = 9) -> np.ndarray:
    """Least-squares slope along the last axis over a window of ``width`` frames."""
    if width < 3 or width % 2 == 0:
        raise ParameterError(f"delta width must be odd and >= 3, got {width}")
    values = np.asarray(values, dtype=np.float64)
    K = (width - 1) // 2
    T = values.shape[-1]
    padded = np.pad(values, [(0, 0)] * (values.ndim - 1) + [(K, K)], mode="edge")
    out = np.zeros_like(values)
    for k in range(1, K + 1):
        out += k * (padded[..., K + k : K + k + T] - padded[..., K - k : K - k + T])
    return out / (2.0 * sum(k * k for k in range(1, K + 1)))


def bilinear_resize(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear interpolation of a 2-D array."""
    a = np.asarray(a, dtype=np.float64)
    h, w = a.shape

    def axis(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(h, out_h)
    c0, c1, fc = axis(w, out_w)
    top = a[r0][:, c0] * (1 - fc) + a[r0][:, c1] * fc
    bot = a[r1][:, c0] * (1 - fc) + a[r1][:, c1] * fc
    return top * (1 - fr[:, None]) + bot * fr[:, None]


def assemble_image(base: FeatureMatrix, normalize: str = "unit", delta_width: int = 9) -> SpectrogramImage:
    if normalize not in ("unit", "imagenet"):
        raise ParameterError(f"normalize must be 'unit' or 'imagenet', got {normalize!r}")
    if not np.all(np.isfinite(base.values)):
        raise ParameterError("feature matrix contains non-finite values")
    if base.n_frames < 2:
        raise TooShortError(f"need at least 2 frames, got {base.n_frames}")
    d1 = delta(base.values, delta_width)
    d2 = delta(d1, delta_width)
    pixels = np.empty((3, IMAGE_SIZE, IMAGE_SIZE))
    shift = np.empty(3)
    scale = np.empty(3)
    for c, chan in enumerate((base.values, d1, d2)):
        r = bilinear_resize(chan, IMAGE_SIZE, IMAGE_SIZE)
        lo, hi = r.min(), r.max()
        if hi > lo:
            pixels[c] = (r - lo) / (hi - lo)
            shift[c], scale[c] = lo, hi - lo
        else:
            pixels[c] = 0.5
            shift[c], scale[c] = lo - 0.5, 1.0
        if normalize == "imagenet":
            m, s = IMAGENET_MEAN[c], IMAGENET_STD[c]
            pixels[c] = (pixels[c] - m) / s
            shift[c] += m * scale[c]
            scale[c] *= s
    return SpectrogramImage(pixels, shift, scale, normalize)


@dataclass(frozen=True)
class DspConfig:
    sample_rate: int = 22050
    n_fft: int = 2048
    hop: int = 512
    n_mels: int = 256
    n_mfcc: int = 20
    f_min: float = 0.0
    f_max: float | None = None
    top_db: float = 80.0
    delta_width: int = 9


def featurize_clip(clip: AudioClip, kind: str, cfg: DspConfig = DspConfig(), normalize: str = "unit"):
    """Full transform of one clip to its network input image."""
    if clip.sample_rate != cfg.sample_rate:
        clip = resample(clip, cfg.sample_rate)
    mel = log_mel(clip, cfg.n_mels, cfg.n_fft, cfg.hop, cfg.f_min, cfg.f_max, cfg.top_db)
    if kind == "logmel":
        base = mel
    elif kind == "mfcc":
        base = cepstrum(mel, cfg.n_mfcc)
    else:
        raise ParameterError(f"unknown input kind {kind!r}")
    return assemble_image(base, normalize, cfg.delta_width)


# --------------------------------------------------------------- image cache

_HDIM_MAGIC = b"HDIM"
_HDIM_VERSION = 1


def save_image(path, image: SpectrogramImage | np.ndarray) -> None:
    pixels = image.pixels if isinstance(image, SpectrogramImage) else np.asarray(image)
    if pixels.shape != (3, IMAGE_SIZE, IMAGE_SIZE):
        raise ParameterError(f"image must be 3x224x224, got {pixels.shape}")
    header = _HDIM_MAGIC + struct.pack("<IIII", _HDIM_VERSION, *pixels.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(pixels, dtype="<f4").tobytes())


def load_image(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:4] != _HDIM_MAGIC:
        raise FormatError(f"{path}: not an HDIM image file")
    version, *dims = struct.unpack("<IIII", data[4:20])
    if version != _HDIM_VERSION:
        raise FormatError(f"{path}: unsupported HDIM version {version}")
    n = int(np.prod(dims))
    if len(data) - 20 != 4 * n:
        raise FormatError(f"{path}: payload is {len(data) - 20} bytes, expected {4 * n}")
    return np.frombuffer(data, dtype="<f4", offset=20).reshape(dims).astype(np.float32)
