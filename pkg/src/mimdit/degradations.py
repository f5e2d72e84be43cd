"""Synthetic paired-data generation: clean images and parameterized corruptions.

Five degradation kinds (blur, noise, haze, lowlight, rain), each driven by a
single severity scalar in [0, 1] mapped to kind-specific parameters, with
severity 0 degenerating to the identity. Every sample derives its own RNG
stream from (seed, index), so parallel and serial generation agree
bit-exactly.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ParameterError, PersistenceError

KINDS = ("blur", "noise", "haze", "lowlight", "rain")

DATASET_MAGIC = b"MIMP"
DATASET_VERSION = 1

# severity -> parameter maps (documented ranges at severity in [0, 1])
_BLUR_SIGMA_MAX = 2.0  # sigma in [0, 2]
_NOISE_SIGMA_MAX = 0.3  # sigma in [0, 0.3]
_HAZE_TRANSMISSION_DROP = 0.8  # transmission in [0.2, 1]
_HAZE_AIRLIGHT = 0.9  # airlight in [0.5, 1]
_LOWLIGHT_GAMMA_SPAN = 1.2  # gamma in [1, 2.2]
_LOWLIGHT_GAIN_DROP = 0.6  # gain in [0.4, 1]
_RAIN_MAX_STREAKS = 12  # streak count in [0, 12]
_RAIN_ANGLE_LIMIT = 45.0  # angle in [-45, 45] degrees

_PARAM_RANGES = {
    "blur": {"sigma": (0.0, 4.0)},
    "noise": {"sigma": (0.0, 1.0)},
    "haze": {"transmission": (0.0, 1.0), "airlight": (0.5, 1.0)},
    "lowlight": {"gamma": (1.0, 3.0), "gain": (0.0, 1.0)},
    "rain": {"streak_count": (0.0, 200.0), "angle": (-60.0, 60.0)},
}


@dataclass(frozen=True)
class DegradationSpec:
    """One corruption: kind, severity knob, concrete parameters, RNG seed."""

    kind: str
    severity: float
    seed: int
    params: tuple  # sorted (name, value) pairs

    def validate(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown degradation kind {self.kind!r}")
        if not 0.0 <= self.severity <= 1.0:
            raise ParameterError(f"severity {self.severity} outside [0, 1]")
        ranges = _PARAM_RANGES[self.kind]
        given = dict(self.params)
        if set(given) != set(ranges):
            raise ParameterError(
                f"{self.kind} params {sorted(given)} do not match expected {sorted(ranges)}"
            )
        for name, (lo, hi) in ranges.items():
            if not lo <= given[name] <= hi:
                raise ParameterError(f"{self.kind} param {name}={given[name]} outside [{lo}, {hi}]")
        return self

    def param(self, name):
        return dict(self.params)[name]

    def to_text(self):
        parts = [f"kind={self.kind}", f"severity={self.severity!r}", f"seed={self.seed}"]
        parts.extend(f"{name}={value!r}" for name, value in self.params)
        return " ".join(parts)

    @classmethod
    def from_text(cls, text):
        fields = {}
        for token in text.split():
            key, value = token.split("=", 1)
            fields[key] = value
        kind = fields.pop("kind")
        severity = float(fields.pop("severity"))
        seed = int(fields.pop("seed"))
        params = tuple(sorted((k, float(v)) for k, v in fields.items()))
        return cls(kind=kind, severity=severity, seed=seed, params=params).validate()


def make_spec(kind, severity, seed):
    """Map the severity knob to concrete parameters for one sample."""
    if kind not in KINDS:
        raise ParameterError(f"unknown degradation kind {kind!r}")
    if not 0.0 <= severity <= 1.0:
        raise ParameterError(f"severity {severity} outside [0, 1]")
    rng = np.random.default_rng([seed, 0])
    if kind == "blur":
        params = {"sigma": _BLUR_SIGMA_MAX * severity}
    elif kind == "noise":
        params = {"sigma": _NOISE_SIGMA_MAX * severity}
    elif kind == "haze":
        params = {
            "transmission": 1.0 - _HAZE_TRANSMISSION_DROP * severity,
            "airlight": _HAZE_AIRLIGHT,
        }
    elif kind == "lowlight":
        params = {
            "gamma": 1.0 + _LOWLIGHT_GAMMA_SPAN * severity,
            "gain": 1.0 - _LOWLIGHT_GAIN_DROP * severity,
        }
    else:
        params = {
            "streak_count": float(round(_RAIN_MAX_STREAKS * severity)),
            "angle": float(rng.uniform(-_RAIN_ANGLE_LIMIT, _RAIN_ANGLE_LIMIT)),
        }
    spec = DegradationSpec(
        kind=kind, severity=float(severity), seed=int(seed), params=tuple(sorted(params.items()))
    )
    return spec.validate()


@dataclass(frozen=True)
class PairedSample:
    clean: np.ndarray  # [C,H,W] in [0,1]
    degraded: np.ndarray  # [C,H,W] in [0,1]
    spec: DegradationSpec | None

    def validate(self):
        if self.clean.shape != self.degraded.shape or self.clean.ndim != 3:
            raise ParameterError(
                f"paired images must share a [C,H,W] shape, got {self.clean.shape} and {self.degraded.shape}"
            )
        for name, image in (("clean", self.clean), ("degraded", self.degraded)):
            if image.min() < 0.0 or image.max() > 1.0:
                raise ParameterError(f"{name} image values fall outside [0, 1]")
        return self


def synthesize_clean(seed, height, width, channels=1):
    """Procedural clean image: smooth gradient + rectangles + sinusoid, rescaled to [0, 1]."""
    if height < 4 or width < 4 or channels < 1:
        raise ParameterError(
            f"image extents must be >= 4 with >= 1 channel, got {channels}x{height}x{width}"
        )
    rng = np.random.default_rng([int(seed)])
    yy, xx = np.mgrid[0:height, 0:width]
    yy = yy / (height - 1)
    xx = xx / (width - 1)

    theta = rng.uniform(0.0, 2.0 * np.pi)
    gradient = np.cos(theta) * xx + np.sin(theta) * yy

    rectangles = []
    for _ in range(2):
        y0, y1 = np.sort(rng.integers(0, height, size=2))
        x0, x1 = np.sort(rng.integers(0, width, size=2))
        mask = np.zeros((height, width))
        mask[y0 : y1 + 1, x0 : x1 + 1] = 1.0
        rectangles.append(mask)

    fx, fy = rng.uniform(0.5, 3.0, size=2)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    sinusoid = np.sin(2.0 * np.pi * (fx * xx + fy * yy) + phase)

    features = [gradient, *rectangles, sinusoid]
    image = np.zeros((channels, height, width))
    for c in range(channels):
        coefs = rng.uniform(-1.0, 1.0, size=len(features))
        coefs[0] = rng.uniform(0.5, 1.5)  # keep a dominant smooth component
        for coef, feat in zip(coefs, features):
            image[c] += coef * feat
    lo, hi = image.min(), image.max()
    if hi - lo < 1e-12:
        return np.full_like(image, 0.5)
    return (image - lo) / (hi - lo)


def gaussian_kernel(sigma):
    """Normalized 2-D Gaussian; degenerates to a 1x1 delta at sigma <= 0."""
    if sigma <= 0.0:
        return np.ones((1, 1))
    radius = int(np.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1)
    g = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _rain_mask(height, width, spec, rng):
    mask = np.zeros((height, width))
    count = int(round(spec.param("streak_count")))
    angle = np.deg2rad(spec.param("angle"))
    for _ in range(count):
        x0 = rng.uniform(0, width)
        y0 = rng.uniform(0, height)
        length = rng.uniform(0.25, 0.5) * height
        intensity = rng.uniform(0.25, 0.6)
        steps = int(length * 2) + 1
        s = np.linspace(0.0, length, steps)
        ys = np.rint(y0 + s * np.cos(angle)).astype(int)
        xs = np.rint(x0 + s * np.sin(angle)).astype(int)
        valid = (ys >= 0) & (ys < height) & (xs >= 0) & (xs < width)
        mask[ys[valid], xs[valid]] = np.maximum(mask[ys[valid], xs[valid]], intensity)
    return mask


def apply_degradation(clean, spec):
    """Deterministic corruption of a [C,H,W] image per its DegradationSpec; output clamped to [0,1]."""
    spec.validate()
    clean = np.asarray(clean, dtype=np.float64)
    if clean.ndim != 3:
        raise ParameterError(f"apply_degradation expects [C,H,W], got shape {clean.shape}")
    rng = np.random.default_rng([spec.seed, 1])
    if spec.kind == "blur":
        kernel = gaussian_kernel(spec.param("sigma"))
        out = T.conv2d(T.Tensor(clean), T.Tensor(kernel)).data
    elif spec.kind == "noise":
        out = clean + rng.standard_normal(clean.shape) * spec.param("sigma")
    elif spec.kind == "haze":
        t = spec.param("transmission")
        out = clean * t + spec.param("airlight") * (1.0 - t)
    elif spec.kind == "lowlight":
        out = spec.param("gain") * np.power(clean, spec.param("gamma"))
    else:
        mask = _rain_mask(clean.shape[1], clean.shape[2], spec, rng)
        out = clean + mask[None, :, :]
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Dataset file: magic, version, count, then (spec text, clean, degraded) triples


def write_dataset(path, samples):
    try:
        with open(path, "wb") as f:
            f.write(DATASET_MAGIC)
            f.write(struct.pack("<I", DATASET_VERSION))
            f.write(struct.pack("<I", len(samples)))
            for sample in samples:
                text = sample.spec.to_text().encode("utf-8") if sample.spec else b""
                f.write(struct.pack("<I", len(text)))
                f.write(text)
                T.write_tensor(f, T.Tensor(sample.clean))
                T.write_tensor(f, T.Tensor(sample.degraded))
    except OSError as e:
        raise PersistenceError(f"cannot write dataset {path}: {e}")


def _read_exact(f, n, path):
    buf = f.read(n)
    if len(buf) != n:
        raise PersistenceError(f"truncated dataset {path}: wanted {n} bytes, got {len(buf)}")
    return buf


def load_dataset(path):
    try:
        with open(path, "rb") as f:
            magic = _read_exact(f, 4, path)
            if magic != DATASET_MAGIC:
                raise PersistenceError(f"{path} is not a dataset (magic {magic!r})")
            (version,) = struct.unpack("<I", _read_exact(f, 4, path))
            if version != DATASET_VERSION:
                raise PersistenceError(f"unsupported dataset version {version} in {path}")
            (count,) = struct.unpack("<I", _read_exact(f, 4, path))
            samples = []
            for _ in range(count):
                (text_len,) = struct.unpack("<I", _read_exact(f, 4, path))
                text = _read_exact(f, text_len, path).decode("utf-8")
                spec = DegradationSpec.from_text(text) if text else None
                clean = T.read_tensor(f).data
                degraded = T.read_tensor(f).data
                samples.append(PairedSample(clean=clean, degraded=degraded, spec=spec).validate())
    except OSError as e:
        raise PersistenceError(f"cannot read dataset {path}: {e}")
    return samples


def build_dataset(path, count, kinds, severity_range, seed, *, height=16, width=16, channels=1):
    """Generate `count` paired samples, cycling kinds uniformly; writes the file."""
    if count < 1:
        raise ParameterError(f"dataset count must be >= 1, got {count}")
    kinds = tuple(kinds)
    if not kinds:
        raise ConfigurationError("kinds must be nonempty")
    for kind in kinds:
        if kind not in KINDS:
            raise ParameterError(f"unknown degradation kind {kind!r}")
    lo, hi = severity_range
    if not 0.0 <= lo <= hi <= 1.0:
        raise ParameterError(f"severity range [{lo}, {hi}] must be ordered within [0, 1]")
    samples = []
    for i in range(count):
        rng = np.random.default_rng([int(seed), i])
        severity = float(rng.uniform(lo, hi))
        clean_seed = int(rng.integers(2**63))
        spec_seed = int(rng.integers(2**63))
        clean = synthesize_clean(clean_seed, height, width, channels)
        spec = make_spec(kinds[i % len(kinds)], severity, spec_seed)
        degraded = apply_degradation(clean, spec)
        samples.append(PairedSample(clean=clean, degraded=degraded, spec=spec).validate())
    if path is not None:
        write_dataset(path, samples)
    return samples


# ---------------------------------------------------------------------------
# Plain-text image export for inspection


def write_pgm(path, image):
    """8-bit portable graymap (P2) of a [H,W] or [1,H,W] image in [0,1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        if image.shape[0] != 1:
            raise ParameterError(f"write_pgm expects one channel, got shape {image.shape}")
        image = image[0]
    levels = np.clip(np.rint(image * 255), 0, 255).astype(int)
    try:
        with open(path, "w", encoding="ascii") as f:
            f.write(f"P2\n{image.shape[1]} {image.shape[0]}\n255\n")
            for row in levels:
                f.write(" ".join(str(v) for v in row) + "\n")
    except OSError as e:
        raise PersistenceError(f"cannot write image {path}: {e}")


def write_ppm(path, image):
    """8-bit portable pixmap (P3) of a [3,H,W] image in [0,1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ParameterError(f"write_ppm expects [3,H,W], got shape {image.shape}")
    levels = np.clip(np.rint(image * 255), 0, 255).astype(int)
    try:
        with open(path, "w", encoding="ascii") as f:
            f.write(f"P3\n{image.shape[2]} {image.shape[1]}\n255\n")
            for y in range(image.shape[1]):
                row = []
                for x in range(image.shape[2]):
                    row.extend(str(levels[c, y, x]) for c in range(3))
                f.write(" ".join(row) + "\n")
    except OSError as e:
        raise PersistenceError(f"cannot write image {path}: {e}")
