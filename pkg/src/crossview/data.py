"""Synthetic multi-view corpus, preprocessing pipeline, and Bayes oracle.

Each sample hides a latent vector z in [0,1]^V. View v shows a moving
gaussian blob whose brightness and orbital speed are both affine in z_v —
and nothing else about z — so one camera alone pins down only its own
component, while the label (the quartile of mean(z), four classes) needs
all of them. Scenarios degrade the pixels (extra noise, occlusion) without
touching the latent, which keeps the per-view information bound intact.

The oracle reports the best accuracy achievable from a chosen subset of
latent components: the conditional law of the sum of the hidden components
is Irwin-Hall under the uniform latent, evaluated in closed form.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DataError
from .tensor import Tensor, make_rng

__all__ = [
    "SCENARIOS",
    "SyntheticSpec",
    "LabeledSample",
    "OracleEstimate",
    "generate",
    "view_slice",
    "save_dataset",
    "load_dataset",
    "sample_frames",
    "preprocess",
    "batch_clips",
    "irwin_hall_cdf",
    "bayes_oracle",
]

NUM_CLASSES = 4

# name -> (pixel-noise multiplier, occluder present); ids are the registry order
SCENARIOS: dict[str, tuple[float, bool]] = {
    "clean": (1.0, False),
    "noisy": (2.0, False),
    "occluded": (1.0, True),
}
_SCENARIO_IDS = {name: i for i, name in enumerate(SCENARIOS)}
_SCENARIO_NAMES = {i: name for name, i in _SCENARIO_IDS.items()}

# blob geometry as fractions of the frame side
_BACKGROUND = 0.15
_AMP_LO, _AMP_HI = 0.10, 0.70  # blob peak brightness spans [0.10, 0.70]
_ORBIT_RADIUS = 0.175
_SIGMA_LO, _SIGMA_HI = 0.08, 0.18  # blob radius also grows with the latent
_OCCLUDER_SIDE = 0.30
_ORACLE_STREAM = 1 << 62  # keep the oracle off the per-sample index streams

_MEAN, _STD = 0.45, 0.225  # normalization constants of the pipeline
_FILE_MAGIC = b"SKFD"
_FILE_VERSION = 1


@dataclass(frozen=True)
class SyntheticSpec:
    """Geometry and randomness of one synthetic corpus."""

    views: int = 5
    frames: int = 8  # raw frames per clip, before uniform subsampling
    image_size: int = 40  # raw side; the pipeline center-crops below this
    channels: int = 1
    sigma_n: float = 0.05
    skew: float = 1.0  # latent = uniform**(1/skew); >1 favors classes 2-3
    scenarios: tuple[str, ...] = ("clean", "noisy", "occluded")
    seed: int = 0

    def __post_init__(self):
        for field in ("views", "frames", "image_size", "channels"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be positive")
        if self.sigma_n < 0:
            raise ConfigError(f"noise level must be >= 0, got {self.sigma_n}")
        if self.skew <= 0:
            raise ConfigError(f"skew must be positive, got {self.skew}")
        if not self.scenarios:
            raise ConfigError("need at least one scenario")
        for name in self.scenarios:
            if name not in SCENARIOS:
                raise ConfigError(
                    f"unknown scenario {name!r}; available: {sorted(SCENARIOS)}"
                )
        if len(set(self.scenarios)) != len(self.scenarios):
            raise ConfigError("scenario names must be distinct")


@dataclass
class LabeledSample:
    views: np.ndarray  # (V, T_raw, C, H, W) float32 in [0, 1]
    label: int
    scenario: str


@dataclass(frozen=True)
class OracleEstimate:
    accuracy: float
    std_error: float
    draws: int


def _latent(rng: np.random.Generator, spec: SyntheticSpec, shape) -> np.ndarray:
    return rng.random(shape) ** (1.0 / spec.skew)


def _label_of(z: np.ndarray) -> np.ndarray:
    return np.minimum((NUM_CLASSES * np.mean(z, axis=-1)).astype(int), NUM_CLASSES - 1)


def _render_view(spec: SyntheticSpec, z_v: float, theta0: float) -> np.ndarray:
    """Noise-free signal for one view, (T_raw, C, H, W): a gaussian blob on a
    flat background, orbiting the frame center. Peak brightness, blob radius
    and angular speed are all affine in the view's latent component, so the
    component is legible in both a single frame and the motion across frames."""
    size = spec.image_size
    t = np.arange(spec.frames)
    theta = theta0 + 2.0 * np.pi * (0.25 + 0.75 * z_v) * t / spec.frames
    cy = size / 2.0 + _ORBIT_RADIUS * size * np.sin(theta)
    cx = size / 2.0 + _ORBIT_RADIUS * size * np.cos(theta)
    yy, xx = np.ogrid[:size, :size]
    d2 = (yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2
    amp = _AMP_LO + (_AMP_HI - _AMP_LO) * z_v
    sigma = (_SIGMA_LO + (_SIGMA_HI - _SIGMA_LO) * z_v) * size
    sig = _BACKGROUND + amp * np.exp(-d2 / (2.0 * sigma**2))
    return np.broadcast_to(sig[:, None], (spec.frames, spec.channels, size, size))


def _render_sample(spec: SyntheticSpec, index: int) -> LabeledSample:
    rng = make_rng(spec.seed, index)
    z = _latent(rng, spec, spec.views)
    # Each camera sits at a fixed angle around the action, so the orbit phase
    # is a per-view constant rather than a random draw. With the phase fixed,
    # the blob's position at every frame is a function of z_v alone — motion
    # carries the latent instead of hiding it behind a nuisance phase.
    theta0 = 2.0 * np.pi * np.arange(spec.views) / spec.views
    scenario = spec.scenarios[index % len(spec.scenarios)]
    noise_mult, occluded = SCENARIOS[scenario]
    size = spec.image_size
    shape = (spec.views, spec.frames, spec.channels, size, size)
    noise = rng.normal(0.0, spec.sigma_n * noise_mult, size=shape)
    frames = np.empty(shape)
    for v in range(spec.views):
        frames[v] = _render_view(spec, z[v], theta0[v])
    frames += noise
    if occluded:
        # A matte panel the color of the background: it erases whatever the
        # blob was doing underneath (the information loss that defines the
        # scenario) without the wild pixel-statistics shift a black patch
        # would add on top.
        side = max(1, round(_OCCLUDER_SIDE * size))
        corners = rng.integers(0, size - side + 1, size=(spec.views, 2))
        for v, (r, c) in enumerate(corners):
            frames[v, :, :, r : r + side, c : c + side] = _BACKGROUND
    np.clip(frames, 0.0, 1.0, out=frames)
    return LabeledSample(
        views=frames.astype(np.float32),
        label=int(_label_of(z)),
        scenario=scenario,
    )


def view_slice(samples: list[LabeledSample], view: int) -> list[LabeledSample]:
    """Restrict every sample to a single camera (label and scenario kept).

    This is the single-view ablation path: a model trained on the slice can
    at best recover that camera's latent component.
    """
    if not samples:
        raise ContractError("cannot slice an empty sample list")
    n_views = samples[0].views.shape[0]
    if not 0 <= view < n_views:
        raise ConfigError(f"view {view} out of range for {n_views} cameras")
    return [
        LabeledSample(
            views=s.views[view : view + 1], label=s.label, scenario=s.scenario
        )
        for s in samples
    ]


def generate(spec: SyntheticSpec, n: int, threads: int = 1) -> list[LabeledSample]:
    """Render n samples. Every sample depends only on (seed, index), so the
    result is identical for any thread count or schedule."""
    if n < 1:
        raise ContractError(f"need at least one sample, got n={n}")
    if threads < 1:
        raise ConfigError(f"thread count must be >= 1, got {threads}")
    if threads == 1:
        return [_render_sample(spec, i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda i: _render_sample(spec, i), range(n)))


# -- dataset file format ----------------------------------------------------
# header: magic 'SKFD', then little-endian u32 fields
#   version, V, T_raw, H, W, C, n
# per sample: label u8, scenario id u8, pixels float32 little-endian row-major


def save_dataset(path, samples: list[LabeledSample], spec: SyntheticSpec) -> None:
    if not samples:
        raise DataError("refusing to write an empty dataset")
    v, t, c, h, w = samples[0].views.shape
    header = _FILE_MAGIC + struct.pack(
        "<7I", _FILE_VERSION, v, t, h, w, c, len(samples)
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for s in samples:
            if s.views.shape != (v, t, c, h, w):
                raise DataError(f"inconsistent sample shape {s.views.shape}")
            fh.write(struct.pack("<BB", s.label, _SCENARIO_IDS[s.scenario]))
            fh.write(np.ascontiguousarray(s.views, dtype="<f4").tobytes())


def load_dataset(path) -> list[LabeledSample]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _FILE_MAGIC:
        raise DataError(f"not a dataset file (magic {blob[:4]!r})")
    if len(blob) < 32:
        raise DataError("truncated dataset header")
    version, v, t, h, w, c, n = struct.unpack_from("<7I", blob, 4)
    if version != _FILE_VERSION:
        raise DataError(f"unsupported dataset version {version}")
    sample_bytes = 2 + v * t * c * h * w * 4
    if len(blob) != 32 + n * sample_bytes:
        raise DataError(
            f"dataset payload is {len(blob) - 32} bytes, expected {n * sample_bytes}"
        )
    samples = []
    offset = 32
    for _ in range(n):
        label, scenario_id = struct.unpack_from("<BB", blob, offset)
        if label >= NUM_CLASSES:
            raise DataError(f"label {label} out of range")
        if scenario_id not in _SCENARIO_NAMES:
            raise DataError(f"unknown scenario id {scenario_id}")
        pixels = np.frombuffer(
            blob, dtype="<f4", count=v * t * c * h * w, offset=offset + 2
        ).reshape(v, t, c, h, w)
        samples.append(
            LabeledSample(pixels.copy(), int(label), _SCENARIO_NAMES[scenario_id])
        )
        offset += sample_bytes
    return samples


# -- preprocessing ----------------------------------------------------------


def sample_frames(raw_frames: int, target_frames: int) -> np.ndarray:
    """target_frames indices evenly spaced over [0, raw_frames-1], rounded to
    nearest; non-decreasing, endpoints included when target_frames > 1."""
    if raw_frames < 1 or target_frames < 1:
        raise ContractError(
            f"frame counts must be >= 1, got raw={raw_frames} target={target_frames}"
        )
    return np.rint(np.linspace(0.0, raw_frames - 1, target_frames)).astype(int)


def preprocess(frames: np.ndarray, crop_size: int) -> Tensor:
    """Center-crop the trailing (H, W) axes, rescale integer-coded pixels to
    [0, 1], and standardize with the pipeline's fixed mean/std.

    Float input outside [0, 1] is rejected: it is the signature of frames
    that were already preprocessed (or never normalized), and silently
    normalizing twice would corrupt the corpus.
    """
    x = np.asarray(frames)
    if x.ndim < 2:
        raise DataError(f"expected at least (H, W) frames, got shape {x.shape}")
    h, w = x.shape[-2:]
    if h < crop_size or w < crop_size:
        raise DataError(f"frames {h}x{w} smaller than crop {crop_size}")
    if np.issubdtype(x.dtype, np.integer):
        x = x / 255.0
    else:
        x = x.astype(np.float64)
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise DataError(
                "float pixels outside [0, 1]: frames look already preprocessed"
            )
    r0 = (h - crop_size) // 2
    c0 = (w - crop_size) // 2
    x = x[..., r0 : r0 + crop_size, c0 : c0 + crop_size]
    return Tensor((x - _MEAN) / _STD)


def batch_clips(
    samples: list[LabeledSample], target_frames: int, crop_size: int
) -> Tensor:
    """Stack samples into a model-ready (B, V, T, C, crop, crop) tensor."""
    if not samples:
        raise ContractError("cannot batch zero samples")
    raw_frames = samples[0].views.shape[1]
    idx = sample_frames(raw_frames, target_frames)
    raw = np.stack([s.views[:, idx] for s in samples])
    return preprocess(raw, crop_size)


# -- Bayes oracle -----------------------------------------------------------


def irwin_hall_cdf(x, n: int) -> np.ndarray:
    """CDF of the sum of n iid uniform[0,1] variables, exact piecewise form."""
    if n < 0:
        raise ContractError(f"need n >= 0, got {n}")
    x = np.asarray(x, dtype=np.float64)
    if n == 0:
        return (x >= 0.0).astype(np.float64)
    acc = np.zeros_like(x)
    for k in range(n + 1):
        acc += (-1.0) ** k * math.comb(n, k) * np.clip(x - k, 0.0, None) ** n
    return np.clip(acc / math.factorial(n), 0.0, 1.0)


def bayes_oracle(
    spec: SyntheticSpec,
    view_subset,
    m: int = 100_000,
    inner: int = 4096,
) -> OracleEstimate:
    """Best achievable accuracy when only the latent components in
    view_subset are observable (hidden components keep their prior).

    Monte-Carlo over m fresh latents; the conditional class probabilities
    use the exact Irwin-Hall law of the hidden-component sum under the
    uniform latent, or an inner Monte-Carlo batch when the latent is skewed.
    The inner batch only picks the decision, so a finite batch can only
    under-estimate the optimum, never inflate it.
    """
    if m < 10_000:
        raise ConfigError(f"need m >= 10000 draws for a stable estimate, got {m}")
    subset = sorted(set(int(i) for i in view_subset))
    if any(i < 0 or i >= spec.views for i in subset):
        raise ConfigError(f"view subset {subset} outside [0, {spec.views})")
    rng = make_rng(spec.seed, _ORACLE_STREAM)
    z = _latent(rng, spec, (m, spec.views))
    labels = _label_of(z)
    hidden = spec.views - len(subset)
    observed_sum = z[:, subset].sum(axis=1) if subset else np.zeros(m)

    # class c collects mean(z) in [c/4, (c+1)/4), i.e. a hidden-component sum
    # in [views*c/4 - observed, views*(c+1)/4 - observed)
    edges = spec.views * np.arange(NUM_CLASSES + 1) / NUM_CLASSES
    bounds = edges[None, :] - observed_sum[:, None]  # (m, 5)
    if spec.skew == 1.0:
        cum = irwin_hall_cdf(bounds, hidden)
    else:
        pool = np.sort(_latent(rng, spec, (inner, hidden)).sum(axis=1)) if hidden \
            else np.zeros(1)
        cum = np.searchsorted(pool, bounds, side="left") / pool.size
    posterior = np.diff(cum, axis=1)  # (m, 4)
    decisions = np.argmax(posterior, axis=1)
    hits = float(np.mean(decisions == labels))
    return OracleEstimate(
        accuracy=hits,
        std_error=math.sqrt(hits * (1.0 - hits) / m),
        draws=m,
    )
