"""Four-blob synthetic images with a label signal and a protected signal.

Group 0 draws both magnitudes from ``group1_range`` and group 1 from
``group2_range``.  The diagonal blobs (top-left, bottom-right) have magnitude
``sigma_a`` and carry the label; the off-diagonal blobs (top-right,
bottom-left) have magnitude ``sigma_b``, the protected variable.
"""
from __future__ import annotations

import hashlib
import io
import itertools
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import ConfigError, ContractViolation, FormatError, IntegrityError

MAGIC = b"BRDS"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIIII")

# (row, col) in pixel-index coordinates; symmetric about the image centre
DEFAULT_CENTERS = ((8.0, 8.0), (23.0, 23.0), (8.0, 23.0), (23.0, 8.0))


@dataclass(frozen=True)
class SyntheticConfig:
    n_per_group: int = 512
    resolution: tuple[int, int] = (32, 32)
    group1_range: tuple[float, float] = (1.0, 4.0)
    group2_range: tuple[float, float] = (3.0, 6.0)
    noise_std: float = 0.01
    # order: top-left, bottom-right (sigma_a), top-right, bottom-left (sigma_b)
    blob_centers: tuple[tuple[float, float], ...] = DEFAULT_CENTERS
    blob_std: float = 4.0
    independent_blobs: bool = False
    seed: int = 0

    def validate(self) -> "SyntheticConfig":
        if self.n_per_group < 1:
            raise ConfigError("data.n_per_group", "must be >= 1")
        for name in ("group1_range", "group2_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ConfigError(f"data.{name}", f"lo ({lo}) must be < hi ({hi})")
            if lo <= 0:
                raise ConfigError(f"data.{name}", "magnitudes must be positive")
        if self.noise_std < 0:
            raise ConfigError("data.noise_std", "must be >= 0")
        if self.blob_std <= 0:
            raise ConfigError("data.blob_std", "must be > 0")
        h, w = self.resolution
        if len(self.blob_centers) != 4:
            raise ConfigError("data.blob_centers", "need exactly 4 centres")
        for r, c in self.blob_centers:
            if not (0 <= r <= h - 1 and 0 <= c <= w - 1):
                raise ConfigError("data.blob_centers", f"centre ({r}, {c}) lies outside {h}x{w}")
        return self

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    images: np.ndarray  # [N, 1, H, W]
    labels: np.ndarray  # uint8 [N]
    sigma_a: np.ndarray
    sigma_b: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def protected(self) -> np.ndarray:
        """Protected variables as [N, k] with k = 1."""
        return self.sigma_b[:, None]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.sigma_a[idx], self.sigma_b[idx])

    def equals(self, other: "Dataset") -> bool:
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("images", "labels", "sigma_a", "sigma_b")
        )


def blob_basis(resolution=(32, 32), centers=DEFAULT_CENTERS, std: float = 4.0) -> np.ndarray:
    """Unit-peak Gaussian bumps, shape [4, H, W], in ``centers`` order."""
    h, w = resolution
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    return np.stack(
        [np.exp(-((rows - r) ** 2 + (cols - c) ** 2) / (2.0 * std * std)) for r, c in centers]
    )


def render_image(
    sigma_a,
    sigma_b,
    basis: Optional[np.ndarray] = None,
    noise_std: float = 0.01,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """One [1, H, W] image.

    ``sigma_a`` / ``sigma_b`` may be scalars or pairs (one magnitude per blob
    of the diagonal or off-diagonal pair).
    """
    mags = np.concatenate([np.broadcast_to(np.asarray(sigma_a, float), (2,)),
                           np.broadcast_to(np.asarray(sigma_b, float), (2,))])
    if np.any(mags <= 0):
        raise ContractViolation(f"blob magnitudes must be positive, got {mags}")
    if basis is None:
        basis = blob_basis()
    img = np.tensordot(mags, basis, axes=1)
    if noise_std > 0:
        if rng is None:
            raise ContractViolation("noise requires an rng")
        img = img + rng.normal(0.0, noise_std, size=img.shape)
    return img[None]


def generate(config: SyntheticConfig = SyntheticConfig()) -> Dataset:
    """Both groups from one sequential seeded stream, group 0 first."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    n = config.n_per_group
    h, w = config.resolution
    basis = blob_basis(config.resolution, config.blob_centers, config.blob_std)
    draws = 2 if config.independent_blobs else 1
    images = np.empty((2 * n, 1, h, w))
    sa_all, sb_all = np.empty(2 * n), np.empty(2 * n)
    for g, (lo, hi) in enumerate((config.group1_range, config.group2_range)):
        sa = rng.uniform(lo, hi, size=(n, draws))
        sb = rng.uniform(lo, hi, size=(n, draws))
        for i in range(n):
            images[g * n + i] = render_image(sa[i], sb[i], basis, config.noise_std, rng)
        sa_all[g * n:(g + 1) * n] = sa.mean(axis=1)
        sb_all[g * n:(g + 1) * n] = sb.mean(axis=1)
    labels = np.repeat(np.arange(2, dtype=np.uint8), n)
    return Dataset(images, labels, sa_all, sb_all)


# ---------------------------------------------------------------------------
# Bayes oracle


def _cells(r0: tuple[float, float], r1: tuple[float, float]):
    edges = sorted({*r0, *r1})
    for lo, hi in zip(edges, edges[1:]):
        mid = 0.5 * (lo + hi)
        p0 = 1.0 / (r0[1] - r0[0]) if r0[0] <= mid <= r0[1] else 0.0
        p1 = 1.0 / (r1[1] - r1[0]) if r1[0] <= mid <= r1[1] else 0.0
        yield hi - lo, p0, p1


def bayes_accuracy_analytic(r0, r1, draws: int = 1) -> float:
    """Best accuracy from ``draws`` i.i.d. magnitudes, equal priors.

    Densities are piecewise constant, so the integral of the larger class
    likelihood is a finite sum over products of cells.
    """
    total = 0.0
    for combo in itertools.product(list(_cells(tuple(r0), tuple(r1))), repeat=draws):
        vol = np.prod([c[0] for c in combo])
        l0 = np.prod([c[1] for c in combo])
        l1 = np.prod([c[2] for c in combo])
        total += vol * max(l0, l1)
    return 0.5 * float(total)


@dataclass
class OracleResult:
    analytic: float
    monte_carlo: float
    std_error: float
    n_mc: int


def bayes_oracle_accuracy(
    config: SyntheticConfig = SyntheticConfig(), n_mc: int = 200_000, seed: int = 0
) -> OracleResult:
    """Accuracy ceiling for a classifier that sees only ``sigma_a``.

    The Monte-Carlo estimate applies the likelihood-ratio rule to simulated
    draws and scores ties 1/2.
    """
    if n_mc < 100_000:
        raise ContractViolation("n_mc must be >= 1e5")
    r0, r1 = config.group1_range, config.group2_range
    draws = 2 if config.independent_blobs else 1
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n_mc)
    lo = np.where(labels == 0, r0[0], r1[0])
    hi = np.where(labels == 0, r0[1], r1[1])
    x = rng.uniform(lo[:, None], hi[:, None], size=(n_mc, draws))

    def lik(r):
        inside = np.all((x >= r[0]) & (x <= r[1]), axis=1)
        return np.where(inside, (r[1] - r[0]) ** -float(draws), 0.0)

    l0, l1 = lik(r0), lik(r1)
    pred1 = l1 > l0
    score = np.where(l0 == l1, 0.5, (pred1 == (labels == 1)).astype(float))
    return OracleResult(
        analytic=bayes_accuracy_analytic(r0, r1, draws),
        monte_carlo=float(score.mean()),
        std_error=float(score.std() / np.sqrt(n_mc)),
        n_mc=n_mc,
    )


# ---------------------------------------------------------------------------
# BRDS files


def checksum(data: bytes) -> bytes:
    """64-bit BLAKE2b digest."""
    return hashlib.blake2b(data, digest_size=8).digest()


def dumps_dataset(ds: Dataset) -> bytes:
    n, _, h, w = ds.images.shape
    buf = io.BytesIO()
    buf.write(HEADER.pack(MAGIC, FORMAT_VERSION, n, h, w))
    buf.write(np.ascontiguousarray(ds.images, dtype="<f8").tobytes())
    buf.write(np.asarray(ds.labels, dtype=np.uint8).tobytes())
    buf.write(np.asarray(ds.sigma_a, dtype="<f8").tobytes())
    buf.write(np.asarray(ds.sigma_b, dtype="<f8").tobytes())
    body = buf.getvalue()
    return body + checksum(body)


def loads_dataset(blob: bytes) -> Dataset:
    if len(blob) < HEADER.size:
        raise FormatError("truncated header", len(blob))
    magic, version, n, h, w = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError("not a BRDS dataset file", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported dataset format version {version}", 4)
    sizes = [("images", 8 * n * h * w), ("labels", n), ("sigma_a", 8 * n), ("sigma_b", 8 * n), ("checksum", 8)]
    pos = HEADER.size
    chunks = {}
    for name, size in sizes:
        if pos + size > len(blob):
            raise FormatError(f"truncated file while reading {name}", len(blob))
        chunks[name] = blob[pos:pos + size]
        pos += size
    if pos != len(blob):
        raise FormatError("trailing bytes after checksum", pos)
    body_end = pos - 8
    if checksum(blob[:body_end]) != chunks["checksum"]:
        raise IntegrityError("checksum mismatch", body_end)
    f8 = lambda b: np.frombuffer(b, dtype="<f8").astype(np.float64)  # noqa: E731
    return Dataset(
        images=f8(chunks["images"]).reshape(n, 1, h, w),
        labels=np.frombuffer(chunks["labels"], dtype=np.uint8).copy(),
        sigma_a=f8(chunks["sigma_a"]),
        sigma_b=f8(chunks["sigma_b"]),
    )


def save_dataset(ds: Dataset, path: Union[str, Path]) -> bytes:
    """Write a BRDS file; returns its 8-byte checksum."""
    blob = dumps_dataset(ds)
    Path(path).write_bytes(blob)
    return blob[-8:]


def load_dataset(path: Union[str, Path]) -> Dataset:
    return loads_dataset(Path(path).read_bytes())


def export_csv(ds: Dataset, out_dir: Union[str, Path], header: Optional[str] = None) -> None:
    """``images.csv`` (one flattened image per row) and ``meta.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prefix = f"# {header}\n" if header else ""
    flat = ds.images.reshape(len(ds), -1)
    with open(out / "images.csv", "w", encoding="utf-8", newline="\n") as f:
        f.write(prefix)
        for row in flat:
            f.write(",".join(f"{v:.17g}" for v in row) + "\n")
    with open(out / "meta.csv", "w", encoding="utf-8", newline="\n") as f:
        f.write(prefix)
        f.write("index,label,sigma_a,sigma_b\n")
        for i in range(len(ds)):
            f.write(f"{i},{int(ds.labels[i])},{ds.sigma_a[i]:.17g},{ds.sigma_b[i]:.17g}\n")
