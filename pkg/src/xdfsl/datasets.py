"""Multi-domain image datasets, class-split manifests and train/unlabelled/test views.

Images are float32 rasters of shape (H, W, C) with values in [0, 1]. The
synthetic generator quantizes to 8-bit levels so that a dataset written to
disk as PNG and read back is pixel-identical.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from xdfsl.errors import ValidationError

log = logging.getLogger(__name__)

ROLES = ("train", "unlabelled", "test")
STYLES = ("real", "clipart", "painting", "sketch")
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True)
class LabeledExample:
    image: np.ndarray
    class_name: str
    domain_name: str

    def __post_init__(self):
        validate_image(self.image)


def validate_image(image: np.ndarray) -> None:
    if image.ndim != 3:
        raise ValidationError(f"expected an HxWxC raster, got shape {image.shape}")
    h, w, c = image.shape
    if h < 16 or w < 16 or c not in (1, 3):
        raise ValidationError(f"raster shape {image.shape} needs H, W >= 16 and C in (1, 3)")
    if not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
        raise ValidationError("pixel values must be finite and within [0, 1]")


@dataclass
class DomainDataset:
    domain_name: str
    examples: list[LabeledExample]
    class_vocabulary: list[str]
    report: LoadReport | None = None
    _images: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        vocab = set(self.class_vocabulary)
        if len(vocab) != len(self.class_vocabulary):
            raise ValidationError("class vocabulary contains duplicates")
        seen = set()
        for ex in self.examples:
            if ex.class_name not in vocab:
                raise ValidationError(f"class {ex.class_name!r} missing from vocabulary")
            if ex.domain_name != self.domain_name:
                raise ValidationError(
                    f"example from domain {ex.domain_name!r} in dataset {self.domain_name!r}"
                )
            seen.add(ex.class_name)
        empty = [c for c in self.class_vocabulary if c not in seen]
        if empty:
            raise ValidationError(f"classes without examples: {empty}")

    def __len__(self):
        return len(self.examples)

    @property
    def images(self) -> np.ndarray:
        """All rasters stacked as (N, H, W, C)."""
        if self._images is None:
            self._images = np.stack([ex.image for ex in self.examples]).astype(np.float32)
        return self._images

    @property
    def labels(self) -> np.ndarray:
        """Integer labels indexing ``class_vocabulary``."""
        index = {c: i for i, c in enumerate(self.class_vocabulary)}
        return np.array([index[ex.class_name] for ex in self.examples], dtype=np.int64)

    def indices_by_class(self) -> dict[str, np.ndarray]:
        out: dict[str, list[int]] = {c: [] for c in self.class_vocabulary}
        for i, ex in enumerate(self.examples):
            out[ex.class_name].append(i)
        return {c: np.array(v, dtype=np.int64) for c, v in out.items()}

    def subset(self, classes: Iterable[str], per_class: int | None = None) -> DomainDataset:
        """Restrict to ``classes`` (vocabulary order kept), optionally the first ``per_class`` each."""
        keep = set(classes)
        vocab = [c for c in self.class_vocabulary if c in keep]
        counts: dict[str, int] = {}
        examples = []
        for ex in self.examples:
            if ex.class_name not in keep:
                continue
            n = counts.get(ex.class_name, 0)
            if per_class is None or n < per_class:
                examples.append(ex)
            counts[ex.class_name] = n + 1
        return DomainDataset(self.domain_name, examples, vocab)


class UnlabelledDataset:
    """Target-domain images without labels.

    The originating class names are kept only for diagnostics such as cluster
    purity, and are reachable through :meth:`diagnostic_class_names` alone.
    """

    def __init__(self, domain_name: str, images: Sequence[np.ndarray],
                 hidden_class_names: Sequence[str] | None = None):
        self.domain_name = domain_name
        self._images = np.stack(list(images)).astype(np.float32) if len(images) else None
        if hidden_class_names is not None and len(hidden_class_names) != len(images):
            raise ValidationError("hidden_class_names must align with images")
        self.__hidden = None if hidden_class_names is None else list(hidden_class_names)

    def __len__(self):
        return 0 if self._images is None else len(self._images)

    @property
    def images(self) -> np.ndarray:
        if self._images is None:
            raise ValidationError("unlabelled dataset is empty")
        return self._images

    def diagnostic_class_names(self) -> list[str] | None:
        return None if self.__hidden is None else list(self.__hidden)


# ---------------------------------------------------------------------------
# split manifests


@dataclass(frozen=True)
class SplitManifest:
    assignments: dict[str, str]
    seed: int
    counts: tuple[int, int, int]

    def __post_init__(self):
        for name, role in self.assignments.items():
            if role not in ROLES:
                raise ValidationError(f"class {name!r} has unknown role {role!r}")
        actual = tuple(sum(r == role for r in self.assignments.values()) for role in ROLES)
        if actual != tuple(self.counts):
            raise ValidationError(f"counts {self.counts} disagree with assignments {actual}")

    def classes(self, role: str) -> list[str]:
        if role not in ROLES:
            raise ValidationError(f"unknown role {role!r}")
        return [c for c, r in self.assignments.items() if r == role]

    def to_text(self) -> str:
        lines = [f"# seed={self.seed}"]
        lines += [f"{name}\t{role}" for name, role in self.assignments.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> SplitManifest:
        lines = text.splitlines()
        if not lines or not lines[0].startswith("# seed="):
            raise ValidationError("manifest must start with '# seed=<int>'")
        seed = int(lines[0][len("# seed="):])
        assignments: dict[str, str] = {}
        for n, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            try:
                name, role = line.split("\t")
            except ValueError:
                raise ValidationError(f"manifest line {n}: expected '<class>\\t<role>'") from None
            if name in assignments:
                raise ValidationError(f"manifest line {n}: duplicate class {name!r}")
            assignments[name] = role
        counts = tuple(sum(r == role for r in assignments.values()) for role in ROLES)
        return cls(assignments, seed, counts)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> SplitManifest:
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _resolve_counts(n: int, proportions: Sequence[float]) -> tuple[int, int, int]:
    if len(proportions) != 3:
        raise ValidationError("proportions must be (train, unlabelled, test)")
    if any(p < 0 for p in proportions):
        raise ValidationError("proportions must be non-negative")
    if all(float(p).is_integer() for p in proportions) and sum(proportions) > 1:
        counts = tuple(int(p) for p in proportions)
        if sum(counts) > n:
            raise ValidationError(f"counts {counts} exceed the {n} available classes")
        if sum(counts) != n:
            raise ValidationError(f"counts {counts} must sum to the {n} available classes")
        return counts
    if not math.isclose(sum(proportions), 1.0, abs_tol=1e-9):
        raise ValidationError(f"fractions {tuple(proportions)} must sum to 1")
    # largest remainder, ties toward the earlier role
    raw = [p * n for p in proportions]
    counts = [math.floor(r) for r in raw]
    order = sorted(range(3), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return tuple(counts)


def build_split_manifest(class_names: Sequence[str], proportions: Sequence[float],
                         seed: int) -> SplitManifest:
    """Shuffle the classes with ``seed`` and cut the permutation into role prefixes.

    ``proportions`` are either integer counts summing to ``len(class_names)``
    or fractions summing to 1.
    """
    names = list(class_names)
    if len(set(names)) != len(names):
        dupes = sorted({c for c in names if names.count(c) > 1})
        raise ValidationError(f"duplicate class names: {dupes}")
    counts = _resolve_counts(len(names), proportions)
    perm = np.random.default_rng(seed).permutation(len(names))
    role_of = {}
    start = 0
    for role, count in zip(ROLES, counts):
        for i in perm[start:start + count]:
            role_of[names[i]] = role
        start += count
    return SplitManifest({c: role_of[c] for c in names}, seed, counts)


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass(frozen=True)
class SyntheticBenchmarkConfig:
    n_classes: int = 40
    domains: tuple[str, ...] = STYLES
    images_per_class_per_domain: int = 30
    image_size: tuple[int, int] = (32, 32)
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 10:
            raise ValidationError("n_classes must be at least 10")
        if self.images_per_class_per_domain < 20:
            raise ValidationError("images_per_class_per_domain must be at least 20")
        h, w = self.image_size
        if h < 16 or w < 16:
            raise ValidationError(f"image_size {self.image_size} is below 16x16")
        unknown = [d for d in self.domains if d not in STYLES]
        if unknown:
            raise ValidationError(f"unknown domain styles {unknown}; choose from {STYLES}")
        if len(set(self.domains)) != len(self.domains):
            raise ValidationError("duplicate domains")


@dataclass(frozen=True)
class ShapeClass:
    name: str
    lobes: int
    depth: float
    size: float
    pattern: str
    phase: float
    harmonics: tuple[tuple[float, float], ...]
    stripe_angle: float


def shape_catalog(n_classes: int, seed: int) -> list[ShapeClass]:
    """Deterministic list of ``n_classes`` parametric shape classes."""
    rng = np.random.default_rng([seed, 7919])
    kmax = 2 + max(5, math.ceil(n_classes / 12))
    combos = [(k, deep, big, pattern)
              for k in range(3, kmax + 1)
              for deep in (False, True)
              for big in (False, True)
              for pattern in ("solid", "ring", "stripes")]
    chosen = sorted(rng.permutation(len(combos))[:n_classes])
    out = []
    for idx, ci in enumerate(chosen):
        k, deep, big, pattern = combos[ci]
        harmonics = tuple((float(rng.uniform(0.05, 0.14)), float(rng.uniform(0, 2 * np.pi)))
                          for _ in range(3))
        name = f"{'star' if deep else 'poly'}{k}_{pattern}_{'large' if big else 'small'}"
        out.append(ShapeClass(
            name=f"c{idx:02d}_{name}",
            lobes=k,
            depth=0.32 if deep else 0.1,
            size=0.78 if big else 0.56,
            pattern=pattern,
            phase=float(rng.uniform(0, 2 * np.pi)),
            harmonics=harmonics,
            stripe_angle=float(rng.uniform(0, np.pi)),
        ))
    return out


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _smooth_noise(rng, shape, sigma):
    n = gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return n / (n.std() + 1e-8)


def _geometry(shape: ShapeClass, size: tuple[int, int], rng: np.random.Generator):
    """Soft fill mask and stroke map for one jittered instance of ``shape``."""
    h, w = size
    half = min(h, w) / 2.0
    cy = (h - 1) / 2 + rng.uniform(-0.08, 0.08) * h
    cx = (w - 1) / 2 + rng.uniform(-0.08, 0.08) * w
    rot = rng.uniform(-0.2, 0.2)
    scale = shape.size * half * rng.uniform(0.85, 1.1)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = -(yy - cy), xx - cx
    rho = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx) - rot
    profile = 1.0 + shape.depth * np.cos(shape.lobes * (theta - shape.phase))
    for j, (amp, psi) in enumerate(shape.harmonics, start=1):
        profile += amp * rng.uniform(0.8, 1.2) * np.cos(j * theta - psi)
    radius = scale * np.clip(profile, 0.3, None)
    dist = rho - radius
    # flat base: every object rests on the ground, which fixes "up" without a lighting cue
    up = dx * np.sin(rot) + dy * np.cos(rot)
    base = up + 0.55 * scale
    dist = np.maximum(dist, -base)
    fill = _sigmoid(-dist / 0.45)
    stroke = np.exp(-(dist / 0.8) ** 2)
    if shape.pattern == "ring":
        inner = rho - 0.45 * radius
        fill = fill * _sigmoid(inner / 0.45)
        stroke = np.maximum(stroke, np.exp(-(inner / 0.8) ** 2))
    elif shape.pattern == "stripes":
        a = shape.stripe_angle + rot
        period = max(4.0, half / 3.0)
        wave = np.sin(2 * np.pi * (dx * np.cos(a) + dy * np.sin(a)) / period)
        fill = fill * _sigmoid(4.0 * wave)
        stroke = np.maximum(stroke, fill * np.exp(-(wave / 0.35) ** 2))
    return fill, stroke


def _random_color(rng, low=0.15, high=0.95):
    return rng.uniform(low, high, size=3)


def _render(style: str, fill, stroke, rng):
    h, w = fill.shape
    f = fill[..., None]
    s = stroke[..., None]
    if style == "real":
        bg = 0.45 + 0.12 * _smooth_noise(rng, (h, w, 3), 3.0)
        bg = bg * _random_color(rng, 0.7, 1.1)
        tex = _random_color(rng) * (1.0 + 0.2 * _smooth_noise(rng, (h, w, 1), 1.0))
        img = bg * (1 - f) + tex * f + 0.03 * rng.standard_normal((h, w, 3))
    elif style == "clipart":
        bg = np.broadcast_to(rng.uniform(0.8, 1.0, size=3), (h, w, 3))
        palette = np.eye(3) * 0.75 + 0.1
        color = palette[rng.integers(3)] * rng.uniform(0.7, 1.0) + rng.uniform(0, 0.2, size=3)
        img = bg * (1 - f) + color * f
        img = img * (1 - s) + 0.08 * s
    elif style == "sketch":
        paper = 0.94 + 0.02 * rng.standard_normal((h, w, 1))
        pressure = 0.75 + 0.25 * _smooth_noise(rng, (h, w, 1), 1.5).clip(-1, 1)
        ink = rng.uniform(0.15, 0.35)
        stroke_w = np.clip(s * pressure * 1.2, 0, 1)
        img = np.repeat(paper * (1 - stroke_w) + ink * stroke_w, 3, axis=2)
    elif style == "painting":
        base = np.array([0.75, 0.65, 0.5]) * rng.uniform(0.8, 1.1)
        bg = base + 0.15 * _smooth_noise(rng, (h, w, 3), 2.5)
        color = 0.5 * _random_color(rng) + 0.3
        obj = color + 0.18 * _smooth_noise(rng, (h, w, 3), 1.5)
        img = bg * (1 - f) + obj * f
        img = gaussian_filter(img, sigma=(1.0, 1.0, 0)) + 0.03 * rng.standard_normal((h, w, 3))
    else:
        raise ValidationError(f"unknown style {style!r}")
    return np.clip(img, 0.0, 1.0)


def render_example(shape: ShapeClass, style: str, size: tuple[int, int],
                   rng: np.random.Generator) -> np.ndarray:
    fill, stroke = _geometry(shape, size, rng)
    img = _render(style, fill, stroke, rng)
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


def generate_synthetic_benchmark(config: SyntheticBenchmarkConfig) -> dict[str, DomainDataset]:
    """One dataset per domain style, sharing a class vocabulary.

    Image ``i`` of class ``c`` in style ``s`` depends only on
    ``(seed, s, c, i)``, so a larger ``images_per_class_per_domain`` yields
    a superset of a smaller one.
    """
    config.validate()
    catalog = shape_catalog(config.n_classes, config.seed)
    vocab = [c.name for c in catalog]
    out = {}
    for domain in config.domains:
        style_id = STYLES.index(domain)
        examples = []
        for ci, shape in enumerate(catalog):
            for i in range(config.images_per_class_per_domain):
                rng = np.random.default_rng([config.seed, style_id, ci, i])
                img = render_example(shape, domain, tuple(config.image_size), rng)
                examples.append(LabeledExample(img, shape.name, domain))
        out[domain] = DomainDataset(domain, examples, list(vocab))
    return out


# ---------------------------------------------------------------------------
# directory ingestion


@dataclass
class LoadReport:
    errors: list[tuple[str, str]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def _read_image(path: Path, image_size: tuple[int, int] | None) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        if image_size is not None and im.size != (image_size[1], image_size[0]):
            im = im.resize((image_size[1], image_size[0]), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def load_domain_directory(root: str | Path, domain_name: str,
                          image_size: tuple[int, int] | None = None,
                          workers: int = 1) -> DomainDataset:
    """Read ``root/<domain_name>/<class_name>/*.{png,jpg,jpeg}``.

    Unreadable files are skipped and listed in ``dataset.report``; empty
    class directories are left out of the vocabulary with a warning.
    """
    domain_dir = Path(root) / domain_name
    if not domain_dir.is_dir():
        raise FileNotFoundError(f"domain directory not found: {domain_dir}")
    report = LoadReport()
    jobs = []
    for class_dir in sorted(p for p in domain_dir.iterdir() if p.is_dir()):
        files = sorted(p for p in class_dir.iterdir()
                       if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
        jobs.extend((class_dir.name, f) for f in files)
        if not files:
            report.warnings.append(f"class {class_dir.name!r} has no images; excluded")

    def load(job):
        name, path = job
        try:
            img = _read_image(path, image_size)
            validate_image(img)
            return LabeledExample(img, name, domain_name), None
        except Exception as exc:  # noqa: BLE001 - any decode failure is reported, not raised
            return None, (str(path), f"{type(exc).__name__}: {exc}")

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(load, jobs))
    else:
        results = [load(j) for j in jobs]

    examples = []
    for ex, err in results:
        if err is not None:
            report.errors.append(err)
            log.warning("skipping %s (%s)", *err)
        else:
            examples.append(ex)
    vocab = sorted({ex.class_name for ex in examples})
    for name in sorted({j[0] for j in jobs} - set(vocab)):
        report.warnings.append(f"class {name!r} has no readable images; excluded")
    return DomainDataset(domain_name, examples, vocab, report=report)


def save_domain_directory(dataset: DomainDataset, root: str | Path) -> None:
    """Write ``dataset`` as 8-bit PNGs in the loader's directory layout."""
    from PIL import Image

    counts: dict[str, int] = {}
    for ex in dataset.examples:
        n = counts.get(ex.class_name, 0)
        counts[ex.class_name] = n + 1
        d = Path(root) / dataset.domain_name / ex.class_name
        d.mkdir(parents=True, exist_ok=True)
        arr = np.round(ex.image * 255.0).astype(np.uint8)
        if arr.shape[2] == 1:
            arr = arr[..., 0]
        Image.fromarray(arr).save(d / f"{n:05d}.png")


# ---------------------------------------------------------------------------
# role views


def apply_split(datasets: Mapping[str, DomainDataset], manifest: SplitManifest,
                source_domain: str, target_domain: str,
                per_class: int | None = None, unlabelled_per_class: int | None = None,
                ) -> tuple[DomainDataset, UnlabelledDataset, DomainDataset]:
    """Build (train, unlabelled, test) for one source/target pair.

    ``per_class`` caps train and test examples per class and
    ``unlabelled_per_class`` caps the unlabelled pool (None keeps all).
    """
    if source_domain == target_domain:
        raise ValidationError("source and target domain must differ")
    for d in (source_domain, target_domain):
        if d not in datasets:
            raise ValidationError(f"no dataset for domain {d!r}")
    for d in (source_domain, target_domain):
        missing = sorted(set(manifest.assignments) - set(datasets[d].class_vocabulary))
        if missing:
            raise ValidationError(f"manifest classes missing from {d!r}: {missing}")
    train = datasets[source_domain].subset(manifest.classes("train"), per_class)
    test = datasets[target_domain].subset(manifest.classes("test"), per_class)
    pool = datasets[target_domain].subset(manifest.classes("unlabelled"), unlabelled_per_class)
    unlabelled = UnlabelledDataset(
        target_domain,
        [ex.image for ex in pool.examples],
        hidden_class_names=[ex.class_name for ex in pool.examples],
    )
    return train, unlabelled, test
