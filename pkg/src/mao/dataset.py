"""Synthetic clustered benchmark: generation, splits, few-shot sampling, I/O.

A dataset is a set of superclasses on the unit sphere, each owning a few
class prototypes; images are noisy copies of their class prototype, and
every class additionally carries a low-dimensional semantic embedding
used by the similarity sampler.  True labels of images handed out as
"unlabeled" are reachable only through an explicitly named diagnostics
accessor so training code cannot use them by accident.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetError, DatasetFormatError
from .numerics import Rng

FORMAT_MAGIC = "mao-dataset v1"

# Scale of the seeded offset that turns a superclass center into a class
# prototype, relative to the unit-norm center (expected offset norm).
PROTO_SPREAD = 0.4

_HEADER_KEYS = ("n_super", "classes_per_super", "d_img", "d_s", "sigma_img",
                "sigma_sem", "n_train_per_class", "n_test_per_class", "seed")


@dataclass(frozen=True)
class DatasetSpec:
    """Fully seeded description of one synthetic benchmark."""

    n_super: int = 8
    classes_per_super: int = 4
    d_img: int = 32
    d_s: int = 16
    sigma_img: float = 0.15
    sigma_sem: float = 0.05
    n_train_per_class: int = 32
    n_test_per_class: int = 32
    seed: int = 7

    def __post_init__(self) -> None:
        if self.n_super < 1 or self.classes_per_super < 1:
            raise DatasetError("need at least one superclass and one class")
        if self.d_img < 2 or self.d_s < 2:
            raise DatasetError("feature dimensions must be at least 2")
        if self.sigma_img < 0 or self.sigma_sem < 0:
            raise DatasetError("noise levels must be non-negative")
        if self.n_train_per_class < 1 or self.n_test_per_class < 1:
            raise DatasetError("need at least one train and one test image per class")

    @property
    def n_classes(self) -> int:
        return self.n_super * self.classes_per_super


#: The fixed benchmark all pinned expectations are computed on.
DEFAULT_SPEC = DatasetSpec()


@dataclass(frozen=True)
class ClassInfo:
    token_id: int
    superclass_id: int


@dataclass(frozen=True)
class ImageRecord:
    image_id: int
    class_id: int
    split: str  # "train" | "test"
    features: np.ndarray


@dataclass
class Dataset:
    spec: DatasetSpec
    vocab: dict[int, ClassInfo]
    prototypes: np.ndarray     # (n_classes, d_img)
    sampler_embed: np.ndarray  # (n_classes, d_s)
    images: list[ImageRecord]
    base_flags: dict[int, bool] = field(default_factory=dict)

    # -- access --------------------------------------------------------

    @property
    def n_classes(self) -> int:
        return self.spec.n_classes

    @property
    def split_done(self) -> bool:
        return bool(self.base_flags)

    def class_ids(self) -> list[int]:
        return sorted(self.vocab)

    def base_classes(self) -> list[int]:
        self._require_split()
        return sorted(c for c, is_base in self.base_flags.items() if is_base)

    def new_classes(self) -> list[int]:
        self._require_split()
        return sorted(c for c, is_base in self.base_flags.items() if not is_base)

    def _require_split(self) -> None:
        if not self.base_flags:
            raise DatasetError("base/new split has not been assigned yet")

    def images_of(self, class_id: int, split: str) -> list[ImageRecord]:
        if class_id not in self.vocab:
            raise DatasetError(f"unknown class id {class_id}")
        return [im for im in self.images if im.class_id == class_id and im.split == split]

    def image_by_id(self, image_id: int) -> ImageRecord:
        if not 0 <= image_id < len(self.images):
            raise DatasetError(f"unknown image id {image_id}")
        return self.images[image_id]

    def features_of(self, image_id: int) -> np.ndarray:
        """Label-free feature access, safe for pseudo-labeling paths."""
        return self.image_by_id(image_id).features

    def diagnostic_true_label(self, image_id: int) -> int:
        """True label of an image; for diagnostics and scoring only."""
        return self.image_by_id(image_id).class_id

    def test_items(self, class_ids) -> tuple[np.ndarray, np.ndarray]:
        """Stacked test features and labels restricted to ``class_ids``."""
        wanted = set(class_ids)
        rows = [im for im in self.images if im.split == "test" and im.class_id in wanted]
        if not rows:
            raise DatasetError("no test images for the requested classes")
        feats = np.stack([im.features for im in rows])
        labels = np.array([im.class_id for im in rows], dtype=np.int64)
        return feats, labels

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        if self.spec != other.spec or self.vocab != other.vocab:
            return False
        if self.base_flags != other.base_flags:
            return False
        if not np.array_equal(self.prototypes, other.prototypes):
            return False
        if not np.array_equal(self.sampler_embed, other.sampler_embed):
            return False
        if len(self.images) != len(other.images):
            return False
        for a, b in zip(self.images, other.images):
            if (a.image_id, a.class_id, a.split) != (b.image_id, b.class_id, b.split):
                return False
            if not np.array_equal(a.features, b.features):
                return False
        return True


@dataclass(frozen=True)
class FewShotSet:
    """Few-shot training material: labeled base pairs, unlabeled new ids."""

    pairs: tuple[tuple[int, int], ...]  # (image_id, class_id), base side
    unlabeled: tuple[int, ...]          # image ids only, new side
    shots: int


# --------------------------------------------------------------------------
# generation

def generate(spec: DatasetSpec) -> Dataset:
    """Create the benchmark described by ``spec``, fully seeded."""
    root = Rng(spec.seed).substream("dataset")
    centers = root.substream("superclass-centers").normal((spec.n_super, spec.d_img))
    norms = np.sqrt((centers ** 2).sum(axis=1, keepdims=True))
    if not np.all(norms > 0):
        raise DatasetError("degenerate superclass center draw")
    centers = centers / norms

    off_rng = root.substream("prototype-offsets")
    offsets = off_rng.normal((spec.n_classes, spec.d_img),
                             scale=PROTO_SPREAD / np.sqrt(spec.d_img))
    prototypes = np.empty((spec.n_classes, spec.d_img))
    vocab: dict[int, ClassInfo] = {}
    for cid in range(spec.n_classes):
        sup = cid // spec.classes_per_super
        prototypes[cid] = centers[sup] + offsets[cid]
        vocab[cid] = ClassInfo(token_id=cid, superclass_id=sup)

    map_rng = root.substream("sampler-map")
    sampler_map = map_rng.normal((spec.d_img, spec.d_s), scale=1.0 / np.sqrt(spec.d_img))
    sem_noise = root.substream("sampler-noise").normal(
        (spec.n_classes, spec.d_s), scale=spec.sigma_sem) if spec.sigma_sem > 0 else 0.0
    sampler_embed = prototypes @ sampler_map + sem_noise

    images: list[ImageRecord] = []
    img_rng = root.substream("images")
    next_id = 0
    for cid in range(spec.n_classes):
        for split, count in (("train", spec.n_train_per_class),
                             ("test", spec.n_test_per_class)):
            noise = img_rng.normal((count, spec.d_img), scale=spec.sigma_img) \
                if spec.sigma_img > 0 else np.zeros((count, spec.d_img))
            for k in range(count):
                images.append(ImageRecord(next_id, cid, split,
                                          prototypes[cid] + noise[k]))
                next_id += 1
    return Dataset(spec=spec, vocab=vocab, prototypes=prototypes,
                   sampler_embed=sampler_embed, images=images)


def split_base_new(ds: Dataset) -> Dataset:
    """Alternate sorted class ids between base and new, starting with base.

    Interleaving stratifies the split across superclasses, so both sides
    see every semantic neighborhood. An odd class count gives the extra
    class to the base side.
    """
    ids = ds.class_ids()
    ds.base_flags = {cid: i % 2 == 0 for i, cid in enumerate(ids)}
    return ds


def all_base_view(ds: Dataset) -> Dataset:
    """Copy of ``ds`` with every class flagged base (cross-dataset source)."""
    view = Dataset(spec=ds.spec, vocab=ds.vocab, prototypes=ds.prototypes,
                   sampler_embed=ds.sampler_embed, images=ds.images)
    view.base_flags = {cid: True for cid in ds.class_ids()}
    return view


def sample_few_shot(ds: Dataset, shots: int, rng: Rng) -> FewShotSet:
    """Draw up to ``shots`` training images per class, without replacement.

    Base classes contribute labeled pairs; new classes contribute image
    ids only.  Classes with fewer than ``shots`` training images simply
    contribute everything they have.
    """
    if shots < 1:
        raise DatasetError(f"shots must be positive, got {shots}")
    pairs: list[tuple[int, int]] = []
    for cid in ds.base_classes():
        pool = sorted(im.image_id for im in ds.images_of(cid, "train"))
        take = min(shots, len(pool))
        chosen = rng.substream(f"base-{cid}").choice(pool, size=take, replace=False)
        pairs.extend((img, cid) for img in chosen)
    unlabeled: list[int] = []
    for cid in ds.new_classes():
        pool = sorted(im.image_id for im in ds.images_of(cid, "train"))
        take = min(shots, len(pool))
        chosen = rng.substream(f"new-{cid}").choice(pool, size=take, replace=False)
        unlabeled.extend(chosen)
    return FewShotSet(pairs=tuple(pairs), unlabeled=tuple(unlabeled), shots=shots)


# --------------------------------------------------------------------------
# on-disk format

def _fmt_floats(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def dumps(ds: Dataset) -> str:
    """Serialize a dataset to the text format (bit-exact round trip)."""
    buf = io.StringIO()
    buf.write(FORMAT_MAGIC + "\n")
    for key in _HEADER_KEYS:
        buf.write(f"{key}={getattr(ds.spec, key)!r}\n")
    buf.write(f"split={'assigned' if ds.base_flags else 'none'}\n")
    buf.write("[vocab]\n")
    buf.write("class_id,token_id,superclass_id,role\n")
    for cid in ds.class_ids():
        info = ds.vocab[cid]
        role = "-"
        if ds.base_flags:
            role = "base" if ds.base_flags[cid] else "new"
        buf.write(f"{cid},{info.token_id},{info.superclass_id},{role}\n")
    buf.write("[prototypes]\n")
    for cid in ds.class_ids():
        buf.write(f"{cid},{_fmt_floats(ds.prototypes[cid])}\n")
    buf.write("[sampler]\n")
    for cid in ds.class_ids():
        buf.write(f"{cid},{_fmt_floats(ds.sampler_embed[cid])}\n")
    buf.write("[images]\n")
    for im in ds.images:
        buf.write(f"{im.image_id},{im.class_id},{im.split},{_fmt_floats(im.features)}\n")
    buf.write("[end]\n")
    body = buf.getvalue()
    n_lines = body.count("\n")
    return body + f"lines={n_lines}\n"


def save(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(ds))


def _parse_header_value(key: str, raw: str):
    try:
        if key in ("sigma_img", "sigma_sem"):
            return float(raw)
        return int(raw)
    except ValueError as exc:
        raise DatasetFormatError(f"header: bad value for {key}: {raw!r}") from exc


def loads(text: str) -> Dataset:
    """Parse the text format; errors name the offending section."""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0] != FORMAT_MAGIC:
        raise DatasetFormatError(f"header: missing magic line {FORMAT_MAGIC!r}")
    if not lines[-1].startswith("lines="):
        raise DatasetFormatError("checksum: missing trailing line count")
    try:
        declared = int(lines[-1][len("lines="):])
    except ValueError as exc:
        raise DatasetFormatError("checksum: unreadable line count") from exc
    if declared != len(lines) - 1:
        raise DatasetFormatError(
            f"checksum: file has {len(lines) - 1} lines, header says {declared}")

    header: dict[str, object] = {}
    i = 1
    while i < len(lines) and not lines[i].startswith("["):
        line = lines[i]
        if "=" not in line:
            raise DatasetFormatError(f"header: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        if key == "split":
            header[key] = raw
        elif key in _HEADER_KEYS:
            header[key] = _parse_header_value(key, raw)
        else:
            raise DatasetFormatError(f"header: unknown key {key!r}")
        i += 1
    missing = [k for k in _HEADER_KEYS if k not in header]
    if missing:
        raise DatasetFormatError(f"header: missing keys {missing}")
    spec = DatasetSpec(**{k: header[k] for k in _HEADER_KEYS})

    def expect_section(name: str) -> None:
        nonlocal i
        if i >= len(lines) or lines[i] != f"[{name}]":
            got = lines[i] if i < len(lines) else "<eof>"
            raise DatasetFormatError(f"{name}: expected section marker, got {got!r}")
        i += 1

    expect_section("vocab")
    if i >= len(lines) or lines[i] != "class_id,token_id,superclass_id,role":
        raise DatasetFormatError("vocab: missing column header")
    i += 1
    vocab: dict[int, ClassInfo] = {}
    base_flags: dict[int, bool] = {}
    while i < len(lines) and not lines[i].startswith("["):
        parts = lines[i].split(",")
        if len(parts) != 4:
            raise DatasetFormatError(f"vocab: bad row {lines[i]!r}")
        try:
            cid, tok, sup = int(parts[0]), int(parts[1]), int(parts[2])
        except ValueError as exc:
            raise DatasetFormatError(f"vocab: bad row {lines[i]!r}") from exc
        vocab[cid] = ClassInfo(token_id=tok, superclass_id=sup)
        if parts[3] == "base":
            base_flags[cid] = True
        elif parts[3] == "new":
            base_flags[cid] = False
        elif parts[3] != "-":
            raise DatasetFormatError(f"vocab: unknown role {parts[3]!r}")
        i += 1
    if len(vocab) != spec.n_classes:
        raise DatasetFormatError(
            f"vocab: {len(vocab)} classes, header says {spec.n_classes}")

    def read_class_rows(name: str, width: int) -> np.ndarray:
        nonlocal i
        expect_section(name)
        out = np.empty((spec.n_classes, width))
        seen = 0
        while i < len(lines) and not lines[i].startswith("["):
            parts = lines[i].split(",")
            if len(parts) != width + 1:
                raise DatasetFormatError(
                    f"{name}: row has {len(parts) - 1} values, expected {width}")
            try:
                cid = int(parts[0])
                out[cid] = [float(p) for p in parts[1:]]
            except (ValueError, IndexError) as exc:
                raise DatasetFormatError(f"{name}: bad row {lines[i]!r}") from exc
            seen += 1
            i += 1
        if seen != spec.n_classes:
            raise DatasetFormatError(f"{name}: {seen} rows, expected {spec.n_classes}")
        return out

    prototypes = read_class_rows("prototypes", spec.d_img)
    sampler = read_class_rows("sampler", spec.d_s)

    expect_section("images")
    images: list[ImageRecord] = []
    while i < len(lines) and not lines[i].startswith("["):
        parts = lines[i].split(",")
        if len(parts) != 3 + spec.d_img:
            raise DatasetFormatError(
                f"images: row width {len(parts)} does not match d_img={spec.d_img}")
        try:
            img_id, cid, split = int(parts[0]), int(parts[1]), parts[2]
            feats = np.array([float(p) for p in parts[3:]])
        except ValueError as exc:
            raise DatasetFormatError(f"images: bad row {lines[i][:60]!r}") from exc
        if split not in ("train", "test"):
            raise DatasetFormatError(f"images: unknown split {split!r}")
        if cid not in vocab:
            raise DatasetFormatError(f"images: unknown class id {cid}")
        images.append(ImageRecord(img_id, cid, split, feats))
        i += 1
    expected = spec.n_classes * (spec.n_train_per_class + spec.n_test_per_class)
    if len(images) != expected:
        raise DatasetFormatError(f"images: {len(images)} rows, expected {expected}")

    expect_section("end")
    return Dataset(spec=spec, vocab=vocab, prototypes=prototypes,
                   sampler_embed=sampler, images=images, base_flags=base_flags)


def load(path) -> Dataset:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise DatasetError(f"cannot read dataset file {path}: {exc}") from exc
    return loads(text)
