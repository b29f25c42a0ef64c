"""Feature records, feature-file IO, synthetic open-set data, frame pooling.

Feature file layout (UTF-8, one record per line)::

    #dim=4
    # any other line starting with '#' is a comment
    s0001<TAB>source<TAB>2<TAB>0.1,0.2,0.3,0.4
    t0001<TAB>target<TAB>-1<TAB>0.5,0.6,0.7,0.8

A label of ``-1`` marks an unlabeled record.
"""
from dataclasses import dataclass, field

import numpy as np

UNLABELED = -1
DOMAINS = ("source", "target")


class FeatureFileError(ValueError):
    def __init__(self, path, line, message):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


@dataclass(frozen=True, eq=False)
class FeatureRecord:
    id: str
    domain: str
    label: int
    features: np.ndarray

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"bad domain {self.domain!r}")
        if self.domain == "source" and self.label == UNLABELED:
            raise ValueError(f"source record {self.id} has no label")

    @property
    def labeled(self):
        return self.label != UNLABELED

    def __eq__(self, other):
        return (isinstance(other, FeatureRecord) and self.id == other.id
                and self.domain == other.domain and self.label == other.label
                and np.array_equal(self.features, other.features))

    def __hash__(self):
        return hash(self.id)


class Dataset:
    """An ordered list of records sharing one feature dimension."""

    def __init__(self, records=()):
        self.records = list(records)
        dims = {r.features.shape[0] for r in self.records}
        if len(dims) > 1:
            raise ValueError(f"mixed feature dimensions {sorted(dims)}")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def __eq__(self, other):
        return isinstance(other, Dataset) and self.records == other.records

    @property
    def dim(self):
        return self.records[0].features.shape[0] if self.records else 0

    @property
    def X(self):
        if not self.records:
            return np.zeros((0, 0))
        return np.stack([r.features for r in self.records])

    @property
    def labels(self):
        return np.array([r.label for r in self.records], dtype=int)

    @property
    def ids(self):
        return [r.id for r in self.records]

    def by_class(self):
        """``label -> list of records``, unlabeled records dropped."""
        out = {}
        for r in self.records:
            if r.labeled:
                out.setdefault(r.label, []).append(r)
        return out


@dataclass
class OpenSetSplit:
    """Maps raw labels to ``0..C-1`` for known classes and ``C`` for unknown.

    Known classes are the first ``C`` raw labels in sorted order.
    """
    C: int
    known: list = field(default_factory=list)

    @property
    def unknown_class_id(self):
        return self.C

    @classmethod
    def from_labels(cls, raw_labels, C):
        labels = sorted({int(x) for x in raw_labels if int(x) != UNLABELED})
        if len(labels) < C:
            raise ValueError(f"only {len(labels)} distinct labels, need C={C}")
        return cls(C=C, known=labels[:C])

    def map(self, raw):
        try:
            return self.known.index(int(raw))
        except ValueError:
            return self.C

    def map_many(self, raws):
        return np.array([self.map(r) for r in raws], dtype=int)

    def check_source(self, dataset):
        for r in dataset:
            if self.map(r.label) == self.C:
                raise ValueError(f"source record {r.id} has label {r.label} outside the known classes")


def load_feature_file(path):
    records, seen, dim = [], set(), None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            if line.startswith("#"):
                if dim is None and line.startswith("#dim="):
                    try:
                        dim = int(line[5:])
                    except ValueError:
                        raise FeatureFileError(path, lineno, f"bad header {line!r}") from None
                    if dim < 1:
                        raise FeatureFileError(path, lineno, "dimension must be positive")
                continue
            if dim is None:
                raise FeatureFileError(path, lineno, "record before '#dim=' header")
            parts = line.split("\t")
            if len(parts) != 4:
                raise FeatureFileError(path, lineno, f"expected 4 tab-separated fields, got {len(parts)}")
            rid, domain, label, vec = parts
            if rid in seen:
                raise FeatureFileError(path, lineno, f"duplicate id {rid!r}")
            if domain not in DOMAINS:
                raise FeatureFileError(path, lineno, f"bad domain {domain!r}")
            try:
                label = int(label)
                values = np.array([float(v) for v in vec.split(",")], dtype=np.float64)
            except ValueError:
                raise FeatureFileError(path, lineno, "non-numeric field") from None
            if values.shape[0] != dim:
                raise FeatureFileError(path, lineno, f"dimension {values.shape[0]} != {dim}")
            if not np.all(np.isfinite(values)):
                raise FeatureFileError(path, lineno, "non-finite feature value")
            if label < UNLABELED:
                raise FeatureFileError(path, lineno, f"bad label {label}")
            if domain == "source" and label == UNLABELED:
                raise FeatureFileError(path, lineno, "source record without label")
            seen.add(rid)
            records.append(FeatureRecord(rid, domain, label, values))
    return records


def write_feature_file(path, records):
    records = list(records)
    dims = {r.features.shape[0] for r in records}
    if len(dims) > 1:
        raise ValueError("records have mixed dimensions")
    dim = dims.pop() if dims else 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#dim={dim}\n")
        for r in records:
            vec = ",".join(repr(float(v)) for v in r.features)
            fh.write(f"{r.id}\t{r.domain}\t{r.label}\t{vec}\n")


def load_truth_file(path):
    """``id<TAB>open_set_label`` lines -> dict."""
    truth = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FeatureFileError(path, lineno, "expected id<TAB>label")
            truth[parts[0]] = int(parts[1])
    return truth


def write_truth_file(path, ids, labels):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# id\topen_set_label\n")
        for i, y in zip(ids, labels):
            fh.write(f"{i}\t{int(y)}\n")


# ---------------------------------------------------------------- synthetic

@dataclass
class SyntheticConfig:
    C_known: int = 3
    C_unknown: int = 2
    samples_per_class: int = 100
    dim: int = 16
    shift: float = 0.0
    rotation: float = 0.0
    separation: float = 3.0
    noise: float = 1.0
    unknown_radius: float = 1.0
    shift_axis: int = -1
    seed: int = 0

    def validate(self):
        if self.C_known < 2:
            raise ValueError("C_known must be >= 2")
        if self.C_unknown < 0 or self.samples_per_class < 1:
            raise ValueError("C_unknown >= 0 and samples_per_class >= 1 required")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.noise < 0 or self.separation <= 0 or self.unknown_radius < 0:
            raise ValueError("noise >= 0, separation > 0 and unknown_radius >= 0 required")
        if not -1 <= self.shift_axis < self.dim:
            raise ValueError("shift_axis must be -1 (random direction) or a feature axis")

    @property
    def openness(self):
        return self.C_unknown / (self.C_known + self.C_unknown)


@dataclass
class SyntheticData:
    source: Dataset
    target: Dataset
    truth: np.ndarray
    config: SyntheticConfig

    @property
    def openness(self):
        return float(np.mean(self.truth == self.config.C_known))


def class_means(config):
    """Class means on circles in the first two axes.

    Known class ``c`` sits at angle ``2*pi*c/C_known`` on a circle of radius
    ``separation``. Unknown class ``j`` sits halfway between two neighbouring
    known classes at ``unknown_radius * separation`` from the origin; each
    further wrap around the circle uses a radius larger by half that.
    """
    Ck = config.C_known
    angles, radii = [], []
    for c in range(Ck):
        angles.append(2 * np.pi * c / Ck)
        radii.append(config.separation)
    for j in range(config.C_unknown):
        angles.append(2 * np.pi * (j % Ck + 0.5) / Ck)
        radii.append(config.unknown_radius * config.separation * (1.0 + 0.5 * (j // Ck)))
    angles, radii = np.array(angles), np.array(radii)
    means = np.zeros((len(angles), config.dim))
    means[:, 0] = radii * np.cos(angles)
    means[:, 1] = radii * np.sin(angles)
    return means


def shift_means(means, config, direction):
    c, s = np.cos(config.rotation), np.sin(config.rotation)
    out = means.copy()
    out[:, 0] = c * means[:, 0] - s * means[:, 1]
    out[:, 1] = s * means[:, 0] + c * means[:, 1]
    return out + config.shift * direction


def generate_synthetic(config):
    """Gaussian blobs with a rotated and translated target domain.

    The translation has length ``shift`` along feature axis ``shift_axis``,
    or along a random unit direction when ``shift_axis`` is -1.

    Classes ``0..C_known-1`` appear in both domains; the remaining classes
    appear only in the target, where they all map to open-set label
    ``C_known``. Target records are unlabeled; ``truth`` holds their open-set
    labels in record order.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    K = config.C_known + config.C_unknown
    n = config.samples_per_class
    direction = rng.normal(size=config.dim)
    direction /= np.linalg.norm(direction)
    if config.shift_axis >= 0:
        direction = np.eye(config.dim)[config.shift_axis]
    src_means = class_means(config)
    tgt_means = shift_means(src_means, config, direction)

    source = []
    for c in range(config.C_known):
        x = src_means[c] + config.noise * rng.normal(size=(n, config.dim))
        source += [FeatureRecord(f"s{c:02d}_{i:04d}", "source", c, x[i]) for i in range(n)]

    tx, ty = [], []
    for c in range(K):
        tx.append(tgt_means[c] + config.noise * rng.normal(size=(n, config.dim)))
        ty += [min(c, config.C_known)] * n
    tx = np.concatenate(tx)
    ty = np.array(ty)
    order = rng.permutation(len(ty))
    target = [FeatureRecord(f"t{j:05d}", "target", UNLABELED, tx[k]) for j, k in enumerate(order)]
    return SyntheticData(Dataset(source), Dataset(target), ty[order], config)


# ---------------------------------------------------------------- video

def frame_indices(n_frames, K):
    """``K`` equally spaced indices over ``n_frames``, floor of linspace anchored at 0."""
    if n_frames < 1:
        raise ValueError("need at least one frame")
    if K < 1:
        raise ValueError("K must be >= 1")
    return np.floor(np.linspace(0, n_frames - 1, K)).astype(int)


def aggregate_frames(frames, K=5):
    """Mean of ``K`` equally spaced frame vectors (video-level feature)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ValueError("frames must be a non-empty (n_frames, d) array")
    return frames[frame_indices(frames.shape[0], K)].mean(axis=0)
