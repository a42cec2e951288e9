"""Synthetic long-range classification tasks plus CSV/JSONL ingestion.

Every generator is a pure function of (spec, split): streams are drawn from
``default_rng([seed, split, task_code])``, which keeps train/val/test
pairwise disjoint and reproducible across platforms. The dependency gap G
is the knob that controls how far information must be carried.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError
from .training import Dataset

TASKS = ("copy_memory", "adding", "segment_order", "csv", "jsonl")
_TASK_CODE = {name: i for i, name in enumerate(TASKS)}
_SPLIT_CODE = {"train": 0, "val": 1, "test": 2}


@dataclass
class TaskSpec:
    task: str = "copy_memory"
    T: int = 60
    D: int = 0  # 0 derives the task's natural feature width
    K: int = 8
    G: int = 40
    n_train: int = 512
    n_val: int = 256
    n_test: int = 256
    seed: int = 0
    motif_len: int = 6  # segment_order only
    path: str = ""  # csv/jsonl only

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task={self.task!r} not in {TASKS}")
        if self.task in ("csv", "jsonl"):
            if not self.path:
                raise ConfigError(f"task {self.task!r} requires a data path")
            return
        if self.T < 1:
            raise ConfigError(f"T={self.T} must be >= 1")
        if self.K < 2:
            raise ConfigError(f"K={self.K} must be >= 2")
        if not 0 <= self.G < self.T:
            raise ConfigError(f"dependency gap G={self.G} must satisfy 0 <= G < T")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigError("split sample counts must be >= 0")

    def feature_dim(self) -> int:
        if self.task == "copy_memory":
            derived = 2 * self.K
        elif self.task == "adding":
            derived = 2
        elif self.task == "segment_order":
            derived = self._motif_count() + 2
        else:
            raise ConfigError(f"feature dim of {self.task!r} comes from the file")
        if self.D not in (0, derived):
            raise ConfigError(
                f"task {self.task!r} has fixed feature dim {derived}, got D={self.D}"
            )
        return derived

    def _motif_count(self) -> int:
        p = math.isqrt(self.K)
        if p * p != self.K:
            raise ConfigError(
                f"segment_order needs K = P^2 ordered motif pairs, got K={self.K}"
            )
        return p

    def split_size(self, split: str) -> int:
        if split not in _SPLIT_CODE:
            raise ConfigError(f"split={split!r} not in {tuple(_SPLIT_CODE)}")
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]


def _raw_copy_memory(spec: TaskSpec, rng, n: int):
    if spec.G < 1:
        raise ConfigError("copy_memory needs G >= 1")
    d = spec.feature_dim()
    tokens = rng.integers(spec.K, 2 * spec.K, size=(n, spec.T))
    labels = rng.integers(0, spec.K, size=n)
    tokens[:, spec.T - 1 - spec.G] = labels
    return np.eye(d, dtype=np.float64)[tokens], labels


def _raw_adding(spec: TaskSpec, rng, n: int):
    if spec.T < 4:
        raise ConfigError("adding needs T >= 4")
    gap = max(spec.G, 1)
    values = rng.random((n, spec.T))
    first = rng.integers(0, spec.T - gap, size=n)
    slack = np.floor(rng.random(n) * (spec.T - first - gap)).astype(np.int64)
    second = first + gap + slack
    x = np.zeros((n, spec.T, 2))
    x[:, :, 0] = values
    rows = np.arange(n)
    x[rows, first, 1] = 1.0
    x[rows, second, 1] = 1.0
    labels = (values[rows, first] + values[rows, second] > 1.0).astype(np.int64)
    return x, labels


def _raw_segment_order(spec: TaskSpec, rng, n: int):
    p = spec._motif_count()
    d = spec.feature_dim()
    length = spec.motif_len
    if length < 1:
        raise ConfigError(f"motif_len={length} must be >= 1")
    if 2 * length + spec.G > spec.T:
        raise ConfigError(
            f"T={spec.T} too short for two motifs of {length} plus gap {spec.G}"
        )
    tokens = rng.integers(p, d, size=(n, spec.T))
    motif_a = rng.integers(0, p, size=n)
    motif_b = rng.integers(0, p, size=n)
    tokens[:, :length] = motif_a[:, None]
    start_b = length + spec.G
    tokens[:, start_b : start_b + length] = motif_b[:, None]
    return np.eye(d, dtype=np.float64)[tokens], motif_a * p + motif_b


_RAW_GENERATORS = {
    "copy_memory": _raw_copy_memory,
    "adding": _raw_adding,
    "segment_order": _raw_segment_order,
}


def _unique_pool(spec: TaskSpec, total: int):
    """Draw from one seed-derived stream, dropping duplicate sequences.

    Splits are then disjoint segments of this stream; deduplication is what
    makes disjointness hold even in small discrete sample spaces.
    """
    raw = _RAW_GENERATORS[spec.task]
    rng = np.random.default_rng([spec.seed, _TASK_CODE[spec.task]])
    xs: list[np.ndarray] = []
    labels: list[int] = []
    seen: set[bytes] = set()
    stalled = 0
    while len(xs) < total:
        x_new, lab_new = raw(spec, rng, max(total - len(xs), 64))
        before = len(xs)
        for i in range(x_new.shape[0]):
            key = x_new[i].tobytes()
            if key in seen:
                continue
            seen.add(key)
            xs.append(x_new[i])
            labels.append(int(lab_new[i]))
            if len(xs) == total:
                break
        stalled = stalled + 1 if len(xs) == before else 0
        if stalled > 50:
            raise ConfigError(
                f"task sample space too small for {total} disjoint samples"
            )
    return np.stack(xs), np.asarray(labels, dtype=np.int64)


def _split_dataset(spec: TaskSpec, split: str) -> Dataset:
    sizes = [spec.n_train, spec.n_val, spec.n_test]
    x, labels = _unique_pool(spec, sum(sizes))
    offsets = np.cumsum([0] + sizes)
    i = _SPLIT_CODE[split]
    lo, hi = offsets[i], offsets[i + 1]
    return Dataset(x[lo:hi], np.full(hi - lo, spec.T), labels[lo:hi])


def gen_copy_memory(spec: TaskSpec, split: str = "train") -> Dataset:
    """Classify by the token planted G steps before the end.

    One-hot streams over 2K channels: label tokens use channels [0, K),
    noise tokens the disjoint [K, 2K), so the class is recoverable only
    from the planted step. Step T-G (1-indexed) carries the label, i.e.
    G=1 marks the penultimate step.
    """
    if spec.task != "copy_memory":
        raise ConfigError(f"spec is for task {spec.task!r}")
    return _split_dataset(spec, split)


def gen_adding(spec: TaskSpec, split: str = "train") -> Dataset:
    """Binary label: do the two marked channel-0 values sum above 1?

    Channel 0 holds uniform [0,1) values; channel 1 is zero except for two
    marker ones placed at least max(G, 1) steps apart.
    """
    if spec.task != "adding":
        raise ConfigError(f"spec is for task {spec.task!r}")
    return _split_dataset(spec, split)


def gen_segment_order(spec: TaskSpec, split: str = "train") -> Dataset:
    """Label the ordered pair of motifs separated by a G-step noise gap.

    With P motifs there are K = P^2 ordered pairs. Motif i holds channel i
    active for motif_len steps; noise steps activate one of the two extra
    channels uniformly. Layout: motif A, gap G, motif B, trailing noise.
    """
    if spec.task != "segment_order":
        raise ConfigError(f"spec is for task {spec.task!r}")
    return _split_dataset(spec, split)


def match_segment_templates(spec: TaskSpec, x: np.ndarray) -> np.ndarray:
    """Exact template oracle: read the motif channels at both motif slots."""
    p = spec._motif_count()
    motif_a = np.argmax(x[:, 0, :p], axis=1)
    motif_b = np.argmax(x[:, spec.motif_len + spec.G, :p], axis=1)
    return motif_a * p + motif_b


_GENERATORS = {
    "copy_memory": gen_copy_memory,
    "adding": gen_adding,
    "segment_order": gen_segment_order,
}


def generate(spec: TaskSpec, split: str = "train") -> Dataset:
    if spec.task in _GENERATORS:
        return _GENERATORS[spec.task](spec, split)
    if spec.task in ("csv", "jsonl"):
        return load_external(spec.path, spec.task)
    raise ConfigError(f"unknown task {spec.task!r}")


def generate_splits(spec: TaskSpec) -> dict[str, Dataset]:
    if spec.task in ("csv", "jsonl"):
        raise ConfigError("external files carry a single split; load them directly")
    return {split: generate(spec, split) for split in _SPLIT_CODE}


# ---------------------------------------------------------------------------
# external files


def export_csv(dataset: Dataset, path) -> None:
    """Write `seq_id,step,feat_0..feat_{D-1},label` rows, repr-exact floats."""
    d = dataset.x.shape[2] if len(dataset) else 0
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["seq_id", "step"] + [f"feat_{j}" for j in range(d)] + ["label"]
        )
        for n in range(len(dataset)):
            for t in range(int(dataset.lengths[n])):
                writer.writerow(
                    [n, t]
                    + [repr(float(v)) for v in dataset.x[n, t]]
                    + [int(dataset.labels[n])]
                )


def export_jsonl(dataset: Dataset, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for n in range(len(dataset)):
            steps = int(dataset.lengths[n])
            record = {
                "id": n,
                "features": [list(map(float, row)) for row in dataset.x[n, :steps]],
                "label": int(dataset.labels[n]),
            }
            fh.write(json.dumps(record) + "\n")


def _build_vocab(raw_labels: list[str], vocab: dict | None, where: list[str]):
    if vocab is None:
        return {lab: i for i, lab in enumerate(sorted(set(raw_labels)))}
    for lab, loc in zip(raw_labels, where):
        if lab not in vocab:
            raise ParseError(f"{loc}: unknown label {lab!r} not in training vocabulary")
    return vocab


def _pad(sequences: list[np.ndarray], labels: list[int]) -> Dataset:
    lengths = np.array([s.shape[0] for s in sequences], dtype=np.int64)
    t_max = int(lengths.max())
    d = sequences[0].shape[1]
    x = np.zeros((len(sequences), t_max, d))
    for i, s in enumerate(sequences):
        x[i, : s.shape[0]] = s
    return Dataset(x, lengths, np.asarray(labels, dtype=np.int64))


def load_csv(path, label_vocab: dict | None = None) -> Dataset:
    """Load `seq_id,step,feat_*,label` rows into padded batches.

    Sequences keep file order of first appearance; steps within a sequence
    must be 0..len-1 and the label must repeat consistently. The label
    vocabulary is the sorted set of label strings unless one is supplied.
    """
    name = Path(path).name
    rows: dict[str, dict[int, np.ndarray]] = {}
    seq_labels: dict[str, str] = {}
    label_where: dict[str, str] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            warnings.warn(f"{name}: empty file, no sequences loaded")
            return Dataset(np.zeros((0, 0, 0)), np.zeros(0), np.zeros(0))
        if (
            len(header) < 4
            or header[:2] != ["seq_id", "step"]
            or header[-1] != "label"
            or header[2:-1] != [f"feat_{j}" for j in range(len(header) - 3)]
        ):
            raise ParseError(f"{name}:1: malformed header {header!r}")
        width = len(header)
        for lineno, row in enumerate(reader, start=2):
            loc = f"{name}:{lineno}"
            if len(row) != width:
                raise ParseError(f"{loc}: expected {width} columns, got {len(row)}")
            seq_id, step_s = row[0], row[1]
            try:
                step = int(step_s)
                feats = np.array([float(v) for v in row[2:-1]])
            except ValueError as err:
                raise ParseError(f"{loc}: non-numeric value ({err})") from None
            label = row[-1]
            if seq_id not in rows:
                rows[seq_id] = {}
                seq_labels[seq_id] = label
                label_where[seq_id] = loc
            elif seq_labels[seq_id] != label:
                raise ParseError(
                    f"{loc}: label {label!r} contradicts earlier "
                    f"{seq_labels[seq_id]!r} for sequence {seq_id!r}"
                )
            if step in rows[seq_id]:
                raise ParseError(f"{loc}: duplicate step {step} in sequence {seq_id!r}")
            rows[seq_id][step] = feats
    if not rows:
        warnings.warn(f"{name}: empty file, no sequences loaded")
        return Dataset(np.zeros((0, 0, 0)), np.zeros(0), np.zeros(0))
    sequences = []
    for seq_id, steps in rows.items():
        expect = set(range(len(steps)))
        if set(steps) != expect:
            raise ParseError(
                f"{name}: sequence {seq_id!r} steps are not contiguous from 0"
            )
        sequences.append(np.stack([steps[t] for t in range(len(steps))]))
    ids = list(rows)
    vocab = _build_vocab(
        [seq_labels[i] for i in ids], label_vocab, [label_where[i] for i in ids]
    )
    return _pad(sequences, [vocab[seq_labels[i]] for i in ids])


def load_jsonl(path, label_vocab: dict | None = None) -> Dataset:
    """Load one `{id, features: [[...]], label}` object per line."""
    name = Path(path).name
    sequences: list[np.ndarray] = []
    raw_labels: list[str] = []
    where: list[str] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            loc = f"{name}:{lineno}"
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise ParseError(f"{loc}: invalid JSON ({err})") from None
            try:
                feats = record["features"]
                label = record["label"]
            except (KeyError, TypeError):
                raise ParseError(f"{loc}: object needs 'features' and 'label'") from None
            if not feats or any(len(r) != len(feats[0]) for r in feats):
                raise ParseError(f"{loc}: ragged or empty feature rows")
            try:
                arr = np.asarray(feats, dtype=np.float64)
            except (ValueError, TypeError):
                raise ParseError(f"{loc}: non-numeric features") from None
            if sequences and arr.shape[1] != sequences[0].shape[1]:
                raise ParseError(
                    f"{loc}: feature width {arr.shape[1]} != {sequences[0].shape[1]}"
                )
            sequences.append(arr)
            raw_labels.append(str(label))
            where.append(loc)
    if not sequences:
        warnings.warn(f"{name}: empty file, no sequences loaded")
        return Dataset(np.zeros((0, 0, 0)), np.zeros(0), np.zeros(0))
    vocab = _build_vocab(raw_labels, label_vocab, where)
    return _pad(sequences, [vocab[lab] for lab in raw_labels])


def load_external(path, fmt: str, label_vocab: dict | None = None) -> Dataset:
    if not Path(path).exists():
        raise ConfigError(f"data file not found: {path}")
    if fmt == "csv":
        return load_csv(path, label_vocab)
    if fmt == "jsonl":
        return load_jsonl(path, label_vocab)
    raise ConfigError(f"format={fmt!r} not in {{csv, jsonl}}")
