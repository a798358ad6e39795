"""Kinematic sequence datasets: JIGSAWS-layout I/O, splits and synthetic tasks.

On-disk layout (shared by JIGSAWS and the synthetic generators)::

    root/
      kinematics/[AllGestures/]<Task>_<U><NNN>.txt   whitespace-separated reals, one frame per line
      transcriptions/<Task>_<U><NNN>.txt             "start end label" lines, 1-based inclusive
      manifest.json                                  optional; column map, names, generator params

The user id is the letter group before the trial number (``Suturing_B001`` -> ``B``).
"""

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError
from .metrics import dataset_normalizer, to_segments
from .numeric import Rng

# 76-column JIGSAWS kinematics: master-left, master-right, slave-left, slave-right
# blocks of 19 (position 3, rotation 9, linear velocity 3, angular velocity 3, gripper 1).
_SLAVE_BLOCKS = {"slave_left": 38, "slave_right": 57}


def _jigsaws_columns():
    cols, names = [], []
    for arm, base in _SLAVE_BLOCKS.items():
        for k, axis in enumerate("xyz"):
            cols.append(base + k)
            names.append(f"{arm}_pos_{axis}")
        for k, axis in enumerate("xyz"):
            cols.append(base + 12 + k)
            names.append(f"{arm}_vel_{axis}")
        cols.append(base + 18)
        names.append(f"{arm}_gripper")
    return tuple(cols), tuple(names)


JIGSAWS_COLUMNS, JIGSAWS_FEATURES = _jigsaws_columns()
DEFAULT_USER_PATTERN = r"_([A-Za-z]+)\d+$"


@dataclass(frozen=True)
class LoadConfig:
    """Column map and resampling for :func:`load_jigsaws`.

    ``columns=None`` keeps every column of the kinematics files.
    """

    columns: tuple = JIGSAWS_COLUMNS
    feature_names: tuple = JIGSAWS_FEATURES
    decimation: int = 6
    user_pattern: str = DEFAULT_USER_PATTERN


@dataclass
class Sequence:
    trial_id: str
    user_id: str
    inputs: np.ndarray
    labels: np.ndarray
    label_mask: np.ndarray

    def __post_init__(self):
        T = self.inputs.shape[0]
        if self.labels.shape != (T,) or self.label_mask.shape != (T,):
            raise ContractError(
                f"{self.trial_id}: inputs have {T} frames but labels {self.labels.shape}, "
                f"mask {self.label_mask.shape}")

    def __len__(self):
        return self.inputs.shape[0]

    def segments(self):
        return to_segments(self.labels, self.label_mask)


@dataclass
class Dataset:
    sequences: list
    class_names: tuple
    feature_names: tuple
    normalization_stats: tuple = None
    manifest: dict = field(default_factory=dict)

    @property
    def n_x(self):
        return len(self.feature_names)

    @property
    def n_y(self):
        return len(self.class_names)

    @property
    def users(self):
        return sorted({s.user_id for s in self.sequences})

    def by_users(self, users):
        users = set(users)
        return [s for s in self.sequences if s.user_id in users]

    def normalizer(self):
        return dataset_normalizer([s.segments() for s in self.sequences])


def one_hot(label, n_y):
    if not 0 <= label < n_y:
        raise ContractError(f"label {label} out of range for {n_y} classes")
    v = np.zeros(n_y)
    v[label] = 1.0
    return v


# ---------------------------------------------------------------------------
# reading


def _read_kinematics(path):
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            fields = line.split()
            if not fields:
                continue
            if width is None:
                width = len(fields)
            elif len(fields) != width:
                raise DataError(f"{path}:{lineno}: expected {width} columns, found {len(fields)}")
            try:
                rows.append([float(v) for v in fields])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: no kinematic frames")
    return np.array(rows)


def _read_transcription(path, n_frames):
    spans = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 3:
                raise DataError(f"{path}:{lineno}: expected 'start end label', got {line.strip()!r}")
            try:
                start, end = int(fields[0]), int(fields[1])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer frame index") from None
            if not 1 <= start <= end:
                raise DataError(f"{path}:{lineno}: bad span {start}..{end}")
            if end > n_frames:
                raise DataError(f"{path}:{lineno}: span ends at frame {end} but the trial has {n_frames} frames")
            spans.append((start, end, fields[2]))
    return spans


def _find_kinematics(root, name):
    hits = sorted((root / "kinematics").rglob(name))
    if not hits:
        raise DataError(f"no kinematics file {name} under {root / 'kinematics'}")
    return hits[0]


def read_manifest(root):
    path = Path(root) / "manifest.json"
    if not path.exists():
        return {}
    with open(path) as fh:
        return json.load(fh)


def default_load_config(root, decimation=None):
    """JIGSAWS defaults, or the column map recorded in a synthetic manifest."""
    manifest = read_manifest(root)
    if manifest:
        cfg = LoadConfig(columns=None, feature_names=tuple(manifest["feature_names"]),
                         decimation=int(manifest.get("decimation", 1)))
    else:
        cfg = LoadConfig()
    if decimation is not None:
        cfg = replace(cfg, decimation=int(decimation))
    return cfg


def load_jigsaws(root, config=None):
    """Load every transcribed trial under ``root``.

    Frames outside all transcription spans get ``label_mask=False``. Classes
    are the transcription label names in lexicographic order. Decimation by
    ``k`` keeps frames 0, k, 2k, ... together with their labels.
    """
    root = Path(root)
    config = default_load_config(root) if config is None else config
    if config.decimation < 1:
        raise ContractError(f"decimation must be >= 1, got {config.decimation}")
    tdir = root / "transcriptions"
    if not tdir.is_dir():
        raise DataError(f"missing transcriptions directory {tdir}")
    tfiles = sorted(tdir.glob("*.txt"))
    if not tfiles:
        raise DataError(f"no transcription files in {tdir}")
    manifest = read_manifest(root)
    user_re = re.compile(config.user_pattern)

    raw = []
    names = set()
    for tpath in tfiles:
        kin = _read_kinematics(_find_kinematics(root, tpath.name))
        if config.columns is not None:
            if max(config.columns) >= kin.shape[1]:
                raise DataError(f"{tpath.name}: kinematics have {kin.shape[1]} columns, "
                                f"column map needs {max(config.columns) + 1}")
            kin = kin[:, list(config.columns)]
        spans = _read_transcription(tpath, kin.shape[0])
        names.update(s[2] for s in spans)
        m = user_re.search(tpath.stem)
        if m is None:
            raise DataError(f"{tpath.name}: cannot parse a user id with pattern {config.user_pattern!r}")
        raw.append((tpath.stem, m.group(1), kin, spans))

    class_names = tuple(manifest.get("class_names") or sorted(names))
    missing = names - set(class_names)
    if missing:
        raise DataError(f"transcription labels {sorted(missing)} are not in the manifest class list")
    index = {n: k for k, n in enumerate(class_names)}
    n_feat = raw[0][2].shape[1]
    if len(config.feature_names) != n_feat:
        raise DataError(f"{len(config.feature_names)} feature names for {n_feat} columns")

    sequences = []
    for trial, user, kin, spans in raw:
        if kin.shape[1] != n_feat:
            raise DataError(f"{trial}: {kin.shape[1]} feature columns, expected {n_feat}")
        T = kin.shape[0]
        labels = np.zeros(T, dtype=np.int64)
        mask = np.zeros(T, dtype=bool)
        for start, end, name in spans:
            labels[start - 1:end] = index[name]
            mask[start - 1:end] = True
        k = config.decimation
        sequences.append(Sequence(trial, user, kin[::k].copy(), labels[::k].copy(), mask[::k].copy()))

    for user in sorted({s.user_id for s in sequences}):
        if not any(s.label_mask.any() for s in sequences if s.user_id == user):
            raise DataError(f"user {user} has no labeled frames in any trial")
    return Dataset(sequences, class_names, tuple(config.feature_names), manifest=manifest)


# ---------------------------------------------------------------------------
# writing


def write_dataset(dataset, out_dir, task="Synth", extra_manifest=None):
    """Serialize to the on-disk layout above; output is byte-deterministic."""
    out = Path(out_dir)
    kdir = out / "kinematics" / "AllGestures"
    tdir = out / "transcriptions"
    kdir.mkdir(parents=True, exist_ok=True)
    tdir.mkdir(parents=True, exist_ok=True)
    for seq in dataset.sequences:
        name = f"{seq.trial_id}.txt"
        with open(kdir / name, "w") as fh:
            for row in seq.inputs:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")
        with open(tdir / name, "w") as fh:
            for seg in seq.segments():
                fh.write(f"{seg.start + 1} {seg.end} {dataset.class_names[seg.label]}\n")
    manifest = dict(dataset.manifest)
    manifest.update(extra_manifest or {})
    manifest.update(
        class_names=list(dataset.class_names),
        feature_names=list(dataset.feature_names),
        decimation=1,
    )
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# preprocessing and splits


def feature_stats(sequences):
    if not sequences:
        raise ContractError("standardization needs at least one training sequence")
    frames = np.concatenate([s.inputs for s in sequences])
    return frames.mean(axis=0), np.maximum(frames.std(axis=0), 1e-8)


def standardize(dataset, stats_source):
    """Z-score every sequence with statistics of ``stats_source`` only."""
    mean, std = feature_stats(stats_source)
    seqs = [replace(s, inputs=(s.inputs - mean) / std) for s in dataset.sequences]
    return replace(dataset, sequences=seqs, normalization_stats=(mean, std))


@dataclass(frozen=True)
class Run:
    index: int
    held_out_user: str
    train_users: tuple
    normalizer: int


def louo_splits(dataset):
    """One run per user: train on everyone else, test on that user."""
    users = dataset.users
    if len(users) < 2:
        raise ContractError(f"leave-one-user-out needs >= 2 users, got {len(users)}")
    normalizer = dataset.normalizer()
    return [
        Run(k, u, tuple(v for v in users if v != u), normalizer)
        for k, u in enumerate(users)
    ]


def _user_names(n_users):
    if not 1 <= n_users <= 26:
        raise ContractError(f"n_users must be in 1..26, got {n_users}")
    return [chr(ord("A") + k) for k in range(n_users)]


def synth_longrange(rng, n_sequences, T, lag, noise=0.2, n_users=1):
    """Delayed sign recall.

    Each frame carries a random +-1 plus uniform noise of amplitude ``noise``
    (< 1, so the sign survives). Frame ``t >= lag`` is labelled with the sign
    class (0 negative, 1 positive) of frame ``t - lag``; earlier frames are
    masked.
    """
    if not 0 <= lag < T:
        raise ContractError(f"lag must satisfy 0 <= lag < T, got lag={lag}, T={T}")
    if not 0 <= noise < 1:
        raise ContractError(f"noise amplitude must be in [0, 1), got {noise}")
    users = _user_names(n_users)
    seqs = []
    for k in range(n_sequences):
        signs = np.where(rng.uniform(T) < 0.5, -1.0, 1.0)
        x = signs + noise * (2.0 * rng.uniform(T) - 1.0)
        labels = np.zeros(T, dtype=np.int64)
        labels[lag:] = (signs[:T - lag] > 0).astype(np.int64)
        mask = np.arange(T) >= lag
        user = users[k % n_users]
        seqs.append(Sequence(f"Longrange_{user}{k:03d}", user, x[:, None], labels, mask))
    manifest = {"generator": "longrange", "n_sequences": n_sequences, "T": T, "lag": lag,
                "noise": noise, "n_users": n_users}
    return Dataset(seqs, ("neg", "pos"), ("signal",), manifest=manifest)


def _smooth_latent(rng, T, dim, periods=(40.0, 120.0)):
    t = np.arange(T)[:, None]
    freq = 1.0 / (periods[0] + (periods[1] - periods[0]) * rng.uniform((1, dim)))
    phase = 2 * np.pi * rng.uniform((1, dim))
    return np.sin(2 * np.pi * freq * t + phase)


def synth_regimes(rng, n_sequences, n_users, T, n_classes, noise=0.2, mean_segment=20.0,
                  n_features=6, latent_dim=3, user_distortion=0.05):
    """Piecewise-constant regimes observed through regime-specific linear maps.

    A hidden regime track has geometric segment lengths (mean ``mean_segment``)
    and never repeats a regime across a boundary. Each regime maps the latent
    ``[1, smooth_1, ..., smooth_d]`` through its own random matrix; the constant
    component gives regimes distinct offsets. Each user applies a fixed random
    affine distortion, then Gaussian noise of std ``noise`` is added.
    Sequences are assigned to users round-robin.
    """
    if n_classes < 2:
        raise ContractError(f"n_classes must be >= 2, got {n_classes}")
    users = _user_names(n_users)
    maps = rng.normal((n_classes, n_features, latent_dim + 1))
    distort = {
        u: (np.eye(n_features) + user_distortion * rng.normal((n_features, n_features)),
            user_distortion * rng.normal(n_features))
        for u in users
    }
    p_switch = 1.0 / mean_segment
    seqs = []
    for k in range(n_sequences):
        user = users[k % n_users]
        regimes = np.empty(T, dtype=np.int64)
        switches = rng.uniform(T)
        choices = rng.uniform(T)
        regimes[0] = int(choices[0] * n_classes)
        for t in range(1, T):
            if switches[t] < p_switch:
                step = 1 + int(choices[t] * (n_classes - 1))
                regimes[t] = (regimes[t - 1] + step) % n_classes
            else:
                regimes[t] = regimes[t - 1]
        latent = np.hstack([np.ones((T, 1)), _smooth_latent(rng, T, latent_dim)])
        clean = np.einsum("tfd,td->tf", maps[regimes], latent)
        D, e = distort[user]
        x = clean @ D.T + e + noise * rng.normal((T, n_features))
        seqs.append(Sequence(f"Regimes_{user}{k:03d}", user, x, regimes, np.ones(T, dtype=bool)))
    manifest = {"generator": "regimes", "n_sequences": n_sequences, "n_users": n_users, "T": T,
                "n_classes": n_classes, "noise": noise, "mean_segment": mean_segment,
                "user_distortion": user_distortion}
    width = max(1, len(str(n_classes - 1)))
    class_names = tuple(f"R{c:0{width}d}" for c in range(n_classes))
    return Dataset(seqs, class_names, tuple(f"f{j}" for j in range(n_features)), manifest=manifest)


def expected_segments(T, mean_segment=20.0):
    """Expected segment count of a regime track: 1 + (T - 1) * p_switch."""
    return 1.0 + (T - 1) / mean_segment


def synthesize(kind, seed, **params):
    """Generator dispatch used by the CLI and manifests."""
    rng = Rng(seed)
    if kind == "longrange":
        ds = synth_longrange(rng, **params)
    elif kind == "regimes":
        ds = synth_regimes(rng, **params)
    else:
        raise ContractError(f"unknown synthetic dataset kind {kind!r}")
    ds.manifest.update(params)
    ds.manifest["seed"] = int(seed)
    return ds


__all__ = [
    "LoadConfig", "Sequence", "Dataset", "Run", "one_hot", "load_jigsaws", "write_dataset",
    "standardize", "feature_stats", "louo_splits", "synth_longrange", "synth_regimes",
    "synthesize", "default_load_config", "read_manifest", "expected_segments",
    "JIGSAWS_COLUMNS", "JIGSAWS_FEATURES",
]
