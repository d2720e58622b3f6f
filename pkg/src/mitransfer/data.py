"""Epoched EEG datasets: the MIEP file format, standardization and a
synthetic motor-imagery generator.

MIEP layout (little-endian), one file per subject named ``<id>.miep``::

    offset  type      field
    0       4 bytes   magic "MIEP"
    4       u16       version (= 1)
    6       u32       n_trials
    10      u16       n_channels
    12      u32       n_samples
    16      f32       sample_rate
    20      u8[n]     labels (0 = left hand, 1 = right hand)
    20+n    f32[...]  samples, trial-major then channel-major

The channel names live in an optional ``montage.txt`` next to the files.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"MIEP"
VERSION = 1
HEADER = struct.Struct("<4sHIHIf")
HEADER_SIZE = HEADER.size  # 20

MONTAGE_16 = (
    "F3", "Fz", "F4", "FC1", "FC5", "FC2", "FC6", "C3",
    "Cz", "C4", "CP1", "CP5", "CP2", "CP6", "T7", "T8",
)  # fmt: skip
MONTAGE_FILE = "montage.txt"

# Graz trial timeline: fixation 3 s, cue 1.25 s, feedback 3.75 s.
TRIAL_SECONDS = 3.0 + 1.25 + 3.75
CUE_ONSET_FRACTION = 3.0 / TRIAL_SECONDS


class FormatError(ValueError):
    """A MIEP file or directory is malformed."""


class GeometryError(FormatError):
    """Subjects disagree on channel count, epoch length or sample rate."""


class ConfigError(ValueError):
    pass


@dataclass
class SubjectRecord:
    subject_id: str
    trials: np.ndarray  # (n_trials, n_channels, n_samples) float32
    labels: np.ndarray  # (n_trials,) uint8 in {0, 1}

    def __post_init__(self):
        self.trials = np.asarray(self.trials, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.trials.ndim != 3:
            raise ValueError(f"trials must be 3-D, got shape {self.trials.shape}")
        if len(self.labels) != len(self.trials):
            raise ValueError(f"{len(self.trials)} trials but {len(self.labels)} labels")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 (left) or 1 (right)")

    @property
    def n_trials(self) -> int:
        return len(self.labels)


@dataclass
class EpochedDataset:
    subjects: list[SubjectRecord]
    montage: tuple[str, ...] = MONTAGE_16
    sample_rate_hz: float = 250.0

    def __post_init__(self):
        self.montage = tuple(self.montage)
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        ids = [s.subject_id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise ValueError("subject ids must be unique")
        for s in self.subjects:
            if s.trials.shape[1:] != (len(self.montage), self.n_samples):
                raise GeometryError(
                    f"subject {s.subject_id}: geometry {s.trials.shape[1:]} "
                    f"!= ({len(self.montage)}, {self.n_samples})"
                )

    @property
    def n_channels(self) -> int:
        return len(self.montage)

    @property
    def n_samples(self) -> int:
        return self.subjects[0].trials.shape[2] if self.subjects else 0

    @property
    def subject_ids(self) -> list[str]:
        return [s.subject_id for s in self.subjects]

    @property
    def total_trials(self) -> int:
        return sum(s.n_trials for s in self.subjects)

    def subject(self, subject_id: str) -> SubjectRecord:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise KeyError(subject_id)

    def stack(self, subject_ids: Sequence[str]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Concatenate trials, labels and subject indices for ``subject_ids``."""
        records = [self.subject(i) for i in subject_ids]
        X = np.concatenate([r.trials for r in records], axis=0)
        y = np.concatenate([r.labels for r in records]).astype(np.int64)
        groups = np.concatenate([np.full(r.n_trials, k) for k, r in enumerate(records)])
        return X, y, groups

    def with_labels(self, labels_by_subject: dict[str, np.ndarray]) -> "EpochedDataset":
        subjects = [SubjectRecord(s.subject_id, s.trials, labels_by_subject[s.subject_id]) for s in self.subjects]
        return EpochedDataset(subjects, self.montage, self.sample_rate_hz)


# ----------------------------------------------------------------------
# MIEP I/O


def write_subject(record: SubjectRecord, path, sample_rate: float) -> None:
    n, c, t = record.trials.shape
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, n, c, t, sample_rate))
        fh.write(record.labels.astype(np.uint8).tobytes())
        fh.write(np.ascontiguousarray(record.trials, dtype="<f4").tobytes())


def read_subject(path) -> tuple[SubjectRecord, float]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: truncated header at offset {len(raw)} (need {HEADER_SIZE} bytes)")
    magic, version, n, c, t, rate = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    if c == 0 or t == 0:
        raise FormatError(f"{path}: empty geometry ({c} channels, {t} samples) at offset 10")
    if not np.isfinite(rate) or rate <= 0:
        raise FormatError(f"{path}: invalid sample rate {rate} at offset 16")
    expected = HEADER_SIZE + n + 4 * n * c * t
    if len(raw) < expected:
        offset = HEADER_SIZE + n if len(raw) >= HEADER_SIZE + n else HEADER_SIZE
        raise FormatError(f"{path}: payload truncated at offset {len(raw)} (expected {expected} bytes, section at {offset})")
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} unexpected trailing bytes at offset {expected}")
    labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=HEADER_SIZE).copy()
    bad = np.nonzero(labels > 1)[0]
    if len(bad):
        raise FormatError(f"{path}: invalid label {labels[bad[0]]} at offset {HEADER_SIZE + bad[0]}")
    trials = np.frombuffer(raw, dtype="<f4", count=n * c * t, offset=HEADER_SIZE + n).reshape(n, c, t)
    return SubjectRecord(path.stem, trials.astype(np.float32), labels), float(rate)


def save_dataset(dataset: EpochedDataset, path) -> None:
    if not dataset.subjects:
        raise ValueError("dataset has no subjects; nothing to write")
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for record in dataset.subjects:
        write_subject(record, root / f"{record.subject_id}.miep", dataset.sample_rate_hz)
    (root / MONTAGE_FILE).write_text("\n".join(dataset.montage) + "\n")


def load_dataset(path) -> EpochedDataset:
    """Load every ``*.miep`` file under ``path``, sorted by subject id."""
    root = Path(path)
    if not root.is_dir():
        raise FormatError(f"{root}: not a directory")
    files = sorted(root.glob("*.miep"))
    if not files:
        raise FormatError(f"{root}: no .miep files found")
    subjects = []
    geometry = None
    rate = None
    for f in files:
        record, r = read_subject(f)
        g = record.trials.shape[1:]
        if geometry is None:
            geometry, rate = g, r
        elif g != geometry:
            raise GeometryError(f"{f}: geometry {g} differs from {geometry} in {files[0].name} (header offset 10)")
        elif r != rate:
            raise GeometryError(f"{f}: sample rate {r} differs from {rate} in {files[0].name} (header offset 16)")
        subjects.append(record)
    montage_path = root / MONTAGE_FILE
    if montage_path.exists():
        montage = tuple(line.strip() for line in montage_path.read_text().splitlines() if line.strip())
        if len(montage) != geometry[0]:
            raise GeometryError(f"{montage_path}: {len(montage)} names for {geometry[0]} channels")
    elif geometry[0] == len(MONTAGE_16):
        montage = MONTAGE_16
    else:
        montage = tuple(f"Ch{i + 1}" for i in range(geometry[0]))
    return EpochedDataset(subjects, montage, rate)


def export_csv(dataset: EpochedDataset, path) -> None:
    """One row per (trial, channel): subject, trial, label, channel, samples..."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "trial", "label", "channel"] + [f"s{i}" for i in range(dataset.n_samples)])
        for s in dataset.subjects:
            for t in range(s.n_trials):
                for c, name in enumerate(dataset.montage):
                    writer.writerow([s.subject_id, t, int(s.labels[t]), name] + [repr(float(v)) for v in s.trials[t, c]])


# ----------------------------------------------------------------------
# standardization


STD_FLOOR = 1e-8


def channel_stats(trials: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over trials and samples (float64)."""
    x = np.asarray(trials, dtype=np.float64)
    mean = x.mean(axis=(0, 2))
    std = np.maximum(x.std(axis=(0, 2)), STD_FLOOR)
    return mean, std


def apply_standardization(trials: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    out = (np.asarray(trials, dtype=np.float64) - mean[None, :, None]) / std[None, :, None]
    return out.astype(np.asarray(trials).dtype)


def standardize(train: np.ndarray, apply_to: Sequence[np.ndarray]) -> tuple[list[np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """Z-score each array in ``apply_to`` with statistics of ``train`` only."""
    mean, std = channel_stats(train)
    return [apply_standardization(a, mean, std) for a in apply_to], (mean, std)


# ----------------------------------------------------------------------
# synthetic data


@dataclass
class SynthConfig:
    n_subjects: int = 8
    trials_per_subject: int = 120
    n_channels: int = 16
    n_samples: int = 2000
    sample_rate: float = 250.0
    erd_depth: float = 0.8
    noise_scale: float = 1.0
    seed: int = 0
    mu_amplitude: float = 1.0
    mu_frequency: float = 10.0
    montage: tuple[str, ...] | None = None

    def __post_init__(self):
        if not 0.0 <= self.erd_depth <= 1.0:
            raise ConfigError(f"erd_depth must be in [0, 1], got {self.erd_depth}")
        if self.n_subjects < 1 or self.trials_per_subject < 1:
            raise ConfigError("need at least one subject and one trial")
        if self.montage is None:
            if self.n_channels != len(MONTAGE_16):
                raise ConfigError(f"no default montage for {self.n_channels} channels; pass one explicitly")
            self.montage = MONTAGE_16
        self.montage = tuple(self.montage)
        if len(self.montage) != self.n_channels:
            raise ConfigError(f"montage has {len(self.montage)} names for {self.n_channels} channels")
        if "C3" not in self.montage or "C4" not in self.montage:
            raise ConfigError("montage must contain C3 and C4")


def pink_noise(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Unit-variance 1/f noise along the last axis."""
    n = shape[-1]
    spectrum = rng.normal(size=shape[:-1] + (n // 2 + 1,)) + 1j * rng.normal(size=shape[:-1] + (n // 2 + 1,))
    f = np.arange(n // 2 + 1, dtype=np.float64)
    f[0] = 1.0
    spectrum /= np.sqrt(f)
    spectrum[..., 0] = 0.0
    x = np.fft.irfft(spectrum, n=n, axis=-1)
    return x / x.std(axis=-1, keepdims=True)


def synthesize_subject(cfg: SynthConfig, subject_index: int, rng: np.random.Generator) -> SubjectRecord:
    n, c, t = cfg.trials_per_subject, cfg.n_channels, cfg.n_samples
    c3, c4 = cfg.montage.index("C3"), cfg.montage.index("C4")
    time = np.arange(t) / cfg.sample_rate
    onset = int(round(CUE_ONSET_FRACTION * t))

    labels = np.zeros(n, dtype=np.uint8)
    labels[n // 2 :] = 1
    labels = rng.permutation(labels)

    channel_gain = rng.uniform(0.8, 1.2, size=c)
    mu_gain = rng.uniform(0.7, 1.3)
    mu_freq = cfg.mu_frequency + rng.uniform(-0.5, 0.5)

    trials = cfg.noise_scale * pink_noise(rng, (n, c, t))
    phase = rng.uniform(0, 2 * np.pi, size=(n, 2))
    jitter = rng.uniform(0.9, 1.1, size=(n, 2))
    for k, ch in enumerate((c3, c4)):
        envelope = np.ones((n, t))
        # right-hand imagery (1) suppresses mu over the left hemisphere (C3), left (0) over C4
        contralateral = labels == (1 if ch == c3 else 0)
        envelope[np.ix_(contralateral, np.arange(onset, t))] = 1.0 - cfg.erd_depth
        mu = np.sin(2 * np.pi * mu_freq * time[None, :] + phase[:, k : k + 1])
        trials[:, ch, :] += cfg.mu_amplitude * mu_gain * jitter[:, k : k + 1] * envelope * mu
    trials *= channel_gain[None, :, None]
    width = len(str(cfg.n_subjects))
    return SubjectRecord(f"S{subject_index + 1:0{max(2, width)}d}", trials.astype(np.float32), labels)


def synthesize_dataset(cfg: SynthConfig) -> EpochedDataset:
    """Deterministic synthetic left/right motor-imagery dataset.

    Each trial is per-channel pink noise plus a mu rhythm on C3 and C4.  After
    the cue, mu amplitude over the hemisphere opposite the imagined hand is
    scaled by ``1 - erd_depth``.  Subjects differ in channel gains, mu gain
    and mu frequency.
    """
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_subjects)
    subjects = [synthesize_subject(cfg, i, np.random.default_rng(s)) for i, s in enumerate(seeds)]
    return EpochedDataset(subjects, cfg.montage, cfg.sample_rate)


def mu_bandpower(trials: np.ndarray, channel: int, sample_rate: float, start: int = 0, band=(8.0, 12.0)) -> np.ndarray:
    """Mean periodogram power in ``band`` for one channel from sample ``start``."""
    seg = np.asarray(trials[:, channel, start:], dtype=np.float64)
    seg = seg - seg.mean(axis=-1, keepdims=True)
    freqs = np.fft.rfftfreq(seg.shape[-1], d=1.0 / sample_rate)
    power = np.abs(np.fft.rfft(seg, axis=-1)) ** 2
    mask = (freqs >= band[0]) & (freqs <= band[1])
    return power[:, mask].mean(axis=-1)


def bandpower_classifier(trials: np.ndarray, montage: Sequence[str], sample_rate: float) -> np.ndarray:
    """Training-free left/right decision from post-cue C3 vs C4 mu power.

    Lower mu power at C3 than C4 means right-hand imagery (label 1).
    """
    start = int(round(CUE_ONSET_FRACTION * trials.shape[-1]))
    p3 = mu_bandpower(trials, list(montage).index("C3"), sample_rate, start)
    p4 = mu_bandpower(trials, list(montage).index("C4"), sample_rate, start)
    return (np.log(p3) < np.log(p4)).astype(np.int64)
