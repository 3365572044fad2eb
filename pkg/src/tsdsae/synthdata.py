"""Deterministic toy spectrogram sequences with global and local factors.

A sequence is a melody (local factor: one pitch per note) rendered with an
instrument (global: overtone strength) in an octave (global: pitch offset).
Each frame column holds a Gaussian bump at the fundamental bin plus a weaker
bump ``overtone_offset`` bins above it whose height identifies the instrument.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ContractError
from .rng import Rng

MAGIC = b"DSEQ1\0"
VERSION = 1
_HEADER = struct.Struct("<6sIIIII")

BUMP_WIDTH = 0.8
OVERTONE_OFFSET = 8
OVERTONE_AMPS = (0.2, 0.8)
NOISE_STD = 0.01
MAX_VALUE = 1.2


class DatasetFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class FactorSpec:
    n_instruments: int = 2
    octaves: int = 1
    n_notes: int = 8
    note_len: int = 3
    d_bins: int = 32
    pitch_range: int = 8
    base_bin: int = 4
    octave_offset: int = 8

    def __post_init__(self):
        for name, lo in (("n_instruments", 1), ("octaves", 1), ("n_notes", 1), ("note_len", 1),
                         ("d_bins", 1), ("pitch_range", 1), ("base_bin", 0), ("octave_offset", 0)):
            if getattr(self, name) < lo:
                raise ValueError(f"FactorSpec.{name} must be >= {lo}")
        if self.n_instruments > len(OVERTONE_AMPS):
            raise ValueError(f"FactorSpec.n_instruments must be <= {len(OVERTONE_AMPS)}")
        top = self.base_bin + (self.octaves - 1) * self.octave_offset + self.pitch_range + OVERTONE_OFFSET
        if top > self.d_bins:
            raise ValueError(f"FactorSpec.d_bins: rendered energy reaches bin {top - 1} >= {self.d_bins}")

    @property
    def seq_len(self) -> int:
        return self.n_notes * self.note_len

    @property
    def n_factors(self) -> int:
        return 2 if self.octaves > 1 else 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SequenceRecord:
    x: np.ndarray  # [D, T]
    instrument: int
    octave: int = 0
    melody: list[int] | None = None

    def labels(self, n_factors: int) -> list[int]:
        return [self.instrument, self.octave][:n_factors]


@dataclass
class Dataset:
    records: list[SequenceRecord]
    split: str = "train"
    spec: FactorSpec | None = None
    seed: int | None = None
    n_factors: int = 1
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def stacked(self) -> np.ndarray:
        """All sequences as a float64 array [N, D, T]."""
        return np.stack([r.x for r in self.records]).astype(np.float64)

    def labels(self, factor: str) -> np.ndarray:
        return np.array([getattr(r, factor) for r in self.records], dtype=np.int64)

    @property
    def factor_names(self) -> list[str]:
        return ["instrument", "octave"][: self.n_factors]


def sample_melody(rng: Rng, spec: FactorSpec) -> list[int]:
    return [rng.below(spec.pitch_range) for _ in range(spec.n_notes)]


def bump(d: np.ndarray, centre: float, width: float = BUMP_WIDTH) -> np.ndarray:
    return np.exp(-0.5 * ((d - centre) / width) ** 2)


def fundamental_bins(melody, octave: int, spec: FactorSpec) -> np.ndarray:
    """Fundamental bin of every frame."""
    notes = np.asarray(melody, dtype=np.int64)
    return spec.base_bin + octave * spec.octave_offset + np.repeat(notes, spec.note_len)


def render_sequence(melody, instrument: int, octave: int, spec: FactorSpec,
                    rng: Rng | None = None) -> np.ndarray:
    """Spectrogram [D, T]; noise is added only when ``rng`` is given."""
    if not 0 <= instrument < spec.n_instruments:
        raise ContractError(f"instrument {instrument} outside [0, {spec.n_instruments})")
    if not 0 <= octave < spec.octaves:
        raise ContractError(f"octave {octave} outside [0, {spec.octaves})")
    if len(melody) != spec.n_notes or any(not 0 <= m < spec.pitch_range for m in melody):
        raise ContractError(f"melody must hold {spec.n_notes} pitches in [0, {spec.pitch_range})")
    p = fundamental_bins(melody, octave, spec)
    d = np.arange(spec.d_bins, dtype=np.float64)[:, None]
    x = bump(d, p[None, :]) + OVERTONE_AMPS[instrument] * bump(d, p[None, :] + OVERTONE_OFFSET)
    if rng is not None:
        x = x + NOISE_STD * rng.normal(x.shape)
    return np.clip(x, 0.0, MAX_VALUE)


def generate_dataset(spec: FactorSpec, n_sequences: int, seed: int,
                     noise: bool = True) -> tuple[Dataset, Dataset]:
    """Balanced factor assignment, random melodies, fixed 80/20 split.

    Record k gets factor combination k mod (instruments x octaves); every
    fifth record goes to validation, so both splits stay balanced. Each split
    is shuffled afterwards. Values are rounded to float32, the file precision.
    """
    if n_sequences < 10:
        raise ContractError("generate_dataset needs at least 10 sequences")
    rng = Rng(seed)
    combos = [(i, o) for o in range(spec.octaves) for i in range(spec.n_instruments)]
    train, val = [], []
    for k in range(n_sequences):
        inst, octv = combos[k % len(combos)]
        melody = sample_melody(rng, spec)
        x = render_sequence(melody, inst, octv, spec, rng if noise else None).astype(np.float32)
        rec = SequenceRecord(x, inst, octv, melody)
        (val if k % 5 == 4 else train).append(rec)
    train = [train[i] for i in rng.permutation(len(train))]
    val = [val[i] for i in rng.permutation(len(val))]
    meta = {"seed": seed, "n_sequences": n_sequences, "noise": noise}
    return (
        Dataset(train, "train", spec, seed, spec.n_factors, dict(meta)),
        Dataset(val, "val", spec, seed, spec.n_factors, dict(meta)),
    )


def duplicate_count(records) -> int:
    keys = [(tuple(r.melody), r.instrument, r.octave) for r in records]
    return len(keys) - len(set(keys))


# ---------------------------------------------------------------------------
# binary file format

def dataset_bytes(ds: Dataset) -> bytes:
    if not ds.records:
        raise ContractError("cannot serialise an empty dataset")
    D, T = ds.records[0].x.shape
    body = [_HEADER.pack(MAGIC, VERSION, len(ds.records), T, D, ds.n_factors)]
    for r in ds.records:
        if r.x.shape != (D, T):
            raise ContractError(f"record shape {r.x.shape} differs from {(D, T)}")
        # frames consecutive, D values per frame
        body.append(np.ascontiguousarray(r.x.T, dtype="<f4").tobytes())
        body.append(bytes(r.labels(ds.n_factors)))
    blob = b"".join(body)
    return blob + struct.pack("<I", zlib.crc32(blob))


def write_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def parse_dataset(blob: bytes, split: str = "train") -> Dataset:
    if len(blob) < _HEADER.size + 4:
        raise DatasetFormatError("file shorter than header", len(blob))
    magic, version, n, T, D, nf = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 6)
    if nf not in (1, 2):
        raise DatasetFormatError(f"unsupported factor count {nf}", 22)
    rec_size = 4 * D * T + nf
    expected = _HEADER.size + n * rec_size + 4
    if len(blob) != expected:
        raise DatasetFormatError(f"expected {expected} bytes, found {len(blob)}", min(len(blob), expected))
    (crc,) = struct.unpack_from("<I", blob, expected - 4)
    if crc != zlib.crc32(blob[: expected - 4]):
        raise DatasetFormatError("CRC32 mismatch", expected - 4)
    records = []
    off = _HEADER.size
    for _ in range(n):
        frames = np.frombuffer(blob, dtype="<f4", count=D * T, offset=off).reshape(T, D)
        labels = blob[off + 4 * D * T : off + rec_size]
        x = np.ascontiguousarray(frames.T).astype(np.float32)
        records.append(SequenceRecord(x, labels[0], labels[1] if nf > 1 else 0))
        off += rec_size
    return Dataset(records, split, None, None, nf)


def read_dataset(path, split: str | None = None) -> Dataset:
    path = Path(path)
    if split is None:
        split = "val" if "val" in path.stem else "train"
    return parse_dataset(path.read_bytes(), split)
