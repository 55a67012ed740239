"""Corpus handling: binary feature files, manifests, alignments, synthesis.

Feature files are a fixed little-endian binary layout: magic ``SSF1``,
uint32 frame count m, uint32 dimension d, then m*d float32 values in
row-major order. Manifests and alignments are TSV. The synthetic generator
produces a corpus with known phone units: each phone has a fixed prototype
vector, each speaker adds a fixed offset, and frames get i.i.d. Gaussian
noise on top.
"""

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

FEATURE_MAGIC = b"SSF1"
_HEADER = struct.Struct("<4sII")


def _open_read(path, mode="r"):
    try:
        if "b" in mode:
            return open(path, mode)
        return open(path, mode, encoding="utf-8")
    except OSError as exc:
        raise ContractError("cannot read %s: %s" % (path, exc))


def write_features(path, matrix):
    """Write an (m, d) matrix as float32 little-endian with the SSF1 header."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ContractError("write_features: expected a 2-d matrix")
    if not np.all(np.isfinite(matrix)):
        raise ContractError("write_features: matrix must be finite")
    m, d = matrix.shape
    payload = matrix.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, m, d))
        fh.write(payload)


def read_feature_header(path):
    """Return (m, d) without loading the data."""
    with _open_read(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise ContractError("feature file %s: truncated header" % path)
    magic, m, d = _HEADER.unpack(head)
    if magic != FEATURE_MAGIC:
        raise ContractError("feature file %s: bad magic %r" % (path, magic))
    return m, d


def read_features(path):
    """Load a feature file back as a float64 (m, d) matrix."""
    with _open_read(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise ContractError("feature file %s: truncated header" % path)
    magic, m, d = _HEADER.unpack(blob[:_HEADER.size])
    if magic != FEATURE_MAGIC:
        raise ContractError("feature file %s: bad magic %r" % (path, magic))
    expected = _HEADER.size + 4 * m * d
    if len(blob) != expected:
        raise ContractError("feature file %s: size %d does not match header "
                            "(expected %d)" % (path, len(blob), expected))
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size)
    matrix = data.reshape(m, d).astype(np.float64)
    if not np.all(np.isfinite(matrix)):
        raise ContractError("feature file %s: non-finite values" % path)
    return matrix


@dataclass(frozen=True)
class FeatureSequence:
    utterance_id: str
    speaker_id: str
    data: np.ndarray


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    speaker_id: str
    subset: str
    path: str


def load_manifest(path):
    """Parse a manifest TSV; ids must be unique and files must exist."""
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    seen = set()
    with _open_read(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 4:
                raise ContractError("manifest %s line %d: expected 4 columns, got %d"
                                    % (path, lineno, len(cols)))
            utt, spk, subset, rel = cols
            if utt in seen:
                raise ContractError("manifest %s line %d: duplicate utterance id %r"
                                    % (path, lineno, utt))
            seen.add(utt)
            full = os.path.join(base, rel)
            if not os.path.isfile(full):
                raise ContractError("manifest %s line %d: missing feature file %s"
                                    % (path, lineno, full))
            entries.append(ManifestEntry(utt, spk, subset, full))
    if not entries:
        raise ContractError("manifest %s: no entries" % path)
    return entries


def write_manifest(path, entries):
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            rel = os.path.relpath(e.path, base)
            fh.write("%s\t%s\t%s\t%s\n" % (e.utterance_id, e.speaker_id, e.subset, rel))


def load_alignments(path):
    """Parse alignment TSV into {utterance_id: [(start, end, phone), ...]}.

    Rows per utterance must be sorted, non-overlapping, half-open intervals.
    """
    out = {}
    with _open_read(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 4:
                raise ContractError("alignments %s line %d: expected 4 columns"
                                    % (path, lineno))
            utt, start, end, phone = cols
            try:
                start = int(start)
                end = int(end)
            except ValueError:
                raise ContractError("alignments %s line %d: bad frame index"
                                    % (path, lineno)) from None
            if start < 0 or end <= start:
                raise ContractError("alignments %s line %d: bad interval [%d, %d)"
                                    % (path, lineno, start, end))
            out.setdefault(utt, []).append((start, end, phone))
    for utt, rows in out.items():
        for prev, cur in zip(rows, rows[1:]):
            if cur[0] < prev[1]:
                raise ContractError("alignments %s: utterance %s has overlapping or "
                                    "unsorted rows" % (path, utt))
    return out


def write_alignments(path, alignments):
    with open(path, "w", encoding="utf-8") as fh:
        for utt in sorted(alignments):
            for start, end, phone in alignments[utt]:
                fh.write("%s\t%d\t%d\t%s\n" % (utt, start, end, phone))


def load_transcripts(path):
    """Parse transcript TSV: utterance_id TAB space-separated phone symbols."""
    out = {}
    with _open_read(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise ContractError("transcripts %s line %d: expected 2 columns"
                                    % (path, lineno))
            utt, phones = cols
            if utt in out:
                raise ContractError("transcripts %s line %d: duplicate utterance %r"
                                    % (path, lineno, utt))
            out[utt] = phones.split()
    return out


def load_phone_inventory(path):
    with _open_read(path) as fh:
        phones = [line.strip() for line in fh if line.strip()]
    if len(phones) != len(set(phones)):
        raise ContractError("phone inventory %s: duplicate symbols" % path)
    if not phones:
        raise ContractError("phone inventory %s: empty" % path)
    return phones


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic corpus generator."""

    phones: int = 8
    speakers: int = 4
    utterances: int = 400
    phones_per_utterance: tuple = (6, 10)
    frames_per_phone: tuple = (4, 10)
    feature_dim: int = 13
    prototype_scale: float = 1.0
    speaker_offset_scale: float = 0.75
    noise_scale: float = 0.3
    subset_fractions: tuple = field(default=(("train", 0.8), ("dev", 0.1), ("test", 0.1)))
    seed: int = 0

    def __post_init__(self):
        if self.phones < 3:
            raise ContractError("SynthSpec: need at least 3 phones")
        if self.speakers < 1 or self.utterances < 1:
            raise ContractError("SynthSpec: speakers and utterances must be >= 1")
        lo, hi = self.phones_per_utterance
        if lo < 1 or hi < lo:
            raise ContractError("SynthSpec: bad phones_per_utterance range")
        lo, hi = self.frames_per_phone
        if lo < 1 or hi < lo:
            raise ContractError("SynthSpec: bad frames_per_phone range")
        if self.feature_dim < 1:
            raise ContractError("SynthSpec: feature_dim must be >= 1")
        if self.noise_scale < 0 or self.prototype_scale <= 0 or self.speaker_offset_scale < 0:
            raise ContractError("SynthSpec: bad scale")


def _assign_subsets(spec, rng):
    n = spec.utterances
    order = rng.permutation(n)
    labels = [None] * n
    start = 0
    for i, (name, frac) in enumerate(spec.subset_fractions):
        count = int(round(frac * n)) if i < len(spec.subset_fractions) - 1 else n - start
        for j in order[start:start + count]:
            labels[j] = name
        start += count
    if start != n or any(l is None for l in labels):
        raise ContractError("SynthSpec: subset fractions must cover all utterances")
    return labels


def generate_synthetic(spec, out_dir):
    """Write a complete synthetic corpus; byte-identical for equal specs.

    Layout under out_dir: manifest.tsv, alignments.tsv, transcripts.tsv,
    phones.txt, feats/<utt>.ssf. Returns the manifest entries.
    """
    parent = os.path.dirname(os.path.abspath(out_dir))
    if not os.path.isdir(parent):
        raise ContractError("generate_synthetic: parent directory %s missing" % parent)
    os.makedirs(out_dir, exist_ok=True)
    feat_dir = os.path.join(out_dir, "feats")
    os.makedirs(feat_dir, exist_ok=True)

    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    phones = ["p%d" % i for i in range(spec.phones)]
    speakers = ["s%d" % i for i in range(spec.speakers)]
    prototypes = rng.normal(size=(spec.phones, spec.feature_dim)) * spec.prototype_scale
    offsets = rng.normal(size=(spec.speakers, spec.feature_dim)) * spec.speaker_offset_scale
    subsets = _assign_subsets(spec, rng)

    entries = []
    alignments = {}
    transcripts = {}
    for u in range(spec.utterances):
        utt = "utt%04d" % u
        spk_idx = int(rng.integers(spec.speakers))
        lo, hi = spec.phones_per_utterance
        n_tokens = int(rng.integers(lo, hi + 1))
        seq = []
        for t in range(n_tokens):
            if t == 0:
                pick = int(rng.integers(spec.phones))
            else:
                pick = int(rng.integers(spec.phones - 1))
                if pick >= seq[-1]:
                    pick += 1
            seq.append(pick)
        flo, fhi = spec.frames_per_phone
        durations = [int(rng.integers(flo, fhi + 1)) for _ in seq]
        frames = []
        rows = []
        cursor = 0
        for pidx, dur in zip(seq, durations):
            noise = rng.normal(size=(dur, spec.feature_dim)) * spec.noise_scale
            frames.append(prototypes[pidx] + offsets[spk_idx] + noise)
            rows.append((cursor, cursor + dur, phones[pidx]))
            cursor += dur
        matrix = np.concatenate(frames, axis=0)
        rel = os.path.join("feats", utt + ".ssf")
        full = os.path.join(out_dir, rel)
        write_features(full, matrix)
        entries.append(ManifestEntry(utt, speakers[spk_idx], subsets[u], full))
        alignments[utt] = rows
        transcripts[utt] = [phones[p] for p in seq]

    write_manifest(os.path.join(out_dir, "manifest.tsv"), entries)
    write_alignments(os.path.join(out_dir, "alignments.tsv"), alignments)
    with open(os.path.join(out_dir, "transcripts.tsv"), "w", encoding="utf-8") as fh:
        for utt in sorted(transcripts):
            fh.write("%s\t%s\n" % (utt, " ".join(transcripts[utt])))
    with open(os.path.join(out_dir, "phones.txt"), "w", encoding="utf-8") as fh:
        for p in phones:
            fh.write(p + "\n")
    return entries


@dataclass(frozen=True)
class Segment:
    """A phone token with both neighbors known (triphone context)."""

    utterance_id: str
    speaker_id: str
    start_frame: int
    end_frame: int
    center_phone: str
    context: tuple


def extract_segments(entries, alignments):
    """All phone tokens with both neighbors present, bounds-checked.

    Utterance-initial and utterance-final tokens carry no full context and
    are skipped.
    """
    by_utt = {e.utterance_id: e for e in entries}
    segments = []
    for utt in sorted(by_utt):
        if utt not in alignments:
            continue
        rows = alignments[utt]
        entry = by_utt[utt]
        m, _ = read_feature_header(entry.path)
        if rows and rows[-1][1] > m:
            raise ContractError("alignments for %s exceed feature length %d" % (utt, m))
        for i in range(1, len(rows) - 1):
            start, end, phone = rows[i]
            segments.append(Segment(
                utterance_id=utt,
                speaker_id=entry.speaker_id,
                start_frame=start,
                end_frame=end,
                center_phone=phone,
                context=(rows[i - 1][2], rows[i + 1][2]),
            ))
    return segments


def load_representations(entries):
    """Load every manifest entry's matrix into {utterance_id: (m, d) array}."""
    return {e.utterance_id: read_features(e.path) for e in entries}
