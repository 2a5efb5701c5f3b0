"""Tokenisation, vocabulary, feature files and the synthetic caption corpus."""

from __future__ import annotations

import json
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError, FormatError, ValidationError, VocabularyError

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
SPLITS = ("train", "validation", "test")

_NON_WORD = re.compile(r"[^\w\s']")


def tokenize(sentence: str) -> list[str]:
    """Lowercase, turn punctuation other than apostrophes into spaces, split."""
    tokens = _NON_WORD.sub(" ", sentence.lower()).split()
    return [t for t in tokens if t.strip("'")]


class Vocabulary:
    """Token <-> id bijection with the four specials at ids 0..3."""

    def __init__(self, tokens: Sequence[str], counts: dict[str, int] | None = None):
        if tuple(tokens[:4]) != SPECIALS:
            raise VocabularyError(f"vocabulary must start with {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.counts = dict(counts or {})

    pad = property(lambda self: 0)
    bos = property(lambda self: 1)
    eos = property(lambda self: 2)
    unk = property(lambda self: 3)

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, tokens: Iterable[str], add_eos: bool = True) -> list[int]:
        ids = [self.index.get(t, self.unk) for t in tokens]
        return ids + [self.eos] if add_eos else ids

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Words up to the first EOS, specials dropped."""
        words = []
        for i in ids:
            i = int(i)
            if i >= len(self.tokens) or i < 0:
                raise VocabularyError(f"token id {i} outside vocabulary of size {len(self)}")
            if i == self.eos:
                break
            if i >= len(SPECIALS):
                words.append(self.tokens[i])
        return words

    def to_json(self) -> str:
        return json.dumps({"tokens": self.tokens, "counts": self.counts}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        doc = json.loads(text)
        return cls(doc["tokens"], doc.get("counts"))


def build_vocabulary(annotations: Iterable, min_count: int = 1) -> Vocabulary:
    """Vocabulary from training captions (strings or token lists).

    Tokens are ordered by count descending, then lexicographically.
    """
    counts: Counter[str] = Counter()
    n = 0
    for a in annotations:
        counts.update(tokenize(a) if isinstance(a, str) else a)
        n += 1
    if n == 0:
        raise DomainError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in SPECIALS),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIALS) + kept, {t: counts[t] for t in kept})


# ---------------------------------------------------------------- records and manifests

@dataclass
class VideoRecord:
    id: str
    v: np.ndarray
    s: np.ndarray
    captions: list[str]
    annotations: list[list[str]] = field(default_factory=list)

    def __post_init__(self):
        if not self.captions:
            raise ValidationError(f"record {self.id!r} has no annotations")
        if not self.annotations:
            self.annotations = [tokenize(c) for c in self.captions]

    def __eq__(self, other):
        return (isinstance(other, VideoRecord) and self.id == other.id
                and self.captions == other.captions
                and np.array_equal(self.v, other.v) and np.array_equal(self.s, other.s))


@dataclass
class DatasetManifest:
    name: str
    n_v: int
    n_s: int
    features: str
    splits: dict[str, list[str]]
    captions: dict[str, list[str]]      # record id -> raw caption strings, in record order

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "n_v": self.n_v,
            "n_s": self.n_s,
            "features": self.features,
            "splits": {k: list(self.splits.get(k, [])) for k in SPLITS},
            "records": [{"id": rid, "captions": caps} for rid, caps in self.captions.items()],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DatasetManifest":
        try:
            captions = {}
            for rec in doc["records"]:
                if rec["id"] in captions:
                    raise ValidationError(f"duplicate record id {rec['id']!r}")
                captions[rec["id"]] = list(rec["captions"])
            splits = {k: list(doc["splits"].get(k, [])) for k in SPLITS}
            return cls(str(doc["name"]), int(doc["n_v"]), int(doc["n_s"]),
                       str(doc["features"]), splits, captions)
        except (KeyError, TypeError) as exc:
            raise FormatError(f"manifest is missing or mistypes field: {exc}") from None

    def validate(self):
        if self.n_v <= 0 or self.n_s <= 0:
            raise ValidationError(f"n_v and n_s must be positive, got {self.n_v}, {self.n_s}")
        seen: set[str] = set()
        for split, ids in self.splits.items():
            dup = seen.intersection(ids)
            if dup:
                raise ValidationError(f"split {split!r} overlaps another split: {sorted(dup)[:3]}")
            seen.update(ids)
            missing = [i for i in ids if i not in self.captions]
            if missing:
                raise ValidationError(f"split {split!r} names unknown records {missing[:3]}")


@dataclass
class Dataset:
    manifest: DatasetManifest
    records: list[VideoRecord]

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def split(self, name: str) -> list[VideoRecord]:
        if name not in SPLITS:
            raise ConfigurationError(f"unknown split {name!r}; expected one of {SPLITS}")
        by_id = {r.id: r for r in self.records}
        return [by_id[i] for i in self.manifest.splits.get(name, [])]


def _check_range(rid, name, arr):
    if not np.all(np.isfinite(arr)) or arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
        raise ValidationError(f"record {rid!r}: {name} features must lie in [0, 1]")


def load_dataset(manifest_path, features_path=None) -> Dataset:
    """Read a manifest JSON and its little-endian float32 feature blob.

    The blob holds ``v`` then ``s`` for every record in manifest order. If
    ``features_path`` is omitted it is resolved relative to the manifest.
    """
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError(f"manifest not found: {manifest_path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {manifest_path} is not valid JSON: {exc.msg}", exc.pos) from None
    manifest = DatasetManifest.from_json(doc)
    manifest.validate()
    features_path = Path(features_path) if features_path else manifest_path.parent / manifest.features
    try:
        blob = features_path.read_bytes()
    except FileNotFoundError:
        raise FormatError(f"feature file not found: {features_path}") from None
    width = manifest.n_v + manifest.n_s
    expected = len(manifest.captions) * width * 4
    if len(blob) != expected:
        raise FormatError(
            f"feature file {features_path} has {len(blob)} bytes, expected {expected} "
            f"({len(manifest.captions)} records x {width} floats x 4 bytes)",
            offset=min(len(blob), expected))
    feats = np.frombuffer(blob, dtype="<f4").reshape(len(manifest.captions), width)
    records = []
    for row, (rid, caps) in zip(feats, manifest.captions.items()):
        v = row[:manifest.n_v].astype(np.float32)
        s = row[manifest.n_v:].astype(np.float32)
        _check_range(rid, "visual", v)
        _check_range(rid, "semantic", s)
        records.append(VideoRecord(rid, v, s, caps))
    return Dataset(manifest, records)


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def feature_bytes(records: Sequence[VideoRecord]) -> bytes:
    rows = [np.concatenate([r.v, r.s]).astype("<f4") for r in records]
    return b"".join(row.tobytes() for row in rows)


def write_dataset(dataset: Dataset, out_dir, manifest_name: str = "manifest.json") -> Path:
    """Write manifest + feature blob into ``out_dir``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    m = dataset.manifest
    text = json.dumps(m.to_json(), indent=2, ensure_ascii=False) + "\n"
    _atomic_write(out_dir / m.features, feature_bytes(dataset.records))
    _atomic_write(out_dir / manifest_name, text.encode("utf-8"))
    return out_dir / manifest_name


# ---------------------------------------------------------------- annotations

def sample_indices(available: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform without replacement up to ``available``, then with replacement."""
    if n < 1:
        raise ConfigurationError(f"sample size must be >= 1, got {n}")
    if n <= available:
        return rng.choice(available, size=n, replace=False)
    extra = rng.choice(available, size=n - available, replace=True)
    return np.concatenate([rng.permutation(available), extra])


def sample_annotations(record: VideoRecord, n: int, rng: np.random.Generator) -> list[list[str]]:
    return [record.annotations[i] for i in sample_indices(len(record.annotations), n, rng)]


def distinct_stats(captions: Iterable) -> dict[str, int]:
    """Number of distinct full captions and of distinct words."""
    sentences, words = set(), set()
    for c in captions:
        toks = tuple(tokenize(c) if isinstance(c, str) else c)
        sentences.add(toks)
        words.update(toks)
    return {"distinct_sentences": len(sentences), "vocabulary_size": len(words)}


def write_captions(path, items: Iterable[tuple[str, str]]):
    lines = [f"{rid}\t{text}\n" for rid, text in items]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_captions(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        rid, sep, text = line.partition("\t")
        if not sep:
            raise FormatError(f"{path}:{n}: expected '<id>\\t<caption>'")
        out[rid] = text
    return out


# ---------------------------------------------------------------- synthetic corpus

# Each theme lists concept groups per role; a group's members are synonyms.
LEXICON = [
    {"subject": [["man", "guy"], ["woman", "lady"]],
     "verb": [["slicing", "cutting"], ["peeling"], ["frying", "cooking"]],
     "object": [["onion"], ["potato"], ["carrot"]]},
    {"subject": [["boy"], ["girl"]],
     "verb": [["playing"], ["strumming"]],
     "object": [["guitar"], ["piano", "keyboard"], ["violin"]]},
    {"subject": [["dog", "puppy"], ["cat", "kitten"]],
     "verb": [["chasing"], ["biting"], ["licking"]],
     "object": [["ball"], ["toy"]]},
    {"subject": [["player", "athlete"], ["child", "kid"]],
     "verb": [["kicking"], ["throwing", "tossing"]],
     "object": [["football"], ["stone", "rock"], ["frisbee"]]},
    {"subject": [["rider"], ["soldier"]],
     "verb": [["riding"], ["driving"]],
     "object": [["horse"], ["motorcycle", "motorbike"], ["car", "vehicle"]]},
    {"subject": [["chef", "cook"], ["baker"]],
     "verb": [["mixing", "stirring"], ["pouring"]],
     "object": [["flour"], ["batter"], ["sauce"]]},
]
ROLES = ("subject", "verb", "object")
ADJECTIVES = ["young", "tall", "happy"]
ADVERBS = ["quickly", "carefully", "outside"]
TEMPLATES = [
    "a {subject} is {verb} a {object}",
    "the {subject} is {verb} the {object}",
    "a {adj} {subject} is {verb} a {object}",
    "a {subject} is {verb} a {object} {adv}",
    "someone is {verb} a {object}",
    "a {subject} is {verb} the {object} {adv}",
]


def _theme(k: int) -> dict:
    if k < len(LEXICON):
        return LEXICON[k]
    return {role: [[f"{role}{k}x{j}"] for j in range(2)] for role in ROLES}


@dataclass
class SyntheticSpec:
    videos: int = 30
    themes: int = 4
    n_v: int = 16
    n_s: int = 48
    annotations_per_video: int = 8
    noise: float = 0.1
    splits: tuple[int, int, int] = (20, 5, 5)
    name: str = "synthetic"

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown synthetic spec fields: {sorted(unknown)}")
        doc = dict(doc)
        if "splits" in doc:
            doc["splits"] = tuple(doc["splits"])
        return cls(**doc)


def concept_slots(themes: int) -> dict[tuple[int, str, int], int]:
    """Semantic-vector slot for every (theme, role, group)."""
    slots = {}
    for k in range(themes):
        for role in ROLES:
            for j in range(len(_theme(k)[role])):
                slots[(k, role, j)] = len(slots)
    return slots


def generate_synthetic_dataset(spec: SyntheticSpec, seed: int) -> Dataset:
    """Theme-structured captions whose content is recoverable from the features.

    ``v`` is a noisy indicator of the video's theme block; ``s`` is a noisy
    multi-hot over the (subject, verb, object) concepts the video shows.
    Annotations vary template, synonyms and optional modifiers.
    """
    if spec.videos < 1:
        raise ConfigurationError(f"videos must be >= 1, got {spec.videos}")
    if spec.themes < 2:
        raise ConfigurationError(f"need at least 2 themes, got {spec.themes}")
    if spec.annotations_per_video < 1:
        raise ConfigurationError("annotations_per_video must be >= 1")
    if spec.n_v < spec.themes:
        raise ConfigurationError(f"n_v={spec.n_v} cannot hold {spec.themes} theme blocks")
    slots = concept_slots(spec.themes)
    if spec.n_s < len(slots):
        raise ConfigurationError(f"n_s={spec.n_s} is smaller than the {len(slots)} concept slots")
    if len(spec.splits) != 3 or sum(spec.splits) != spec.videos or min(spec.splits) < 0:
        raise ConfigurationError(f"splits {spec.splits} must be 3 counts summing to {spec.videos}")
    if spec.noise < 0:
        raise ConfigurationError("noise must be non-negative")

    rng = np.random.default_rng(seed)
    block = spec.n_v // spec.themes
    records, captions = [], {}
    for i in range(spec.videos):
        k = int(rng.integers(spec.themes))
        theme = _theme(k)
        picks = {role: int(rng.integers(len(theme[role]))) for role in ROLES}
        v = np.zeros(spec.n_v)
        v[k * block:(k + 1) * block] = 1.0
        s = np.zeros(spec.n_s)
        for role in ROLES:
            s[slots[(k, role, picks[role])]] = 1.0
        if spec.noise > 0:
            v = v + spec.noise * rng.standard_normal(spec.n_v)
            s = s + spec.noise * rng.standard_normal(spec.n_s)
        v = np.clip(v, 0.0, 1.0).astype(np.float32)
        s = np.clip(s, 0.0, 1.0).astype(np.float32)
        caps = []
        for _ in range(spec.annotations_per_video):
            template = TEMPLATES[int(rng.integers(len(TEMPLATES)))]
            words = {role: _choice(rng, theme[role][picks[role]]) for role in ROLES}
            words["adj"] = _choice(rng, ADJECTIVES)
            words["adv"] = _choice(rng, ADVERBS)
            caps.append(template.format(**words))
        rid = f"vid{i:04d}"
        captions[rid] = caps
        records.append(VideoRecord(rid, v, s, caps))
    ids = list(captions)
    order = [ids[j] for j in rng.permutation(len(ids))]
    a, b, _ = spec.splits
    splits = {"train": sorted(order[:a]), "validation": sorted(order[a:a + b]),
              "test": sorted(order[a + b:])}
    manifest = DatasetManifest(spec.name, spec.n_v, spec.n_s, "features.bin", splits, captions)
    return Dataset(manifest, records)


def _choice(rng, options):
    return options[int(rng.integers(len(options)))]
