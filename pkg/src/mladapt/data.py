"""Synthetic multilingual corpora: tiered generation, augmentation sampling,
SpecAugment masking, and manifest + binary feature persistence."""

import json
import string
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ctc import Vocabulary

FEW_SHOT_CAP = 5
# full-scale reference: mean augmented utterances sampled per language
AUGMENT_REFERENCE_MEAN = 2123

FEATURE_MAGIC = b"MLFT"
FEATURE_VERSION = 1

TRAIN = "train"
DEV_STANDARD = "dev_standard"
DEV_DIALECT = "dev_dialect"
SPLITS = (TRAIN, DEV_STANDARD, DEV_DIALECT)

TIER_NORMAL = "normal"
TIER_FEW_SHOT = "few_shot"
TIER_DIALECT = "dialect"


class ConfigError(ValueError):
    """Generation config violates a structural constraint."""


class CorpusFormatError(ValueError):
    """On-disk corpus artifact is malformed."""


@dataclass(frozen=True)
class LanguageConfig:
    code: str
    tier: str = TIER_NORMAL
    train: int = 0
    dev: int = 0
    parent: str = None
    perturbation: float = 0.5
    tokens: tuple = None
    offset_scale: float = None

    def __post_init__(self):
        if self.tier not in (TIER_NORMAL, TIER_FEW_SHOT, TIER_DIALECT):
            raise ConfigError(f"{self.code}: unknown tier {self.tier!r}")
        if self.tier == TIER_FEW_SHOT and self.train > FEW_SHOT_CAP:
            raise ConfigError(
                f"{self.code}: few-shot languages are capped at "
                f"{FEW_SHOT_CAP} training utterances, got {self.train}"
            )
        if self.tier == TIER_DIALECT:
            if self.parent is None:
                raise ConfigError(f"{self.code}: dialect needs a parent")
            if self.train:
                raise ConfigError(f"{self.code}: dialects are evaluation-only")


@dataclass
class GenerationConfig:
    languages: list
    feature_dim: int = 64
    noise_sigma: float = 0.1
    offset_scale: float = 1.0
    seed: int = 0
    token_inventory: tuple = tuple(string.ascii_lowercase[:20])
    tokens_per_language: int = 8
    target_len: tuple = (3, 12)
    frames_per_token: tuple = (2, 4)
    subsample_guard: int = 2
    max_shared_tokens: int = None
    # adjacent repeats of a token are acoustically unmarked here (identical
    # duplicated frames), so their count is partly unrecoverable; corpora for
    # convergence studies can exclude them
    allow_adjacent_repeats: bool = True

    def __post_init__(self):
        self.languages = [
            lang if isinstance(lang, LanguageConfig) else LanguageConfig(**lang)
            for lang in self.languages
        ]
        self.token_inventory = tuple(self.token_inventory)
        self.target_len = tuple(self.target_len)
        self.frames_per_token = tuple(self.frames_per_token)
        for lang in self.languages:
            if lang.tokens is not None:
                object.__setattr__(lang, "tokens", tuple(lang.tokens))

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        return cls(**doc)

    def to_json(self):
        doc = {
            "languages": [
                {k: (list(v) if isinstance(v, tuple) else v)
                 for k, v in vars(lang).items() if v is not None}
                for lang in self.languages
            ],
            "feature_dim": self.feature_dim,
            "noise_sigma": self.noise_sigma,
            "offset_scale": self.offset_scale,
            "seed": self.seed,
            "token_inventory": list(self.token_inventory),
            "tokens_per_language": self.tokens_per_language,
            "target_len": list(self.target_len),
            "frames_per_token": list(self.frames_per_token),
            "subsample_guard": self.subsample_guard,
            "allow_adjacent_repeats": self.allow_adjacent_repeats,
        }
        if self.max_shared_tokens is not None:
            doc["max_shared_tokens"] = self.max_shared_tokens
        return json.dumps(doc, indent=2, sort_keys=True)


@dataclass
class Utterance:
    id: str
    language: str
    features: np.ndarray
    target: list

    @property
    def transcript(self):
        return self.target[1:]


@dataclass
class Corpus:
    utterances: list
    split: str
    manifest_path: str = None

    def __len__(self):
        return len(self.utterances)

    def languages(self):
        seen = []
        for utt in self.utterances:
            if utt.language not in seen:
                seen.append(utt.language)
        return seen

    def by_language(self, code):
        return [u for u in self.utterances if u.language == code]


def _validate_config(cfg):
    if cfg.feature_dim < 8:
        raise ConfigError(f"feature_dim must be >= 8, got {cfg.feature_dim}")
    codes = [lang.code for lang in cfg.languages]
    if len(set(codes)) != len(codes):
        raise ConfigError("duplicate language codes")
    normals = [l for l in cfg.languages if l.tier == TIER_NORMAL]
    few = [l for l in cfg.languages if l.tier == TIER_FEW_SHOT]
    if len(normals) < 2:
        raise ConfigError("need at least 2 normal-tier languages")
    if not few:
        raise ConfigError("need at least 1 few-shot language")
    by_code = {l.code: l for l in cfg.languages}
    for lang in cfg.languages:
        if lang.tier == TIER_DIALECT:
            parent = by_code.get(lang.parent)
            if parent is None or parent.tier == TIER_DIALECT:
                raise ConfigError(
                    f"{lang.code}: parent {lang.parent!r} is not a base language"
                )
        if lang.tokens is not None:
            unknown = set(lang.tokens) - set(cfg.token_inventory)
            if unknown:
                raise ConfigError(
                    f"{lang.code}: tokens {sorted(unknown)} not in inventory"
                )


def _check_sharing(cfg, inventories):
    if cfg.max_shared_tokens is None:
        return
    base = [l for l in cfg.languages if l.tier != TIER_DIALECT]
    for i, a in enumerate(base):
        for b in base[i + 1:]:
            shared = set(inventories[a.code]) & set(inventories[b.code])
            if len(shared) > cfg.max_shared_tokens:
                raise ConfigError(
                    f"{a.code} and {b.code} share {len(shared)} tokens, "
                    f"over the configured limit {cfg.max_shared_tokens}"
                )


class EmissionModel:
    """Deterministic per-language emission parameters derived from a config.

    Each linguistic token has a global characteristic vector; each language
    adds a constant offset. Dialects reuse the parent inventory with
    perturbed vectors and offset.
    """

    def __init__(self, cfg):
        _validate_config(cfg)
        self.cfg = cfg
        ss = np.random.SeedSequence(cfg.seed)
        self._emission_seed, self._corpus_seed = ss.spawn(2)
        rng = np.random.default_rng(self._emission_seed)
        d = cfg.feature_dim

        self.token_vectors = {
            tok: rng.normal(0.0, 1.0, d) for tok in cfg.token_inventory
        }
        self.offsets = {}
        self.inventories = {}
        self.dialect_vectors = {}
        for lang in cfg.languages:
            if lang.tier == TIER_DIALECT:
                continue
            scale = lang.offset_scale
            if scale is None:
                scale = cfg.offset_scale
            self.offsets[lang.code] = rng.normal(0.0, 1.0, d) * scale
            if lang.tokens is not None:
                self.inventories[lang.code] = tuple(lang.tokens)
            else:
                picks = rng.choice(
                    len(cfg.token_inventory), cfg.tokens_per_language,
                    replace=False,
                )
                self.inventories[lang.code] = tuple(
                    cfg.token_inventory[i] for i in sorted(picks)
                )
        for lang in cfg.languages:
            if lang.tier != TIER_DIALECT:
                continue
            shift_std = lang.perturbation * cfg.noise_sigma
            self.offsets[lang.code] = (
                self.offsets[lang.parent] + rng.normal(0.0, 1.0, d) * shift_std
            )
            self.inventories[lang.code] = self.inventories[lang.parent]
            self.dialect_vectors[lang.code] = {
                tok: self.token_vectors[tok] + rng.normal(0.0, 1.0, d) * shift_std
                for tok in self.inventories[lang.parent]
            }
        _check_sharing(cfg, self.inventories)
        self.by_code = {l.code: l for l in cfg.languages}

    def corpus_rng(self):
        return np.random.default_rng(self._corpus_seed)

    def vocabulary(self):
        codes = [l.code for l in self.cfg.languages if l.tier != TIER_DIALECT]
        return Vocabulary.build(codes, self.cfg.token_inventory)

    def spoken_code(self, code):
        lang = self.by_code[code]
        return lang.parent if lang.tier == TIER_DIALECT else lang.code

    def sample_utterance(self, code, utt_id, rng):
        cfg = self.cfg
        lang = self.by_code[code]
        lo, hi = cfg.target_len
        n_tokens = int(rng.integers(lo, hi + 1))
        inventory = self.inventories[code]
        if cfg.allow_adjacent_repeats or len(inventory) < 2:
            picks = rng.integers(0, len(inventory), n_tokens)
        else:
            picks = np.empty(n_tokens, dtype=np.int64)
            picks[0] = rng.integers(0, len(inventory))
            for i in range(1, n_tokens):
                j = int(rng.integers(0, len(inventory) - 1))
                picks[i] = j + 1 if j >= picks[i - 1] else j
        tokens = [inventory[i] for i in picks]
        flo, fhi = cfg.frames_per_token
        durations = rng.integers(flo, fhi + 1, n_tokens)

        # keep the target reachable after subsampling: T' >= 2|Y| - 1
        required = 2 * cfg.subsample_guard * n_tokens + 1
        deficit = required - int(durations.sum())
        for i in range(max(0, deficit)):
            durations[i % n_tokens] += 1

        vectors = self.dialect_vectors.get(code, self.token_vectors)
        frames = np.repeat(
            np.stack([vectors[tok] for tok in tokens]), durations, axis=0
        )
        features = frames + self.offsets[code]
        features = features + rng.normal(0.0, cfg.noise_sigma, features.shape)
        # features live on disk as float32; quantize now so save/load is lossless
        features = features.astype(np.float32).astype(np.float64)
        target = [self.spoken_code(code)] + tokens
        return Utterance(id=utt_id, language=self.spoken_code(code),
                         features=features, target=target)


@dataclass
class DatasetBundle:
    corpora: dict
    vocabulary: Vocabulary
    config: GenerationConfig
    tiers: dict


def generate_corpus(cfg, seed=None):
    """Generate train / dev-standard / dev-dialect splits from a config.

    Fully reproducible: the same (config, seed) yields byte-identical
    corpora. `seed` overrides the config seed when given.
    """
    if seed is not None:
        cfg.seed = int(seed)
    emission = EmissionModel(cfg)
    rng = emission.corpus_rng()
    splits = {TRAIN: [], DEV_STANDARD: [], DEV_DIALECT: []}
    for lang in cfg.languages:
        dev_split = DEV_DIALECT if lang.tier == TIER_DIALECT else DEV_STANDARD
        for i in range(lang.train):
            splits[TRAIN].append(
                emission.sample_utterance(lang.code, f"{lang.code}-train-{i:04d}", rng)
            )
        for i in range(lang.dev):
            splits[dev_split].append(
                emission.sample_utterance(lang.code, f"{lang.code}-dev-{i:04d}", rng)
            )
    corpora = {name: Corpus(utts, name) for name, utts in splits.items()}
    tiers = {
        l.code: {"tier": l.tier, "parent": l.parent} for l in cfg.languages
    }
    return DatasetBundle(corpora, emission.vocabulary(), cfg, tiers)


def augment_corpus(base, emission, per_language_counts, seed):
    """Extra sampled utterances for the listed languages, merged into a new
    training corpus. Dev splits are never touched."""
    if base.split != TRAIN:
        raise ConfigError("augmentation applies to the training split only")
    present = set(base.languages())
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    merged = list(base.utterances)
    for code in per_language_counts:
        if code not in emission.by_code:
            raise ConfigError(f"cannot augment unknown language {code!r}")
        if emission.by_code[code].tier == TIER_DIALECT:
            raise ConfigError(f"cannot augment evaluation-only dialect {code!r}")
        if emission.spoken_code(code) not in present:
            raise ConfigError(f"language {code!r} not in the base corpus")
    for code, count in sorted(per_language_counts.items()):
        for i in range(count):
            merged.append(
                emission.sample_utterance(code, f"{code}-aug-{i:04d}", rng)
            )
    return Corpus(merged, TRAIN)


def sample_augment_counts(codes, mean, seed, spread=0.2):
    """Per-language augmentation counts varying uniformly around a mean."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    lo = int(np.floor(mean * (1 - spread)))
    hi = int(np.ceil(mean * (1 + spread)))
    return {code: int(rng.integers(lo, hi + 1)) for code in codes}


# -- SpecAugment --------------------------------------------------------------


def sample_spec_mask(shape, time_masks, feature_masks, rng):
    """0/1 mask zeroing sampled contiguous time rows and feature columns."""
    t, d = shape
    mask = np.ones(shape)
    n_t, w_t = time_masks
    n_f, w_f = feature_masks
    for _ in range(n_t):
        w = min(w_t, t)
        if w > 0:
            start = int(rng.integers(0, t - w + 1))
            mask[start:start + w, :] = 0.0
    for _ in range(n_f):
        w = min(w_f, d)
        if w > 0:
            start = int(rng.integers(0, d - w + 1))
            mask[:, start:start + w] = 0.0
    return mask


def spec_augment(features, time_masks, feature_masks, seed):
    """Apply SpecAugment-style masking; degenerate widths/counts are no-ops."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    features = np.asarray(features, dtype=np.float64)
    return features * sample_spec_mask(features.shape, time_masks, feature_masks, rng)


# -- persistence --------------------------------------------------------------


def save_features(path, features):
    arr = np.asarray(features)
    t, d = arr.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, t, d))
        fh.write(arr.astype("<f4").tobytes())


def load_features(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FEATURE_MAGIC:
            raise CorpusFormatError(
                f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}"
            )
        header = fh.read(12)
        if len(header) != 12:
            raise CorpusFormatError(f"{path}: truncated header")
        version, t, d = struct.unpack("<III", header)
        if version != FEATURE_VERSION:
            raise CorpusFormatError(f"{path}: unsupported version {version}")
        payload = fh.read(4 * t * d)
        if len(payload) != 4 * t * d:
            raise CorpusFormatError(f"{path}: truncated feature payload")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(t, d)


def save_corpus(corpus, directory):
    """Write manifest.tsv plus one binary feature file per utterance.

    Manifest lines are tab-separated: id, language code, relative feature
    path, space-separated transcript tokens. The language code is not stored
    in the token field; it is prepended again at load time.
    """
    directory = Path(directory)
    (directory / "feats").mkdir(parents=True, exist_ok=True)
    lines = []
    for utt in corpus.utterances:
        rel = f"feats/{utt.id}.bin"
        save_features(directory / rel, utt.features)
        lines.append(
            "\t".join([utt.id, utt.language, rel, " ".join(utt.transcript)])
        )
    manifest = directory / "manifest.tsv"
    manifest.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    corpus.manifest_path = str(manifest)


def load_corpus(directory, split):
    directory = Path(directory)
    manifest = directory / "manifest.tsv"
    utterances = []
    seen = set()
    with open(manifest, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 4:
                raise CorpusFormatError(
                    f"{manifest}:{lineno}: expected 4 tab-separated fields, "
                    f"got {len(fields)}"
                )
            utt_id, code, rel, token_field = fields
            if utt_id in seen:
                raise CorpusFormatError(
                    f"{manifest}:{lineno}: duplicate utterance id {utt_id!r}"
                )
            seen.add(utt_id)
            features = load_features(directory / rel)
            utterances.append(
                Utterance(
                    id=utt_id, language=code, features=features,
                    target=[code] + token_field.split(),
                )
            )
    return Corpus(utterances, split, manifest_path=str(manifest))


def save_dataset(bundle, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, corpus in bundle.corpora.items():
        save_corpus(corpus, directory / name)
    vocab_doc = {
        "tokens": list(bundle.vocabulary.tokens),
        "language_codes": list(bundle.vocabulary.language_codes),
    }
    (directory / "vocab.json").write_text(
        json.dumps(vocab_doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (directory / "languages.json").write_text(
        json.dumps(bundle.tiers, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (directory / "gen_config.json").write_text(
        bundle.config.to_json() + "\n", encoding="utf-8"
    )


def load_dataset(directory):
    directory = Path(directory)
    vocab_doc = json.loads((directory / "vocab.json").read_text(encoding="utf-8"))
    vocab = Vocabulary(
        tokens=tuple(vocab_doc["tokens"]),
        language_codes=tuple(vocab_doc["language_codes"]),
    )
    tiers = json.loads((directory / "languages.json").read_text(encoding="utf-8"))
    cfg = GenerationConfig.from_json(
        (directory / "gen_config.json").read_text(encoding="utf-8")
    )
    corpora = {}
    for name in SPLITS:
        if (directory / name / "manifest.tsv").exists():
            corpora[name] = load_corpus(directory / name, name)
    return DatasetBundle(corpora, vocab, cfg, tiers)
