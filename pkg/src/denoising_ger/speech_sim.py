"""Synthetic noisy-speech corpus at the feature-frame level.

Each character owns a fixed (frames_per_char x n_features) template.  Templates
are grouped into confusion groups whose members differ only by a small
deviation, which is what makes noisy frames hard to recognise.  Noise is
mixed at an exact utterance-level SNR.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

WORD_LIST = (
    "pour", "poor", "mayonnaise", "over", "all", "ale", "chill", "chili", "and", "end",
    "serve", "nerve", "salt", "malt", "mix", "fix", "heat", "beat", "bake", "cake",
    "stir", "star", "pan", "pin", "oil", "boil", "rice", "dice", "lime", "time",
    "cut", "cup", "dish", "fish", "sauce", "bread", "break", "milk", "silk", "sugar",
    "cream", "dream", "taste", "paste", "slice", "spice", "roast", "toast",
)

IN_DOMAIN = "in_domain"
OUT_OF_DOMAIN = "out_of_domain"
NO_NOISE = "none"
NOISE_FAMILIES = (IN_DOMAIN, OUT_OF_DOMAIN, NO_NOISE)

SPLIT_FILES = {
    "train": "train.jsonl",
    "test_in_domain": "test_in.jsonl",
    "test_out_of_domain": "test_out.jsonl",
    "test_clean": "test_clean.jsonl",
}
SPLIT_FAMILY = {
    "train": IN_DOMAIN,
    "test_in_domain": IN_DOMAIN,
    "test_out_of_domain": OUT_OF_DOMAIN,
    "test_clean": NO_NOISE,
}
SNR_RANGE = (5.0, 20.0)

# fixed generator seeds for quantities that must not depend on the corpus seed
_ENVELOPE_SEED = 20240501


@dataclass
class Vocabulary:
    words: list[str]
    characters: list[str]
    templates: np.ndarray  # (n_chars, frames_per_char, n_features)
    groups: list[int]

    def __post_init__(self):
        if len(set(self.words)) != len(self.words):
            raise ValueError("duplicate words in vocabulary")
        known = set(self.characters)
        for w in self.words:
            missing = set(w) - known
            if missing:
                raise ValueError(f"word {w!r} uses unknown characters {sorted(missing)}")
        self.char_index = {c: i for i, c in enumerate(self.characters)}

    @property
    def frames_per_char(self) -> int:
        return self.templates.shape[1]

    @property
    def n_features(self) -> int:
        return self.templates.shape[2]

    @property
    def template_rms(self) -> float:
        return float(np.sqrt(np.mean(self.templates ** 2)))

    @classmethod
    def build(cls, words: Sequence[str], seed: int, frames_per_char: int = 4, n_features: int = 16,
              template_spread: float = 0.12, n_groups: int = 6, homophones: int = 1) -> "Vocabulary":
        """Draw character templates once from a generator seeded with ``seed``.

        ``homophones`` letter pairs share one template outright, so even clean
        audio cannot tell them apart without lexical knowledge.
        """
        words = list(words)
        chars = sorted(set("".join(words))) + [" "]
        rng = np.random.default_rng((seed, 0x7E3))
        letters = len(chars) - 1
        order = rng.permutation(letters)
        groups = [-1] * len(chars)
        # letters distinguishing minimal word pairs share a confusion group
        for gi, members in enumerate(minimal_pair_classes(words)):
            for c in members:
                groups[chars.index(c)] = gi % n_groups
        free = [ci for ci in order if groups[ci] < 0]
        for rank, ci in enumerate(free):
            groups[ci] = rank % n_groups
        groups[-1] = n_groups  # space stands alone
        centers = rng.normal(size=(n_groups + 1, frames_per_char, n_features))
        dev = rng.normal(size=(len(chars), frames_per_char, n_features))
        templates = centers[groups] + template_spread * dev
        templates[-1] = 0.5 * centers[n_groups]
        for h in range(min(homophones, letters // 2)):
            a, b = order[2 * h], order[2 * h + 1]
            templates[b] = templates[a]
        return cls(words, chars, templates, groups)


def minimal_pair_classes(words: Sequence[str]) -> list[list[str]]:
    """Letter classes linked by same-length word pairs that differ in exactly one position."""
    parent: dict[str, str] = {}

    def find(c):
        while parent.setdefault(c, c) != c:
            c = parent[c]
        return c

    for i, a in enumerate(words):
        for b in words[i + 1:]:
            if len(a) != len(b):
                continue
            diff = [(x, y) for x, y in zip(a, b) if x != y]
            if len(diff) == 1:
                x, y = diff[0]
                parent[find(x)] = find(y)
    classes: dict[str, list[str]] = {}
    for c in sorted(parent):
        classes.setdefault(find(c), []).append(c)
    return sorted(classes.values())


@dataclass
class Utterance:
    id: str
    transcript: list[str]
    clean_frames: np.ndarray
    noisy_frames: np.ndarray
    snr_db: Optional[float]
    noise_family: str

    def __post_init__(self):
        if self.clean_frames.shape != self.noisy_frames.shape:
            raise ValueError("clean and noisy frames must share a shape")
        if (self.snr_db is None) != (self.noise_family == NO_NOISE):
            raise ValueError("snr_db must be present iff the utterance is noisy")

    @property
    def text(self) -> str:
        return " ".join(self.transcript)

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "transcript": self.text,
            "snr_db": self.snr_db,
            "noise_family": self.noise_family,
            "clean": self.clean_frames.tolist(),
            "noisy": self.noisy_frames.tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict, n_features: int) -> "Utterance":
        def mat(x):
            a = np.asarray(x, dtype=np.float64)
            return a.reshape(0, n_features) if a.size == 0 else a

        return cls(rec["id"], rec["transcript"].split(), mat(rec["clean"]), mat(rec["noisy"]),
                   rec["snr_db"], rec["noise_family"])


@dataclass
class CorpusSplit:
    name: str
    utterances: list[Utterance]

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)


@dataclass
class CorpusConfig:
    vocab_size: int = 20
    n_train: int = 2000
    n_test: int = 200
    min_words: int = 2
    max_words: int = 4
    frames_per_char: int = 4
    n_features: int = 16
    jitter: float = 0.2
    template_spread: float = 0.3
    n_groups: int = 6
    homophones: int = 1


@dataclass
class Corpus:
    config: CorpusConfig
    seed: int
    vocab: Vocabulary
    splits: dict[str, CorpusSplit] = field(default_factory=dict)

    def __getitem__(self, name: str) -> CorpusSplit:
        return self.splits[name]

    def fingerprint(self) -> str:
        digest = hashlib.sha256(np.ascontiguousarray(self.vocab.templates).tobytes()).hexdigest()[:16]
        return json.dumps({"config": asdict(self.config), "seed": self.seed, "templates": digest},
                          sort_keys=True)


# ----------------------------------------------------------------- rendering

def _chars_of(transcript) -> str:
    return transcript if isinstance(transcript, str) else " ".join(transcript)


def render_clean(transcript, vocab: Vocabulary, seed: int, jitter: float = 0.2) -> np.ndarray:
    """Concatenate per-character templates and add small seeded jitter."""
    words = transcript.split() if isinstance(transcript, str) else list(transcript)
    for w in words:
        if w not in vocab.words:
            raise ValueError(f"unknown word {w!r}")
    return render_chars(_chars_of(words), vocab, seed, jitter)


def render_chars(chars: str, vocab: Vocabulary, seed: int, jitter: float = 0.2) -> np.ndarray:
    fpc, f = vocab.frames_per_char, vocab.n_features
    if not chars:
        return np.zeros((0, f))
    ids = [vocab.char_index[c] for c in chars]
    frames = vocab.templates[ids].reshape(len(ids) * fpc, f)
    rng = np.random.default_rng((seed, 0x1177))
    return frames + jitter * vocab.template_rms * rng.normal(size=frames.shape)


def noise_envelope(n_features: int) -> np.ndarray:
    """Fixed smooth spectral envelope of the in-domain noise family."""
    rng = np.random.default_rng((_ENVELOPE_SEED, n_features))
    raw = rng.uniform(0.2, 1.8, size=n_features)
    kernel = np.array([0.25, 0.5, 0.25])
    smooth = np.convolve(np.pad(raw, 1, mode="edge"), kernel, mode="valid")
    return smooth / np.sqrt(np.mean(smooth ** 2))


def raw_noise(shape: tuple, family: str, rng: np.random.Generator) -> np.ndarray:
    t, f = shape
    if family == IN_DOMAIN:
        return rng.normal(size=(t, f)) * noise_envelope(f)
    if family == OUT_OF_DOMAIN:
        time = np.arange(t)[:, None]
        feat = np.arange(f)[None, :]
        out = np.zeros((t, f))
        for _ in range(3):
            freq = rng.uniform(0.05, 0.2)
            phase = rng.uniform(0, 2 * np.pi)
            center = rng.uniform(0, f - 1)
            width = rng.uniform(1.0, 3.0)
            ridge = np.exp(-0.5 * ((feat - center) / width) ** 2)
            out += rng.uniform(0.5, 1.5) * np.sin(2 * np.pi * freq * time + phase) * ridge
        bursts = rng.random(t) < 0.04
        out[bursts] += 0.8 * rng.normal(size=(int(bursts.sum()), f))
        return out
    raise ValueError(f"unknown noise family {family!r}")


def mix_noise(clean: np.ndarray, noise_family: str, snr_db: float, seed: int,
              snr_range: tuple[float, float] = SNR_RANGE) -> np.ndarray:
    """Add noise scaled so that 10 log10(P_signal / P_noise) == snr_db."""
    lo, hi = snr_range
    if not lo <= snr_db <= hi:
        raise ValueError(f"snr_db {snr_db} outside [{lo}, {hi}]")
    if clean.size == 0:
        return clean.copy()
    p_signal = float(np.mean(clean ** 2))
    if p_signal <= 0:
        raise ValueError("cannot set an SNR for a zero-power signal")
    rng = np.random.default_rng((seed, 0xA015E))
    noise = raw_noise(clean.shape, noise_family, rng)
    p_noise = float(np.mean(noise ** 2))
    gain = np.sqrt(p_signal / (p_noise * 10.0 ** (snr_db / 10.0)))
    return clean + gain * noise


def measured_snr(clean: np.ndarray, noisy: np.ndarray) -> float:
    noise = noisy - clean
    return 10.0 * np.log10(np.mean(clean ** 2) / np.mean(noise ** 2))


def spectral_flatness(residual: np.ndarray) -> float:
    """Flatness of the time-axis power spectrum of a (T x F) residual, averaged over features."""
    power = np.abs(np.fft.rfft(residual - residual.mean(axis=0), axis=0)) ** 2
    power = power[1:].mean(axis=1) + 1e-300
    return float(np.exp(np.mean(np.log(power))) / np.mean(power))


# ------------------------------------------------------------------- corpus

def _make_split(name: str, count: int, vocab: Vocabulary, cfg: CorpusConfig, seed: int,
                split_index: int) -> CorpusSplit:
    family = SPLIT_FAMILY[name]
    utts = []
    for i in range(count):
        rng = np.random.default_rng((seed, split_index, i))
        n_words = int(rng.integers(cfg.min_words, cfg.max_words + 1))
        words = [vocab.words[j] for j in rng.integers(0, len(vocab.words), size=n_words)]
        utt_seed = int(rng.integers(0, 2 ** 31 - 1))
        clean = render_clean(words, vocab, utt_seed, jitter=cfg.jitter)
        if family == NO_NOISE:
            noisy, snr = clean.copy(), None
        else:
            snr = float(rng.integers(5, 21))
            noisy = mix_noise(clean, family, snr, utt_seed)
        utts.append(Utterance(f"{name}-{i:05d}", words, clean, noisy, snr, family))
    return CorpusSplit(name, utts)


def generate_corpus(config: Optional[CorpusConfig] = None, seed: int = 0) -> Corpus:
    """Noisy train, noisy in-domain test, out-of-domain noisy test and clean test splits."""
    cfg = config or CorpusConfig()
    if cfg.n_train < 1:
        raise ValueError("the train split needs at least one utterance")
    if not 1 <= cfg.vocab_size <= len(WORD_LIST):
        raise ValueError(f"vocab_size must be in [1, {len(WORD_LIST)}]")
    if not 1 <= cfg.min_words <= cfg.max_words:
        raise ValueError("need 1 <= min_words <= max_words")
    vocab = Vocabulary.build(WORD_LIST[:cfg.vocab_size], seed, cfg.frames_per_char, cfg.n_features,
                             cfg.template_spread, cfg.n_groups, cfg.homophones)
    corpus = Corpus(cfg, seed, vocab)
    counts = {"train": cfg.n_train, "test_in_domain": cfg.n_test,
              "test_out_of_domain": cfg.n_test, "test_clean": cfg.n_test}
    for k, (name, n) in enumerate(counts.items()):
        corpus.splits[name] = _make_split(name, n, vocab, cfg, seed, k + 1)
    return corpus


def pretraining_utterances(vocab: Vocabulary, count: int, seed: int, jitter: float = 0.2,
                           min_words: int = 2, max_words: int = 4) -> list[tuple[str, np.ndarray]]:
    """Clean general-domain speech: random character strings, no domain lexicon.

    Used to pretrain the base recogniser so that it is acoustically competent
    without having memorised the in-domain vocabulary.
    """
    letters = vocab.characters[:-1]
    lengths = [len(w) for w in vocab.words]
    out = []
    for i in range(count):
        rng = np.random.default_rng((seed, 0xBEE, i))
        n_words = int(rng.integers(min_words, max_words + 1))
        words = ["".join(rng.choice(letters, size=int(rng.integers(min(lengths), max(lengths) + 1))))
                 for _ in range(n_words)]
        text = " ".join(words)
        out.append((text, render_chars(text, vocab, int(rng.integers(0, 2 ** 31 - 1)), jitter)))
    return out


def write_corpus(corpus: Corpus, directory) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"seed": corpus.seed, "config": asdict(corpus.config)}
    (out / "corpus.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    for name, fname in SPLIT_FILES.items():
        with open(out / fname, "w") as fh:
            for utt in corpus.splits[name]:
                fh.write(json.dumps(utt.to_record()) + "\n")


def read_corpus(directory) -> Corpus:
    src = Path(directory)
    meta_path = src / "corpus.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no corpus.json in {src}")
    meta = json.loads(meta_path.read_text())
    cfg = CorpusConfig(**meta["config"])
    vocab = Vocabulary.build(WORD_LIST[:cfg.vocab_size], meta["seed"], cfg.frames_per_char,
                             cfg.n_features, cfg.template_spread, cfg.n_groups, cfg.homophones)
    corpus = Corpus(cfg, meta["seed"], vocab)
    for name, fname in SPLIT_FILES.items():
        utts = []
        with open(src / fname) as fh:
            for line in fh:
                if line.strip():
                    utts.append(Utterance.from_record(json.loads(line), cfg.n_features))
        corpus.splits[name] = CorpusSplit(name, utts)
    return corpus
