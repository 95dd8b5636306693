"""Synthetic paired-token retrieval task.

Each pair is a *scene*: a set of distinct latent concepts. A concept owns a
fixed short token template in each modality, drawn from two independent
random concept->token maps; no token is shared between concepts. The vision row lays templates out in ascending
concept order, the text row in descending order, so the towers cannot match
positions and have to learn the concept vocabulary. Noise replaces tokens
uniformly at random. Scenes never repeat across splits.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from mope.canonical import canonical_bytes, sha256_bytes
from mope.evaluation import PairedSplit

SPLITS = ("train", "val", "test")


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    n_train: int = 256
    n_val: int = 128
    n_test: int = 128
    n_concepts: int = 24
    concepts_per_pair: int = 4
    vocab_v: int = 64
    vocab_t: int = 64
    seq_v: int = 8
    seq_t: int = 8
    noise_rate: float = 0.01
    seed: int = 42

    def __post_init__(self):
        if not 0.0 <= self.noise_rate <= 0.5:
            raise SpecError("noise_rate must lie in [0, 0.5]")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise SpecError("every split needs at least one pair")
        k = self.concepts_per_pair
        if not 1 <= k <= self.n_concepts:
            raise SpecError("concepts_per_pair must lie in [1, n_concepts]")
        for name, seq in (("seq_v", self.seq_v), ("seq_t", self.seq_t)):
            if seq < k:
                raise SpecError(f"{name}={seq} cannot hold {k} concept templates")
        for name, vocab, seq in (("vocab_v", self.vocab_v, self.seq_v), ("vocab_t", self.vocab_t, self.seq_t)):
            if vocab < self.n_concepts * (seq // k) + 1:
                raise SpecError(f"{name}={vocab} too small for {self.n_concepts} concept templates plus filler")
        if math.comb(self.n_concepts, k) < self.total_pairs:
            raise SpecError("not enough distinct scenes for the requested split sizes")

    @property
    def total_pairs(self) -> int:
        return self.n_train + self.n_val + self.n_test

    def split_size(self, name: str) -> int:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[name]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data) -> "SyntheticSpec":
        return cls(**dict(data))


@dataclass(frozen=True)
class ConceptTemplates:
    vision: np.ndarray  # n_concepts x template_len_v
    text: np.ndarray


def _templates(spec: SyntheticSpec, rng: np.random.Generator, vocab: int, seq: int) -> np.ndarray:
    length = seq // spec.concepts_per_pair
    return rng.permutation(vocab)[: spec.n_concepts * length].reshape(spec.n_concepts, length)


def make_templates(spec: SyntheticSpec) -> ConceptTemplates:
    rng = np.random.default_rng([spec.seed, 0])
    return ConceptTemplates(
        _templates(spec, rng, spec.vocab_v, spec.seq_v),
        _templates(spec, rng, spec.vocab_t, spec.seq_t),
    )


def render(scene, templates: np.ndarray, seq: int, filler: int, descending: bool = False) -> np.ndarray:
    """Concatenate concept templates for ``scene``, right-padded with ``filler``."""
    order = sorted(scene, reverse=descending)
    row = np.concatenate([templates[c] for c in order])
    pad = np.full(seq - len(row), filler, dtype=row.dtype)
    return np.concatenate([row, pad]).astype(np.int64)


def _noisy(rows: np.ndarray, vocab: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    if rate == 0:
        return rows
    hit = rng.random(rows.shape) < rate
    return np.where(hit, rng.integers(0, vocab, size=rows.shape), rows)


def sample_scenes(spec: SyntheticSpec, rng: np.random.Generator) -> list[tuple[int, ...]]:
    seen: set[tuple[int, ...]] = set()
    scenes = []
    while len(scenes) < spec.total_pairs:
        scene = tuple(sorted(rng.choice(spec.n_concepts, size=spec.concepts_per_pair, replace=False).tolist()))
        if scene not in seen:
            seen.add(scene)
            scenes.append(scene)
    return scenes


def generate_dataset(spec: SyntheticSpec) -> dict[str, PairedSplit]:
    """Deterministic train/val/test splits with exact diagonal pairing."""
    tpl = make_templates(spec)
    rng = np.random.default_rng([spec.seed, 1])
    scenes = sample_scenes(spec, rng)
    fill_v = int(np.setdiff1d(np.arange(spec.vocab_v), tpl.vision)[0])
    fill_t = int(np.setdiff1d(np.arange(spec.vocab_t), tpl.text)[0])
    splits = {}
    start = 0
    for name in SPLITS:
        chunk = scenes[start : start + spec.split_size(name)]
        start += len(chunk)
        v = np.stack([render(s, tpl.vision, spec.seq_v, fill_v) for s in chunk])
        t = np.stack([render(s, tpl.text, spec.seq_t, fill_t, descending=True) for s in chunk])
        v = _noisy(v, spec.vocab_v, spec.noise_rate, rng)
        t = _noisy(t, spec.vocab_t, spec.noise_rate, rng)
        splits[name] = PairedSplit(name, v, t)
    return splits


def dataset_scenes(spec: SyntheticSpec) -> dict[str, list[tuple[int, ...]]]:
    """The latent scenes behind each split, in row order."""
    scenes = sample_scenes(spec, np.random.default_rng([spec.seed, 1]))
    out, start = {}, 0
    for name in SPLITS:
        out[name] = scenes[start : start + spec.split_size(name)]
        start += spec.split_size(name)
    return out


# -- persistence ------------------------------------------------------------------------------


def dataset_document(spec: SyntheticSpec, splits: dict[str, PairedSplit]) -> dict:
    return {
        "spec": spec.to_dict(),
        "splits": {
            name: {"vision": split.vision.tolist(), "text": split.text.tolist()} for name, split in splits.items()
        },
    }


def dataset_bytes(spec: SyntheticSpec, splits: dict[str, PairedSplit]) -> bytes:
    return canonical_bytes(dataset_document(spec, splits)) + b"\n"


def dataset_hash(spec: SyntheticSpec, splits: dict[str, PairedSplit] | None = None) -> str:
    """Hash of the canonical dataset file, whether or not it was written to disk."""
    return sha256_bytes(dataset_bytes(spec, splits if splits is not None else generate_dataset(spec)))


def save_dataset(spec: SyntheticSpec, splits: dict[str, PairedSplit], path) -> str:
    data = dataset_bytes(spec, splits)
    with open(path, "wb") as fh:
        fh.write(data)
    return sha256_bytes(data)


def load_dataset(path) -> tuple[SyntheticSpec, dict[str, PairedSplit]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        doc = json.loads(raw)
        spec = SyntheticSpec.from_dict(doc["spec"])
        splits = {
            name: PairedSplit(
                name,
                np.asarray(body["vision"], dtype=np.int64).reshape(-1, spec.seq_v),
                np.asarray(body["text"], dtype=np.int64).reshape(-1, spec.seq_t),
            )
            for name, body in doc["splits"].items()
        }
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        raise SpecError(f"corrupt dataset file: {exc}") from None
    missing = [s for s in SPLITS if s not in splits]
    if missing:
        raise SpecError(f"dataset file lacks split {missing[0]!r}")
    return spec, splits
