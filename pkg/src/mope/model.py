"""Dual-encoder transformer with addressable prunable modules.

Both towers are pre-norm bidirectional transformers over integer token
sequences. Each tower mean-pools its final hidden states, projects them into a
shared embedding space and L2-normalises the result.

Weights live in one flat ``dict[str, np.ndarray]`` keyed like
``"vision.layers.2.wq"``. Width pruning only ever removes head slices and FFN
neurons, so the residual width ``d`` is the same in every layer of every model
derived from one config.

Conventions:

* ``W_q``, ``W_k``, ``W_v`` are ``d x (h * d_head)``; head ``i`` owns columns
  ``[i*d_head, (i+1)*d_head)``. ``W_o`` is ``(h * d_head) x d``; head ``i`` owns
  the matching rows.
* ``W_1`` is ``d x d_ff`` and ``W_2`` is ``d_ff x d``; neuron ``j`` owns column
  ``j`` of ``W_1``, entry ``j`` of ``b_1`` and row ``j`` of ``W_2``.
* An attention block whose heads are all ablated outputs exactly zero (its
  output bias is dropped too); likewise an FFN block whose neuron groups are
  all ablated. Ablating a whole layer is therefore the same as ablating all of
  its heads and groups: the residual stream passes through untouched.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np

from mope import numerics as nx
from mope.numerics import Node

ENCODERS = ("vision", "text")
ENCODER_ORDER = {name: i for i, name in enumerate(ENCODERS)}
KINDS = ("head", "group", "layer")
LN_EPS = 1e-5
INIT_STD = 0.02
INIT_LOGIT_SCALE = math.log(1.0 / 0.07)
DEFAULT_GROUPS = 8


class ConfigError(ValueError):
    pass


class ModelInputError(ValueError):
    pass


class PruneError(ValueError):
    """A pruning plan that cannot be applied to the model."""


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    n_heads: int = 4
    d_ff: int | None = None
    n_layers_v: int = 4
    n_layers_t: int = 4
    vocab_v: int = 64
    vocab_t: int = 64
    seq_v: int = 8
    seq_t: int = 8
    e: int = 32
    seed: int = 42

    def __post_init__(self):
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d)
        sizes = {k: v for k, v in asdict(self).items() if k != "seed"}
        bad = [k for k, v in sizes.items() if not isinstance(v, int) or v < 1]
        if bad:
            raise ConfigError(f"sizes must be positive integers: {', '.join(bad)}")
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d // self.n_heads

    def n_layers(self, encoder: str) -> int:
        return self.n_layers_v if encoder == "vision" else self.n_layers_t

    def vocab(self, encoder: str) -> int:
        return self.vocab_v if encoder == "vision" else self.vocab_t

    def seq(self, encoder: str) -> int:
        return self.seq_v if encoder == "vision" else self.seq_t

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        return cls(**dict(data))


@dataclass(frozen=True)
class LayerArch:
    """Retained layer: index of the originating layer, kept heads, kept neurons."""

    source: int
    heads: int
    ffn: int


@dataclass(frozen=True, order=True)
class ModuleId:
    """A prunable unit. ``index`` is the head or group index; -1 for layers."""

    kind: str
    encoder: str
    layer: int
    index: int = -1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown module kind {self.kind!r}")
        if self.encoder not in ENCODERS:
            raise ValueError(f"unknown encoder {self.encoder!r}")

    @classmethod
    def head(cls, encoder: str, layer: int, head: int) -> "ModuleId":
        return cls("head", encoder, layer, head)

    @classmethod
    def group(cls, encoder: str, layer: int, group: int) -> "ModuleId":
        return cls("group", encoder, layer, group)

    @classmethod
    def whole_layer(cls, encoder: str, layer: int) -> "ModuleId":
        return cls("layer", encoder, layer)

    def sort_key(self) -> tuple:
        return (ENCODER_ORDER[self.encoder], self.layer, self.index, KINDS.index(self.kind))

    def __str__(self) -> str:
        if self.kind == "layer":
            return f"{self.encoder}.L{self.layer}"
        tag = "H" if self.kind == "head" else "G"
        return f"{self.encoder}.L{self.layer}.{tag}{self.index}"

    @classmethod
    def parse(cls, text: str) -> "ModuleId":
        parts = text.split(".")
        try:
            encoder, layer = parts[0], int(parts[1][1:])
            if len(parts) == 2:
                return cls.whole_layer(encoder, layer)
            kind = {"H": "head", "G": "group"}[parts[2][0]]
            return cls(kind, encoder, layer, int(parts[2][1:]))
        except (IndexError, KeyError, ValueError) as exc:
            raise ValueError(f"malformed module id {text!r}") from exc


def sort_ids(ids: Iterable[ModuleId]) -> list[ModuleId]:
    return sorted(ids, key=ModuleId.sort_key)


def group_bounds(n_neurons: int, n_groups: int) -> list[tuple[int, int]]:
    """Contiguous neuron spans; the last group absorbs any remainder."""
    n = min(n_groups, n_neurons)
    size = n_neurons // n
    bounds = [(g * size, (g + 1) * size) for g in range(n)]
    bounds[-1] = (bounds[-1][0], n_neurons)
    return bounds


@dataclass
class DualEncoder:
    config: ModelConfig
    arch: dict[str, tuple[LayerArch, ...]]
    params: dict[str, np.ndarray]
    provenance: dict = field(default_factory=dict)

    def layers(self, encoder: str) -> tuple[LayerArch, ...]:
        return self.arch[encoder]

    def copy(self) -> "DualEncoder":
        return DualEncoder(
            self.config,
            dict(self.arch),
            {k: v.copy() for k, v in self.params.items()},
            dict(self.provenance),
        )

    def param_hash(self) -> str:
        """sha256 over architecture and every weight, bitwise."""
        h = hashlib.sha256()
        for enc in ENCODERS:
            for la in self.arch[enc]:
                h.update(f"{enc}:{la.source}:{la.heads}:{la.ffn};".encode())
        for name in sorted(self.params):
            arr = np.asarray(self.params[name], dtype="<f8")
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def all_module_ids(self, kind: str, n_groups: int = DEFAULT_GROUPS) -> list[ModuleId]:
        ids = []
        for enc in ENCODERS:
            for l, la in enumerate(self.arch[enc]):
                if kind == "head":
                    ids.extend(ModuleId.head(enc, l, h) for h in range(la.heads))
                elif kind == "group":
                    n = len(group_bounds(la.ffn, n_groups))
                    ids.extend(ModuleId.group(enc, l, g) for g in range(n))
                else:
                    ids.append(ModuleId.whole_layer(enc, l))
        return ids

    def check_id(self, mid: ModuleId, n_groups: int = DEFAULT_GROUPS) -> None:
        layers = self.arch[mid.encoder]
        if not 0 <= mid.layer < len(layers):
            raise KeyError(f"{mid}: layer out of range")
        la = layers[mid.layer]
        limit = {"head": la.heads, "group": len(group_bounds(la.ffn, n_groups)), "layer": 0}[mid.kind]
        if mid.kind != "layer" and not 0 <= mid.index < limit:
            raise KeyError(f"{mid}: index out of range")


@dataclass(frozen=True)
class AblationSet:
    """Modules zeroed at forward time; the model itself is untouched."""

    ids: frozenset = frozenset()
    n_groups: int = DEFAULT_GROUPS

    @classmethod
    def of(cls, *ids: ModuleId, n_groups: int = DEFAULT_GROUPS) -> "AblationSet":
        return cls(frozenset(ids), n_groups)

    def __bool__(self) -> bool:
        return bool(self.ids)

    def layer_ablated(self, encoder: str, layer: int) -> bool:
        return ModuleId.whole_layer(encoder, layer) in self.ids

    def heads_off(self, encoder: str, layer: int) -> set[int]:
        return {m.index for m in self.ids if m.kind == "head" and m.encoder == encoder and m.layer == layer}

    def groups_off(self, encoder: str, layer: int) -> set[int]:
        return {m.index for m in self.ids if m.kind == "group" and m.encoder == encoder and m.layer == layer}


EMPTY = AblationSet()


def _pname(encoder: str, layer: int | None, name: str) -> str:
    return f"{encoder}.{name}" if layer is None else f"{encoder}.layers.{layer}.{name}"


def _layer_shapes(cfg: ModelConfig, heads: int, ffn: int) -> dict[str, tuple[int, ...]]:
    d, hd = cfg.d, heads * cfg.d_head
    return {
        "ln1_g": (d,), "ln1_b": (d,),
        "wq": (d, hd), "bq": (hd,),
        "wk": (d, hd), "bk": (hd,),
        "wv": (d, hd), "bv": (hd,),
        "wo": (hd, d), "bo": (d,),
        "ln2_g": (d,), "ln2_b": (d,),
        "w1": (d, ffn), "b1": (ffn,),
        "w2": (ffn, d), "b2": (d,),
    }


def expected_shapes(cfg: ModelConfig, arch: Mapping[str, Iterable[LayerArch]]) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape implied by a config and architecture record."""
    shapes: dict[str, tuple[int, ...]] = {}
    for enc in ENCODERS:
        shapes[_pname(enc, None, "tok_emb")] = (cfg.vocab(enc), cfg.d)
        shapes[_pname(enc, None, "pos_emb")] = (cfg.seq(enc), cfg.d)
        for l, la in enumerate(arch[enc]):
            for name, shape in _layer_shapes(cfg, la.heads, la.ffn).items():
                shapes[_pname(enc, l, name)] = shape
        shapes[_pname(enc, None, "lnf_g")] = (cfg.d,)
        shapes[_pname(enc, None, "lnf_b")] = (cfg.d,)
        shapes[_pname(enc, None, "proj")] = (cfg.d, cfg.e)
    shapes["logit_scale"] = ()
    return shapes


def init_model(cfg: ModelConfig) -> DualEncoder:
    """Seeded N(0, 0.02) weights, zero biases, unit layer-norm gains."""
    if not isinstance(cfg, ModelConfig):
        raise ConfigError("init_model expects a ModelConfig")
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, np.ndarray] = {}
    arch = {}

    def normal(shape):
        return rng.normal(0.0, INIT_STD, size=shape)

    for enc in ENCODERS:
        params[_pname(enc, None, "tok_emb")] = normal((cfg.vocab(enc), cfg.d))
        params[_pname(enc, None, "pos_emb")] = normal((cfg.seq(enc), cfg.d))
        layers = []
        for l in range(cfg.n_layers(enc)):
            for name, shape in _layer_shapes(cfg, cfg.n_heads, cfg.d_ff).items():
                if name.endswith("_g"):
                    arr = np.ones(shape)
                elif name.startswith("w"):
                    arr = normal(shape)
                else:
                    arr = np.zeros(shape)
                params[_pname(enc, l, name)] = arr
            layers.append(LayerArch(l, cfg.n_heads, cfg.d_ff))
        params[_pname(enc, None, "lnf_g")] = np.ones(cfg.d)
        params[_pname(enc, None, "lnf_b")] = np.zeros(cfg.d)
        params[_pname(enc, None, "proj")] = normal((cfg.d, cfg.e))
        arch[enc] = tuple(layers)
    params["logit_scale"] = np.array(INIT_LOGIT_SCALE)
    return DualEncoder(cfg, arch, params)


# -- forward ------------------------------------------------------------------


@dataclass
class Encoded:
    feature: Node
    hiddens: list[Node]


def encode(
    model: DualEncoder,
    encoder: str,
    tokens,
    ablation: AblationSet = EMPTY,
    weights: Mapping[str, Node] | None = None,
    taps: dict | None = None,
) -> Encoded:
    """Run one tower over a batch of token rows.

    ``weights`` maps parameter names to graph nodes when gradients are needed;
    otherwise the model's arrays are used as constants. When ``taps`` is a
    dict it is filled with per-layer intermediate nodes (``("ffn", l)`` for the
    FFN activations, ``("head", l, h)`` for per-head attention contexts).
    """
    cfg = model.config
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.dtype.kind not in "iu":
        raise ModelInputError("token ids must be integers")
    vocab = cfg.vocab(encoder)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise ModelInputError(f"{encoder} token id out of range [0, {vocab})")
    seq = tokens.shape[1]
    if seq > cfg.seq(encoder):
        raise ModelInputError(f"{encoder} sequence length {seq} exceeds {cfg.seq(encoder)}")

    def w(name: str, layer: int | None = None) -> Node:
        key = _pname(encoder, layer, name)
        if weights is not None and key in weights:
            return weights[key]
        return nx.const(model.params[key])

    x = nx.gather(w("tok_emb"), tokens)
    x = nx.add(x, nx.take_rows(w("pos_emb"), 0, seq))
    hiddens = []
    dh = cfg.d_head
    scale = 1.0 / math.sqrt(dh)
    for l, la in enumerate(model.arch[encoder]):
        if ablation.layer_ablated(encoder, l):
            hiddens.append(x)
            continue
        heads_on = [h for h in range(la.heads) if h not in ablation.heads_off(encoder, l)]
        if heads_on:
            h_in = nx.layer_norm(x, w("ln1_g", l), w("ln1_b", l), LN_EPS)
            q = nx.add(nx.matmul(h_in, w("wq", l)), w("bq", l))
            k = nx.add(nx.matmul(h_in, w("wk", l)), w("bk", l))
            v = nx.add(nx.matmul(h_in, w("wv", l)), w("bv", l))
            wo = w("wo", l)
            attn = None
            for h in heads_on:
                lo, hi = h * dh, (h + 1) * dh
                qh, kh, vh = nx.take_cols(q, lo, hi), nx.take_cols(k, lo, hi), nx.take_cols(v, lo, hi)
                probs = nx.softmax_rows(nx.scale(nx.matmul(qh, nx.transpose(kh)), scale))
                ctx = nx.matmul(probs, vh)
                if taps is not None:
                    taps[("head", l, h)] = ctx
                out_h = nx.matmul(ctx, nx.take_rows(wo, lo, hi))
                attn = out_h if attn is None else nx.add(attn, out_h)
            x = nx.add(x, nx.add(attn, w("bo", l)))

        spans = group_bounds(la.ffn, ablation.n_groups)
        groups_off = ablation.groups_off(encoder, l)
        if len(groups_off) < len(spans):
            h_in = nx.layer_norm(x, w("ln2_g", l), w("ln2_b", l), LN_EPS)
            act = nx.gelu(nx.add(nx.matmul(h_in, w("w1", l)), w("b1", l)))
            if taps is not None:
                taps[("ffn", l)] = act
            if groups_off:
                mask = np.ones(la.ffn)
                for g in groups_off:
                    lo, hi = spans[g]
                    mask[lo:hi] = 0.0
                act = nx.mul(act, mask)
            x = nx.add(x, nx.add(nx.matmul(act, w("w2", l)), w("b2", l)))
        hiddens.append(x)

    final = nx.layer_norm(x, w("lnf_g"), w("lnf_b"), LN_EPS)
    pooled = nx.mean_axis(final, 1)
    feature = nx.l2_normalize_rows(nx.matmul(pooled, w("proj")))
    return Encoded(feature, hiddens)


def encode_features(
    model: DualEncoder, encoder: str, tokens, ablation: AblationSet = EMPTY, batch_size: int = 256
) -> np.ndarray:
    """Unit-norm features for many rows, evaluated in fixed-size batches."""
    tokens = np.asarray(tokens)
    out = [
        encode(model, encoder, tokens[i : i + batch_size], ablation).feature.value
        for i in range(0, len(tokens), batch_size)
    ]
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.config.e))


# -- parameter accounting ---------------------------------------------------------


def layer_param_count(d: int, d_head: int, heads: int, ffn: int) -> int:
    hd = heads * d_head
    return 3 * (d * hd + hd) + hd * d + d + 2 * (2 * d) + d * ffn + ffn + ffn * d + d


def closed_form_param_count(cfg: ModelConfig, arch: Mapping[str, Iterable[LayerArch]]) -> int:
    """Exact parameter count of both towers from the architecture record.

    Per tower: token and positional embeddings, each retained layer, the final
    layer norm and the projection. The scalar logit scale is not counted.
    """
    d = cfg.d
    total = 0
    for enc in ENCODERS:
        total += cfg.vocab(enc) * d + cfg.seq(enc) * d
        total += sum(layer_param_count(d, cfg.d_head, la.heads, la.ffn) for la in arch[enc])
        total += 2 * d + d * cfg.e
    return total


def param_count(model: DualEncoder, encoder: str | None = None) -> int:
    """Number of weights actually stored, excluding the logit scale."""
    prefixes = (f"{encoder}.",) if encoder else tuple(f"{e}." for e in ENCODERS)
    return int(sum(v.size for k, v in model.params.items() if k.startswith(prefixes)))


def reported_width(model: DualEncoder, encoder: str) -> float:
    """Width in the head-fraction sense: d times the mean kept-head fraction."""
    layers = model.arch[encoder]
    cfg = model.config
    return cfg.d * sum(la.heads for la in layers) / (len(layers) * cfg.n_heads)


# -- surgery ------------------------------------------------------------------------


def apply_permutations(model: DualEncoder, perms: Mapping[str, Mapping[int, Iterable[int]]]) -> DualEncoder:
    """Reorder FFN neurons per layer; ``perms[enc][layer][new] = old``."""
    out = model.copy()
    for enc, layers in perms.items():
        for l, perm in layers.items():
            perm = np.asarray(list(perm), dtype=int)
            l = int(l)
            if sorted(perm.tolist()) != list(range(model.arch[enc][l].ffn)):
                raise PruneError(f"{enc} layer {l}: not a permutation of its neurons")
            out.params[_pname(enc, l, "w1")] = model.params[_pname(enc, l, "w1")][:, perm].copy()
            out.params[_pname(enc, l, "b1")] = model.params[_pname(enc, l, "b1")][perm].copy()
            out.params[_pname(enc, l, "w2")] = model.params[_pname(enc, l, "w2")][perm, :].copy()
    return out


def structural_prune(
    model: DualEncoder,
    remove: Iterable[ModuleId],
    n_groups: int = DEFAULT_GROUPS,
    permutations: Mapping | None = None,
) -> DualEncoder:
    """Physically delete heads, neuron groups and layers; returns a new model.

    Module ids are interpreted against ``model``'s current architecture (after
    ``permutations`` are applied, when given). Plans that would leave a layer
    without heads or neurons, or a tower without layers, are refused.
    """
    remove = list(remove)
    for mid in remove:
        model.check_id(mid, n_groups)
    src = apply_permutations(model, permutations) if permutations else model
    if not remove:
        return src if permutations else model.copy()

    cfg, dh = model.config, model.config.d_head
    params = {k: v.copy() for k, v in src.params.items() if not k.startswith(tuple(f"{e}.layers." for e in ENCODERS))}
    arch = {}
    for enc in ENCODERS:
        kept_layers = []
        drop_layers = {m.layer for m in remove if m.kind == "layer" and m.encoder == enc}
        if len(drop_layers) >= len(src.arch[enc]):
            raise PruneError(f"plan removes every layer of the {enc} tower")
        for l, la in enumerate(src.arch[enc]):
            if l in drop_layers:
                continue
            heads_off = {m.index for m in remove if m.kind == "head" and m.encoder == enc and m.layer == l}
            groups_off = {m.index for m in remove if m.kind == "group" and m.encoder == enc and m.layer == l}
            heads_keep = [h for h in range(la.heads) if h not in heads_off]
            spans = group_bounds(la.ffn, n_groups)
            neurons_keep = [j for g, (lo, hi) in enumerate(spans) if g not in groups_off for j in range(lo, hi)]
            if not heads_keep:
                raise PruneError(f"plan removes every head of {enc} layer {l}")
            if not neurons_keep:
                raise PruneError(f"plan removes every FFN neuron of {enc} layer {l}")
            cols = np.concatenate([np.arange(h * dh, (h + 1) * dh) for h in heads_keep])
            nl = len(kept_layers)
            old = lambda name: src.params[_pname(enc, l, name)]  # noqa: E731
            new = {
                "ln1_g": old("ln1_g"), "ln1_b": old("ln1_b"),
                "wq": old("wq")[:, cols], "bq": old("bq")[cols],
                "wk": old("wk")[:, cols], "bk": old("bk")[cols],
                "wv": old("wv")[:, cols], "bv": old("bv")[cols],
                "wo": old("wo")[cols, :], "bo": old("bo"),
                "ln2_g": old("ln2_g"), "ln2_b": old("ln2_b"),
                "w1": old("w1")[:, neurons_keep], "b1": old("b1")[neurons_keep],
                "w2": old("w2")[neurons_keep, :], "b2": old("b2"),
            }
            for name, arr in new.items():
                params[_pname(enc, nl, name)] = np.array(arr, copy=True)
            kept_layers.append(LayerArch(la.source, len(heads_keep), len(neurons_keep)))
        arch[enc] = tuple(kept_layers)
    return DualEncoder(cfg, arch, params, dict(model.provenance))


def with_params(model: DualEncoder, params: Mapping[str, np.ndarray]) -> DualEncoder:
    return replace(model, params={k: np.array(v, copy=True) for k, v in params.items()})
