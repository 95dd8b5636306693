import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import jitter, random_split
from mope.evaluation import evaluate
from mope.model import (
    AblationSet,
    ConfigError,
    LayerArch,
    ModelConfig,
    ModelInputError,
    ModuleId,
    PruneError,
    closed_form_param_count,
    encode,
    group_bounds,
    init_model,
    param_count,
    reported_width,
    structural_prune,
)


def hand_layer_count(d, dh, h, f):
    # q, k, v with biases; output projection with bias; two norms; up and down projections
    return 3 * (d * h * dh + h * dh) + h * dh * d + d + 4 * d + d * f + f + f * d + d


def hand_total(cfg):
    total = 0
    for vocab, seq, n in ((cfg.vocab_v, cfg.seq_v, cfg.n_layers_v), (cfg.vocab_t, cfg.seq_t, cfg.n_layers_t)):
        total += (vocab + seq) * cfg.d
        total += n * hand_layer_count(cfg.d, cfg.d_head, cfg.n_heads, cfg.d_ff)
        total += 2 * cfg.d + cfg.d * cfg.e
    return total


def layer_norm_np(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def all_modules(model, enc, kinds=("head", "group")):
    ids = []
    for kind in kinds:
        ids += [m for m in model.all_module_ids(kind) if m.encoder == enc]
    return ids


def permute_heads(model, enc, layer, order):
    out = model.copy()
    dh = model.config.d_head
    cols = np.concatenate([np.arange(h * dh, (h + 1) * dh) for h in order])
    p = lambda n: f"{enc}.layers.{layer}.{n}"  # noqa: E731
    for n in ("wq", "wk", "wv"):
        out.params[p(n)] = model.params[p(n)][:, cols]
    for n in ("bq", "bk", "bv"):
        out.params[p(n)] = model.params[p(n)][cols]
    out.params[p("wo")] = model.params[p("wo")][cols, :]
    return out


# -- config and init ----------------------------------------------------------------------


def test_config_defaults_and_validation():
    assert ModelConfig(d=8, n_heads=2).d_ff == 32
    with pytest.raises(ConfigError):
        ModelConfig(d=10, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(n_layers_v=0)


def test_init_is_deterministic_per_seed(tiny_cfg):
    a, b = init_model(tiny_cfg), init_model(tiny_cfg)
    assert a.param_hash() == b.param_hash()
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    other = init_model(ModelConfig(**{**tiny_cfg.to_dict(), "seed": 43}))
    assert not np.array_equal(a.params["vision.tok_emb"], other.params["vision.tok_emb"])


def test_init_conventions(tiny_cfg):
    m = init_model(tiny_cfg)
    assert m.params["logit_scale"] == pytest.approx(math.log(1 / 0.07))
    assert np.all(m.params["vision.layers.0.bq"] == 0) and np.all(m.params["text.lnf_g"] == 1)
    assert abs(np.std(m.params["vision.layers.0.w1"]) - 0.02) < 0.004


@pytest.mark.parametrize(
    "cfg",
    [
        ModelConfig(d=16, n_heads=2, d_ff=24, n_layers_v=2, n_layers_t=3, vocab_v=12, vocab_t=10, seq_v=5, seq_t=4, e=8),
        ModelConfig(d=32, n_heads=4, n_layers_v=4, n_layers_t=4, e=16),
        ModelConfig(d=12, n_heads=3, d_ff=7, n_layers_v=1, n_layers_t=5, e=3),
    ],
)
def test_param_count_matches_hand_formula(cfg):
    m = init_model(cfg)
    assert param_count(m) == hand_total(cfg) == closed_form_param_count(cfg, m.arch)


def test_degenerate_model_hand_count():
    cfg = ModelConfig(d=8, n_heads=2, d_ff=16, n_layers_v=1, n_layers_t=1, vocab_v=10, vocab_t=10, seq_v=4, seq_t=4, e=4)
    m = init_model(cfg)
    remove = []
    for enc in ("vision", "text"):
        remove.append(ModuleId.head(enc, 0, 1))
        remove += [ModuleId.group(enc, 0, g) for g in range(1, 8)]
    pruned = structural_prune(m, remove)
    # per tower: embeddings 10*8 + 4*8 = 112
    # layer: norms 16 + 16, qkv 3*(8*4 + 4) = 108, out 4*8 + 8 = 40, up 8*2 + 2 = 18, down 2*8 + 8 = 24 -> 222
    # final norm 16, projection 8*4 = 32 -> 48
    assert param_count(pruned) == 2 * (112 + 222 + 48) == 764
    assert pruned.arch["vision"] == (LayerArch(0, 1, 2),)


def test_doubling_layers_doubles_layer_term():
    def count(n):
        return closed_form_param_count(
            ModelConfig(d=16, n_heads=4, n_layers_v=n, n_layers_t=n), {
                "vision": [LayerArch(i, 4, 64) for i in range(n)],
                "text": [LayerArch(i, 4, 64) for i in range(n)],
            }
        )
    assert count(4) - count(2) == 2 * (count(2) - count(1))
    assert count(2) - count(1) == 2 * hand_layer_count(16, 4, 4, 64)


def test_large_teacher_tower_is_about_304m():
    # ViT-L/14-sized tower: 588-wide patch "vocabulary", 257 positions, 1024 wide, 24 layers, 768 projection
    d, layers = 1024, 24
    tower = 588 * d + 257 * d + layers * hand_layer_count(d, 64, 16, 4 * d) + 2 * d + d * 768
    cfg = ModelConfig(d=d, n_heads=16, n_layers_v=layers, n_layers_t=1, vocab_v=588, seq_v=257, e=768)
    arch = {"vision": [LayerArch(i, 16, 4096) for i in range(layers)], "text": []}
    assert closed_form_param_count(cfg, arch) - (64 + 8) * d - 2 * d - d * 768 == tower
    assert round(tower / 1e6) == 304


# -- forward ------------------------------------------------------------------------------


@given(st.integers(0, 2**31 - 1))
def test_features_are_unit_norm(seed):
    cfg = ModelConfig(d=16, n_heads=2, d_ff=24, n_layers_v=2, n_layers_t=2, vocab_v=12, vocab_t=10, seq_v=5, seq_t=4, e=8)
    m = init_model(cfg)
    split = random_split(cfg, 3, seed)
    for enc, toks in (("vision", split.vision), ("text", split.text)):
        f = encode(m, enc, toks).feature.value
        assert np.all(np.abs(np.linalg.norm(f, axis=1) - 1) < 1e-9)


def test_empty_ablation_is_baseline(tiny_model):
    toks = random_split(tiny_model.config, 4).vision
    a = encode(tiny_model, "vision", toks).feature.value
    b = encode(tiny_model, "vision", toks, AblationSet()).feature.value
    assert a.tobytes() == b.tobytes()


def test_everything_ablated_leaves_pooled_embeddings(tiny_model):
    toks = random_split(tiny_model.config, 4, seed=3).vision
    p = tiny_model.params
    abl = AblationSet(frozenset(all_modules(tiny_model, "vision")))
    got = encode(tiny_model, "vision", toks, abl)
    x = p["vision.tok_emb"][toks] + p["vision.pos_emb"][: toks.shape[1]]
    z = layer_norm_np(x, p["vision.lnf_g"], p["vision.lnf_b"]).mean(axis=1) @ p["vision.proj"]
    ref = z / np.linalg.norm(z, axis=1, keepdims=True)
    assert np.max(np.abs(got.feature.value - ref)) < 1e-12
    for h in got.hiddens:
        assert np.max(np.abs(h.value - x)) < 1e-12


@pytest.mark.parametrize("enc,layer", [("vision", 0), ("vision", 1), ("text", 1)])
def test_layer_ablation_equals_layer_removal(tiny_model, enc, layer):
    toks = getattr(random_split(tiny_model.config, 5, seed=4), enc)
    mid = ModuleId.whole_layer(enc, layer)
    ablated = encode(tiny_model, enc, toks, AblationSet.of(mid)).feature.value
    removed = encode(structural_prune(tiny_model, [mid]), enc, toks).feature.value
    assert np.max(np.abs(ablated - removed)) < 1e-9


def test_out_of_range_tokens_rejected(tiny_model):
    with pytest.raises(ModelInputError):
        encode(tiny_model, "text", np.array([[0, 1, 10, 2]]))
    with pytest.raises(ModelInputError):
        encode(tiny_model, "text", np.array([[0, -1, 2, 2]]))


@given(st.permutations([0, 1, 2, 3]), st.sampled_from(["vision", "text"]), st.integers(0, 3))
def test_head_order_invariance(order, enc, layer):
    cfg = ModelConfig(d=16, n_heads=4, d_ff=32, n_layers_v=4, n_layers_t=4, vocab_v=12, vocab_t=12, seq_v=5, seq_t=5, e=8)
    m = jitter(init_model(cfg))
    toks = random_split(cfg, 3, seed=layer).vision
    a = encode(m, enc, toks).feature.value
    b = encode(permute_heads(m, enc, layer, order), enc, toks).feature.value
    assert np.max(np.abs(a - b)) < 1e-9


# -- surgery ------------------------------------------------------------------------------


def test_empty_plan_is_bitwise_identical(tiny_model):
    out = structural_prune(tiny_model, [])
    assert out is not tiny_model
    assert out.param_hash() == tiny_model.param_hash()


def test_head_prune_drops_1048_params(toy_model):
    before = param_count(toy_model)
    after = param_count(structural_prune(toy_model, [ModuleId.head("vision", 2, 1)]))
    assert before - after == 3 * (32 * 8 + 8) + 8 * 32 == 1048


@pytest.mark.parametrize(
    "mid",
    [
        ModuleId.head("vision", 0, 0),
        ModuleId.head("text", 1, 1),
        ModuleId.group("vision", 1, 3),
        ModuleId.group("text", 0, 7),
        ModuleId.whole_layer("text", 0),
    ],
)
def test_prune_matches_ablation(tiny_model, mid):
    split = random_split(tiny_model.config, 12, seed=5)
    pruned = structural_prune(tiny_model, [mid])
    enc = mid.encoder
    toks = getattr(split, enc)
    a = encode(tiny_model, enc, toks, AblationSet.of(mid)).feature.value
    b = encode(pruned, enc, toks).feature.value
    assert np.max(np.abs(a - b)) < 1e-9
    ma, mb = evaluate(tiny_model, split, AblationSet.of(mid)), evaluate(pruned, split)
    assert abs(ma.recall_mean - mb.recall_mean) < 1e-9


@given(st.sets(st.tuples(st.sampled_from(["head", "group"]), st.integers(0, 1), st.integers(0, 7)), max_size=6))
def test_multi_module_prune_matches_ablation(picks):
    cfg = ModelConfig(d=16, n_heads=2, d_ff=24, n_layers_v=2, n_layers_t=2, vocab_v=12, vocab_t=10, seq_v=5, seq_t=4, e=8)
    m = jitter(init_model(cfg))
    ids = {ModuleId(kind, "vision", layer, idx % 2 if kind == "head" else idx) for kind, layer, idx in picks}
    for l in range(2):
        # keep at least one head per layer
        if {ModuleId.head("vision", l, 0), ModuleId.head("vision", l, 1)} <= ids:
            ids.discard(ModuleId.head("vision", l, 0))
    toks = random_split(cfg, 3, seed=7).vision
    a = encode(m, "vision", toks, AblationSet(frozenset(ids))).feature.value
    b = encode(structural_prune(m, ids), "vision", toks).feature.value
    assert np.max(np.abs(a - b)) < 1e-9


def test_width_pruning_keeps_residual_width(tiny_model):
    pruned = structural_prune(tiny_model, [ModuleId.head("text", 0, 0), ModuleId.group("text", 1, 2)])
    toks = random_split(tiny_model.config, 2).text
    for h_old, h_new in zip(encode(tiny_model, "text", toks).hiddens, encode(pruned, "text", toks).hiddens):
        assert h_old.shape == h_new.shape == (2, 4, 16)


def test_surgery_is_pure(tiny_model):
    before = tiny_model.param_hash()
    structural_prune(tiny_model, [ModuleId.head("vision", 0, 1), ModuleId.whole_layer("text", 1)])
    assert tiny_model.param_hash() == before


def test_surgery_refuses_to_empty_a_layer(tiny_model):
    with pytest.raises(PruneError):
        structural_prune(tiny_model, [ModuleId.head("vision", 0, 0), ModuleId.head("vision", 0, 1)])
    with pytest.raises(PruneError):
        structural_prune(tiny_model, [ModuleId.group("text", 1, g) for g in range(8)])
    with pytest.raises(PruneError):
        structural_prune(tiny_model, [ModuleId.whole_layer("text", 0), ModuleId.whole_layer("text", 1)])
    with pytest.raises(KeyError):
        structural_prune(tiny_model, [ModuleId.head("vision", 5, 0)])


def test_pruned_layers_keep_source_index(tiny_model):
    pruned = structural_prune(tiny_model, [ModuleId.whole_layer("vision", 0)])
    assert [la.source for la in pruned.arch["vision"]] == [1]


def test_reported_width_is_head_fraction(toy_model):
    remove = [ModuleId.head("vision", l, h) for l in range(4) for h in range(2)]
    assert reported_width(structural_prune(toy_model, remove), "vision") == 16.0
    assert reported_width(toy_model, "text") == 32.0


# -- ids and groups --------------------------------------------------------------------------


@given(st.sampled_from(["head", "group", "layer"]), st.sampled_from(["vision", "text"]), st.integers(0, 40), st.integers(0, 40))
def test_module_id_text_round_trip(kind, enc, layer, idx):
    mid = ModuleId(kind, enc, layer, -1 if kind == "layer" else idx)
    assert ModuleId.parse(str(mid)) == mid


@given(st.integers(1, 500), st.integers(1, 16))
def test_group_bounds_partition_neurons(n, g):
    spans = group_bounds(n, g)
    assert spans[0][0] == 0 and spans[-1][1] == n
    assert all(a[1] == b[0] for a, b in zip(spans, spans[1:]))
    assert len(spans) == min(n, g)
    sizes = [hi - lo for lo, hi in spans]
    assert all(s == sizes[0] for s in sizes[:-1]) and sizes[-1] >= sizes[0]
