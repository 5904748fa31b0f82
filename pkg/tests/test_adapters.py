import math

import numpy as np
import pytest

from flowadapt.adapters import (
    AdapterBlock,
    AdapterSpec,
    BiasTune,
    ConditionEncoder,
    CrossAttention,
    EncoderConfig,
    LoRA,
    ParameterPartition,
    adapter_block_forward,
    adapter_block_param_formula,
    adaptive_param_formula,
    adaptive_parameter_count,
    bias_tuned_linear,
    cross_attention_forward,
    encode_condition,
    finetune_step,
    hash_parameters,
    inject_adapters,
    lora_linear_forward,
    lora_param_formula,
    merge_lora,
    named_adapter_specs,
)
from flowadapt.flow import MaskSpec, TrainingExample, collate
from flowadapt.layers import Linear
from flowadapt.numerics import Adam, AdamConfig, Tensor, evaluate_with_gradients, finite_difference_gradients, relative_error, seeded_rng
from flowadapt.transformer import BackboneConfig, ConditionContext, VectorFieldModel

VOCAB = [f"s{i}" for i in range(6)] + [f"*s{i}*" for i in range(6)] + ["<pause>"]


def _encoder(fit_steps=0, out_dim=16, seed=0):
    enc = ConditionEncoder(VOCAB, EncoderConfig(dim=16, ff_dim=32, fit_steps=fit_steps), out_dim, seed=seed)
    corpus = [[f"s{i}", f"*s{j}*", f"s{k}"] for i, j, k in np.random.default_rng(0).integers(0, 6, size=(64, 3))]
    enc.fit(corpus, seed=1)
    return enc


def _backbone(seed=0):
    cfg = BackboneConfig(n_layers=2, model_dim=16, ff_dim=32, n_heads=2, feature_dim=3,
                         max_seq_len=32, vocab_size=6, time_dim=4, symbol_dim=4)
    return VectorFieldModel(cfg, seed=seed)


def _inputs(model, n=5, seed=0):
    rng = seeded_rng(seed)
    f = model.config.feature_dim
    psi = rng.normal(size=(n, f))
    masked = np.concatenate([np.zeros((n, f)), np.ones((n, 1))], axis=1)
    return psi, masked, rng.integers(0, model.config.vocab_size, size=n), float(rng.uniform())


def _condition(model, tokens):
    return model.encode_condition([tokens])


# -- condition encoder -----------------------------------------------------------------

def test_encoder_empty_condition():
    assert encode_condition(_encoder(), []).shape == (0, 16)


def test_encoder_is_deterministic():
    enc = _encoder()
    np.testing.assert_array_equal(encode_condition(enc, ["s1", "*s2*"]).data,
                                  encode_condition(enc, ["s1", "*s2*"]).data)


def test_encoder_rejects_unknown_token():
    with pytest.raises(ValueError, match="'s99'"):
        encode_condition(_encoder(), ["s1", "s99"])
    with pytest.raises(ValueError):
        encode_condition(_encoder(), ["<mask>"])


def test_encoder_sensitive_to_one_annotation():
    enc = _encoder(fit_steps=50)
    a = encode_condition(enc, ["s1", "s2", "s3"]).data
    b = encode_condition(enc, ["s1", "*s2*", "s3"]).data
    assert np.max(np.abs(a - b)) > 0


def test_encoder_fit_freezes_internals_only():
    enc = _encoder(fit_steps=5)
    assert enc.frozen
    assert all(not p.requires_grad for p in enc.internal_parameters())
    assert all(p.requires_grad for p in enc.projection.parameters())


def test_encoder_fit_reduces_masked_token_loss():
    enc = ConditionEncoder(VOCAB, EncoderConfig(dim=16, ff_dim=32), 8, seed=0)
    corpus = [[f"s{i}", f"s{(i + 1) % 6}", f"s{(i + 2) % 6}"] for i in range(6)] * 10
    history = enc.fit(corpus, steps=150, seed=0)
    assert np.mean(history[-20:]) < 0.5 * np.mean(history[:20])


# -- cross-attention -----------------------------------------------------------------------

def test_cross_attention_zero_init_is_identity():
    rng = seeded_rng(0)
    module = CrossAttention(8, 2, 4, rng)
    hidden = rng.normal(size=(5, 8))
    out = cross_attention_forward(module, hidden, rng.normal(size=(3, 8)))
    np.testing.assert_array_equal(out.data, hidden)
    assert np.all(module.attn.o.weight.data == 0) and np.all(module.attn.o.bias.data == 0)


def test_cross_attention_empty_condition_bypasses():
    rng = seeded_rng(1)
    module = CrossAttention(4, 1, 2, rng)
    module.attn.o.weight.data = rng.normal(size=(4, 2))
    hidden = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(cross_attention_forward(module, hidden, np.zeros((0, 4))).data, hidden)


def test_cross_attention_hand_computed():
    module = CrossAttention(2, 1, 2, seeded_rng(0))
    a = module.attn
    a.q.weight.data, a.q.bias.data = np.eye(2), np.zeros(2)
    a.k.weight.data, a.k.bias.data = np.eye(2), np.zeros(2)
    a.v.weight.data, a.v.bias.data = np.array([[2.0, 0.0], [0.0, 4.0]]), np.zeros(2)
    a.o.weight.data, a.o.bias.data = np.eye(2), np.array([0.5, 0.0])
    hidden = np.array([[3.0, 1.0]])
    cond = np.array([[1.0, 0.0], [0.0, 1.0]])
    # layer norm of [3, 1]: mean 2, variance 1
    n = 1.0 / math.sqrt(1.0 + 1e-5)
    s1, s2 = n / math.sqrt(2.0), -n / math.sqrt(2.0)
    w1 = math.exp(s1) / (math.exp(s1) + math.exp(s2))
    w2 = 1.0 - w1
    expected = [3.0 + 2.0 * w1 + 0.5, 1.0 + 4.0 * w2]
    out = cross_attention_forward(module, hidden, cond).data
    np.testing.assert_allclose(out[0], expected, rtol=0, atol=1e-12)


def test_cross_attention_width_mismatch_rejected():
    module = CrossAttention(4, 1, 2, seeded_rng(0))
    module.attn.o.weight.data[:] = 1.0
    with pytest.raises(ValueError, match="cross-attention"):
        cross_attention_forward(module, np.zeros((2, 4)), np.zeros((3, 5)))


def test_cross_attention_ignores_padded_tokens():
    rng = seeded_rng(2)
    module = CrossAttention(4, 2, 2, rng)
    module.attn.o.weight.data = rng.normal(size=(4, 4))
    hidden = Tensor(rng.normal(size=(1, 3, 4)))
    values = rng.normal(size=(1, 4, 4))
    short = module(hidden, ConditionContext(Tensor(values[:, :2]), np.ones((1, 2), bool))).data
    padded_values = values.copy()
    padded_values[:, 2:] = 100.0
    mask = np.array([[True, True, False, False]])
    padded = module(hidden, ConditionContext(Tensor(padded_values), mask)).data
    np.testing.assert_allclose(short, padded, atol=1e-12)


# -- LoRA, adapter blocks, bias-tuning ---------------------------------------------------

def _linear(w, b):
    lin = Linear(w.shape[1], w.shape[0], seeded_rng(0))
    lin.weight.data, lin.bias.data = np.array(w, dtype=float), np.array(b, dtype=float)
    return lin


def test_lora_fresh_is_plain_linear():
    rng = seeded_rng(0)
    lin = Linear(5, 4, rng)
    att = LoRA(5, 4, 2, 2.0, 0.05, rng).eval()
    x = rng.normal(size=(3, 5))
    np.testing.assert_array_equal(lora_linear_forward(lin, att, x).data, lin(x).data)


def test_lora_hand_example():
    lin = _linear(np.eye(2), [0.0, 0.0])
    att = LoRA(2, 2, 1, 1.0, 0.0, seeded_rng(0)).eval()
    att.A.data = np.array([[2.0, 3.0]])
    att.B.data = np.array([[1.0], [0.0]])
    np.testing.assert_array_equal(lora_linear_forward(lin, att, np.array([1.0, 0.0])).data, [3.0, 0.0])


def test_lora_alpha_scales_delta_linearly():
    rng = seeded_rng(1)
    lin = Linear(3, 3, rng)
    x = rng.normal(size=3)
    deltas = []
    for alpha in (2.0, 4.0):
        att = LoRA(3, 3, 2, alpha, 0.0, seeded_rng(5)).eval()
        att.B.data = np.arange(6.0).reshape(3, 2)
        deltas.append(lora_linear_forward(lin, att, x).data - lin(x).data)
    np.testing.assert_allclose(deltas[1], 2 * deltas[0], rtol=1e-12)


def test_lora_rejects_bad_rank():
    with pytest.raises(ValueError):
        LoRA(3, 3, 0, 1.0, 0.0, seeded_rng(0))


def test_lora_dropout_only_in_training():
    rng = seeded_rng(2)
    att = LoRA(6, 2, 2, 2.0, 0.5, rng)
    att.B.data = np.ones((2, 2))
    x = np.ones((4, 6))
    att.eval()
    a, b = att(Tensor(x)).data, att(Tensor(x)).data
    np.testing.assert_array_equal(a, b)
    att.train()
    assert not np.array_equal(att(Tensor(x)).data, a)


@pytest.mark.parametrize("mode", ["sequential", "parallel"])
def test_adapter_block_zero_init(mode):
    rng = seeded_rng(0)
    block = AdapterBlock(6, 3, mode, rng)
    a, b = rng.normal(size=(2, 6)), rng.normal(size=(2, 6))
    np.testing.assert_array_equal(adapter_block_forward(block, a, b).data, b)


def test_parallel_adapter_reads_sub_block_input():
    rng = seeded_rng(1)
    block = AdapterBlock(4, 3, "parallel", rng)
    block.up.weight.data = rng.normal(size=(4, 3))
    block.down.bias.data = np.full(3, 5.0)  # keep the hidden units active
    x_in, x_out = rng.normal(size=4), rng.normal(size=4)
    term = adapter_block_forward(block, x_in, x_out).data - x_out
    shifted = x_out + 1.0
    np.testing.assert_allclose(adapter_block_forward(block, x_in, shifted).data - shifted, term, atol=1e-12)
    moved = adapter_block_forward(block, x_in + 1.0, x_out).data - x_out
    assert not np.allclose(moved, term)


def test_sequential_adapter_reads_sub_block_output():
    rng = seeded_rng(1)
    block = AdapterBlock(4, 3, "sequential", rng)
    block.up.weight.data = rng.normal(size=(4, 3))
    block.down.bias.data = np.full(3, 5.0)
    x_out = rng.normal(size=4)
    a = adapter_block_forward(block, rng.normal(size=4), x_out).data
    b = adapter_block_forward(block, rng.normal(size=4), x_out).data
    np.testing.assert_array_equal(a, b)


def test_adapter_block_large_parameter_count():
    block = AdapterBlock(768, 64, "sequential", seeded_rng(0))
    assert block.num_parameters() == adapter_block_param_formula(768, 64) == 99_136


def test_adapter_mode_validated():
    with pytest.raises(ValueError):
        AdapterBlock(4, 2, "serial", seeded_rng(0))


def test_bias_tune_identity_at_init():
    rng = seeded_rng(0)
    lin = Linear(4, 3, rng)
    x = rng.normal(size=(2, 4))
    np.testing.assert_array_equal(bias_tuned_linear(lin, BiasTune(3), x).data, lin(x).data)


def test_bias_tune_hand_example():
    lin = _linear(np.array([[2.0]]), [0.0])
    att = BiasTune(1)
    att.b.data, att.s.data = np.array([1.0]), np.array([3.0])
    assert bias_tuned_linear(lin, att, np.array([1.0])).data[0] == 9.0


def test_bias_tune_rejects_wrong_width():
    with pytest.raises(ValueError, match="bias-tuning"):
        bias_tuned_linear(Linear(2, 3, seeded_rng(0)), BiasTune(4), np.zeros(2))


def test_bias_tune_scale_gradient():
    rng = seeded_rng(3)
    lin = Linear(4, 3, rng)
    att = BiasTune(3)
    x = rng.normal(size=4)
    upstream = rng.normal(size=3)

    def f(b, s):
        att.b, att.s = b, s
        return (bias_tuned_linear(lin, att, x) * upstream).sum()

    params = [Tensor(np.zeros(3)), Tensor(np.ones(3))]
    _, (gb, gs) = evaluate_with_gradients(f, params)
    _, fd_s = finite_difference_gradients(f, params, step=1e-6)
    np.testing.assert_allclose(gs.data, lin(x).data * upstream, atol=1e-12)
    assert relative_error(gs.data, fd_s.data) <= 1e-6


# -- injection, partition, merge ----------------------------------------------------------

@pytest.mark.parametrize("name", sorted(named_adapter_specs()))
def test_injection_is_identity(name):
    model = _backbone(1).eval()
    args = [_inputs(model, 6, seed=s) for s in range(3)]
    before = [model(*a).data for a in args]
    inject_adapters(model, named_adapter_specs()[name], _encoder(), seed=2)
    model.eval()
    for a, ref in zip(args, before):
        np.testing.assert_array_equal(model(*a, cond=_condition(model, ["s1", "*s2*"])).data, ref)


def test_double_injection_rejected():
    model = _backbone()
    inject_adapters(model, AdapterSpec(), _encoder())
    with pytest.raises(ValueError, match="already"):
        inject_adapters(model, AdapterSpec(), _encoder())


def test_partition_is_disjoint_and_exhaustive():
    model = _backbone()
    _, part = inject_adapters(model, AdapterSpec(kind="parallel"), _encoder())
    names = {n for n, _ in model.named_parameters()}
    assert set(part.trainable).isdisjoint(part.frozen)
    assert set(part.trainable) | set(part.frozen) == names
    assert part.n_trainable + part.n_frozen == model.num_parameters()
    assert ParameterPartition.from_dict(part.to_dict()) == part


def test_partition_contents_per_spec():
    model = _backbone()
    _, part = inject_adapters(model, AdapterSpec(kind="lora+bias_tuning"), _encoder())
    norms = [n for n, _ in model.named_parameters() if ".ln" in n or n.startswith("final_ln")]
    backbone_norms = [n for n in norms if not n.startswith("condition_encoder.") and ".cross_attn." not in n]
    assert backbone_norms and set(backbone_norms) <= set(part.trainable)
    assert "condition_encoder.projection.weight" in part.trainable
    assert not any(n.startswith("condition_encoder.layers") for n in part.trainable)
    assert "layers.0.self_attn.q.weight" in part.frozen

    plain = _backbone()
    _, part = inject_adapters(plain, AdapterSpec(kind="lora"), _encoder())
    assert "layers.0.ln1.weight" in part.frozen
    assert all(".cross_attn." in n or ".lora." in n or n.startswith("condition_encoder.projection")
               for n in part.trainable)


def test_desk_lora_count():
    model = VectorFieldModel(BackboneConfig(), seed=0)
    inject_adapters(model, AdapterSpec(kind="lora", lora_rank=8), _encoder())
    n = sum(p.size for name, p in model.named_parameters() if ".lora." in name)
    assert n == 4 * 3 * 2 * (64 * 8) == 12_288


@pytest.mark.parametrize("name", sorted(named_adapter_specs()))
def test_adaptive_count_matches_formula_desk(name):
    model = _backbone()
    spec = named_adapter_specs()[name]
    inject_adapters(model, spec, _encoder())
    assert adaptive_parameter_count(model) == adaptive_param_formula(model.config, spec)


def test_lora_formula():
    assert lora_param_formula(768, 768, 64) == 64 * 1536


def _trained_lora_model(seed=0):
    model = _backbone(seed)
    inject_adapters(model, AdapterSpec(kind="lora", lora_placement="all_linear"), _encoder(), seed=seed)
    rng = seeded_rng(seed + 10)
    for _, p in model.named_parameters():
        if p.requires_grad:
            p.data = p.data + 0.1 * rng.normal(size=p.shape)
    return model.eval()


def test_merge_preserves_outputs():
    model = _trained_lora_model()
    args = [_inputs(model, 6, seed=s) for s in range(10)]
    cond = _condition(model, ["s0", "*s3*"])
    before = [model(*a, cond=cond).data for a in args]
    merge_lora(model)
    assert not any(m.lora for m in model.modules() if isinstance(m, Linear))
    for a, ref in zip(args, before):
        assert np.max(np.abs(model(*a, cond=cond).data - ref)) <= 1e-9


def test_merge_of_fresh_attachments_is_noop():
    model = _backbone()
    before = model.state_dict()
    inject_adapters(model, AdapterSpec(kind="lora"), _encoder())
    merge_lora(model.eval())
    after = model.state_dict()
    for k, v in before.items():
        np.testing.assert_array_equal(after[k], v)


def test_merge_preconditions():
    model = _trained_lora_model()
    with pytest.raises(RuntimeError):
        merge_lora(model.train())
    merge_lora(model.eval())
    with pytest.raises(ValueError):
        merge_lora(model)


# -- fine-tuning step -------------------------------------------------------------------------

def _cond_batch(seed=0):
    rng = seeded_rng(seed)
    return collate([TrainingExample(rng.normal(size=(6, 3)), rng.integers(0, 6, size=6),
                                    ["s1", "*s2*"], MaskSpec("all")) for _ in range(3)])


def test_finetune_keeps_frozen_parameters():
    model = _backbone(3)
    _, part = inject_adapters(model, AdapterSpec(), _encoder())
    frozen_hash = hash_parameters(model, part.frozen)
    trainable_hash = hash_parameters(model, part.trainable)
    opt = Adam(part.tensors(model), AdamConfig(lr=1e-2, warmup_steps=0))
    rng = seeded_rng(0)
    model.train()
    for s in range(5):
        finetune_step(model, part, _cond_batch(s), opt, rng)
    assert hash_parameters(model, part.frozen) == frozen_hash
    assert hash_parameters(model, part.trainable) != trainable_hash


def test_finetune_lr_zero_changes_nothing():
    model = _backbone(4)
    _, part = inject_adapters(model, AdapterSpec(kind="sequential"), _encoder())
    h = hash_parameters(model)
    opt = Adam(part.tensors(model), AdamConfig(lr=0.0))
    finetune_step(model, part, _cond_batch(), opt, seeded_rng(0))
    assert hash_parameters(model) == h


def test_finetune_step_guards():
    model = _backbone(5)
    with pytest.raises(ValueError):
        finetune_step(model, ParameterPartition.from_model(model), _cond_batch(), Adam([]), seeded_rng(0))
    _, part = inject_adapters(model, AdapterSpec(), _encoder())
    opt = Adam(model.parameters(), AdamConfig())
    with pytest.raises(ValueError, match="outside"):
        finetune_step(model, part, _cond_batch(), opt, seeded_rng(0))


def test_spec_validation_and_presets():
    with pytest.raises(ValueError):
        AdapterSpec(kind="prefix")
    with pytest.raises(ValueError):
        AdapterSpec(lora_placement="ff_only")
    full = named_adapter_specs(full_scale=True)
    assert len(full) == 5
    spec = full["lora_self_attention"]
    assert (spec.lora_rank, spec.lora_alpha, spec.lora_dropout) == (64, 64.0, 0.05)
    assert (spec.cross_attn_heads, spec.cross_attn_head_dim, spec.adapter_hidden) == (12, 64, 64)
