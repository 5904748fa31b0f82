import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowadapt.duration import (
    DurationConfig,
    DurationExample,
    DurationModel,
    duration_loss,
    duration_train_step,
    expand_to_alignment,
    predict_durations,
    predict_durations_batch,
    round_durations,
)
from flowadapt.numerics import Adam, AdamConfig, Tensor, seeded_rng
from flowadapt.tasks import TaskSpec, generate_corpus, to_duration_example
from oracles import loop_l1


def _model(seed=0):
    return DurationModel(DurationConfig(), seed=seed).eval()


@pytest.mark.parametrize("seed", range(20))
def test_prediction_length_and_floor(seed):
    rng = np.random.default_rng(seed)
    model = _model(seed)
    if seed % 2:
        model.head.bias.data[:] = -50.0  # raw predictions far below 1
    symbols = rng.integers(0, 16, size=int(rng.integers(1, 12)))
    out = predict_durations(model, symbols)
    assert out.shape == symbols.shape and out.dtype.kind == "i"
    assert np.all(out >= 1)


def test_empty_symbols_rejected():
    with pytest.raises(ValueError, match="empty"):
        predict_durations(_model(), [])


def test_condition_without_adapters_rejected():
    with pytest.raises(ValueError):
        predict_durations(_model(), [1, 2], ["s1", "s2"])


def test_rounding_rule():
    np.testing.assert_array_equal(round_durations([0.2, -3.0, 1.5, 2.5, 3.49, 3.51]), [1, 1, 2, 2, 3, 4])


def test_loss_trivial_cases():
    assert float(duration_loss(Tensor([[3.0, 4.0]]), np.array([[3, 4]])).data) == 0.0
    assert float(duration_loss(Tensor([[2.0]]), np.array([[5]])).data) == 3.0


def test_loss_rejects_length_mismatch():
    with pytest.raises(ValueError):
        duration_loss(Tensor([[1.0, 2.0]]), np.array([[1, 2, 3]]))


@pytest.mark.parametrize("seed", range(5))
def test_loss_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    pred, gold = rng.normal(3, 2, size=7), rng.integers(1, 7, size=7)
    assert float(duration_loss(Tensor(pred[None]), gold[None]).data) == pytest.approx(loop_l1(pred, gold), abs=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_loss_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 9))
    pred, gold = rng.normal(3, 2, size=n), rng.integers(1, 7, size=n)
    perm = rng.permutation(n)
    a = float(duration_loss(Tensor(pred[None]), gold[None]).data)
    b = float(duration_loss(Tensor(pred[perm][None]), gold[perm][None]).data)
    assert a == pytest.approx(b, abs=1e-12)


def test_loss_ignores_padding():
    pred = Tensor([[2.0, 9.0]])
    assert float(duration_loss(pred, np.array([[3, 1]]), np.array([[True, False]])).data) == 1.0


def test_expand_examples():
    emb = np.array([[1.0], [2.0]])
    np.testing.assert_array_equal(expand_to_alignment(emb, [2, 3]), [[1], [1], [2], [2], [2]])
    np.testing.assert_array_equal(expand_to_alignment(np.array([[7.0, 8.0]]), [1]), [[7.0, 8.0]])


def test_expand_rejects_bad_durations():
    with pytest.raises(ValueError):
        expand_to_alignment(np.zeros((2, 1)), [1, 0])
    with pytest.raises(ValueError):
        expand_to_alignment(np.zeros((2, 1)), [1])


@given(st.lists(st.integers(1, 6), min_size=1, max_size=10))
@settings(max_examples=40, deadline=None)
def test_expand_total_length(durations):
    emb = np.arange(len(durations), dtype=float)[:, None]
    out = expand_to_alignment(emb, durations)
    assert len(out) == sum(durations)
    np.testing.assert_array_equal(out[:, 0], np.repeat(np.arange(len(durations)), durations))


def test_expand_tensor_input_is_differentiable():
    emb = Tensor(np.array([[1.0], [2.0]]), requires_grad=True)
    expand_to_alignment(emb, [2, 3]).sum().backward()
    np.testing.assert_array_equal(emb.grad, [[2.0], [3.0]])


def test_example_validation():
    with pytest.raises(ValueError):
        DurationExample([1, 2], [1, 0])
    with pytest.raises(ValueError):
        DurationExample([1, 2], [1])


def test_batch_prediction_matches_single_and_restores_mode():
    model = DurationModel(DurationConfig(), seed=3).train()
    lists = [[1, 2, 3], [4, 5]]
    batch = predict_durations_batch(model, lists)
    assert model.training
    for s, out in zip(lists, batch):
        np.testing.assert_array_equal(out, predict_durations(model.eval(), s))


def test_large_preset():
    c = DurationConfig.large_preset()
    assert (c.n_layers, c.model_dim, c.ff_dim) == (8, 512, 2048)


@pytest.mark.slow
def test_trained_model_held_out_mae():
    corpus = generate_corpus(TaskSpec(task="emphasis"), 600, seed=5)
    train = [to_duration_example(u, with_condition=False) for u in corpus.train]
    model = DurationModel(DurationConfig(), seed=0).train()
    opt = Adam(model.parameters(), AdamConfig(lr=1e-3, warmup_steps=100))
    rng = seeded_rng(0)
    for _ in range(600):
        picks = rng.integers(0, len(train), size=16)
        duration_train_step(model, [train[i] for i in picks], opt)
    model.eval()
    errors = []
    for u in corpus.held_out:
        pred = predict_durations(model, u.symbols)
        errors.extend(np.abs(pred - u.aligned_durations))
    assert np.mean(errors) <= 1.0
