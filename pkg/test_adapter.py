"""Tests for the modality adapter."""
import math

import numpy as np
import pytest

import entity_vqa.adapter as adapter_module
from entity_vqa.adapter import (
    AdapterConfig,
    AdapterParams,
    EncodedImage,
    FrozenLmStub,
    attention_weights,
    embed_sequence,
    grad_check,
    init_params,
    load_params,
    load_toy_dataset,
    make_gradcheck_instance,
    make_toy_problem,
    project,
    save_params,
    save_toy_dataset,
    teacher_forced_nll,
    train_adapter,
)
from entity_vqa.errors import (
    CorruptHeaderError,
    EmptyTextError,
    NonFiniteInputError,
    ShapeMismatchError,
    TruncatedPayloadError,
)


def test_project_shape_full_profile():
    config = AdapterConfig(n_latents=64, d_text=32, d_img=16, n_patches=49)
    params = init_params(config, seed=0)
    img = EncodedImage(np.random.default_rng(0).standard_normal((49, 16)))

    assert project(params, img).shape == (64, 32)


def test_zero_features_give_zero_tokens_and_uniform_attention():
    config = AdapterConfig(n_latents=4, d_text=8, d_img=8, n_patches=6, profile='test')
    params = init_params(config, seed=1)
    img = EncodedImage(np.zeros((6, 8)))

    assert np.array_equal(project(params, img), np.zeros((4, 8)))
    assert np.allclose(attention_weights(params, img)[0], 1.0 / 6)


@pytest.mark.parametrize('seed', range(5))
@pytest.mark.parametrize('magnitude', [1.0, 30.0, 1e4])
def test_attention_rows_sum_to_one(seed, magnitude):
    config = AdapterConfig(n_latents=5, d_text=4, d_img=6, n_patches=7, n_layers=2, profile='test')
    rng = np.random.default_rng(seed)
    params = AdapterParams(
        config,
        magnitude * rng.standard_normal((5, 6)),
        [rng.standard_normal((6, 6)) for _ in range(2)],
        [rng.standard_normal((6, 6)) for _ in range(2)],
        [rng.standard_normal((6, 6)) for _ in range(2)],
        rng.standard_normal((6, 4)),
    )
    img = EncodedImage(magnitude * rng.standard_normal((7, 6)))

    for weights in attention_weights(params, img):
        assert weights.shape == (5, 7)
        assert np.all(weights >= 0.0)
        assert np.all(np.abs(weights.sum(axis=1) - 1.0) < 1e-9)


def test_single_patch_ignores_query_and_key_maps():
    config = AdapterConfig(n_latents=4, d_text=5, d_img=3, n_patches=1, profile='test')
    rng = np.random.default_rng(2)
    params = init_params(config, seed=3)
    img = EncodedImage(rng.standard_normal((1, 3)))
    expected = np.tile(img.features @ params.w_v[0] @ params.w_out, (4, 1))

    other = AdapterParams(config, params.h_latents, [rng.standard_normal((3, 3))],
                          [rng.standard_normal((3, 3))], params.w_v, params.w_out)

    assert np.allclose(project(params, img), expected)
    assert np.allclose(project(other, img), expected)


def test_latent_permutation_permutes_tokens():
    params, _, img, _ = make_gradcheck_instance(seed=4)
    permutation = [2, 0, 3, 1]
    permuted = AdapterParams(params.config, params.h_latents[permutation],
                             params.w_q, params.w_k, params.w_v, params.w_out)

    assert np.allclose(project(permuted, img), project(params, img)[permutation])


def test_patch_order_does_not_matter():
    params, _, img, _ = make_gradcheck_instance(seed=5)
    shuffled = EncodedImage(img.features[::-1])

    assert np.allclose(project(params, shuffled), project(params, img))


def test_input_validation():
    params, lm, img, tokens = make_gradcheck_instance(seed=6)

    with pytest.raises(ShapeMismatchError):
        project(params, EncodedImage(np.zeros((5, 8))))
    with pytest.raises(NonFiniteInputError):
        EncodedImage(np.full((6, 8), np.nan))
    with pytest.raises(EmptyTextError):
        teacher_forced_nll(params, lm, img, [])
    with pytest.raises(ShapeMismatchError):
        teacher_forced_nll(params, lm, img, [99])
    with pytest.raises(ValueError):
        AdapterConfig(n_latents=4)


def test_embed_sequence_uses_frozen_table():
    params, lm, img, tokens = make_gradcheck_instance(seed=7)

    sequence = embed_sequence(params, lm, img, tokens)

    assert sequence.modality_tokens.shape == (4, 8)
    assert np.array_equal(sequence.text_embeddings, lm.embedding[tokens])
    assert sequence.text_token_ids == tokens


def test_uniform_stub_nll_is_length_times_log_vocab():
    config = AdapterConfig(n_latents=4, d_text=8, d_img=8, n_patches=6, vocab_size=16, profile='test')
    params = init_params(config, seed=0)
    lm = FrozenLmStub.uniform(16, 8)
    img = EncodedImage(np.random.default_rng(0).standard_normal((6, 8)))

    nll = teacher_forced_nll(params, lm, img, [3, 1, 4, 1, 5])

    assert nll == pytest.approx(5 * math.log(16), rel=1e-12)


def test_hand_evaluated_nll():
    # one patch, so every latent carries features @ w_v = [1]; z rows = [1, -1]
    config = AdapterConfig(n_latents=4, d_text=2, d_img=1, n_patches=1, vocab_size=2, profile='test')
    params = AdapterParams(config, np.zeros((4, 1)), [np.zeros((1, 1))], [np.zeros((1, 1))],
                           [np.array([[0.5]])], np.array([[1.0, -1.0]]))
    lm = FrozenLmStub(np.eye(2), np.eye(2))
    img = EncodedImage(np.array([[2.0]]))

    assert teacher_forced_nll(params, lm, img, [0]) == pytest.approx(math.log(1 + math.exp(-2)))
    assert teacher_forced_nll(params, lm, img, [1]) == pytest.approx(math.log(1 + math.exp(2)))


def test_nll_is_pure():
    params, lm, img, tokens = make_gradcheck_instance(seed=8)
    before = [a.copy() for _, a in params.named()]

    assert teacher_forced_nll(params, lm, img, tokens) == teacher_forced_nll(params, lm, img, tokens)
    assert all(np.array_equal(a, b) for a, (_, b) in zip(before, params.named()))


@pytest.mark.parametrize('seed', range(20))
def test_gradients_match_finite_differences(seed):
    params, lm, img, tokens = make_gradcheck_instance(seed=seed)

    assert grad_check(params, lm, img, tokens, h=1e-3) < 1e-4


def test_gradient_check_catches_one_wrong_element(monkeypatch):
    params, lm, img, tokens = make_gradcheck_instance(seed=4)
    exact = adapter_module.nll_and_grad

    def off_by_one_element(*args):
        loss, grads = exact(*args)
        grads.w_q[0][1, 2] += 1e-3 * (abs(grads.w_q[0][1, 2]) + 1e-3)
        return loss, grads

    monkeypatch.setattr(adapter_module, 'nll_and_grad', off_by_one_element)

    assert grad_check(params, lm, img, tokens, h=1e-3) > 1e-4


def test_gradient_check_at_zero_parameters():
    params, lm, img, tokens = make_gradcheck_instance(seed=9, scale=0.0)

    error = grad_check(params, lm, img, tokens)

    assert math.isfinite(error)
    assert error >= 0.0
    with pytest.raises(ValueError):
        grad_check(params, lm, img, tokens, h=0.0)


def test_zero_steps_is_identity():
    problem = make_toy_problem(seed=0)

    trained, trace = train_adapter(problem.params, problem.lm, problem.dataset, steps=0, lr=0.05)

    assert trace == []
    assert all(np.array_equal(a, b) for (_, a), (_, b) in zip(trained.named(), problem.params.named()))


def test_training_halves_loss_and_keeps_lm_frozen():
    problem = make_toy_problem(seed=0)
    embedding = problem.lm.embedding.copy()
    output = problem.lm.output.copy()
    initial = [a.copy() for _, a in problem.params.named()]

    trained, trace = train_adapter(problem.params, problem.lm, problem.dataset, steps=200, lr=0.05)

    assert len(trace) == 200
    assert trace[-1] <= 0.5 * trace[0]
    assert np.array_equal(problem.lm.embedding, embedding)
    assert np.array_equal(problem.lm.output, output)
    assert not problem.lm.embedding.flags.writeable
    assert all(np.array_equal(a, b) for a, (_, b) in zip(initial, problem.params.named()))
    assert not trained.allclose(problem.params)


def test_training_rejects_bad_arguments():
    problem = make_toy_problem(seed=0)

    with pytest.raises(ValueError):
        train_adapter(problem.params, problem.lm, [], steps=1, lr=0.05)
    with pytest.raises(ValueError):
        train_adapter(problem.params, problem.lm, problem.dataset, steps=1, lr=0.0)


def test_checkpoint_round_trip(tmp_path):
    params, _, _, _ = make_gradcheck_instance(seed=10)
    path = str(tmp_path / 'adapter.bin')

    save_params(params, path)
    loaded = load_params(path)

    assert loaded.config == params.config
    assert all(np.array_equal(a, b) for (_, a), (_, b) in zip(loaded.named(), params.named()))


def test_checkpoint_corruption(tmp_path):
    params, _, _, _ = make_gradcheck_instance(seed=11)
    path = tmp_path / 'adapter.bin'
    save_params(params, str(path))
    data = path.read_bytes()

    path.write_bytes(data[:-8])
    with pytest.raises(TruncatedPayloadError):
        load_params(str(path))

    path.write_bytes(b'XXXXXXXX' + data[8:])
    with pytest.raises(CorruptHeaderError):
        load_params(str(path))


def test_toy_dataset_round_trip(tmp_path):
    problem = make_toy_problem(seed=1)
    path = str(tmp_path / 'toy.jsonl')

    save_toy_dataset(problem.dataset, path)
    loaded = load_toy_dataset(path)

    assert [tokens for _, tokens in loaded] == [[0], [1], [2]]
    assert np.allclose(loaded[0][0].features, problem.dataset[0][0].features)
