"""Modality adapter: resampler projection and teacher-forced alignment against a frozen LM.

Image features (n_patches x d_img) are compressed into m modality tokens by
cross-attention from learned latent queries, then projected to the text
embedding width. Training only moves the adapter; the language model stub is
read-only. All math runs in float64 with hand-written backpropagation.
"""
import json
import logging
import math
import os
import struct
from dataclasses import dataclass
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np

from entity_vqa.errors import (
    CorruptHeaderError,
    DivergenceDetectedError,
    EmptyTextError,
    IoFailureError,
    NonFiniteInputError,
    ShapeMismatchError,
    TruncatedPayloadError,
)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'SNTADP01'
CHECKPOINT_VERSION = 1
INIT_RANGE = 0.05
_CHECKPOINT_HEADER = struct.Struct('<8s7I')

PROFILES = {
    'full': (64, 256),
    'test': (4, None),
}


@dataclass(frozen=True)
class AdapterConfig:
    """Sizes of the adapter and of the model it feeds."""

    n_latents: int = 64
    d_text: int = 32
    d_img: int = 16
    n_patches: int = 49
    vocab_size: int = 128
    n_layers: int = 1
    profile: str = 'full'

    def __post_init__(self):
        for name in ('n_latents', 'd_text', 'd_img', 'n_patches', 'vocab_size', 'n_layers'):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        low, high = PROFILES[self.profile]
        if self.n_latents < low or (high is not None and self.n_latents > high):
            bound = f"[{low}, {high}]" if high is not None else f">= {low}"
            raise ValueError(f"n_latents={self.n_latents} outside {bound} for profile '{self.profile}'")

    @classmethod
    def from_config(cls, config) -> 'AdapterConfig':
        return cls(**{key: config.get(f'adapter.{key}') for key in (
            'n_latents', 'd_text', 'd_img', 'n_patches', 'vocab_size', 'n_layers', 'profile')})

    def to_dict(self) -> Dict[str, Any]:
        return {
            'n_latents': self.n_latents,
            'd_text': self.d_text,
            'd_img': self.d_img,
            'n_patches': self.n_patches,
            'vocab_size': self.vocab_size,
            'n_layers': self.n_layers,
            'profile': self.profile,
        }


def _check_finite(name: str, array: np.ndarray):
    if not np.all(np.isfinite(array)):
        raise NonFiniteInputError(f"{name} has non-finite entries")


def _check_shape(name: str, array: np.ndarray, shape: Tuple[int, ...]):
    if array.shape != shape:
        raise ShapeMismatchError(f"{name} has shape {array.shape}, expected {shape}")


@dataclass(eq=False)
class AdapterParams:
    """Trainable adapter weights: latent queries, per-layer attention maps, output projection."""

    config: AdapterConfig
    h_latents: np.ndarray
    w_q: List[np.ndarray]
    w_k: List[np.ndarray]
    w_v: List[np.ndarray]
    w_out: np.ndarray

    def __post_init__(self):
        cfg = self.config
        self.h_latents = np.array(self.h_latents, dtype=np.float64)
        self.w_out = np.array(self.w_out, dtype=np.float64)
        self.w_q = [np.array(w, dtype=np.float64) for w in self.w_q]
        self.w_k = [np.array(w, dtype=np.float64) for w in self.w_k]
        self.w_v = [np.array(w, dtype=np.float64) for w in self.w_v]
        if not len(self.w_q) == len(self.w_k) == len(self.w_v) == cfg.n_layers:
            raise ShapeMismatchError(f"expected {cfg.n_layers} attention layers")
        for name, array in self.named():
            _check_shape(name, array, self._expected_shape(name))
            _check_finite(name, array)

    def _expected_shape(self, name: str) -> Tuple[int, int]:
        cfg = self.config
        if name == 'h_latents':
            return (cfg.n_latents, cfg.d_img)
        if name == 'w_out':
            return (cfg.d_img, cfg.d_text)
        return (cfg.d_img, cfg.d_img)

    def named(self) -> List[Tuple[str, np.ndarray]]:
        """(name, array) pairs in checkpoint order; arrays are the live storage."""
        pairs = [('h_latents', self.h_latents)]
        for layer in range(self.config.n_layers):
            pairs.append((f'w_q.{layer}', self.w_q[layer]))
            pairs.append((f'w_k.{layer}', self.w_k[layer]))
            pairs.append((f'w_v.{layer}', self.w_v[layer]))
        pairs.append(('w_out', self.w_out))
        return pairs

    def copy(self) -> 'AdapterParams':
        return AdapterParams(self.config, self.h_latents, self.w_q, self.w_k, self.w_v, self.w_out)

    @classmethod
    def from_arrays(cls, config: AdapterConfig, arrays: Sequence[np.ndarray]) -> 'AdapterParams':
        """Rebuild from arrays listed in :meth:`named` order."""
        arrays = list(arrays)
        layers = arrays[1:-1]
        return cls(config, arrays[0], layers[0::3], layers[1::3], layers[2::3], arrays[-1])

    def allclose(self, other: 'AdapterParams', **kwargs) -> bool:
        return all(np.allclose(a, b, **kwargs) for (_, a), (_, b) in zip(self.named(), other.named()))


def init_params(config: AdapterConfig, seed: int = 0) -> AdapterParams:
    """Seeded uniform(-0.05, 0.05) initialization."""
    rng = np.random.default_rng(seed)

    def draw(*shape):
        return rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape)

    d = config.d_img
    h_latents = draw(config.n_latents, d)
    w_q, w_k, w_v = [], [], []
    for _ in range(config.n_layers):
        w_q.append(draw(d, d))
        w_k.append(draw(d, d))
        w_v.append(draw(d, d))
    return AdapterParams(config, h_latents, w_q, w_k, w_v, draw(d, config.d_text))


@dataclass(eq=False)
class EncodedImage:
    """Image encoder output: one feature row per patch."""

    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ShapeMismatchError(f"features must be 2-d, got shape {self.features.shape}")
        _check_finite('features', self.features)


@dataclass(eq=False)
class FrozenLmStub:
    """Toy language model: token embedding table and output projection.

    Both arrays are copied and marked read-only on construction.
    """

    embedding: np.ndarray
    output: np.ndarray

    def __post_init__(self):
        self.embedding = np.array(self.embedding, dtype=np.float64)
        self.output = np.array(self.output, dtype=np.float64)
        if self.embedding.ndim != 2 or self.output.shape != self.embedding.shape[::-1]:
            raise ShapeMismatchError(
                f"embedding {self.embedding.shape} and output {self.output.shape} disagree")
        _check_finite('embedding', self.embedding)
        _check_finite('output', self.output)
        self.embedding.setflags(write=False)
        self.output.setflags(write=False)

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def d_text(self) -> int:
        return self.embedding.shape[1]

    @classmethod
    def random(cls, config: AdapterConfig, seed: int = 0, output_scale: float = 0.1) -> 'FrozenLmStub':
        rng = np.random.default_rng(seed)
        embedding = rng.standard_normal((config.vocab_size, config.d_text))
        output = output_scale * rng.standard_normal((config.d_text, config.vocab_size))
        return cls(embedding, output)

    @classmethod
    def uniform(cls, vocab_size: int, d_text: int, seed: int = 0) -> 'FrozenLmStub':
        """Stub whose predictions are uniform over the vocabulary."""
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((vocab_size, d_text)), np.zeros((d_text, vocab_size)))


@dataclass(eq=False)
class TokenEmbeddingSequence:
    """What the language model sees: modality tokens and the text prefix."""

    modality_tokens: np.ndarray
    text_embeddings: np.ndarray
    text_token_ids: List[int]


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=1, keepdims=True)


def _validate_image(params: AdapterParams, img: EncodedImage):
    cfg = params.config
    _check_shape('features', img.features, (cfg.n_patches, cfg.d_img))


def _forward(params: AdapterParams, features: np.ndarray):
    scale = 1.0 / math.sqrt(params.config.d_img)
    h = params.h_latents
    cache = []
    for w_q, w_k, w_v in zip(params.w_q, params.w_k, params.w_v):
        q = h @ w_q
        k = features @ w_k
        v = features @ w_v
        a = _softmax_rows((q @ k.T) * scale)
        cache.append((h, q, k, v, a))
        h = a @ v
    return h @ params.w_out, h, cache


def attention_weights(params: AdapterParams, img: EncodedImage) -> List[np.ndarray]:
    """Attention matrices (m x n_patches) of every layer."""
    _validate_image(params, img)
    _, _, cache = _forward(params, img.features)
    return [entry[4] for entry in cache]


def project(params: AdapterParams, img: EncodedImage) -> np.ndarray:
    """Compress image features into m modality tokens of width d_text.

    Raises:
        ShapeMismatchError: if the features do not match the adapter config
        NonFiniteInputError: if the features contain NaN or inf
    """
    _validate_image(params, img)
    z, _, _ = _forward(params, img.features)
    return z


def _validate_text(lm: FrozenLmStub, params: AdapterParams, token_ids: Sequence[int]) -> List[int]:
    if lm.d_text != params.config.d_text:
        raise ShapeMismatchError(f"LM width {lm.d_text} differs from adapter d_text {params.config.d_text}")
    ids = [int(t) for t in token_ids]
    if not ids:
        raise EmptyTextError("token sequence is empty")
    for t in ids:
        if not 0 <= t < lm.vocab_size:
            raise ShapeMismatchError(f"token id {t} outside vocabulary of {lm.vocab_size}")
    return ids


def embed_sequence(params: AdapterParams, lm: FrozenLmStub, img: EncodedImage,
                   token_ids: Sequence[int]) -> TokenEmbeddingSequence:
    """Modality tokens plus frozen-table embeddings of the text."""
    ids = _validate_text(lm, params, token_ids)
    return TokenEmbeddingSequence(project(params, img), lm.embedding[ids], ids)


def _nll_terms(z: np.ndarray, lm: FrozenLmStub, token_ids: List[int], with_grad: bool):
    """NLL of the tokens given mean-pooled context; also dNLL/d(each row of z)."""
    m = z.shape[0]
    base = z.sum(axis=0)
    prefix = np.zeros(lm.d_text)
    total = 0.0
    dz_row = np.zeros(lm.d_text)
    for position, token in enumerate(token_ids):
        count = m + position
        context = (base + prefix) / count
        logits = context @ lm.output
        shifted = logits - logits.max()
        exps = np.exp(shifted)
        denom = float(exps.sum())
        total += math.log(denom) - float(shifted[token])
        if with_grad:
            dlogits = exps / denom
            dlogits[token] -= 1.0
            dz_row += (lm.output @ dlogits) / count
        prefix = prefix + lm.embedding[token]
    return total, dz_row


def teacher_forced_nll(params: AdapterParams, lm: FrozenLmStub, img: EncodedImage,
                       token_ids: Sequence[int]) -> float:
    """Negative log-likelihood of the text given the image, teacher forced.

    Position i conditions on the mean of the modality tokens and the frozen
    embeddings of tokens before i.

    Raises:
        ShapeMismatchError: if image, adapter and LM sizes disagree
        EmptyTextError: if ``token_ids`` is empty
    """
    ids = _validate_text(lm, params, token_ids)
    z = project(params, img)
    total, _ = _nll_terms(z, lm, ids, with_grad=False)
    return total


def nll_and_grad(params: AdapterParams, lm: FrozenLmStub, img: EncodedImage,
                 token_ids: Sequence[int]) -> Tuple[float, AdapterParams]:
    """NLL and its gradient with respect to every adapter parameter."""
    ids = _validate_text(lm, params, token_ids)
    _validate_image(params, img)
    features = img.features
    z, h_last, cache = _forward(params, features)
    total, dz_row = _nll_terms(z, lm, ids, with_grad=True)

    scale = 1.0 / math.sqrt(params.config.d_img)
    dz = np.tile(dz_row, (z.shape[0], 1))
    d_out = h_last.T @ dz
    dh = dz @ params.w_out.T

    n_layers = params.config.n_layers
    d_q: List[np.ndarray] = [None] * n_layers
    d_k: List[np.ndarray] = [None] * n_layers
    d_v: List[np.ndarray] = [None] * n_layers
    for layer in reversed(range(n_layers)):
        h, q, k, v, a = cache[layer]
        da = dh @ v.T
        dv = a.T @ dh
        ds = a * (da - (da * a).sum(axis=1, keepdims=True))
        dq = (ds @ k) * scale
        dk = (ds.T @ q) * scale
        d_q[layer] = h.T @ dq
        d_k[layer] = features.T @ dk
        d_v[layer] = features.T @ dv
        dh = dq @ params.w_q[layer].T

    grads = AdapterParams(params.config, dh, d_q, d_k, d_v, d_out)
    return total, grads


def grad_check(params: AdapterParams, lm: FrozenLmStub, img: EncodedImage,
               token_ids: Sequence[int], h: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    Args:
        params: Point at which to compare
        lm: Frozen LM stub
        img: Encoded image
        token_ids: Text tokens
        h: Finite-difference step

    Returns:
        max over every parameter element of |analytic - numeric| / max(1e-8, |numeric|)
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    _, analytic = nll_and_grad(params, lm, img, token_ids)
    shifted = params.copy()
    worst = 0.0
    for (name, array), (_, grad) in zip(shifted.named(), analytic.named()):
        numeric = np.zeros_like(array)
        for idx in np.ndindex(array.shape):
            original = array[idx]
            array[idx] = original + h
            f_plus = teacher_forced_nll(shifted, lm, img, token_ids)
            array[idx] = original - h
            f_minus = teacher_forced_nll(shifted, lm, img, token_ids)
            array[idx] = original
            numeric[idx] = (f_plus - f_minus) / (2.0 * h)
        errors = np.abs(grad - numeric) / np.maximum(1e-8, np.abs(numeric))
        error = float(errors.max()) if errors.size else 0.0
        logger.debug("grad check: %s error %.3g", name, error)
        worst = max(worst, error)
    return worst


def dataset_loss(params: AdapterParams, lm: FrozenLmStub,
                 dataset: Sequence[Tuple[EncodedImage, Sequence[int]]]) -> Tuple[float, AdapterParams]:
    """Mean NLL over the dataset and its gradient."""
    total = 0.0
    summed = None
    for img, token_ids in dataset:
        loss, grads = nll_and_grad(params, lm, img, token_ids)
        total += loss
        if summed is None:
            summed = [g.copy() for _, g in grads.named()]
        else:
            for acc, (_, g) in zip(summed, grads.named()):
                acc += g
    n = len(dataset)
    return total / n, AdapterParams.from_arrays(params.config, [g / n for g in summed])


def train_adapter(params: AdapterParams, lm: FrozenLmStub,
                  dataset: Sequence[Tuple[EncodedImage, Sequence[int]]],
                  steps: int, lr: float) -> Tuple[AdapterParams, List[float]]:
    """Plain gradient descent on the adapter; the LM stub is never written.

    Returns:
        (trained params, loss trace) where trace[i] is the mean loss before step i

    Raises:
        DivergenceDetectedError: if the loss or any parameter becomes non-finite
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    current = params.copy()
    trace: List[float] = []
    for step in range(steps):
        try:
            loss, grads = dataset_loss(current, lm, dataset)
        except NonFiniteInputError as e:
            raise DivergenceDetectedError(f"gradient became non-finite at step {step}") from e
        if not math.isfinite(loss):
            raise DivergenceDetectedError(f"loss became {loss} at step {step}")
        trace.append(loss)
        for (_, weight), (_, grad) in zip(current.named(), grads.named()):
            weight -= lr * grad
            if not np.all(np.isfinite(weight)):
                raise DivergenceDetectedError(f"parameters became non-finite at step {step}")
        if step % 50 == 0:
            logger.info("step %d loss %.6f", step, loss)
    return current, trace


def save_params(params: AdapterParams, path: str):
    """Write a SNTADP01 checkpoint (f64 row-major matrices)."""
    cfg = params.config
    header = _CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, cfg.n_latents, cfg.d_text,
                                     cfg.d_img, cfg.n_patches, cfg.vocab_size, cfg.n_layers)
    body = b''.join(np.ascontiguousarray(a, dtype='<f8').tobytes() for _, a in params.named())
    try:
        with open(path, 'wb') as f:
            f.write(header + body)
    except OSError as e:
        raise IoFailureError(f"cannot write checkpoint {path}: {e}") from e


def load_params(path: str) -> AdapterParams:
    """Read a checkpoint written by :func:`save_params`."""
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise IoFailureError(f"cannot read checkpoint {path}: {e}") from e
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CorruptHeaderError(f"{path} is not an adapter checkpoint")
    if len(data) < _CHECKPOINT_HEADER.size:
        raise TruncatedPayloadError(f"{path} ends inside the header")
    _, version, m, d_text, d_img, n_patches, vocab, n_layers = _CHECKPOINT_HEADER.unpack_from(data)
    if version != CHECKPOINT_VERSION:
        raise CorruptHeaderError(f"unsupported checkpoint version {version}")
    low, high = PROFILES['full']
    profile = 'full' if low <= m <= high else 'test'
    config = AdapterConfig(m, d_text, d_img, n_patches, vocab, n_layers, profile)

    shapes = [(m, d_img)] + [(d_img, d_img)] * (3 * n_layers) + [(d_img, d_text)]
    offset = _CHECKPOINT_HEADER.size
    arrays = []
    for shape in shapes:
        size = shape[0] * shape[1] * 8
        if offset + size > len(data):
            raise TruncatedPayloadError(f"{path} ends inside a weight matrix")
        arrays.append(np.frombuffer(data, dtype='<f8', count=shape[0] * shape[1], offset=offset)
                      .reshape(shape).astype(np.float64))
        offset += size
    return AdapterParams.from_arrays(config, arrays)


def load_toy_dataset(path: str) -> List[Tuple[EncodedImage, List[int]]]:
    """Read JSONL rows of ``{"features": [[...]], "token_ids": [...]}``."""
    dataset = []
    try:
        with open(path, 'r', encoding='utf-8') as f:
            for line in f:
                if line.strip():
                    row = json.loads(line)
                    dataset.append((EncodedImage(np.asarray(row['features'])),
                                    [int(t) for t in row['token_ids']]))
    except OSError as e:
        raise IoFailureError(f"cannot read toy dataset {path}: {e}") from e
    return dataset


def save_toy_dataset(dataset: Sequence[Tuple[EncodedImage, Sequence[int]]], path: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for img, token_ids in dataset:
            f.write(json.dumps({'features': img.features.tolist(),
                                'token_ids': [int(t) for t in token_ids]}) + '\n')


@dataclass
class ToyProblem:
    config: AdapterConfig
    params: AdapterParams
    lm: FrozenLmStub
    dataset: List[Tuple[EncodedImage, List[int]]]


def make_toy_problem(seed: int = 0, n_images: int = 3) -> ToyProblem:
    """Small alignment task: each image should make the LM predict its own token.

    Every image's patches are one base vector plus 0.01 noise; the LM embeds
    token t as 2*e_t and reads logits back through the transpose.
    """
    config = AdapterConfig(n_latents=4, d_text=8, d_img=8, n_patches=4, vocab_size=8, profile='test')
    rng = np.random.default_rng(seed)
    embedding = 2.0 * np.eye(config.vocab_size, config.d_text)
    lm = FrozenLmStub(embedding, embedding.T)
    dataset = []
    for target in range(n_images):
        base = rng.standard_normal(config.d_img)
        patches = base + 0.01 * rng.standard_normal((config.n_patches, config.d_img))
        dataset.append((EncodedImage(patches), [target % config.vocab_size]))
    return ToyProblem(config, init_params(config, seed), lm, dataset)


def make_gradcheck_instance(seed: int, n_latents: int = 4, d_img: int = 8, d_text: int = 8,
                            vocab_size: int = 16, n_patches: int = 6, length: int = 3,
                            scale: float = 0.25):
    """Random small point for gradient checking: (params, lm, img, token_ids)."""
    config = AdapterConfig(n_latents=n_latents, d_text=d_text, d_img=d_img, n_patches=n_patches,
                           vocab_size=vocab_size, profile='test')
    rng = np.random.default_rng(seed)
    arrays = [rng.uniform(-scale, scale, size=a.shape) for _, a in init_params(config).named()]
    params = AdapterParams.from_arrays(config, arrays)
    lm = FrozenLmStub.random(config, seed=seed + 1)
    img = EncodedImage(rng.standard_normal((n_patches, d_img)))
    token_ids = [int(t) for t in rng.integers(vocab_size, size=length)]
    return params, lm, img, token_ids
