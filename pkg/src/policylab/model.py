"""Tiny autoregressive token model with exact, hand-derived gradients.

Architecture: shared input embedding, position-wise linear mixing over the
last ``k`` tokens, one tanh hidden layer, output projection to the
vocabulary. All arithmetic is float64 with fixed accumulation order, so
runs are bit-reproducible and finite-difference checks can be tight.

Conditioning with or without a policy prefix is expressed purely through
the prompt argument of :func:`seq_logprob` / :func:`sample`; the model has
no other state.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .vocab import Vocab

_CHUNK_POSITIONS = 2048  # backward/forward minibatch size in token positions
_FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class ModelConfig:
    k: int = 8  # context window
    d: int = 32  # embedding width
    h: int = 64  # hidden width
    init_seed: int = 0


class ToyModel:
    def __init__(self, vocab: Vocab, config: ModelConfig, params: np.ndarray | None = None):
        self.vocab = vocab
        self.config = config
        v, k, d, h = len(vocab), config.k, config.d, config.h
        self._shapes = {
            "embed": (v, d),
            "mix": (k, d, d),
            "w1": (h, d),
            "b1": (h,),
            "w2": (v, h),
            "b2": (v,),
        }
        self.param_count = sum(int(np.prod(s)) for s in self._shapes.values())
        if params is None:
            params = self._init_params()
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.param_count,):
            raise ValueError(f"expected {self.param_count} parameters, got {params.shape}")
        self.params = params
        self._views = self._make_views(self.params)

    def _init_params(self) -> np.ndarray:
        rng = np.random.default_rng(self.config.init_seed)
        v, k, d, h = len(self.vocab), self.config.k, self.config.d, self.config.h
        parts = [
            rng.normal(0.0, 1.0, size=(v, d)),
            rng.normal(0.0, 1.0 / np.sqrt(k * d), size=(k, d, d)),
            rng.normal(0.0, 1.0 / np.sqrt(d), size=(h, d)),
            np.zeros(h),
            rng.normal(0.0, 0.01 / np.sqrt(h), size=(v, h)),
            np.zeros(v),
        ]
        return np.concatenate([p.ravel() for p in parts])

    def _make_views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        views = {}
        offset = 0
        for name, shape in self._shapes.items():
            size = int(np.prod(shape))
            views[name] = flat[offset : offset + size].reshape(shape)
            offset += size
        return views

    def set_params(self, flat: np.ndarray) -> None:
        self.params = np.asarray(flat, dtype=np.float64).copy()
        if self.params.shape != (self.param_count,):
            raise ValueError("parameter vector has wrong length")
        self._views = self._make_views(self.params)

    def copy(self) -> "ToyModel":
        return ToyModel(self.vocab, self.config, self.params.copy())

    # -- forward -----------------------------------------------------------

    def _encode(self, tokens) -> np.ndarray:
        if isinstance(tokens, np.ndarray):
            return tokens.astype(np.int64)
        if tokens and isinstance(tokens[0], str):
            return np.array(self.vocab.encode(list(tokens)), dtype=np.int64)
        return np.array(tokens, dtype=np.int64)

    def _windows(self, full: np.ndarray, positions: np.ndarray) -> np.ndarray:
        k = self.config.k
        padded = np.concatenate(
            [np.full(k, self.vocab.pad_id, dtype=np.int64), full]
        )
        return padded[positions[:, None] + np.arange(k)[None, :]]

    def _forward(self, windows: np.ndarray, keep: bool = False):
        """Logits for a [n, k] batch of context windows."""
        v = self._views
        k, d = self.config.k, self.config.d
        emb = v["embed"][windows]  # [n, k, d]
        flat = emb.reshape(len(windows), k * d)
        z = flat @ v["mix"].reshape(k * d, d)
        u = np.tanh(z @ v["w1"].T + v["b1"])
        logits = u @ v["w2"].T + v["b2"]
        if keep:
            return logits, (flat, z, u)
        return logits

    @staticmethod
    def _log_softmax(logits: np.ndarray) -> np.ndarray:
        shifted = logits - logits.max(axis=1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def next_logits(self, context_tokens) -> np.ndarray:
        """Logits over the next token after ``context_tokens`` (with BOS)."""
        ids = self._encode(context_tokens)
        full = np.concatenate([[self.vocab.bos_id], ids]).astype(np.int64)
        windows = self._windows(full, np.array([len(full)], dtype=np.int64))
        return self._forward(windows)[0]


def seq_logprob(model: ToyModel, prompt, output) -> np.ndarray:
    """Teacher-forced log-probability of each output token.

    Conditioning is prompt + preceding output tokens, truncated to the
    model's context window. Unknown tokens raise.
    """
    prompt_ids = model._encode(prompt)
    output_ids = model._encode(output)
    if output_ids.size == 0:
        return np.zeros(0, dtype=np.float64)
    lps = _seq_logprob_batch(model, [(prompt_ids, output_ids)])
    return lps[0]


def _positions_for(model: ToyModel, prompt_ids: np.ndarray, output_ids: np.ndarray):
    full = np.concatenate(
        [[model.vocab.bos_id], prompt_ids, output_ids]
    ).astype(np.int64)
    start = 1 + len(prompt_ids)
    positions = np.arange(start, start + len(output_ids), dtype=np.int64)
    return full, positions


def _seq_logprob_batch(model: ToyModel, items) -> list[np.ndarray]:
    """Vectorized teacher-forced scoring for [(prompt_ids, output_ids)]."""
    windows_parts, targets_parts, lengths = [], [], []
    for prompt_ids, output_ids in items:
        full, positions = _positions_for(model, prompt_ids, output_ids)
        windows_parts.append(model._windows(full, positions))
        targets_parts.append(output_ids)
        lengths.append(len(output_ids))
    if not windows_parts:
        return []
    windows = np.concatenate(windows_parts, axis=0)
    targets = np.concatenate(targets_parts, axis=0)
    out = np.empty(len(targets), dtype=np.float64)
    for lo in range(0, len(targets), _CHUNK_POSITIONS):
        hi = min(lo + _CHUNK_POSITIONS, len(targets))
        logits = model._forward(windows[lo:hi])
        if not np.isfinite(logits).all():
            raise FloatingPointError(f"non-finite logits in positions {lo}:{hi}")
        lp = ToyModel._log_softmax(logits)
        out[lo:hi] = lp[np.arange(hi - lo), targets[lo:hi]]
    result = []
    offset = 0
    for n in lengths:
        result.append(out[offset : offset + n])
        offset += n
    return result


def sample(
    model: ToyModel,
    prompt,
    max_len: int,
    temperature: float,
    rng_seed: int,
) -> list[str]:
    """Ancestral sampling; stops at the boxed-close token or ``max_len``.

    Temperature 0 is greedy argmax with lowest-id tie-break. Deterministic
    given (model, prompt, temperature, rng_seed).
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    ids = sample_batch(model, [model._encode(prompt)], max_len, temperature, [rng_seed])[0]
    return model.vocab.decode(ids)


def sample_batch(
    model: ToyModel,
    prompt_ids_list: list[np.ndarray],
    max_len: int,
    temperature: float,
    rng_seeds: list[int],
) -> list[list[int]]:
    """Batched ancestral sampling with one independent RNG stream per item.

    Results are identical regardless of how items are batched together.
    """
    if len(prompt_ids_list) != len(rng_seeds):
        raise ValueError("one rng seed per prompt required")
    b = len(prompt_ids_list)
    if b == 0:
        return []
    k = model.config.k
    pad = model.vocab.pad_id
    stop = model.vocab.stop_id
    rngs = [np.random.default_rng(s) for s in rng_seeds]

    windows = np.full((b, k), pad, dtype=np.int64)
    for i, prompt_ids in enumerate(prompt_ids_list):
        full = np.concatenate([[model.vocab.bos_id], prompt_ids]).astype(np.int64)
        tail = full[-k:]
        windows[i, k - len(tail) :] = tail

    outputs: list[list[int]] = [[] for _ in range(b)]
    alive = np.ones(b, dtype=bool)
    for _ in range(max_len):
        if not alive.any():
            break
        idx = np.nonzero(alive)[0]
        logits = model._forward(windows[idx])
        if temperature == 0.0:
            chosen = np.argmax(logits, axis=1)
        else:
            lp = ToyModel._log_softmax(logits / temperature)
            probs = np.exp(lp)
            chosen = np.empty(len(idx), dtype=np.int64)
            for row, i in enumerate(idx):
                cdf = np.cumsum(probs[row])
                cdf[-1] = 1.0
                chosen[row] = int(np.searchsorted(cdf, rngs[i].random(), side="right"))
        for row, i in enumerate(idx):
            tok = int(chosen[row])
            outputs[i].append(tok)
            if tok == stop:
                alive[i] = False
        windows[idx, :-1] = windows[idx, 1:]
        windows[idx, -1] = chosen
    return outputs


@dataclass
class TokenLossTerm:
    """One sequence's contribution to a scalar loss.

    ``coeffs[t]`` is d(loss)/d(logprob of output token t); the total loss
    is the sum over terms of sum_t coeffs[t] * logprob[t] plus any
    constant. Every objective in this package reduces to this form.
    """

    prompt: np.ndarray
    output: np.ndarray
    coeffs: np.ndarray

    def __post_init__(self) -> None:
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if len(self.coeffs) != len(self.output):
            raise ValueError("one coefficient per output token required")


def backward(model: ToyModel, terms: list[TokenLossTerm]) -> np.ndarray:
    """Exact gradient of sum_i sum_t coeffs[t] * logprob[t] w.r.t. params.

    Accumulation order is fixed (term order, then fixed-size position
    chunks), so gradients are bit-reproducible.
    """
    return backward_terms(model, terms)[0]


def backward_terms(model: ToyModel, terms: list[TokenLossTerm]):
    """(gradient, value) where value = sum_i sum_t coeffs[t] * logprob[t]."""
    v = model._views
    grads = {name: np.zeros_like(arr) for name, arr in v.items()}
    value = 0.0

    windows_parts, targets_parts, coeff_parts = [], [], []
    for term_id, term in enumerate(terms):
        prompt_ids = model._encode(term.prompt)
        output_ids = model._encode(term.output)
        if output_ids.size == 0:
            continue
        full, positions = _positions_for(model, prompt_ids, output_ids)
        windows_parts.append(model._windows(full, positions))
        targets_parts.append(output_ids)
        coeff_parts.append((term_id, term.coeffs))
    if not windows_parts:
        return np.zeros(model.param_count), 0.0

    windows = np.concatenate(windows_parts, axis=0)
    targets = np.concatenate(targets_parts, axis=0)
    coeffs = np.concatenate([c for _, c in coeff_parts])
    term_ids = np.concatenate(
        [np.full(len(t), tid, dtype=np.int64) for (tid, _), t in zip(coeff_parts, targets_parts)]
    )

    k, d = model.config.k, model.config.d
    vocab_size = len(model.vocab)
    mix_flat = v["mix"].reshape(k * d, d)
    for lo in range(0, len(targets), _CHUNK_POSITIONS):
        hi = min(lo + _CHUNK_POSITIONS, len(targets))
        w = windows[lo:hi]
        y = targets[lo:hi]
        c = coeffs[lo:hi]
        logits, (flat, z, u) = model._forward(w, keep=True)
        if not np.isfinite(logits).all():
            bad = term_ids[lo:hi][~np.isfinite(logits).any(axis=1)]
            raise FloatingPointError(f"non-finite logits in loss term {int(bad[0])}")
        lp = ToyModel._log_softmax(logits)
        probs = np.exp(lp)
        value += float(np.dot(c, lp[np.arange(hi - lo), y]))
        # d(loss)/d(logits) for loss = sum c * logprob[target]
        dlogits = -probs * c[:, None]
        dlogits[np.arange(hi - lo), y] += c
        grads["w2"] += dlogits.T @ u
        grads["b2"] += dlogits.sum(axis=0)
        du = dlogits @ v["w2"]
        da = du * (1.0 - u * u)
        grads["w1"] += da.T @ z
        grads["b1"] += da.sum(axis=0)
        dz = da @ v["w1"]
        grads["mix"] += (flat.T @ dz).reshape(k, d, d)
        demb = (dz @ mix_flat.T).reshape(-1, k, d)  # [n, k, d]
        ids = w.ravel()
        demb_flat = demb.reshape(-1, d)
        for col in range(d):
            grads["embed"][:, col] += np.bincount(
                ids, weights=demb_flat[:, col], minlength=vocab_size
            )

    return np.concatenate([grads[name].ravel() for name in model._shapes]), value


def finite_diff_grad(
    model: ToyModel, loss_fn, coords: np.ndarray, step: float = 1e-5
) -> np.ndarray:
    """Central finite differences of ``loss_fn(model)`` at ``coords``."""
    out = np.empty(len(coords), dtype=np.float64)
    base = model.params.copy()
    work = model.copy()
    for i, c in enumerate(coords):
        perturbed = base.copy()
        perturbed[c] = base[c] + step
        work.set_params(perturbed)
        up = loss_fn(work)
        perturbed[c] = base[c] - step
        work.set_params(perturbed)
        down = loss_fn(work)
        out[i] = (up - down) / (2.0 * step)
    return out


# -- optimizers --------------------------------------------------------------


class Optimizer:
    """Plain gradient descent, or the adaptive moment variant via flag."""

    def __init__(self, lr: float, kind: str = "sgd", beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.lr = lr
        self.kind = kind
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None
        self.t = 0

    def step(self, model: ToyModel, grad: np.ndarray) -> None:
        if self.kind == "sgd":
            model.set_params(model.params - self.lr * grad)
            return
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        model.set_params(model.params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))


# -- checkpoint io -----------------------------------------------------------


def save_checkpoint(model: ToyModel, path: Path) -> None:
    """One JSON header line, then the flat little-endian float64 params."""
    header = {
        "format_version": _FORMAT_VERSION,
        "vocab_hash": model.vocab.hash(),
        "k": model.config.k,
        "d": model.config.d,
        "h": model.config.h,
        "param_count": model.param_count,
        "vocab": model.vocab.to_dict(),
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, separators=(",", ":")) + "\n").encode("utf-8"))
        fh.write(model.params.astype("<f8").tobytes())


def load_checkpoint(path: Path) -> ToyModel:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from None
    if header.get("format_version") != _FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {header.get('format_version')}")
    vocab = Vocab.from_dict(header["vocab"])
    if vocab.hash() != header["vocab_hash"]:
        raise CheckpointError("vocab hash mismatch: checkpoint is corrupt")
    expected = int(header["param_count"])
    params = np.frombuffer(blob, dtype="<f8")
    if len(params) != expected:
        raise CheckpointError(
            f"truncated checkpoint: {len(params)} of {expected} parameters"
        )
    config = ModelConfig(k=int(header["k"]), d=int(header["d"]), h=int(header["h"]))
    model = ToyModel(vocab, config, params.copy())
    return model
