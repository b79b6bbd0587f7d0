"""Gradient-information scores over the flat adapter view, and the masks
selected from them.

The score of coordinate j is the mean over N examples of the squared
per-example loss gradient: (1/N) sum_i g_ij^2, accumulated in float64 in a
canonical example order so the estimate does not depend on how the caller
batched the data. Scores are computed once, before any training step, from
true labels.

Selection strategies over a budget of k coordinates:
  fish     ones at the k largest scores
  reverse  ones at the k smallest scores
  random   seeded uniform k-subset, scores ignored
  dense    all ones
Ties break toward the smaller flat index (stable argsort).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, ConfigError, ContractError, NumericError
from . import tensor as T

STRATEGIES = ("fish", "random", "reverse", "dense")

_MAGIC = b"PFL1"
_KIND_SCORES = 1
_KIND_MASK = 2
_FORMAT_VERSION = 1


@dataclass
class FisherEstimate:
    """Non-negative per-coordinate scores over a flat view of length n."""

    scores: np.ndarray
    num_samples: int
    config_hash: str = ""

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float32)
        if self.scores.ndim != 1:
            raise ContractError(f"scores must be a vector, got shape "
                                f"{self.scores.shape}")
        if self.scores.size == 0:
            raise ContractError("scores must be non-empty")
        if not np.all(np.isfinite(self.scores)):
            raise NumericError("scores contain non-finite values")
        if self.scores.min() < 0:
            raise ContractError("scores must be non-negative")

    def __len__(self) -> int:
        return self.scores.size


@dataclass
class SparsityMask:
    """0/1 bits over the flat view; k is the exact popcount."""

    bits: np.ndarray
    strategy: str
    seed: int | None = None

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        if self.bits.ndim != 1 or self.bits.size == 0:
            raise ContractError(f"bits must be a non-empty vector, got shape "
                                f"{self.bits.shape}")
        if not np.all((self.bits == 0) | (self.bits == 1)):
            raise ContractError("mask bits must be 0 or 1")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy '{self.strategy}'; expected "
                              f"one of {STRATEGIES}")

    @property
    def k(self) -> int:
        return int(self.bits.sum())

    def __len__(self) -> int:
        return self.bits.size

    def active_indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)


def _flatten_samples(dataset) -> list[tuple[np.ndarray, int]]:
    examples = []
    for batch in dataset:
        for row, label in zip(batch.token_ids, batch.labels):
            examples.append((np.asarray(row), int(label)))
    return examples


def estimate_fisher(model, dataset, num_samples: int = 128,
                    config_hash: str = "") -> FisherEstimate:
    """Mean squared per-example gradient over the model's flat adapter view.

    ``model`` needs two methods: ``fisher_parameters()`` returning the flat
    view, and ``example_nll(token_row, label)`` returning a scalar loss.
    ``dataset`` is an iterable of batches carrying true labels; examples are
    re-sorted canonically (by token bytes, then label) before the first
    ``num_samples`` are consumed, so any batching of the same example set
    yields the identical estimate.
    """
    if num_samples < 1:
        raise ConfigError(f"num_samples must be >= 1, got {num_samples}")
    examples = _flatten_samples(dataset)
    if num_samples > len(examples):
        raise ConfigError(f"num_samples {num_samples} exceeds the "
                          f"{len(examples)} available examples")
    examples.sort(key=lambda e: (e[0].tobytes(), e[1]))
    examples = examples[:num_samples]

    theta = model.fisher_parameters()
    acc = np.zeros(theta.length, dtype=np.float64)
    for i, (row, label) in enumerate(examples):
        theta.zero_grads()
        loss = model.example_nll(row, label)
        T.backward(loss)
        g = theta.grad_vector().astype(np.float64)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient on sample {i}")
        acc += g * g
    theta.zero_grads()
    scores = (acc / num_samples).astype(np.float32)
    return FisherEstimate(scores, num_samples, config_hash)


def select(scores, k: int, strategy: str, seed: int | None = None) -> SparsityMask:
    """Build the 0/1 mask for a strategy at budget k.

    ``scores`` is a FisherEstimate or raw vector; for 'random' and 'dense' it
    only fixes the length. 'dense' ignores k and keeps everything.
    """
    vec = scores.scores if isinstance(scores, FisherEstimate) \
        else np.asarray(scores, dtype=np.float32)
    if vec.ndim != 1 or vec.size == 0:
        raise ContractError(f"scores must be a non-empty vector, got shape "
                            f"{vec.shape}")
    n = vec.size
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy '{strategy}'; expected one of "
                          f"{STRATEGIES}")
    if strategy == "dense":
        return SparsityMask(np.ones(n, dtype=np.uint8), "dense", seed)
    if not 1 <= k <= n:
        raise ConfigError(f"budget k={k} outside [1, {n}]")
    bits = np.zeros(n, dtype=np.uint8)
    if strategy == "fish":
        # stable sort on -scores: equal scores keep ascending index order
        order = np.argsort(-vec, kind="stable")
        bits[order[:k]] = 1
    elif strategy == "reverse":
        order = np.argsort(vec, kind="stable")
        bits[order[:k]] = 1
    else:  # random
        if seed is None:
            raise ConfigError("strategy 'random' needs a seed")
        rng = np.random.default_rng(seed)
        bits[rng.permutation(n)[:k]] = 1
    return SparsityMask(bits, strategy, seed)


def mask_gradients(grads: np.ndarray, mask: SparsityMask) -> np.ndarray:
    """Zero the gradient outside the mask; kept entries are bitwise intact."""
    g = np.asarray(grads)
    if g.shape != mask.bits.shape:
        raise ContractError(f"gradient shape {g.shape} does not match mask "
                            f"length {mask.bits.size}")
    out = g.copy()
    out[mask.bits == 0] = 0.0
    return out


def budget_to_k(theta_or_length, ratio2: float) -> int:
    """Round ratio2 * n to the nearest count (half up), clamped to [1, n]."""
    if hasattr(theta_or_length, "length"):
        n = theta_or_length.length
    elif hasattr(theta_or_length, "theta_tilde"):
        n = theta_or_length.theta_tilde().length
    else:
        n = int(theta_or_length)
    if n < 1:
        raise ContractError("flat view must be non-empty")
    if not 0.0 < ratio2 <= 1.0:
        raise ConfigError(f"ratio2 must be in (0, 1], got {ratio2}")
    k = int(np.floor(ratio2 * n + 0.5))
    return min(max(k, 1), n)


# ---------------------------------------------------------------------------
# persistence: one container for score and mask payloads, plus a text export

_HEADER = struct.Struct("<4sIBB12sQQq")  # magic, version, kind, pad, strategy,
                                         # length, k, seed


def _pack_header(kind: int, strategy: str, length: int, k: int,
                 seed: int | None) -> bytes:
    return _HEADER.pack(_MAGIC, _FORMAT_VERSION, kind, 0,
                        strategy.encode("ascii").ljust(12, b"\0"),
                        length, k, -1 if seed is None else seed)


def _read_header(blob: bytes, path: str):
    if len(blob) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, kind, _, strategy, length, k, seed = \
        _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != _FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} unsupported "
                              f"(expected {_FORMAT_VERSION})")
    return kind, strategy.rstrip(b"\0").decode("ascii"), length, k, seed


def save_scores(path, estimate: FisherEstimate) -> None:
    from .checkpoint import atomic_write_bytes
    payload = _pack_header(_KIND_SCORES, "", len(estimate),
                           estimate.num_samples, None)
    atomic_write_bytes(path, payload + estimate.scores.astype("<f4").tobytes())


def load_scores(path) -> FisherEstimate:
    with open(path, "rb") as fh:
        blob = fh.read()
    kind, _, length, num_samples, _ = _read_header(blob, str(path))
    if kind != _KIND_SCORES:
        raise CheckpointError(f"{path}: not a score file")
    payload = blob[_HEADER.size:]
    if len(payload) != 4 * length:
        raise CheckpointError(f"{path}: score payload holds "
                              f"{len(payload) // 4} values, header says {length}")
    scores = np.frombuffer(payload, dtype="<f4").copy()
    return FisherEstimate(scores, int(num_samples))


def save_mask(path, mask: SparsityMask) -> None:
    from .checkpoint import atomic_write_bytes
    payload = _pack_header(_KIND_MASK, mask.strategy, len(mask), mask.k,
                           mask.seed)
    atomic_write_bytes(path, payload + mask.bits.tobytes())


def load_mask(path) -> SparsityMask:
    with open(path, "rb") as fh:
        blob = fh.read()
    kind, strategy, length, k, seed = _read_header(blob, str(path))
    if kind != _KIND_MASK:
        raise CheckpointError(f"{path}: not a mask file")
    payload = blob[_HEADER.size:]
    if len(payload) != length:
        raise CheckpointError(f"{path}: mask payload holds {len(payload)} "
                              f"bits, header says {length}")
    mask = SparsityMask(np.frombuffer(payload, dtype=np.uint8).copy(),
                        strategy, None if seed == -1 else int(seed))
    if mask.k != k:
        raise CheckpointError(f"{path}: popcount {mask.k} does not match "
                              f"header k={k}")
    return mask


def export_text(path, mask: SparsityMask,
                estimate: FisherEstimate | None = None) -> None:
    """Line-per-coordinate dump: 'index score bit' (score 0 when absent)."""
    from .checkpoint import atomic_write_bytes
    if estimate is not None and len(estimate) != len(mask):
        raise ContractError(f"scores length {len(estimate)} does not match "
                            f"mask length {len(mask)}")
    lines = []
    for i, bit in enumerate(mask.bits):
        score = float(estimate.scores[i]) if estimate is not None else 0.0
        lines.append(f"{i} {score:.9g} {int(bit)}")
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("ascii"))
