"""N:M mask machinery.

A block of M consecutive fan-in weights gets one categorical distribution
``softmax(theta)`` over the M basis vectors. N one-hot draws from it are
OR-composed (probabilistic sum) into a mask with between 1 and N ones.
Sampling uses the Gumbel-max trick in the forward pass and the Gumbel-softmax
relaxation for gradients (straight-through).

Blocks tile each weight row along its fan-in, row-major. When the fan-in is
not a multiple of M, the last block of every row is padded with positions
that are never selectable.
"""
from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass
from functools import reduce
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import DimensionError, DomainError, RefusalError, StateError

__all__ = [
    "MaskConfig",
    "BlockLayout",
    "BlockLogits",
    "SampledBasis",
    "StraightThrough",
    "AnnealSchedule",
    "prob_sum",
    "compose_mask",
    "enumerate_mask_space",
    "verify_representation",
    "gumbel_draw",
    "straight_through",
    "anneal_tau",
    "apply_mask",
    "finalize_hard_masks",
    "argmax_basis",
    "expected_loss_enumeration",
    "export_masks",
    "import_masks",
    "MASK_MAGIC",
]

ENUMERATION_LIMIT = 24


@dataclass(frozen=True)
class MaskConfig:
    n_keep: int = 2
    block_size: int = 4

    def __post_init__(self):
        if not 1 <= self.n_keep <= self.block_size:
            raise DomainError(f"need 1 <= N <= M, got N={self.n_keep}, M={self.block_size}")

    def layout(self, shape) -> "BlockLayout":
        rows, cols = shape
        return BlockLayout(rows=rows, cols=cols, block_size=self.block_size)


@dataclass(frozen=True)
class BlockLayout:
    """How a (rows, cols) weight matrix is cut into blocks of ``block_size``."""

    rows: int
    cols: int
    block_size: int

    @property
    def blocks_per_row(self) -> int:
        return -(-self.cols // self.block_size)

    @property
    def num_blocks(self) -> int:
        return self.rows * self.blocks_per_row

    @property
    def padded_cols(self) -> int:
        return self.blocks_per_row * self.block_size

    @property
    def pad(self) -> int:
        return self.padded_cols - self.cols

    def valid(self) -> np.ndarray:
        """Boolean (num_blocks, M): True where the position is a real weight."""
        cols = np.arange(self.padded_cols) < self.cols
        row = cols.reshape(self.blocks_per_row, self.block_size)
        return np.tile(row, (self.rows, 1))

    def to_blocks(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w)
        if w.shape != (self.rows, self.cols):
            raise DimensionError(f"tensor {w.shape} does not match layout {(self.rows, self.cols)}")
        if self.pad:
            w = np.concatenate([w, np.zeros((self.rows, self.pad), dtype=w.dtype)], axis=1)
        return w.reshape(self.num_blocks, self.block_size)

    def from_blocks(self, blocks: np.ndarray) -> np.ndarray:
        blocks = np.asarray(blocks)
        if blocks.shape != (self.num_blocks, self.block_size):
            raise DimensionError(
                f"blocks {blocks.shape} do not match layout {(self.num_blocks, self.block_size)}"
            )
        return blocks.reshape(self.rows, self.padded_cols)[:, : self.cols]


# ---------------------------------------------------------------------------
# Probabilistic-sum algebra and the mask space
# ---------------------------------------------------------------------------


def _check_unit(x: np.ndarray, name: str):
    if np.any(~np.isfinite(x)) or np.any(x < 0.0) or np.any(x > 1.0):
        raise DomainError(f"{name} entries must lie in [0, 1]")


def prob_sum(a, b) -> np.ndarray:
    """Coordinate-wise probabilistic sum ``1 - (1 - a)(1 - b)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_unit(a, "a")
    _check_unit(b, "b")
    return 1.0 - (1.0 - a) * (1.0 - b)


def compose_mask(basis) -> np.ndarray:
    """Fold ``prob_sum`` over the draw axis.

    ``basis`` is either a sequence of N vectors or an array whose second to
    last axis indexes the draws, e.g. (num_blocks, N, M).
    """
    if isinstance(basis, (list, tuple)):
        return reduce(prob_sum, basis)
    basis = np.asarray(basis, dtype=float)
    _check_unit(basis, "basis")
    return 1.0 - np.prod(1.0 - basis, axis=-2)


def enumerate_mask_space(cfg: MaskConfig) -> set[tuple[int, ...]]:
    """All binary M-vectors with between 1 and N ones."""
    M, N = cfg.block_size, cfg.n_keep
    if M > ENUMERATION_LIMIT:
        raise RefusalError(f"M={M} exceeds the enumeration limit of {ENUMERATION_LIMIT}")
    out = set()
    for k in range(1, N + 1):
        for idx in itertools.combinations(range(M), k):
            v = [0] * M
            for i in idx:
                v[i] = 1
            out.add(tuple(v))
    return out


def verify_representation(cfg: MaskConfig) -> bool:
    """Check that OR-compositions of N basis vectors are exactly the mask space."""
    M, N = cfg.block_size, cfg.n_keep
    if M**N > 2_000_000:
        raise RefusalError(f"{M}^{N} basis tuples is too many to enumerate")
    eye = np.eye(M)
    composed = set()
    for tup in itertools.product(range(M), repeat=N):
        m = compose_mask([eye[i] for i in tup])
        bits = tuple(int(round(x)) for x in m)
        if len(set(tup)) == N and sum(bits) != N:
            return False
        composed.add(bits)
    return composed == enumerate_mask_space(cfg)


# ---------------------------------------------------------------------------
# Logits, sampling and the straight-through estimator
# ---------------------------------------------------------------------------


@dataclass
class BlockLogits:
    """Per-block logits ``theta`` (num_blocks, M) with a validity mask."""

    theta: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.valid is None:
            self.valid = np.ones(self.theta.shape, dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.theta.shape:
                raise DimensionError("valid mask must match theta")
            if not np.all(self.valid.any(axis=-1)):
                raise DomainError("every block needs at least one valid position")

    @property
    def block_size(self) -> int:
        return self.theta.shape[-1]

    def log_probs(self) -> np.ndarray:
        # computed from the logits directly, never log(softmax(...))
        th = np.where(self.valid, self.theta, -np.inf)
        return th - logsumexp(th, axis=-1, keepdims=True)

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs())

    @classmethod
    def initial(cls, layout: BlockLayout, rng: np.random.Generator, jitter: float = 0.01) -> "BlockLogits":
        theta = rng.uniform(-jitter, jitter, size=(layout.num_blocks, layout.block_size))
        return cls(theta=theta, valid=layout.valid())


@dataclass
class SampledBasis:
    hard: np.ndarray  # (num_blocks, N, M) one-hot
    soft: np.ndarray  # (num_blocks, N, M) rows on the simplex
    noise: np.ndarray  # Gumbel noise used for both
    tau: float

    @property
    def n_draws(self) -> int:
        return self.hard.shape[-2]


def gumbel_draw(
    logits: BlockLogits,
    rng: np.random.Generator,
    tau: float,
    n_draws: int,
    replacement: bool = True,
) -> SampledBasis:
    """Draw ``n_draws`` basis vectors per block.

    Every draw uses fresh Gumbel noise. The hard sample is the Gumbel-max
    one-hot and the soft sample is the tempered softmax of the same perturbed
    log-probabilities. With ``replacement=False`` the positions already picked
    in a block are excluded from later draws (sequential Gumbel top-k).
    """
    if not tau > 0.0:
        raise DomainError(f"tau must be > 0, got {tau}")
    logp = logits.log_probs()
    shape = logp.shape[:-1] + (n_draws, logp.shape[-1])
    g = rng.gumbel(size=shape)
    perturbed = logp[..., None, :] + g
    if replacement:
        idx = np.argmax(perturbed, axis=-1)
    else:
        if n_draws > int(logits.valid.sum(axis=-1).min()):
            raise DomainError("without replacement needs at least n_draws valid positions per block")
        idx = np.empty(shape[:-1], dtype=np.intp)
        for k in range(n_draws):
            if k:
                taken = np.zeros(perturbed[..., k, :].shape, dtype=bool)
                np.put_along_axis(taken, idx[..., :k], True, axis=-1)
                perturbed[..., k, :] = np.where(taken, -np.inf, perturbed[..., k, :])
            idx[..., k] = np.argmax(perturbed[..., k, :], axis=-1)
    hard = np.zeros(shape)
    np.put_along_axis(hard, idx[..., None], 1.0, axis=-1)
    soft = softmax(perturbed / tau, axis=-1)
    return SampledBasis(hard=hard, soft=soft, noise=g, tau=float(tau))


@dataclass
class StraightThrough:
    """``y_hat = y_soft - stopgrad(y_soft - y_hard)``.

    ``value`` is the forward value (the hard one-hots). ``vjp`` pulls a
    gradient w.r.t. ``y_hat`` back to the logits through the soft path.
    """

    value: np.ndarray
    soft: np.ndarray
    tau: float

    def vjp(self, grad: np.ndarray) -> np.ndarray:
        # d soft_s / d theta_r = soft_s (delta_sr - soft_r) / tau; log-softmax
        # normalisation cancels inside the softmax
        grad = np.asarray(grad, dtype=float)
        inner = np.sum(grad * self.soft, axis=-1, keepdims=True)
        per_draw = self.soft * (grad - inner) / self.tau
        return per_draw.sum(axis=-2)

    def mask(self) -> np.ndarray:
        return compose_mask(self.value)

    def mask_vjp(self, grad_mask: np.ndarray) -> np.ndarray:
        """Gradient of the composed mask w.r.t. the logits.

        d mask / d y_hat_k = prod_{j != k} (1 - y_hat_j), evaluated at the
        forward (hard) values.
        """
        one_minus = 1.0 - self.value
        N = one_minus.shape[-2]
        others = np.empty_like(one_minus)
        for k in range(N):
            others[..., k, :] = np.prod(np.delete(one_minus, k, axis=-2), axis=-2)
        return self.vjp(np.asarray(grad_mask)[..., None, :] * others)


def straight_through(sample: SampledBasis) -> StraightThrough:
    return StraightThrough(value=sample.hard.copy(), soft=sample.soft, tau=sample.tau)


def argmax_basis(logits: BlockLogits, n_draws: int, replacement: bool = True) -> np.ndarray:
    """Noise-free picks: top-1 repeated, or top-N without replacement."""
    logp = logits.log_probs()
    M = logp.shape[-1]
    hard = np.zeros(logp.shape[:-1] + (n_draws, M))
    if replacement:
        idx = np.argmax(logp, axis=-1)
        hard[..., :, :] = np.eye(M)[idx][..., None, :]
    else:
        order = np.argsort(-logp, axis=-1, kind="stable")[..., :n_draws]
        np.put_along_axis(hard, order[..., None], 1.0, axis=-1)
    return hard


# ---------------------------------------------------------------------------
# Temperature schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnnealSchedule:
    tau_max: float = 1.0
    tau_min: float = 0.1
    total_steps: int = 1

    def __post_init__(self):
        if not (self.tau_max > 0 and self.tau_min > 0):
            raise DomainError("temperatures must be > 0")
        if self.tau_min > self.tau_max:
            raise DomainError("tau_min must not exceed tau_max")
        if self.total_steps < 0:
            raise DomainError("total_steps must be >= 0")


def anneal_tau(sched: AnnealSchedule, t: int) -> float:
    """Geometric decay from ``tau_max`` at t=0 to ``tau_min`` at t=total_steps."""
    if not 0 <= t <= sched.total_steps:
        raise DomainError(f"step {t} outside [0, {sched.total_steps}]")
    if t == sched.total_steps:
        return float(sched.tau_min)
    frac = t / sched.total_steps
    return float(max(sched.tau_min, sched.tau_max * (sched.tau_min / sched.tau_max) ** frac))


# ---------------------------------------------------------------------------
# Applying and freezing masks
# ---------------------------------------------------------------------------


def apply_mask(weights: np.ndarray, mask_bits: np.ndarray, layout: BlockLayout) -> np.ndarray:
    """Hadamard product of ``weights`` with a per-block mask (num_blocks, M)."""
    mask_bits = np.asarray(mask_bits)
    if mask_bits.shape != (layout.num_blocks, layout.block_size):
        raise DimensionError(
            f"mask {mask_bits.shape} does not tile weights as {(layout.num_blocks, layout.block_size)}"
        )
    return np.asarray(weights) * layout.from_blocks(mask_bits)


def finalize_hard_masks(last_samples) -> np.ndarray:
    """OR-compose the last hard draws of each block into a frozen 0/1 mask."""
    if last_samples is None:
        raise StateError("no samples recorded for this tensor")
    hard = last_samples.hard if isinstance(last_samples, SampledBasis) else np.asarray(last_samples)
    return compose_mask(hard).round().astype(np.uint8)


def expected_loss_enumeration(logits, loss_fn, n_keep: int) -> float:
    """Exact expected loss over all basis tuples.

    ``logits`` is a list of 1 or 2 per-block logit vectors; ``loss_fn`` takes a
    list with one 0/1 mask per block.
    """
    thetas = [np.asarray(t, dtype=float) for t in logits]
    if not 1 <= len(thetas) <= 2 or any(t.size > 4 for t in thetas) or n_keep > 2:
        raise RefusalError("enumeration is limited to <= 2 blocks, M <= 4, N <= 2")
    probs = [np.exp(t - logsumexp(t)) for t in thetas]
    per_block = []
    for p in probs:
        M = p.size
        eye = np.eye(M)
        options = []
        for tup in itertools.product(range(M), repeat=n_keep):
            weight = float(np.prod([p[i] for i in tup]))
            options.append((weight, compose_mask([eye[i] for i in tup])))
        per_block.append(options)
    total = 0.0
    for combo in itertools.product(*per_block):
        weight = math.prod(w for w, _ in combo)
        total += weight * float(loss_fn([m for _, m in combo]))
    return total


# ---------------------------------------------------------------------------
# Mask export format
#
#   file header  : magic b"NMMASK\0\1", u32 version, u32 tensor count
#   per tensor   : u16 name length, name (utf-8), u32 N, u32 M, u32 rows,
#                  u32 cols, u64 num_blocks, then ceil(num_blocks*M/8) bytes
#                  of mask bits packed little-endian bit order, blocks row-major
# ---------------------------------------------------------------------------

MASK_MAGIC = b"NMMASK\x00\x01"
MASK_VERSION = 1
_FILE_HEADER = struct.Struct("<8sII")
_TENSOR_HEADER = struct.Struct("<IIIIQ")


def export_masks(path, tensors: dict) -> int:
    """Write masks; ``tensors`` maps name -> (cfg, layout, bits). Returns bytes written."""
    chunks = [_FILE_HEADER.pack(MASK_MAGIC, MASK_VERSION, len(tensors))]
    for name, (cfg, layout, bits) in tensors.items():
        bits = np.asarray(bits, dtype=np.uint8)
        if bits.shape != (layout.num_blocks, layout.block_size):
            raise DimensionError(f"mask for {name!r} does not match its layout")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(
            _TENSOR_HEADER.pack(cfg.n_keep, cfg.block_size, layout.rows, layout.cols, layout.num_blocks)
        )
        chunks.append(np.packbits(bits.reshape(-1), bitorder="little").tobytes())
    data = b"".join(chunks)
    Path(path).write_bytes(data)
    return len(data)


def import_masks(path) -> dict:
    """Inverse of ``export_masks``."""
    data = Path(path).read_bytes()
    magic, version, count = _FILE_HEADER.unpack_from(data, 0)
    if magic != MASK_MAGIC:
        raise ValueError("not a mask file")
    if version != MASK_VERSION:
        raise ValueError(f"unsupported mask file version {version}")
    pos = _FILE_HEADER.size
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        n, m, rows, cols, nb = _TENSOR_HEADER.unpack_from(data, pos)
        pos += _TENSOR_HEADER.size
        nbytes = -(-nb * m // 8)
        packed = np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=pos)
        pos += nbytes
        bits = np.unpackbits(packed, count=nb * m, bitorder="little").reshape(nb, m)
        layout = BlockLayout(rows=rows, cols=cols, block_size=m)
        if layout.num_blocks != nb:
            raise ValueError(f"corrupt record for {name!r}")
        out[name] = (MaskConfig(n, m), layout, bits)
    if pos != len(data):
        raise ValueError("trailing bytes in mask file")
    return out
