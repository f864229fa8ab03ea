"""Information metrics over attention matrices and distillation-layer selection.

An N x N row-stochastic attention matrix ``A`` is read as a joint distribution
over (query, key) tokens with ``p(q_i) = 1/N`` and ``p(q_i, k_j) = A[i, j] / N``.
NMI is then ``I(Q; K) / sqrt(H(Q) H(K))``: 1 for the identity (every query sees
only itself) and 0 when all rows are identical.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from nmidistill.errors import NumericError
from nmidistill.io_formats import STOCHASTIC_ATOL, AttentionStack

DEFAULT_S = 0.09
LOCAL, HYBRID, GLOBAL = "local", "hybrid", "global"


@dataclass(frozen=True)
class PatternThresholds:
    hybrid_low: float = 0.06
    hybrid_high: float = 0.12

    def __post_init__(self):
        if not 0 < self.hybrid_low < self.hybrid_high < 1:
            raise ValueError(f"need 0 < hybrid_low < hybrid_high < 1, got {self.hybrid_low}, {self.hybrid_high}")


def _check_stochastic(A: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise NumericError(f"attention must be square in its last two axes, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NumericError("attention contains non-finite values")
    if np.any(A < -STOCHASTIC_ATOL):
        raise NumericError("attention contains negative entries")
    err = np.abs(A.sum(axis=-1) - 1.0).max()
    if err > STOCHASTIC_ATOL:
        raise NumericError(f"attention rows are not stochastic (max row-sum error {err:.3g})")
    return A


def _xlogx(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = p[pos] * np.log(p[pos])
    return out


def _gain(x: np.ndarray) -> np.ndarray:
    """(1 + x) log(1 + x) - x, which is >= 0; a series near 0 avoids cancellation."""
    out = np.empty_like(x)
    small = np.abs(x) < 1e-2
    xs = x[small]
    out[small] = sum((-1) ** k * xs ** k / (k * (k - 1)) for k in range(2, 9))
    xl = x[~small]
    with np.errstate(divide="ignore", invalid="ignore"):
        out[~small] = np.where(xl > -1, (1 + xl) * np.log1p(np.maximum(xl, -1)) - xl, 1.0)
    return out


def _entropy(p: np.ndarray) -> np.ndarray:
    """-sum p log p over the last axis of a distribution; log1p keeps entries near 1 accurate."""
    before = np.cumsum(p, axis=-1) - p
    after = np.flip(np.cumsum(np.flip(p, -1), axis=-1), -1) - p
    rest = before + after                                  # 1 - p_j without subtracting from 1
    logp = np.zeros_like(p)
    pos = p > 0
    logp[pos] = np.log(p[pos])
    near_one = p > 0.5
    logp[near_one] = np.log1p(-rest[near_one])
    return -np.where(pos, p * logp, 0.0).sum(axis=-1)


def _nmi_batch(A: np.ndarray) -> np.ndarray:
    """NMI over the last two axes of an already-validated array.

    With p(q) = 1/N, I(Q;K) = (1/N) sum_qk m_k g((A_qk - m_k) / m_k) where m_k is the
    column mean and g(x) = (1 + x) log(1 + x) - x. Every term is non-negative, so nearly
    independent rows keep full relative precision instead of cancelling H(K) - H(K|Q).
    """
    n = A.shape[-1]
    if n < 2:
        raise NumericError("NMI needs at least 2 tokens (H(Q) = 0 for N = 1)")
    # identical rows are exactly independent
    independent = np.all(A == A[..., :1, :], axis=(-2, -1))
    A = np.clip(A, 0.0, None)
    A = A / A.sum(axis=-1, keepdims=True)
    m = A.mean(axis=-2, keepdims=True)                     # p(k_j)
    live = np.broadcast_to(m > 0, A.shape)
    x = np.zeros_like(A)
    np.divide(A - m, m, out=x, where=live)
    mi = np.where(live, m * _gain(x), 0.0).sum(axis=(-2, -1)) / n
    h_k = _entropy(m[..., 0, :])
    denom = np.sqrt(np.log(n) * h_k)
    safe = ~independent & (denom > 0)
    nmi = np.zeros(np.shape(mi))
    np.divide(mi, denom, out=nmi, where=safe)
    # one-hot rows onto distinct keys (a permutation) are the only case with NMI = 1
    permutation = np.all(np.count_nonzero(A, axis=-1) == 1, axis=-1) & np.all(A.sum(axis=-2) == 1.0, axis=-1)
    nmi = np.where(permutation, 1.0, nmi)
    return np.clip(nmi, 0.0, 1.0)


def nmi_head(A) -> float:
    """NMI between query and key tokens of one attention head (no class token)."""
    A = _check_stochastic(A)
    if A.ndim != 2:
        raise NumericError(f"nmi_head expects one N x N matrix, got shape {A.shape}")
    return float(_nmi_batch(A))


def nmi_heads(A) -> np.ndarray:
    """Vectorised :func:`nmi_head` over any leading axes."""
    return _nmi_batch(_check_stochastic(A))


def nmi_layer(heads) -> float:
    """Mean NMI over the M heads of one layer, given as an [M, N, N] array or a list of matrices."""
    heads = np.asarray(heads, dtype=np.float64)
    if heads.ndim != 3 or heads.shape[0] < 1:
        raise NumericError(f"nmi_layer expects [M, N, N] with M >= 1, got {heads.shape}")
    return float(nmi_heads(heads).mean())


def _stack_array(stack) -> np.ndarray:
    return stack.data if isinstance(stack, AttentionStack) else np.asarray(stack, dtype=np.float64)


def dataset_nmi(stacks: Sequence) -> np.ndarray:
    """Per-layer NMI averaged over images; each image contributes its own layer NMI."""
    stacks = list(stacks)
    if not stacks:
        raise NumericError("dataset_nmi needs at least one attention stack")
    shape = _stack_array(stacks[0]).shape
    total = np.zeros(shape[0])
    for st in stacks:
        arr = _stack_array(st)
        if arr.shape != shape:
            raise NumericError(f"attention stacks disagree in shape: {arr.shape} vs {shape}")
        total += nmi_heads(arr).mean(axis=1)
    return total / len(stacks)


def attention_entropy(A) -> float:
    """Mean over queries of the row entropy, in nats."""
    A = _check_stochastic(A)
    return float(-_xlogx(np.clip(A, 0.0, None)).sum(axis=-1).mean(axis=-1).mean())


def token_positions(grid: tuple[int, int]) -> np.ndarray:
    h, w = grid
    rows, cols = np.divmod(np.arange(h * w), w)
    return np.stack([rows, cols], axis=1).astype(np.float64)


def attention_distance(A, grid: tuple[int, int]) -> float:
    """Attention-weighted mean query-key distance in token-grid units (row-major token layout)."""
    A = _check_stochastic(A)
    h, w = grid
    n = A.shape[-1]
    if n != h * w:
        raise NumericError(f"{n} tokens do not fit a {h}x{w} grid")
    pos = token_positions(grid)
    dist = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))
    return float((A * dist).sum(axis=-1).mean(axis=-1).mean())


def classify_pattern(nmi: float, thresholds: PatternThresholds = PatternThresholds()) -> str:
    if nmi < thresholds.hybrid_low:
        return GLOBAL
    if nmi <= thresholds.hybrid_high:
        return HYBRID
    return LOCAL


def delta_nmi(per_layer_nmi, s: float = DEFAULT_S) -> np.ndarray:
    return -np.abs(np.asarray(per_layer_nmi, dtype=np.float64) - s)


def candidate_layers(n_layers: int, restrict_to_latter_half: bool = True) -> list[int]:
    """1-based candidate indices; the latter half is L//2+1 .. L."""
    start = n_layers // 2 + 1 if restrict_to_latter_half else 1
    return list(range(start, n_layers + 1))


def select_target_layer(per_layer_nmi, s: float = DEFAULT_S, restrict_to_latter_half: bool = True) -> int:
    """1-based layer whose NMI is closest to ``s``; ties go to the deepest layer."""
    nmi = np.asarray(per_layer_nmi, dtype=np.float64)
    if nmi.ndim != 1 or nmi.size < 2:
        raise ValueError("select_target_layer needs at least 2 layer NMI values")
    if not 0 < s < 1:
        raise ValueError(f"selection constant s must lie in (0, 1), got {s}")
    cands = candidate_layers(nmi.size, restrict_to_latter_half)
    if not cands:
        raise ValueError("empty candidate layer set")
    score = delta_nmi(nmi, s)
    best = cands[0]
    for layer in cands[1:]:
        if score[layer - 1] >= score[best - 1]:
            best = layer
    return best


@dataclass
class NmiReport:
    per_layer_nmi: list[float]
    per_head_nmi: list[list[float]]
    per_layer_entropy: list[float]
    per_layer_distance: list[float | None]
    pattern: list[str]
    s: float
    delta_nmi: list[float]
    target_layer: int
    restrict_to_latter_half: bool = True
    n_images: int = 1
    thresholds: PatternThresholds = field(default_factory=PatternThresholds)

    def to_dict(self) -> dict:
        layers = []
        for i in range(len(self.per_layer_nmi)):
            layers.append({
                "layer": i + 1,
                "nmi": self.per_layer_nmi[i],
                "head_nmi": self.per_head_nmi[i],
                "entropy": self.per_layer_entropy[i],
                "distance": self.per_layer_distance[i],
                "pattern": self.pattern[i],
                "delta_nmi": self.delta_nmi[i],
            })
        return {
            "s": self.s,
            "restrict_to_latter_half": self.restrict_to_latter_half,
            "n_images": self.n_images,
            "thresholds": asdict(self.thresholds),
            "per_layer_nmi": self.per_layer_nmi,
            "target_layer": self.target_layer,
            "layers": layers,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def build_report(stacks: Sequence, s: float = DEFAULT_S, restrict_to_latter_half: bool = True,
                 grid: tuple[int, int] | None = None,
                 thresholds: PatternThresholds = PatternThresholds()) -> NmiReport:
    """Full per-layer diagnostics averaged over a set of per-image attention stacks."""
    stacks = [_stack_array(st) for st in stacks]
    if not stacks:
        raise NumericError("build_report needs at least one attention stack")
    L, M, N, _ = stacks[0].shape
    head_nmi = np.zeros((L, M))
    entropy = np.zeros(L)
    distance = np.zeros(L)
    for arr in stacks:
        if arr.shape != (L, M, N, N):
            raise NumericError(f"attention stacks disagree in shape: {arr.shape} vs {(L, M, N, N)}")
        head_nmi += nmi_heads(arr)
        for layer in range(L):
            entropy[layer] += attention_entropy(arr[layer])
            if grid is not None:
                distance[layer] += attention_distance(arr[layer], grid)
    k = len(stacks)
    head_nmi /= k
    layer_nmi = head_nmi.mean(axis=1)
    target = select_target_layer(layer_nmi, s, restrict_to_latter_half) if L >= 2 else 1
    return NmiReport(
        per_layer_nmi=layer_nmi.tolist(),
        per_head_nmi=head_nmi.tolist(),
        per_layer_entropy=(entropy / k).tolist(),
        per_layer_distance=(distance / k).tolist() if grid is not None else [None] * L,
        pattern=[classify_pattern(v, thresholds) for v in layer_nmi],
        s=s,
        delta_nmi=delta_nmi(layer_nmi, s).tolist(),
        target_layer=target,
        restrict_to_latter_half=restrict_to_latter_half,
        n_images=k,
        thresholds=thresholds,
    )
