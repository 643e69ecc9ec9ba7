"""Self-attention kernels: softmax, sigmoid, linear, doubly stochastic, cosine.

Every kernel takes query/key/value tensors shaped ``(..., n, d)`` and returns
``(..., n, d)``; leading axes (batch, heads) are carried through untouched.
All of them are compositions of :mod:`attnrobust.tensor` operations, so
gradients (including those through the unrolled Sinkhorn loop) come from the
same reverse-mode machinery.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, DomainError
from .tensor import Tensor

VARIANTS = ("softmax", "sigmoid", "linear", "doubly_stochastic", "cosine")

_ALIASES = {
    "doubly-stochastic": "doubly_stochastic",
    "doublystochastic": "doubly_stochastic",
    "sinkhorn": "doubly_stochastic",
}


def canonical_variant(name: str) -> str:
    key = name.strip().lower().replace(" ", "_")
    key = _ALIASES.get(key, key)
    if key not in VARIANTS:
        raise ConfigError(f"unknown attention variant {name!r}; expected one of {VARIANTS}")
    return key


@dataclass(frozen=True)
class AttentionConfig:
    """Variant selector plus every per-variant hyperparameter.

    ``sigmoid_bias`` left as ``None`` means "-log(n) for the training sequence
    length"; :meth:`resolve` fills it in once that length is known.
    """

    variant: str = "softmax"
    heads: int = 4
    head_dim: int = 16
    sigmoid_bias: float | None = None
    linear_eps: float = 1e-6
    sinkhorn_max_iter: int = 20
    sinkhorn_eps: float = 2.0
    cosine_m: float = 0.0
    layerscale_init: float = 1e-4
    sinkhorn_impl: str = "fused"

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        if self.heads < 1 or self.head_dim < 1:
            raise ConfigError(f"heads and head_dim must be positive, got {self.heads}, {self.head_dim}")
        if not self.sinkhorn_eps > 0:
            raise ConfigError(f"sinkhorn_eps must be > 0, got {self.sinkhorn_eps}")
        if not self.linear_eps > 0:
            raise ConfigError(f"linear_eps must be > 0, got {self.linear_eps}")
        if self.sinkhorn_max_iter < 1:
            raise ConfigError(f"sinkhorn_max_iter must be >= 1, got {self.sinkhorn_max_iter}")
        if self.sinkhorn_impl not in ("fused", "unrolled"):
            raise ConfigError(f"sinkhorn_impl must be 'fused' or 'unrolled', got {self.sinkhorn_impl!r}")

    @property
    def embed_dim(self) -> int:
        return self.heads * self.head_dim

    def resolve(self, seq_len: int) -> "AttentionConfig":
        """Fix sequence-length dependent defaults (the sigmoid bias)."""
        if seq_len < 1:
            raise ConfigError(f"attention needs at least one token, got sequence length {seq_len}")
        if self.sigmoid_bias is None:
            return dataclasses.replace(self, sigmoid_bias=-math.log(seq_len))
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class SinkhornState:
    """Final log-domain Sinkhorn quantities.

    ``cost``/``M`` are ``(..., n, n)``; potentials and marginals are
    ``(..., n)``/``(n,)``. Plain arrays; gradients flow through the
    transport matrix returned alongside.
    """

    M: np.ndarray
    u: np.ndarray
    v: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    iterations_run: int

    @property
    def transport(self) -> np.ndarray:
        return np.exp(self.M)

    def marginal_violation(self) -> float:
        P = self.transport
        rows = np.abs(P.sum(axis=-1) - self.mu).max()
        cols = np.abs(P.sum(axis=-2) - self.nu).max()
        return float(max(rows, cols))


class LayerScale:
    """Learnable per-channel output scale."""

    def __init__(self, dim: int, init: float = 1e-4, dtype=np.float64, gamma: Tensor | None = None):
        if gamma is None:
            gamma = Tensor(np.full(dim, init, dtype=dtype), requires_grad=True, name="gamma")
        if gamma.shape != (dim,):
            raise DimensionError(f"LayerScale gamma must have shape ({dim},), got {gamma.shape}")
        self.gamma = gamma

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.gamma.shape[0]:
            raise DimensionError(f"LayerScale of width {self.gamma.shape[0]} applied to {x.shape}")
        return x * self.gamma


def _check_qkv(Q: Tensor, K: Tensor, V: Tensor) -> None:
    if Q.ndim < 2 or Q.shape != K.shape or V.shape[:-1] != K.shape[:-1]:
        raise DimensionError(f"incompatible attention inputs Q{Q.shape} K{K.shape} V{V.shape}")
    if Q.shape[-1] < 1:
        raise DimensionError("attention needs head dimension >= 1")


def _scaled_scores(Q: Tensor, K: Tensor) -> Tensor:
    return T.matmul(Q, K.mT) * (1.0 / math.sqrt(Q.shape[-1]))


# ---------------------------------------------------------------------------
# softmax / sigmoid


def softmax_weights(Q: Tensor, K: Tensor) -> Tensor:
    return T.softmax_rows(_scaled_scores(Q, K))


def softmax_attention(Q: Tensor, K: Tensor, V: Tensor) -> Tensor:
    """softmax(QK^T / sqrt(d)) V."""
    _check_qkv(Q, K, V)
    return T.matmul(softmax_weights(Q, K), V)


def sigmoid_weights(Q: Tensor, K: Tensor, b: float | Tensor) -> Tensor:
    return T.sigmoid(_scaled_scores(Q, K) + b)


def sigmoid_attention(
    Q: Tensor, K: Tensor, V: Tensor, b: float | Tensor = 0.0, ls: LayerScale | None = None
) -> Tensor:
    """sigma(QK^T / sqrt(d) + b) V, rows left unnormalized, then LayerScale."""
    _check_qkv(Q, K, V)
    out = T.matmul(sigmoid_weights(Q, K, b), V)
    return ls(out) if ls is not None else out


# ---------------------------------------------------------------------------
# linear


def linear_attention(Q: Tensor, K: Tensor, V: Tensor, eps: float = 1e-6) -> Tensor:
    """Kernelized attention with feature map ELU+1 applied to queries and keys.

    Row i is ``psi(Q)_i (psi(K)^T V) / (psi(Q)_i psi(K)^T 1 + eps)``; the
    ``d x d`` summary ``psi(K)^T V`` is formed first so no ``n x n`` matrix is
    ever built.
    """
    _check_qkv(Q, K, V)
    if not eps > 0:
        raise DomainError(f"linear attention eps must be > 0, got {eps}")
    fq, fk = T.elu_plus_one(Q), T.elu_plus_one(K)
    kv = T.matmul(fk.mT, V)
    ksum = fk.sum(axis=-2, keepdims=True)
    denom = (fq * ksum).sum(axis=-1, keepdims=True) + eps
    return T.matmul(fq, kv) / denom


def linear_attention_naive(Q: Tensor, K: Tensor, V: Tensor, eps: float = 1e-6) -> Tensor:
    """Quadratic reference form of :func:`linear_attention`."""
    _check_qkv(Q, K, V)
    A = T.matmul(T.elu_plus_one(Q), T.elu_plus_one(K).mT)
    return T.matmul(A, V) / (A.sum(axis=-1, keepdims=True) + eps)


# ---------------------------------------------------------------------------
# Sinkhorn


def sinkhorn_naive(C: Tensor, max_iter: int) -> Tensor:
    """Alternating normalization of ``exp(C)``: rows on even steps, columns on odd.

    ``max_iter`` counts single normalizations, so ``2k`` steps equal ``k``
    row+column sweeps. Intended as a test oracle; ``exp`` overflows for large
    entries, so keep ``|C|`` small (the tests use ``|C| <= 5``).
    """
    if max_iter < 1:
        raise DomainError(f"max_iter must be >= 1, got {max_iter}")
    Km = T.as_tensor(C).exp()
    for step in range(max_iter):
        axis = -1 if step % 2 == 0 else -2
        Km = Km / Km.sum(axis=axis, keepdims=True)
    return Km


def sinkhorn_log(
    C: Tensor,
    mu: np.ndarray | None = None,
    nu: np.ndarray | None = None,
    eps: float = 1.0,
    max_iter: int = 20,
) -> tuple[Tensor, SinkhornState]:
    """Entropic optimal transport with potentials in the log domain.

    Iterates, for ``max_iter`` sweeps starting from ``u = v = 0``::

        M_ij = (-c_ij + u_i + v_j) / eps
        u_i += eps * (log mu_i - logsumexp_j M_ij)
        v_j += eps * (log nu_j - logsumexp_i M_ij)     (M recomputed with new u)

    and returns ``exp(M)`` (rows summing to ``mu`` after each u-step, columns
    to ``nu`` after each v-step). Every step is a recorded tensor op, so the
    result is differentiable through all iterations.

    Mapping to :func:`sinkhorn_naive`: with uniform marginals
    ``n * sinkhorn_log(c, eps=e, max_iter=k)[0] == sinkhorn_naive(-c / e, 2k)``.

    Raises:
        DomainError: on non-positive eps, marginals or iteration count, or
            marginals with unequal totals.
    """
    C = T.as_tensor(C)
    n = C.shape[-1]
    if C.ndim < 2 or C.shape[-2] != n:
        raise DimensionError(f"Sinkhorn cost must be square in its last two axes, got {C.shape}")
    if not eps > 0:
        raise DomainError(f"Sinkhorn eps must be > 0, got {eps}")
    if max_iter < 1:
        raise DomainError(f"max_iter must be >= 1, got {max_iter}")
    mu = np.full(n, 1.0 / n) if mu is None else np.asarray(mu, dtype=np.float64)
    nu = np.full(n, 1.0 / n) if nu is None else np.asarray(nu, dtype=np.float64)
    if mu.shape != (n,) or nu.shape != (n,):
        raise DimensionError(f"marginals must have shape ({n},), got {mu.shape}, {nu.shape}")
    if (mu <= 0).any() or (nu <= 0).any():
        raise DomainError("Sinkhorn marginals must be strictly positive")
    if abs(mu.sum() - nu.sum()) > 1e-9:
        raise DomainError(f"marginal totals differ: {mu.sum()} vs {nu.sum()}")

    dtype = C.dtype
    log_mu = np.log(mu).astype(dtype)
    log_nu = np.log(nu).astype(dtype)
    lead = C.shape[:-2]
    u = Tensor(np.zeros(lead + (n, 1), dtype=dtype))
    v = Tensor(np.zeros(lead + (1, n), dtype=dtype))
    neg_c = -C

    def cost(u: Tensor, v: Tensor) -> Tensor:
        return (neg_c + u + v) * (1.0 / eps)

    for _ in range(max_iter):
        u = u + eps * (log_mu[:, None] - T.logsumexp_rows(cost(u, v), axis=-1, keepdims=True))
        v = v + eps * (log_nu[None, :] - T.logsumexp_rows(cost(u, v), axis=-2, keepdims=True))
    M = cost(u, v)
    state = SinkhornState(
        M=M.data.copy(),
        u=u.data[..., 0].copy(),
        v=v.data[..., 0, :].copy(),
        mu=mu,
        nu=nu,
        iterations_run=max_iter,
    )
    return M.exp(), state


class SinkhornBalance(T.Function):
    """Fused Sinkhorn on ``exp(logits)`` with unit row and column targets.

    Runs the same iteration as :func:`sinkhorn_log` (with ``-c/eps`` as
    ``logits``) in multiplicative form: after absorbing the row maximum,
    ``K = exp(logits - rowmax)`` is formed once and each half-step is a
    batched matrix-vector product, ``a = 1 / (K b)`` then ``b = 1 / (K^T a)``.
    Work is done in float64. The backward pass replays the recursion in
    reverse, keeping only ``K`` and the scaling vectors, and folds the
    ``2 * max_iter`` rank-one contributions to dK into a single GEMM.
    """

    def forward(self, logits, max_iter=20):
        self.dtype = logits.dtype
        x = logits.astype(np.float64)
        Km = np.exp(x - x.max(axis=-1, keepdims=True))
        Kt = np.swapaxes(Km, -1, -2)
        b = np.ones(x.shape[:-1] + (1,))
        self.a_hist, self.b_hist = [], [b]
        for _ in range(max_iter):
            a = 1.0 / (Km @ b)
            b = 1.0 / (Kt @ a)
            self.a_hist.append(a)
            self.b_hist.append(b)
        self.K = Km
        return (a * Km * np.swapaxes(b, -1, -2)).astype(self.dtype)

    def backward(self, g):
        Km = self.K
        Kt = np.swapaxes(Km, -1, -2)
        g = g.astype(np.float64)
        a, b = self.a_hist[-1], self.b_hist[-1]
        GK = g * Km
        ga = GK @ b
        gb = np.swapaxes(GK, -1, -2) @ a
        xs, ys = [], []
        for k in range(len(self.a_hist) - 1, -1, -1):
            a_k, b_k, b_prev = self.a_hist[k], self.b_hist[k + 1], self.b_hist[k]
            gw = -gb * b_k * b_k
            ga = ga + Km @ gw
            gz = -ga * a_k * a_k
            gb = Kt @ gz
            xs += [a_k, gz]
            ys += [gw, b_prev]
            ga = 0.0
        X = np.concatenate(xs, axis=-1)
        Y = np.concatenate(ys, axis=-1)
        gK = g * (a * np.swapaxes(b, -1, -2)) + X @ np.swapaxes(Y, -1, -2)
        return ((gK * Km).astype(self.dtype),)


def doubly_stochastic_weights(
    Q: Tensor, K: Tensor, eps: float = 2.0, max_iter: int = 20, fused: bool = True
) -> Tensor:
    """Sinkhorn-balanced attention matrix, rows and columns summing to one.

    Cost is ``-QK^T / sqrt(d)`` with uniform marginals ``1/n``; the plan is
    rescaled by ``n``. ``fused=True`` uses :class:`SinkhornBalance` and falls
    back to the tape-unrolled :func:`sinkhorn_log` if the fused result is
    not finite; ``fused=False`` always unrolls.
    """
    scores = _scaled_scores(Q, K)
    if fused:
        W = SinkhornBalance.apply(scores * (1.0 / eps), max_iter=max_iter)
        if np.isfinite(W.data).all():
            return W
    n = Q.shape[-2]
    plan, _ = sinkhorn_log(-scores, eps=eps, max_iter=max_iter)
    return plan * float(n)


def doubly_stochastic_attention(Q: Tensor, K: Tensor, V: Tensor, cfg: AttentionConfig | None = None) -> Tensor:
    _check_qkv(Q, K, V)
    cfg = cfg or AttentionConfig(variant="doubly_stochastic")
    W = doubly_stochastic_weights(
        Q, K, cfg.sinkhorn_eps, cfg.sinkhorn_max_iter, fused=cfg.sinkhorn_impl == "fused"
    )
    return T.matmul(W, V)


# ---------------------------------------------------------------------------
# cosine


def cosine_similarity(Q: Tensor, K: Tensor, floor: float = 1e-12) -> Tensor:
    """Row-wise cosine similarity matrix; zero rows are guarded by ``floor``."""
    return T.matmul(T.l2_normalize_rows(Q, floor), T.l2_normalize_rows(K, floor).mT)


def cosine_attention(Q: Tensor, K: Tensor, V: Tensor, m: float | Tensor = 0.0) -> Tensor:
    """cos(Q, K) / n**sigmoid(m) V, with n the current sequence length."""
    _check_qkv(Q, K, V)
    n = Q.shape[-2]
    m = T.as_tensor(m, dtype=Q.dtype)
    scale = (T.sigmoid(m) * (-math.log(n))).exp()
    return T.matmul(cosine_similarity(Q, K), V) * scale


def attention_weights(Q: Tensor, K: Tensor, cfg: AttentionConfig, m: float | Tensor | None = None) -> Tensor:
    """Explicit ``n x n`` weight matrix of a variant (for inspection and tests)."""
    v = cfg.variant
    if v == "softmax":
        return softmax_weights(Q, K)
    if v == "sigmoid":
        return sigmoid_weights(Q, K, cfg.sigmoid_bias or 0.0)
    if v == "linear":
        A = T.matmul(T.elu_plus_one(Q), T.elu_plus_one(K).mT)
        return A / (A.sum(axis=-1, keepdims=True) + cfg.linear_eps)
    if v == "doubly_stochastic":
        return doubly_stochastic_weights(
            Q, K, cfg.sinkhorn_eps, cfg.sinkhorn_max_iter, fused=cfg.sinkhorn_impl == "fused"
        )
    n = Q.shape[-2]
    m = cfg.cosine_m if m is None else m
    return cosine_similarity(Q, K) * (T.sigmoid(T.as_tensor(m, dtype=Q.dtype)) * (-math.log(n))).exp()


def attend(Q: Tensor, K: Tensor, V: Tensor, cfg: AttentionConfig, m: float | Tensor | None = None) -> Tensor:
    """Dispatch to the kernel selected by ``cfg.variant`` (no LayerScale)."""
    v = cfg.variant
    if v == "softmax":
        return softmax_attention(Q, K, V)
    if v == "sigmoid":
        b = cfg.sigmoid_bias if cfg.sigmoid_bias is not None else -math.log(Q.shape[-2])
        return sigmoid_attention(Q, K, V, b)
    if v == "linear":
        return linear_attention(Q, K, V, cfg.linear_eps)
    if v == "doubly_stochastic":
        return doubly_stochastic_attention(Q, K, V, cfg)
    return cosine_attention(Q, K, V, cfg.cosine_m if m is None else m)


# ---------------------------------------------------------------------------
# multi-head wrapper


def init_multi_head_params(
    cfg: AttentionConfig, rng: np.random.Generator, dtype=np.float64, std: float = 0.02
) -> dict[str, Tensor]:
    """Projection weights (truncated normal) plus variant extras.

    Keys: ``w_q``, ``w_k``, ``w_v``, ``w_o`` (``dim x dim``), ``b_o``; ``m`` for
    cosine; ``gamma`` (LayerScale) for sigmoid.
    """
    dim = cfg.embed_dim
    params = {
        name: Tensor(trunc_normal(rng, (dim, dim), std).astype(dtype), requires_grad=True, name=name)
        for name in ("w_q", "w_k", "w_v", "w_o")
    }
    params["b_o"] = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True, name="b_o")
    if cfg.variant == "cosine":
        params["m"] = Tensor(np.asarray(cfg.cosine_m, dtype=dtype), requires_grad=True, name="m")
    if cfg.variant == "sigmoid":
        params["gamma"] = Tensor(np.full(dim, cfg.layerscale_init, dtype=dtype), requires_grad=True, name="gamma")
    return params


def trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) samples redrawn until within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, dim = x.shape
    return x.reshape(*lead, n, heads, dim // heads).transpose(
        *range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2
    )


def merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, d = x.shape
    k = len(lead)
    return x.transpose(*range(k), k + 1, k, k + 2).reshape(*lead, n, h * d)


def multi_head(X: Tensor, params: dict[str, Tensor], cfg: AttentionConfig) -> Tensor:
    """Project, split into ``cfg.heads`` heads, attend per head, merge, project.

    Head ``i`` uses columns ``i*d:(i+1)*d`` of the query/key/value
    projections. For the sigmoid variant the projected output is multiplied
    by the LayerScale vector ``params["gamma"]``.

    Raises:
        ConfigError: if the embedding width is not ``heads * head_dim``.
    """
    dim = X.shape[-1]
    if dim % cfg.heads != 0 or dim // cfg.heads != cfg.head_dim:
        raise ConfigError(f"embedding dim {dim} incompatible with {cfg.heads} heads of size {cfg.head_dim}")
    Q = split_heads(T.matmul(X, params["w_q"]), cfg.heads)
    K = split_heads(T.matmul(X, params["w_k"]), cfg.heads)
    V = split_heads(T.matmul(X, params["w_v"]), cfg.heads)
    out = merge_heads(attend(Q, K, V, cfg, params.get("m")))
    out = T.matmul(out, params["w_o"])
    if "b_o" in params:
        out = out + params["b_o"]
    if cfg.variant == "sigmoid" and "gamma" in params:
        out = LayerScale(dim, gamma=params["gamma"])(out)
    return out
