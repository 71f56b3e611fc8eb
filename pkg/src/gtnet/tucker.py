"""Tucker-factored bilinear fusion of two pyramid levels.

A full bilinear map ``y[k] = sum_ij gamma[i, j, k] q[i] v[j]`` needs an
I x J x K tensor.  Writing ``gamma = core x_0 W_q x_1 W_v x_2 W_o`` lets the
same map be evaluated as ``core x_0 (q^T W_q) x_1 (v^T W_v) x_2 W_o`` without
ever forming ``gamma``.  The two latent mode sizes of the core are capped by
the number of object categories.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from . import tensor as T
from .autodiff import Variable
from .errors import ConstraintError, ShapeError
from .nn import LinearParams


@dataclass
class TuckerCore:
    gamma_c: Variable  # (P, Q, R)
    k_cat: int

    def __post_init__(self):
        if self.gamma_c.ndim != 3:
            raise ShapeError(f"core tensor must be 3-mode, got shape {self.gamma_c.shape}")
        if self.k_cat < 1:
            raise ConstraintError(f"category count must be positive, got {self.k_cat}")
        p, q, _ = self.gamma_c.shape
        if p > self.k_cat or q > self.k_cat:
            raise ConstraintError(
                f"core ranks P={p}, Q={q} must not exceed the category count {self.k_cat}"
            )

    @property
    def ranks(self) -> tuple[int, int, int]:
        return self.gamma_c.shape


@dataclass
class TBAParams:
    core: TuckerCore
    w_q: Variable  # (I, P)
    w_v: Variable  # (J, Q)
    w_o: Variable  # (K_out, R)
    restore: LinearParams  # K_out -> C
    l1_weight: float = 1e-4

    def __post_init__(self):
        p, q, r = self.core.ranks
        if self.w_q.ndim != 2 or self.w_q.shape[1] != p:
            raise ShapeError(f"w_q must be (I, {p}), got {self.w_q.shape}")
        if self.w_v.ndim != 2 or self.w_v.shape[1] != q:
            raise ShapeError(f"w_v must be (J, {q}), got {self.w_v.shape}")
        if self.w_o.ndim != 2 or self.w_o.shape[1] != r:
            raise ShapeError(f"w_o must be (K_out, {r}), got {self.w_o.shape}")
        if self.restore.weight.shape[1] != self.w_o.shape[0]:
            raise ShapeError(f"restore map must consume {self.w_o.shape[0]} features")
        if self.l1_weight < 0:
            raise ConstraintError(f"L1 weight must be nonnegative, got {self.l1_weight}")

    @property
    def dims(self) -> tuple[int, int, int]:
        """(I, J, K_out) of the equivalent full interaction tensor."""
        return self.w_q.shape[0], self.w_v.shape[0], self.w_o.shape[0]

    def factored_size(self) -> int:
        (i, j, k), (p, q, r) = self.dims, self.core.ranks
        return i * p + j * q + k * r + p * q * r

    def full_size(self) -> int:
        i, j, k = self.dims
        return i * j * k

    def variables(self, prefix: str = "tba") -> dict[str, Variable]:
        out = {
            f"{prefix}.gamma_c": self.core.gamma_c,
            f"{prefix}.w_q": self.w_q,
            f"{prefix}.w_v": self.w_v,
            f"{prefix}.w_o": self.w_o,
        }
        out.update(self.restore.variables(f"{prefix}.restore"))
        return out

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        in_q: int,
        in_v: int,
        ranks: tuple[int, int, int],
        k_cat: int,
        k_out: int | None = None,
        channels: int | None = None,
        l1_weight: float = 1e-4,
        name: str = "tba",
    ) -> "TBAParams":
        p, q, r = ranks
        k_out = in_v if k_out is None else k_out
        channels = in_v if channels is None else channels
        scale = 1.0 / np.sqrt(p * q * r)
        core = TuckerCore(ad.parameter(rng.uniform(-1.0, 1.0, (p, q, r)) * scale, f"{name}.gamma_c"), k_cat)
        return cls(
            core=core,
            w_q=ad.parameter(nn.glorot_uniform(rng, (in_q, p), in_q, p), f"{name}.w_q"),
            w_v=ad.parameter(nn.glorot_uniform(rng, (in_v, q), in_v, q), f"{name}.w_v"),
            w_o=ad.parameter(nn.glorot_uniform(rng, (k_out, r), r, k_out), f"{name}.w_o"),
            restore=nn.init_linear(rng, k_out, channels, bias=True, name=f"{name}.restore"),
            l1_weight=l1_weight,
        )


def bilinear_full(q, v, gamma):
    """Reference bilinear map ``y[k] = sum_ij gamma[i, j, k] q[i] v[j]``."""
    q, v, gamma = ad.constant(q), ad.constant(v), ad.constant(gamma)
    if gamma.ndim != 3 or q.shape != (gamma.shape[0],) or v.shape != (gamma.shape[1],):
        raise ShapeError(f"q {q.shape} and v {v.shape} do not fit interaction tensor {gamma.shape}")
    return ad.einsum("ijk,i,j->k", gamma, q, v)


def tucker_reconstruct(p: TBAParams) -> Variable:
    """Materialize ``core x_0 W_q x_1 W_v x_2 W_o`` as an (I, J, K_out) tensor."""
    g = ad.mode_n_product(p.core.gamma_c, p.w_q, 0)
    g = ad.mode_n_product(g, p.w_v, 1)
    return ad.mode_n_product(g, p.w_o, 2)


def _vector_mode_product(t, vec, mode: int) -> Variable:
    # t x_mode vec^T, then drop the size-1 mode
    row = ad.reshape(vec, (1, vec.shape[0]))
    out = ad.mode_n_product(t, row, mode)
    return ad.reshape(out, tuple(s for k, s in enumerate(out.shape) if k != mode) or (1,))


def bilinear_fuse(q, v, p: TBAParams, return_latent: bool = False):
    """Factored bilinear fusion; never forms the full interaction tensor.

    With ``return_latent=True`` also returns the projected inputs
    ``(q_tilde, v_tilde)``.
    """
    q, v = ad.constant(q), ad.constant(v)
    i, j, _ = p.dims
    if q.shape != (i,) or v.shape != (j,):
        raise ShapeError(f"expected q of length {i} and v of length {j}, got {q.shape} and {v.shape}")
    q_t = ad.mode_n_product(q, ad.transpose(p.w_q), 0)
    v_t = ad.mode_n_product(v, ad.transpose(p.w_v), 0)
    z = _vector_mode_product(p.core.gamma_c, q_t, 0)  # (Q, R)
    z = _vector_mode_product(z, v_t, 0)  # (R,)
    y = ad.mode_n_product(z, p.w_o, 0)
    if return_latent:
        return y, q_t, v_t
    return y


def bilinear_fuse_columns(qs, vs, p: TBAParams) -> Variable:
    """:func:`bilinear_fuse` applied to every column of (I, N) and (J, N) inputs."""
    qs, vs = ad.constant(qs), ad.constant(vs)
    i, j, _ = p.dims
    if qs.ndim != 2 or vs.ndim != 2 or qs.shape[0] != i or vs.shape[0] != j or qs.shape[1] != vs.shape[1]:
        raise ShapeError(f"column inputs {qs.shape}, {vs.shape} do not fit dims {(i, j)}")
    q_t = ad.mode_n_product(qs, ad.transpose(p.w_q), 0)  # (P, N)
    v_t = ad.mode_n_product(vs, ad.transpose(p.w_v), 0)  # (Q, N)
    z = ad.einsum("pqr,pn,qn->rn", p.core.gamma_c, q_t, v_t)
    return ad.mode_n_product(z, p.w_o, 0)  # (K_out, N)


def l1_core_penalty(p: TBAParams) -> Variable:
    return ad.mul_scalar(ad.sum(ad.abs(p.core.gamma_c)), p.l1_weight)


def self_attention_gate(f_new) -> Variable:
    """``sigmoid(gmp(f)) * f + f`` with a per-channel gate."""
    f_new = ad.constant(f_new)
    if f_new.ndim != 3:
        raise ShapeError(f"attention gate expects a (C, H, W) map, got {f_new.shape}")
    gate = ad.sigmoid(ad.global_max_pool(f_new))
    return ad.add(ad.mul(f_new, gate), f_new)


def tba_forward(p2, p3, p: TBAParams) -> Variable:
    """Fuse a fine level ``p2`` (C, 2H, 2W) with a coarse level ``p3`` (C, H, W).

    ``p3`` is upsampled to ``p2``'s grid; at every position the channel
    vector of upsampled ``p3`` is ``q`` and that of ``p2`` is ``v``.
    """
    p2, p3 = ad.constant(p2), ad.constant(p3)
    if p2.ndim != 3 or p3.ndim != 3:
        raise ShapeError("tba_forward expects (C, H, W) maps")
    if p2.shape[1:] != (2 * p3.shape[1], 2 * p3.shape[2]):
        raise ShapeError(f"p3 {p3.shape} must be exactly half the spatial size of p2 {p2.shape}")
    c, h, w = p2.shape
    q_cols = ad.reshape(nn.upsample2x(p3), (p3.shape[0], h * w))
    v_cols = ad.reshape(p2, (c, h * w))
    y = bilinear_fuse_columns(q_cols, v_cols, p)
    f_new = nn.linear(y, p.restore)
    f_new = ad.reshape(f_new, (f_new.shape[0], h, w))
    return self_attention_gate(f_new)


def hosvd(gamma, ranks):
    """Truncated higher-order SVD.

    Returns ``(core, factors)`` where ``factors[n]`` holds the leading
    ``ranks[n]`` left singular vectors of the mode-n unfolding and
    ``core = gamma x_0 U_0^T x_1 U_1^T ...``.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != gamma.ndim:
        raise ShapeError(f"need one rank per mode ({gamma.ndim}), got {len(ranks)}")
    for n, (r, size) in enumerate(zip(ranks, gamma.shape)):
        if not 1 <= r <= size:
            raise ConstraintError(f"rank {r} for mode {n} must lie in [1, {size}]")
    factors = []
    for n, r in enumerate(ranks):
        u, _, _ = np.linalg.svd(T.unfold(gamma, n), full_matrices=True)
        factors.append(np.ascontiguousarray(u[:, :r]))
    core = gamma
    for n, u in enumerate(factors):
        core = T.mode_n_product(core, u.T, n)
    return core, factors


def tucker_to_tensor(core, factors) -> np.ndarray:
    out = np.asarray(core, dtype=np.float64)
    for n, u in enumerate(factors):
        out = T.mode_n_product(out, u, n)
    return out
