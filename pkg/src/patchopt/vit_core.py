"""Desk-scale transformer encoder with exact reverse-mode gradients.

Pre-norm residual blocks over an (N, P) token matrix:

    z'  = MSA(Lnorm(z)) + z
    out = MLP(Lnorm(z')) + z'

MSA is standard scaled-dot-product attention, Softmax(q kᵀ / sqrt(K_h)) v per
head, heads concatenated feature-wise and projected; the MLP is
Linear -> GELU -> Linear with the exact (erf-based) GELU. Everything runs in
float64 so central-difference gradient checks hold at 1e-4.

``forward`` records per-block intermediates on a Tape; ``backward`` replays
it in reverse and returns gradients for every parameter tensor and for the
input tokens. No dropout, no class token, no final normalization after the
last block.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy.special import erf

from .errors import NonFiniteActivation, ShapeMismatch, TapeMismatch

INIT_STD = 0.02
DEFAULT_LN_EPS = 1e-12

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class ViTConfig:
    """Encoder hyperparameters: depth, width, MLP width, head count."""

    layers: int
    hidden: int
    mlp_dim: int
    heads: int
    ln_eps: float = DEFAULT_LN_EPS

    def __post_init__(self):
        if self.layers < 0 or min(self.hidden, self.mlp_dim, self.heads) < 1:
            raise ValueError(f"invalid config {self}")
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.ln_eps <= 0:
            raise ValueError("ln_eps must be > 0")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


TINY = ViTConfig(layers=2, hidden=8, mlp_dim=16, heads=2)
BASE = ViTConfig(layers=12, hidden=768, mlp_dim=3072, heads=12)
PRESETS = {"tiny": TINY, "base": BASE}


@dataclass
class LayerParams:
    """One encoder block; also reused as the container for its gradients."""

    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_msa: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    w_mlp1: np.ndarray
    b_mlp1: np.ndarray
    w_mlp2: np.ndarray
    b_mlp2: np.ndarray


_LAYER_FIELDS = [f.name for f in fields(LayerParams)]


@dataclass
class ViTParams:
    blocks: list[LayerParams]

    @classmethod
    def seeded(cls, config: ViTConfig, seed: int = 0, std: float = INIT_STD):
        """Gaussian weights (std 0.02 by default), zero biases, identity LayerNorm affine."""
        rng = np.random.default_rng(seed)
        p, m = config.hidden, config.mlp_dim
        blocks = []
        for _ in range(config.layers):
            blocks.append(
                LayerParams(
                    ln1_gamma=np.ones(p),
                    ln1_beta=np.zeros(p),
                    w_q=rng.normal(0.0, std, (p, p)),
                    w_k=rng.normal(0.0, std, (p, p)),
                    w_v=rng.normal(0.0, std, (p, p)),
                    w_msa=rng.normal(0.0, std, (p, p)),
                    ln2_gamma=np.ones(p),
                    ln2_beta=np.zeros(p),
                    w_mlp1=rng.normal(0.0, std, (p, m)),
                    b_mlp1=np.zeros(m),
                    w_mlp2=rng.normal(0.0, std, (m, p)),
                    b_mlp2=np.zeros(p),
                )
            )
        return cls(blocks=blocks)

    @classmethod
    def zeros_like(cls, other: "ViTParams"):
        return cls(
            blocks=[
                LayerParams(**{n: np.zeros_like(getattr(b, n)) for n in _LAYER_FIELDS})
                for b in other.blocks
            ]
        )

    def named_tensors(self):
        for j, block in enumerate(self.blocks):
            for name in _LAYER_FIELDS:
                yield f"block{j}.{name}", getattr(block, name)

    def check_shapes(self, config: ViTConfig) -> None:
        if len(self.blocks) != config.layers:
            raise ShapeMismatch(f"{len(self.blocks)} blocks != {config.layers} layers")
        p, m = config.hidden, config.mlp_dim
        want = {
            "ln1_gamma": (p,), "ln1_beta": (p,),
            "w_q": (p, p), "w_k": (p, p), "w_v": (p, p), "w_msa": (p, p),
            "ln2_gamma": (p,), "ln2_beta": (p,),
            "w_mlp1": (p, m), "b_mlp1": (m,), "w_mlp2": (m, p), "b_mlp2": (p,),
        }
        for name, tensor in self.named_tensors():
            field = name.split(".", 1)[1]
            if tensor.shape != want[field]:
                raise ShapeMismatch(f"{name} has shape {tensor.shape}, want {want[field]}")


def param_count(config: ViTConfig) -> int:
    """Scalar parameters in the encoder stack (embeddings excluded)."""
    p, m = config.hidden, config.mlp_dim
    per_block = 4 * p + 4 * p * p + (p * m + m) + (m * p + p)
    return config.layers * per_block


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row softmax with max subtraction."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, x * Phi(x)."""
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    phi = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * phi


def layer_norm(x, gamma, beta, eps: float = DEFAULT_LN_EPS):
    """Per-row normalization by population mean/variance, then affine."""
    y, _ = _layer_norm_fwd(np.asarray(x, dtype=np.float64), gamma, beta, eps)
    return y


def _layer_norm_fwd(x, gamma, beta, eps):
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean) * inv_std
    return x_hat * gamma + beta, (x_hat, inv_std)


def _layer_norm_bwd(d_out, cache, gamma):
    x_hat, inv_std = cache
    p = x_hat.shape[1]
    d_gamma = (d_out * x_hat).sum(axis=0)
    d_beta = d_out.sum(axis=0)
    d_x_hat = d_out * gamma
    d_x = inv_std * (
        d_x_hat
        - d_x_hat.mean(axis=1, keepdims=True)
        - x_hat * (d_x_hat * x_hat).sum(axis=1, keepdims=True) / p
    )
    return d_x, d_gamma, d_beta


def attention_head(q, k, v, return_weights: bool = False):
    """Softmax(q kᵀ / sqrt(K_h)) v for one head; K_h is the feature width."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    if q.shape != k.shape or q.shape[0] != v.shape[0]:
        raise ShapeMismatch(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    weights = softmax_rows(q @ k.T / np.sqrt(q.shape[1]))
    out = weights @ v
    return (out, weights) if return_weights else out


def _msa_fwd(zn, lp: LayerParams, heads: int):
    p = zn.shape[1]
    kh = p // heads
    q = zn @ lp.w_q
    k = zn @ lp.w_k
    v = zn @ lp.w_v
    probs = []
    outs = []
    for h in range(heads):
        s = slice(h * kh, (h + 1) * kh)
        a = softmax_rows(q[:, s] @ k[:, s].T / np.sqrt(kh))
        probs.append(a)
        outs.append(a @ v[:, s])
    concat = np.concatenate(outs, axis=1)
    out = concat @ lp.w_msa
    return out, (zn, q, k, v, probs, concat)


def _msa_bwd(d_out, cache, lp: LayerParams, heads: int):
    zn, q, k, v, probs, concat = cache
    p = zn.shape[1]
    kh = p // heads
    scale = 1.0 / np.sqrt(kh)

    d_w_msa = concat.T @ d_out
    d_concat = d_out @ lp.w_msa.T

    d_q = np.empty_like(q)
    d_k = np.empty_like(k)
    d_v = np.empty_like(v)
    for h in range(heads):
        s = slice(h * kh, (h + 1) * kh)
        a = probs[h]
        d_head = d_concat[:, s]
        d_a = d_head @ v[:, s].T
        d_v[:, s] = a.T @ d_head
        d_logits = a * (d_a - (d_a * a).sum(axis=1, keepdims=True))
        d_q[:, s] = scale * (d_logits @ k[:, s])
        d_k[:, s] = scale * (d_logits.T @ q[:, s])

    d_zn = d_q @ lp.w_q.T + d_k @ lp.w_k.T + d_v @ lp.w_v.T
    grads = {
        "w_q": zn.T @ d_q,
        "w_k": zn.T @ d_k,
        "w_v": zn.T @ d_v,
        "w_msa": d_w_msa,
    }
    return d_zn, grads


def msa(z, lp: LayerParams, heads: int):
    """Multi-head self-attention including the output projection."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[1] % heads != 0:
        raise ShapeMismatch(f"width {z.shape[1]} not divisible by {heads} heads")
    if lp.w_q.shape != (z.shape[1], z.shape[1]):
        raise ShapeMismatch(f"w_q shape {lp.w_q.shape} incompatible with tokens {z.shape}")
    out, _ = _msa_fwd(z, lp, heads)
    return out


def _mlp_fwd(zn, lp: LayerParams):
    pre = zn @ lp.w_mlp1 + lp.b_mlp1
    act = gelu(pre)
    return act @ lp.w_mlp2 + lp.b_mlp2, (zn, pre, act)


def _mlp_bwd(d_out, cache, lp: LayerParams):
    zn, pre, act = cache
    d_act = d_out @ lp.w_mlp2.T
    d_pre = d_act * gelu_grad(pre)
    grads = {
        "w_mlp2": act.T @ d_out,
        "b_mlp2": d_out.sum(axis=0),
        "w_mlp1": zn.T @ d_pre,
        "b_mlp1": d_pre.sum(axis=0),
    }
    return d_pre @ lp.w_mlp1.T, grads


def _block_fwd(z, lp: LayerParams, config: ViTConfig):
    zn1, ln1_cache = _layer_norm_fwd(z, lp.ln1_gamma, lp.ln1_beta, config.ln_eps)
    attn, msa_cache = _msa_fwd(zn1, lp, config.heads)
    z_mid = attn + z
    zn2, ln2_cache = _layer_norm_fwd(z_mid, lp.ln2_gamma, lp.ln2_beta, config.ln_eps)
    mlp_out, mlp_cache = _mlp_fwd(zn2, lp)
    return mlp_out + z_mid, (ln1_cache, msa_cache, z_mid, ln2_cache, mlp_cache)


def _block_bwd(d_out, cache, lp: LayerParams, config: ViTConfig):
    ln1_cache, msa_cache, _, ln2_cache, mlp_cache = cache
    grads = {}

    d_zn2, mlp_grads = _mlp_bwd(d_out, mlp_cache, lp)
    grads.update(mlp_grads)
    d_z_mid, grads["ln2_gamma"], grads["ln2_beta"] = _layer_norm_bwd(d_zn2, ln2_cache, lp.ln2_gamma)
    d_z_mid = d_z_mid + d_out

    d_zn1, msa_grads = _msa_bwd(d_z_mid, msa_cache, lp, config.heads)
    grads.update(msa_grads)
    d_z, grads["ln1_gamma"], grads["ln1_beta"] = _layer_norm_bwd(d_zn1, ln1_cache, lp.ln1_gamma)
    d_z = d_z + d_z_mid
    return d_z, grads


def encoder_block(z, lp: LayerParams, config: ViTConfig):
    """One pre-norm residual block: attention then MLP."""
    out, _ = _block_fwd(np.asarray(z, dtype=np.float64), lp, config)
    return out


@dataclass
class Tape:
    """Everything needed to run the exact reverse pass (or replay forward)."""

    z0: np.ndarray
    config: ViTConfig
    params: ViTParams
    block_caches: list
    z_out: np.ndarray

    def replay(self) -> np.ndarray:
        """Recompute the forward pass from the taped inputs."""
        z_out, _ = forward(self.z0, self.config, self.params)
        return z_out


@dataclass
class Gradients:
    params: ViTParams
    z0: np.ndarray

    def named_tensors(self):
        yield from self.params.named_tensors()
        yield "z0", self.z0


def forward(z0: np.ndarray, config: ViTConfig, params: ViTParams) -> tuple[np.ndarray, Tape]:
    """Run the encoder stack; deterministic given (z0, params)."""
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.ndim != 2 or z0.shape[1] != config.hidden:
        raise ShapeMismatch(f"tokens {z0.shape} incompatible with hidden size {config.hidden}")
    params.check_shapes(config)
    z = z0
    caches = []
    for j, lp in enumerate(params.blocks):
        z, cache = _block_fwd(z, lp, config)
        if not np.isfinite(z).all():
            raise NonFiniteActivation(f"non-finite activation leaving block {j}")
        caches.append(cache)
    return z, Tape(z0=z0, config=config, params=params, block_caches=caches, z_out=z)


def backward(tape: Tape, d_out: np.ndarray) -> Gradients:
    """Exact reverse-mode gradients for every parameter tensor and z0."""
    d_out = np.asarray(d_out, dtype=np.float64)
    if d_out.shape != tape.z_out.shape:
        raise TapeMismatch(f"d_out shape {d_out.shape} != taped output {tape.z_out.shape}")
    grads = ViTParams.zeros_like(tape.params)
    d_z = d_out
    for j in range(len(tape.params.blocks) - 1, -1, -1):
        d_z, block_grads = _block_bwd(d_z, tape.block_caches[j], tape.params.blocks[j], tape.config)
        for name, g in block_grads.items():
            getattr(grads.blocks[j], name)[...] = g
    return Gradients(params=grads, z0=d_z)
