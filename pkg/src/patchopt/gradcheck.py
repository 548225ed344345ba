"""Central-difference verification of the encoder's reverse-mode gradients.

The probe scalar is s = sum(forward(z0) * R) for a fixed random R, so its
gradient with respect to any parameter entry is checkable by bumping that
entry by +/-h and re-running forward. Relative error uses
|a - f| / max(|a| + |f|, 1e-8), which degrades to a scaled absolute error
when both sides are negligibly small.
"""

from __future__ import annotations

import numpy as np

from . import vit_core
from .tokenizer import EmbeddingParams, embed, embed_backward


def _probe(z0, config, params, weights):
    z_out, _ = vit_core.forward(z0, config, params)
    return float((z_out * weights).sum())


def gradient_check(
    config: vit_core.ViTConfig,
    seed: int = 0,
    n_tokens: int = 4,
    h: float = 1e-4,
    perturb: float = 0.0,
    init_std: float = 0.5,
) -> dict:
    """Compare backward() against central differences for every tensor.

    Weights are drawn at std 0.5 rather than the training init of 0.02: near
    the degenerate init the attention-projection gradients drop below the
    finite-difference noise floor and the relative metric measures roundoff,
    not correctness. Returns per-tensor and overall max relative error.
    ``perturb`` injects a fault into the analytic gradients (negative
    control: the check must then fail for any perturbation well above the
    tolerance).
    """
    rng = np.random.default_rng(seed)
    params = vit_core.ViTParams.seeded(config, seed, std=init_std)
    z0 = rng.normal(0.0, 1.0, (n_tokens, config.hidden))
    weights = rng.normal(0.0, 1.0, (n_tokens, config.hidden))

    _, tape = vit_core.forward(z0, config, params)
    grads = vit_core.backward(tape, weights)

    per_tensor = {}
    for name, analytic in grads.named_tensors():
        if name == "z0":
            target = z0
        else:
            block, fname = name.split(".")
            target = getattr(params.blocks[int(block.removeprefix("block"))], fname)
        analytic = analytic + perturb
        fd = np.zeros_like(analytic)
        flat = target.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = _probe(z0, config, params, weights)
            flat[i] = orig - h
            dn = _probe(z0, config, params, weights)
            flat[i] = orig
            fd.reshape(-1)[i] = (up - dn) / (2.0 * h)
        rel = np.abs(analytic - fd) / np.maximum(np.abs(analytic) + np.abs(fd), 1e-8)
        per_tensor[name] = float(rel.max())

    return {"per_tensor": per_tensor, "max_rel_err": max(per_tensor.values())}


def embedding_gradient_check(
    patch_dim: int = 8,
    token_count: int = 4,
    embed_dim: int = 8,
    seed: int = 0,
    h: float = 1e-4,
) -> dict:
    """Same check for the projection and positional tables of the tokenizer."""
    rng = np.random.default_rng(seed)
    params = EmbeddingParams.seeded(patch_dim, token_count, embed_dim, seed)
    patches = rng.normal(0.0, 1.0, (token_count, patch_dim))
    weights = rng.normal(0.0, 1.0, (token_count, embed_dim))

    d_patches, d_e, d_pos = embed_backward(patches, params, weights)

    def probe(pt, pr):
        return float((embed(pt, pr).tokens * weights).sum())

    results = {}
    for name, target, analytic in (
        ("projection", params.projection, d_e),
        ("positional", params.positional, d_pos),
        ("patches", patches, d_patches),
    ):
        fd = np.zeros_like(analytic)
        flat = target.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = probe(patches, params)
            flat[i] = orig - h
            dn = probe(patches, params)
            flat[i] = orig
            fd.reshape(-1)[i] = (up - dn) / (2.0 * h)
        rel = np.abs(analytic - fd) / np.maximum(np.abs(analytic) + np.abs(fd), 1e-8)
        results[name] = float(rel.max())
    return {"per_tensor": results, "max_rel_err": max(results.values())}
