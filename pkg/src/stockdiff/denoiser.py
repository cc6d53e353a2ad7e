"""The noise-prediction network.

Pipeline per stock: temporal block (dilated causal convs + noise-level
embedding) -> masked relational transformer across stocks -> second
temporal block -> linear head back to the indicator channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from stockdiff import tensor as T
from stockdiff.nn import CausalConv1d, LayerNorm, Linear, Module
from stockdiff.tensor import Tensor

MAX_MASKED_HEADS = 12


@dataclass
class DenoiserConfig:
    n_indicators: int
    seq_len: int  # L + horizon
    d_model: int = 16
    n_masked_heads: int = 12
    n_unmasked_heads: int = 4
    n_encoder_layers: int = 2
    head_dim: int = 8
    ff_hidden: int = 64
    conv_kernel: int = 2
    dilations: tuple = (1, 2, 4, 8)
    emb_dim: int = 32
    emb_base: float = 1e4
    use_relations: bool = True
    output_skip: bool = True

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        if self.emb_dim % 2:
            raise ValueError("emb_dim must be even")
        if not 0 <= self.n_masked_heads <= MAX_MASKED_HEADS:
            raise ValueError(f"n_masked_heads must lie in [0, {MAX_MASKED_HEADS}]")
        if self.use_relations and self.n_masked_heads + self.n_unmasked_heads < 1:
            raise ValueError("relational transformer needs at least one head")
        d = self.dilations
        if not d or d[0] != 1 or any(b != 2 * a for a, b in zip(d, d[1:])):
            raise ValueError(f"dilations must be 1, 2, 4, ...; got {d}")
        for name in ("n_indicators", "seq_len", "d_model", "head_dim", "ff_hidden", "conv_kernel"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def n_heads(self):
        return self.n_masked_heads + self.n_unmasked_heads

    @property
    def in_channels(self):
        # noisy target, masked history, future mask, per-timepoint noise level
        return 2 * self.n_indicators + 2


def noise_embedding(k, D, r=1e4):
    """Sinusoidal embedding of the diffusion step: ``[cos(k/r^(2s/D)), sin(k/r^(2s/D))]`` pairs.

    ``k`` may be a scalar or an array of steps; the result has a trailing
    axis of size ``D``.
    """
    if D % 2:
        raise ValueError("embedding dimension D must be even")
    k = np.asarray(k, dtype=np.float64)
    freqs = r ** (-2.0 * np.arange(D // 2) / D)
    ang = k[..., None] * freqs
    out = np.empty(k.shape + (D,))
    out[..., 0::2] = np.cos(ang)
    out[..., 1::2] = np.sin(ang)
    return out


def _causal_mean_matrix(n):
    tri = np.tril(np.ones((n, n)))
    return tri / tri.sum(axis=1, keepdims=True)


class AttDiCEm(Module):
    """Gated dilated causal conv stack with step embedding and causal channel attention.

    Input and output are channels-last ``(B, N, S, C)``. The channel
    attention squeezes with a running (causal) mean so position t never sees
    later inputs.
    """

    def __init__(self, c_in, d, emb_dim, dilations, kernel, rng):
        super().__init__()
        self.conv_in = self.child("conv_in", CausalConv1d(c_in, d, rng, kernel, 1))
        self.emb_proj = self.child("emb_proj", Linear(emb_dim, d, rng))
        self.layers = []
        for i, dil in enumerate(dilations):
            f = self.child(f"filter{i}", CausalConv1d(d, d, rng, kernel, dil))
            g = self.child(f"gate{i}", CausalConv1d(d, d, rng, kernel, dil))
            res = self.child(f"res{i}", Linear(d, d, rng))
            self.layers.append((f, g, res))
        d_att = max(d // 2, 2)
        self.att_down = self.child("att_down", Linear(d, d_att, rng))
        self.att_up = self.child("att_up", Linear(d_att, d, rng))
        self._pool = {}

    def __call__(self, x, emb):
        h = self.conv_in(x)
        e = self.emb_proj(emb)
        h = h + e.reshape(e.shape[0], 1, 1, e.shape[1])
        for f, g, res in self.layers:
            z = T.tanh(f(h)) * T.sigmoid(g(h))
            h = h + res(z)
        s = h.shape[-2]
        if s not in self._pool:
            self._pool[s] = Tensor(_causal_mean_matrix(s))
        pooled = self._pool[s] @ h
        weights = T.sigmoid(self.att_up(T.relu(self.att_down(pooled))))
        return h * weights


def masked_attention(q, k, v, mask=None):
    """``softmax_M(q k^T / sqrt(d_k)) v`` where zero mask entries get zero weight."""
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(q.shape[-1]))
    return T.softmax(scores, axis=-1, mask=mask) @ v


class EncoderLayer(Module):
    """Post-norm transformer encoder layer whose heads each carry their own stock mask."""

    def __init__(self, dim, n_heads, head_dim, ff_hidden, rng):
        super().__init__()
        self.n_heads, self.head_dim = n_heads, head_dim
        width = n_heads * head_dim
        self.wq = self.child("wq", Linear(dim, width, rng))
        self.wk = self.child("wk", Linear(dim, width, rng))
        self.wv = self.child("wv", Linear(dim, width, rng))
        self.wo = self.child("wo", Linear(width, dim, rng))
        self.ln1 = self.child("ln1", LayerNorm(dim))
        self.ff1 = self.child("ff1", Linear(dim, ff_hidden, rng))
        self.ff2 = self.child("ff2", Linear(ff_hidden, dim, rng))
        self.ln2 = self.child("ln2", LayerNorm(dim))

    def _split(self, t):
        b, n, _ = t.shape
        return t.reshape(b, n, self.n_heads, self.head_dim).transpose(0, 2, 1, 3)

    def __call__(self, x, masks):
        b, n, _ = x.shape
        q, k, v = self._split(self.wq(x)), self._split(self.wk(x)), self._split(self.wv(x))
        att = masked_attention(q, k, v, masks)
        att = att.transpose(0, 2, 1, 3).reshape(b, n, self.n_heads * self.head_dim)
        x = self.ln1(x + self.wo(att))
        return self.ln2(x + self.ff2(T.relu(self.ff1(x))))


class MaskedRelationalTransformer(Module):
    """Encoder stack over stock tokens; each token is one stock's flattened (time x d) features."""

    def __init__(self, cfg, rng):
        super().__init__()
        dim = cfg.d_model * cfg.seq_len
        self.layers = [
            self.child(f"layer{i}", EncoderLayer(dim, cfg.n_heads, cfg.head_dim, cfg.ff_hidden, rng))
            for i in range(cfg.n_encoder_layers)
        ]

    def __call__(self, x, masks):
        b, n, s, d = x.shape
        h = x.reshape(b, n, s * d)
        for layer in self.layers:
            h = layer(h, masks)
        return h.reshape(b, n, s, d)


class DenoiserNet(Module):
    def __init__(self, cfg, rng):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.stage1 = self.child("stage1", AttDiCEm(cfg.in_channels, d, cfg.emb_dim, cfg.dilations, cfg.conv_kernel, rng))
        self.mrt = self.child("mrt", MaskedRelationalTransformer(cfg, rng)) if cfg.use_relations else None
        self.stage2 = self.child("stage2", AttDiCEm(d, d, cfg.emb_dim, cfg.dilations, cfg.conv_kernel, rng))
        self.head = self.child("head", Linear(d, cfg.n_indicators, rng))
        self.skip = self.child("skip", Linear(cfg.in_channels, cfg.n_indicators, rng, bias=False))

    def mask_stack(self, head_masks, n):
        """(heads, N, N) mask tensor: relation-group masks, then all-ones unmasked heads.

        Masked heads beyond the available groups reuse the union of the groups.
        """
        cfg = self.cfg
        if head_masks is None or len(head_masks) == 0:
            groups = [np.eye(n)]
        else:
            groups = [np.asarray(m, dtype=np.float64) for m in head_masks.masks]
        if len(groups) > cfg.n_masked_heads and cfg.n_masked_heads > 0:
            raise ValueError(f"{len(groups)} relation groups exceed n_masked_heads={cfg.n_masked_heads}")
        for m in groups:
            if m.shape != (n, n):
                raise ValueError(f"mask shape {m.shape} does not match N={n}")
            if not np.all(np.diag(m) > 0):
                raise ValueError("every head mask needs an all-ones diagonal")
        union = np.max(groups, axis=0)
        stack = [groups[i] if i < len(groups) else union for i in range(cfg.n_masked_heads)]
        stack += [np.ones((n, n))] * cfg.n_unmasked_heads
        return np.stack(stack)

    def assemble_input(self, x_k, cond, future_mask, alpha_bar_k):
        """Channels-last network input ``(B, N, S, 2P + 2)``."""
        b, n, p, s = x_k.shape
        noise_std = np.sqrt(1.0 - np.broadcast_to(alpha_bar_k, (b, s)))
        parts = [
            np.swapaxes(x_k, 2, 3),
            np.swapaxes(cond, 2, 3),
            np.broadcast_to(np.asarray(future_mask, dtype=np.float64).reshape(1, 1, s, 1), (b, n, s, 1)),
            np.broadcast_to(noise_std[:, None, :, None], (b, n, s, 1)),
        ]
        return np.concatenate(parts, axis=-1)

    def __call__(self, x_k, cond, future_mask, k, alpha_bar_k, masks):
        """Predict the injected noise for a batch ``x_k`` of shape (B, N, P, S).

        ``k`` holds each item's step (B,), ``alpha_bar_k`` its per-timepoint
        cumulative signal level (B, S), ``masks`` a (heads, N, N) stack.
        """
        x_k = np.asarray(x_k, dtype=np.float64)
        b = x_k.shape[0]
        cond = np.broadcast_to(cond, x_k.shape)
        emb = Tensor(noise_embedding(np.broadcast_to(k, (b,)), self.cfg.emb_dim, self.cfg.emb_base))
        x_in = Tensor(self.assemble_input(x_k, cond, future_mask, alpha_bar_k))
        h = self.stage1(x_in, emb)
        if self.mrt is not None:
            h = h + self.mrt(h, masks)
        h = self.stage2(h, emb)
        out = (self.head(h) + self.skip(x_in)).transpose(0, 1, 3, 2)
        if self.cfg.output_skip:
            # eps_hat = sqrt(1 - abar) x_k + sqrt(abar) F: at high noise x_k already is the noise
            ab = np.broadcast_to(alpha_bar_k, (b, x_k.shape[-1]))[:, None, None, :]
            out = out * np.sqrt(ab) + np.sqrt(1.0 - ab) * x_k
        return out

    def describe(self):
        groups = {}
        for name, p in self.named_parameters().items():
            top = name.split(".")[0]
            groups[top] = groups.get(top, 0) + p.size
        groups["total"] = sum(groups.values())
        return groups
