"""Straight-line numpy decoder used as the independent functional oracle.

Numeric policy (shared platform semantics): parameters and activations are
FP16 at operation boundaries; every operation computes internally in float64
and rounds once on writeback.  `widened=True` skips the intermediate FP16
rounding entirely and carries float64 end to end, for tolerance checks.
No tiling, instruction, or memory-map machinery is used here.
"""

import math

import numpy as np

from .model import ModelConfig, ParamStore

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def _round(x: np.ndarray, widened: bool) -> np.ndarray:
    return x if widened else x.astype(np.float16).astype(np.float64)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def silu(x):
    return x / (1.0 + np.exp(-x))


_ACT = {"relu": lambda x: np.maximum(x, 0.0), "gelu": gelu, "silu": silu}


def layernorm(x, g, b, widened):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return _round(g * (x - mu) / math.sqrt(var + LN_EPS) + b, widened)


def rmsnorm(x, g, widened):
    rms = math.sqrt(float((x ** 2).mean()) + LN_EPS)
    return _round(g * x / rms, widened)


def softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def rope_rotate(x, pos, head_dim):
    """Rotary embedding applied pairwise within each head."""
    out = x.copy()
    half = head_dim // 2
    inv = 10000.0 ** (-2.0 * np.arange(half) / head_dim)
    ang = pos * inv
    cos, sin = np.cos(ang), np.sin(ang)
    for h0 in range(0, len(x), head_dim):
        a = x[h0:h0 + head_dim:2]
        b = x[h0 + 1:h0 + head_dim:2]
        out[h0:h0 + head_dim:2] = a * cos - b * sin
        out[h0 + 1:h0 + head_dim:2] = a * sin + b * cos
    return out


class ReferenceDecoder:
    """Autoregressive decoder over a synthetic parameter store."""

    def __init__(self, config: ModelConfig, params: ParamStore, widened: bool = False):
        self.c = config
        self.p = params
        self.widened = widened
        self.k_cache = [[] for _ in range(config.num_layers)]
        self.v_cache = [[] for _ in range(config.num_layers)]
        self.trace = []

    def _w(self, key):
        return self.p.get(key).astype(np.float64)

    def forward(self, token: int, pos: int, want_logits: bool = True):
        """One full pass at `pos`; appends K/V, returns logits (or None)."""
        c, widened = self.c, self.widened
        x = self._w("embed")[token]
        if c.pos_encoding == "learned":
            x = _round(x + self._w("pos")[pos], widened)
        else:
            x = _round(x, widened)
        for layer in range(c.num_layers):
            x = self._layer(x, layer, pos)
        self.trace.append(x.copy())
        if not want_logits:
            return None
        xn = self._norm(x, "lnf_g", "lnf_b")
        logits = _round(xn @ self.p.lm_head().astype(np.float64), widened)
        return logits

    def _norm(self, x, gkey, bkey):
        g = self._w(gkey)[0]
        if self.c.norm_kind == "layernorm":
            return layernorm(x, g, self._w(bkey)[0], self.widened)
        return rmsnorm(x, g, self.widened)

    def _layer(self, x, layer, pos):
        c, widened = self.c, self.widened
        hd = c.head_dim
        xn = self._norm(x, f"ln1_g.{layer}", f"ln1_b.{layer}")
        q = _round(xn @ self._w(f"wq.{layer}") + self._w(f"bq.{layer}")[0], widened)
        k = _round(xn @ self._w(f"wk.{layer}") + self._w(f"bk.{layer}")[0], widened)
        v = _round(xn @ self._w(f"wv.{layer}") + self._w(f"bv.{layer}")[0], widened)
        if c.pos_encoding == "rotary":
            q = _round(rope_rotate(q, pos, hd), widened)
            k = _round(rope_rotate(k, pos, hd), widened)
        self.k_cache[layer].append(k)
        self.v_cache[layer].append(v)
        K = np.stack(self.k_cache[layer])      # (pos+1, d)
        V = np.stack(self.v_cache[layer])
        ctx = np.empty_like(q)
        scale = 1.0 / math.sqrt(hd)
        for h in range(c.num_heads):
            s = slice(h * hd, (h + 1) * hd)
            scores = _round(K[:, s] @ q[s], widened)
            probs = _round(softmax(scores * scale), widened)
            ctx[s] = probs @ V[:, s]
        ctx = _round(ctx, widened)
        attn = _round(ctx @ self._w(f"wo.{layer}"), widened)
        attn = _round(attn + self._w(f"bo.{layer}")[0], widened)
        x = _round(x + attn, widened)
        xn2 = self._norm(x, f"ln2_g.{layer}", f"ln2_b.{layer}")
        a1 = _round(xn2 @ self._w(f"fc1.{layer}") + self._w(f"bfc1.{layer}")[0], widened)
        a1 = _round(_ACT[c.activation](a1), widened)
        f2 = _round(a1 @ self._w(f"fc2.{layer}"), widened)
        f2 = _round(f2 + self._w(f"bfc2.{layer}")[0], widened)
        return _round(x + f2, widened)


def generate(config: ModelConfig, params: ParamStore, input_tokens,
             n_out: int, greedy_only: bool = True):
    """Ingest the context then decode n_out tokens greedily.
    Returns the emitted token ids."""
    dec = ReferenceDecoder(config, params)
    for pos in range(len(input_tokens) - 1):
        dec.forward(int(input_tokens[pos]), pos, want_logits=False)
    token = int(input_tokens[-1])
    out = []
    pos = len(input_tokens) - 1
    for _ in range(n_out):
        logits = dec.forward(token, pos)
        token = int(np.argmax(logits))
        out.append(token)
        pos += 1
        if config.eos_token_id is not None and token == config.eos_token_id:
            break
    return out
