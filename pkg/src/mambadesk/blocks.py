"""Mamba block variants and the token models built from them.

* :class:`MambaBlock` -- pre-norm residual block: input projection to two
  branches of width ``expand * d_in``, depthwise causal conv + SSM on one,
  SiLU gate from the other, output projection back to ``d_in``.
* :class:`BiMambaBlock` -- forward and time-reversed branches summed before
  the residual add.
* :class:`DecoderBlock` -- a Mamba block followed by a pre-norm
  cross-attention sublayer over encoder states.

No positional encoding is used anywhere; order information comes from the
recurrence and the convolution.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .numerics import ops
from .numerics.tensor import ContractError, DimensionError, NumericError, Tensor, emit
from .ssm import SCAN_METHODS, SsmParams, ssm_forward

VARIANTS = ("unidirectional", "bidirectional", "decoder")


@dataclass
class BlockConfig:
    d_in: int = 64
    n_state: int = 16
    expand: int = 4
    conv_width: int = 4
    dropout_p: float = 0.2
    variant: str = "unidirectional"
    n_heads: int = 4
    selective: bool = True
    scan: str = "fused"
    chunk: int = 64

    def __post_init__(self):
        if self.expand < 1:
            raise ContractError(f"expand must be >= 1, got {self.expand}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ContractError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "decoder" and self.d_in % self.n_heads:
            raise ContractError(f"d_in={self.d_in} is not divisible by n_heads={self.n_heads}")
        if self.conv_width < 1 or self.n_state < 1 or self.d_in < 1:
            raise ContractError("d_in, n_state and conv_width must be positive")
        if self.scan not in SCAN_METHODS:
            raise ContractError(f"scan must be one of {SCAN_METHODS}, got {self.scan!r}")

    @property
    def inner(self) -> int:
        return self.expand * self.d_in


@dataclass
class Mode:
    """Forward-pass mode: dropout is active only when ``training`` is set."""

    training: bool = False
    rng: np.random.Generator | None = None


EVAL = Mode()


def _param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


def causal_conv1d(u: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """Depthwise causal convolution over time.

    ``out[t, c] = sum_k w[k, c] * u[t - k, c] + bias[c]`` with zeros before t = 0.
    ``u`` is (..., L, C) and ``w`` is (K, C).
    """
    K, C = w.shape
    if K < 1:
        raise ContractError("conv kernel width must be >= 1")
    if u.shape[-1] != C or bias.shape != (C,):
        raise DimensionError(f"causal_conv1d: input {u.shape}, kernel {w.shape}, bias {bias.shape}")
    L = u.shape[-2]
    out = np.broadcast_to(bias.data, u.shape).copy()
    for k in range(min(K, L)):
        out[..., k:, :] += w.data[k] * u.data[..., : L - k, :]

    def vjp(g):
        gu = np.zeros(u.shape)
        gw = np.zeros(w.shape)
        for k in range(min(K, L)):
            gu[..., : L - k, :] += w.data[k] * g[..., k:, :]
            gw[k] = (g[..., k:, :] * u.data[..., : L - k, :]).reshape(-1, C).sum(axis=0)
        return gu, gw, g.reshape(-1, C).sum(axis=0)

    return emit("conv1d", out, (u, w, bias), vjp)


class MambaBlock:
    def __init__(self, cfg: BlockConfig, rng: np.random.Generator):
        d, e = cfg.d_in, cfg.inner
        self.cfg = cfg
        self.norm_g = _param(np.ones(d))
        self.norm_b = _param(np.zeros(d))
        self.in_proj = _param(rng.normal(0.0, d**-0.5, (2 * e, d)))
        bound = cfg.conv_width**-0.5
        self.conv_w = _param(rng.uniform(-bound, bound, (cfg.conv_width, e)))
        self.conv_b = _param(rng.uniform(-bound, bound, e))
        self.ssm = SsmParams.init(e, cfg.n_state, rng, selective=cfg.selective)
        self.out_proj = _param(rng.normal(0.0, e**-0.5, (d, e)))

    def named(self) -> dict[str, Tensor]:
        out = {
            "norm.gain": self.norm_g,
            "norm.bias": self.norm_b,
            "in_proj": self.in_proj,
            "conv.weight": self.conv_w,
            "conv.bias": self.conv_b,
        }
        out.update({f"ssm.{k}": v for k, v in self.ssm.named().items()})
        out["out_proj"] = self.out_proj
        return out


def mamba_inner(x: Tensor, blk: MambaBlock, mode: Mode = EVAL) -> Tensor:
    """Residual branch of the block (everything except the skip connection)."""
    cfg = blk.cfg
    h = ops.layer_norm(x, blk.norm_g, blk.norm_b)
    h = ops.dropout(ops.linear(h, blk.in_proj), cfg.dropout_p, mode.rng, mode.training)
    u, z = ops.split(h, [cfg.inner, cfg.inner], axis=-1)
    u = ops.silu(causal_conv1d(u, blk.conv_w, blk.conv_b))
    s = ssm_forward(u, blk.ssm, method=cfg.scan, chunk=cfg.chunk)
    gated = ops.mul(s, ops.silu(z))
    return ops.dropout(ops.linear(gated, blk.out_proj), cfg.dropout_p, mode.rng, mode.training)


def mamba_block_forward(x: Tensor, blk: MambaBlock, mode: Mode = EVAL) -> Tensor:
    """``x + out_proj(dropout(ssm(silu(conv(u))) * silu(z)))``; strictly causal."""
    return ops.add(x, mamba_inner(x, blk, mode))


class BiMambaBlock:
    def __init__(self, cfg: BlockConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.fwd = MambaBlock(cfg, rng)
        self.bwd = MambaBlock(cfg, rng)

    def named(self) -> dict[str, Tensor]:
        out = {f"fwd.{k}": v for k, v in self.fwd.named().items()}
        out.update({f"bwd.{k}": v for k, v in self.bwd.named().items()})
        return out


def bimamba_encoder_forward(x: Tensor, fwd: MambaBlock, bwd: MambaBlock, mode: Mode = EVAL) -> Tensor:
    """Sum of a forward branch and a time-reversed branch, plus the residual."""
    if fwd.cfg != bwd.cfg:
        raise ContractError("forward and backward branches need the same BlockConfig")
    axis = x.ndim - 2
    ahead = mamba_inner(x, fwd, mode)
    behind = ops.flip(mamba_inner(ops.flip(x, axis), bwd, mode), axis)
    return ops.add(x, ops.add(ahead, behind))


class CrossAttention:
    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        if d % n_heads:
            raise ContractError(f"width {d} is not divisible by {n_heads} heads")
        self.n_heads = n_heads
        std = d**-0.5
        self.wq = _param(rng.normal(0.0, std, (d, d)))
        self.wk = _param(rng.normal(0.0, std, (d, d)))
        self.wv = _param(rng.normal(0.0, std, (d, d)))
        self.wo = _param(rng.normal(0.0, std, (d, d)))

    def named(self) -> dict[str, Tensor]:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}


def _heads(t: Tensor, n_heads: int) -> Tensor:
    B, L, D = t.shape
    return ops.transpose(ops.reshape(t, (B, L, n_heads, D // n_heads)), (0, 2, 1, 3))


def cross_attention_forward(q_in: Tensor, enc: Tensor, ca: CrossAttention) -> Tensor:
    """Multi-head scaled dot-product attention of ``q_in`` (..., Lq, D) over ``enc`` (..., Lk, D)."""
    if q_in.shape[-1] != enc.shape[-1] or q_in.shape[-1] != ca.wq.shape[0]:
        raise DimensionError(f"cross attention widths: queries {q_in.shape}, keys {enc.shape}")
    unbatched = q_in.ndim == 2
    if unbatched:
        q_in = ops.reshape(q_in, (1,) + q_in.shape)
        enc = ops.reshape(enc, (1,) + enc.shape)
    B, Lq, D = q_in.shape
    H = ca.n_heads
    q = _heads(ops.linear(q_in, ca.wq), H)
    k = _heads(ops.linear(enc, ca.wk), H)
    v = _heads(ops.linear(enc, ca.wv), H)
    scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), (D // H) ** -0.5)
    ctx = ops.matmul(ops.softmax(scores, axis=-1), v)
    ctx = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (B, Lq, D))
    out = ops.linear(ctx, ca.wo)
    return ops.reshape(out, (Lq, D)) if unbatched else out


class DecoderBlock:
    def __init__(self, cfg: BlockConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.mamba = MambaBlock(cfg, rng)
        self.ca_norm_g = _param(np.ones(cfg.d_in))
        self.ca_norm_b = _param(np.zeros(cfg.d_in))
        self.ca = CrossAttention(cfg.d_in, cfg.n_heads, rng)

    def named(self) -> dict[str, Tensor]:
        out = {f"mamba.{k}": v for k, v in self.mamba.named().items()}
        out["ca_norm.gain"] = self.ca_norm_g
        out["ca_norm.bias"] = self.ca_norm_b
        out.update({f"cross_attn.{k}": v for k, v in self.ca.named().items()})
        return out


def decoder_block_forward(y_in: Tensor, enc: Tensor, blk: DecoderBlock, mode: Mode = EVAL) -> Tensor:
    """``z = mamba(y_in); z + dropout(cross_attention(norm(z), enc))``."""
    z = mamba_block_forward(y_in, blk.mamba, mode)
    a = cross_attention_forward(ops.layer_norm(z, blk.ca_norm_g, blk.ca_norm_b), enc, blk.ca)
    return ops.add(z, ops.dropout(a, blk.cfg.dropout_p, mode.rng, mode.training))


def block_forward(x: Tensor, blk, mode: Mode = EVAL, enc: Tensor | None = None) -> Tensor:
    if isinstance(blk, BiMambaBlock):
        return bimamba_encoder_forward(x, blk.fwd, blk.bwd, mode)
    if isinstance(blk, DecoderBlock):
        if enc is None:
            raise ContractError("decoder block needs encoder states")
        return decoder_block_forward(x, enc, blk, mode)
    return mamba_block_forward(x, blk, mode)


def make_block(cfg: BlockConfig, rng: np.random.Generator):
    return {"unidirectional": MambaBlock, "bidirectional": BiMambaBlock, "decoder": DecoderBlock}[cfg.variant](cfg, rng)


# -- token models -----------------------------------------------------------

ARCHS = ("uni", "bi", "seq2seq")


@dataclass
class ModelConfig:
    """Architecture of a token model; serialized into checkpoint headers."""

    arch: str = "bi"
    vocab_size: int = 16
    n_layers: int = 2
    n_dec_layers: int = 2
    d_in: int = 64
    n_state: int = 16
    expand: int = 4
    conv_width: int = 4
    dropout_p: float = 0.2
    n_heads: int = 4
    selective: bool = True
    scan: str = "fused"
    chunk: int = 64

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ContractError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.vocab_size < 4:
            raise ContractError("vocab_size must be >= 4")
        self.block("decoder" if self.arch == "seq2seq" else "unidirectional")

    def block(self, variant: str) -> BlockConfig:
        return BlockConfig(
            d_in=self.d_in,
            n_state=self.n_state,
            expand=self.expand,
            conv_width=self.conv_width,
            dropout_p=self.dropout_p,
            variant=variant,
            n_heads=self.n_heads,
            selective=self.selective,
            scan=self.scan,
            chunk=self.chunk,
        )

    def to_text(self) -> str:
        return "".join(f"model.{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            key = key.removeprefix("model.")
            if key not in types:
                raise ContractError(f"unknown model key {key!r} in checkpoint header")
            kw[key] = _coerce(val, types[key])
        return cls(**kw)


def _coerce(val: str, typ) -> object:
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        if val.lower() in ("true", "1", "yes"):
            return True
        if val.lower() in ("false", "0", "no"):
            return False
        raise ContractError(f"not a boolean: {val!r}")
    if typ == "int":
        return int(val)
    if typ == "float":
        return float(val)
    return val


class TokenModel:
    """Embedding, a stack of blocks, final norm and a linear head.

    ``arch="uni"``/``"bi"`` are encoder-only models read out at chosen
    positions; ``arch="seq2seq"`` adds a decoder stack of
    :class:`DecoderBlock` over a bidirectional encoder.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, V = cfg.d_in, cfg.vocab_size
        enc_variant = "unidirectional" if cfg.arch == "uni" else "bidirectional"
        self.embed = _param(rng.normal(0.0, 1.0, (V, d)))
        self.layers = [make_block(cfg.block(enc_variant), rng) for _ in range(cfg.n_layers)]
        self.norm_g = _param(np.ones(d))
        self.norm_b = _param(np.zeros(d))
        self.dec_embed = None
        self.dec_layers = []
        if cfg.arch == "seq2seq":
            self.dec_embed = _param(rng.normal(0.0, 1.0, (V, d)))
            self.dec_layers = [make_block(cfg.block("decoder"), rng) for _ in range(cfg.n_dec_layers)]
            self.dec_norm_g = _param(np.ones(d))
            self.dec_norm_b = _param(np.zeros(d))
        self.head = _param(rng.normal(0.0, d**-0.5, (V, d)))
        self.head_b = _param(np.zeros(V))

    def named(self) -> dict[str, Tensor]:
        out = {"embed": self.embed}
        for i, blk in enumerate(self.layers):
            out.update({f"layers.{i}.{k}": v for k, v in blk.named().items()})
        out["norm.gain"] = self.norm_g
        out["norm.bias"] = self.norm_b
        if self.cfg.arch == "seq2seq":
            out["dec_embed"] = self.dec_embed
            for i, blk in enumerate(self.dec_layers):
                out.update({f"dec_layers.{i}.{k}": v for k, v in blk.named().items()})
            out["dec_norm.gain"] = self.dec_norm_g
            out["dec_norm.bias"] = self.dec_norm_b
        out["head.weight"] = self.head
        out["head.bias"] = self.head_b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named().values())

    def encode(self, ids: np.ndarray, mode: Mode = EVAL) -> Tensor:
        h = ops.embedding(self.embed, ids)
        for i, blk in enumerate(self.layers):
            h = _tagged(block_forward, i, h, blk, mode)
        return ops.layer_norm(h, self.norm_g, self.norm_b)

    def decode(self, dec_ids: np.ndarray, enc: Tensor, mode: Mode = EVAL) -> Tensor:
        h = ops.embedding(self.dec_embed, dec_ids)
        for i, blk in enumerate(self.dec_layers):
            h = _tagged(block_forward, i, h, blk, mode, enc)
        return ops.layer_norm(h, self.dec_norm_g, self.dec_norm_b)

    def logits(self, hidden: Tensor) -> Tensor:
        return ops.linear(hidden, self.head, self.head_b)

    def forward(self, ids: np.ndarray, dec_ids: np.ndarray | None = None, mode: Mode = EVAL) -> Tensor:
        """Per-position logits: encoder positions, or decoder positions for seq2seq."""
        enc = self.encode(ids, mode)
        if self.cfg.arch == "seq2seq":
            if dec_ids is None:
                raise ContractError("seq2seq model needs decoder inputs")
            return self.logits(self.decode(dec_ids, enc, mode))
        return self.logits(enc)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = self.named()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ContractError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, t in own.items():
            if state[k].shape != t.shape:
                raise DimensionError(f"{k}: checkpoint shape {state[k].shape} != model shape {t.shape}")
            t.data = np.array(state[k], dtype=np.float64)
            t.data.flags.writeable = False


def _tagged(fn, index, *args):
    try:
        return fn(*args)
    except NumericError as exc:
        raise NumericError(f"block {index}: {exc.stage}") from exc


def save_model(path, model: TokenModel) -> None:
    from .numerics import checkpoint

    checkpoint.save(path, model.state(), header=model.cfg.to_text())


def load_model(path) -> TokenModel:
    from .numerics import checkpoint

    state, header = checkpoint.load(path)
    model = TokenModel(ModelConfig.from_text(header))
    model.load_state(state)
    return model
