"""A small pre-LN Vision Transformer with visual and key-value prompt hooks.

Sequence layout inside every encoder layer::

    [CLS | visual prompts (M) | patch tokens (m)]

Visual prompts are re-inserted at each layer (deep prompting): whatever the
previous layer produced at the prompt positions is dropped.  Key-value
prompts are concatenated to the projected keys and values of each layer and
never to the queries, so the attention output keeps one row per input token.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from . import tensor as T
from .config import ConfigError, ModelConfig
from .prompts import PromptSet, init_prompts
from .serialize import pack_tensors
from .tensor import Tensor, DimensionError


class Backbone:
    """Frozen encoder weights: patch projection, CLS, positions, layers, final LN."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def layer(self, i: int) -> dict[str, Tensor]:
        prefix = f"layers/{i}/"
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = np.zeros_like(p.data) if flag else None

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {f"backbone/{k}": v.data for k, v in self.params.items()}

    def to_bytes(self) -> bytes:
        return pack_tensors(self.named_arrays())

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


class Head:
    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight, self.bias = weight, bias

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {"head/weight": self.weight.data, "head/bias": self.bias.data}

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


def init_backbone(config: ModelConfig, seed: int) -> Backbone:
    config.validate()
    d, p, c = config.embed_dim, config.patch_size, config.channels
    hidden = d * config.ffn_mult
    rng = T.make_rng(np.random.SeedSequence([seed, 1]))
    with T.precision(config.precision):
        def w(*shape):
            # fan-in scaling keeps per-layer gain independent of width (0.02 is tuned for d=768)
            return Tensor(T.trunc_normal(rng, shape, std=1.0 / math.sqrt(shape[0])), requires_grad=True)

        def emb(*shape):
            return Tensor(T.trunc_normal(rng, shape), requires_grad=True)

        def zeros(*shape):
            return T.zeros(shape, requires_grad=True)

        def ones(*shape):
            return T.ones(shape, requires_grad=True)

        params = {
            "patch/weight": w(c * p * p, d),
            "patch/bias": zeros(d),
            "cls": emb(1, d),
            "pos": emb(1 + config.num_patches, d),
            "norm/weight": ones(d),
            "norm/bias": zeros(d),
        }
        for i in range(config.num_layers):
            pre = f"layers/{i}/"
            params.update({
                pre + "ln1/weight": ones(d), pre + "ln1/bias": zeros(d),
                pre + "q/weight": w(d, d), pre + "q/bias": zeros(d),
                pre + "k/weight": w(d, d), pre + "k/bias": zeros(d),
                pre + "v/weight": w(d, d), pre + "v/bias": zeros(d),
                pre + "out/weight": w(d, d), pre + "out/bias": zeros(d),
                pre + "ln2/weight": ones(d), pre + "ln2/bias": zeros(d),
                pre + "fc1/weight": w(d, hidden), pre + "fc1/bias": zeros(hidden),
                pre + "fc2/weight": w(hidden, d), pre + "fc2/bias": zeros(d),
            })
    for name, t in params.items():
        t.name = f"backbone/{name}"
    return Backbone(config, params)


def init_head(config: ModelConfig, seed: int) -> Head:
    rng = T.make_rng(np.random.SeedSequence([seed, 2]))
    with T.precision(config.precision):
        weight = Tensor(T.trunc_normal(rng, (config.embed_dim, config.num_classes)), requires_grad=True,
                        name="head/weight")
        bias = T.zeros((config.num_classes,), requires_grad=True)
        bias.name = "head/bias"
    return Head(weight, bias)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, m, C*patch*patch), patches in row-major grid order."""
    b, c, h, w = images.shape
    x = images.reshape(b, c, h // patch, patch, w // patch, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, (h // patch) * (w // patch), c * patch * patch)


def patch_embed(images, backbone: Backbone) -> Tensor:
    """Patch projection, CLS prepended, positions added.

    Accepts one image (C, H, W) -> (1+m, d) or a batch (B, C, H, W) -> (B, 1+m, d).
    """
    cfg = backbone.config
    arr = np.asarray(images, dtype=backbone.params["cls"].dtype)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if arr.ndim != 4 or arr.shape[1:] != expected:
        raise DimensionError(f"image shape {arr.shape[-3:]} does not match config {expected}")
    P = backbone.params
    patches = Tensor(patchify(arr, cfg.patch_size))
    emb = patches @ P["patch/weight"] + P["patch/bias"]
    cls = T.broadcast_to(T.reshape(P["cls"], (1, 1, cfg.embed_dim)), (arr.shape[0], 1, cfg.embed_dim))
    z = T.concat([cls, emb], axis=1) + P["pos"]
    if single:
        z = T.take(z, 0, axis=0)
    return z


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, s, d = x.shape
    return T.transpose(T.reshape(x, (b, s, heads, d // heads)), (0, 2, 1, 3))


def msa_forward(z: Tensor, layer: dict[str, Tensor], config: ModelConfig,
                kv_prompts: tuple[Tensor, Tensor] | None = None,
                keep: np.ndarray | None = None,
                attn_out: list | None = None, gate: Tensor | None = None) -> Tensor:
    """Multi-head self-attention with optional key-value prompts.

    ``z`` is (B, s, d) or (s, d).  ``keep`` is a constant boolean mask over
    the s input key positions (broadcastable to (B, s)); prompt key columns
    are always kept.  ``gate`` is an optional (B, s) tensor of per-key
    attention weights (see :func:`tensor.softmax`).  When ``attn_out`` is a
    list, the attention probabilities (B, H, s, s + M_kv) are appended to it.
    """
    single = z.ndim == 2
    if single:
        z = T.reshape(z, (1,) + z.shape)
    b, s, d = z.shape
    h = config.num_heads
    q = z @ layer["q/weight"] + layer["q/bias"]
    k = z @ layer["k/weight"] + layer["k/bias"]
    v = z @ layer["v/weight"] + layer["v/bias"]

    if keep is not None:
        keep = np.atleast_2d(np.asarray(keep, dtype=bool))
        if keep.shape[-1] != s:
            raise DimensionError(f"keep mask covers {keep.shape[-1]} keys, sequence has {s}")
    if gate is not None and gate.shape[-1] != s:
        raise DimensionError(f"gate covers {gate.shape[-1]} keys, sequence has {s}")
    if kv_prompts is not None and kv_prompts[0].shape[0] > 0:
        pk, pv = kv_prompts
        if pk.shape != pv.shape or pk.ndim != 2 or pk.shape[1] != d:
            raise DimensionError(f"key/value prompt shapes {pk.shape}, {pv.shape} incompatible with d={d}")
        mkv = pk.shape[0]
        pk = T.broadcast_to(T.reshape(pk, (1, mkv, d)), (b, mkv, d))
        pv = pk if kv_prompts[1] is kv_prompts[0] else T.broadcast_to(T.reshape(pv, (1, mkv, d)), (b, mkv, d))
        prompt_keep = np.ones((1 if keep is None else keep.shape[0], mkv), dtype=bool)
        prompt_gate = None if gate is None else T.ones((gate.shape[0], mkv), dtype=gate.dtype)
        if config.prompt.kv_placement == "before":
            k, v = T.concat([pk, k], axis=1), T.concat([pv, v], axis=1)
            if keep is not None:
                keep = np.concatenate([prompt_keep, keep], axis=1)
            if gate is not None:
                gate = T.concat([prompt_gate, gate], axis=1)
        else:
            k, v = T.concat([k, pk], axis=1), T.concat([v, pv], axis=1)
            if keep is not None:
                keep = np.concatenate([keep, prompt_keep], axis=1)
            if gate is not None:
                gate = T.concat([gate, prompt_gate], axis=1)

    qh, kh, vh = _split_heads(q, h), _split_heads(k, h), _split_heads(v, h)
    denom = config.head_dim if config.attn_scale == "head" else config.embed_dim
    logits = T.scale(qh @ T.transpose(kh, (0, 1, 3, 2)), 1.0 / math.sqrt(denom))
    if gate is not None:
        gate = T.reshape(gate, (gate.shape[0], 1, 1, gate.shape[1]))
    attn = T.softmax(logits, None if keep is None else keep[:, None, None, :], gate)
    if attn_out is not None:
        attn_out.append(attn.data)
    out = T.reshape(T.transpose(attn @ vh, (0, 2, 1, 3)), (b, s, d))
    out = out @ layer["out/weight"] + layer["out/bias"]
    if single:
        out = T.take(out, 0, axis=0)
    return out


def encoder_layer(z: Tensor, layer: dict[str, Tensor], config: ModelConfig,
                  kv_prompts: tuple[Tensor, Tensor] | None = None,
                  keep: np.ndarray | None = None, attn_out: list | None = None,
                  gate: Tensor | None = None) -> Tensor:
    """Pre-LN block: z + MSA(LN(z)), then + FFN(LN(.))."""
    x = z + msa_forward(T.layer_norm(z, layer["ln1/weight"], layer["ln1/bias"]), layer, config,
                        kv_prompts, keep, attn_out, gate)
    y = T.layer_norm(x, layer["ln2/weight"], layer["ln2/bias"])
    y = T.gelu(y @ layer["fc1/weight"] + layer["fc1/bias"]) @ layer["fc2/weight"] + layer["fc2/bias"]
    return x + y


def _masked_prompt(prompt: Tensor, tok, seg, segments: int) -> Tensor:
    """rho_k * P_k with per-segment scaling; tok/seg are arrays or probe tensors."""
    m, d = prompt.shape
    p3 = T.reshape(prompt, (m, segments, d // segments))
    if isinstance(tok, Tensor) or isinstance(seg, Tensor):
        tok = tok if isinstance(tok, Tensor) else Tensor(tok)
        seg = seg if isinstance(seg, Tensor) else Tensor(seg)
        lead = tok.shape[:-1]
        t4 = T.reshape(tok, lead + (m, 1, 1))
        s4 = T.reshape(seg, seg.shape[:-2] + (m, segments, 1))
        out = p3 * t4 * s4
        return T.reshape(out, out.shape[:-2] + (d,))
    factor = (np.asarray(tok)[:, None] * np.asarray(seg))[:, :, None].astype(prompt.dtype)
    return T.reshape(p3 * factor, (m, d))


def _prompt_keep(tok, seg) -> np.ndarray:
    """Prompt positions that stay visible to attention (mask value non-zero)."""
    t = tok.data if isinstance(tok, Tensor) else np.asarray(tok)
    s = seg.data if isinstance(seg, Tensor) else np.asarray(seg)
    return (t != 0) & (s != 0).any(axis=-1)


def forward(images, backbone: Backbone, head: Head, prompts: PromptSet,
            probes: dict | None = None, attn_out: list | None = None,
            return_features: bool = False):
    """Logits (B, num_classes) for a batch of images.

    ``probes`` optionally maps ``"token"`` / ``"segment"`` to per-layer lists
    of mask tensors used instead of the stored masks (importance probing).
    A token probe scales its prompt embedding and also weights the prompt's
    attention column, so the gradient sees the token leaving the attention
    rather than only its rescaling, which pre-LN layers normalise away.
    """
    cfg = backbone.config
    if prompts.num_layers != cfg.num_layers or prompts.embed_dim != cfg.embed_dim:
        raise ConfigError("prompt set does not match model config")
    arr = np.asarray(images)
    single = arr.ndim == 3
    z = patch_embed(arr[None] if single else arr, backbone)
    b = z.shape[0]
    m_vis = prompts.visual_len
    R = prompts.config.segments
    for i in range(cfg.num_layers):
        keep = gate = None
        if m_vis:
            tok = probes["token"][i] if probes else prompts.token_masks[i]
            seg = probes["segment"][i] if probes else prompts.segment_masks[i]
            if probes is None and prompts.token_masks[i].all() and prompts.segment_masks[i].all():
                p = prompts.visual[i]
            else:
                p = _masked_prompt(prompts.visual[i], tok, seg, R)
            pk = _prompt_keep(tok, seg)
            if not pk.all():
                rows = pk.reshape(-1, m_vis)
                keep = np.concatenate([np.ones((rows.shape[0], 1), bool), rows,
                                       np.ones((rows.shape[0], cfg.num_patches), bool)], axis=1)
            if probes:
                t = tok if isinstance(tok, Tensor) else Tensor(np.asarray(tok, dtype=p.dtype))
                t = T.reshape(t, (-1, m_vis)) if t.ndim == 1 else t
                rows = t.shape[0]
                gate = T.concat([T.ones((rows, 1), dtype=t.dtype), t,
                                 T.ones((rows, cfg.num_patches), dtype=t.dtype)], axis=1)
            if p.ndim == 2:
                p = T.broadcast_to(T.reshape(p, (1, m_vis, cfg.embed_dim)), (b, m_vis, cfg.embed_dim))
            if i == 0:
                z = T.concat([T.slice_rows(z, 0, 1, axis=1), p, T.slice_rows(z, 1, z.shape[1], axis=1)], axis=1)
            else:
                z = T.concat([T.slice_rows(z, 0, 1, axis=1), p,
                              T.slice_rows(z, 1 + m_vis, z.shape[1], axis=1)], axis=1)
        kv = (prompts.kv_key[i], prompts.kv_value[i]) if prompts.kv_len else None
        z = encoder_layer(z, backbone.layer(i), cfg, kv, keep, attn_out, gate)
    P = backbone.params
    feats = T.layer_norm(T.take(z, 0, axis=1), P["norm/weight"], P["norm/bias"])
    logits = head(feats)
    if single:
        logits = T.take(logits, 0, axis=0)
        feats = T.take(feats, 0, axis=0)
    return (logits, feats) if return_features else logits


class PromptedViT:
    """Frozen backbone + trainable prompts + linear head."""

    def __init__(self, config: ModelConfig, backbone: Backbone, head: Head, prompts: PromptSet,
                 train_head: bool = True):
        self.config = config
        self.backbone = backbone
        self.head = head
        self.prompts = prompts
        self.train_head = train_head

    @classmethod
    def create(cls, config: ModelConfig, backbone: Backbone | None = None, seed: int | None = None,
               train_head: bool = True) -> "PromptedViT":
        config.validate()
        seed = config.seed if seed is None else seed
        if backbone is None:
            backbone = init_backbone(config, seed)
            backbone.set_trainable(False)
        return cls(config, backbone, init_head(config, seed), init_prompts(config, seed), train_head)

    @property
    def dtype(self):
        return self.backbone.params["cls"].dtype

    def freeze_backbone(self) -> None:
        self.backbone.set_trainable(False)

    def trainable(self) -> list[Tensor]:
        params = list(self.prompts.parameters())
        if self.train_head:
            params += self.head.parameters()
        return params

    def __call__(self, images, **kw):
        return forward(images, self.backbone, self.head, self.prompts, **kw)

    def features(self, images) -> np.ndarray:
        return forward(images, self.backbone, self.head, self.prompts, return_features=True)[1].data

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {**self.backbone.named_arrays(), **self.head.named_arrays(), **self.prompts.named_arrays()}
