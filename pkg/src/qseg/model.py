"""Promptable segmentation model: quantized ViT-style image encoder, float
prompt encoder, quantized mask decoder.

Only matrix multiplications and convolutions in the encoder and decoder
carry quantizer nodes (one input-activation quantizer and one weight
quantizer each); softmax, layernorm, GELU, biases and residual adds stay
in float. The prompt encoder has no quantizer nodes at all.

Three forward modes:
  * ``float`` - quantizers bypassed entirely,
  * ``qat``   - fake-quant nodes active (trainable when a tape is open),
  * ``int``   - true int8 kernels; bit-identical to ``qat`` for frozen scales.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import quant, tensor as T
from .errors import ConfigurationError, ShapeError
from .quant import QuantizerState
from .tensor import Tensor

MODES = ("float", "qat", "int")


@dataclass
class ModelConfig:
    image_size: int = 256
    patch_size: int = 16
    embed_dim: int = 64
    encoder_depth: int = 4
    num_heads: int = 4
    decoder_dim: int = 64
    mask_resolution: int = 256
    mlp_ratio: int = 2
    quantize_encoder: bool = True
    quantize_decoder: bool = True

    def validate(self):
        if self.image_size % self.patch_size:
            raise ConfigurationError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads:
            raise ConfigurationError("embed_dim must be divisible by num_heads")
        if self.decoder_dim % self.num_heads or self.decoder_dim % 4:
            raise ConfigurationError("decoder_dim must be divisible by num_heads and 4")
        if self.mask_resolution != self.image_size:
            raise ConfigurationError("mask_resolution must equal image_size")
        return self

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


def _fourier_features(coords: np.ndarray, freq: np.ndarray) -> np.ndarray:
    """coords (N,2) in [0,1] -> (N, 2*freq.shape[0]) sin/cos features."""
    ang = 2.0 * np.pi * coords @ freq.T
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).astype(np.float32)


class PromptSegModel:
    """Parameter registry plus forward passes for all three modes."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config.validate()
        self.params: dict[str, Tensor] = {}
        self.quantizers: dict[str, QuantizerState] = {}
        self._build(np.random.default_rng(seed))

    # ----------------------------------------------------------- construction

    def _param(self, name, array, trainable=True):
        t = Tensor(array, requires_grad=trainable)
        self.params[name] = t
        return t

    def _linear_params(self, rng, name, fan_in, fan_out, quantized):
        std = math.sqrt(2.0 / (fan_in + fan_out))
        self._param(f"{name}.w", rng.normal(0.0, std, (fan_in, fan_out)).astype(np.float32))
        self._param(f"{name}.b", np.zeros(fan_out, dtype=np.float32))
        if quantized:
            self._register_quant_pair(name)

    def _ln_params(self, name, dim):
        self._param(f"{name}.g", np.ones(dim, dtype=np.float32))
        self._param(f"{name}.b", np.zeros(dim, dtype=np.float32))

    def _register_quant_pair(self, node):
        self.quantizers[f"{node}.in"] = QuantizerState(f"{node}.in")
        self.quantizers[f"{node}.w"] = QuantizerState(f"{node}.w")

    def _register_act_state(self, node):
        self.quantizers[node] = QuantizerState(node)

    def _attn_params(self, rng, prefix, dim):
        for p in ("wq", "wk", "wv", "wo"):
            self._linear_params(rng, f"{prefix}.{p}", dim, dim, quantized=True)
        for node in ("qk.q", "qk.k", "pv.p", "pv.v"):
            self._register_act_state(f"{prefix}.{node}")

    def _build(self, rng):
        c = self.config
        d, dd = c.embed_dim, c.decoder_dim
        k = c.patch_size
        # image encoder
        std = math.sqrt(2.0 / (3 * k * k + d))
        self._param("enc.patch.w", rng.normal(0.0, std, (d, 3, k, k)).astype(np.float32))
        self._param("enc.patch.b", np.zeros(d, dtype=np.float32))
        self._register_quant_pair("enc.patch")
        hidden = c.mlp_ratio * d
        for i in range(c.encoder_depth):
            b = f"enc.blk{i}"
            self._ln_params(f"{b}.ln1", d)
            self._attn_params(rng, f"{b}.attn", d)
            self._ln_params(f"{b}.ln2", d)
            self._linear_params(rng, f"{b}.mlp.fc1", d, hidden, quantized=True)
            self._linear_params(rng, f"{b}.mlp.fc2", hidden, d, quantized=True)
        self._ln_params("enc.ln_out", d)
        # prompt encoder (float only, no quantizers)
        self._param("prompt.freq", rng.normal(size=(d // 2, 2)).astype(np.float32),
                    trainable=False)
        self._param("prompt.corner", (0.02 * rng.normal(size=(2, d))).astype(np.float32))
        # mask decoder
        self._linear_params(rng, "dec.neck", d, dd, quantized=True)
        self._linear_params(rng, "dec.proj", d, dd, quantized=True)
        self._ln_params("dec.ln1", dd)
        self._attn_params(rng, "dec.t2i", dd)
        self._ln_params("dec.ln2", dd)
        hidden_d = c.mlp_ratio * dd
        self._linear_params(rng, "dec.mlp.fc1", dd, hidden_d, quantized=True)
        self._linear_params(rng, "dec.mlp.fc2", hidden_d, dd, quantized=True)
        self._ln_params("dec.ln3", dd)
        self._attn_params(rng, "dec.i2t", dd)
        self._linear_params(rng, "dec.up1", dd, dd // 2 * 4, quantized=True)
        self._linear_params(rng, "dec.up2", dd // 2, dd // 4 * 4, quantized=True)
        self._linear_params(rng, "dec.hyper", dd, dd // 4, quantized=True)
        self._register_act_state("dec.head.f")
        self._register_act_state("dec.head.h")
        self._calibrate_weight_quantizers()
        self._dense_pe = None

    def _calibrate_weight_quantizers(self):
        for node, state in self.quantizers.items():
            if node.endswith(".w"):
                quant.calibrate(state, self.params[node])

    # ------------------------------------------------------------- registries

    def param_names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def scale_names(self, prefix: str = "") -> list[str]:
        return [n for n in self.quantizers if n.startswith(prefix)]

    def trainable_tensors(self, prefixes) -> dict[str, Tensor]:
        """Parameters plus quantizer scales under the given name prefixes."""
        out = {}
        for name, t in self.params.items():
            if t.requires_grad and any(name.startswith(p) for p in prefixes):
                out[name] = t
        for node, st in self.quantizers.items():
            if any(node.startswith(p) for p in prefixes):
                out[f"qz.{node}"] = st.scale
        return out

    def param_count(self, prefix: str = "") -> int:
        return sum(t.size for n, t in self.params.items() if n.startswith(prefix))

    def snapshot(self) -> dict:
        return {
            "params": {n: t.data.copy() for n, t in self.params.items()},
            "scales": {n: st.scale.data.copy() for n, st in self.quantizers.items()},
            "calibrated": {n: st.calibrated for n, st in self.quantizers.items()},
        }

    def restore(self, snap: dict):
        for n, arr in snap["params"].items():
            self.params[n].data = arr.copy()
        for n, arr in snap["scales"].items():
            self.quantizers[n].scale.data = arr.copy()
        for n, flag in snap["calibrated"].items():
            self.quantizers[n].calibrated = flag
        self._dense_pe = None

    def clone(self) -> "PromptSegModel":
        """Independent copy with identical parameters, scales and flags."""
        other = PromptSegModel(ModelConfig.from_dict(self.config.to_dict()), seed=0)
        other.restore(self.snapshot())
        return other

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None
        for st in self.quantizers.values():
            st.scale.grad = None

    # ------------------------------------------------------------ primitives

    def _int_weight(self, node) -> quant.QuantTensor:
        return quant.quantize_int(self.quantizers[f"{node}.w"], self.params[f"{node}.w"])

    def _linear(self, x: Tensor, node: str, mode: str, quantized: bool) -> Tensor:
        w, b = self.params[f"{node}.w"], self.params[f"{node}.b"]
        if mode == "float" or not quantized:
            y = T.matmul(x, w)
        elif mode == "qat":
            y = quant.quant_matmul(x, w, self.quantizers[f"{node}.in"],
                                   self.quantizers[f"{node}.w"])
        else:
            qx = quant.quantize_int(self.quantizers[f"{node}.in"], x)
            y = Tensor(quant.int8_matmul(qx, self._int_weight(node)))
        return T.add(y, b)

    def _act_matmul(self, a: Tensor, b: Tensor, node_a: str, node_b: str,
                    mode: str, quantized: bool) -> Tensor:
        if mode == "float" or not quantized:
            return T.matmul(a, b)
        if mode == "qat":
            return quant.quant_matmul(a, b, self.quantizers[node_a], self.quantizers[node_b])
        qa = quant.quantize_int(self.quantizers[node_a], a)
        qb = quant.quantize_int(self.quantizers[node_b], b)
        return Tensor(quant.int8_matmul(qa, qb))

    def _split_heads(self, x: Tensor, dim: int) -> Tensor:
        h = self.config.num_heads
        t = x.shape[0]
        return T.transpose(T.reshape(x, (t, h, dim // h)), (1, 0, 2))

    def _merge_heads(self, x: Tensor, dim: int) -> Tensor:
        t = x.shape[1]
        return T.reshape(T.transpose(x, (1, 0, 2)), (t, dim))

    def _attention(self, q_src: Tensor, kv_src: Tensor, prefix: str, dim: int,
                   mode: str, quantized: bool) -> Tensor:
        """Multi-head attention with quantizer placement: Q/K/V projections,
        QK^T, softmax(float), re-quantized P times quantized V, out proj."""
        q = self._split_heads(self._linear(q_src, f"{prefix}.wq", mode, quantized), dim)
        k = self._split_heads(self._linear(kv_src, f"{prefix}.wk", mode, quantized), dim)
        v = self._split_heads(self._linear(kv_src, f"{prefix}.wv", mode, quantized), dim)
        kt = T.transpose(k, (0, 2, 1))
        logits = self._act_matmul(q, kt, f"{prefix}.qk.q", f"{prefix}.qk.k",
                                  mode, quantized)
        logits = T.mul(logits, 1.0 / math.sqrt(dim // self.config.num_heads))
        p = T.softmax(logits, axis=-1)
        ctx = self._act_matmul(p, v, f"{prefix}.pv.p", f"{prefix}.pv.v",
                               mode, quantized)
        return self._linear(self._merge_heads(ctx, dim), f"{prefix}.wo", mode, quantized)

    def _mlp(self, x: Tensor, prefix: str, mode: str, quantized: bool) -> Tensor:
        h = T.gelu(self._linear(x, f"{prefix}.fc1", mode, quantized))
        return self._linear(h, f"{prefix}.fc2", mode, quantized)

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return T.layernorm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    # ---------------------------------------------------------- image encoder

    def encode_image(self, image, mode: str = "qat") -> Tensor:
        """(3, S, S) preprocessed image -> (embed_dim, grid, grid) embedding."""
        if mode not in MODES:
            raise ConfigurationError(f"unknown mode {mode!r}")
        c = self.config
        x = T.as_tensor(image)
        if x.shape != (3, c.image_size, c.image_size):
            raise ShapeError(f"encode_image expects (3,{c.image_size},{c.image_size}), "
                             f"got {x.shape}")
        qe = c.quantize_encoder
        w, b = self.params["enc.patch.w"], self.params["enc.patch.b"]
        if mode == "float" or not qe:
            emb = T.conv2d(x, w, stride=c.patch_size)
        elif mode == "qat":
            emb = quant.quant_conv2d(x, w, c.patch_size, 0,
                                     self.quantizers["enc.patch.in"],
                                     self.quantizers["enc.patch.w"])
        else:
            qx = quant.quantize_int(self.quantizers["enc.patch.in"], x)
            qw = self._int_weight("enc.patch")
            emb = Tensor(quant.int8_conv2d(qx, qw, c.patch_size, 0))
        emb = T.add(emb, T.reshape(b, (c.embed_dim, 1, 1)))
        tokens = T.transpose(T.reshape(emb, (c.embed_dim, c.grid * c.grid)), (1, 0))
        tokens = T.add(tokens, Tensor(self._dense_positional()))
        for i in range(c.encoder_depth):
            blk = f"enc.blk{i}"
            n1 = self._ln(tokens, f"{blk}.ln1")
            a = self._attention(n1, n1, f"{blk}.attn", c.embed_dim, mode, qe)
            tokens = T.add(tokens, a)
            m = self._mlp(self._ln(tokens, f"{blk}.ln2"), f"{blk}.mlp", mode, qe)
            tokens = T.add(tokens, m)
        tokens = self._ln(tokens, "enc.ln_out")
        return T.reshape(T.transpose(tokens, (1, 0)), (c.embed_dim, c.grid, c.grid))

    # --------------------------------------------------------- prompt encoder

    def encode_prompt(self, box, image_size: int | None = None) -> Tensor:
        """Box corners -> (2, embed_dim) tokens: Fourier positional part plus
        learned corner-type embeddings. Pure float path."""
        size = float(image_size or self.config.image_size)
        x1, y1, x2, y2 = box
        coords = np.array([[x1 / size, y1 / size], [x2 / size, y2 / size]],
                          dtype=np.float32)
        pe = _fourier_features(coords, self.params["prompt.freq"].data)
        return T.add(Tensor(pe), self.params["prompt.corner"])

    def _dense_positional(self) -> np.ndarray:
        if self._dense_pe is None:
            g = self.config.grid
            ax = (np.arange(g, dtype=np.float32) + 0.5) / g
            yy, xx = np.meshgrid(ax, ax, indexing="ij")
            coords = np.stack([xx.ravel(), yy.ravel()], axis=-1)
            self._dense_pe = _fourier_features(coords, self.params["prompt.freq"].data)
        return self._dense_pe

    # ----------------------------------------------------------- mask decoder

    def decode_mask(self, img_emb: Tensor, prompt_emb: Tensor, mode: str = "qat") -> Tensor:
        """(embed_dim, grid, grid) + (2, embed_dim) -> (S, S) float logits."""
        if mode not in MODES:
            raise ConfigurationError(f"unknown mode {mode!r}")
        c = self.config
        if img_emb.shape != (c.embed_dim, c.grid, c.grid):
            raise ShapeError(f"decode_mask embedding shape {img_emb.shape}")
        if prompt_emb.shape != (2, c.embed_dim):
            raise ShapeError(f"decode_mask prompt shape {prompt_emb.shape}")
        qd = c.quantize_decoder
        dd = c.decoder_dim
        n_tok = c.grid * c.grid
        x = T.transpose(T.reshape(img_emb, (c.embed_dim, n_tok)), (1, 0))
        x = T.add(x, Tensor(self._dense_positional()))
        x = self._linear(x, "dec.neck", mode, qd)
        t = self._linear(prompt_emb, "dec.proj", mode, qd)
        t = self._ln(T.add(t, self._attention(t, x, "dec.t2i", dd, mode, qd)), "dec.ln1")
        t = self._ln(T.add(t, self._mlp(t, "dec.mlp", mode, qd)), "dec.ln2")
        x = self._ln(T.add(x, self._attention(x, t, "dec.i2t", dd, mode, qd)), "dec.ln3")
        # two pixel-shuffle upscaling steps: grid -> 2x -> 4x
        up = T.gelu(self._pixel_shuffle(
            self._linear(x, "dec.up1", mode, qd), c.grid, 2, dd // 2))
        up2_in = T.reshape(up, (4 * n_tok, dd // 2))
        up = T.gelu(self._pixel_shuffle(
            self._linear(up2_in, "dec.up2", mode, qd), 2 * c.grid, 2, dd // 4))
        feats = T.reshape(up, (16 * n_tok, dd // 4))
        hyper = self._linear(t[0:1], "dec.hyper", mode, qd)
        logits = self._act_matmul(feats, T.transpose(hyper, (1, 0)),
                                  "dec.head.f", "dec.head.h", mode, qd)
        side = 4 * c.grid
        logits = T.reshape(logits, (side, side))
        return T.bilinear_resize(logits, c.mask_resolution, c.mask_resolution)

    @staticmethod
    def _pixel_shuffle(y: Tensor, g: int, r: int, ch: int) -> Tensor:
        """(g*g, ch*r*r) -> (g*r, g*r, ch)."""
        y = T.reshape(y, (g, g, r, r, ch))
        y = T.transpose(y, (0, 2, 1, 3, 4))
        return T.reshape(y, (g * r, g * r, ch))

    def decode_masks(self, img_emb: Tensor, prompt_embs, mode: str = "qat"):
        """Decode one mask per prompt; loops so results are independent of
        how callers batch the prompts."""
        return [self.decode_mask(img_emb, p, mode) for p in prompt_embs]

    def forward(self, image, box, mode: str = "qat") -> Tensor:
        emb = self.encode_image(image, mode)
        prompt = self.encode_prompt(box)
        return self.decode_mask(emb, prompt, mode)
