"""Toy-scale SAM-style model: frozen image encoder, frozen prompt encoder,
trainable mask decoder.

Geometry preserves the full-scale shape relationships (input:patch grid,
low-res mask at input/4) at roughly 16x smaller absolute sizes. The encoder
runs in plain numpy (it never takes gradients); the decoder runs on
tensor_core so it can be fine-tuned.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .errors import DimMismatch, ShapeMismatch
from .prompts import PromptSet
from .rng import stream_rng
from .tensor_core import Parameter, Tensor

ROLE_BOX_MIN = 0
ROLE_BOX_MAX = 1
ROLE_POINT_FG = 2
ROLE_POINT_BG = 3
_N_ROLES = 4


@dataclass(frozen=True)
class ModelConfig:
    img_size: int = 64
    patch: int = 8
    embed_dim: int = 32
    encoder_depth: int = 2
    heads: int = 4
    decoder_depth: int = 2
    lowres_factor: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.img_size % self.patch:
            raise ValueError(f"img_size {self.img_size} not divisible by patch {self.patch}")
        if self.img_size % self.lowres_factor:
            raise ValueError(f"img_size {self.img_size} not divisible by {self.lowres_factor}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        ratio = self.patch / self.lowres_factor
        if ratio < 1 or 2 ** int(round(math.log2(ratio))) != ratio:
            raise ValueError(f"patch/lowres_factor must be a power of two >= 1, got {ratio}")

    @property
    def grid_size(self) -> int:
        return self.img_size // self.patch

    @property
    def lowres_size(self) -> int:
        return self.img_size // self.lowres_factor

    @property
    def upscale_stages(self) -> int:
        # stride-2 stages taking the patch grid to the low-res mask grid;
        # 2 at full SAM geometry (patch 16), 1 at the toy default (patch 8)
        return int(round(math.log2(self.patch / self.lowres_factor)))


@dataclass
class ImageEmbedding:
    grid: np.ndarray  # (G, G, D) float64 in memory; banks store float32
    key: str = ""

    def to_storage(self) -> np.ndarray:
        return self.grid.astype("<f4")


@dataclass
class PromptTokens:
    tokens: np.ndarray  # (T, D)
    roles: tuple[int, ...]


@dataclass
class MaskLogits:
    lowres: Tensor     # (img/4, img/4)
    upsampled: Tensor  # (img, img)

    def lowres_array(self) -> np.ndarray:
        return self.lowres.data

    def upsampled_array(self) -> np.ndarray:
        return self.upsampled.data


def _init(seed: int, name: str, shape: tuple[int, ...], std: float | None,
          fill: float | None = None) -> np.ndarray:
    """Name-keyed init so values do not depend on construction order."""
    if fill is not None:
        return np.full(shape, fill, dtype=np.float64)
    rng = stream_rng(seed, "init", name)
    vals = np.array(rng.normals(int(np.prod(shape)), 0.0, std), dtype=np.float64)
    return vals.reshape(shape)


class _ParamStore:
    def __init__(self, seed: int, frozen: bool):
        self.seed = seed
        self.frozen = frozen
        self.params: dict[str, Parameter] = {}

    def make(self, name: str, shape: tuple[int, ...], std: float | None = None,
             fill: float | None = None) -> Parameter:
        p = Parameter(name, _init(self.seed, name, shape, std, fill), frozen=self.frozen)
        self.params[name] = p
        return p

    def linear(self, name: str, d_in: int, d_out: int) -> tuple[Parameter, Parameter]:
        w = self.make(f"{name}.weight", (d_in, d_out), std=1.0 / math.sqrt(d_in))
        b = self.make(f"{name}.bias", (d_out,), fill=0.0)
        return w, b

    def norm(self, name: str, dim: int) -> tuple[Parameter, Parameter]:
        g = self.make(f"{name}.gain", (dim,), fill=1.0)
        b = self.make(f"{name}.bias", (dim,), fill=0.0)
        return g, b


# ----------------------------------------------------------- image encoder

def _np_softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _np_gelu(x: np.ndarray) -> np.ndarray:
    from scipy.special import erf
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def _np_layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
                   eps: float = 1e-6) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


class ImageEncoder:
    """Frozen ViT-style encoder; deterministic function of (config.seed, image)."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.invocations = 0
        store = _ParamStore(config.seed, frozen=True)
        d = config.embed_dim
        p = config.patch
        store.linear("encoder.patch_embed", p * p * 3, d)
        store.make("encoder.pos_embed", (config.grid_size**2, d), std=0.2)
        for i in range(config.encoder_depth):
            base = f"encoder.block{i}"
            store.norm(f"{base}.ln1", d)
            for proj in ("q", "k", "v", "o"):
                store.linear(f"{base}.attn.{proj}", d, d)
            store.norm(f"{base}.ln2", d)
            store.linear(f"{base}.mlp.fc1", d, 4 * d)
            store.linear(f"{base}.mlp.fc2", 4 * d, d)
        store.norm("encoder.ln_f", d)
        store.linear("encoder.neck.fc1", d, 4 * d)
        store.linear("encoder.neck.fc2", 4 * d, d)
        store.norm("encoder.neck.ln", d)
        self.params = store.params

    def _p(self, name: str) -> np.ndarray:
        return self.params[name].data

    def _attention(self, x: np.ndarray, base: str) -> np.ndarray:
        cfg = self.config
        n, d = x.shape
        dh = d // cfg.heads
        q = x @ self._p(f"{base}.q.weight") + self._p(f"{base}.q.bias")
        k = x @ self._p(f"{base}.k.weight") + self._p(f"{base}.k.bias")
        v = x @ self._p(f"{base}.v.weight") + self._p(f"{base}.v.bias")
        q = q.reshape(n, cfg.heads, dh).transpose(1, 0, 2)
        k = k.reshape(n, cfg.heads, dh).transpose(1, 0, 2)
        v = v.reshape(n, cfg.heads, dh).transpose(1, 0, 2)
        attn = _np_softmax(q @ k.transpose(0, 2, 1) / math.sqrt(dh))
        out = (attn @ v).transpose(1, 0, 2).reshape(n, d)
        return out @ self._p(f"{base}.o.weight") + self._p(f"{base}.o.bias")

    def encode(self, image: np.ndarray, key: str = "") -> ImageEmbedding:
        cfg = self.config
        image = np.asarray(image)
        if image.shape != (cfg.img_size, cfg.img_size, 3):
            raise DimMismatch(
                f"expected {(cfg.img_size, cfg.img_size, 3)} image, got {image.shape}")
        self.invocations += 1
        g, p = cfg.grid_size, cfg.patch
        x = image.astype(np.float64) / 255.0
        patches = x.reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4).reshape(g * g, p * p * 3)
        h = patches @ self._p("encoder.patch_embed.weight") + self._p("encoder.patch_embed.bias")
        h = h + self._p("encoder.pos_embed")
        for i in range(cfg.encoder_depth):
            base = f"encoder.block{i}"
            h = h + self._attention(
                _np_layer_norm(h, self._p(f"{base}.ln1.gain"), self._p(f"{base}.ln1.bias")),
                f"{base}.attn")
            z = _np_layer_norm(h, self._p(f"{base}.ln2.gain"), self._p(f"{base}.ln2.bias"))
            z = _np_gelu(z @ self._p(f"{base}.mlp.fc1.weight") + self._p(f"{base}.mlp.fc1.bias"))
            h = h + z @ self._p(f"{base}.mlp.fc2.weight") + self._p(f"{base}.mlp.fc2.bias")
        h = _np_layer_norm(h, self._p("encoder.ln_f.gain"), self._p("encoder.ln_f.bias"))
        z = _np_gelu(h @ self._p("encoder.neck.fc1.weight") + self._p("encoder.neck.fc1.bias"))
        h = h + z @ self._p("encoder.neck.fc2.weight") + self._p("encoder.neck.fc2.bias")
        h = _np_layer_norm(h, self._p("encoder.neck.ln.gain"), self._p("encoder.neck.ln.bias"))
        return ImageEmbedding(h.reshape(g, g, -1), key)


# ----------------------------------------------------------- prompt encoder

_FOURIER_SCALE = 1.5  # spatial frequency spread; higher resolves finer offsets


class PromptEncoder:
    """Frozen coordinate encoder: random-Fourier features + role embeddings."""

    def __init__(self, config: ModelConfig):
        self.config = config
        store = _ParamStore(config.seed, frozen=True)
        store.make("prompt.fourier", (2, config.embed_dim // 2), std=_FOURIER_SCALE)
        store.make("prompt.roles", (_N_ROLES, config.embed_dim), std=0.5)
        self.params = store.params

    def positional(self, coords: np.ndarray) -> np.ndarray:
        """coords (N, 2) in [0, 1] -> (N, D) Fourier features."""
        proj = 2.0 * math.pi * coords @ self.params["prompt.fourier"].data
        return np.concatenate([np.sin(proj), np.cos(proj)], axis=-1)

    def grid_positional(self) -> np.ndarray:
        """(G*G, D) features at patch-cell centers, row-major (gy, gx)."""
        g = self.config.grid_size
        centers = (np.arange(g, dtype=np.float64) + 0.5) / g
        gy, gx = np.meshgrid(centers, centers, indexing="ij")
        coords = np.stack([gx.ravel(), gy.ravel()], axis=1)
        return self.positional(coords)

    def encode(self, prompt_set: PromptSet) -> PromptTokens:
        size = self.config.img_size
        box = prompt_set.box.validate(size, size)
        coords = [
            ((box.x_min + 0.5) / size, (box.y_min + 0.5) / size),
            ((box.x_max + 0.5) / size, (box.y_max + 0.5) / size),
        ]
        roles = [ROLE_BOX_MIN, ROLE_BOX_MAX]
        for pt in prompt_set.points:
            pt.validate(size, size)
            coords.append(((pt.x + 0.5) / size, (pt.y + 0.5) / size))
            roles.append(ROLE_POINT_FG if pt.label == "foreground" else ROLE_POINT_BG)
        pe = self.positional(np.asarray(coords, dtype=np.float64))
        tokens = pe + self.params["prompt.roles"].data[np.asarray(roles)]
        return PromptTokens(tokens, tuple(roles))


# ------------------------------------------------------------- mask decoder

class MaskDecoder:
    """Trainable two-way transformer + upscaling head."""

    def __init__(self, config: ModelConfig):
        self.config = config
        d = config.embed_dim
        attn_dim = max(config.heads, d // 4)
        mlp_dim = max(4, d // 4)
        self.attn_dim = attn_dim
        store = _ParamStore(config.seed + 1, frozen=False)
        for i in range(config.decoder_depth):
            base = f"decoder.block{i}"
            for attn in ("self_attn", "cross_t2i", "cross_i2t"):
                for proj in ("q", "k", "v"):
                    store.linear(f"{base}.{attn}.{proj}", d, attn_dim)
                store.linear(f"{base}.{attn}.o", attn_dim, d)
            store.linear(f"{base}.mlp.fc1", d, mlp_dim)
            store.linear(f"{base}.mlp.fc2", mlp_dim, d)
            for n in range(1, 5):
                store.norm(f"{base}.norm{n}", d)
        store.norm("decoder.head.ln", d)
        channels = d
        for s in range(config.upscale_stages):
            c_out = max(2, channels // 4 if s == 0 else channels // 2)
            store.make(f"decoder.head.convt{s}.weight", (channels, c_out, 2, 2),
                       std=1.0 / math.sqrt(channels * 4))
            store.make(f"decoder.head.convt{s}.bias", (c_out,), fill=0.0)
            channels = c_out
        store.linear("decoder.head.out", channels, 1)
        self.params = store.params

    def parameters(self) -> list[Parameter]:
        return [self.params[k] for k in sorted(self.params)]

    def _attention(self, base: str, queries: Tensor, keys: Tensor,
                   values: Tensor) -> Tensor:
        cfg = self.config
        heads = cfg.heads
        dh = self.attn_dim // heads
        p = self.params

        def proj(name: str, x: Tensor) -> Tensor:
            y = tc.matmul(x, p[f"{base}.{name}.weight"].tensor) + p[f"{base}.{name}.bias"].tensor
            n = y.shape[0]
            return tc.transpose(tc.reshape(y, (n, heads, dh)), (1, 0, 2))

        q = proj("q", queries)
        k = proj("k", keys)
        v = proj("v", values)
        scores = tc.matmul(q, tc.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(dh))
        attn = tc.softmax(scores)
        out = tc.matmul(attn, v)  # (heads, Tq, dh)
        n_q = queries.shape[0]
        merged = tc.reshape(tc.transpose(out, (1, 0, 2)), (n_q, self.attn_dim))
        return tc.matmul(merged, p[f"{base}.o.weight"].tensor) + p[f"{base}.o.bias"].tensor

    def _norm(self, name: str, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.params[f"{name}.gain"].tensor,
                             self.params[f"{name}.bias"].tensor)

    def _mlp(self, base: str, x: Tensor) -> Tensor:
        p = self.params
        h = tc.gelu(tc.matmul(x, p[f"{base}.fc1.weight"].tensor) + p[f"{base}.fc1.bias"].tensor)
        return tc.matmul(h, p[f"{base}.fc2.weight"].tensor) + p[f"{base}.fc2.bias"].tensor

    def decode(self, embedding: ImageEmbedding, tokens: PromptTokens,
               grid_pe: np.ndarray) -> MaskLogits:
        cfg = self.config
        g = cfg.grid_size
        if embedding.grid.shape != (g, g, cfg.embed_dim):
            raise ShapeMismatch(
                f"embedding grid {embedding.grid.shape} vs config {(g, g, cfg.embed_dim)}")
        if tokens.tokens.ndim != 2 or tokens.tokens.shape[1] != cfg.embed_dim:
            raise ShapeMismatch(f"prompt tokens {tokens.tokens.shape} need dim {cfg.embed_dim}")
        t = Tensor(tokens.tokens.astype(np.float64))
        t_pe = Tensor(tokens.tokens.astype(np.float64))  # re-added at every attention
        grid = Tensor(embedding.grid.astype(np.float64).reshape(g * g, cfg.embed_dim))
        pe = Tensor(grid_pe)
        for i in range(cfg.decoder_depth):
            base = f"decoder.block{i}"
            t = self._norm(f"{base}.norm1",
                           t + self._attention(f"{base}.self_attn", t + t_pe, t + t_pe, t))
            t = self._norm(f"{base}.norm2",
                           t + self._attention(f"{base}.cross_t2i", t + t_pe, grid + pe, grid))
            t = self._norm(f"{base}.norm3", t + self._mlp(f"{base}.mlp", t))
            grid = self._norm(f"{base}.norm4",
                              grid + self._attention(f"{base}.cross_i2t", grid + pe, t + t_pe, t))
        h = self._norm("decoder.head.ln", grid)
        x = tc.transpose(tc.reshape(h, (g, g, cfg.embed_dim)), (2, 0, 1))
        for s in range(cfg.upscale_stages):
            x = tc.gelu(tc.conv2d_transpose(
                x, self.params[f"decoder.head.convt{s}.weight"].tensor,
                self.params[f"decoder.head.convt{s}.bias"].tensor))
        c, lh, lw = x.shape
        flat = tc.transpose(tc.reshape(x, (c, lh * lw)), (1, 0))
        logits = tc.matmul(flat, self.params["decoder.head.out.weight"].tensor) \
            + self.params["decoder.head.out.bias"].tensor
        lowres = tc.reshape(logits, (lh, lw))
        upsampled = tc.bilinear_resize(lowres, (cfg.img_size, cfg.img_size))
        return MaskLogits(lowres, upsampled)


# ---------------------------------------------------------------- full model

def predict_mask(logits, threshold: float = 0.5) -> np.ndarray:
    """Foreground where sigmoid(logit) >= threshold (logit 0 is foreground)."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    prob = 1.0 / (1.0 + np.exp(-arr.astype(np.float64)))
    return prob >= threshold


class SamriModel:
    """Bundles the three components plus checkpoint IO."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.encoder = ImageEncoder(config)
        self.prompt_encoder = PromptEncoder(config)
        self.decoder = MaskDecoder(config)
        self._grid_pe = self.prompt_encoder.grid_positional()

    # parameter plumbing -------------------------------------------------
    def all_params(self) -> list[Parameter]:
        merged = {**self.encoder.params, **self.prompt_encoder.params,
                  **self.decoder.params}
        return [merged[k] for k in sorted(merged)]

    def trainable_params(self) -> list[Parameter]:
        return self.decoder.parameters()

    def frozen_hash(self) -> str:
        digest = hashlib.sha256()
        for p in self.all_params():
            if p.frozen:
                digest.update(p.name.encode())
                digest.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return digest.hexdigest()

    # forward passes ------------------------------------------------------
    def encode_image(self, image: np.ndarray, key: str = "") -> ImageEmbedding:
        return self.encoder.encode(image, key)

    def encode_prompts(self, prompt_set: PromptSet) -> PromptTokens:
        return self.prompt_encoder.encode(prompt_set)

    def decode(self, embedding: ImageEmbedding, prompt_set: PromptSet) -> MaskLogits:
        tokens = self.encode_prompts(prompt_set)
        return self.decoder.decode(embedding, tokens, self._grid_pe)

    def predict(self, image: np.ndarray, prompt_set: PromptSet,
                threshold: float = 0.5) -> np.ndarray:
        with tc.no_grad():
            emb = self.encode_image(image)
            logits = self.decode(emb, prompt_set)
        return predict_mask(logits.upsampled, threshold)

    # checkpoints ---------------------------------------------------------
    def save_checkpoint(self, path: str | Path, regime: str = "box_only",
                        epoch: int = -1, val_seen: float | None = None,
                        val_zero_shot: float | None = None) -> Path:
        path = Path(path)
        tc.save_params(self.all_params(), str(path))
        sidecar = {
            "config": asdict(self.config),
            "regime": regime,
            "epoch": epoch,
            "val_seen": val_seen,
            "val_zero_shot": val_zero_shot,
        }
        path.with_suffix(path.suffix + ".json").write_text(
            json.dumps(sidecar, sort_keys=True, indent=1))
        return path

    @classmethod
    def load_checkpoint(cls, path: str | Path) -> tuple["SamriModel", dict]:
        path = Path(path)
        sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        model = cls(ModelConfig(**sidecar["config"]))
        values = tc.load_params(str(path))
        for p in model.all_params():
            if p.name not in values:
                raise ShapeMismatch(f"checkpoint missing parameter {p.name}")
            if values[p.name].shape != p.data.shape:
                raise ShapeMismatch(
                    f"{p.name}: checkpoint {values[p.name].shape} vs model {p.data.shape}")
            p.tensor.data = values[p.name]
        return model, sidecar
