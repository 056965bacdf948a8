"""1-D convolutional embedding network with learnable class prototypes.

The backbone maps an I/Q record [2, L] to an embedding [D]: a strided stem
convolution, a stack of residual blocks at constant width, global average
pooling, and a dense projection. Class prototypes live in the same embedding
space; classification and rejection both reduce to squared Euclidean
distances against them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


class ConfigError(ValueError):
    """Model configuration violates its constraints."""


@dataclass(frozen=True)
class ConvSpec:
    """One convolution: output channels, kernel length, stride."""
    out_channels: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class ModelConfig:
    """Backbone hyperparameters.

    ``blocks`` residual blocks run at the stem's output width; their kernels
    must be odd so same-padding preserves length and the skip add conforms.
    """
    in_channels: int = 2
    stem: ConvSpec = field(default_factory=lambda: ConvSpec(32, 15, 16))
    blocks: int = 2
    block_kernel: int = 7
    embed_dim: int = 32

    def __post_init__(self):
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.stem.out_channels < 1 or self.stem.kernel < 1 or self.stem.stride < 1:
            raise ConfigError(f"invalid stem spec {self.stem}")
        if self.blocks < 0:
            raise ConfigError(f"blocks must be >= 0, got {self.blocks}")
        if self.block_kernel < 1 or self.block_kernel % 2 == 0:
            raise ConfigError(f"block_kernel must be odd and >= 1, got {self.block_kernel}")
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be >= 1, got {self.embed_dim}")

    def to_dict(self) -> dict:
        return {"in_channels": self.in_channels,
                "stem": [self.stem.out_channels, self.stem.kernel, self.stem.stride],
                "blocks": self.blocks,
                "block_kernel": self.block_kernel,
                "embed_dim": self.embed_dim}

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(in_channels=int(d["in_channels"]),
                           stem=ConvSpec(*[int(v) for v in d["stem"]]),
                           blocks=int(d["blocks"]),
                           block_kernel=int(d["block_kernel"]),
                           embed_dim=int(d["embed_dim"]))


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows: [B, D] x [C, D] -> [B, C].

    Same arithmetic as the tape op, so inference distances match training
    distances bitwise.
    """
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("bcd,bcd->bc", diff, diff)


class PrototypeModel:
    """Backbone parameters plus one prototype per known class.

    Parameters are plain float64 arrays in a name-ordered dict; each training
    step registers them as tape leaves, so the optimizer mutates the arrays
    in place between steps.
    """

    def __init__(self, config: ModelConfig, n_classes: int, seed: int):
        if n_classes < 2:
            raise ConfigError(f"need at least 2 known classes, got {n_classes}")
        self.config = config
        self.n_classes = n_classes
        rng = np.random.default_rng(seed)
        ch, k, cin = config.stem.out_channels, config.stem.kernel, config.in_channels
        p: dict[str, np.ndarray] = {}
        p["stem_w"] = rng.standard_normal((ch, cin, k)) * np.sqrt(2.0 / (cin * k))
        p["stem_b"] = np.zeros(ch)
        bk = config.block_kernel
        for i in range(config.blocks):
            p[f"block{i}_w1"] = rng.standard_normal((ch, ch, bk)) * np.sqrt(2.0 / (ch * bk))
            p[f"block{i}_b1"] = np.zeros(ch)
            p[f"block{i}_w2"] = rng.standard_normal((ch, ch, bk)) * np.sqrt(2.0 / (ch * bk))
            p[f"block{i}_b2"] = np.zeros(ch)
        p["head_w"] = rng.standard_normal((ch, config.embed_dim)) * np.sqrt(1.0 / ch)
        p["head_b"] = np.zeros(config.embed_dim)
        p["prototypes"] = rng.standard_normal((n_classes, config.embed_dim)) * 0.1
        self.params = p

    # ------------------------------------------------------------- tape side

    def leaves(self, tape: ad.Tape) -> dict[str, ad.Tensor]:
        """Register every parameter as a differentiable leaf on ``tape``."""
        return {name: tape.leaf(arr) for name, arr in self.params.items()}

    def embed(self, tape: ad.Tape, x, leaves: dict[str, ad.Tensor]) -> ad.Tensor:
        """Record the backbone forward pass.

        ``x`` is a Tensor or array shaped [C_in, L] or [B, C_in, L]; returns
        the embedding [D] or [B, D].
        """
        if not isinstance(x, ad.Tensor):
            x = tape.constant(x)
        length = x.value.shape[-1]
        need = self.min_input_length()
        if length < need:
            raise ConfigError(f"input length {length} below minimum {need}")
        cfg = self.config
        h = ad.conv1d(x, leaves["stem_w"], bias=leaves["stem_b"],
                      stride=cfg.stem.stride, padding="same")
        h = ad.relu(h)
        for i in range(cfg.blocks):
            r = ad.conv1d(h, leaves[f"block{i}_w1"], bias=leaves[f"block{i}_b1"],
                          stride=1, padding="same")
            r = ad.relu(r)
            r = ad.conv1d(r, leaves[f"block{i}_w2"], bias=leaves[f"block{i}_b2"],
                          stride=1, padding="same")
            h = ad.relu(ad.add(h, r))
        pooled = ad.global_avg_pool(h)                       # [B, ch] or [ch]
        return ad.add(ad.matmul(pooled, leaves["head_w"]), leaves["head_b"])

    # -------------------------------------------------------- inference side

    def embed_array(self, x: np.ndarray, chunk: int = 512) -> np.ndarray:
        """Forward-only embeddings for [B, C_in, L] (or a single [C_in, L])."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None]
        outs = []
        for start in range(0, x.shape[0], chunk):
            tape = ad.Tape()
            z = self.embed(tape, x[start:start + chunk], self.leaves(tape))
            outs.append(z.value)
        z = np.concatenate(outs, axis=0)
        return z[0] if single else z

    def distances(self, z: np.ndarray) -> np.ndarray:
        """Squared distances from embeddings [B, D] to every prototype."""
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        d = pairwise_sq_dists(z[None] if single else z, self.params["prototypes"])
        return d[0] if single else d

    # ------------------------------------------------------------- metadata

    def min_input_length(self) -> int:
        """Smallest L for which every layer sees a long-enough signal."""
        for length in range(1, 4096):
            if self._length_ok(length):
                return length
        raise ConfigError("no admissible input length below 4096")

    def _length_ok(self, length: int) -> bool:
        cfg = self.config
        k, s = cfg.stem.kernel, cfg.stem.stride
        pad = (k - 1) // 2
        if length + 2 * pad < k:
            return False
        length = (length + 2 * pad - k) // s + 1
        bk = cfg.block_kernel
        if cfg.blocks and length + 2 * ((bk - 1) // 2) < bk:
            return False
        return length >= 1

    def param_count(self) -> int:
        return sum(arr.size for arr in self.params.values())
