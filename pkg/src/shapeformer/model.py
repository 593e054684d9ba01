"""The shapelet transformer network.

Two branches feed one linear head:

* the class-specific branch turns every pool shapelet into a *difference
  token*: the projection of the input's best-fit subsequence minus the
  projection of the (learnable) shapelet, plus embeddings of the shapelet's
  start, end and variable. A transformer encoder mixes the tokens and the
  output at position 0 (the highest-gain shapelet) is the class token;
* the generic branch runs a temporal 1 x 8 convolution and a V x 1
  cross-variable convolution, adds learnable positions, encodes the T
  resulting tokens and mean-pools them.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, no_grad
from .autodiff import ops as F
from .discovery import ShapeletPool, scan_offsets
from .errors import ContractViolation
from .metrics import complexity_estimate, correction_factor

log = logging.getLogger(__name__)

CLASS_TOKEN_POLICIES = ("first", "mean", "learnable")
POSITION_SOURCES = ("shapelet", "best_fit")


@dataclass
class ModelConfig:
    d_spe: int = 128
    d_gen: int = 32
    heads: int = 16
    dropout: float = 0.4
    window: int = 100
    depth: int = 1
    ff_mult: int = 4
    kernel: int = 8
    class_token: str = "first"
    position_source: str = "shapelet"

    def __post_init__(self):
        if self.class_token not in CLASS_TOKEN_POLICIES:
            raise ContractViolation(f"class_token must be one of {CLASS_TOKEN_POLICIES}")
        if self.position_source not in POSITION_SOURCES:
            raise ContractViolation(f"position_source must be one of {POSITION_SOURCES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractViolation(f"dropout must lie in [0, 1), got {self.dropout}")
        for name in ("d_spe", "d_gen", "heads", "depth", "ff_mult", "kernel"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be positive")
        if self.window < 0:
            raise ContractViolation("window must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def resolve_heads(d: int, heads: int) -> int:
    if d // heads < 1:
        warnings.warn(f"{heads} heads do not fit width {d}; using {d}", stacklevel=2)
        heads = d
    if d % heads:
        raise ContractViolation(f"width {d} is not divisible by {heads} heads")
    return heads


# ---------------------------------------------------------------------------
# best-fit search


def find_best_fit(series: np.ndarray, shapelet_values, start: int, variable: int,
                  window: int | None) -> tuple[int, np.ndarray]:
    """Offset and values of the window of ``series[variable]`` closest (CID) to
    the shapelet, searched within ``start ± window`` (all offsets if None)."""
    series = np.asarray(series, dtype=np.float64)
    if series.ndim == 1:
        series = series[None, :]
    if not 0 <= variable < series.shape[0]:
        raise ContractViolation(f"variable {variable} outside [0, {series.shape[0]})")
    values = np.asarray(shapelet_values, dtype=np.float64)
    idx = best_fit_indices(series[None], values[None], np.array([start]), np.array([variable]),
                           np.array([values.size]), window)[0, 0]
    return int(idx), series[variable, idx:idx + values.size].copy()


def best_fit_indices(X: np.ndarray, shapelets: np.ndarray, starts, variables, lengths,
                     window: int | None) -> np.ndarray:
    """Best-fit offsets, shape (B, g), for padded shapelet rows ``shapelets[i, :lengths[i]]``."""
    X = np.asarray(X, dtype=np.float64)
    B, _, T = X.shape
    out = np.empty((B, len(starts)), dtype=np.int64)
    for i, (s, v, l) in enumerate(zip(starts, variables, lengths)):
        lo, hi = scan_offsets(int(s), int(l), T, window)
        sub = np.asarray(shapelets[i, :l], dtype=np.float64)
        win = sliding_window_view(X[:, v, :], int(l), axis=1)[:, lo:hi + 1]
        ed = np.sqrt(np.sum((win - sub) ** 2, axis=2))
        dist = ed * correction_factor(complexity_estimate(win), complexity_estimate(sub))
        out[:, i] = lo + np.argmin(dist, axis=1)
    return out


# ---------------------------------------------------------------------------
# model


class ShapeFormer:
    """Parameters live in ``self.params`` (name -> Tensor); batch-norm running
    statistics in ``self.buffers``."""

    def __init__(self, pool: ShapeletPool, config: ModelConfig | None = None, seed: int = 0,
                 dtype=np.float32):
        if len(pool) == 0:
            raise ContractViolation("cannot build a model from an empty shapelet pool")
        self.config = config or ModelConfig()
        self.dtype = np.dtype(dtype)
        self.classes = tuple(pool.classes)
        self.num_variables = pool.num_variables
        self.series_length = pool.series_length
        self.pool_digest = pool.digest()
        self.heads_spe = resolve_heads(self.config.d_spe, self.config.heads)
        self.heads_gen = resolve_heads(self.config.d_gen, self.config.heads)

        self.starts = np.array([s.start for s in pool], dtype=np.int64)
        self.ends = np.array([s.end for s in pool], dtype=np.int64)
        self.variables = np.array([s.variable for s in pool], dtype=np.int64)
        self.lengths = self.ends - self.starts
        g, L = len(pool), int(self.lengths.max())
        self.mask = (np.arange(L)[None, :] < self.lengths[:, None]).astype(self.dtype)

        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.last_attention: dict[str, np.ndarray] = {}
        self.last_embedding: np.ndarray | None = None

        shapelets = np.zeros((g, L))
        for i, s in enumerate(pool):
            shapelets[i, : len(s.values)] = s.values
        self._param("shapelets", shapelets)
        d = self.config.d_spe
        bound = (1.0 / np.sqrt(self.lengths))[:, None, None]
        for which in ("proj_I", "proj_S"):
            self._param(f"{which}.weight", rng.uniform(-1, 1, (g, L, d)) * bound * self.mask[:, :, None])
            self._param(f"{which}.bias", rng.uniform(-1, 1, (g, d)) * bound[:, :, 0])
        T, V = self.series_length, self.num_variables
        self._linear(rng, "pe_start", T + 1, d)
        self._linear(rng, "pe_end", T + 1, d)
        self._linear(rng, "pe_var", V, d)
        if self.config.class_token == "learnable":
            self._param("cls_token", rng.normal(0.0, 0.02, (d,)))
        for layer in range(self.config.depth):
            self._encoder_params(rng, f"spe.enc{layer}", d)

        dg, k = self.config.d_gen, self.config.kernel
        b1 = 1.0 / math.sqrt(k)
        self._param("gen.conv1.weight", rng.uniform(-b1, b1, (dg, 1, 1, k)))
        self._param("gen.conv1.bias", rng.uniform(-b1, b1, (dg,)))
        b2 = 1.0 / math.sqrt(dg * V)
        self._param("gen.conv2.weight", rng.uniform(-b2, b2, (dg, dg, V, 1)))
        self._param("gen.conv2.bias", rng.uniform(-b2, b2, (dg,)))
        for bn in ("gen.bn1", "gen.bn2"):
            self._param(f"{bn}.gamma", np.ones(dg))
            self._param(f"{bn}.beta", np.zeros(dg))
            self.buffers[f"{bn}.running_mean"] = np.zeros(dg, dtype=self.dtype)
            self.buffers[f"{bn}.running_var"] = np.ones(dg, dtype=self.dtype)
        self._param("gen.pos", rng.normal(0.0, 0.02, (T, dg)))
        for layer in range(self.config.depth):
            self._encoder_params(rng, f"gen.enc{layer}", dg)

        # zero head: the first forward pass predicts the uniform distribution
        self._param("head.weight", np.zeros((d + dg, len(self.classes))))
        self._param("head.bias", np.zeros(len(self.classes)))

    # -- construction helpers ----------------------------------------------
    def _param(self, name, value):
        self.params[name] = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)

    def _linear(self, rng, name, n_in, n_out):
        bound = 1.0 / math.sqrt(n_in)
        self._param(f"{name}.weight", rng.uniform(-bound, bound, (n_in, n_out)))
        self._param(f"{name}.bias", rng.uniform(-bound, bound, (n_out,)))

    def _encoder_params(self, rng, prefix, d):
        for proj in ("q", "k", "v", "o"):
            self._linear(rng, f"{prefix}.{proj}", d, d)
        self._param(f"{prefix}.ln1.gamma", np.ones(d))
        self._param(f"{prefix}.ln1.beta", np.zeros(d))
        self._linear(rng, f"{prefix}.ff1", d, self.config.ff_mult * d)
        self._linear(rng, f"{prefix}.ff2", self.config.ff_mult * d, d)
        self._param(f"{prefix}.ln2.gamma", np.ones(d))
        self._param(f"{prefix}.ln2.beta", np.zeros(d))

    # -- state -------------------------------------------------------------
    @property
    def num_shapelets(self) -> int:
        return len(self.starts)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": p.data for k, p in self.params.items()}
        out.update({f"buffer/{k}": b for k, b in self.buffers.items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        new_params, new_buffers = {}, {}
        for k, p in self.params.items():
            arr = arrays.get(f"{prefix}param/{k}")
            if arr is None or arr.shape != p.shape:
                raise ContractViolation(f"state for parameter {k!r} missing or misshapen")
            new_params[k] = arr
        for k, b in self.buffers.items():
            arr = arrays.get(f"{prefix}buffer/{k}")
            if arr is None or arr.shape != b.shape:
                raise ContractViolation(f"state for buffer {k!r} missing or misshapen")
            new_buffers[k] = arr
        for k, arr in new_params.items():
            self.params[k].data = np.array(arr, dtype=self.dtype)
        for k, arr in new_buffers.items():
            self.buffers[k] = np.array(arr, dtype=self.dtype)

    def copy_state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items()}

    def astype(self, dtype) -> "ShapeFormer":
        """Copy of this model with parameters and buffers cast to ``dtype``."""
        clone = object.__new__(ShapeFormer)
        clone.__dict__.update(self.__dict__)
        clone.dtype = np.dtype(dtype)
        clone.mask = self.mask.astype(dtype)
        clone.params = {k: Tensor(p.data.astype(dtype), requires_grad=True, name=k) for k, p in self.params.items()}
        clone.buffers = {k: b.astype(dtype) for k, b in self.buffers.items()}
        clone.last_attention = {}
        return clone

    # -- class-specific branch --------------------------------------------
    def shapelet_values(self) -> np.ndarray:
        """Current (possibly trained) shapelet rows, padded with zeros."""
        return self.params["shapelets"].data * self.mask

    def best_fit(self, X: np.ndarray) -> np.ndarray:
        return best_fit_indices(X, self.shapelet_values(), self.starts, self.variables, self.lengths,
                                self.config.window)

    def gather_subsequences(self, X: np.ndarray, index: np.ndarray) -> np.ndarray:
        """(B, g, L) padded best-fit subsequences for offsets ``index`` (B, g)."""
        L = self.mask.shape[1]
        pos = np.minimum(index[:, :, None] + np.arange(L)[None, None, :], X.shape[2] - 1)
        b = np.arange(X.shape[0])[:, None, None]
        v = self.variables[None, :, None]
        return X[b, v, pos].astype(self.dtype) * self.mask

    def _position_embedding(self, starts, ends, variables) -> Tensor:
        p = self.params
        T, V = self.series_length, self.num_variables
        pe = F.linear(F.one_hot(starts, T + 1, self.dtype), p["pe_start.weight"], p["pe_start.bias"])
        pe = pe + F.linear(F.one_hot(ends, T + 1, self.dtype), p["pe_end.weight"], p["pe_end.bias"])
        return pe + F.linear(F.one_hot(variables, V, self.dtype), p["pe_var.weight"], p["pe_var.bias"])

    def difference_tokens(self, X: np.ndarray, index: np.ndarray | None = None) -> Tensor:
        """Tokens (B, g, d_spe). ``index`` overrides the best-fit offsets."""
        X = self._check_input(X)
        p = self.params
        if index is None:
            index = self.best_fit(X)
        B, g = index.shape
        sub = Tensor(self.gather_subsequences(X, index)[:, :, None, :])  # (B, g, 1, L)
        proj_i = F.matmul(sub, p["proj_I.weight"])  # (B, g, 1, d)
        proj_i = F.reshape(proj_i, (B, g, -1)) + p["proj_I.bias"]
        shp = F.reshape(p["shapelets"] * self.mask, (g, 1, -1))
        proj_s = F.reshape(F.matmul(shp, p["proj_S.weight"]), (g, -1)) + p["proj_S.bias"]
        tokens = proj_i - proj_s
        if self.config.position_source == "shapelet":
            pe = self._position_embedding(self.starts, self.ends, self.variables)
        else:
            pe = self._position_embedding(index, index + self.lengths[None, :],
                                          np.broadcast_to(self.variables, index.shape))
        return tokens + pe

    # -- shared encoder ------------------------------------------------------
    def encoder_forward(self, x: Tensor, prefix: str, heads: int, training: bool = False,
                        rng: np.random.Generator | None = None, record: bool = False) -> Tensor:
        """Post-norm transformer layer(s) over (B, N, d) tokens."""
        p = self.params
        B, N, d = x.shape
        for layer in range(self.config.depth):
            pre = f"{prefix}.enc{layer}"
            if p[f"{pre}.q.weight"].shape[0] != d:
                raise ContractViolation(f"encoder {pre} expects width {p[f'{pre}.q.weight'].shape[0]}, got {d}")
            dh = d // heads

            def split(t):
                return F.transpose(F.reshape(t, (B, N, heads, dh)), (0, 2, 1, 3))

            # scaling q rather than the (B, h, N, N) scores is cheaper and equivalent
            q = split(F.linear(x, p[f"{pre}.q.weight"], p[f"{pre}.q.bias"]) * (1.0 / math.sqrt(dh)))
            k = split(F.linear(x, p[f"{pre}.k.weight"], p[f"{pre}.k.bias"]))
            v = split(F.linear(x, p[f"{pre}.v.weight"], p[f"{pre}.v.bias"]))
            scores = F.matmul(q, F.transpose(k, (0, 1, 3, 2)))
            attn = F.softmax(scores, axis=-1)
            if record:
                self.last_attention[pre] = attn.data.copy()
            ctx = F.reshape(F.transpose(F.matmul(attn, v), (0, 2, 1, 3)), (B, N, d))
            out = F.linear(ctx, p[f"{pre}.o.weight"], p[f"{pre}.o.bias"])
            out = F.dropout(out, self.config.dropout, training, rng)
            x = F.layer_norm(x + out, p[f"{pre}.ln1.gamma"], p[f"{pre}.ln1.beta"])
            h = F.gelu(F.linear(x, p[f"{pre}.ff1.weight"], p[f"{pre}.ff1.bias"]))
            h = F.linear(h, p[f"{pre}.ff2.weight"], p[f"{pre}.ff2.bias"])
            h = F.dropout(h, self.config.dropout, training, rng)
            x = F.layer_norm(x + h, p[f"{pre}.ln2.gamma"], p[f"{pre}.ln2.beta"])
        return x

    def class_specific_forward(self, X: np.ndarray, training: bool = False,
                               rng: np.random.Generator | None = None, record: bool = False) -> Tensor:
        tokens = self.difference_tokens(X)
        B = tokens.shape[0]
        if self.config.class_token == "learnable":
            cls = F.reshape(self.params["cls_token"], (1, 1, -1)) + np.zeros((B, 1, 1), dtype=self.dtype)
            tokens = F.concat([cls, tokens], axis=1)
        z = self.encoder_forward(tokens, "spe", self.heads_spe, training, rng, record)
        if self.config.class_token == "mean":
            return F.mean(z, axis=1)
        return z[:, 0, :]

    # -- generic branch ------------------------------------------------------
    def generic_tokens(self, X: np.ndarray, training: bool = False) -> Tensor:
        """Convolutional features (B, T, d_gen) before positions are added."""
        X = self._check_input(X)
        p, b = self.params, self.buffers
        B, V, T = X.shape
        x = Tensor(X.astype(self.dtype).reshape(B, 1, V, T))
        x = F.conv2d(x, p["gen.conv1.weight"], p["gen.conv1.bias"], padding="same")
        x = F.batch_norm(x, p["gen.bn1.gamma"], p["gen.bn1.beta"], b["gen.bn1.running_mean"],
                         b["gen.bn1.running_var"], training)
        x = F.gelu(x)
        x = F.conv2d(x, p["gen.conv2.weight"], p["gen.conv2.bias"], padding="valid")
        x = F.batch_norm(x, p["gen.bn2.gamma"], p["gen.bn2.beta"], b["gen.bn2.running_mean"],
                         b["gen.bn2.running_var"], training)
        x = F.gelu(x)  # (B, d_gen, 1, T)
        return F.transpose(F.reshape(x, (B, self.config.d_gen, T)), (0, 2, 1))

    def generic_forward(self, X: np.ndarray, training: bool = False,
                        rng: np.random.Generator | None = None, record: bool = False) -> Tensor:
        tokens = self.generic_tokens(X, training) + self.params["gen.pos"]
        z = self.encoder_forward(tokens, "gen", self.heads_gen, training, rng, record)
        return F.mean(z, axis=1)

    # -- full model ----------------------------------------------------------
    def forward(self, X: np.ndarray, training: bool = False, rng: np.random.Generator | None = None,
                record: bool = False) -> Tensor:
        """Logits (B, |classes|) for a batch ``X`` of shape (B, V, T)."""
        z_spe = self.class_specific_forward(X, training, rng, record)
        z_gen = self.generic_forward(X, training, rng, record)
        z = F.concat([z_spe, z_gen], axis=1)
        if record:
            self.last_embedding = z.data.copy()
        return F.linear(z, self.params["head.weight"], self.params["head.bias"])

    __call__ = forward

    def predict_logits(self, X: np.ndarray, batch_size: int = 64) -> np.ndarray:
        X = self._check_input(X)
        out = []
        with no_grad():
            for i in range(0, X.shape[0], batch_size):
                out.append(self.forward(X[i:i + batch_size]).data)
        return np.concatenate(out, axis=0)

    def predict(self, X: np.ndarray, batch_size: int = 64) -> np.ndarray:
        return np.argmax(self.predict_logits(X, batch_size), axis=1)

    def export_analysis(self, X: np.ndarray) -> dict:
        """Attention matrices and fused embeddings for a batch (eval mode)."""
        X = self._check_input(X)
        self.last_attention = {}
        with no_grad():
            logits = self.forward(X, record=True).data
        return {
            "logits": logits.tolist(),
            "embedding": self.last_embedding.tolist(),
            "attention": {k: v.tolist() for k, v in self.last_attention.items()},
        }

    def _check_input(self, X) -> np.ndarray:
        X = np.asarray(X)
        if X.ndim == 2:
            X = X[None]
        if X.ndim != 3 or X.shape[1] != self.num_variables or X.shape[2] != self.series_length:
            raise ContractViolation(
                f"input shape {X.shape} does not match (B, {self.num_variables}, {self.series_length})")
        return X
