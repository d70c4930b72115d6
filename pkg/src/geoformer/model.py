"""
Transformer encoder over sensors, with an optional Matérn attention bias.

Each sensor is one token whose features are its last ``lookback`` values.
Attention mixes information across sensors; the ``geo`` variant adds
``lambda * Psi(d_ij; rho)`` to the attention logits, the ``vanilla`` variant
instead adds a learnable per-sensor position embedding to the tokens.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kernels import KernelFamily, KernelSpec, SensorGrid, _BiasCache, softplus, softplus_inverse


class Variant(str, enum.Enum):
    GEO = "geo"
    VANILLA = "vanilla"


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    lookback: int = 12
    dropout_p: float = 0.1
    variant: Variant = Variant.GEO
    kernel_family: KernelFamily = KernelFamily.MATERN15
    rho_init: float | None = None  # None: draw from U(rho_init_low, rho_init_high)
    rho_init_low: float = 0.01
    rho_init_high: float = 0.5
    lambda_init: float = 1.0
    share_kernel_across_heads: bool = True
    n_mc: int = 50
    seed: int = 0

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.kernel_family = KernelFamily(self.kernel_family)
        self.validate()

    def validate(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_layers < 1 or self.lookback < 1:
            raise ValueError("n_layers and lookback must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variant"] = self.variant.value
        d["kernel_family"] = self.kernel_family.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class AttentionRecord:
    weights: np.ndarray  # (H, N, N), first sample of the batch
    bias: np.ndarray | None  # lambda * Psi, (N, N) or (H, N, N)
    geo_bias_share: float


# keeps predictive variances strictly positive before a residual floor is fitted
MIN_VARIANCE = 1e-8


def _glorot(rng, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


class GeoTransformer:
    """Encoder mapping a window ``(N, L)`` (or a batch ``(B, N, L)``) to next-step values ``(N,)``."""

    def __init__(self, config: ModelConfig, grid: SensorGrid, rng: np.random.Generator | None = None):
        config.validate()
        self.config = config
        self.grid = grid
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.params: dict[str, Tensor] = {}
        self.noise_var = 0.0  # residual variance floor for predictive distributions
        self.training = False
        self._cache = _BiasCache()
        self._init_params()

    # ------------------------------------------------------------------
    def _add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = ad.parameter(value, name)

    def _init_params(self):
        c, rng, n = self.config, self.rng, self.grid.n
        d, L = c.d_model, c.lookback
        self._add("embed.w", _glorot(rng, L, d))
        self._add("embed.b", np.zeros(d))
        if c.variant is Variant.VANILLA:
            self._add("pos", rng.normal(0.0, 0.02, size=(n, d)))
        else:
            shape = () if c.share_kernel_across_heads else (c.n_heads,)
            rho0 = (np.full(shape, c.rho_init) if c.rho_init is not None
                    else rng.uniform(c.rho_init_low, c.rho_init_high, size=shape))
            self._add("theta_rho", softplus_inverse(rho0))
            self._add("theta_lambda", softplus_inverse(np.full(shape, c.lambda_init)))
        for i in range(c.n_layers):
            p = f"layer{i}."
            self._add(p + "ln1.g", np.ones(d))
            self._add(p + "ln1.b", np.zeros(d))
            for m in ("q", "k", "v", "o"):
                self._add(p + f"attn.w{m}", _glorot(rng, d, d))
                self._add(p + f"attn.b{m}", np.zeros(d))
            self._add(p + "ln2.g", np.ones(d))
            self._add(p + "ln2.b", np.zeros(d))
            self._add(p + "ff.w1", _glorot(rng, d, 4 * d))
            self._add(p + "ff.b1", np.zeros(4 * d))
            self._add(p + "ff.w2", _glorot(rng, 4 * d, d))
            self._add(p + "ff.b2", np.zeros(d))
        self._add("head.w", _glorot(rng, d, 1))
        self._add("head.b", np.zeros(1))

    # ------------------------------------------------------------------
    @property
    def is_geo(self) -> bool:
        return self.config.variant is Variant.GEO

    @property
    def rho(self):
        if not self.is_geo:
            return None
        r = softplus(self.params["theta_rho"].data)
        return float(r) if r.ndim == 0 else r

    @property
    def lam(self):
        if not self.is_geo:
            return None
        v = softplus(self.params["theta_lambda"].data)
        return float(v) if v.ndim == 0 else v

    def kernel_spec(self) -> KernelSpec | None:
        if not self.is_geo:
            return None
        return KernelSpec(self.config.kernel_family, self.params["theta_rho"].data.copy(),
                          self.params["theta_lambda"].data.copy())

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        if set(state) != set(self.params):
            raise KeyError("state dict keys do not match model parameters")
        for k, v in state.items():
            if np.shape(v) != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {np.shape(v)} vs {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    # ------------------------------------------------------------------
    def embed(self, window) -> Tensor:
        """Token matrix ``(..., N, d_model)`` for window ``(..., N, L)``."""
        x = ad.as_tensor(window)
        c = self.config
        if x.shape[-1] != c.lookback or x.shape[-2] != self.grid.n:
            raise ad.ShapeError(f"window shape {x.shape} does not match (N={self.grid.n}, L={c.lookback})")
        if not np.all(np.isfinite(x.data)):
            raise ValueError("window contains non-finite values")
        h = x @ self.params["embed.w"] + self.params["embed.b"]
        if not self.is_geo:
            h = h + self.params["pos"]
        return h

    def geo_bias(self, lam_override=None) -> Tensor | None:
        if not self.is_geo:
            return None
        return ad.matern_bias(self.grid.dist_matrix, self.params["theta_rho"], self.params["theta_lambda"],
                              self.config.kernel_family, lam_override=lam_override, cache=self._cache)

    def attention(self, tokens: Tensor, layer: int, bias: Tensor | None, dropout_active: bool = False,
                  record: list | None = None) -> Tensor:
        """Multi-head attention of one layer (no residual, no norm)."""
        c, P = self.config, self.params
        p = f"layer{layer}.attn."
        H, dk = c.n_heads, c.d_k
        lead = tokens.shape[:-2]
        n = tokens.shape[-2]

        def heads(t):
            t = t.reshape(*lead, n, H, dk)
            nd = t.ndim
            axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
            return t.transpose(axes)  # (..., H, N, dk)

        q = heads(tokens @ P[p + "wq"] + P[p + "bq"])
        k = heads(tokens @ P[p + "wk"] + P[p + "bk"])
        v = heads(tokens @ P[p + "wv"] + P[p + "bv"])
        kt_axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
        scores = ad.scale(q @ k.transpose(kt_axes), 1.0 / math.sqrt(dk))
        logits = scores if bias is None else scores + bias
        attn = ad.softmax_rows(logits)
        out = attn @ v  # (..., H, N, dk)
        nd = out.ndim
        out = out.transpose(tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)).reshape(*lead, n, c.d_model)
        out = out @ P[p + "wo"] + P[p + "bo"]
        if record is not None:
            w = attn.data.reshape(-1, H, n, n)[0]
            if bias is None:
                share = 0.0
                bdata = None
            else:
                bdata = bias.data.copy()
                mb = float(np.abs(bdata).mean())
                ms = float(np.abs(scores.data).mean())
                share = mb / (ms + mb) if (ms + mb) > 0 else 0.0
            record.append(AttentionRecord(w.copy(), bdata, share))
        return ad.dropout(out, c.dropout_p, self.rng, dropout_active)

    def forward(self, window, dropout_active: bool | None = None, record: list | None = None,
                lam_override=None) -> Tensor:
        """Predictions of shape ``window.shape[:-1]``.

        ``dropout_active`` defaults to ``self.training``; pass ``True`` for
        MC-dropout sampling at inference.
        """
        c, P = self.config, self.params
        drop = self.training if dropout_active is None else dropout_active
        x = self.embed(window)
        bias = self.geo_bias(lam_override)
        for i in range(c.n_layers):
            p = f"layer{i}."
            h = ad.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
            x = x + self.attention(h, i, bias, drop, record)
            h = ad.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
            f = ad.relu(h @ P[p + "ff.w1"] + P[p + "ff.b1"])
            f = ad.dropout(f, c.dropout_p, self.rng, drop)
            x = x + (f @ P[p + "ff.w2"] + P[p + "ff.b2"])
        out = x @ P["head.w"] + P["head.b"]
        return out.reshape(out.shape[:-1])

    __call__ = forward

    def predict(self, window) -> np.ndarray:
        """Deterministic (eval-mode) prediction as a numpy array."""
        return self.forward(window, dropout_active=False).data

    def attention_maps(self, window) -> list[AttentionRecord]:
        rec: list[AttentionRecord] = []
        self.forward(window, dropout_active=False, record=rec)
        return rec

    def predict_distribution(self, window, n_mc: int | None = None, rng: np.random.Generator | None = None):
        """MC-dropout mean and variance (plus the residual-variance floor)."""
        n_mc = self.config.n_mc if n_mc is None else n_mc
        if n_mc < 2:
            raise ValueError(f"n_mc must be >= 2, got {n_mc}")
        saved = self.rng
        if rng is not None:
            self.rng = rng
        try:
            samples = np.stack([self.forward(window, dropout_active=True).data for _ in range(n_mc)])
        finally:
            self.rng = saved
        mean = samples.mean(axis=0)
        var = samples.var(axis=0, ddof=1) + self.variance_floor
        return mean, var

    @property
    def variance_floor(self) -> float:
        return max(float(self.noise_var), MIN_VARIANCE)

    def forecast(self, window, horizon: int = 1) -> np.ndarray:
        """Recursive multi-step forecast; returns the ``horizon``-th step."""
        w = np.array(window, dtype=np.float64)
        pred = None
        for _ in range(horizon):
            pred = self.predict(w)
            w = np.concatenate([w[..., 1:], pred[..., None]], axis=-1)
        return pred

    def forecast_distribution(self, window, horizon: int = 1, n_mc: int | None = None,
                              rng: np.random.Generator | None = None):
        """Horizon-step MC-dropout distribution with each path unrolled recursively."""
        n_mc = self.config.n_mc if n_mc is None else n_mc
        if horizon == 1:
            return self.predict_distribution(window, n_mc, rng)
        if n_mc < 2:
            raise ValueError(f"n_mc must be >= 2, got {n_mc}")
        saved = self.rng
        if rng is not None:
            self.rng = rng
        try:
            w = np.repeat(np.asarray(window, dtype=np.float64)[None], n_mc, axis=0)
            for _ in range(horizon):
                pred = self.forward(w, dropout_active=True).data
                w = np.concatenate([w[..., 1:], pred[..., None]], axis=-1)
        finally:
            self.rng = saved
        return pred.mean(axis=0), pred.var(axis=0, ddof=1) + self.variance_floor

    # ------------------------------------------------------------------
    # checkpoints: JSON manifest + little-endian float64 blob
    def save(self, path, step: int = 0, extra: dict | None = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        blob_path = path.with_suffix(".bin")
        entries, offset, chunks = [], 0, []
        for name, p in self.params.items():
            arr = np.asarray(p.data, dtype="<f8")  # ascontiguousarray would promote 0-d to (1,)
            entries.append({"name": name, "offset": offset, "shape": list(arr.shape)})
            chunks.append(arr.tobytes())
            offset += arr.nbytes
        blob_path.write_bytes(b"".join(chunks))
        manifest = {
            "config": self.config.to_dict(),
            "step": int(step),
            "rho": _jsonable(self.rho),
            "lambda": _jsonable(self.lam),
            "noise_var": float(self.noise_var),
            "rng_state": self.rng.bit_generator.state,
            "locations": self.grid.locations.tolist(),
            "blob": blob_path.name,
            "parameters": entries,
        }
        if extra:
            manifest.update(extra)
        path.write_text(json.dumps(manifest, indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "GeoTransformer":
        path = Path(path)
        manifest = json.loads(path.read_text())
        config = ModelConfig.from_dict(manifest["config"])
        grid = SensorGrid(np.asarray(manifest["locations"], dtype=np.float64))
        model = cls(config, grid)
        raw = (path.parent / manifest["blob"]).read_bytes()
        state = {}
        for e in manifest["parameters"]:
            count = int(np.prod(e["shape"])) if e["shape"] else 1
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=e["offset"])
            state[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
        model.load_state_dict(state)
        model.noise_var = float(manifest.get("noise_var", 0.0))
        model.rng.bit_generator.state = manifest["rng_state"]
        return model


def _jsonable(v):
    if v is None:
        return None
    if isinstance(v, np.ndarray):
        return v.tolist()
    return float(v)


def export_attention_maps(records: list[AttentionRecord], directory, prefix: str = "") -> list[Path]:
    """One CSV per (layer, head) plus the bias matrix, if any."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for li, rec in enumerate(records):
        for h in range(rec.weights.shape[0]):
            p = directory / f"{prefix}attn_layer{li}_head{h}.csv"
            np.savetxt(p, rec.weights[h], delimiter=",", fmt="%.17g")
            paths.append(p)
    if records and records[0].bias is not None:
        b = records[0].bias
        if b.ndim == 2:
            p = directory / f"{prefix}geo_bias.csv"
            np.savetxt(p, b, delimiter=",", fmt="%.17g")
            paths.append(p)
        else:
            for h in range(b.shape[0]):
                p = directory / f"{prefix}geo_bias_head{h}.csv"
                np.savetxt(p, b[h], delimiter=",", fmt="%.17g")
                paths.append(p)
    return paths


__all__ = ["Variant", "ModelConfig", "AttentionRecord", "GeoTransformer", "export_attention_maps"]
