"""Spatial-temporal graph encoder and Tweedie parameter heads.

The encoder applies ``num_layers`` diffusion graph convolutions to every
input time step, then a stack of dilated causal convolutions over time, and
keeps the last step as the node embedding Z. Three linear heads map Z to
(mu, phi, rho) for each forecast step.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .data import ODGraph
from .errors import ShapeMismatch, TooShort
from .tweedie import EPS, Family


@dataclass
class EncoderConfig:
    num_layers: int = 2
    hidden_units: int = 42
    diffusion_steps: int = 2
    tcn_kernel: int = 3
    tcn_dilations: list[int] = field(default_factory=lambda: [1, 2])
    dropout: float = 0.2
    embed_dim: int = 42
    horizon: int = 1
    input_len: int = 8
    head_epsilon: float = EPS
    seed: int = 0

    def __post_init__(self):
        for name in ("num_layers", "hidden_units", "tcn_kernel", "embed_dim", "horizon", "input_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.diffusion_steps < 0:
            raise ValueError("diffusion_steps must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if not self.tcn_dilations or min(self.tcn_dilations) < 1:
            raise ValueError("tcn_dilations must be positive")
        if self.receptive_field > self.input_len:
            raise ValueError(
                f"temporal receptive field {self.receptive_field} exceeds input_len {self.input_len}"
            )

    @property
    def receptive_field(self) -> int:
        return 1 + (self.tcn_kernel - 1) * sum(self.tcn_dilations)


@dataclass
class ForecastField:
    """Per-pair, per-step distribution parameters, each of shape (V, k)."""

    mu: np.ndarray
    phi: np.ndarray
    rho: np.ndarray

    @property
    def shape(self):
        return self.mu.shape

    def clamped_mu(self, floor: float) -> np.ndarray:
        return np.maximum(self.mu, floor)


def _glorot(rng, shape, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def init_parameters(cfg: EncoderConfig, family: Family = Family.TWEEDIE, seed: int = 0) -> ParameterStore:
    """Create encoder and head parameters.

    Head biases start at 1 for mu and phi so that the ReLU heads begin in
    their active region.
    """
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    d_in = 1
    for layer in range(cfg.num_layers):
        for s in range(cfg.diffusion_steps + 1):
            for direction in ("fwd", "bwd"):
                store.add(
                    f"dgcn{layer}.{direction}{s}",
                    _glorot(rng, (d_in, cfg.hidden_units), d_in, cfg.hidden_units),
                )
        d_in = cfg.hidden_units
    n_tcn = len(cfg.tcn_dilations)
    for i in range(n_tcn):
        d_out = cfg.embed_dim if i == n_tcn - 1 else cfg.hidden_units
        fan = cfg.tcn_kernel * d_in
        store.add(f"tcn{i}.w", _glorot(rng, (cfg.tcn_kernel, d_in, d_out), fan, d_out))
        store.add(f"tcn{i}.b", np.zeros(d_out))
        d_in = d_out
    k = cfg.horizon
    for name in head_names(family):
        store.add(f"head.{name}.w", _glorot(rng, (cfg.embed_dim, k), cfg.embed_dim, k))
        store.add(f"head.{name}.b", np.full(k, 1.0 if name in ("mu", "phi") else 0.0))
    return store


def head_names(family: Family) -> tuple[str, ...]:
    """Heads present for a family: the fixed-index members have no rho head, Poisson has no phi."""
    if family is Family.TWEEDIE:
        return ("mu", "phi", "rho")
    if family is Family.POISSON:
        return ("mu",)
    return ("mu", "phi")


def _dropout_seed(base: int, step: int, site: int) -> int:
    return int(np.random.SeedSequence([base, step, site]).generate_state(1)[0])


def dgcn_layer(h: Tensor, graph: ODGraph, weights_fwd, weights_bwd, *, dropout=0.0,
               training=False, seed=0) -> Tensor:
    """Diffusion graph convolution over the node axis (-2) of ``h``.

    Computes relu(sum_s F^s H W_fwd[s] + B^s H W_bwd[s]) for s = 0..K with
    F and B the forward/backward transition matrices, then dropout.
    """
    n = graph.num_nodes
    if h.shape[-2] != n:
        raise ShapeMismatch(f"features have {h.shape[-2]} nodes, graph has {n}")
    fwd = Tensor(graph.forward_transition)
    bwd = Tensor(graph.backward_transition)
    hf, hb = h, h
    out = None
    for s, (wf, wb) in enumerate(zip(weights_fwd, weights_bwd)):
        if s:
            hf = ad.matmul(fwd, hf)
            hb = ad.matmul(bwd, hb)
        term = ad.matmul(hf, wf) + ad.matmul(hb, wb)
        out = term if out is None else out + term
    out = ad.relu(out)
    return ad.dropout(out, dropout, seed, training)


def tcn_block(seq: Tensor, weights, biases, dilations, kernel_size: int) -> Tensor:
    """Stacked causal dilated convolutions over axis -2, ReLU between layers.

    Args:
        seq: (V, t, d) features.

    Returns:
        (V, t, d') features; output step t depends on input steps <= t only.
    """
    field = 1 + (kernel_size - 1) * sum(dilations)
    if seq.shape[-2] < field:
        raise TooShort(f"sequence length {seq.shape[-2]} below receptive field {field}")
    out = seq
    for i, (w, b, dil) in enumerate(zip(weights, biases, dilations)):
        out = ad.causal_conv1d(out, w, dil) + b
        if i < len(dilations) - 1:
            out = ad.relu(out)
    return out


def encode(leaves: dict, x: np.ndarray, graph: ODGraph, cfg: EncoderConfig, *,
           training: bool = False, step: int = 0) -> Tensor:
    """Node embeddings Z from an input window.

    Args:
        x: (V, t) window, or (B, V, t) for a batch of windows.

    Returns:
        Tensor of shape (V, embed_dim), or (B, V, embed_dim) for a batch.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (2, 3) or x.shape[-2] != graph.num_nodes:
        raise ShapeMismatch(f"window shape {x.shape} inconsistent with {graph.num_nodes} nodes")
    if x.shape[-1] != cfg.input_len:
        raise ShapeMismatch(f"window length {x.shape[-1]} != input_len {cfg.input_len}")
    h = Tensor(np.swapaxes(x, -1, -2)[..., None])  # (..., t, V, 1)
    K = cfg.diffusion_steps
    for layer in range(cfg.num_layers):
        h = dgcn_layer(
            h,
            graph,
            [leaves[f"dgcn{layer}.fwd{s}"] for s in range(K + 1)],
            [leaves[f"dgcn{layer}.bwd{s}"] for s in range(K + 1)],
            dropout=cfg.dropout,
            training=training,
            seed=_dropout_seed(cfg.seed, step, layer),
        )
    axes = (1, 0, 2) if x.ndim == 2 else (0, 2, 1, 3)
    seq = ad.transpose(h, axes)  # (..., V, t, d)
    n = len(cfg.tcn_dilations)
    out = tcn_block(
        seq,
        [leaves[f"tcn{i}.w"] for i in range(n)],
        [leaves[f"tcn{i}.b"] for i in range(n)],
        cfg.tcn_dilations,
        cfg.tcn_kernel,
    )
    return out[..., -1, :]


def heads(leaves: dict, z: Tensor, family: Family = Family.TWEEDIE,
          eps: float = EPS) -> dict[str, Tensor]:
    """Map embeddings to distribution parameters, each (V, k).

    mu = relu(Z W + b); phi = relu(Z W + b) + eps;
    rho = sigmoid(Z W + b) + 1 + eps, then capped at 2 - eps.
    """
    out = {"mu": ad.relu(ad.matmul(z, leaves["head.mu.w"]) + leaves["head.mu.b"])}
    if "head.phi.w" in leaves:
        out["phi"] = ad.relu(ad.matmul(z, leaves["head.phi.w"]) + leaves["head.phi.b"]) + eps
    if "head.rho.w" in leaves:
        rho = ad.sigmoid(ad.matmul(z, leaves["head.rho.w"]) + leaves["head.rho.b"]) + (1.0 + eps)
        out["rho"] = ad.clamp(rho, None, 2.0 - eps)
    return out


def to_field(out: dict[str, Tensor], family: Family) -> ForecastField:
    mu = out["mu"].value
    phi = out["phi"].value if "phi" in out else np.ones_like(mu)
    rho = out["rho"].value if "rho" in out else np.full_like(mu, family.rho)
    return ForecastField(mu.copy(), phi.copy(), rho.copy())


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(directory, store: ParameterStore, cfg: EncoderConfig, family: Family,
                    extra: dict | None = None) -> None:
    """Write manifest.json plus one little-endian float64 .bin file per parameter."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "encoder_config": asdict(cfg),
        "family": family.value,
        "parameters": [
            {"name": n, "shape": list(v.shape), "file": f"{n}.bin"} for n, v in store.params.items()
        ],
    }
    if extra:
        manifest.update(extra)
    for n, v in store.params.items():
        (directory / f"{n}.bin").write_bytes(np.ascontiguousarray(v, dtype="<f8").tobytes())
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory):
    """Inverse of `save_checkpoint`: returns (store, config, family, manifest)."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    cfg = EncoderConfig(**manifest["encoder_config"])
    store = ParameterStore()
    for entry in manifest["parameters"]:
        raw = np.frombuffer((directory / entry["file"]).read_bytes(), dtype="<f8")
        store.add(entry["name"], raw.reshape(entry["shape"]))
    return store, cfg, Family(manifest["family"]), manifest
