"""Loss assembly, training with early stopping, prediction, and baselines."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gammaln

from . import autodiff as ad
from .autodiff import ParameterStore, Tape, Tensor, adam_step
from .data import DemandTensor, ODGraph, make_windows
from .encoder import (
    EncoderConfig,
    ForecastField,
    encode,
    heads,
    init_parameters,
    load_checkpoint,
    save_checkpoint,
    to_field,
)
from .errors import Diverged, NonFinite
from .tweedie import MU_FLOOR, ZERO_FLOOR, Family, _log_density, series_peak

logger = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)
_POW_FLOOR = 1e-12


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    l2_weight: float = 1e-5
    max_epochs: int = 200
    patience: int = 10
    shuffle: bool = False
    seed: int = 0
    objective: str = "surrogate"  # or "exact": full series log-density

    def __post_init__(self):
        if self.objective not in ("surrogate", "exact"):
            raise ValueError(f"objective must be 'surrogate' or 'exact', got {self.objective!r}")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.l2_weight < 0:
            raise ValueError("l2_weight must be >= 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


@dataclass
class TrainedModel:
    store: ParameterStore
    encoder_config: EncoderConfig
    train_config: TrainConfig
    family: Family
    history: list[tuple[int, float, float]] = field(default_factory=list)
    best_epoch: int = 0

    def save(self, directory) -> None:
        """Checkpoint files plus ``history.csv`` (epoch, train_loss, val_loss)."""
        directory = Path(directory)
        save_checkpoint(
            directory,
            self.store,
            self.encoder_config,
            self.family,
            extra={"train_config": asdict(self.train_config), "best_epoch": self.best_epoch},
        )
        (directory / "history.csv").write_text(history_csv(self.history))

    @classmethod
    def load(cls, directory) -> "TrainedModel":
        directory = Path(directory)
        store, enc, family, manifest = load_checkpoint(directory)
        history = []
        path = directory / "history.csv"
        if path.exists():
            for row in csv.DictReader(io.StringIO(path.read_text())):
                history.append((int(row["epoch"]), float(row["train_loss"]), float(row["val_loss"])))
        tc = TrainConfig(**manifest.get("train_config", {}))
        return cls(store, enc, tc, family, history, manifest.get("best_epoch", 0))


def history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_loss"])
    for epoch, tr, va in history:
        w.writerow([epoch, repr(float(tr)), repr(float(va))])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _powe(base: Tensor, exponent) -> Tensor:
    """base ** exponent as exp(exponent * log(base)), base floored at 1e-12."""
    return ad.exp(exponent * ad.log(ad.clamp(base, _POW_FLOOR, None)))


def tweedie_loglik(x: np.ndarray, mu: Tensor, phi: Tensor, rho: Tensor) -> Tensor:
    """Elementwise training log-likelihood: exact zero branch, j_max surrogate for x > 0."""
    x = np.asarray(x, dtype=np.float64)
    zero = x == 0
    xs = np.where(zero, 1.0, x)
    mu = ad.clamp(mu, MU_FLOOR, None)
    two_m = 2.0 - rho
    one_m = 1.0 - rho
    mu_2 = _powe(mu, two_m) / two_m
    zero_branch = -(mu_2 / phi)
    alpha_s = two_m / one_m
    jmax = _powe(Tensor(xs), two_m) / (two_m * phi)
    pos_branch = (
        (xs * _powe(mu, one_m) / one_m - mu_2) / phi
        - (ad.log(jmax) + 0.5 * ad.log(-alpha_s) + np.log(xs))
        + jmax * (alpha_s - 1.0)
    )
    return ad.where(zero, zero_branch, pos_branch)


def tweedie_exact_loglik(x: np.ndarray, mu: Tensor, phi: Tensor, rho: Tensor) -> Tensor:
    """Elementwise exact Tweedie log-likelihood with the series summed on the tape.

    Each entry sums a window of series indices centred on its largest term,
    sized from the current parameter values to cover all significant terms.
    The index set is a constant of the pass, so the gradient is that of the
    truncated sum.
    """
    x = np.asarray(x, dtype=np.float64)
    zero = x == 0
    xs = np.where(zero, 1.0, x)
    mu = ad.clamp(mu, MU_FLOOR, None)
    two_m = 2.0 - rho
    one_m = 1.0 - rho
    mu_2 = _powe(mu, two_m) / two_m
    zero_branch = -(mu_2 / phi)
    peak = series_peak(xs, phi.value, rho.value).reshape(xs.shape)
    half = np.ceil(8.0 * np.sqrt(peak) + 10.0)
    first = np.maximum(1.0, peak - half)
    width = int(np.max(peak + half - first)) + 1
    j = first[..., None] + np.arange(width, dtype=float)
    alpha_s = two_m / one_m
    a3 = ad.reshape(alpha_s, alpha_s.shape + (1,))
    c = a3 * ad.log(ad.reshape(rho, rho.shape + (1,)) - 1.0) - (1.0 - a3) * ad.log(
        ad.reshape(phi, phi.shape + (1,))
    ) - ad.log(ad.reshape(two_m, two_m.shape + (1,)))
    logx = np.log(xs)[..., None]
    terms = j * (c - a3 * logx) - gammaln(j + 1.0) - ad.lgamma(-(a3 * j))
    shift = terms.value.max(axis=-1)
    lse = ad.log(ad.reduce_sum(ad.exp(terms - shift[..., None]), axis=-1)) + shift
    pos_branch = (xs * _powe(mu, one_m) / one_m - mu_2) / phi - np.log(xs) + lse
    return ad.where(zero, zero_branch, pos_branch)


def family_loglik(x: np.ndarray, out: dict[str, Tensor], family: Family,
                  objective: str = "surrogate") -> Tensor:
    """Elementwise log-likelihood of the targets under the model's family.

    For the Tweedie family ``objective`` picks the closed-form surrogate or
    the exact series; the other families are always exact.
    """
    x = np.asarray(x, dtype=np.float64)
    mu = out["mu"]
    if family is Family.TWEEDIE:
        if objective == "exact":
            return tweedie_exact_loglik(x, mu, out["phi"], out["rho"])
        return tweedie_loglik(x, mu, out["phi"], out["rho"])
    if family is Family.GAUSSIAN:
        phi = out["phi"]
        return -0.5 * (_LOG_2PI + ad.log(phi)) - (x - mu) * (x - mu) / (2.0 * phi)
    mu = ad.clamp(mu, MU_FLOOR, None)
    if family is Family.POISSON:
        return x * ad.log(mu) - mu - gammaln(x + 1.0)
    phi = out["phi"]
    if np.any(x == 0):
        logger.debug("substituting x=%g for zeros under the %s family", ZERO_FLOOR, family.value)
    xf = np.where(x > 0, x, ZERO_FLOOR)
    if family is Family.GAMMA:
        shape = 1.0 / phi
        return (
            -ad.lgamma(shape)
            - shape * ad.log(phi * mu)
            + (shape - 1.0) * np.log(xf)
            - xf / (phi * mu)
        )
    # inverse Gaussian, variance phi * mu**3
    return -0.5 * (_LOG_2PI + ad.log(phi) + 3.0 * np.log(xf)) - (xf - mu) * (xf - mu) / (
        2.0 * phi * mu * mu * xf
    )


def _check_finite(ll: Tensor) -> None:
    bad = ~np.isfinite(ll.value)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NonFinite(f"non-finite log-likelihood at (node, horizon) index {idx[-2:]}")


def loss_total(out: dict[str, Tensor], target, leaves: dict[str, Tensor] | None = None,
               l2_weight: float = 0.0, family: Family = Family.TWEEDIE,
               objective: str = "surrogate") -> Tensor:
    """Mean negative log-likelihood over all (node, horizon) entries plus l2_weight * sum(theta**2).

    Zero targets use the exact zero-mass branch; positive targets use the
    j_max surrogate (or the exact series when ``objective="exact"``).
    """
    ll = family_loglik(target, out, family, objective)
    _check_finite(ll)
    loss = -ad.reduce_mean(ll)
    if l2_weight and leaves:
        reg = None
        for t in leaves.values():
            sq = ad.reduce_sum(t * t)
            reg = sq if reg is None else reg + sq
        loss = loss + l2_weight * reg
    return loss


def forward(leaves, x, graph: ODGraph, cfg: EncoderConfig, family: Family, *,
            training=False, step=0) -> dict[str, Tensor]:
    z = encode(leaves, x, graph, cfg, training=training, step=step)
    return heads(leaves, z, family, cfg.head_epsilon)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _eval_loss(store, windows, graph, cfg, family, objective="surrogate", batch=256) -> float:
    """Mean validation NLL (training objective, no L2) in evaluation mode."""
    leaves = {n: Tensor(v) for n, v in store.params.items()}
    total, count = 0.0, 0
    for s in range(0, len(windows), batch):
        x = windows.inputs[s : s + batch]
        y = windows.targets[s : s + batch]
        out = forward(leaves, x, graph, cfg, family)
        if family is Family.TWEEDIE and objective == "exact":
            ll = _log_density(
                y, np.maximum(out["mu"].value, MU_FLOOR), out["phi"].value, out["rho"].value
            )
        else:
            ll = family_loglik(y, out, family, objective).value
        total += float(-ll.sum())
        count += ll.size
    return total / count


def train(config: TrainConfig, train_data, val_data, graph: ODGraph,
          encoder_config: EncoderConfig, family: Family = Family.TWEEDIE,
          callback=None) -> TrainedModel:
    """Full-graph Adam training with early stopping on validation NLL.

    ``train_data`` and ``val_data`` are DemandTensors (or count arrays); each
    training window is one gradient step. Training stops once the validation
    loss has not improved for ``patience`` consecutive epochs and the
    best-validation parameters are returned.

    Raises:
        Diverged: the training loss was non-finite on two consecutive steps.
    """
    cfg = encoder_config
    tw = make_windows(train_data, cfg.input_len, cfg.horizon)
    vw = make_windows(val_data, cfg.input_len, cfg.horizon)
    if len(tw) == 0 or len(vw) == 0:
        raise ValueError("training and validation splits must yield windows")
    store = init_parameters(cfg, family, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    history = []
    best = (math.inf, 0, store.copy())
    stale = 0
    bad_steps = 0
    step = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(tw)) if config.shuffle else np.arange(len(tw))
        losses = []
        for i in order:
            leaves = store.bind()
            try:
                with Tape() as tape:
                    out = forward(leaves, tw.inputs[i], graph, cfg, family, training=True, step=step)
                    loss = loss_total(out, tw.targets[i], family=family, objective=config.objective)
                if not np.isfinite(loss.value):
                    raise NonFinite("training loss is not finite")
            except NonFinite as exc:
                bad_steps += 1
                if bad_steps >= 2:
                    raise Diverged(f"epoch {epoch}, step {step}: {exc}") from exc
                step += 1
                continue
            bad_steps = 0
            tape.backward(loss)
            adam_step(store, lr=config.learning_rate, l2_weight=config.l2_weight)
            losses.append(float(loss.value) + config.l2_weight * store.l2())
            step += 1
        train_loss = float(np.mean(losses)) if losses else math.nan
        val_loss = _eval_loss(store, vw, graph, cfg, family, config.objective)
        history.append((epoch, train_loss, val_loss))
        logger.info("epoch %d train %.6f val %.6f", epoch, train_loss, val_loss)
        if callback is not None:
            callback(epoch, train_loss, val_loss)
        if val_loss < best[0]:
            best = (val_loss, epoch, store.copy())
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return TrainedModel(best[2], cfg, config, family, history, best[1])


def predict(model: TrainedModel, window, graph: ODGraph) -> ForecastField:
    """Evaluation-mode forecast for one (V, t) window or a (B, V, t) batch."""
    leaves = {n: Tensor(v) for n, v in model.store.params.items()}
    out = forward(leaves, window, graph, model.encoder_config, model.family)
    return to_field(out, model.family)


def predict_windows(model: TrainedModel, windows, graph: ODGraph, batch: int = 256) -> ForecastField:
    """Forecast every window; fields have shape (n_windows, V, k)."""
    parts = [predict(model, windows.inputs[s : s + batch], graph) for s in range(0, len(windows), batch)]
    return ForecastField(
        np.concatenate([p.mu for p in parts]),
        np.concatenate([p.phi for p in parts]),
        np.concatenate([p.rho for p in parts]),
    )


# ---------------------------------------------------------------------------
# historical average
# ---------------------------------------------------------------------------


def time_slot(epoch_seconds, resolution_minutes: int, weekly: bool = True):
    """Time-of-day (and, if weekly, day-of-week) slot of a window start."""
    per = 86400 * (7 if weekly else 1)
    return (np.asarray(epoch_seconds) % per) // (60 * resolution_minutes)


def baseline_ha(train: DemandTensor, target_times, weekly: bool = True) -> np.ndarray:
    """Historical-average forecasts.

    The forecast for pair i at a window starting at ``target_times[j]`` (epoch
    seconds) is the mean training demand of pair i over windows in the same
    slot. Slots never seen in training fall back to the pair's overall mean.

    Returns:
        Array of shape (V, len(target_times)).
    """
    t = np.arange(train.num_windows)
    slots = time_slot(train.start_time + 60 * train.resolution_minutes * t,
                      train.resolution_minutes, weekly)
    target_slots = time_slot(np.asarray(target_times), train.resolution_minutes, weekly)
    counts = train.counts.astype(np.float64)
    overall = counts.mean(axis=1)
    out = np.empty((train.num_pairs, len(target_slots)))
    for j, s in enumerate(target_slots):
        mask = slots == s
        out[:, j] = counts[:, mask].mean(axis=1) if mask.any() else overall
    return out


def windows_for(segment, cfg: EncoderConfig):
    return make_windows(segment, cfg.input_len, cfg.horizon)


__all__ = [
    "TrainConfig", "TrainedModel", "loss_total", "tweedie_loglik", "family_loglik",
    "forward", "train", "predict", "predict_windows", "baseline_ha", "history_csv",
    "windows_for", "time_slot",
]
