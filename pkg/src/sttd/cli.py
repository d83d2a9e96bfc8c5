"""Command-line entry point: ``sttd <subcommand> --config run.json``.

Subcommands and the files they write into the output directory:

    ingest            demand.json + demand.bin
    synth             demand.json + demand.bin, truth.json + truth_{mu,phi,rho}.bin
    train             model_<family>/ (manifest, parameter buffers, history.csv)
    evaluate          metrics_<family>.json (also printed)
    predict           forecast_<family>.json + forecast_<family>.bin
    export-surfaces   surface_<family>.csv

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .data import (
    DemandTensor,
    SyntheticSpec,
    build_adjacency,
    ingest_trips,
    make_windows,
    sample_od_grid,
    split_chronological,
    synth_generate,
)
from .encoder import EncoderConfig, ForecastField
from .errors import STTDError
from .metrics import evaluate, surface_export
from .trainer import TrainConfig, TrainedModel, predict_windows, train
from .tweedie import Family

logger = logging.getLogger("sttd")

FAMILIES = [f.value for f in Family]

DEFAULT_CONFIG = {
    "seed": 0,
    "family": "tweedie",
    "output_dir": "run",
    "data": {
        "records_path": None,
        "zones": None,
        "dest_zones": None,
        "resolution_minutes": 15,
        "period": None,
        "grid": None,
        "adjacency": "shared_endpoint",
        "correlation_threshold": 0.5,
    },
    "synthetic": {
        "origins": 5,
        "dests": 10,
        "horizon": 2000,
        "mu": [0.3, 3.0],
        "phi": 1.0,
        "rho": 1.5,
        "daily_amplitude": 0.0,
        "resolution_minutes": 15,
    },
    "encoder": asdict(EncoderConfig()),
    "train": asdict(TrainConfig()),
    "surface_window": -1,
}


class ConfigError(Exception):
    """Invalid configuration; the message names the offending key."""


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict) and base[key] and isinstance(value, dict):
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = value
    return out


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    cfg = _merge(DEFAULT_CONFIG, raw)
    validate_config(cfg)
    return cfg


def _range_check(cfg, key, value, lo, hi, inclusive=False):
    vals = np.atleast_1d(np.asarray(value, dtype=float))
    ok = (vals >= lo) & (vals <= hi) if inclusive else (vals > lo) & (vals < hi)
    if not ok.all():
        raise ConfigError(f"{key} must lie in {'[' if inclusive else '('}{lo}, {hi}{']' if inclusive else ')'}")


def validate_config(cfg: dict) -> None:
    if cfg["family"] not in FAMILIES:
        raise ConfigError(f"family must be one of {FAMILIES}")
    syn = cfg["synthetic"]
    _range_check(cfg, "synthetic.rho", syn["rho"], 1.0, 2.0)
    _range_check(cfg, "synthetic.phi", syn["phi"], 0.0, np.inf)
    _range_check(cfg, "synthetic.mu", syn["mu"], 0.0, np.inf)
    for key in ("origins", "dests", "horizon"):
        if not isinstance(syn[key], int) or syn[key] < 1:
            raise ConfigError(f"synthetic.{key} must be a positive integer")
    for section, klass in (("encoder", EncoderConfig), ("train", TrainConfig)):
        names = {f.name for f in fields(klass)}
        for key in cfg[section]:
            if key not in names:
                raise ConfigError(f"unknown config key '{section}.{key}'")
        try:
            klass(**cfg[section])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}: {exc}") from None
    _range_check(cfg, "encoder.dropout", cfg["encoder"]["dropout"], 0.0, 1.0 - 1e-12, inclusive=True)
    if cfg["data"]["resolution_minutes"] not in (5, 15, 60):
        raise ConfigError("data.resolution_minutes must be 5, 15 or 60")


def component_seeds(root: int) -> dict[str, int]:
    """Deterministic per-component seeds split from the root seed."""
    names = ("synth", "grid", "train", "dropout")
    children = np.random.SeedSequence(root).spawn(len(names))
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _guard(paths, overwrite: bool) -> None:
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not overwrite:
        raise ConfigError(f"output exists (pass --overwrite): {', '.join(existing)}")


def _family(cfg) -> Family:
    return Family(cfg["family"])


def cmd_ingest(cfg, out: Path, overwrite: bool) -> None:
    d = cfg["data"]
    for key in ("records_path", "zones", "period"):
        if d[key] is None:
            raise ConfigError(f"data.{key} is required for ingest")
    if not Path(d["records_path"]).exists():
        raise ConfigError(f"data.records_path {d['records_path']} does not exist")
    _guard([out / "demand.json", out / "demand.bin"], overwrite)
    tensor = ingest_trips(d["records_path"], d["zones"], d["resolution_minutes"], tuple(d["period"]),
                          dest_zones=d["dest_zones"])
    if d["grid"]:
        seeds = component_seeds(cfg["seed"])
        tensor = sample_od_grid(tensor, d["grid"]["m"], d["grid"]["u"], seeds["grid"])
    tensor.save(out / "demand")
    print(f"wrote {out / 'demand.json'} ({tensor.num_pairs} pairs x {tensor.num_windows} windows)")


def synthetic_spec(cfg) -> SyntheticSpec:
    syn = cfg["synthetic"]
    seeds = component_seeds(cfg["seed"])
    v = syn["origins"] * syn["dests"]
    mu = syn["mu"]
    if isinstance(mu, list) and len(mu) == 2 and v != 2:
        # [low, high]: one fixed mean per node, drawn uniformly
        mu = np.random.default_rng(seeds["synth"]).uniform(mu[0], mu[1], size=v)
    return SyntheticSpec(
        origins=syn["origins"], dests=syn["dests"], horizon=syn["horizon"],
        mu=np.asarray(mu, float), phi=np.asarray(syn["phi"], float), rho=np.asarray(syn["rho"], float),
        daily_amplitude=syn["daily_amplitude"], resolution_minutes=syn["resolution_minutes"],
        seed=seeds["synth"] + 1,
    )


def cmd_synth(cfg, out: Path, overwrite: bool) -> None:
    targets = [out / "demand.json", out / "demand.bin", out / "truth.json"]
    _guard(targets, overwrite)
    tensor, truth = synth_generate(synthetic_spec(cfg))
    tensor.save(out / "demand")
    meta = {"shape": list(truth["mu"].shape), "fields": ["mu", "phi", "rho"]}
    (out / "truth.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for name in ("mu", "phi", "rho"):
        (out / f"truth_{name}.bin").write_bytes(np.ascontiguousarray(truth[name], "<f8").tobytes())
    print(f"wrote {out / 'demand.json'} and truth files ({tensor.num_pairs} x {tensor.num_windows})")


def load_truth(out: Path) -> dict[str, np.ndarray]:
    meta = json.loads((out / "truth.json").read_text())
    return {
        n: np.frombuffer((out / f"truth_{n}.bin").read_bytes(), "<f8").reshape(meta["shape"])
        for n in meta["fields"]
    }


def _load_demand(out: Path) -> DemandTensor:
    if not (out / "demand.json").exists():
        raise ConfigError(f"no demand tensor in {out}; run ingest or synth first")
    return DemandTensor.load(out / "demand")


def _graph(cfg, tensor, train_split):
    d = cfg["data"]
    return build_adjacency(tensor.pair_index, d["adjacency"], counts=train_split.counts,
                           threshold=d["correlation_threshold"])


def _configs(cfg):
    seeds = component_seeds(cfg["seed"])
    enc = EncoderConfig(**{**cfg["encoder"], "seed": seeds["dropout"]})
    tc = TrainConfig(**{**cfg["train"], "seed": seeds["train"]})
    return enc, tc


def cmd_train(cfg, out: Path, overwrite: bool) -> None:
    family = _family(cfg)
    model_dir = out / f"model_{family.value}"
    _guard([model_dir], overwrite)
    tensor = _load_demand(out)
    tr, va, _ = split_chronological(tensor)
    graph = _graph(cfg, tensor, tr)
    enc, tc = _configs(cfg)
    model = train(tc, tr, va, graph, enc, family)
    model.save(model_dir)
    print(f"wrote {model_dir} (best epoch {model.best_epoch} of {len(model.history)})")


def _load_model(out: Path, family: Family) -> TrainedModel:
    model_dir = out / f"model_{family.value}"
    if not (model_dir / "manifest.json").exists():
        raise ConfigError(f"no checkpoint at {model_dir}; run train --family {family.value} first")
    return TrainedModel.load(model_dir)


def _test_forecast(cfg, out: Path):
    family = _family(cfg)
    tensor = _load_demand(out)
    tr, _, te = split_chronological(tensor)
    graph = _graph(cfg, tensor, tr)
    model = _load_model(out, family)
    windows = make_windows(te, model.encoder_config.input_len, model.encoder_config.horizon)
    return family, model, windows, predict_windows(model, windows, graph)


def cmd_evaluate(cfg, out: Path, overwrite: bool) -> None:
    family = _family(cfg)
    path = out / f"metrics_{family.value}.json"
    _guard([path], overwrite)
    family, _, windows, fc = _test_forecast(cfg, out)
    report = evaluate(fc, windows.targets, family)
    text = report.to_json()
    path.write_text(text)
    sys.stdout.write(text)


def cmd_predict(cfg, out: Path, overwrite: bool) -> None:
    family = _family(cfg)
    stem = out / f"forecast_{family.value}"
    _guard([stem.with_suffix(".json"), stem.with_suffix(".bin")], overwrite)
    family, _, windows, fc = _test_forecast(cfg, out)
    save_forecast(stem, fc)
    print(f"wrote {stem.with_suffix('.json')} (shape {list(fc.mu.shape)})")


def save_forecast(stem: Path, fc: ForecastField) -> None:
    """JSON sidecar plus little-endian float64 buffer holding mu, phi, rho back to back."""
    meta = {"shape": list(fc.mu.shape), "fields": ["mu", "phi", "rho"], "dtype": "<f8"}
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    buf = b"".join(np.ascontiguousarray(a, "<f8").tobytes() for a in (fc.mu, fc.phi, fc.rho))
    stem.with_suffix(".bin").write_bytes(buf)


def load_forecast(stem) -> ForecastField:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    flat = np.frombuffer(stem.with_suffix(".bin").read_bytes(), "<f8").reshape(3, *meta["shape"])
    return ForecastField(flat[0].copy(), flat[1].copy(), flat[2].copy())


def cmd_export_surfaces(cfg, out: Path, overwrite: bool) -> None:
    family = _family(cfg)
    path = out / f"surface_{family.value}.csv"
    _guard([path], overwrite)
    family, _, windows, fc = _test_forecast(cfg, out)
    w = cfg["surface_window"]
    field = ForecastField(fc.mu[w], fc.phi[w], fc.rho[w])
    path.write_text(surface_export(field, windows.targets[w]))
    print(f"wrote {path}")


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "export-surfaces": cmd_export_surfaces,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sttd", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--seed", type=int, help="override the root seed")
    parser.add_argument("--family", choices=FAMILIES, help="distribution family (model variant)")
    parser.add_argument("--output-dir", help="override output_dir")
    parser.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.family is not None:
            cfg["family"] = args.family
        if args.output_dir is not None:
            cfg["output_dir"] = args.output_dir
        out = Path(cfg["output_dir"])
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out, args.overwrite)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (STTDError, FloatingPointError) as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
