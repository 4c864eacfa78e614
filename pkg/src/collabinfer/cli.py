"""Command-line experiment runner.

Subcommands: infer, latency-sweep, ensemble-sweep, fairness-sweep, partition,
train. Settings come from built-in defaults, then an optional ``--config``
file of ``key = value`` lines, then command-line flags (flags win).
Exit codes: 0 success, 2 configuration error, 3 protocol abort.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import subprocess
import sys
from functools import lru_cache
from pathlib import Path

import numpy as np

from .ensemble import WeightingConfig, canonical_scheme, run_ensemble_inference
from .errors import CollabInferError, PartyAbort, UnknownArchitecture, UnknownPreset
from .fixedpoint import RingParams
from .incentive import EvaluationBatch, fairness_rows
from .nn import (
    ARCHITECTURES,
    LabeledDataset,
    TrainConfig,
    accuracy,
    build_model,
    forward,
    load_digits_dataset,
    save_weights,
    softmax,
    train,
    train_test_split,
)
from .partition import PartitionConfig, dirichlet_partition, write_partition
from .pipeline import FaultPlan, run_job, setup_deployment
from .secure_nn import ApproxConfig
from .transport import PRESET_ORDER, load_preset, load_presets_file

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3
TINY_DIMS = [64, 32, 10]


class ConfigError(CollabInferError, ValueError):
    pass


def _floats(v) -> list[float]:
    return [float(t) for t in str(v).replace(";", ",").split(",") if t.strip()]


def _ints(v) -> list[int]:
    return [int(t) for t in str(v).replace(";", ",").split(",") if t.strip()]


def _strs(v) -> list[str]:
    return [t.strip() for t in str(v).replace(";", ",").split(",") if t.strip()]


def _opt_int(v):
    return None if v in (None, "", "none", "None") else int(v)


# key -> (converter, default)
SETTINGS: dict[str, tuple] = {
    "seed": (int, None),
    "seeds": (int, 1),
    "preset": (_strs, None),
    "presets_file": (str, None),
    "alpha": (_floats, [0.05, 1000.0]),
    "clients": (_ints, [5]),
    "parties": (int, 3),
    "scheme": (_strs, ["soft"]),
    "model": (str, "tiny"),
    "out": (str, None),
    "queries": (int, 8),
    "mode": (str, "plaintext_oracle"),
    "epochs": (int, 20),
    "learning_rate": (float, 0.1),
    "batch_size": (int, 32),
    "deposit": (int, 9),
    "funds": (int, 1000),
    "input": (_floats, None),
    "fail_phase": (_opt_int, None),
    "fail_party": (int, 0),
    "fail_offset": (int, 0),
    "beta": (float, 1.0),
    "gamma": (float, 1.0),
    "tta_views": (int, 2),
    "rotation_deg": (float, 10.0),
    "frac_bits": (int, 16),
    "comparison_bits": (int, 64),
    "exp_iterations": (int, 8),
    "reciprocal_newton_iters": (int, 10),
    "log_householder_iters": (int, 2),
    "min_samples": (int, 2),
}

COMMANDS = ("infer", "latency-sweep", "ensemble-sweep", "fairness-sweep", "partition", "train")
COMMAND_DEFAULTS = {
    "latency-sweep": {"model": "small_mlp", "queries": 1, "preset": list(PRESET_ORDER)},
    "fairness-sweep": {"seeds": 10, "scheme": ["uniform", "confidence", "agreement"]},
    "infer": {"preset": ["intra_zone"], "queries": 4},
}


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def read_config_file(path: str | Path) -> dict[str, str]:
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for n, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":" if ":" in line else None
        if sep is None:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, value = (t.strip() for t in line.split(sep, 1))
        out[key.replace("-", "_")] = value
    return out


def resolve_config(command: str, file_values: dict[str, str], flag_values: dict[str, object]) -> dict:
    cfg = {k: default for k, (_, default) in SETTINGS.items()}
    cfg.update(COMMAND_DEFAULTS.get(command, {}))
    for source in (file_values, flag_values):
        for key, raw in source.items():
            if key not in SETTINGS:
                raise ConfigError(f"unknown setting {key!r}")
            if raw is None:
                continue
            conv = SETTINGS[key][0]
            try:
                cfg[key] = conv(raw) if isinstance(raw, str) or conv in (int, float, str) else raw
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None
    if cfg["seed"] is None:
        raise ConfigError("a seed is required (--seed or 'seed = ...' in the config file)")
    try:
        cfg["scheme"] = [s if command == "fairness-sweep" else canonical_scheme(s) for s in cfg["scheme"]]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if command == "fairness-sweep" and any(s not in ("uniform", "confidence", "agreement") for s in cfg["scheme"]):
        raise ConfigError("fairness-sweep schemes must be uniform, confidence or agreement")
    if any(a <= 0 for a in cfg["alpha"]):
        raise ConfigError("alpha values must be positive")
    if any(k < 2 for k in cfg["clients"]) and command in ("ensemble-sweep", "fairness-sweep", "partition"):
        raise ConfigError("clients must be >= 2")
    if cfg["parties"] < 1:
        raise ConfigError("parties must be >= 1")
    if cfg["mode"] not in ("plaintext_oracle", "secure"):
        raise ConfigError("mode must be plaintext_oracle or secure")
    if cfg["model"] not in ARCHITECTURES and cfg["model"] not in ("tiny", "identity"):
        raise ConfigError(f"unknown model {cfg['model']!r}")
    if cfg["fail_phase"] is not None and cfg["fail_phase"] not in range(1, 6):
        raise ConfigError("fail_phase must be between 1 and 5")
    return cfg


def config_hash(cfg: dict) -> str:
    echo = {k: v for k, v in cfg.items() if k not in ("out",)}
    return hashlib.sha256(json.dumps(echo, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _git_hash() -> str | None:
    try:
        res = subprocess.run(["git", "rev-parse", "HEAD"], cwd=Path(__file__).resolve().parent,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    return res.stdout.strip() or None


def _provenance() -> dict:
    return {"git": _git_hash(), "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")}


def _params(cfg) -> RingParams:
    return RingParams(frac_bits=cfg["frac_bits"], comparison_bitlength=cfg["comparison_bits"])


def _approx(cfg) -> ApproxConfig:
    return ApproxConfig(exp_iterations=cfg["exp_iterations"], reciprocal_newton_iters=cfg["reciprocal_newton_iters"],
                        log_householder_iters=cfg["log_householder_iters"])


def _wcfg(cfg) -> WeightingConfig:
    return WeightingConfig(beta=cfg["beta"], gamma=cfg["gamma"], tta_views=cfg["tta_views"],
                           rotation_range=cfg["rotation_deg"])


def _preset(cfg, name: str, parties: int):
    if cfg["presets_file"]:
        table = load_presets_file(cfg["presets_file"], parties)
        if name in table:
            return table[name]
    return load_preset(name, parties)


# --------------------------------------------------------------------------
# shared experiment pieces
# --------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _digits_split(seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    return train_test_split(load_digits_dataset(), 0.25, seed)


def _train_cfg(cfg, seed: int) -> TrainConfig:
    return TrainConfig(epochs=cfg["epochs"], learning_rate=cfg["learning_rate"], batch_size=cfg["batch_size"],
                       seed=seed)


def client_models(cfg, alpha: float, clients: int, seed: int):
    """Partition the digit training split and train one tiny model per client."""
    train_set, test_set = _digits_split(seed)
    parts = dirichlet_partition(train_set, PartitionConfig(alpha, clients, seed, cfg["min_samples"]))
    models = []
    for k, part in enumerate(parts):
        init = build_model("custom", TINY_DIMS, seed=seed * 1000 + k)
        models.append(train(init, part, _train_cfg(cfg, seed * 1000 + k)))
    return models, parts, test_set


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _write_csv(rows: list[dict], out: str | None, stdout) -> None:
    fields: list[str] = []
    for row in rows:
        for key in row:
            if key not in fields:
                fields.append(key)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _cell(v) for k, v in row.items()})
    _emit(buf.getvalue(), out, stdout)


def _emit(text: str, out: str | None, stdout) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        stdout.write(text)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def _infer_inputs(cfg):
    seed = cfg["seed"]
    k_clients = cfg["clients"][0]
    model = cfg["model"]
    if model == "identity":
        if not cfg["input"]:
            raise ConfigError("the identity model needs --input v1,v2,...")
        v = np.asarray(cfg["input"], dtype=np.float64)
        m = build_model("custom", [len(v), len(v)], weights=[(np.eye(len(v)), np.zeros(len(v)))])
        return [m], v[None], None
    if model == "tiny":
        models, _, test_set = client_models(cfg, cfg["alpha"][0], max(k_clients, 2), seed)
        models = models[:k_clients]
        x = np.asarray([cfg["input"]]) if cfg["input"] else test_set.inputs[:cfg["queries"]]
        return models, x, test_set.image_shape
    models = [build_model(model, seed=seed * 1000 + k) for k in range(k_clients)]
    dim = ARCHITECTURES[model][0]
    rng = np.random.default_rng(seed)
    x = np.asarray([cfg["input"]]) if cfg["input"] else rng.uniform(-1, 1, size=(cfg["queries"], dim))
    shape = (32, 32, 3) if dim == 3072 else None
    return models, x, shape


def cmd_infer(cfg, stdout) -> int:
    models, x, image_shape = _infer_inputs(cfg)
    scheme = cfg["scheme"][0]
    parties = cfg["parties"]
    preset = _preset(cfg, cfg["preset"][0], parties)
    deployment = setup_deployment(parties, funds=cfg["funds"], seed=cfg["seed"])
    job_id = hashlib.sha256(f"job:{cfg['seed']}:{config_hash(cfg)}".encode()).digest()[:16]
    fault = None
    if cfg["fail_phase"] is not None:
        fault = FaultPlan(cfg["fail_phase"], cfg["fail_party"], cfg["fail_offset"])
    outcome = run_job(models, x, deployment, job_id, cfg["deposit"], scheme, preset, _wcfg(cfg), _approx(cfg),
                      _params(cfg), cfg["seed"], image_shape, fault)
    oracle = run_ensemble_inference(models, x, scheme, "plaintext_oracle", _wcfg(cfg), image_shape=image_shape,
                                    seed=cfg["seed"])
    report = {
        "command": "infer",
        "config": cfg,
        "config_hash": config_hash(cfg),
        "provenance": _provenance(),
        "scheme": scheme,
        "parties": parties,
        "preset": preset.name,
        "result": outcome.to_dict(),
        "plaintext_prediction": oracle.prediction.tolist(),
        "balances": dict(sorted(deployment.ledger.balances.items())),
        "escrowed": deployment.ledger.escrowed,
    }
    if outcome.prediction is not None:
        report["agreement_with_plaintext"] = float(np.mean(outcome.prediction == oracle.prediction))
    _emit(json.dumps(report, indent=2, sort_keys=True, default=str) + "\n", cfg["out"], stdout)
    return EXIT_ABORT if outcome.status == "aborted" else EXIT_OK


def _latency_protocol(model, x, parties, preset, cfg, seed):
    from .secure_nn import provision, reveal, secure_forward, share_input
    from .sharing import Dealer
    from .transport import Transport

    params = _params(cfg)
    rng = np.random.default_rng(seed)
    transport = Transport(parties, preset)
    dealer = Dealer(parties, params, seed=seed)
    pm = provision(model, parties, rng, params, allow_single=True)
    xs = share_input(x, parties, rng, params)
    reveal(secure_forward(pm, xs, transport, dealer), transport, params)
    return transport.ledger


def cmd_latency_sweep(cfg, stdout) -> int:
    rows = []
    h = config_hash(cfg)
    parties = cfg["parties"]
    for s in range(cfg["seeds"]):
        seed = cfg["seed"] + s
        if cfg["model"] == "tiny":
            model = build_model("custom", TINY_DIMS, seed=seed)
        else:
            model = build_model(cfg["model"], seed=seed)
        x = np.random.default_rng(seed).uniform(-1, 1, size=(cfg["queries"], model.input_dim))
        for name in cfg["preset"]:
            row = {"seed": seed, "config_hash": h, "preset": name, "parties": parties, "model": cfg["model"]}
            try:
                ledger = _latency_protocol(model, x, parties, _preset(cfg, name, parties), cfg, seed)
                row.update(status="ok", rounds=ledger.rounds, bytes_total=ledger.bytes_total,
                           elapsed_ms=ledger.simulated_elapsed_ms, latency_floor_ms=ledger.latency_floor_ms)
            except UnknownPreset:
                raise
            except CollabInferError as exc:
                row.update(status=f"error:{type(exc).__name__}")
            rows.append(row)
    _write_csv(rows, cfg["out"], stdout)
    return EXIT_OK


def cmd_ensemble_sweep(cfg, stdout) -> int:
    rows = []
    h = config_hash(cfg)
    for alpha in cfg["alpha"]:
        for k in cfg["clients"]:
            for s in range(cfg["seeds"]):
                seed = cfg["seed"] + s
                try:
                    models, _, test_set = client_models(cfg, alpha, k, seed)
                    accs = [accuracy(m, test_set) for m in models]
                    base = {"single_avg": float(np.mean(accs)), "single_best": float(np.max(accs))}
                    err = None
                except CollabInferError as exc:
                    err = f"error:{type(exc).__name__}"
                for scheme in cfg["scheme"]:
                    row = {"seed": seed, "config_hash": h, "alpha": alpha, "K": k, "scheme": scheme,
                           "mode": cfg["mode"]}
                    if err:
                        rows.append({**row, "status": err})
                        continue
                    try:
                        x, y = test_set.inputs, test_set.labels
                        if cfg["mode"] == "secure":
                            x, y = x[:cfg["queries"]], y[:cfg["queries"]]
                        res = run_ensemble_inference(models, x, scheme, cfg["mode"], _wcfg(cfg), _approx(cfg),
                                                     image_shape=test_set.image_shape, seed=seed)
                        rows.append({**row, "status": "ok", "accuracy": float(np.mean(res.prediction == y)),
                                     **base})
                    except CollabInferError as exc:
                        rows.append({**row, "status": f"error:{type(exc).__name__}"})
    _write_csv(rows, cfg["out"], stdout)
    return EXIT_OK


def fairness_cell(cfg, alpha: float, k: int, seed: int) -> list[dict]:
    models, _, test_set = client_models(cfg, alpha, k, seed)
    probs = np.stack([softmax(forward(m, test_set.inputs)) for m in models])
    accs = np.array([accuracy(m, test_set) for m in models])
    ens = probs.mean(axis=0).argmax(axis=-1)
    return fairness_rows(seed, alpha, EvaluationBatch(probs, ens, accs))


def cmd_fairness_sweep(cfg, stdout) -> int:
    rows = []
    h = config_hash(cfg)
    for alpha in cfg["alpha"]:
        for k in cfg["clients"]:
            for s in range(cfg["seeds"]):
                seed = cfg["seed"] + s
                try:
                    cell = [r for r in fairness_cell(cfg, alpha, k, seed) if r["scheme"] in cfg["scheme"]]
                    rows.extend({"config_hash": h, "status": "ok", **r} for r in cell)
                except CollabInferError as exc:
                    rows.append({"seed": seed, "config_hash": h, "alpha": alpha, "K": k,
                                 "status": f"error:{type(exc).__name__}"})
    _write_csv(rows, cfg["out"], stdout)
    return EXIT_OK


def cmd_partition(cfg, stdout) -> int:
    if not cfg["out"]:
        raise ConfigError("partition needs --out DIR")
    train_set, _ = _digits_split(cfg["seed"])
    pcfg = PartitionConfig(cfg["alpha"][0], cfg["clients"][0], cfg["seed"], cfg["min_samples"])
    manifest = write_partition(dirichlet_partition(train_set, pcfg), pcfg, cfg["out"])
    stdout.write(f"{manifest}\n")
    return EXIT_OK


def cmd_train(cfg, stdout) -> int:
    if not cfg["out"]:
        raise ConfigError("train needs --out DIR")
    if cfg["model"] != "tiny":
        raise ConfigError("only the tiny digit model can be trained on the bundled dataset")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg["seed"]
    k = cfg["clients"][0]
    if k >= 2:
        models, parts, test_set = client_models(cfg, cfg["alpha"][0], k, seed)
        sizes = [len(p) for p in parts]
    else:
        train_set, test_set = _digits_split(seed)
        models = [train(build_model("custom", TINY_DIMS, seed=seed), train_set, _train_cfg(cfg, seed))]
        sizes = [len(train_set)]
    files = []
    for i, m in enumerate(models):
        path = out / f"model_{i}.bin"
        save_weights(m, path)
        files.append(path.name)
    report = {"command": "train", "config": cfg, "config_hash": config_hash(cfg), "provenance": _provenance(),
              "models": files, "train_sizes": sizes, "test_accuracy": [accuracy(m, test_set) for m in models]}
    (out / "train_report.json").write_text(json.dumps(report, indent=2, sort_keys=True, default=str) + "\n")
    stdout.write(f"{out / 'train_report.json'}\n")
    return EXIT_OK


HANDLERS = {
    "infer": cmd_infer,
    "latency-sweep": cmd_latency_sweep,
    "ensemble-sweep": cmd_ensemble_sweep,
    "fairness-sweep": cmd_fairness_sweep,
    "partition": cmd_partition,
    "train": cmd_train,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="collabinfer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value settings file; flags override it")
        for key in SETTINGS:
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None)
    return parser


def main(argv: list[str] | None = None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config") and v is not None}
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve_config(args.command, file_values, flags)
        return HANDLERS[args.command](cfg, stdout)
    except (ConfigError, UnknownPreset, UnknownArchitecture, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PartyAbort as exc:
        print(f"protocol abort: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
