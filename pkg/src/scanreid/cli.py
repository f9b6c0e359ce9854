"""Command-line entry point.

    scanreid synth --seed 7 --out d.scnf
    scanreid train --dataset d.scnf --out model.scnc
    scanreid eval --dataset d.scnf --checkpoint model.scnc --out report/
    scanreid gradcheck
    scanreid ablate --dataset d.scnf --out ablation/
    scanreid sweep-ensemble --dataset d.scnf --out sweep/

Settings come from defaults, then a flat JSON ``--config`` file, then flags.
Every report carries the effective settings under ``config``; feeding that
object back through ``--config`` reproduces the run.

Exit codes: 0 ok, 1 usage, 2 I/O, 3 validation or contract failure,
4 gradient check failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

from . import experiments, plotting
from .data import SyntheticConfig, atomic_write, read_features, synthesize, write_features
from .errors import ScanError
from .evaluation import EvalConfig
from .model import full_graph_check, get_variant
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("scanreid")

COMMANDS = ("synth", "train", "eval", "gradcheck", "ablate", "sweep-ensemble")
EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_INVALID, EXIT_GRADCHECK = 0, 1, 2, 3, 4
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

# flat setting name -> default; flags and config-file keys share these names
DEFAULTS = {
    "dataset": None,
    "checkpoint": None,
    "out": None,
    "seed": 0,
    "variant": "full",
    "ensemble_rate": 0.1,
    "epochs": 30,
    "lr": 0.001,
    "clip_len": 10,
    "stride": 5,
    "lambda_id": 1.0,
    "proj_dim": 128,
    "batches_per_epoch": None,
    "train_fraction": 0.5,
    "identities": 32,
    "cameras": 2,
    "frames": 100,
    "dim": 64,
    "noise": 0.5,
    "camera_offset": 0.5,
    "occlusion": 0.0,
    "gradcheck_seeds": 20,
    "gradcheck_tol": 1e-4,
}

REQUIRED = {
    "synth": ("out",),
    "train": ("dataset", "out"),
    "eval": ("dataset", "checkpoint", "out"),
    "gradcheck": (),
    "ablate": ("dataset", "out"),
    "sweep-ensemble": ("dataset", "out"),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scanreid", description="Temporal matching head for video re-id.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat JSON file of settings (flags win)")
    p.add_argument("--dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant")
    p.add_argument("--ensemble-rate", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--clip-len", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--lambda-id", type=float)
    p.add_argument("--proj-dim", type=int)
    p.add_argument("--batches-per-epoch", type=int)
    p.add_argument("--train-fraction", type=float)
    g = p.add_argument_group("synthetic data")
    g.add_argument("--identities", type=int)
    g.add_argument("--cameras", type=int)
    g.add_argument("--frames", type=int)
    g.add_argument("--dim", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("--camera-offset", type=float)
    g.add_argument("--occlusion", type=float)
    g = p.add_argument_group("gradcheck")
    g.add_argument("--gradcheck-seeds", type=int)
    g.add_argument("--gradcheck-tol", type=float)
    return p


def load_config_file(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if isinstance(raw, dict) and isinstance(raw.get("config"), dict) and "top1" in raw:
        raw = raw["config"]  # a metrics report: re-run from its echo
    if not isinstance(raw, dict):
        raise UsageError("config file must hold a JSON object")
    unknown = sorted(set(raw) - set(DEFAULTS) - {"command"})
    if unknown:
        raise UsageError(f"unknown config keys: {unknown}")
    raw.pop("command", None)
    return raw


def resolve(argv) -> tuple[str, dict]:
    ns = build_parser().parse_args(argv)
    settings = dict(DEFAULTS)
    if ns.config:
        settings.update(load_config_file(ns.config))
    for key in DEFAULTS:
        value = getattr(ns, key, None)
        if value is not None:
            settings[key] = value
    missing = [k for k in REQUIRED[ns.command] if not settings.get(k)]
    if missing:
        raise UsageError(f"{ns.command} needs " + ", ".join("--" + k.replace("_", "-") for k in missing))
    return ns.command, settings


def synthetic_config(s: dict) -> SyntheticConfig:
    return SyntheticConfig(n_identities=s["identities"], n_cameras=s["cameras"],
                           frames_per_sequence=s["frames"], feature_dim=s["dim"],
                           camera_offset_scale=s["camera_offset"], frame_noise_sigma=s["noise"],
                           occlusion_prob=s["occlusion"], seed=s["seed"])


def train_config(s: dict) -> TrainConfig:
    return TrainConfig(lr0=s["lr"], epochs=s["epochs"], seed=s["seed"], variant=s["variant"],
                       clip_len=s["clip_len"], stride=s["stride"], lambda_id=s["lambda_id"],
                       proj_dim=s["proj_dim"], batches_per_epoch=s["batches_per_epoch"])


def eval_config(s: dict) -> EvalConfig:
    return EvalConfig(ensemble_rate=s["ensemble_rate"], clip_len=s["clip_len"], stride=s["stride"])


# ---------------------------------------------------------------------------
# output helpers


def write_json(path, obj) -> None:
    atomic_write(Path(path), (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    atomic_write(Path(path), buf.getvalue().encode())


def write_metrics(out_dir: Path, report: dict, stem="metrics", label=None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / f"{stem}.json", report)
    curve = report["cmc_curve"]
    write_csv(out_dir / f"{stem}_cmc.csv", ["rank", "accuracy"],
              [(r + 1, f"{v:.6f}") for r, v in enumerate(curve)])
    plotting.plot_cmc({label or report["config"].get("variant", stem): curve}, out_dir / f"{stem}_cmc.png")


def _heldout(settings):
    ds = read_features(settings["dataset"])
    return experiments.heldout_sets(ds, settings["train_fraction"])


# ---------------------------------------------------------------------------
# commands


def cmd_synth(s: dict) -> int:
    cfg = synthetic_config(s)
    ds = synthesize(cfg)
    write_features(ds, s["out"])
    log.info("wrote %d sequences (%s) to %s", len(ds), cfg.to_dict(), s["out"])
    return EXIT_OK


def cmd_train(s: dict) -> int:
    train_set, _, _ = _heldout(s)
    cfg = train_config(s)
    params, history = train(train_set, cfg)
    out = Path(s["out"])
    save_checkpoint(out, params, cfg)
    rows = [(h.epoch, h.lr, f"{h.bce:.6f}", f"{h.oim:.6f}", f"{h.accuracy:.4f}") for h in history]
    write_csv(out.with_suffix(".history.csv"), ["epoch", "lr", "bce", "oim", "accuracy"], rows)
    if history:
        plotting.plot_history(history, out.with_suffix(".history.png"))
    log.info("checkpoint %s", out)
    return EXIT_OK


def cmd_eval(s: dict) -> int:
    _, probes, gallery = _heldout(s)
    params, train_cfg = load_checkpoint(s["checkpoint"])
    echo = dict(s, variant=params.variant)
    if train_cfg is not None:
        echo.update(seed=train_cfg.seed, epochs=train_cfg.epochs, lr=train_cfg.lr0)
    report = experiments.evaluate(params, probes, gallery, eval_config(s), echo)
    write_metrics(Path(s["out"]), report)
    log.info("top1 %.4f mAP %.4f", report["top1"], report["mAP"])
    return EXIT_OK


def cmd_gradcheck(s: dict) -> int:
    reports = [full_graph_check(s["variant"], s["seed"] + k, tol=s["gradcheck_tol"])
               for k in range(s["gradcheck_seeds"])]
    worst = max(reports, key=lambda r: r.max_rel_error)
    summary = {"variant": get_variant(s["variant"]).name, "max_rel_error": worst.max_rel_error,
               "worst": worst.to_dict(), "pass": all(r.passed for r in reports),
               "seeds": [s["seed"] + k for k in range(s["gradcheck_seeds"])], "config": s}
    print(json.dumps({k: summary[k] for k in ("variant", "max_rel_error", "pass")}))
    if s["out"]:
        out = Path(s["out"])
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "gradcheck.json", summary)
    return EXIT_OK if summary["pass"] else EXIT_GRADCHECK


def cmd_ablate(s: dict) -> int:
    ds = read_features(s["dataset"])
    reports = experiments.ablate(ds, train_config(s), eval_config(s), config_echo=s)
    out = Path(s["out"])
    for name, report in reports.items():
        write_metrics(out, report, stem=f"{get_variant(name).row}_{name}", label=name)
    names = list(reports)
    write_csv(out / "ablation.csv", ["row", "variant", "top1", "top5", "mAP"],
              [(get_variant(n).row, n, f"{reports[n]['top1']:.6f}", f"{reports[n]['top5']:.6f}",
                f"{reports[n]['mAP']:.6f}") for n in names])
    write_json(out / "ablation.json", {"config": s, "variants": names,
                                       "top1": [reports[n]["top1"] for n in names],
                                       "mAP": [reports[n]["mAP"] for n in names]})
    plotting.plot_ablation(names, [reports[n]["top1"] for n in names], out / "ablation.png")
    plotting.plot_cmc({n: reports[n]["cmc_curve"] for n in names}, out / "ablation_cmc.png")
    return EXIT_OK


def cmd_sweep(s: dict) -> int:
    ds = read_features(s["dataset"])
    reports = experiments.sweep_ensemble(ds, train_config(s), eval_config(s), config_echo=s)
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    rates = list(reports)
    write_csv(out / "sweep.csv", ["rate", "top1", "top5", "mAP"],
              [(r, f"{reports[r]['top1']:.6f}", f"{reports[r]['top5']:.6f}", f"{reports[r]['mAP']:.6f}")
               for r in rates])
    write_json(out / "sweep.json", {"config": s, "rates": rates,
                                    "top1": [reports[r]["top1"] for r in rates],
                                    "mAP": [reports[r]["mAP"] for r in rates]})
    plotting.plot_sweep(rates, [reports[r]["top1"] for r in rates], out / "sweep.png")
    return EXIT_OK


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "ablate": cmd_ablate, "sweep-ensemble": cmd_sweep}


def setup_logging() -> None:
    name = os.environ.get("SCAN_LOG_LEVEL", "info").lower()
    if name not in LOG_LEVELS:
        raise UsageError(f"SCAN_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def run(argv=None) -> int:
    try:
        setup_logging()
        command, settings = resolve(argv)
        log.info("%s seed=%s config=%s", command, settings["seed"], json.dumps(settings, sort_keys=True))
        return HANDLERS[command](settings)
    except UsageError as exc:
        print(f"scanreid: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"scanreid: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ScanError, ValueError, KeyError) as exc:
        print(f"scanreid: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
