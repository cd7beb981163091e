"""Command-line entry point: synth, train, test, ablate and sweep.

Configuration is resolved in layers, later ones winning: built-in defaults,
the ``--preset`` schedule, the config stored in a checkpoint (``test`` only),
the ``--config`` JSON file, explicit flags. The resolved config is echoed to
stdout and written next to every run's outputs; feeding it back through
``--config`` reproduces the run.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import evaluation, metalearn
from .kgdata import (ConfigError, DataError, SamplingError, SyntheticConfig, generate_synthetic,
                     load_dataset, prune_rare_relations, write_embeddings, write_splits,
                     write_triples)
from .metalearn import ABLATION_MODES, DESK_PRESET, TrainConfig, TrainingError
from .model import CheckpointError, count_adapter_params, load_checkpoint, save_checkpoint
from .numkernel import ContractError

log = logging.getLogger("mmkg_fewshot")

DATA_FILES = {"triples": "triples.tsv", "structural": "structural.emb",
              "textual": "textual.emb", "visual": "visual.emb", "splits": "splits.tsv"}
SWEEP_AXES = ("K", "alpha", "gamma", "m", "mask_fraction")
PRESETS = {"reference": {}, "desk": DESK_PRESET}
EXIT_OK, EXIT_INTERNAL, EXIT_USER = 0, 1, 2
USER_ERRORS = (ConfigError, DataError, SamplingError, CheckpointError, FileNotFoundError,
               IsADirectoryError, NotADirectoryError, PermissionError, json.JSONDecodeError)


class UsageError(ConfigError):
    pass


def _section(dc) -> dict:
    d = asdict(dc)
    d.pop("seed")
    return d


def default_config() -> dict:
    return {
        "seed": 0,
        "seeds": None,
        "threads": 1,
        "preset": "reference",
        "out": None,
        "checkpoint": None,
        "train": _section(TrainConfig()),
        "synthetic": _section(SyntheticConfig()),
        "data": {"dir": None, **{k: None for k in DATA_FILES}, "min_count": 0},
        "eval": {"split": "test", "ablation": None, "mask_fraction": 0.0},
        "sweep": {"axis": None, "values": None},
    }


def _merge(base: dict, over: dict, where: str = "config") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise ConfigError(f"{where}: unknown key {k!r}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{where}: {k!r} must be an object")
            out[k] = _merge(out[k], v, f"{where}.{k}")
        else:
            out[k] = v
    return out


# ------------------------------------------------------------------ parsing

def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _parse_bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _optional(cast):
    return lambda s: None if s.lower() == "none" else cast(s)


def _field_type(f, default):
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, tuple):
        return lambda s: tuple(float(x) for x in s.split(","))
    cast = {"int": int, "float": float, "str": str}.get(str(f.type).split(" ")[0], float)
    return _optional(cast) if "None" in str(f.type) else cast


def _add_dataclass_flags(parser, dc, section: str, skip=()):
    g = parser.add_argument_group(section)
    for f in fields(dc):
        if f.name in skip:
            continue
        g.add_argument(_flag(f.name), dest=f"{section}.{f.name}",
                       type=_field_type(f, getattr(dc, f.name)),
                       default=argparse.SUPPRESS, metavar=f.name.upper())


def _int_list(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    S = argparse.SUPPRESS
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("--seed", type=int, default=S, help="root seed")
    common.add_argument("--out", default=S, help="output directory")
    common.add_argument("--threads", type=int, default=S, help="evaluation worker threads")
    common.add_argument("--preset", choices=sorted(PRESETS), default=S,
                        help="training schedule: reference (default) or desk")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    g = data.add_argument_group("data")
    g.add_argument("--data", dest="data.dir", default=S,
                   help="directory holding the files written by `synth`")
    for k in DATA_FILES:
        g.add_argument(f"--{k}", dest=f"data.{k}", default=S, help=f"{k} file")
    g.add_argument("--min-count", dest="data.min_count", type=int, default=S,
                   help="drop relations with fewer triples")
    _add_dataclass_flags(data, SyntheticConfig(), "synthetic", skip=("seed",))

    train = argparse.ArgumentParser(add_help=False)
    _add_dataclass_flags(train, TrainConfig(), "train", skip=("seed", "ablation_mode"))

    ev = argparse.ArgumentParser(add_help=False)
    ev.add_argument("--seeds", type=_int_list, default=S,
                    help="comma-separated evaluation seeds (default: five seeds from --seed)")
    ev.add_argument("--split", dest="eval.split", choices=("valid", "test"), default=S)
    ev.add_argument("--mask-fraction", dest="eval.mask_fraction", type=float, default=S,
                    help="zero this fraction of textual and visual rows before evaluation")

    p = argparse.ArgumentParser(prog="mmkg-fewshot", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common, data], help="write a synthetic MMKG")
    sp = sub.add_parser("train", parents=[common, data, train], help="meta-train a model")
    sp.add_argument("--ablation", dest="train.ablation_mode", choices=ABLATION_MODES, default=S,
                    help="training regime")
    sp = sub.add_parser("test", parents=[common, data, train, ev], help="meta-test a checkpoint")
    sp.add_argument("--checkpoint", default=S)
    sp.add_argument("--ablation", dest="eval.ablation", choices=ABLATION_MODES, default=S)
    sp = sub.add_parser("ablate", parents=[common, data, train, ev], help="ablation table")
    sp.add_argument("--ablation", dest="eval.ablation", default=S,
                    help="comma-separated modes (default: all)")
    sp = sub.add_parser("sweep", parents=[common, data, train, ev], help="sensitivity sweep")
    sp.add_argument("--axis", dest="sweep.axis", choices=SWEEP_AXES, default=S, required=False)
    sp.add_argument("--values", dest="sweep.values", default=S,
                    help="comma-separated values for the axis")
    return p


def _flags_to_overrides(ns: argparse.Namespace) -> dict:
    over: dict = {}
    for key, val in vars(ns).items():
        if key in ("command", "config", "verbose"):
            continue
        node = over
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = val
    return over


def resolve_config(ns: argparse.Namespace) -> dict:
    flags = _flags_to_overrides(ns)
    file_cfg = {}
    if ns.config:
        with open(ns.config, encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"{ns.config}: top level must be a JSON object")
    preset = flags.get("preset", file_cfg.get("preset", "reference"))
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    cfg = default_config()
    cfg["preset"] = preset
    cfg["train"].update(PRESETS[preset])
    if ns.command == "test":
        ckpt = flags.get("checkpoint", file_cfg.get("checkpoint"))
        if ckpt is None and (flags.get("out") or file_cfg.get("out")):
            ckpt = str(Path(flags.get("out") or file_cfg.get("out")) / "checkpoint.bin")
        if ckpt is None:
            raise UsageError("test needs --checkpoint (or --out of a training run)")
        _, meta = load_checkpoint(ckpt)
        stored = meta.get("config")
        if stored:
            stored = {k: v for k, v in stored.items() if k not in ("out", "checkpoint")}
            cfg = _merge(cfg, stored, "checkpoint config")
        cfg["checkpoint"] = ckpt
    cfg = _merge(cfg, file_cfg, ns.config or "config")
    cfg = _merge(cfg, flags, "flags")
    _finish(cfg, ns.command)
    return cfg


def _finish(cfg: dict, command: str) -> None:
    d = cfg["data"]
    if d["dir"] is not None:
        for k, name in DATA_FILES.items():
            if d[k] is None:
                d[k] = str(Path(d["dir"]) / name)
    given = [k for k in DATA_FILES if d[k] is not None]
    if given and len(given) != len(DATA_FILES):
        missing = sorted(set(DATA_FILES) - set(given))
        raise UsageError(f"incomplete data paths; missing {', '.join('--' + m for m in missing)}")
    if cfg["seeds"] is None and command in ("test", "ablate", "sweep"):
        cfg["seeds"] = [cfg["seed"] + i for i in range(5)]
    if cfg["threads"] < 1:
        raise UsageError("--threads must be >= 1")
    if command != "test" and cfg["out"] is None:
        raise UsageError(f"{command} needs --out")
    if command == "test" and cfg["out"] is None:
        cfg["out"] = str(Path(cfg["checkpoint"]).parent)
    if command == "sweep":
        sw = cfg["sweep"]
        if sw["axis"] not in SWEEP_AXES:
            raise UsageError(f"sweep needs --axis from {SWEEP_AXES}")
        vals = sw["values"]
        if isinstance(vals, str):
            vals = [v for v in (x.strip() for x in vals.split(",")) if v]
        if not vals:
            raise UsageError("sweep needs a non-empty --values list")
        cast = int if sw["axis"] in ("K", "m") else float
        try:
            sw["values"] = [cast(v) for v in vals]
        except (TypeError, ValueError):
            raise UsageError(f"bad --values for axis {sw['axis']}: {vals!r}") from None
    if command == "ablate":
        modes = cfg["eval"]["ablation"]
        if modes is None:
            modes = list(ABLATION_MODES)
        elif isinstance(modes, str):
            modes = [m.strip() for m in modes.split(",") if m.strip()]
        bad = [m for m in modes if m not in ABLATION_MODES]
        if bad or not modes:
            raise UsageError(f"unknown ablation modes {bad}; expected from {ABLATION_MODES}")
        cfg["eval"]["ablation"] = modes
    # fail early on bad values
    train_config(cfg)
    synthetic_config(cfg).validate()


# ------------------------------------------------------------------ helpers

def train_config(cfg: dict, **over) -> TrainConfig:
    tc = TrainConfig.from_dict({**cfg["train"], "seed": cfg["seed"], **over})
    tc.validate()
    return tc


def synthetic_config(cfg: dict) -> SyntheticConfig:
    d = dict(cfg["synthetic"])
    d["split_fractions"] = tuple(d["split_fractions"])
    return SyntheticConfig(**d, seed=cfg["seed"])


def load_data(cfg: dict):
    d = cfg["data"]
    if d["triples"] is None:
        data = generate_synthetic(synthetic_config(cfg))
    else:
        for k in DATA_FILES:
            if not Path(d[k]).is_file():
                raise FileNotFoundError(f"{k} file not found: {d[k]}")
        data = load_dataset(d["triples"], d["structural"], d["textual"], d["visual"], d["splits"])
    store, emb, splits = data
    if d["min_count"]:
        store = prune_rare_relations(store, d["min_count"])
        splits = splits.restrict(store.relations)
    return store, emb, splits


def dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def write_history(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_mrr"])
        for row in history:
            w.writerow([row["epoch"], repr(float(row["train_loss"])), repr(float(row["val_mrr"]))])


def stats_table(name: str, store, splits) -> str:
    head = f"{'dataset':<12}{'entities':>10}{'triples':>10}{'relations':>11}  train/valid/test"
    split = "/".join(str(len(splits.of(s))) for s in ("train", "valid", "test"))
    row = f"{name:<12}{store.n_entities:>10}{store.n_triples:>10}{store.n_relations:>11}  {split}"
    return head + "\n" + row


def _evaluate_seeds(data, state, cfg: dict, mode: str, mask_fraction: float = 0.0,
                    **train_over) -> list:
    store, _, splits = data
    reports = []
    for s in cfg["seeds"]:
        tc = train_config(cfg, seed=s, ablation_mode=mode, **train_over)
        st = evaluation.masked_state(state, mask_fraction, s) if mask_fraction else state
        tasks = evaluation.make_tasks(store, splits.of(cfg["eval"]["split"]), tc.K, s,
                                      cfg["eval"]["split"], tc.n_eval_query)
        reports.append(evaluation.evaluate(tasks, st, tc, store, threads=cfg["threads"]))
    return reports


def _fingerprint(cfg: dict) -> str:
    return evaluation.config_fingerprint({k: v for k, v in cfg.items()
                                          if k not in ("seed", "seeds", "out", "checkpoint",
                                                       "threads")})


# ----------------------------------------------------------------- commands

def cmd_synth(cfg: dict) -> None:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    store, emb, splits = generate_synthetic(synthetic_config(cfg))
    write_triples(out / DATA_FILES["triples"], store)
    for mod in ("structural", "textual", "visual"):
        write_embeddings(out / DATA_FILES[mod], store.entity_names, emb.table(mod))
    write_splits(out / DATA_FILES["splits"], store, splits)
    print(stats_table("synthetic", store, splits))


def cmd_train(cfg: dict) -> None:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    data = load_data(cfg)
    dump_json(out / "config.json", cfg)
    res = metalearn.meta_train(data, train_config(cfg), threads=cfg["threads"])
    write_history(out / "history.csv", res.history)
    save_checkpoint(out / "checkpoint.bin", res.state,
                    {"config": cfg, "best_epoch": res.best_epoch,
                     "best_val_mrr": res.best_val_mrr})
    print(f"best epoch {res.best_epoch}  val MRR {res.best_val_mrr:.4f}")
    if res.state.hyper.use_adapters:
        n_T, n_V = (count_adapter_params(a) for a in (res.state.adapter_T, res.state.adapter_V))
        print(f"adapter parameters  textual {n_T}  visual {n_V}  total {n_T + n_V}")


def cmd_test(cfg: dict) -> None:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    state, _ = load_checkpoint(cfg["checkpoint"])
    trained = cfg["train"]["ablation_mode"]
    mode = cfg["eval"]["ablation"] or trained
    if metalearn.training_regime(mode) != metalearn.training_regime(trained):
        raise UsageError(f"checkpoint was trained as {trained!r}; mode {mode!r} needs a "
                         f"{metalearn.training_regime(mode)!r} checkpoint")
    data = load_data(cfg)
    dump_json(out / "config.json", cfg)
    reports = _evaluate_seeds(data, state, cfg, mode, cfg["eval"]["mask_fraction"])
    payload = evaluation.aggregate(reports)
    payload.update(config_fingerprint=_fingerprint(cfg), ablation=mode,
                   mask_fraction=cfg["eval"]["mask_fraction"])
    dump_json(out / "report.json", payload)
    _print_metrics(mode, payload)


def cmd_ablate(cfg: dict) -> None:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    data = load_data(cfg)
    dump_json(out / "config.json", cfg)
    modes = cfg["eval"]["ablation"]
    per_mode: dict[str, list] = {m: [] for m in modes}
    for s in cfg["seeds"]:
        tc = train_config(cfg, seed=s)
        reps = metalearn.run_ablation(data, tc, modes, split=cfg["eval"]["split"],
                                      threads=cfg["threads"])
        for m in modes:
            per_mode[m].append(reps[m])
    payload = {"config_fingerprint": _fingerprint(cfg), "seeds": cfg["seeds"],
               "modes": {m: evaluation.aggregate(r) for m, r in per_mode.items()}}
    payload["paired"] = paired_gaps(per_mode)
    dump_json(out / "report.json", payload)
    for m in modes:
        _print_metrics(m, payload["modes"][m])


def paired_gaps(per_mode: dict) -> list[dict]:
    """Mean MRR gap and its cross-seed standard error for the ablation chain."""
    rows = []
    chain = [("full", "no_div"), ("no_div", "no_adapters"), ("full", "frozen_adapters"),
             ("frozen_adapters", "random_init_adapters")]
    for a, b in chain:
        if a not in per_mode or b not in per_mode:
            continue
        d = np.array([x.mrr - y.mrr for x, y in zip(per_mode[a], per_mode[b])])
        se = float(d.std(ddof=1) / np.sqrt(len(d))) if len(d) > 1 else float("nan")
        rows.append({"a": a, "b": b, "gap": float(d.mean()), "se": se})
    return rows


def cmd_sweep(cfg: dict) -> None:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    data = load_data(cfg)
    dump_json(out / "config.json", cfg)
    axis, values = cfg["sweep"]["axis"], cfg["sweep"]["values"]
    path = out / "sweep.csv"
    cols = ["axis", "value", "mrr", "hit1", "hit5", "hit10", "mrr_std", "n_seeds"]
    shared: dict[int, object] = {}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        fh.flush()
        for v in values:
            reports = []
            for s in cfg["seeds"]:
                if axis == "mask_fraction":
                    if s not in shared:
                        shared[s] = metalearn.meta_train(data, train_config(cfg, seed=s),
                                                         cfg["threads"]).state
                    one = dict(cfg, seeds=[s])
                    reports += _evaluate_seeds(data, shared[s], one,
                                               cfg["train"]["ablation_mode"], v)
                else:
                    tc = train_config(cfg, seed=s, **{axis: v})
                    state = metalearn.meta_train(data, tc, cfg["threads"]).state
                    one = dict(cfg, seeds=[s])
                    reports += _evaluate_seeds(data, state, one, tc.ablation_mode,
                                               cfg["eval"]["mask_fraction"], **{axis: v})
            agg = evaluation.aggregate(reports)
            m = agg["metrics"]
            std = agg.get("std", {}).get("mrr", 0.0)
            w.writerow([axis, v, *(repr(m[k]) for k in ("mrr", "hit1", "hit5", "hit10")),
                        repr(std), len(reports)])
            fh.flush()
            print(f"{axis}={v}  MRR {m['mrr']:.4f} ± {std:.4f}")


def _print_metrics(mode: str, payload: dict) -> None:
    m = payload["metrics"]
    std = payload.get("std", {})
    parts = [f"{k} {m[k]:.4f}" + (f" ± {std[k]:.4f}" if k in std else "")
             for k in ("mrr", "hit1", "hit5", "hit10")]
    print(f"{mode:<22}" + "  ".join(parts))


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "test": cmd_test, "ablate": cmd_ablate,
            "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USER
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(ns)
        print(json.dumps(cfg, sort_keys=True, indent=2))
        COMMANDS[ns.command](cfg)
    except USER_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER
    except (TrainingError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as e:  # noqa: BLE001 - last-resort status for scripted callers
        log.exception("internal error")
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
