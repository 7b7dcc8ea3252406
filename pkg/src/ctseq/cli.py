"""Experiment front-end: prepare, train, eval, gradcheck, sweep.

Every command is driven by a JSON config plus flat dotted-key overrides,
e.g. `ctseq train --config exp.json --weights.alpha 2.0 --protocol.negatives 100`.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import corpus, gradcheck, trainer
from .config import ConfigError, ExperimentConfig
from .evaluator import evaluate
from .trainer import NonFiniteLossError

TAG_SWEEP = 8

SWEEP_HEADER = [
    "alpha", "beta", "dropout", "tau",
    "hr1", "hr5", "hr10", "hr20", "ndcg5", "ndcg10", "ndcg20",
    "epochs", "seconds",
]


def _parse_overrides(extra: list[str]) -> dict[str, object]:
    overrides: dict[str, object] = {}
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--"):
            raise ConfigError(f"unexpected argument {token!r}; overrides look like --section.key value")
        token = token[2:]
        if "=" in token:
            key, raw = token.split("=", 1)
            i += 1
        else:
            key = token
            if i + 1 >= len(extra):
                raise ConfigError(f"override --{key} is missing a value")
            raw = extra[i + 1]
            i += 2
        overrides[key] = config_mod.coerce(raw)
    return overrides


def _split_sweep(overrides: dict[str, object]) -> tuple[dict[str, object], dict[str, list[float]]]:
    grid: dict[str, list[float]] = {}
    rest: dict[str, object] = {}
    for key, value in overrides.items():
        if key.startswith("sweep."):
            name = key.split(".", 1)[1]
            if isinstance(value, str):
                value = [config_mod.coerce(v) for v in value.split(",")]
            elif not isinstance(value, list):
                value = [value]
            grid[name] = [float(v) for v in value]
        else:
            rest[key] = value
    return rest, grid


def _load_dataset(cfg: ExperimentConfig) -> corpus.InteractionLog:
    ds = cfg.dataset
    if not ds.path:
        raise ConfigError("dataset.path is not set")
    return corpus.ingest(ds.path, format=ds.format, min_interactions=ds.min_interactions)


def cmd_prepare(cfg: ExperimentConfig) -> int:
    log = _load_dataset(cfg)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus.write_manifest(log, out / "dataset_manifest.json")
    with open(out / "sequences.txt", "w", encoding="utf-8") as fh:
        for seq in corpus.user_sequences(log):
            fh.write(" ".join([str(seq.user)] + [str(v) for v in seq.items]) + "\n")
    print(json.dumps(corpus.dataset_manifest(log), indent=2))
    return 0


def _write_metrics_log(lines: list[dict], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(json.dumps(line, sort_keys=True) + "\n")


def _final_report(state: trainer.TrainState, data, protocol):
    which = "best" if state.best_params is not None else "last"
    if state.best_params is not None:
        trainer.restore_params(state.model, state.best_params)
    return which, evaluate(state.model, data.test_pairs, protocol, data.catalog_size)


def cmd_train(cfg: ExperimentConfig) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.save(cfg, out / "config.json")
    log = _load_dataset(cfg)
    corpus.write_manifest(log, out / "dataset_manifest.json")
    data = trainer.prepare_data(log)
    tcfg = cfg.resolved_train()
    protocol = cfg.resolved_protocol()
    try:
        state, lines = trainer.train(tcfg, data, protocol=protocol, run_dir=out)
    except NonFiniteLossError as err:
        dump = out / "diagnostic_batch.npz"
        np.savez(dump, inputs=err.batch.inputs, targets=err.batch.targets,
                 users=np.asarray(err.batch.users))
        print(f"error: {err}\noffending batch dumped to {dump}", file=sys.stderr)
        return 1
    _write_metrics_log(lines, out / "metrics.jsonl")
    which, report = _final_report(state, data, protocol)
    (out / "final_report.json").write_text(
        json.dumps({"checkpoint": which, **report.as_dict()}, indent=2, sort_keys=True) + "\n"
    )
    print(report.to_table())
    return 0


def cmd_eval(cfg: ExperimentConfig, checkpoint: str) -> int:
    state = trainer.load_checkpoint(checkpoint)
    stored = state.model.config
    wanted = cfg.train.encoder
    if (stored.embed_dim, stored.n_layers, stored.n_heads, stored.max_seq_len) != (
        wanted.embed_dim, wanted.n_layers, wanted.n_heads, wanted.max_seq_len,
    ):
        raise ConfigError(
            f"checkpoint encoder {dataclasses.asdict(stored)} does not match the configured encoder"
        )
    log = _load_dataset(cfg)
    if log.n_items != state.model.catalog_size:
        raise ConfigError(
            f"checkpoint catalog size {state.model.catalog_size} != dataset items {log.n_items}"
        )
    _, test_pairs = corpus.split(log)
    report = evaluate(state.model, test_pairs, cfg.resolved_protocol(), log.n_items)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.json").write_text(report.to_json() + "\n")
    print(report.to_table())
    return 0


def cmd_gradcheck(cfg: ExperimentConfig, corrupt: str | None = None) -> int:
    report = gradcheck.run(corrupt=corrupt)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "gradcheck_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    for name, entry in report["components"].items():
        flag = "PASS" if entry["passed"] else "FAIL"
        print(f"{name:<12} max_rel_err={entry['max_rel_err']:.3e}  {flag}")
    return 0 if report["passed"] else 1


def _sweep_points(cfg: ExperimentConfig, grid: dict[str, list[float]]):
    w, enc = cfg.train.weights, cfg.train.encoder
    alphas = grid.get("alpha", [w.alpha])
    betas = grid.get("beta", [w.beta])
    dropouts = grid.get("dropout_rate", grid.get("dropout", [enc.dropout_rate]))
    taus = grid.get("tau", [w.dr_temperature])
    return list(itertools.product(alphas, betas, dropouts, taus))


def cmd_sweep(cfg: ExperimentConfig, grid: dict[str, list[float]]) -> int:
    points = _sweep_points(cfg, grid)
    if not points:
        raise ConfigError("sweep grid is empty")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = _load_dataset(cfg)
    data = trainer.prepare_data(log)
    rows = []
    for i, (alpha, beta, dropout, tau) in enumerate(points):
        point_cfg = dataclasses.replace(
            cfg,
            train=dataclasses.replace(
                cfg.train,
                weights=dataclasses.replace(
                    cfg.train.weights, alpha=alpha, beta=beta, dr_temperature=tau),
                encoder=dataclasses.replace(cfg.train.encoder, dropout_rate=dropout),
            ),
            output_dir=str(out / f"point_{i:03d}"),
            seed=corpus.derive_seed(cfg.seed, TAG_SWEEP, i),
        )
        row = {"alpha": alpha, "beta": beta, "dropout": dropout, "tau": tau}
        try:
            state, lines = trainer.train(
                point_cfg.resolved_train(), data,
                protocol=point_cfg.resolved_protocol(),
                run_dir=Path(point_cfg.output_dir),
            )
            _write_metrics_log(lines, Path(point_cfg.output_dir) / "metrics.jsonl")
            _, report = _final_report(state, data, point_cfg.resolved_protocol())
            row.update({f"hr{k}": report.hr[k] for k in (1, 5, 10, 20)})
            row.update({f"ndcg{k}": report.ndcg[k] for k in (5, 10, 20)})
            row["epochs"] = state.epoch
            row["seconds"] = sum(l["epoch_seconds"] or 0.0 for l in lines if "epoch_seconds" in l)
        except Exception as exc:  # record the failure, keep sweeping
            print(f"sweep point {i} ({alpha=}, {beta=}, {dropout=}, {tau=}) failed: {exc}",
                  file=sys.stderr)
            row.update({c: float("nan") for c in SWEEP_HEADER[4:]})
        rows.append(row)
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_HEADER)
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows to {out / 'sweep.csv'}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="ctseq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("prepare", "train", "eval", "gradcheck", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON experiment config")
        if name == "eval":
            p.add_argument("--checkpoint", required=True, help="checkpoint directory")
        if name == "gradcheck":
            p.add_argument("--corrupt", default=None, help="poison one component (harness self-test)")
    args, extra = parser.parse_known_args(argv)
    try:
        overrides = _parse_overrides(extra)
        overrides, grid = _split_sweep(overrides)
        cfg = config_mod.load(args.config, overrides)
        if args.command == "prepare":
            return cmd_prepare(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, corrupt=args.corrupt)
        return cmd_sweep(cfg, grid)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
