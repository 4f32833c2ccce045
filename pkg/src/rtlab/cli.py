"""Experiment harness: one subcommand per experiment protocol.

    rtlab <command> [--config PATH] [--seed N] [--out DIR]
                    [--override key=value ...]

Commands: distill, probe, landscape, imp, lmc, restart, noise-control,
size-sweep. The default output root is $RTLAB_OUT_ROOT (falling back to
./runs); --out overrides it. Every run directory receives

    config.txt      the resolved configuration, sorted keys
    manifest.json   command, seed, config digest, package version, overrides

plus command-specific artifacts. CSV schemas (columns are never reordered
within a format version):

    runlog.csv     step,epoch,loss,kl,dist_from_init
    probe.csv      epoch,subject,probe_kind,split,seed,accuracy
    landscape_<metric>.csv  lambda1,lambda2,value
    imp_<arm>.csv  round,sparsity,test_accuracy
    lmc_<arm>.csv  init_id,pair,gamma,test_error
    sweep.csv      n_sub,subject,accuracy

Exit codes: 0 success; 2 config/parse errors; 3 contract, shape, domain or
layout violations; 4 numeric divergence; 5 I/O errors; 1 anything else.
"""

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, checkpoint, data, distill, landscape, models, probing, supervised
from .config import ExperimentConfig, apply_overrides, parse_config
from .errors import (
    ConfigError,
    ContractError,
    DegenerateDirectionsError,
    DivergenceError,
    DomainError,
    LayoutError,
    NumericError,
    ParseError,
    RtlabError,
    ShapeError,
)

EXIT_CONFIG, EXIT_CONTRACT, EXIT_NUMERIC, EXIT_IO = 2, 3, 4, 5


def _fmt(v) -> str:
    # repr gives shortest round-trip floats, so reruns are byte-identical
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _emit_run_dir(out: Path, cfg: ExperimentConfig, command: str, overrides, extra=None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    text = cfg.resolved_text()
    (out / "config.txt").write_text(text)
    manifest = {
        "command": command,
        "seed": cfg["seed"],
        "config_sha256": hashlib.sha256(text.encode()).hexdigest(),
        "version": __version__,
        "overrides": list(overrides),
    }
    manifest.update(extra or {})
    write_json(out / "manifest.json", manifest)


def _blob_splits(cfg: ExperimentConfig, seed: int):
    shape = cfg["model.input_shape"] if len(cfg["model.input_shape"]) > 1 else None
    return data.make_blob_splits(
        cfg["dataset.n_train"], cfg["dataset.n_test"], cfg["dataset.dim"],
        cfg["dataset.k"], cfg["dataset.separation"], seed=seed, shape=shape,
    )


def _binary_splits(cfg: ExperimentConfig):
    if not cfg["dataset.path"]:
        raise ConfigError("dataset.path is required for binary dataset kinds")
    train = data.load_binary_images(
        cfg["dataset.path"], cfg["dataset.kind"],
        labels_path=cfg["dataset.labels_path"] or None,
        downsample=cfg["dataset.downsample"], split="train",
    )
    test = data.subsample(train, max(train.n // 6, train.k), seed=cfg["seed"], stratified=True)
    return train, test


def build_splits(cfg: ExperimentConfig, seed: int):
    """(train, test) for the configured dataset descriptor."""
    kind = cfg["dataset.kind"]
    if kind == "blobs":
        return _blob_splits(cfg, seed)
    if kind == "digits":
        return data.make_digit_splits(cfg["dataset.n_train"], cfg["dataset.n_test"], seed)
    if kind in ("idx", "cifar_bin"):
        return _binary_splits(cfg)
    raise ConfigError(f"dataset.kind {kind!r} is not a probe-ready dataset")


def _save_model_ckpt(path, spec, state, seed, step) -> None:
    checkpoint.save_checkpoint(path, state.params, spec.to_dict(), seed, step, state.running_stats)


def _load_model_state(path) -> tuple:
    ck = checkpoint.load_checkpoint(path)
    spec = models.ModelSpec.from_dict(ck.spec)
    rs = ck.running_stats or models.init_running_stats(spec)
    return spec, models.ModelState(spec, ck.params, rs, "eval"), ck


def _probe_rows(state, train_ds, test_ds, cfg: ExperimentConfig, epoch, subject):
    """probe.csv rows for one model at one epoch."""
    rows = []
    kind = cfg["probe.kind"]
    f_tr = probing.extract_features(state, train_ds)
    f_te = probing.extract_features(state, test_ds)
    if kind in ("linear", "both"):
        for s in cfg["probe.seeds"]:
            r = probing.linear_probe(f_tr, f_te, s, epochs=cfg["probe.epochs"],
                                     lr=cfg["probe.lr"], batch_size=cfg["probe.batch_size"])
            rows.append([epoch, subject, "linear", "train", s, r.train_accuracy])
            rows.append([epoch, subject, "linear", "test", s, r.test_accuracy])
    if kind in ("knn", "both"):
        r = probing.knn_probe(f_tr, f_te, K=cfg["probe.knn_k"])
        rows.append([epoch, subject, "knn", "train", -1, r.train_accuracy])
        rows.append([epoch, subject, "knn", "test", -1, r.test_accuracy])
    return rows


def _raw_baseline_rows(train_ds, test_ds, cfg: ExperimentConfig, epoch):
    rows = []
    f_tr = probing.raw_input_features(train_ds)
    f_te = probing.raw_input_features(test_ds)
    for s in cfg["probe.seeds"]:
        r = probing.linear_probe(f_tr, f_te, s, epochs=cfg["probe.epochs"],
                                 lr=cfg["probe.lr"], batch_size=cfg["probe.batch_size"])
        rows.append([epoch, "raw_input", "linear", "train", s, r.train_accuracy])
        rows.append([epoch, "raw_input", "linear", "test", s, r.test_accuracy])
    return rows


def _write_distill_artifacts(out: Path, cfg, spec, result, train_ds, test_ds) -> None:
    log = result.log
    write_csv(out / "runlog.csv", ["step", "epoch", "loss", "kl", "dist_from_init"],
              zip(log.step, log.epoch, log.loss, log.kl, log.dist_from_init))
    epochs = result.config.epochs
    rows = [[r["epoch"], r["subject"], r["probe_kind"], r["split"], r["seed"], r["accuracy"]]
            for r in log.probes]
    rows += _probe_rows(result.teacher.copy().eval(), train_ds, test_ds, cfg, epochs, "teacher")
    rows += _probe_rows(result.student.copy().eval(), train_ds, test_ds, cfg, epochs, "student")
    rows += _raw_baseline_rows(train_ds, test_ds, cfg, epochs)
    write_csv(out / "probe.csv", ["epoch", "subject", "probe_kind", "split", "seed", "accuracy"], rows)
    seed = result.config.seed
    n_steps = log.step[-1] if log.step else 0
    _save_model_ckpt(out / "teacher.ckpt", spec, result.teacher, seed, n_steps)
    _save_model_ckpt(out / "student.ckpt", spec, result.student, seed, n_steps)
    init_state = models.ModelState(spec, result.theta_init, models.init_running_stats(spec))
    _save_model_ckpt(out / "student_init.ckpt", spec, init_state, seed, 0)
    for epoch, state in result.checkpoints.items():
        _save_model_ckpt(out / f"student_e{epoch}.ckpt", spec, state, seed, epoch)


def _probe_hook(cfg: ExperimentConfig, train_ds, test_ds):
    every = cfg["distill.probe_every"]
    if every <= 0:
        return None

    def hook(epoch, student, teacher):
        if (epoch + 1) % every:
            return []
        rows = _probe_rows(student.copy().eval(), train_ds, test_ds, cfg, epoch, "student")
        return [dict(zip(("epoch", "subject", "probe_kind", "split", "seed", "accuracy"), r))
                for r in rows]

    return hook


def cmd_distill(cfg: ExperimentConfig, out: Path, overrides) -> int:
    spec = cfg.model_spec()
    train_ds, test_ds = build_splits(cfg, cfg["seed"])
    sweep = cfg["distill.alpha_sweep"]
    alphas = sweep if sweep else (cfg["distill.alpha"],)
    for alpha in alphas:
        sub = out / f"alpha_{alpha:g}" if sweep else out
        _emit_run_dir(sub, cfg, "distill", overrides, {"alpha": alpha})
        dcfg = cfg.distill_config(alpha=alpha)
        result = distill.distill_run(spec, dcfg, train_ds, _probe_hook(cfg, train_ds, test_ds))
        _write_distill_artifacts(sub, cfg, spec, result, train_ds, test_ds)
    return 0


def cmd_probe(cfg: ExperimentConfig, out: Path, overrides) -> int:
    if not cfg["probe.ckpt"]:
        raise ConfigError("probe.ckpt is required")
    _, state, ck = _load_model_state(cfg["probe.ckpt"])
    train_ds, test_ds = build_splits(cfg, cfg["seed"])
    _emit_run_dir(out, cfg, "probe", overrides, {"ckpt_digest": ck.spec_digest})
    rows = _probe_rows(state, train_ds, test_ds, cfg, ck.step, "checkpoint")
    rows += _raw_baseline_rows(train_ds, test_ds, cfg, ck.step)
    write_csv(out / "probe.csv", ["epoch", "subject", "probe_kind", "split", "seed", "accuracy"], rows)
    return 0


def cmd_landscape(cfg: ExperimentConfig, out: Path, overrides) -> int:
    view = cfg["landscape.view"]
    needed = ["landscape.teacher_ckpt", "landscape.far_ckpt"]
    needed.append("landscape.local_ckpt" if view == "shared" else "landscape.fresh_ckpt")
    missing = [k for k in needed if not cfg[k]]
    if missing:
        raise ConfigError(f"missing anchors for {view} view: {', '.join(missing)}")
    spec, teacher_state, t_ck = _load_model_state(cfg["landscape.teacher_ckpt"])
    anchors = {}
    for key in needed[1:]:
        _, state, ck = _load_model_state(cfg[key])
        if ck.spec_digest != t_ck.spec_digest:
            raise ContractError(f"{key} was saved for a different model spec")
        anchors[key] = state.params
    if view == "shared":
        plane = landscape.shared_view(teacher_state.params,
                                      anchors["landscape.local_ckpt"],
                                      anchors["landscape.far_ckpt"])
    else:
        plane = landscape.non_local_view(teacher_state.params,
                                         anchors["landscape.fresh_ckpt"],
                                         anchors["landscape.far_ckpt"])
    if cfg["landscape.orthogonalize"]:
        plane = landscape.orthogonalize(plane)
    train_ds, test_ds = build_splits(cfg, cfg["seed"])
    ctx = landscape.EvalContext(
        spec, train_ds, teacher=teacher_state.params,
        probe_train=train_ds, probe_test=test_ds,
        probe_epochs=cfg["probe.epochs"],
    )
    _emit_run_dir(out, cfg, "landscape", overrides)
    extent = cfg["landscape.extent"]
    if len(extent) != 4:
        raise ConfigError("landscape.extent needs 4 numbers: l1_lo,l1_hi,l2_lo,l2_hi")
    failures = {}
    for metric in cfg["landscape.metrics"]:
        grid = landscape.eval_grid(plane, cfg["landscape.resolution"], metric, ctx, tuple(extent))
        rows = [[l1, l2, grid.values[i, j]]
                for i, l1 in enumerate(grid.lambda1)
                for j, l2 in enumerate(grid.lambda2)]
        write_csv(out / f"landscape_{metric}.csv", ["lambda1", "lambda2", "value"], rows)
        failures[metric] = [[i, j, msg] for i, j, msg in grid.failures]
    write_json(out / "plane_meta.json", {
        "view": view,
        "orthogonalized": plane.orthogonalized,
        "anchors": {k: list(v) for k, v in plane.anchors.items()},
        "v1_norm": plane.v1.norm(),
        "v2_norm": plane.v2.norm(),
        "v1_dot_v2": plane.v1.dot(plane.v2),
        "resolution": cfg["landscape.resolution"],
        "extent": list(extent),
        "metrics": list(cfg["landscape.metrics"]),
        "failures": failures,
        "notes": "encoder_kl treats softmax(embeddings) as distributions; "
                 "batch-norm stats are recalibrated at every grid point.",
    })
    return 0


def _imp_arm_init(cfg: ExperimentConfig, arm: str, head_seed: int):
    spec = cfg.model_spec()
    k = cfg["supervised.num_classes"] or cfg["dataset.k"]
    if arm == "student":
        if not cfg["imp.student_ckpt"]:
            raise ConfigError("imp.student_ckpt is required for the student arm")
        ck = checkpoint.load_checkpoint(cfg["imp.student_ckpt"])
        return supervised.make_classifier_init(spec, k, head_seed, encoder_from=ck.params)
    return supervised.make_classifier_init(spec, k, head_seed)


def _imp_rewind_point(init, sup_cfg, train_ds, rewind_epoch):
    if rewind_epoch == 0:
        return init
    from dataclasses import replace

    cfg = sup_cfg
    if rewind_epoch not in cfg.rewind_epochs:
        cfg = replace(cfg, rewind_epochs=tuple(sorted(set(cfg.rewind_epochs) | {rewind_epoch})))
    dense = supervised.supervised_train(init, cfg, train_ds)
    return dense.checkpoints[rewind_epoch]


def cmd_imp(cfg: ExperimentConfig, out: Path, overrides) -> int:
    train_ds, test_ds = build_splits(cfg, cfg["seed"])
    sup_cfg = cfg.supervised_config()
    arms = ("student", "random") if cfg["imp.arm"] == "both" else (cfg["imp.arm"],)
    ss = np.random.SeedSequence(cfg["seed"])
    head_seeds = dict(zip(("student", "random"), (int(c.generate_state(1)[0]) for c in ss.spawn(2))))
    _emit_run_dir(out, cfg, "imp", overrides, {"arms": list(arms)})
    curves = {}
    for arm in arms:
        init = _imp_arm_init(cfg, arm, head_seeds[arm])
        rewind = _imp_rewind_point(init, sup_cfg, train_ds, cfg["imp.rewind_epoch"])
        records = supervised.imp_run(rewind, cfg["imp.rounds"], cfg["imp.k"], sup_cfg, train_ds, test_ds)
        write_csv(out / f"imp_{arm}.csv", ["round", "sparsity", "test_accuracy"],
                  [[r["round"], r["sparsity"], r["test_accuracy"]] for r in records])
        curves[arm] = records
    if len(arms) == 2:
        write_csv(out / "comparison.csv",
                  ["round", "sparsity", "student_accuracy", "random_accuracy"],
                  [[s["round"], s["sparsity"], s["test_accuracy"], r["test_accuracy"]]
                   for s, r in zip(curves["student"], curves["random"])])
    return 0


def cmd_lmc(cfg: ExperimentConfig, out: Path, overrides) -> int:
    train_ds, test_ds = build_splits(cfg, cfg["seed"])
    sup_cfg = cfg.supervised_config()
    spec = cfg.model_spec()
    k = cfg["supervised.num_classes"] or cfg["dataset.k"]
    arms = ("student", "random") if cfg["lmc.arm"] == "both" else (cfg["lmc.arm"],)
    n_inits = cfg["lmc.num_inits"]
    ss = np.random.SeedSequence(cfg["seed"])
    seeds = [int(c.generate_state(1)[0]) for c in ss.spawn(2 * n_inits)]
    _emit_run_dir(out, cfg, "lmc", overrides, {"arms": list(arms)})
    aggregate = {}
    from dataclasses import replace

    for arm in arms:
        inits = []
        if arm == "student":
            paths = cfg["lmc.init_ckpts"]
            if len(paths) < n_inits:
                raise ConfigError(f"student arm needs {n_inits} lmc.init_ckpts, got {len(paths)}")
            for i in range(n_inits):
                ck = checkpoint.load_checkpoint(paths[i])
                inits.append(supervised.make_classifier_init(spec, k, seeds[i], encoder_from=ck.params))
        else:
            for i in range(n_inits):
                inits.append(supervised.make_classifier_init(spec, k, seeds[n_inits + i]))
        rows = []
        barriers = []
        for init_id, init in enumerate(inits):
            res = supervised.lmc_experiment(
                init, cfg["lmc.num_orderings"], cfg["lmc.gamma_points"],
                replace(sup_cfg, ordering_seed=init_id), train_ds, test_ds,
            )
            for i, j, curve in res.curves:
                for gamma, err in curve:
                    rows.append([init_id, f"{i}-{j}", gamma, err])
            barriers.extend(b for _, _, b in res.barriers)
        write_csv(out / f"lmc_{arm}.csv", ["init_id", "pair", "gamma", "test_error"], rows)
        aggregate[arm] = {
            "mean_barrier": float(np.mean(barriers)),
            "std_barrier": float(np.std(barriers)),
            "barriers": [float(b) for b in barriers],
        }
    write_json(out / "aggregate.json", aggregate)
    return 0


def cmd_restart(cfg: ExperimentConfig, out: Path, overrides) -> int:
    spec = cfg.model_spec()
    train_ds, test_ds = build_splits(cfg, cfg["seed"])
    _emit_run_dir(out, cfg, "restart", overrides, {"rounds": cfg["restart.rounds"]})
    rounds = []
    result = distill.distill_run(spec, cfg.distill_config(), train_ds)
    for r in range(1, cfg["restart.rounds"] + 1):
        if r > 1:
            result = distill.restart_round(result, train_ds)
        log = result.log
        write_csv(out / f"runlog_round{r}.csv", ["step", "epoch", "loss", "kl", "dist_from_init"],
                  zip(log.step, log.epoch, log.loss, log.kl, log.dist_from_init))
        _save_model_ckpt(out / f"student_round{r}.ckpt", spec, result.student,
                         result.config.seed, log.step[-1] if log.step else 0)
        rounds.append({
            "round": r,
            "seed": result.config.seed,
            "initial_kl": log.kl[0] if log.kl else None,
            "final_dist_from_init": log.dist_from_init[-1] if log.dist_from_init else None,
        })
    write_json(out / "restart_metrics.json", {"rounds": rounds})
    return 0


def cmd_noise_control(cfg: ExperimentConfig, out: Path, overrides) -> int:
    """Distill on pure-noise inputs, probe on the clean dataset."""
    spec = cfg.model_spec()
    train_ds, test_ds = build_splits(cfg, cfg["seed"])
    shape = train_ds.inputs.shape[1:]
    noise_ds = data.gaussian_noise_inputs(cfg["dataset.n_train"], shape,
                                          cfg["dataset.sigma"], seed=cfg["seed"] + 1)
    _emit_run_dir(out, cfg, "noise-control", overrides, {"sigma": cfg["dataset.sigma"]})
    result = distill.distill_run(spec, cfg.distill_config(), noise_ds)
    epochs = result.config.epochs
    rows = _probe_rows(result.teacher.copy().eval(), train_ds, test_ds, cfg, epochs, "teacher")
    rows += _probe_rows(result.student.copy().eval(), train_ds, test_ds, cfg, epochs, "student")
    write_csv(out / "probe.csv", ["epoch", "subject", "probe_kind", "split", "seed", "accuracy"], rows)
    by_subject = {}
    for row in rows:
        if row[3] == "test":
            by_subject.setdefault(row[1], []).append(row[5])
    gain = float(np.mean(by_subject["student"]) - np.mean(by_subject["teacher"]))
    write_json(out / "gain.json", {
        "teacher_mean_test": float(np.mean(by_subject["teacher"])),
        "student_mean_test": float(np.mean(by_subject["student"])),
        "gain": gain,
    })
    return 0


def cmd_size_sweep(cfg: ExperimentConfig, out: Path, overrides) -> int:
    spec = cfg.model_spec()
    train_ds, test_ds = build_splits(cfg, cfg["seed"])
    _emit_run_dir(out, cfg, "size-sweep", overrides, {"sizes": list(cfg["sweep.sizes"])})
    rows = []
    for n_sub in cfg["sweep.sizes"]:
        sub = data.subsample(train_ds, n_sub, seed=cfg["seed"], stratified=True)
        result = distill.distill_run(spec, cfg.distill_config(), sub)
        for subject, state in (("teacher", result.teacher), ("student", result.student)):
            f_tr = probing.extract_features(state.copy().eval(), train_ds)
            f_te = probing.extract_features(state.copy().eval(), test_ds)
            avg = probing.averaged_linear_probe(f_tr, f_te, seeds=cfg["probe.seeds"],
                                                epochs=cfg["probe.epochs"])
            rows.append([n_sub, subject, avg["mean_test"]])
    write_csv(out / "sweep.csv", ["n_sub", "subject", "accuracy"], rows)
    return 0


COMMANDS = {
    "distill": cmd_distill,
    "probe": cmd_probe,
    "landscape": cmd_landscape,
    "imp": cmd_imp,
    "lmc": cmd_lmc,
    "restart": cmd_restart,
    "noise-control": cmd_noise_control,
    "size-sweep": cmd_size_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rtlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="config file path")
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="config override, repeatable")
    return parser


def _resolve(args) -> tuple:
    text = Path(args.config).read_text() if args.config else ""
    cfg = parse_config(text)
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    cfg = apply_overrides(cfg, overrides)
    # the output location is plumbing, not experiment identity: the --out
    # flag stays out of the recorded overrides
    root = Path(os.environ.get("RTLAB_OUT_ROOT", "runs"))
    out = Path(args.out) if args.out else (Path(cfg["out"]) if cfg["out"] else root / args.command)
    return cfg, out, overrides


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, out, overrides = _resolve(args)
        return COMMANDS[args.command](cfg, out, overrides)
    except (ConfigError, ParseError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, DivergenceError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContractError, ShapeError, DomainError, LayoutError,
            DegenerateDirectionsError, RtlabError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
