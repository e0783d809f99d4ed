"""``railseg`` command line: generate, prepare, train, eval, experiment.

Exit codes: 0 success, 2 configuration error, 3 missing prerequisite,
4 runtime failure.

Output layout under ``output_dir``::

    data/pseudo_real_NNN.ply, data/synthetic_NNN.ply   training sources
    eval/heldout.ply, eval/concrete.ply                evaluation clouds
    generation.log                                     JSON generation record
    groups/<G>/                                        patches + <G>_manifest.json
    checkpoints/<G>.rseg, checkpoints/<G>_train.json   weights + train report
    reports/<G>.json                                   metrics report
    results.csv, summary.txt                           experiment outputs
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, all_keys, load_config
from .metrics import MetricsReport, evaluate, format_percent, write_csv
from .nn.checkpoint import Checkpoint
from .nn.network import NetConfig, SegNetwork
from .nn.train import TrainReport, train
from .pipeline import (DatasetManifest, GroupConfig, assemble_group, make_group_configs,
                       subsample_to_level)
from .ply import load_ply, save_ply
from .pointcloud import derive_seed
from .synthgen import batch_generate, concrete_tie, generate_pseudo_real

log = logging.getLogger("railseg")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4


class MissingPrerequisite(RuntimeError):
    pass


def _groups(cfg: ExperimentConfig) -> dict[str, GroupConfig]:
    return {g.id: g for g in make_group_configs(cfg.scale)}


def _group_index(gid: str) -> int:
    return int(gid[1:])


def _data_files(cfg: ExperimentConfig) -> tuple[list[Path], list[Path]]:
    d = cfg.out / "data"
    return ([d / f"pseudo_real_{i:03d}.ply" for i in range(cfg.pseudo_real_count)],
            [d / f"synthetic_{i:03d}.ply" for i in range(cfg.synthetic_count)])


def _require(paths, what: str) -> None:
    missing = [str(p) for p in paths if not Path(p).exists()]
    if missing:
        raise MissingPrerequisite(f"missing {what}: {', '.join(missing)}")


def cmd_generate(cfg: ExperimentConfig) -> list[Path]:
    """Write pseudo-real and clean synthetic training clouds plus evaluation clouds."""
    real_paths, syn_paths = _data_files(cfg)
    (cfg.out / "data").mkdir(parents=True, exist_ok=True)
    (cfg.out / "eval").mkdir(parents=True, exist_ok=True)
    record = {"seed": cfg.seed, "pseudo_real": [], "synthetic": [], "eval": []}
    for i, p in enumerate(real_paths):
        s = derive_seed(cfg.seed, 100, i)
        c = generate_pseudo_real(cfg.track, cfg.pseudo_real_density, cfg.noise, s)
        save_ply(c, p)
        record["pseudo_real"].append({"file": p.name, "seed": s, "points": c.n})
        log.info("wrote %s (%d points)", p, c.n)
    if syn_paths:
        clouds = batch_generate(cfg.track, len(syn_paths), cfg.synthetic_jitter,
                                cfg.synthetic_density, derive_seed(cfg.seed, 200))
        for p, c in zip(syn_paths, clouds):
            save_ply(c, p)
            record["synthetic"].append({"file": p.name, "points": c.n})
            log.info("wrote %s (%d points)", p, c.n)
    for name, spec, key in (("heldout", cfg.track, 300), ("concrete", concrete_tie(cfg.track), 301)):
        s = derive_seed(cfg.seed, key)
        c = generate_pseudo_real(spec, cfg.pseudo_real_density, cfg.noise, s)
        p = cfg.out / "eval" / f"{name}.ply"
        save_ply(c, p)
        record["eval"].append({"file": f"eval/{p.name}", "seed": s, "points": c.n})
    (cfg.out / "generation.log").write_text(json.dumps(record, indent=2) + "\n")
    return real_paths + syn_paths


def cmd_prepare(cfg: ExperimentConfig, group_id: str) -> DatasetManifest:
    groups = _groups(cfg)
    if group_id not in groups:
        raise ConfigError(f"unknown group {group_id!r}; expected one of {sorted(groups)}")
    group = groups[group_id]
    real_paths, syn_paths = _data_files(cfg)
    _require(real_paths, "pseudo-real clouds (run 'railseg generate')")
    if group.bim_included:
        _require(syn_paths, "synthetic clouds (run 'railseg generate')")
        if not syn_paths:
            raise ConfigError(f"{group_id} includes BIM data but synthetic_count is 0")
    real = [load_ply(p) for p in real_paths]
    syn = [load_ply(p) for p in syn_paths] if group.bim_included else []
    out = cfg.out / "groups" / group_id
    if out.exists():
        for f in out.glob(f"{group_id}_*"):
            f.unlink()
    m = assemble_group(group, real, syn, cfg.patches_per_cloud, out,
                       derive_seed(cfg.seed, 400, _group_index(group_id)))
    log.info("%s: %d patches of %d points", group_id, len(m.patches), group.level.patch_size)
    return m


def _manifest_path(cfg, gid):
    return cfg.out / "groups" / gid / f"{gid}_manifest.json"


def _ckpt_path(cfg, gid):
    return cfg.out / "checkpoints" / f"{gid}.rseg"


def cmd_train(cfg: ExperimentConfig, group_id: str) -> tuple[Checkpoint, TrainReport]:
    mpath = _manifest_path(cfg, group_id)
    _require([mpath], f"manifest for {group_id} (run 'railseg prepare --group {group_id}')")
    manifest = DatasetManifest.load(mpath)
    seed = derive_seed(cfg.seed, 500, _group_index(group_id))
    net = SegNetwork.init(NetConfig(), seed)
    log.info("%s: training %d epochs on %d patches", group_id, cfg.epochs, len(manifest.patches))
    ckpt, report = train(net, manifest, cfg.epochs, cfg.lr, cfg.batch_size, seed)
    (cfg.out / "checkpoints").mkdir(parents=True, exist_ok=True)
    ckpt.save(_ckpt_path(cfg, group_id))
    (cfg.out / "checkpoints" / f"{group_id}_train.json").write_text(
        json.dumps(report.to_dict(), indent=2) + "\n")
    log.info("%s: trained in %.1f s", group_id, report.wall_time_s)
    return ckpt, report


def cmd_eval(cfg: ExperimentConfig, group_id: str, cloud_path: str | None = None,
             tag: str | None = None) -> MetricsReport:
    groups = _groups(cfg)
    if group_id not in groups:
        raise ConfigError(f"unknown group {group_id!r}")
    group = groups[group_id]
    cpath = _ckpt_path(cfg, group_id)
    _require([cpath], f"checkpoint for {group_id} (run 'railseg train --group {group_id}')")
    test_path = Path(cloud_path) if cloud_path else cfg.out / "eval" / "heldout.ply"
    _require([test_path], "evaluation cloud (run 'railseg generate')")
    ckpt = Checkpoint.load(cpath)
    cloud = load_ply(test_path, ckpt.schema)
    if cloud.n > group.level.hi:
        cloud = subsample_to_level(cloud, group.level, derive_seed(cfg.seed, 601))
    report = evaluate(ckpt, cloud, group.level.patch_size,
                      derive_seed(cfg.seed, 600, _group_index(group_id)), group_id=tag or group_id)
    tpath = cfg.out / "checkpoints" / f"{group_id}_train.json"
    if tpath.exists():
        report.train_time_s = json.loads(tpath.read_text())["wall_time_s"]
    (cfg.out / "reports").mkdir(parents=True, exist_ok=True)
    (cfg.out / "reports" / f"{tag or group_id}.json").write_text(report.to_json() + "\n")
    log.info("%s: OA %s mIoU %.4f", tag or group_id, format_percent(report.oa), report.miou)
    return report


def cmd_experiment(cfg: ExperimentConfig) -> tuple[Path, list[str]]:
    """Run G1..G8 in sequence and write results.csv and summary.txt.

    Returns the CSV path and the ids of groups that failed.
    """
    real_paths, syn_paths = _data_files(cfg)
    evals = [cfg.out / "eval" / "heldout.ply", cfg.out / "eval" / "concrete.ply"]
    if not all(p.exists() for p in real_paths + syn_paths + evals):
        log.info("generated data missing; generating")
        cmd_generate(cfg)
    rows, failed, lines = [], [], []
    g5_report = None
    for group in make_group_configs(cfg.scale):
        try:
            cmd_prepare(cfg, group.id)
            cmd_train(cfg, group.id)
            rep = cmd_eval(cfg, group.id)
        except Exception as exc:  # recorded per group; the run continues
            log.error("%s failed: %s", group.id, exc)
            failed.append(group.id)
            rows.append([group.id, *group.row(), "", "", ""])
            lines.append(f"{group.id}: FAILED ({exc})")
            continue
        rows.append(rep.csv_row(*group.row()))
        if group.id == "G5":
            g5_report = rep
        lines.append(f"{group.id:<4} {group.level.name:<24} {group.rotation:<8} "
                     f"bim={'yes' if group.bim_included else 'no ':<4} "
                     f"train {rep.train_time_s:8.1f} s  OA {format_percent(rep.oa):>7}  "
                     f"mIoU {rep.miou:.4f}")
    g5 = _groups(cfg)["G5"]
    if g5_report is not None:
        try:
            rep = cmd_eval(cfg, "G5", str(evals[1]), tag="G5-concrete")
            rows.append(rep.csv_row(*g5.row()))
            lines.append(f"G5 on concrete-tie track (no retraining): OA {format_percent(rep.oa)}  "
                         f"mIoU {rep.miou:.4f}")
        except Exception as exc:
            log.error("G5-concrete failed: %s", exc)
            failed.append("G5-concrete")
            rows.append(["G5-concrete", *g5.row(), "", "", ""])
    else:
        failed.append("G5-concrete")
        rows.append(["G5-concrete", *g5.row(), "", "", ""])
    csv_path = cfg.out / "results.csv"
    csv_path.write_text(write_csv(rows))
    header = (f"railseg experiment  seed={cfg.seed}  scale={cfg.scale:.6g}  epochs={cfg.epochs}  "
              f"pseudo_real={cfg.pseudo_real_count}  synthetic={cfg.synthetic_count}")
    (cfg.out / "summary.txt").write_text("\n".join([header, *lines]) + "\n")
    return csv_path, failed


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    for section, key, default in all_keys():
        kind = type(default)
        if kind is bool:
            common.add_argument(_flag(key), dest=key, default=None,
                                type=lambda s: s.lower() in ("1", "true", "yes", "on"),
                                help=f"[{section}] {key} (default: {str(default).lower()})")
        else:
            shown = f"{default:.6g}" if kind is float else (default if default != "" else "unset")
            common.add_argument(_flag(key), dest=key, default=None, type=kind,
                                help=f"[{section}] {key} (default: {shown})")

    parser = argparse.ArgumentParser(prog="railseg", description="Rail / crosstie point-cloud segmentation")
    parser.add_argument("--version", action="version", version=f"railseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="generate pseudo-real and synthetic clouds")
    for name, text in (("prepare", "build one group's patch dataset"),
                       ("train", "train one group's network"),
                       ("eval", "evaluate one group's checkpoint")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--group", required=True, help="group id, G1..G8")
        if name == "eval":
            p.add_argument("--cloud", help="labeled PLY to evaluate (default: eval/heldout.ply)")
    sub.add_parser("experiment", parents=[common], help="run all eight groups and write results.csv")
    return parser


@contextlib.contextmanager
def _thread_limit():
    n = os.environ.get("RAILSEG_THREADS")
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(n)):
        yield


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    overrides = {k: getattr(args, k, None) for _, k, _ in all_keys()}
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"railseg: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with _thread_limit():
            if args.command == "generate":
                cmd_generate(cfg)
            elif args.command == "prepare":
                cmd_prepare(cfg, args.group)
            elif args.command == "train":
                cmd_train(cfg, args.group)
            elif args.command == "eval":
                rep = cmd_eval(cfg, args.group, args.cloud)
                print(rep.to_json())
            elif args.command == "experiment":
                csv_path, failed = cmd_experiment(cfg)
                sys.stdout.write(csv_path.read_text())
                if failed:
                    print(f"railseg: failed groups: {', '.join(failed)}", file=sys.stderr)
                    return EXIT_RUNTIME
    except ConfigError as exc:
        print(f"railseg: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisite as exc:
        print(f"railseg: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"railseg: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
