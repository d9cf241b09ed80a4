"""Command-line entry point: ``refbridge <subcommand> ...``.

Subcommands
-----------
synth    write a seeded synthetic training set (images, flows, manifest)
degrade  apply a degradation preset or config to an image or a directory
flow     block-matching optical flow between two images, written as .flo
train    train the toy restorer on a manifest, write a checkpoint
restore  tiled, reference-guided restoration of one image
eval     score an evaluation manifest, write a text + JSON report
replay   re-run a command from the resolved config it emitted

Every run writes its fully resolved configuration (INI) next to its output.
Exit status is 0 on success, 2 for configuration problems and 3 for failures
while running; the message names the stage and the file involved.
"""
from __future__ import annotations

import argparse
import configparser
import contextlib
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict, fields
from pathlib import Path


from . import SHIPPED_CHECKPOINTS, shipped_checkpoint
from . import degradation as deg
from . import flow as flowlib
from . import metrics as met
from . import trainer as tr
from .imageio import read_image, sub_seed, write_image
from .model import ModelConfig, Wiring

log = logging.getLogger("refbridge")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
IMAGE_SUFFIXES = (".png", ".ppm", ".pnm")


class ConfigError(Exception):
    """Bad flags or config file contents."""


class RunError(Exception):
    """A stage failed while running."""


@contextlib.contextmanager
def stage(name, path=None):
    """Re-raise anything from inside the block as a RunError naming the stage and file."""
    try:
        yield
    except (ConfigError, RunError):
        raise
    except Exception as exc:
        where = f" [{path}]" if path is not None else ""
        raise RunError(f"{name}{where}: {type(exc).__name__}: {exc}") from exc


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

def _ini_value(v):
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def write_resolved_config(args, path):
    """Serialise the resolved arguments of a run as INI."""
    cp = configparser.ConfigParser(interpolation=None)
    cp["run"] = {"command": args.command, "seed": str(args.seed), "threads": str(args.threads)}
    body = {k: _ini_value(v) for k, v in sorted(vars(args).items())
            if k not in ("command", "seed", "threads", "func", "cfg", "verbose") and v is not None}
    cp["args"] = body
    if getattr(args, "degradation", None) is not None:
        cp["degradation"] = {k: str(v) for k, v in asdict(args.degradation).items()}
    if getattr(args, "train_config", None) is not None:
        tcfg = args.train_config.to_dict()
        cp["model"] = {k: str(v) for k, v in tcfg.pop("model").items()}
        abl = tcfg.pop("ablation")
        tcfg["ablation"] = ",".join(n for n, on in abl.items() if on)
        cp["train"] = {k: _ini_value(v) for k, v in tcfg.items()}
    for section in ("degradation", "train_config"):
        cp["args"].pop(section, None)
    with open(path, "w") as fh:
        cp.write(fh)
    return path


def read_config(path):
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file [{path}]: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file [{path}]: {exc}") from None
    return cp


def _typed(cls, section, path):
    """Build dataclass ``cls`` from an INI section, converting by field type."""
    kw = {}
    names = {f.name: f for f in fields(cls)}
    for key, raw in section.items():
        if key not in names:
            raise ConfigError(f"[{path}] unknown key {key!r} for {cls.__name__}")
        default = names[key].default
        try:
            if isinstance(default, bool):
                kw[key] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                kw[key] = int(raw)
            elif isinstance(default, float):
                kw[key] = float(raw)
            else:
                kw[key] = raw
        except ValueError:
            raise ConfigError(f"[{path}] {key}={raw!r} is not a valid {type(default).__name__}") from None
    return kw


def degradation_from_config(cp, path):
    if not cp.has_section("degradation"):
        return None
    try:
        return deg.DegradationConfig(**_typed(deg.DegradationConfig, cp["degradation"], path))
    except ValueError as exc:
        raise ConfigError(f"[{path}] degradation: {exc}") from None


def train_config_from_config(cp, path):
    kw = {}
    if cp.has_section("model"):
        kw["model"] = ModelConfig(**_typed(ModelConfig, cp["model"], path))
    if cp.has_section("train"):
        sec = dict(cp["train"])
        abl = sec.pop("ablation", "")
        betas = sec.pop("betas", None)
        plain = {k: v for k, v in sec.items() if k not in ("ablation", "model")}
        kw.update(_typed(tr.TrainConfig, plain, path))
        if betas:
            kw["betas"] = tuple(float(b) for b in betas.split(","))
        try:
            kw["ablation"] = tr.AblationFlags.from_names([n for n in abl.split(",") if n.strip()])
        except ValueError as exc:
            raise ConfigError(f"[{path}] {exc}") from None
    return kw


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _read(path, what):
    with stage(f"reading {what}", path):
        return read_image(path)


def _write(img, path, what="output image"):
    with stage(f"writing {what}", path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        write_image(img, path)


def _resolve_degradation(args):
    if getattr(args, "cfg", None):
        cp = read_config(args.cfg)
        cfg = degradation_from_config(cp, args.cfg)
        if cfg is None:
            raise ConfigError(f"[{args.cfg}] has no [degradation] section")
        return cfg.with_seed(args.seed)
    try:
        return deg.preset(args.preset, args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _checkpoint_path(value):
    if value.startswith("shipped:"):
        name = value.split(":", 1)[1]
        if name not in SHIPPED_CHECKPOINTS:
            raise ConfigError(f"no shipped checkpoint {name!r}; choose from {', '.join(SHIPPED_CHECKPOINTS)}")
        return shipped_checkpoint(name)
    return Path(value)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    args.degradation = _resolve_degradation(args)
    scales = tuple(float(s) for s in args.scales.split(","))
    with stage("synthesising dataset", args.out):
        manifest = deg.synthesize_dataset(
            args.out, args.n, size=args.size, cfg=args.degradation, seed=args.seed,
            max_shift=args.max_shift, texture_scales=scales, contrast=args.contrast,
        )
    write_resolved_config(args, Path(args.out) / "run.config.ini")
    print(manifest)


def cmd_degrade(args):
    args.degradation = _resolve_degradation(args)
    src = Path(args.inp)
    if src.is_dir():
        inputs = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        out_dir = Path(args.out)
        outputs = [out_dir / p.name for p in inputs]
    else:
        if not src.exists():
            raise RunError(f"reading input image [{src}]: no such file")
        inputs = [src]
        out = Path(args.out)
        out_dir = out.parent
        outputs = [out]
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    identity = args.degradation.with_seed(0) == deg.DegradationConfig()
    for i, (p, q) in enumerate(zip(inputs, outputs)):
        cfg = args.degradation.with_seed(sub_seed(args.seed, i)) if len(inputs) > 1 else args.degradation
        if identity and p.suffix.lower() == q.suffix.lower():
            with stage("copying image", p):
                shutil.copyfile(p, q)
        else:
            _write(deg.degrade(_read(p, "input image"), cfg), q)
        lines.append(f"{p.as_posix()}\t{q.relative_to(out_dir).as_posix()}\t{cfg.to_string()}\n")
    manifest = out_dir / "degrade_manifest.tsv"
    manifest.write_text("".join(lines))
    write_resolved_config(args, out_dir / "degrade.config.ini")
    print(manifest)


def cmd_flow(args):
    src = _read(args.src, "source image")
    dst = _read(args.dst, "target image")
    with stage("estimating flow", args.src):
        field = flowlib.estimate_flow(src, dst, args.block, args.search)
    with stage("writing flow", args.out):
        flowlib.write_flo(field, args.out)
    write_resolved_config(args, f"{args.out}.config.ini")
    print(args.out)


def _train_config(args):
    kw = {}
    if args.cfg:
        kw = train_config_from_config(read_config(args.cfg), args.cfg)
    base = tr.toy_config() if args.recipe == "toy" else tr.TrainConfig()
    merged = {**{f.name: getattr(base, f.name) for f in fields(base)}, **kw}
    for flag in ("lr", "steps", "batch_size"):
        if getattr(args, flag) is not None:
            merged[flag] = getattr(args, flag)
    merged["seed"] = args.seed
    if args.ablation:
        try:
            merged["ablation"] = tr.AblationFlags.from_names(args.ablation)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    try:
        cfg = tr.TrainConfig(**merged)
        tr.apply_ablation(cfg.ablation)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"training config: {exc}") from None
    if cfg.lr < 0 or cfg.steps < 0 or cfg.batch_size < 1:
        raise ConfigError(f"training config: lr, steps must be >= 0 and batch_size >= 1 (got {cfg.lr}, {cfg.steps}, {cfg.batch_size})")
    return cfg


def cmd_train(args):
    cfg = _train_config(args)
    args.train_config = cfg
    with stage("loading training data", args.manifest):
        pairs = tr.load_pairs(args.manifest, cfg)
    with stage("training", args.manifest):
        result = tr.train(cfg, pairs=pairs)
    ckpt = Path(args.out_ckpt)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    with stage("writing checkpoint", ckpt):
        tr.save_checkpoint(result.model, ckpt, cfg.steps, cfg.seed, cfg.digest(), tr.apply_ablation(cfg.ablation).mode)
        tr.write_loss_trace(result.losses, f"{ckpt}.loss.tsv")
    write_resolved_config(args, f"{ckpt}.config.ini")
    print(f"{ckpt}\tval_loss={result.val_loss:.6f}")


def cmd_restore(args):
    from .pcr_tiling import restore_image

    args.degradation = _resolve_degradation(args)
    ckpt = _checkpoint_path(args.ckpt)
    with stage("loading checkpoint", ckpt):
        model, meta = tr.load_checkpoint(ckpt, with_meta=True)
    wiring = Wiring(meta.get("wiring", "full"))
    if args.no_motion_bias:
        if wiring.mode not in ("full", "no_motion_bias"):
            raise ConfigError(f"--no-motion-bias needs a motion-biased checkpoint, {ckpt} is {wiring.mode!r}")
        wiring = Wiring("no_motion_bias")
    lq = _read(args.lq, "low-quality image")
    ref = _read(args.ref, "reference image")
    if lq.shape != ref.shape:
        raise RunError(f"checking inputs [{args.ref}]: reference {ref.shape[:2]} vs low-quality {lq.shape[:2]}")
    flows = {}
    for key, path in (("flow_fwd", args.flow_fwd), ("flow_bwd", args.flow_bwd)):
        if path:
            with stage("reading flow", path):
                flows[key] = flowlib.read_flo(path)
            if flows[key].shape[:2] != lq.shape[:2]:
                raise RunError(f"reading flow [{path}]: extents {flows[key].shape[:2]} vs image {lq.shape[:2]}")
    f = model.config.factor
    if args.tile % f:
        raise ConfigError(f"--tile {args.tile} is not divisible by the checkpoint's latent factor {f}")
    with stage("restoring", args.lq):
        out, record = restore_image(
            lq, ref, model, args.degradation, patch=args.tile, overlap=args.overlap, seed=args.seed,
            steps=args.steps, pcr=not args.no_pcr, wiring=wiring, flow_block=args.block,
            flow_search=args.search, workers=args.threads, return_record=True, **flows,
        )
    _write(out, args.out)
    sidecar = record.to_dict()
    sidecar.update({"checkpoint": str(ckpt), "lq": str(args.lq), "ref": str(args.ref), "tiles_total": len(record.plan)})
    with stage("writing run record", f"{args.out}.run.json"):
        Path(f"{args.out}.run.json").write_text(json.dumps(sidecar, indent=2))
    write_resolved_config(args, f"{args.out}.config.ini")
    print(args.out)


def cmd_eval(args):
    names = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    unknown = set(names) - set(met.DEFAULT_METRICS)
    if unknown:
        raise ConfigError(f"unknown metrics {sorted(unknown)}; choose from {', '.join(met.DEFAULT_METRICS)}")
    scores = None
    if args.import_scores:
        with stage("reading imported scores", args.import_scores):
            scores = met.read_scores(args.import_scores)
    if not Path(args.manifest).exists():
        raise RunError(f"reading evaluation manifest [{args.manifest}]: no such file")
    with stage("evaluating", args.manifest):
        report = met.evaluate(args.manifest, names, scores, {"seed": args.seed})
    with stage("writing report", args.out_report):
        Path(args.out_report).parent.mkdir(parents=True, exist_ok=True)
        report.write(args.out_report)
    write_resolved_config(args, f"{args.out_report}.config.ini")
    print(args.out_report)


def cmd_replay(args):
    cp = read_config(args.config)
    if not cp.has_section("run") or "command" not in cp["run"]:
        raise ConfigError(f"[{args.config}] is not a resolved run config (no [run] command)")
    argv = [cp["run"]["command"], "--seed", cp["run"].get("seed", "0")]
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices[cp["run"]["command"]]
    dests = {a.dest: a for a in sub._actions}
    for key, raw in cp["args"].items():
        action = dests.get(key)
        if action is None or not action.option_strings:
            continue
        if key == "preset" and cp.has_section("degradation"):
            continue
        opt = action.option_strings[-1]
        if isinstance(action, argparse._StoreTrueAction):
            if raw == "True":
                argv.append(opt)
        elif isinstance(action, argparse._AppendAction):
            for item in filter(None, raw.split(",")):
                argv += [opt, item]
        else:
            argv += [opt, raw]
    if cp.has_section("degradation") and "preset" in dests:
        tmp = Path(args.config).with_suffix(".replay.ini")
        out = configparser.ConfigParser(interpolation=None)
        out["degradation"] = dict(cp["degradation"])
        with open(tmp, "w") as fh:
            out.write(fh)
        argv += ["--cfg", str(tmp)]
    if cp.has_section("train") and "recipe" in dests:
        tmp = Path(args.config).with_suffix(".replay.ini")
        out = configparser.ConfigParser(interpolation=None)
        out["train"] = dict(cp["train"])
        out["model"] = dict(cp["model"])
        with open(tmp, "w") as fh:
            out.write(fh)
        argv += ["--cfg", str(tmp)]
    argv += ["--threads", cp["run"].get("threads", "1")]
    return main(argv)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="upper bound on worker threads (default: available CPUs)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="refbridge", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def degradation_opts(p, default="livephoto"):
        g = p.add_mutually_exclusive_group()
        g.add_argument("--preset", default=default, help=f"degradation preset ({', '.join(deg.PRESETS)})")
        g.add_argument("--cfg", help="INI file with a [degradation] section")

    p = sub.add_parser("synth", parents=[common], help="write a synthetic shifted-pair dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--size", type=int, default=deg.SHIFTED_PAIR_FIXTURE["size"])
    p.add_argument("--max-shift", type=float, default=deg.SHIFTED_PAIR_FIXTURE["max_shift"])
    p.add_argument("--scales", default=",".join(map(str, deg.SHIFTED_PAIR_FIXTURE["texture_scales"])))
    p.add_argument("--contrast", type=float, default=deg.SHIFTED_PAIR_FIXTURE["contrast"])
    degradation_opts(p, deg.SHIFTED_PAIR_FIXTURE["preset"])
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("degrade", parents=[common], help="degrade an image or a directory of images")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    degradation_opts(p)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("flow", parents=[common], help="block-matching flow src -> dst as .flo")
    p.add_argument("--src", required=True)
    p.add_argument("--dst", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--block", type=int, default=16)
    p.add_argument("--search", type=int, default=24)
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("train", parents=[common], help="train the toy restorer")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cfg", help="INI file with [train] and [model] sections")
    p.add_argument("--out-ckpt", required=True)
    p.add_argument("--recipe", choices=("toy", "default"), default="toy",
                   help="base settings: the 500-step toy recipe or the full-scale defaults")
    p.add_argument("--lr", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--ablation", action="append", choices=tr.ABLATION_FLAGS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("restore", parents=[common], help="reference-guided tiled restoration")
    p.add_argument("--lq", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--ckpt", default="shipped:full", help="checkpoint path or shipped:<name>")
    p.add_argument("--out", required=True)
    p.add_argument("--flow-fwd", help=".flo key photo -> reselected (estimated when absent)")
    p.add_argument("--flow-bwd", help=".flo reselected -> key photo (estimated when absent)")
    p.add_argument("--tile", type=int, default=64)
    p.add_argument("--overlap", type=int, default=8)
    p.add_argument("--steps", type=int, default=6)
    p.add_argument("--block", type=int, default=16)
    p.add_argument("--search", type=int, default=24)
    p.add_argument("--no-pcr", action="store_true", help="co-located reference crops")
    p.add_argument("--no-motion-bias", action="store_true", help="drop the flow embedding from the keys")
    degradation_opts(p, deg.SHIFTED_PAIR_FIXTURE["preset"])
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("eval", parents=[common], help="score restored images against references")
    p.add_argument("--manifest", required=True)
    p.add_argument("--metrics", default=",".join(met.DEFAULT_METRICS))
    p.add_argument("--out-report", required=True)
    p.add_argument("--import-scores", help="file of 'image metric value' lines")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("replay", help="re-run a command from its emitted *.config.ini")
    p.add_argument("config")
    p.set_defaults(func=cmd_replay, seed=0, threads=1, verbose=False)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    if args.threads < 1:
        print(f"refbridge {args.command}: config: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        rc = args.func(args)
    except ConfigError as exc:
        print(f"refbridge {args.command}: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunError as exc:
        print(f"refbridge {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return rc if isinstance(rc, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
