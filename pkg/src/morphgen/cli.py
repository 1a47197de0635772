"""Command-line entry point: ``morphgen <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 numeric
abort (non-finite training loss).
"""
import argparse
import csv
import glob
import logging
import os
import sys

import numpy as np

from .config import RunConfig
from .errors import CheckpointError, MorphgenError, NumericAbort

log = logging.getLogger("morphgen")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
SAMPLE_HEADER = ["sample_id", "perturbation", "seed", "t_bridge"]
CHANNEL_NAMES = ("cytoplasm", "nucleus")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- data helpers


def _read_manifest(directory):
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"data directory {directory} does not exist")
    path = os.path.join(directory, "manifest.csv")
    if os.path.exists(path):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        label_key = "archetype" if rows and "archetype" in rows[0] else "perturbation"
        return [(r["sample_id"], r.get(label_key, ""), os.path.join(directory, r["sample_id"] + ".mvol")) for r in rows]
    files = sorted(f for f in glob.glob(os.path.join(directory, "*.mvol")) if not f.endswith(".signal.mvol"))
    label = os.path.basename(os.path.normpath(directory))
    return [(os.path.basename(f)[: -len(".mvol")], label, f) for f in files]


def load_dataset(dirs, cube, signal=False, label=None):
    """Read and preprocess every volume listed under ``dirs``.

    Returns ``(sample_ids, labels, array)``; ``signal`` loads the single-channel
    ``.signal.mvol`` companions instead.
    """
    from .volume import preprocess, read_volume

    ids, labels, vols = [], [], []
    for d in dirs:
        for sid, lab, path in _read_manifest(d):
            if label is not None and lab != label:
                continue
            if signal:
                path = path[: -len(".mvol")] + ".signal.mvol"
            vol = read_volume(path)
            vol = vol if signal else preprocess(vol, cube)
            ids.append(sid)
            labels.append(lab)
            vols.append(vol.data)
    if not vols:
        raise MorphgenError(f"no volumes found in {', '.join(dirs)}" + (f" with label {label!r}" if label else ""))
    return ids, labels, np.stack(vols)


def write_samples(out_dir, volumes, label, seed, t_bridge, prefix="sample"):
    from .volume import CellVolume, write_volume

    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i, v in enumerate(volumes):
        sid = f"{prefix}_{i:05d}"
        write_volume(os.path.join(out_dir, sid + ".mvol"), CellVolume(v))
        rows.append([sid, label, seed, t_bridge])
    with open(os.path.join(out_dir, "manifest.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SAMPLE_HEADER)
        w.writerows(rows)


def read_values(path, column=None, channel=None):
    """Numbers from a plain list (whitespace/comma separated) or one CSV column."""
    with open(path) as fh:
        text = fh.read()
    if column is None:
        try:
            return np.array([float(x) for x in text.replace(",", " ").split()])
        except ValueError:
            raise MorphgenError(f"{path}: not a plain list of numbers; pass --column") from None
    rows = list(csv.DictReader(text.splitlines()))
    if not rows or column not in rows[0]:
        raise MorphgenError(f"{path}: no column {column!r}")
    if channel is not None:
        rows = [r for r in rows if r.get("channel") == channel]
    return np.array([float(r[column]) for r in rows])


def _channel_index(name):
    if name in CHANNEL_NAMES:
        return CHANNEL_NAMES.index(name)
    try:
        return int(name)
    except ValueError:
        raise MorphgenError(f"channel must be one of {CHANNEL_NAMES} or an index, got {name!r}") from None


# ---------------------------------------------------------------- subcommands


def cmd_synth(args, cfg):
    from .synth import generate_dataset

    n = args.n if args.n is not None else cfg.n_cells
    generate_dataset(args.archetype, n, cfg.seed, args.out, cube=cfg.cube, with_signal=args.signal)
    log.info("wrote %d %s cells to %s", n, args.archetype, args.out)


def cmd_train_vqgan(args, cfg):
    from .vqgan import train_vqgan

    if args.paper_literal_hinge:
        cfg.paper_literal_hinge = True
    ids, labels, data = load_dataset(args.data, cfg.cube, signal=args.signal)
    channels = data.shape[1]
    groups = sorted(set(labels)) if args.per_label else [None]
    for lab in groups:
        sel = [i for i, l in enumerate(labels) if lab is None or l == lab]
        out = args.out if lab is None else os.path.join(args.out, lab)
        model = train_vqgan(data[sel], cfg.vqgan_config(channels), log_path=os.path.join(out, "vqgan_log.csv"))
        model.save(os.path.join(out, "vqgan"))
        log.info("saved stage-1 checkpoint to %s", os.path.join(out, "vqgan"))


def _encode_all(model, data, batch=16):
    return np.concatenate([model.encode_batch(data[i : i + batch]).data for i in range(0, len(data), batch)])


def cmd_train_ddpm(args, cfg):
    from .diffusion import train_ddpm
    from .vqgan import VQGAN

    label = args.label or ""
    if args.cond_vqgan:
        morph = VQGAN.load(args.cond_vqgan)
        signal = VQGAN.load(args.vqgan)
        _, _, x = load_dataset(args.data, cfg.cube, label=args.label)
        _, _, s = load_dataset(args.data, cfg.cube, signal=True, label=args.label)
        model = train_ddpm(
            _encode_all(signal, s), cfg.ddpm_config(label), cond=_encode_all(morph, x), log_path=os.path.join(args.out, "ddpm_log.csv")
        )
    else:
        vq = VQGAN.load(args.vqgan)
        _, _, x = load_dataset(args.data, cfg.cube, label=args.label)
        model = train_ddpm(_encode_all(vq, x), cfg.ddpm_config(label), log_path=os.path.join(args.out, "ddpm_log.csv"))
    model.save(os.path.join(args.out, "ddpm"))


def _ddpm(prefix):
    from .diffusion import DdpmModel

    return DdpmModel.load(prefix)


def cmd_generate(args, cfg):
    from .diffusion import sample_unconditional
    from .vqgan import VQGAN

    model = _ddpm(args.ddpm)
    n = args.n if args.n is not None else cfg.n_samples
    vols = sample_unconditional(model, VQGAN.load(args.vqgan), n, cfg.seed)
    write_samples(args.out, vols, model.config.label, cfg.seed, model.config.T)


def _t_bridge(args, cfg, model):
    if args.t_bridge is not None:
        return args.t_bridge
    return max(1, int(round(cfg.t_bridge_fraction * model.config.T)))


def cmd_bridge(args, cfg):
    from .diffusion import bridge_conditional
    from .vqgan import VQGAN

    source, target = _ddpm(args.source_ddpm), _ddpm(args.target_ddpm)
    _, _, x = load_dataset(args.data, cfg.cube, label=args.label)
    tb = _t_bridge(args, cfg, target)
    vols = bridge_conditional(x, source, target, VQGAN.load(args.vqgan), tb, cfg.seed)
    write_samples(args.out, vols, target.config.label, cfg.seed, tb, prefix="bridged")


def cmd_traverse(args, cfg):
    from .diffusion import traverse_trajectory
    from .morphology import DescriptorVector
    from .volume import preprocess, read_volume, write_volume
    from .vqgan import VQGAN

    source, target = _ddpm(args.source_ddpm), _ddpm(args.target_ddpm)
    vol = preprocess(read_volume(args.input), cfg.cube)
    tb = _t_bridge(args, cfg, target)
    stride = args.stride or cfg.stride
    entries = traverse_trajectory(vol, source, target, VQGAN.load(args.vqgan), tb, stride, cfg.seed)
    os.makedirs(args.out, exist_ok=True)
    sid = os.path.basename(args.input)[: -len(".mvol")] if args.input.endswith(".mvol") else "input"
    header = SAMPLE_HEADER + ["timestep"] + [f"{c}_{d}" for c in CHANNEL_NAMES for d in DescriptorVector.names()]
    with open(os.path.join(args.out, "trajectory.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for e in entries:
            write_volume(os.path.join(args.out, f"{sid}_t{e.t:04d}.mvol"), e.volume)
            vals = [repr(float(v)) for d in e.descriptors for v in d.as_array()]
            w.writerow([sid, target.config.label, cfg.seed, tb, e.t] + vals)


def cmd_synth_signal(args, cfg):
    from .diffusion import synthesize_signal_channel
    from .vqgan import VQGAN

    model = _ddpm(args.ddpm)
    ids, _, x = load_dataset(args.data, cfg.cube, label=args.label)
    vols = synthesize_signal_channel(x, model, VQGAN.load(args.vqgan), VQGAN.load(args.signal_vqgan), cfg.seed)
    from .volume import CellVolume, write_volume

    os.makedirs(args.out, exist_ok=True)
    for sid, v in zip(ids, vols):
        write_volume(os.path.join(args.out, sid + ".signal.mvol"), CellVolume(v))


def cmd_mesh(args, cfg):
    from .morphology import extract_mesh, otsu_threshold, write_obj
    from .volume import read_volume

    vol = read_volume(args.input)
    ch = vol.data[_channel_index(args.channel)]
    thr = args.threshold if args.threshold is not None else otsu_threshold(ch)
    name = os.path.basename(args.input).split(".")[0]
    write_obj(os.path.join(args.out, f"{name}_{args.channel}.obj"), extract_mesh(ch, thr))


def cmd_descriptors(args, cfg):
    from .morphology import describe_volume, write_descriptor_csv
    from .volume import read_volume

    rows = []
    for d in args.data:
        for sid, _, path in _read_manifest(d):
            for c, desc in enumerate(describe_volume(read_volume(path))):
                rows.append((sid, CHANNEL_NAMES[c] if c < 2 else str(c), desc))
    if not rows:
        raise MorphgenError(f"no volumes found in {', '.join(args.data)}")
    write_descriptor_csv(os.path.join(args.out, "descriptors.csv"), rows)


def _report(args, cfg, reports):
    from .evaluation import write_reports

    if len(reports) == 1:
        print(repr(float(reports[0].value)))
    else:
        for r in reports:
            print(f"{r.metric} {float(r.value)!r}")
    if args.out:
        write_reports(os.path.join(args.out, f"eval_{args.metric}.csv"), reports)


def cmd_eval(args, cfg):
    from . import evaluation as ev

    m = args.metric
    if m in ("fid", "prf"):
        if not (args.real and args.gen):
            raise UsageError(f"eval {m} needs --real and --gen")
        real, gen = ev.read_embeddings(args.real), ev.read_embeddings(args.gen)
        params = {"n_real": len(real), "n_gen": len(gen), "seed": cfg.seed}
        if m == "fid":
            reports = [ev.MetricReport("fid", ev.fid(real, gen), params)]
        else:
            k = args.k or cfg.k
            res = ev.prf_coverage(real, gen, k)
            reports = [ev.MetricReport(name, res[name], dict(params, k=k)) for name in ("precision", "recall", "f1", "coverage")]
    elif m in ("ci", "ks", "pearson"):
        if not (args.a and args.b):
            raise UsageError(f"eval {m} needs --a and --b")
        a = read_values(args.a, args.column, args.channel)
        b = read_values(args.b, args.column, args.channel)
        params = {"n_real": len(a), "n_gen": len(b), "seed": cfg.seed}
        if m == "ci":
            reports = [ev.MetricReport("ci", ev.concordance_index(a, b, args.negate), params)]
        elif m == "ks":
            res = ev.ks_two_sample(a, b)
            reports = [ev.MetricReport("ks_statistic", res["statistic"], params), ev.MetricReport("ks_p_value", res["p_value"], params)]
        else:
            reports = [ev.MetricReport("pearson", ev.pearson(a, b), params)]
    else:  # recall
        if not (args.embeddings and args.known_pairs):
            raise UsageError("eval recall needs --embeddings and --known-pairs")
        emb = ev.read_embeddings(args.embeddings)
        labels, vecs = ev.efaar_normalize_aggregate(emb, args.controls, args.mode)
        frac = args.fraction if args.fraction is not None else cfg.recall_fraction
        value = ev.relationship_recall(labels, vecs, args.known_pairs, frac)
        reports = [ev.MetricReport("recall", value, {"n_real": len(labels), "seed": cfg.seed})]
    _report(args, cfg, reports)


def cmd_erk_ratio(args, cfg):
    from .morphology import erk_ratio, otsu_threshold
    from .volume import read_volume

    sig = read_volume(args.signal).data[0].astype(np.float64)
    if args.shift_unit:
        sig = (sig + 1.0) / 2.0
    nuc = read_volume(args.morphology).data[1]
    mask = nuc > otsu_threshold(nuc)
    value = erk_ratio(sig, mask, args.dilate if args.dilate is not None else cfg.dilate_iters)
    print(repr(value))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "erk_ratio.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["signal", "erk_ratio"])
            w.writerow([os.path.basename(args.signal), repr(value)])


# ---------------------------------------------------------------- parser


def build_parser():
    common = Parser(add_help=False)
    common.add_argument("--config", help="key = value run configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config value")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads; 1 gives bit-reproducible output")
    common.add_argument("-v", "--verbose", action="store_true")

    p = Parser(prog="morphgen", description="3D cell morphology generation and evaluation")
    sub = p.add_subparsers(dest="command", parser_class=Parser)
    sub.required = True

    def add(name, func, help_text, out_required=True):
        sp = sub.add_parser(name, parents=[common], help=help_text)
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.set_defaults(func=func)
        return sp

    sp = add("synth", cmd_synth, "generate synthetic cells")
    sp.add_argument("--archetype", required=True)
    sp.add_argument("--n", type=int)
    sp.add_argument("--signal", action="store_true", help="also write an ERK-style signal channel")

    sp = add("train-vqgan", cmd_train_vqgan, "train the stage-1 autoencoder")
    sp.add_argument("--data", nargs="+", required=True)
    sp.add_argument("--per-label", action="store_true", help="one checkpoint per perturbation label")
    sp.add_argument("--signal", action="store_true", help="train on the signal channel instead")
    sp.add_argument("--paper-literal-hinge", action="store_true")

    sp = add("train-ddpm", cmd_train_ddpm, "train a latent diffusion model on frozen stage-1 latents")
    sp.add_argument("--vqgan", required=True, help="stage-1 checkpoint prefix")
    sp.add_argument("--data", nargs="+", required=True)
    sp.add_argument("--label")
    sp.add_argument("--cond-vqgan", help="morphology checkpoint for signal conditioning")

    sp = add("generate", cmd_generate, "unconditional sampling")
    sp.add_argument("--vqgan", required=True)
    sp.add_argument("--ddpm", required=True)
    sp.add_argument("--n", type=int)

    for name, func in (("bridge", cmd_bridge), ("traverse", cmd_traverse)):
        sp = add(name, func, f"{name} between two diffusion models")
        sp.add_argument("--vqgan", required=True)
        sp.add_argument("--source-ddpm", required=True)
        sp.add_argument("--target-ddpm", required=True)
        sp.add_argument("--t-bridge", type=int)
        if name == "bridge":
            sp.add_argument("--data", nargs="+", required=True)
            sp.add_argument("--label")
        else:
            sp.add_argument("--input", required=True, help="source MVOL volume")
            sp.add_argument("--stride", type=int)

    sp = add("synth-signal", cmd_synth_signal, "generate signal channels from morphology")
    sp.add_argument("--vqgan", required=True, help="morphology checkpoint")
    sp.add_argument("--signal-vqgan", required=True)
    sp.add_argument("--ddpm", required=True)
    sp.add_argument("--data", nargs="+", required=True)
    sp.add_argument("--label")

    sp = add("mesh", cmd_mesh, "export an isosurface mesh")
    sp.add_argument("--input", required=True)
    sp.add_argument("--channel", default="cytoplasm")
    sp.add_argument("--threshold", type=float)

    sp = add("descriptors", cmd_descriptors, "shape descriptors for every volume")
    sp.add_argument("--data", nargs="+", required=True)

    sp = add("eval", cmd_eval, "evaluation metrics", out_required=False)
    sp.add_argument("metric", choices=["fid", "prf", "ci", "ks", "pearson", "recall"])
    sp.add_argument("--real")
    sp.add_argument("--gen")
    sp.add_argument("--k", type=int)
    sp.add_argument("--a")
    sp.add_argument("--b")
    sp.add_argument("--column")
    sp.add_argument("--channel")
    sp.add_argument("--negate", action="store_true")
    sp.add_argument("--embeddings")
    sp.add_argument("--known-pairs")
    sp.add_argument("--controls", default="control")
    sp.add_argument("--mode", choices=["center_scale", "tvn"], default="center_scale")
    sp.add_argument("--fraction", type=float)

    sp = add("erk-ratio", cmd_erk_ratio, "nuclear/ring signal ratio", out_required=False)
    sp.add_argument("--signal", required=True)
    sp.add_argument("--morphology", required=True, help="two-channel volume whose nucleus defines the mask")
    sp.add_argument("--dilate", type=int)
    sp.add_argument("--shift-unit", action="store_true", help="map signal from [-1, 1] to [0, 1] first")
    return p


def resolve_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    cfg.update(overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def dispatch(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    from threadpoolctl import threadpool_limits

    try:
        cfg = resolve_config(args)
        if getattr(args, "out", None):
            cfg.write(os.path.join(args.out, "resolved_config.txt"))
        with threadpool_limits(limits=max(1, args.threads)):
            args.func(args, cfg)
    except UsageError as exc:
        print(f"morphgen {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericAbort as exc:
        print(f"morphgen {args.command}: numeric abort at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MorphgenError, CheckpointError, ValueError, OSError, KeyError) as exc:
        print(f"morphgen {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
