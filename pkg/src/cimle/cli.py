"""Command-line interface: ``python -m cimle <subcommand>``.

Exit status: 0 success, 1 usage or config error, 2 data or format error,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import bench
from . import config as cfgmod
from . import formats, metrics, pipeline
from . import rng as rngmod
from .formats import FormatError
from .generators import generate
from .rarity import rarity_scores
from .tasks import KINDS, get_task, make_synth, one_hot
from .trainer import NumericalAbort, train, train_regression_baseline

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _load_cfg(args):
    raw = {}
    if args.config:
        with open(args.config) as f:
            raw = cfgmod.parse_text(f.read())
    for item in args.set or []:
        if "=" not in item:
            raise cfgmod.ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    return cfgmod.resolve(raw)


def _run_config_for(checkpoint, explicit):
    path = explicit or os.path.join(os.path.dirname(os.path.abspath(checkpoint)), "config.txt")
    return cfgmod.load(path)


def _write(path, text):
    with open(path, "w") as f:
        f.write(text)


# -- subcommands -----------------------------------------------------------------


def cmd_make_synth(args):
    task_kinds = list(KINDS) + ["toy-layout-imbalanced"]
    if args.task not in task_kinds:
        raise UsageError(f"unknown task {args.task!r}; choose from {', '.join(task_kinds)}")
    ds, task = make_synth(args.task, args.n, args.seed)
    os.makedirs(args.out, exist_ok=True)
    formats.save_dataset(args.out, ds)
    print(f"wrote {len(ds)} pairs of {task.kind} to {args.out} (sha256 {ds.digest()[:16]})")


def cmd_train(args):
    cfg = _load_cfg(args)
    dataset = formats.load_dataset(args.data) if args.data else None
    run = pipeline.prepare(cfg, dataset)
    tc = cfgmod.train_config(cfg)
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    _write(os.path.join(out, "config.txt"), cfgmod.dump(cfg, run.spec))

    def on_outer(k, gen, report):
        every = cfg["checkpoint_every"]
        if every and (k + 1) % every == 0:
            path = os.path.join(out, f"checkpoint_{k + 1:05d}.ciml")
            formats.save_checkpoint(path, gen)
            report.checkpoints.append(path)

    if args.baseline:
        gen = train_regression_baseline(run.gen, run.dataset, run.spec, tc)
        report = None
    else:
        gen, report = train(run.gen, run.dataset, run.spec, tc, table=run.table, on_outer=on_outer)
    ckpt = os.path.join(out, "checkpoint.ciml")
    formats.save_checkpoint(ckpt, gen)
    if report is not None:
        _write(os.path.join(out, "report.tsv"), "\n".join(report.lines()) + "\n")
        fr = report.fractions
        print(f"trained {tc.outer_steps} outer iterations; final mean matched distance "
              f"{report.outer_distance[-1] if report.outer_distance else float('nan'):.6g}")
        print(f"time split: sampling {fr['sampling']:.1%}, search features {fr['features']:.1%}, "
              f"matching {fr['matching']:.1%}, gradient {fr['gradient']:.1%}")
    print(f"checkpoint: {ckpt}")


def _conditions(args, run_cfg, gen):
    task = get_task(run_cfg["task"])
    if args.input:
        out = []
        for path in args.input:
            if path.endswith(".pgm"):
                lab = formats.load_label_map(path)
                out.append(one_hot(lab[None], gen.cond_shape[0])[0])
            elif path.endswith(".ppm"):
                out.append(formats.load_image(path))
            else:
                out.append(np.loadtxt(path, dtype=np.float32, ndmin=1))
        return np.stack(out).astype(np.float32)
    return pipeline.eval_inputs(task, args.n, args.seed)


def cmd_sample(args):
    run_cfg = _run_config_for(args.checkpoint, args.config)
    gen = formats.load_checkpoint(args.checkpoint)
    xs = _conditions(args, run_cfg, gen)
    if xs.shape[1:] != gen.cond_shape:
        raise FormatError(f"condition shape {xs.shape[1:]} does not match model input {gen.cond_shape}")
    os.makedirs(args.out, exist_ok=True)
    r = rngmod.substream(args.seed, rngmod.EVAL, 20)
    print("input\tsample\tcode_hash\toutput")
    for i, x in enumerate(xs):
        for s in range(args.samples):
            z = rngmod.fixed_latent(args.fixed_z, gen.latent_shape) if args.fixed_z is not None \
                else rngmod.sample_latent(r, gen.latent_shape)
            y = generate(gen, x, z)
            if y.ndim == 3:
                path = os.path.join(args.out, f"sample_{i:03d}_{s:02d}.ppm")
                formats.save_image(path, y)
            else:
                path = os.path.join(args.out, f"sample_{i:03d}_{s:02d}.txt")
                np.savetxt(path, y[None], fmt="%.9g")
            print(f"{i}\t{s}\t{rngmod.code_hash(z)}\t{path}")


def cmd_eval(args):
    run_cfg = _run_config_for(args.checkpoint, args.config)
    gen = formats.load_checkpoint(args.checkpoint)
    cfg = dict(run_cfg)
    cfg["rebalance"] = False
    run = pipeline.prepare(cfg)
    task, spec = run.task, run.spec
    if args.metric == "coverage":
        rep = metrics.mode_coverage(gen, task, args.eps, args.draws, args.inputs, args.seed)
    elif args.metric == "diversity":
        rep = metrics.pairwise_diversity(gen, pipeline.eval_inputs(task, args.inputs, args.seed), spec,
                                         args.pairs, args.seed)
    elif args.metric == "fwv":
        x, _ = task.sample_conditions(args.inputs, rngmod.substream(args.seed, rngmod.EVAL, 11))
        modes = task.modes(x)
        pick = rngmod.substream(args.seed, rngmod.EVAL, 12).choice(task.k, size=len(x), p=task.mode_probs)
        y = modes[np.arange(len(x)), pick]
        out = []
        for sigma in args.sigma or metrics.FWV_BANDWIDTHS:
            fcfg = metrics.FWVConfig(spec, sigma, args.draws if args.draws >= 2 else 2)
            r = metrics.fwv_for_sampler(gen, x, y, fcfg, args.seed)
            r.name = f"fwv[sigma={sigma}]"
            out.append(r)
        print("".join(r.tsv() for r in out), end="")
        return
    elif args.metric == "hue":
        x = pipeline.eval_inputs(task, args.inputs, args.seed)
        z = rngmod.sample_latent(rngmod.substream(args.seed, rngmod.EVAL, 13), (len(x), *gen.latent_shape))
        samples = gen.sample(x, z)
        if samples.ndim != 4:
            raise UsageError("hue histograms need an image task")
        gen_h = metrics.hue_histogram(samples, args.bins)
        data_h = metrics.hue_histogram(run.dataset.y, args.bins)
        print("bin_lo\tbin_hi\tdataset\tgenerated")
        for b in range(args.bins):
            print(f"{gen_h.edges[b]:g}\t{gen_h.edges[b + 1]:g}\t{data_h.density[b]!r}\t{gen_h.density[b]!r}")
        return
    elif args.metric == "interp":
        x = pipeline.eval_inputs(task, args.inputs, args.seed)
        r = rngmod.substream(args.seed, rngmod.EVAL, 14)
        vals = []
        for xi in x:
            za, zb = rngmod.sample_latent(r, (2, *gen.latent_shape))
            vals.append(metrics.smoothness_ratio(spec, metrics.interpolate(gen, xi, za, zb, args.steps)))
        rep = metrics.MetricReport("interp_smoothness_ratio", np.array(vals), {"steps": args.steps})
    else:
        if task.kind != "toy-layout":
            raise UsageError("frame consistency needs a toy-layout model")
        frames, _ = task.frame_sequence(args.steps, args.seed)
        fixed = metrics.frame_consistency(gen, frames, spec, seed=args.seed)
        fresh = metrics.frame_consistency(gen, frames, spec, fresh=True, seed=args.seed)
        print("frame\tfixed_z\tfresh_z")
        for t, (a, b) in enumerate(zip(fixed, fresh)):
            print(f"{t}\t{a!r}\t{b!r}")
        print(f"mean\t{float(np.mean(fixed))!r}\t{float(np.mean(fresh))!r}")
        return
    print(rep.tsv(), end="")


def cmd_interp(args):
    run_cfg = _run_config_for(args.checkpoint, args.config)
    gen = formats.load_checkpoint(args.checkpoint)
    run = pipeline.prepare(dict(run_cfg, rebalance=False))
    x = pipeline.eval_inputs(run.task, 1, args.seed)[0]
    za = rngmod.fixed_latent(args.z_a, gen.latent_shape)
    zb = rngmod.fixed_latent(args.z_b, gen.latent_shape)
    frames = metrics.interpolate(gen, x, za, zb, args.steps)
    os.makedirs(args.out, exist_ok=True)
    d = metrics.adjacent_distances(run.spec, frames)
    print("frame\toutput\tdistance_to_next")
    for t, f in enumerate(frames):
        if f.ndim == 3:
            path = os.path.join(args.out, f"frame_{t:03d}.ppm")
            formats.save_image(path, f)
        else:
            path = os.path.join(args.out, f"frame_{t:03d}.txt")
            np.savetxt(path, f[None], fmt="%.9g")
        print(f"{t}\t{path}\t{d[t] if t < len(d) else float('nan')!r}")


def cmd_rebalance_stats(args):
    ds = formats.load_dataset(args.data) if args.data else make_synth(args.task, args.n, args.seed)[0]
    if ds.labels is None:
        raise FormatError("rebalance-stats needs a dataset with label maps")
    n_cat = int(ds.labels.max()) + 1 if args.classes is None else args.classes
    table = rarity_scores(ds.labels, ds.y, n_cat)
    print("rank\tcategory\tarea")
    for rank, p in enumerate(table.area_ranking()):
        print(f"{rank}\t{p}\t{int(table.area[p])}")
    print()
    print("image\t" + "\t".join(f"rarity_{p}" for p in range(n_cat)))
    for k in range(table.n_images):
        print(f"{k}\t" + "\t".join(f"{table.rarity[p, k]!r}" for p in range(n_cat)))


def cmd_bench_index(args):
    rows = [bench.run(m, args.dim, args.queries, args.seed, args.kind) for m in args.m]
    print(bench.table(rows), end="")


# -- parser ----------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="cimle", description="Conditional IMLE on synthetic multimodal tasks.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("make-synth", help="write a synthetic dataset")
    s.add_argument("--task", required=True)
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_synth)

    def run_opts(s):
        s.add_argument("--config", help="run config file (key = value)")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    s = sub.add_parser("train", help="train a model from a run config")
    run_opts(s)
    s.add_argument("--data", help="dataset directory written by make-synth")
    s.add_argument("--baseline", action="store_true", help="train the zero-noise regression baseline instead")
    s.set_defaults(func=cmd_train)

    def model_opts(s):
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--config", help="run config (default: config.txt next to the checkpoint)")
        s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    model_opts(s)
    s.add_argument("--input", nargs="*", help="condition files (.pgm label map, .ppm image, or text vector)")
    s.add_argument("--n", type=int, default=4, help="fresh conditions when no --input is given")
    s.add_argument("--samples", type=int, default=1)
    s.add_argument("--fixed-z", type=int, default=None, metavar="SEED", help="reuse one latent code for every sample")
    s.add_argument("--out", default="samples")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval", help="score a checkpoint")
    model_opts(s)
    s.add_argument("--metric", required=True, choices=["fwv", "diversity", "hue", "coverage", "interp", "frames"])
    s.add_argument("--inputs", type=int, default=100)
    s.add_argument("--draws", type=int, default=100)
    s.add_argument("--pairs", type=int, default=40)
    s.add_argument("--eps", type=float, default=None)
    s.add_argument("--sigma", type=float, action="append")
    s.add_argument("--bins", type=int, default=36)
    s.add_argument("--steps", type=int, default=8)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("interp", help="interpolate between two latent codes")
    model_opts(s)
    s.add_argument("--z-a", type=int, default=1, metavar="SEED")
    s.add_argument("--z-b", type=int, default=2, metavar="SEED")
    s.add_argument("--steps", type=int, default=8)
    s.add_argument("--out", default="interp")
    s.set_defaults(func=cmd_interp)

    s = sub.add_parser("rebalance-stats", help="category areas and per-image rarity scores")
    s.add_argument("--task", default="toy-layout")
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--data")
    s.add_argument("--classes", type=int, default=None)
    s.set_defaults(func=cmd_rebalance_stats)

    s = sub.add_parser("bench-index", help="projection index vs exhaustive search")
    s.add_argument("--m", type=int, nargs="+", default=[10_000])
    s.add_argument("--dim", type=int, default=512)
    s.add_argument("--queries", type=int, default=1000)
    s.add_argument("--kind", choices=["manifold", "iid"], default="manifold")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bench_index)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except (UsageError, cfgmod.ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
