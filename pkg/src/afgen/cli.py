"""Command-line interface: ``afgen <command> [options]``.

Every command takes ``--config`` (TOML), ``--seed`` and ``--out-dir`` and
writes ``manifest.json`` next to its outputs. Settings resolve as
command-line flag, then the command's table in the config file, then the
built-in default; the effective values are recorded in the manifest.
"""

import argparse
import csv
import io as _io
import json
import logging
import math
import os
import sys
from dataclasses import asdict, fields

import numpy as np

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from . import experiments, geometry
from . import io as afio
from .errors import DomainError, GuardError, IntegrationError, NonFiniteError
from .flow_match import FlowMatchConfig, train
from .integrate import IntegratorConfig, sample_arrays
from .likelihood import LikelihoodConfig, kl_surrogate
from .meta_simplex import DenseJoint, embed_T, entropy, format_vector, kl, marginalize, proj_to_T
from .payoff import Architecture, PayoffModel, load_checkpoint, save_checkpoint

log = logging.getLogger("afgen")

TRAIN_DEFAULTS = {
    **{f.name: f.default for f in fields(FlowMatchConfig) if f.name != "seed"},
    "hidden": 64, "context": True, "node_bias": False,
}
INTEGRATE_DEFAULTS = {k: v for k, v in asdict(IntegratorConfig()).items()
                      if k in ("t_max", "rtol", "atol", "h_init", "max_steps", "early_exit")}
SAMPLE_DEFAULTS = {"count": 1000, "variant": "categorical", "chunk_size": 16384, "states": False,
                   "rtol": 1e-5, **{k: v for k, v in INTEGRATE_DEFAULTS.items() if k != "rtol"}}
LIKELIHOOD_DEFAULTS = {
    **{f.name: f.default for f in fields(LikelihoodConfig) if f.name != "lambda_rate"},
    **{k: v for k, v in INTEGRATE_DEFAULTS.items() if k != "early_exit"},
}
EVAL_DEFAULTS = {"count": 524288, "chunk_size": 16384, "rtol": 1e-5,
                 **{k: v for k, v in INTEGRATE_DEFAULTS.items() if k != "rtol"}}
CLASS_SCALING_DEFAULTS = {k: v for k, v in asdict(experiments.ClassScalingConfig()).items() if k != "seed"}


class CLIError(Exception):
    pass


# --- configuration -------------------------------------------------------

def load_config_file(path):
    if path is None:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def resolve(args, section, defaults):
    """Flag > ``[section]`` of the config file > default."""
    table = args.file_config.get(section, {})
    if not isinstance(table, dict):
        raise CLIError(f"config: [{section}] must be a table")
    unknown = sorted(set(table) - set(defaults))
    if unknown:
        raise CLIError(f"config: unknown keys in [{section}]: {', '.join(unknown)}")
    out = dict(defaults)
    out.update(table)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    return out


def resolve_seed(args):
    if args.seed is not None:
        return args.seed
    return int(args.file_config.get("seed", 0))


def integrator_config(cfg, early_exit=None):
    return IntegratorConfig(t_max=cfg["t_max"], rtol=cfg["rtol"], atol=cfg["atol"], h_init=cfg["h_init"],
                            max_steps=cfg["max_steps"],
                            early_exit=cfg.get("early_exit", True) if early_exit is None else early_exit)


def out_path(args, name):
    return os.path.join(args.out_dir, name)


def new_manifest(args, config, seed):
    os.makedirs(args.out_dir, exist_ok=True)
    return afio.RunManifest(command=args.command, config=config, seeds={"seed": seed})


def finish(args, manifest):
    manifest.finish(out_path(args, "manifest.json"))


def load_model(path):
    if not os.path.exists(path):
        raise CLIError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _bool(text):
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _int_list(text):
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _count_map(text):
    """``"4:131072,16:65536"`` -> ``{4: 131072, 16: 65536}``."""
    out = {}
    try:
        for item in text.split(","):
            if item.strip():
                c, m = item.split(":")
                out[int(c)] = int(m)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected c:count pairs, got {text!r}") from None
    return out


def write_csv(path, header, rows):
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    afio.atomic_write_text(path, buf.getvalue())


def fmt(x):
    return format(x, ".17g") if isinstance(x, float) else x


# --- commands ------------------------------------------------------------

def cmd_train(args):
    cfg = resolve(args, "train", TRAIN_DEFAULTS)
    seed = resolve_seed(args)
    data = afio.load_dataset(args.data)
    flow_cfg = FlowMatchConfig(seed=seed, **{k: cfg[k] for k in TRAIN_DEFAULTS
                                             if k not in ("hidden", "context", "node_bias")})
    manifest = new_manifest(args, {**cfg, "data": args.data, "resume": args.resume}, seed)
    optimizer, start = None, 0
    if args.resume:
        model, optimizer, meta = load_model(args.resume)
        if (meta.get("n"), meta.get("c")) != (data.n, data.c):
            raise CLIError(f"checkpoint is for (n, c) = ({meta.get('n')}, {meta.get('c')}), "
                           f"data has ({data.n}, {data.c})")
        start = int(meta.get("step", 0))
    else:
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
        arch = Architecture(c=data.c, hidden=cfg["hidden"], context=cfg["context"],
                            nodes=data.n if cfg["node_bias"] else 0)
        model = PayoffModel.init(arch, rng)
    log.info("training %d parameters on %d records from step %d", model.theta.size, len(data), start)
    result = train(flow_cfg, data.records, model, c=data.c, optimizer=optimizer, start_step=start,
                   callback=lambda step, loss: log.info("step %d loss %.6g", step, loss))
    meta = {"n": data.n, "c": data.c, "step": flow_cfg.steps, "seed": seed,
            "lambda_rate": flow_cfg.lambda_rate}
    ckpt = out_path(args, "checkpoint.afgp")
    save_checkpoint(ckpt, result.model, result.optimizer, meta)
    loss_csv = out_path(args, "loss.csv")
    write_csv(loss_csv, ["step", "wall_ms", "loss"],
              [[s, f"{w:.3f}", fmt(float(l))] for s, w, l in result.trace])
    manifest.outputs = {"checkpoint": ckpt, "loss": loss_csv}
    finish(args, manifest)
    if result.trace:
        print(f"final loss {result.trace[-1][2]:.6g} after step {result.trace[-1][0]}")
    print(f"checkpoint written to {ckpt}")
    return 0


def draw_model_samples(model, meta, cfg, seed, count):
    n = int(meta["n"])
    rng = experiments.sampling_rng(seed)
    return sample_arrays(model, integrator_config(cfg), rng, count, n,
                         variant=cfg.get("variant", "categorical"), chunk_size=cfg["chunk_size"])


def cmd_sample(args):
    cfg = resolve(args, "sample", SAMPLE_DEFAULTS)
    seed = resolve_seed(args)
    if cfg["count"] < 0:
        raise CLIError("count must be >= 0")
    if cfg["variant"] not in ("categorical", "rounding"):
        raise CLIError(f"unknown variant {cfg['variant']!r}")
    model, _, meta = load_model(args.checkpoint)
    manifest = new_manifest(args, {**cfg, "checkpoint": args.checkpoint}, seed)
    labels, states = draw_model_samples(model, meta, cfg, seed, cfg["count"])
    path = out_path(args, "samples.txt")
    afio.atomic_write_text(path, afio.format_labels(labels, int(meta["n"]), model.arch.c))
    manifest.outputs = {"samples": path}
    if cfg["states"]:
        spath = out_path(args, "states.afgx")
        afio.atomic_write_bytes(spath, afio.states_to_bytes(states))
        manifest.outputs["states"] = spath
    finish(args, manifest)
    print(f"{cfg['count']} samples ({cfg['variant']}) written to {path}")
    return 0


def cmd_eval_kl(args):
    cfg = resolve(args, "eval_kl", EVAL_DEFAULTS)
    seed = resolve_seed(args)
    if (args.samples is None) == (args.checkpoint is None):
        raise CLIError("give exactly one of --samples or --checkpoint")
    target = DenseJoint.load(args.target)
    manifest = new_manifest(args, {**cfg, "target": args.target, "samples": args.samples,
                                   "checkpoint": args.checkpoint}, seed)
    if args.samples:
        n, c, labels = afio.load_samples(args.samples)
    else:
        model, _, meta = load_model(args.checkpoint)
        n, c = int(meta["n"]), model.arch.c
        if (n, c) == (target.n, target.c):
            labels, _ = draw_model_samples(model, meta, cfg, seed, cfg["count"])
    if (n, c) != (target.n, target.c):
        raise CLIError(f"samples are for (n, c) = ({n}, {c}), target is ({target.n}, {target.c})")
    M = labels.shape[0]
    value = experiments.sample_kl(labels, target)
    report = {"kl_nats": value, "num_samples": M, "num_states": target.N,
              "noise_floor": experiments.noise_floor(target.N, M), "direction": "KL(histogram || target)"}
    path = out_path(args, "report.json")
    afio.atomic_write_text(path, json.dumps(report, indent=2, sort_keys=True) + "\n")
    manifest.outputs = {"report": path}
    finish(args, manifest)
    print(f"KL(histogram || target) = {value:.6g} nats over {M} samples "
          f"(expected noise floor {report['noise_floor']:.3g})")
    return 0


def cmd_class_scaling(args):
    cfg = resolve(args, "class_scaling", CLASS_SCALING_DEFAULTS)
    seed = resolve_seed(args)
    cfg["num_samples"] = {int(k): int(v) for k, v in cfg["num_samples"].items()}
    run_cfg = experiments.ClassScalingConfig(seed=seed, **cfg)
    manifest = new_manifest(args, cfg, seed)
    path = out_path(args, "results.csv")
    rows = []

    def on_row(row):
        rows.append(row)
        write_csv(path, experiments.RESULT_COLUMNS,
                  [[fmt(r.get(k, "")) for k in experiments.RESULT_COLUMNS] for r in rows])
        if row["status"] == "ok":
            print(f"c={row['c']}: KL {row['kl_nats']:.4g} nats ({row['kl_method']}), "
                  f"exact-sample {row['exact_sample_kl']:.4g}, uniform-sample {row['uniform_sample_kl']:.4g}")
        else:
            print(f"c={row['c']}: failed: {row['error']}")

    experiments.run_class_scaling(run_cfg, on_row)
    manifest.outputs = {"results": path}
    finish(args, manifest)
    return 0 if all(r["status"] == "ok" for r in rows) else 1


def cmd_likelihood(args):
    cfg = resolve(args, "likelihood", LIKELIHOOD_DEFAULTS)
    seed = resolve_seed(args)
    model, _, meta = load_model(args.checkpoint)
    data = afio.load_dataset(args.data)
    if (data.n, data.c) != (int(meta["n"]), model.arch.c):
        raise CLIError(f"test data is for (n, c) = ({data.n}, {data.c}), "
                       f"checkpoint is ({meta['n']}, {model.arch.c})")
    lcfg = LikelihoodConfig(lambda_rate=float(meta.get("lambda_rate", 1.0)),
                            **{k: cfg[k] for k in LIKELIHOOD_DEFAULTS if k not in INTEGRATE_DEFAULTS})
    integ = integrator_config(cfg, early_exit=False)
    manifest = new_manifest(args, {**cfg, "lambda_rate": lcfg.lambda_rate, "checkpoint": args.checkpoint,
                                   "data": args.data}, seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
    summary = kl_surrogate(model, data.records, lcfg, rng, integ)
    results = summary["results"]
    path = out_path(args, "likelihood.csv")
    write_csv(path, ["index", "log_prob_nats", "std_error", "ess", "flags"],
              [[i, fmt(r.log_prob), fmt(r.std_error), fmt(r.ess), ";".join(r.flags)]
               for i, r in enumerate(results)])
    logs = np.array([r.log_prob for r in results])
    finite = logs[np.isfinite(logs)]
    spread = float(finite.std(ddof=1) / math.sqrt(finite.size)) if finite.size > 1 else float("nan")
    report = {"nats": summary["nats"], "bits_per_dim": summary["bits_per_dim"], "failed": summary["failed"],
              "num_data": len(results), "dataset_se_nats": spread,
              "mean_per_datum_se": float(np.mean([r.std_error for r in results])),
              "sum_prob": float(np.exp(logs).sum())}
    rpath = out_path(args, "likelihood_summary.json")
    afio.atomic_write_text(rpath, json.dumps(report, indent=2, sort_keys=True) + "\n")
    manifest.outputs = {"per_datum": path, "summary": rpath}
    finish(args, manifest)
    print(f"nll {report['nats']:.6g} nats, {report['bits_per_dim']:.6g} bits/dim "
          f"(dataset SE {spread:.3g} nats, {report['failed']} failed)")
    return 0


def _read_assignment(path):
    w = np.loadtxt(path, ndmin=2)
    return geometry.as_simplex(w)


def cmd_oracle(args):
    seed = resolve_seed(args)
    manifest = new_manifest(args, {k: v for k, v in vars(args).items()
                                   if k not in ("func", "file_config")}, seed)
    outputs = {}
    op = args.op
    if op == "embed":
        if args.assignment:
            w = _read_assignment(args.assignment)
        elif args.n and args.c:
            w = geometry.barycenter(args.n, args.c)
        else:
            raise CLIError("embed needs --assignment or --n and --c")
        joint = embed_T(w)
        sys.stdout.write(format_vector(joint.probs))
    elif op == "marginalize":
        sys.stdout.write(format_vector(marginalize(DenseJoint.load(args.joint))))
    elif op == "entropy":
        print(format(entropy(DenseJoint.load(args.joint)), ".17g"))
    elif op == "kl":
        print(format(kl(DenseJoint.load(args.p), DenseJoint.load(args.q)), ".17g"))
    elif op == "projT":
        w = proj_to_T(DenseJoint.load(args.joint))
        joint = embed_T(w)
        sys.stdout.write(format_vector(w))
    elif op == "target":
        if args.kind == "toy":
            joint = experiments.toy_target()
        else:
            if not (args.n and args.c):
                raise CLIError("a dirichlet target needs --n and --c")
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
            joint = experiments.random_factorizing_target(args.n, args.c, rng).dense()
    elif op == "draw":
        joint = DenseJoint.load(args.joint)
        labels = experiments.sample_joint(joint, args.count, experiments.sampling_rng(seed))
        path = out_path(args, "samples.txt")
        afio.atomic_write_text(path, afio.format_labels(labels, joint.n, joint.c))
        outputs["samples"] = path
        print(f"{args.count} exact draws written to {path}")
    if op in ("embed", "projT", "target") and getattr(args, "out", None):
        joint.save(args.out)
        outputs["joint"] = args.out
    elif op == "target":
        raise CLIError("target needs --out")
    manifest.outputs = outputs
    finish(args, manifest)
    return 0


# --- parser --------------------------------------------------------------

def _common(parser):
    parser.add_argument("--config", help="TOML file with per-command tables")
    parser.add_argument("--seed", type=int, help="master seed (default 0)")
    parser.add_argument("--out-dir", default=".", help="directory for outputs and manifest.json")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _integrate_flags(p):
    p.add_argument("--t-max", dest="t_max", type=float)
    p.add_argument("--rtol", type=float)
    p.add_argument("--atol", type=float)
    p.add_argument("--h-init", dest="h_init", type=float)
    p.add_argument("--max-steps", dest="max_steps", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="afgen", description="Generative assignment flows for discrete joints.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a payoff model by flow matching")
    _common(p)
    p.add_argument("data", help="dataset file ('# n=<n> c=<c>' header, one configuration per line)")
    p.add_argument("--resume", help="continue from a checkpoint (same seed and data)")
    p.add_argument("--steps", type=int, help="total optimiser steps")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-schedule", dest="lr_schedule", choices=["constant", "cosine"])
    p.add_argument("--lambda-rate", dest="lambda_rate", type=float)
    p.add_argument("--time-rate", dest="time_dist_rate", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--context", type=_bool)
    p.add_argument("--node-bias", dest="node_bias", type=_bool)
    p.add_argument("--log-every", dest="log_every", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw configurations from a trained model")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--variant", choices=["categorical", "rounding"])
    p.add_argument("--chunk-size", dest="chunk_size", type=int)
    p.add_argument("--states", type=_bool, help="also write final chart states (AFGX)")
    p.add_argument("--early-exit", dest="early_exit", type=_bool)
    _integrate_flags(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval-kl", help="KL of a sample histogram to a dense target")
    _common(p)
    p.add_argument("--target", required=True, help="AFGJ dense joint")
    p.add_argument("--samples", help="samples file")
    p.add_argument("--checkpoint", help="draw --count samples from this model instead")
    p.add_argument("--count", type=int)
    p.add_argument("--chunk-size", dest="chunk_size", type=int)
    p.add_argument("--early-exit", dest="early_exit", type=_bool)
    _integrate_flags(p)
    p.set_defaults(func=cmd_eval_kl)

    p = sub.add_parser("class-scaling", help="KL versus number of classes on random factorizing targets")
    _common(p)
    p.add_argument("--classes", type=_int_list, help="e.g. 4,16,64")
    p.add_argument("--n", type=int)
    p.add_argument("--num-train", dest="num_train", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--num-samples", dest="num_samples", type=_count_map, help="per-c counts, e.g. 4:131072")
    p.add_argument("--default-samples", dest="default_samples", type=int)
    p.add_argument("--t-max", dest="t_max", type=float)
    p.add_argument("--rtol", type=float)
    p.set_defaults(func=cmd_class_scaling)

    p = sub.add_parser("likelihood", help="importance-sampled log-likelihood of test data")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("data", help="test dataset file")
    p.add_argument("--num-proposal-samples", dest="num_proposal_samples", type=int)
    p.add_argument("--num-hutchinson", dest="num_hutchinson", type=int)
    p.add_argument("--hutchinson-dist", dest="hutchinson_dist", choices=["rademacher", "gaussian", "exact"])
    p.add_argument("--proposal-sigma", dest="proposal_sigma", type=float)
    p.add_argument("--proposal-center-time", dest="proposal_center_time", type=float)
    p.add_argument("--model-variant", dest="model_variant", choices=["factorizing", "rounding"])
    _integrate_flags(p)
    p.set_defaults(func=cmd_likelihood)

    p = sub.add_parser("oracle", help="exact dense operators on small state spaces")
    osub = p.add_subparsers(dest="op", required=True)
    q = osub.add_parser("embed", help="print T(W) for an assignment (text n x c) or the barycenter")
    _common(q)
    q.add_argument("--assignment")
    q.add_argument("--n", type=int)
    q.add_argument("--c", type=int)
    q.add_argument("--out", help="also save the joint (AFGJ)")
    q = osub.add_parser("marginalize", help="print node marginals of a joint")
    _common(q)
    q.add_argument("joint")
    q = osub.add_parser("entropy", help="print the entropy (nats) of a joint")
    _common(q)
    q.add_argument("joint")
    q = osub.add_parser("kl", help="print KL(p || q) in nats")
    _common(q)
    q.add_argument("p")
    q.add_argument("q")
    q = osub.add_parser("projT", help="print the marginals of the factorizing projection")
    _common(q)
    q.add_argument("joint")
    q.add_argument("--out", help="also save the projected joint (AFGJ)")
    q = osub.add_parser("target", help="write a reference joint")
    _common(q)
    q.add_argument("--kind", choices=["toy", "dirichlet"], default="toy")
    q.add_argument("--n", type=int)
    q.add_argument("--c", type=int)
    q.add_argument("--out")
    q = osub.add_parser("draw", help="exact samples from a dense joint")
    _common(q)
    q.add_argument("joint")
    q.add_argument("--count", type=int, default=1000)
    for q in osub.choices.values():
        q.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        args.file_config = load_config_file(args.config)
        return args.func(args)
    except (CLIError, DomainError, GuardError, IntegrationError, NonFiniteError, OSError,
            tomllib.TOMLDecodeError) as exc:
        print(f"afgen: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
