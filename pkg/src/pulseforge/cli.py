"""``pulseforge`` command line.

Every subcommand writes its artifacts plus one ``manifest.json`` into
``--out``. All randomness derives from the global ``--seed`` through named
sub-streams, so a command re-run with the same inputs reproduces its
numeric artifacts byte for byte.

Exit status: 0 on success, 1 on a validation or runtime error, 2 on a
usage error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import math
import sys
import time
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from ._parallel import default_threads

MANIFEST = "manifest.json"


class CliError(Exception):
    pass


# seeds, digests, manifests ---------------------------------------------------


def substream(seed: int, name: str) -> int:
    """A 32-bit seed for the named stream of ``seed``."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_manifest(out: Path, args, inputs, outputs, started: float) -> Path:
    config = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("func",)}
    manifest = {
        "command": args.command,
        "config": config,
        "seed": args.seed,
        "inputs": {str(p): sha256(p) for p in inputs if Path(p).is_file()},
        "outputs": {Path(p).name: sha256(p) for p in outputs},
        "version": __version__,
        "wall_clock_s": round(time.time() - started, 3),
    }
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def verify_manifest(directory) -> list[str]:
    """Names of outputs whose digest no longer matches the file on disk."""
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    bad = []
    for name, digest in manifest["outputs"].items():
        p = directory / name
        if not p.is_file() or sha256(p) != digest:
            bad.append(name)
    return bad


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _transmon(args, attr="config"):
    from .qusim import TransmonConfig

    path = getattr(args, attr, None)
    if path is None:
        return TransmonConfig()
    return TransmonConfig.from_text(Path(path).read_text())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _lengths(text: str) -> tuple[int, ...]:
    """``start:stop:step`` (a Python range) or a comma list."""
    if ":" in text:
        parts = [int(x) for x in text.split(":")]
        return tuple(range(*parts))
    return _ints(text)


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _load_dataset(path):
    from .datasetpipe import AngleDataset

    return AngleDataset.load(path)


# subcommands -------------------------------------------------------------------


def cmd_gen_data(args):
    from .pulseoptim import generate_raw_dataset

    out = _out_dir(args)
    cfg = _transmon(args)
    raw = out / "raw.csv"
    if raw.exists() and not args.resume:
        raw.unlink()
    recs = generate_raw_dataset(
        args.n_angles, args.n_seeds, cfg, base_seed=substream(args.seed, "gen-data"), path=raw,
        threads=args.threads, job_defaults={"target_infidelity": args.target, "max_iters": args.max_iters},
    )
    fid = np.array([r.fidelity for r in recs])
    summary = _write_json(out / "summary.json", {
        "records": len(recs), "mean_fidelity": float(fid.mean()), "min_fidelity": float(fid.min()),
        "converged": int(sum(r.converged for r in recs)),
    })
    return [args.config] if args.config else [], [raw, summary]


def cmd_pipeline(args):
    from .datasetpipe import average_over_seeds, reduce_coefficients, smooth, split
    from .pulseoptim import read_raw_dataset

    out = _out_dir(args)
    ds = average_over_seeds(read_raw_dataset(args.raw))
    if args.window > 0:
        ds = smooth(ds, args.window)
    if args.n_out < ds.n_out:
        ds, _ = reduce_coefficients(ds, args.threshold, args.n_out)
    ds = split(ds, _floats(args.fractions), seed=substream(args.seed, "split"))
    ds.save(out)
    outputs = [out / "dataset.csv"]
    if ds.reduction_map is not None:
        outputs.append(out / "dataset_map.json")
    return [args.raw], outputs


def cmd_train_mse(args):
    from .gatenet import init_model, train_mse

    out = _out_dir(args)
    ds = _load_dataset(args.dataset)
    sizes = _ints(args.sizes)
    if sizes[-1] != ds.n_out:
        raise CliError(f"network output width {sizes[-1]} does not match the dataset's {ds.n_out} columns")
    model = init_model(sizes, seed=substream(args.seed, "init"), alpha_neg=args.alpha_neg)
    model, curve = train_mse(model, ds, epochs=args.epochs, lr=args.lr, optimizer=args.optimizer)
    model.save(out / "model.json")
    curve.to_csv(out / "loss_curve.csv")
    return [Path(args.dataset) / "dataset.csv"], [out / "model.json", out / "loss_curve.csv"]


def cmd_train_infid(args):
    from .gatenet import MlpModel, train_infidelity

    out = _out_dir(args)
    ds = _load_dataset(args.dataset)
    cfg = _transmon(args)
    run = train_infidelity(
        MlpModel.load(args.model), ds, args.epochs, cfg, lr=args.lr, epsilon=args.epsilon,
        batch_size=args.batch_size, momentum=args.momentum, seed=substream(args.seed, "train-infid"),
        threads=args.threads,
    )
    run.model.save(out / "model.json")
    run.curve.to_csv(out / "loss_curve.csv")
    return [args.model, Path(args.dataset) / "dataset.csv"], [out / "model.json", out / "loss_curve.csv"]


def _evaluate(model, ds, cfg, splits, threads):
    from .gatenet import mean_model_infidelity

    result = {}
    for tag in splits:
        sub = ds.subset(tag) if ds.split_tags is not None else ds
        if sub.n_angles:
            result[tag] = 1.0 - mean_model_infidelity(model, sub.angles, cfg, ds.reduction_map, threads)
    return result


def cmd_quantize(args):
    from .gatenet import FixedPointFormat, MlpModel, quantize_model

    out = _out_dir(args)
    model = MlpModel.load(args.model)
    fmt = FixedPointFormat(args.bits, args.int_bits, model.alpha_neg, args.qnoise)
    ds = _load_dataset(args.dataset) if args.dataset else None
    q = quantize_model(model, fmt, ds, qat_epochs=args.qat_epochs, lr=args.lr)
    q.save(out / "model.json")
    outputs = [out / "model.json"]
    inputs = [args.model]
    metrics = {"saturated": int(q.saturated), "total_bits": fmt.total_bits, "integer_bits": fmt.integer_bits}
    if ds is not None:
        cfg = _transmon(args)
        metrics["float_fidelity"] = _evaluate(model, ds, cfg, ["val"], args.threads)["val"]
        metrics["quantized_fidelity"] = _evaluate(q, ds, cfg, ["val"], args.threads)["val"]
        metrics["degradation"] = metrics["float_fidelity"] - metrics["quantized_fidelity"]
        inputs.append(Path(args.dataset) / "dataset.csv")
    outputs.append(_write_json(out / "quantize.json", metrics))
    return inputs, outputs


def cmd_arb(args):
    from .arb import ArbConfig, arb_estimate, gaussian_perturbed_provider, model_provider

    out = _out_dir(args)
    cfg = ArbConfig(
        lengths=_lengths(args.lengths), sequences_per_length=args.k, shots_per_sequence=args.n,
        alpha_level=args.alpha, base_seed=substream(args.seed, "arb"), se_convention=args.se_convention,
    )
    inputs = []
    if args.provider == "gaussian":
        provider = gaussian_perturbed_provider(
            args.n_gates, args.sigma, seed=substream(args.seed, "provider"), noise=args.noise,
            inverse="noisy" if args.noisy_inverse else "exact",
        )
    else:
        from .gatenet import MlpModel

        if not args.model or not args.dataset:
            raise CliError("--provider model needs --model and --dataset")
        model = MlpModel.load(args.model)
        rmap = _load_dataset(args.dataset).reduction_map
        gates = np.linspace(-math.pi, math.pi, args.n_gates)
        provider = model_provider(model, rmap, _transmon(args), gates, threads=args.threads)
        inputs = [args.model, Path(args.dataset) / "dataset.csv"] + ([args.config] if args.config else [])
    result = arb_estimate(provider, cfg, threads=args.threads)
    paths = result.write(out)
    return inputs, list(paths.values())


def cmd_finetune(args):
    from .gatenet import MlpModel
    from .spsatune import REDUCED_ARB, FinetuneJob, SpsaParams, finetune, loss_variance

    out = _out_dir(args)
    model = MlpModel.load(args.model)
    rmap = _load_dataset(args.dataset).reduction_map if args.dataset else None
    if args.physics:
        from .qusim import TransmonConfig

        physics = TransmonConfig.from_file(args.physics)
    else:
        physics = _transmon(args).replace(guard_levels=1, anharmonicity=2000.0)
    job = FinetuneJob(
        model, physics, rmap, train_mode="fixed" if args.angles == "fixed" else "resample",
        n_train=args.n_angles, batches=args.batches, n_val=args.n_val,
        loss="arb" if args.arb_loss else "infidelity", seed=substream(args.seed, "finetune"),
        arb_config=REDUCED_ARB, threads=args.threads,
    )
    params = SpsaParams(args.epsilon, args.alpha, args.epochs, args.mode, args.patience)
    res = finetune(job, params)
    res.model.save(out / "model.json")
    res.curve.to_csv(out / "loss_curve.csv")
    stats = {
        "initial_val": res.initial_val, "best_val": res.best_val, "evaluations": res.evaluations,
        "skipped_batches": res.skipped_batches, "stopped_early": res.stopped_early,
        "physics": asdict(physics),
    }
    if len(res.curve.train) > 3:
        stats["train_diff_variance"] = loss_variance(res.curve)
    inputs = [args.model] + ([args.physics] if args.physics else [])
    return inputs, [out / "model.json", out / "loss_curve.csv", _write_json(out / "finetune.json", stats)]


def cmd_eval(args):
    from .gatenet import MlpModel

    out = _out_dir(args)
    model = MlpModel.load(args.model)
    ds = _load_dataset(args.dataset)
    cfg = _transmon(args)
    fid = _evaluate(model, ds, cfg, args.splits.split(","), args.threads)
    metrics = {"fidelity": fid, "infidelity": {k: 1.0 - v for k, v in fid.items()}, "n_params": model.n_params}
    return [args.model, Path(args.dataset) / "dataset.csv"], [_write_json(out / "eval.json", metrics)]


REPORT_FIELDS = ["directory", "command", "seed", "version", "wall_clock_s", "outputs"]


def cmd_report(args):
    root = Path(getattr(args, "from"))
    if not root.is_dir():
        raise CliError(f"{root} is not a directory")
    out = Path(args.out) if args.out else root / "report"
    rows = []
    for path in sorted(root.rglob(MANIFEST)):
        if path.parent == out:
            continue
        m = json.loads(path.read_text())
        rows.append({
            "directory": str(path.parent.relative_to(root)),
            "command": m["command"],
            "seed": m["seed"],
            "version": m["version"],
            "wall_clock_s": m["wall_clock_s"],
            "outputs": ";".join(sorted(m["outputs"])),
        })
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    md = ["| " + " | ".join(REPORT_FIELDS) + " |", "|" + "---|" * len(REPORT_FIELDS)]
    md += ["| " + " | ".join(str(r[k]) for k in REPORT_FIELDS) + " |" for r in rows]
    (out / "report.md").write_text("\n".join(md) + "\n")
    args.out = str(out)
    return [], [out / "report.csv", out / "report.md"]


# parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pulseforge", description="Pulse learning and ARB benchmarking pipeline.")
    p.add_argument("--seed", type=int, default=0, help="root seed for every random stream")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: $PULSEFORGE_THREADS or 1)")
    p.add_argument("--config", default=None, help="key-value config file; [transmon] and per-command sections")
    p.add_argument("--dump-config", action="store_true", help="print every default and exit")
    sub = p.add_subparsers(dest="command", metavar="command")

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(func=func)
        sp.add_argument("--out", default=name, help="artifact directory")
        return sp

    g = add("gen-data", cmd_gen_data, "optimize pulses over an angle grid")
    g.add_argument("--n-angles", type=int, default=64)
    g.add_argument("--n-seeds", type=int, default=5)
    g.add_argument("--target", type=float, default=1e-4, help="target infidelity per pulse")
    g.add_argument("--max-iters", type=int, default=200)
    g.add_argument("--resume", action="store_true", help="continue an existing raw.csv")

    g = add("pipeline", cmd_pipeline, "average, smooth, reduce and split a raw dataset")
    g.add_argument("--raw", required=True)
    g.add_argument("--window", type=int, default=50)
    g.add_argument("--threshold", type=float, default=0.05)
    g.add_argument("--n-out", type=int, default=5)
    g.add_argument("--fractions", default="0.8,0.1,0.1")

    g = add("train-mse", cmd_train_mse, "bootstrap an MLP against dataset coefficients")
    g.add_argument("--dataset", required=True)
    g.add_argument("--sizes", default="1,4,5")
    g.add_argument("--epochs", type=int, default=10000)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    g.add_argument("--alpha-neg", type=float, default=1.0)

    g = add("train-infid", cmd_train_infid, "simulator-in-the-loop fine-tuning")
    g.add_argument("--dataset", required=True)
    g.add_argument("--model", required=True)
    g.add_argument("--epochs", type=int, default=20)
    g.add_argument("--lr", type=float, default=0.1)
    g.add_argument("--epsilon", type=float, default=1e-6)
    g.add_argument("--batch-size", type=int, default=16)
    g.add_argument("--momentum", type=float, default=0.0)

    g = add("quantize", cmd_quantize, "fixed-point quantization of a model")
    g.add_argument("--model", required=True)
    g.add_argument("--dataset", default=None, help="enables QAT and the fidelity comparison")
    g.add_argument("--bits", type=int, default=16)
    g.add_argument("--int-bits", type=int, default=5)
    g.add_argument("--qnoise", type=float, default=1.0)
    g.add_argument("--qat-epochs", type=int, default=0)
    g.add_argument("--lr", type=float, default=1e-4)

    g = add("arb", cmd_arb, "adapted randomized benchmarking")
    g.add_argument("--provider", choices=["gaussian", "model"], default="gaussian")
    g.add_argument("--sigma", type=float, default=0.1)
    g.add_argument("--n-gates", type=int, default=1000)
    g.add_argument("--noise", choices=["fresh", "frozen"], default="fresh")
    g.add_argument("--noisy-inverse", action="store_true")
    g.add_argument("--k", type=int, default=500, help="sequences per length")
    g.add_argument("--n", type=int, default=1000, help="shots per sequence")
    g.add_argument("--lengths", default="2:150:10", help="start:stop:step or comma list")
    g.add_argument("--alpha", type=float, default=0.05, help="two-sided CI level")
    g.add_argument("--se-convention", choices=["standard", "literal"], default="standard")
    g.add_argument("--model", default=None)
    g.add_argument("--dataset", default=None, help="dataset directory holding the reduction map")

    g = add("finetune", cmd_finetune, "SPSA fine-tuning towards new physics")
    g.add_argument("--model", required=True)
    g.add_argument("--dataset", default=None, help="dataset directory holding the reduction map")
    g.add_argument("--physics", default=None, help="target transmon config (default: G=1, 2 GHz)")
    g.add_argument("--angles", choices=["resample", "fixed"], default="fixed")
    g.add_argument("--n-angles", type=int, default=500)
    g.add_argument("--batches", type=int, default=10)
    g.add_argument("--n-val", type=int, default=100)
    g.add_argument("--epochs", type=int, default=10)
    g.add_argument("--alpha", type=float, default=1e-6)
    g.add_argument("--epsilon", type=float, default=1e-6)
    g.add_argument("--mode", choices=["one-sided", "two-sided"], default="one-sided")
    g.add_argument("--patience", type=int, default=None)
    g.add_argument("--arb-loss", action="store_true")

    g = add("eval", cmd_eval, "mean gate fidelity of a model per split")
    g.add_argument("--model", required=True)
    g.add_argument("--dataset", required=True)
    g.add_argument("--splits", default="train,val,test")

    g = add("report", cmd_report, "collect every manifest under a directory")
    g.add_argument("--from", required=True)
    g.set_defaults(out=None)
    return p


def _subparsers(parser):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


def _apply_config(parser, path):
    """Per-command sections of the config file override parser defaults."""
    text = Path(path).read_text()
    cp = configparser.ConfigParser()
    cp.read_string(text if "[" in text else "[transmon]\n" + text)
    subs = _subparsers(parser)
    for section in cp.sections():
        if section == "transmon":
            continue
        if section not in subs:
            raise CliError(f"unknown config section [{section}]")
        sp = subs[section]
        known = {a.dest: a for a in sp._actions}
        updates = {}
        for key, value in cp.items(section):
            dest = key.replace("-", "_")
            if dest not in known or dest == "help":
                raise CliError(f"unknown key {key!r} in [{section}]")
            conv = known[dest].type
            if isinstance(known[dest], argparse._StoreTrueAction):
                updates[dest] = cp.getboolean(section, key)
            else:
                updates[dest] = conv(value) if conv else value
        sp.set_defaults(**updates)


def dump_config(parser, args) -> str:
    buf = io.StringIO()
    buf.write(_transmon(args).to_text())
    for name, sp in _subparsers(parser).items():
        buf.write(f"\n[{name}]\n")
        for action in sp._actions:
            if action.dest in ("help", "func", "out") or action.required:
                continue
            value = sp.get_default(action.dest)
            key = action.dest.replace("_", "-")
            buf.write(f"# {key} =\n" if value is None else f"{key} = {value}\n")
    return buf.getvalue()


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        pre, _ = parser.parse_known_args(argv)
        if pre.config:
            _apply_config(parser, pre.config)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (CliError, ValueError, OSError, configparser.Error) as exc:
        print(f"pulseforge: config: {exc}", file=sys.stderr)
        return 1
    if args.dump_config:
        try:
            sys.stdout.write(dump_config(parser, args))
        except (ValueError, OSError) as exc:
            print(f"pulseforge: config: {exc}", file=sys.stderr)
            return 1
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    if args.threads is None:
        args.threads = default_threads()
    if args.threads < 1:
        print("pulseforge: --threads must be >= 1", file=sys.stderr)
        return 2
    started = time.time()
    try:
        inputs, outputs = args.func(args)
        write_manifest(Path(args.out), args, inputs, outputs, started)
    except Exception as exc:  # reported, not re-raised: the exit code carries the outcome
        module = type(exc).__module__.replace("pulseforge.", "")
        print(f"pulseforge {args.command}: {module}.{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
