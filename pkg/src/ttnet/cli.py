"""Command-line entry point: data generation, LSM, training, evaluation, rendering.

Every run writes into ``<out>/<subcommand>-<run id>/`` together with a
``manifest.json`` that records the resolved configuration, seeds, the content
hashes of all inputs and of every output file.  ``ttnet verify`` replays a
manifest and compares the output hashes.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import special
from .dataset import DatasetConfig, ShardError, generate_split, read_shard, scene_from_seed, make_example, write_shard
from .field import ShCoeffSet
from .metrics import DiskSpec, PlaneSpec, evaluate_suite, field_grid, write_reports
from .translation import RidgeConfig, build_translation_matrices, lsm_solve

log = logging.getLogger("ttnet")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_MISMATCH = 5

MANIFEST = "manifest.json"
# flags that change how a run proceeds but not what it produces
_RUN_CONTROL = {"out", "func", "resume", "stop_after", "verbose"}
_PATH_ARGS = ("config", "shard", "train_shard", "val_shard", "checkpoint", "model_config")
SWEEP_AXES = ("snr", "q", "distance", "sources")


# ---------------------------------------------------------------- hashing and manifests

def git_hash(data: bytes) -> str:
    """Git blob id of ``data``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def hash_path(path) -> str:
    """Blob id of a file, or a tree-style id over the files of a directory."""
    p = Path(path)
    if p.is_dir():
        entries = sorted(f"{f.relative_to(p).as_posix()} {hash_path(f)}" for f in p.rglob("*")
                         if f.is_file() and f.name != MANIFEST)
        return git_hash("\n".join(entries).encode())
    return git_hash(p.read_bytes())


def _canonical(doc) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str).encode()


@dataclass
class RunManifest:
    """Everything needed to trace, and to replay, one CLI run."""

    subcommand: str
    config: dict
    seeds: dict
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)

    @property
    def run_id(self) -> str:
        ident = {
            "subcommand": self.subcommand, "config": self.config, "seeds": self.seeds,
            "inputs": {role: meta["hash"] for role, meta in self.inputs.items()},
        }
        return git_hash(_canonical(ident))

    def to_dict(self) -> dict:
        return {**dataclasses.asdict(self), "run_id": self.run_id}

    @classmethod
    def from_dict(cls, doc: dict) -> "RunManifest":
        doc = {k: v for k, v in doc.items() if k != "run_id"}
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


class Run:
    """Output directory named after the manifest; ``finish`` records output hashes."""

    def __init__(self, args, subcommand: str, config: dict, seeds: dict):
        inputs = {}
        for name in _PATH_ARGS:
            value = getattr(args, name, None)
            if value is not None:
                if not Path(value).exists():
                    raise FileNotFoundError(f"input not found: {value}")
                inputs[name] = {"path": str(Path(value).resolve()), "hash": hash_path(value)}
        snapshot = {k: v for k, v in sorted(vars(args).items()) if k not in _RUN_CONTROL and k not in _PATH_ARGS}
        self.manifest = RunManifest(subcommand, {"args": snapshot, **config}, seeds, inputs)
        self.dir = Path(args.out) / f"{subcommand}-{self.manifest.run_id[:12]}"
        self.dir.mkdir(parents=True, exist_ok=True)

    def finish(self) -> RunManifest:
        self.manifest.outputs = {
            f.relative_to(self.dir).as_posix(): hash_path(f)
            for f in sorted(self.dir.rglob("*")) if f.is_file() and f.name != MANIFEST
        }
        (self.dir / MANIFEST).write_text(json.dumps(self.manifest.to_dict(), indent=1, sort_keys=True) + "\n")
        print(self.dir)
        return self.manifest


# ---------------------------------------------------------------- config flags

def _add_dataclass_flags(parser, cls, skip=(), rename=None):
    """One optional flag per dataclass field; ``None`` means "keep the base value"."""
    rename = rename or {}
    base = cls()
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        flag = "--" + rename.get(f.name, f.name).replace("_", "-")
        default = getattr(base, f.name)
        dest = rename.get(f.name, f.name)
        kind = str(f.type)
        if "bool" in kind:
            parser.add_argument(flag, dest=dest, action=argparse.BooleanOptionalAction, default=None)
        elif "int" in kind:
            parser.add_argument(flag, dest=dest, type=int, default=None, help=f"default {default}")
        elif "float" in kind:
            parser.add_argument(flag, dest=dest, type=float, default=None, help=f"default {default}")


def _overrides(args, cls, skip=(), rename=None) -> dict:
    rename = rename or {}
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        value = getattr(args, rename.get(f.name, f.name), None)
        if value is not None:
            out[f.name] = value
    return out


def _dataset_config(args) -> DatasetConfig:
    doc = json.loads(Path(args.config).read_text()) if args.config else {}
    return DatasetConfig.from_dict({**doc, **_overrides(args, DatasetConfig)})


def _parse_values(text: str) -> list:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        v = float(tok)
        out.append(int(v) if v.is_integer() else v)
    if not out:
        raise ValueError(f"no values in {text!r}")
    return out


def _load_shard(path):
    examples, cfg = read_shard(path)
    if cfg is None:
        raise ValueError(f"shard {path} carries no dataset config")
    return examples, cfg


# ---------------------------------------------------------------- estimators

def _reference(ex, freqs, n_max=None) -> ShCoeffSet:
    ref = ex.target_set(freqs, normalized=False)
    return ref if n_max is None else ref.truncated(n_max)


def _lsm_estimates(examples, freqs, ridge: RidgeConfig, n_local: int, n_global: int):
    """Ridge estimates at physical scale plus per-item diagnostics."""
    ests, diags = [], []
    c_local = special.num_coeffs(n_local)
    for ex in examples:
        mats = build_translation_matrices(freqs, ex.geometry, n_local, n_global)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            est, diag = lsm_solve(mats, ex.inputs[:, :, :c_local] * ex.scale, ridge, freqs=freqs)
        for w in caught:
            log.warning("%s", w.message)
        ests.append(est)
        diags.append(diag)
    return ests, diags


def _load_checkpoint(path, in_order: int, out_order: int, freqs):
    from .neural.train import load_model

    model = load_model(path)
    cfg = model.cfg
    if cfg.n_in != in_order or cfg.n_out != out_order or cfg.k_bins != len(freqs):
        raise ValueError(
            f"incompatible checkpoint config: model maps order {cfg.n_in}->{cfg.n_out} over {cfg.k_bins} bins, "
            f"data has order {in_order}->{out_order} over {len(freqs)} bins")
    if cfg.freqs is not None and not np.allclose(cfg.freqs, freqs):
        raise ValueError("incompatible checkpoint config: frequency grids differ")
    return model


def _ttnet_estimates(model, examples, freqs, batch_size: int = 32):
    out = [None] * len(examples)
    groups: dict = {}
    for i, ex in enumerate(examples):
        groups.setdefault(ex.q, []).append(i)
    for q in sorted(groups):
        idx = groups[q]
        for s in range(0, len(idx), batch_size):
            chunk = idx[s:s + batch_size]
            x = np.stack([examples[i].inputs for i in chunk])
            g = np.stack([examples[i].geometry for i in chunk])
            pred = model.predict(x, g)
            if not np.all(np.isfinite(pred)):
                raise FloatingPointError("network produced non-finite estimates")
            for j, i in enumerate(chunk):
                out[i] = ShCoeffSet((0.0, 0.0, 0.0), model.cfg.n_out, freqs, pred[j] * examples[i].scale)
    return out


def _sweep_examples(examples, cfg: DatasetConfig, axis: str, values):
    """Rebuild every stored scene once per sweep value with that value pinned."""
    items, labels = [], []
    for v in values:
        vcfg = dataclasses.replace(cfg, fixed_distance=float(v)) if axis == "distance" else cfg
        for ex in examples:
            pins = {"q": ex.q, "n_sources": ex.n_sources, "snr_db": ex.snr_db}
            pins.update({"snr": {"snr_db": float(v)}, "q": {"q": int(v)}, "sources": {"n_sources": int(v)},
                         "distance": {}}[axis])
            items.append(make_example(scene_from_seed(vcfg, ex.scene_seed, **pins), vcfg))
            labels.append(v)
    return items, labels


def _region(args):
    return DiskSpec(args.sdr_radius, args.sdr_step)


def _write_cond(diags, labels, path) -> None:
    with open(path, "w") as fh:
        fh.write("item,label,freq_hz,cond,residual,lambda\n")
        for i, (d, label) in enumerate(zip(diags, labels)):
            for f, c, r, lam in zip(d.freqs, d.cond, d.residual, d.lam):
                fh.write(f"{i},{label},{f:.10g},{c:.10g},{r:.10g},{lam:.10g}\n")


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> RunManifest:
    cfg = _dataset_config(args)
    counts = {s: getattr(cfg, f"n_{s}") if args.count is None else args.count for s in args.splits}
    if any(c < 0 for c in counts.values()):
        raise ValueError("count must be nonnegative")
    run = Run(args, "gen-data", {"dataset": cfg.to_dict(), "counts": counts}, {"dataset": cfg.seed})
    for split, count in counts.items():
        log.info("generating %d %s examples", count, split)
        write_shard(generate_split(cfg, split, count=count), run.dir / f"{split}.shard", cfg)
    (run.dir / "dataset_config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    return run.finish()


def _orders(examples, cfg, n_local, n_global):
    n_local = cfg.n_in if n_local is None else n_local
    n_global = cfg.n_out if n_global is None else n_global
    if n_local > cfg.n_in or n_global > cfg.n_out or n_local < 0 or n_global < 0:
        raise ValueError(f"dimension mismatch: shard holds orders {cfg.n_in}->{cfg.n_out}, "
                         f"requested {n_local}->{n_global}")
    return n_local, n_global


def cmd_lsm(args) -> RunManifest:
    examples, cfg = _load_shard(args.shard)
    n_local, n_global = _orders(examples, cfg, args.n_local, args.n_global)
    lams = _parse_values(args.lam)
    run = Run(args, "lsm", {"dataset": cfg.to_dict(), "lambdas": lams}, {"dataset": cfg.seed})
    freqs = cfg.freqs
    refs = [_reference(ex, freqs, n_global) for ex in examples]
    reports, all_est, all_diag, labels = [], [], [], []
    for lam in lams:
        ests, diags = _lsm_estimates(examples, freqs, RidgeConfig(lam, args.ridge_mode), n_local, n_global)
        if examples:
            reports += evaluate_suite(ests, refs, "lsm", [lam] * len(refs), "lambda", _region(args),
                                      args.sdr, [d.cond for d in diags])
        all_est.append(np.stack([e.data for e in ests]) if ests else
                       np.zeros((0, freqs.size, special.num_coeffs(n_global)), dtype=complex))
        all_diag += diags
        labels += [lam] * len(diags)
    np.save(run.dir / "estimates.npy", np.stack(all_est))
    write_reports(reports, run.dir / "report.csv", run.dir / "report.json")
    _write_cond(all_diag, labels, run.dir / "cond.csv")
    return run.finish()


def _layers(n_in, n_out, count):
    from .neural.model import ladder

    return ladder(n_in, n_out, n_out - n_in if count is None else count)


def cmd_train(args) -> RunManifest:
    from .neural.model import ModelConfig, TTNet
    from .neural.train import TrainConfig, train, write_curve

    train_set, cfg = _load_shard(args.train_shard)
    val_set = _load_shard(args.val_shard)[0] if args.val_shard else None
    doc = json.loads(Path(args.model_config).read_text()) if args.model_config else {}
    doc.update(_overrides(args, ModelConfig, skip=("n_in", "n_out", "k_bins", "layers", "freqs")))
    doc.update(n_in=cfg.n_in, n_out=cfg.n_out, k_bins=cfg.k_bins, freqs=[float(f) for f in cfg.freqs])
    if args.layers is not None or "layers" not in doc:
        doc["layers"] = _layers(cfg.n_in, cfg.n_out, args.layers)
    mcfg = ModelConfig.from_dict(doc)
    tcfg = TrainConfig(**_overrides(args, TrainConfig, skip=("curriculum",)), curriculum=args.curriculum)
    run = Run(args, "train", {"dataset": cfg.to_dict(), "model": mcfg.to_dict(), "train": tcfg.to_dict()},
              {"model": args.model_seed, "train": tcfg.seed, "dataset": cfg.seed})
    model = TTNet(mcfg, args.model_seed)

    def report(state):
        row = [r for r in state.curve if r[0] == state.epoch - 1]
        log.info("epoch %d: %s", state.epoch, ", ".join(f"{r[1]} {r[2]:.4g}" for r in row))

    state = train(model, train_set, val_set, tcfg, checkpoint_dir=run.dir, resume=args.resume,
                  stop_after=args.stop_after, on_epoch=report)
    write_curve(state.curve, run.dir / "curve.csv")
    return run.finish()


def cmd_eval(args) -> RunManifest:
    examples, cfg = _load_shard(args.shard)
    if not (args.checkpoint or args.lsm or args.ideal):
        raise ValueError("choose at least one of --checkpoint, --lsm, --ideal")
    config = {"dataset": cfg.to_dict()}
    if args.sweep:
        axis, values = args.sweep[0], _parse_values(args.sweep[1])
        if axis not in SWEEP_AXES:
            raise ValueError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")
        if axis in ("q", "sources") and min(values) < 1:
            raise ValueError(f"{axis} values must be positive")
        items, labels = _sweep_examples(examples, cfg, axis, values)
    else:
        axis, items, labels = "", examples, [""] * len(examples)
    config["sweep"] = {"axis": axis, "values": sorted(set(labels), key=str)}
    freqs = cfg.freqs
    model = _load_checkpoint(args.checkpoint, cfg.n_in, cfg.n_out, freqs) if args.checkpoint else None
    run = Run(args, "eval", config, {"dataset": cfg.seed})
    refs = [_reference(ex, freqs) for ex in items]
    region = _region(args)
    reports = []
    if args.ideal and items:
        reports += evaluate_suite(refs, refs, "ideal", labels, axis, region, args.sdr)
    if args.lsm and items:
        ests, diags = _lsm_estimates(items, freqs, RidgeConfig(args.lam, args.ridge_mode), cfg.n_in, cfg.n_out)
        reports += evaluate_suite(ests, refs, "lsm", labels, axis, region, args.sdr, [d.cond for d in diags])
        _write_cond(diags, labels, run.dir / "cond.csv")
    if model is not None and items:
        ests = _ttnet_estimates(model, items, freqs)
        reports += evaluate_suite(ests, refs, "ttnet", labels, axis, region, args.sdr)
    write_reports(reports, run.dir / "report.csv", run.dir / "report.json")
    return run.finish()


def cmd_render(args) -> RunManifest:
    examples, cfg = _load_shard(args.shard)
    if not 0 <= args.index < len(examples):
        raise ValueError(f"index {args.index} outside shard of {len(examples)} examples")
    freqs = cfg.freqs
    picks = []
    for f in args.freq:
        hit = np.flatnonzero(np.isclose(freqs, f, rtol=0, atol=1e-6))
        if hit.size == 0:
            raise ValueError(f"frequency not on grid: {f:g} Hz (grid {freqs[0]:g}..{freqs[-1]:g} "
                             f"step {cfg.freq_step:g} Hz)")
        picks.append(int(hit[0]))
    methods = args.methods.split(",") if args.methods else ["ideal", "lsm"] + (["ttnet"] if args.checkpoint else [])
    unknown = set(methods) - {"ideal", "lsm", "ttnet"}
    if unknown:
        raise ValueError(f"unknown render methods {sorted(unknown)}")
    if "ttnet" in methods and not args.checkpoint:
        raise ValueError("rendering ttnet needs --checkpoint")
    spec = PlaneSpec(args.extent, args.step, args.axes, args.offset)
    run = Run(args, "render", {"dataset": cfg.to_dict(), "plane": dataclasses.asdict(spec)}, {"dataset": cfg.seed})
    ex = examples[args.index]
    sets = {}
    if "ideal" in methods:
        sets["ideal"] = _reference(ex, freqs)
    if "lsm" in methods:
        sets["lsm"] = _lsm_estimates([ex], freqs, RidgeConfig(args.lam, args.ridge_mode), cfg.n_in, cfg.n_out)[0][0]
    if "ttnet" in methods:
        model = _load_checkpoint(args.checkpoint, cfg.n_in, cfg.n_out, freqs)
        sets["ttnet"] = _ttnet_estimates(model, [ex], freqs)[0]
    for name in methods:
        for i in picks:
            field_grid(sets[name], i, spec).to_csv(run.dir / f"grid_{name}_{freqs[i]:g}Hz.csv")
    return run.finish()


def cmd_verify(args) -> int:
    """Replay a manifest into ``--out`` and compare output hashes."""
    old = RunManifest.load(args.manifest)
    ns = dict(old.config["args"])
    for name in _PATH_ARGS:
        ns[name] = old.inputs[name]["path"] if name in old.inputs else None
    for name, meta in old.inputs.items():
        if hash_path(meta["path"]) != meta["hash"]:
            raise ValueError(f"input {meta['path']} changed since the recorded run")
    ns.update(out=args.out, resume=False, stop_after=None, verbose=args.verbose)
    new = COMMANDS[old.subcommand](argparse.Namespace(**ns))
    diff = sorted(k for k in set(old.outputs) | set(new.outputs) if old.outputs.get(k) != new.outputs.get(k))
    for k in diff:
        print(f"mismatch: {k}", file=sys.stderr)
    return EXIT_MISMATCH if diff else EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "lsm": cmd_lsm, "train": cmd_train, "eval": cmd_eval, "render": cmd_render}


# ---------------------------------------------------------------- parser

def _ridge_flags(p, many: bool = False):
    if many:
        p.add_argument("--lam", default="1e-3", help="ridge weight; a comma list sweeps it (default 1e-3)")
    else:
        p.add_argument("--lam", type=float, default=1e-3, help="ridge weight (default 1e-3)")
    p.add_argument("--ridge-mode", choices=("relative", "fixed"), default="relative",
                   help="relative scales lambda by the largest singular value")


def _sdr_flags(p):
    p.add_argument("--sdr", action=argparse.BooleanOptionalAction, default=True, help="compute SDR on a disk")
    p.add_argument("--sdr-radius", type=float, default=1.0)
    p.add_argument("--sdr-step", type=float, default=0.02)


def build_parser() -> argparse.ArgumentParser:
    from .neural.model import ModelConfig
    from .neural.train import TrainConfig

    parser = argparse.ArgumentParser(prog="ttnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", default="runs", help="root directory for run folders (default runs)")

    p = sub.add_parser("gen-data", help="simulate scenes and write dataset shards")
    p.add_argument("--config", help="DatasetConfig JSON; flags override its fields")
    p.add_argument("--splits", type=lambda s: s.split(","), default=["train", "val", "test"])
    p.add_argument("--count", type=int, help="examples per split, replacing n_train/n_val/n_test")
    _add_dataclass_flags(p, DatasetConfig)
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("lsm", help="ridge-regularised least-squares baseline on a shard")
    p.add_argument("--shard", required=True)
    p.add_argument("--n-local", type=int, help="local order used (default: shard input order)")
    p.add_argument("--n-global", type=int, help="global order estimated (default: shard target order)")
    _ridge_flags(p, many=True)
    _sdr_flags(p)
    common(p)
    p.set_defaults(func=cmd_lsm)

    p = sub.add_parser("train", help="train TT-Net on a shard")
    p.add_argument("--train-shard", required=True)
    p.add_argument("--val-shard")
    p.add_argument("--model-config", help="ModelConfig JSON; flags override its fields")
    p.add_argument("--layers", type=int, help="number of upscaling layers (default: one per order)")
    p.add_argument("--model-seed", type=int, default=0)
    _add_dataclass_flags(p, ModelConfig, skip=("n_in", "n_out", "k_bins", "layers", "freqs"))
    _add_dataclass_flags(p, TrainConfig, skip=("curriculum",))
    p.add_argument("--curriculum", choices=("lrg2sml", "sml2lrg", "mixed"), default="lrg2sml")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in the run folder")
    p.add_argument("--stop-after", type=int, help="stop after this many epochs in this invocation")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate methods on a shard, optionally over a sweep")
    p.add_argument("--shard", required=True)
    p.add_argument("--checkpoint", help="trained TT-Net run folder")
    p.add_argument("--lsm", action="store_true", help="include the ridge baseline")
    p.add_argument("--ideal", action="store_true", help="include the reference against itself")
    p.add_argument("--sweep", nargs=2, metavar=("AXIS", "VALUES"),
                   help=f"rebuild the shard scenes per value; AXIS in {{{', '.join(SWEEP_AXES)}}}")
    _ridge_flags(p)
    _sdr_flags(p)
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="pressure on a plane grid as CSV")
    p.add_argument("--shard", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--freq", type=float, action="append", required=True, help="Hz; repeat for several")
    p.add_argument("--extent", type=float, default=2.0)
    p.add_argument("--step", type=float, default=0.02)
    p.add_argument("--axes", choices=("xy", "xz", "yz"), default="xy")
    p.add_argument("--offset", type=float, default=0.0)
    p.add_argument("--methods", help="comma list of ideal, lsm, ttnet")
    p.add_argument("--checkpoint")
    _ridge_flags(p)
    common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("verify", help="replay a manifest and compare output hashes")
    p.add_argument("manifest")
    common(p)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        result = args.func(args)
    except (ShardError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return result if isinstance(result, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
