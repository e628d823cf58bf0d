"""Command-line entry point: ``rockgpt <command> [flags]``.

Every command reads optional defaults from ``--config`` (a JSON object whose
keys are the long flag names with dashes replaced by underscores); flags given
on the command line win. The effective configuration is written next to the
outputs as ``run_config.json`` (or ``<file>.config.json`` when ``--out`` names
a file).

Exit status: 0 on success, 1 on a usage error, 2 when the command fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import RockGPTError

log = logging.getLogger("rockgpt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# defaults applied after config and flags; None in a flag means "not given"
DEFAULTS: dict[str, dict] = {
    "synth": {"l": 8, "stride": 4, "test_fraction": 0.0, "split_seed": None, "classes": None},
    "extract": {"manifest": None, "split": "all"},
    "train-vqvae": {"manifest": None, "iters": 2000, "batch_size": 8, "lr": 3e-4, "resume": None,
                    "model": {}},
    "train-gpt": {"stage1": None, "manifest": None, "iters": 2000, "batch_size": 8, "lr": 3e-4,
                  "resume": None, "model": {}},
    "sample": {"stage2": None, "stage1": None, "slice": None, "slice_index": 0, "class": 0,
               "porosity": None, "iters": 1, "temperature": 1.0, "greedy": False, "top_k": None},
    "metrics": {"volumes": [], "r_max": None, "with_perm": False, "axis": 0},
    "perm": {"volume": None, "axis": 0, "tau": 1.0, "g": 1e-5, "tol": 1e-6, "max_steps": 50000,
             "dump_velocity": False, "allow_unconverged": False},
    "gradcheck": {"probes": 20},
}

DEFAULT_CLASSES = [
    {"name": "fine", "sigma": 1.0, "count": 8},
    {"name": "coarse", "sigma": 2.5, "count": 8},
]


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global seed (u64), default 0")
    common.add_argument("--deterministic", action="store_true", default=None,
                        help="fixed-order kernels; bitwise reproducible reruns")
    common.add_argument("--config", type=Path, help="JSON file of defaults for this command")
    common.add_argument("--out", type=Path, help="output directory (a file path for `sample`)")
    common.add_argument("--threads", type=int, default=None, help="intra-op threads (also $ROCKGPT_THREADS)")

    p = _Parser(prog="rockgpt", description="Conditional generation and analysis of binary rock volumes.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic .rvox dataset and manifest.json")
    s.add_argument("--l", type=int, help="sequence length recorded for extraction (8)")
    s.add_argument("--stride", type=int, help="extraction stride (4)")
    s.add_argument("--test-fraction", type=float, help="fraction of volumes held out (0)")
    s.add_argument("--split-seed", type=int, help="seed of the train/test split (defaults to --seed)")

    s = sub.add_parser("extract", parents=[common], help="cut training sequences out of a dataset")
    s.add_argument("--manifest", type=Path, help="dataset manifest.json")
    s.add_argument("--split", choices=["train", "test", "all"], help="which volumes to use (all)")

    s = sub.add_parser("train-vqvae", parents=[common], help="stage 1: train the VQ-VAE")
    s.add_argument("--manifest", type=Path, help="dataset manifest.json")
    s.add_argument("--iters", type=int, help="total Adam steps (2000)")
    s.add_argument("--batch-size", type=int, help="sequences per step (8)")
    s.add_argument("--lr", type=float, help="Adam learning rate (3e-4)")
    s.add_argument("--resume", type=Path, help="continue from this stage-1 checkpoint")

    s = sub.add_parser("train-gpt", parents=[common], help="stage 2: train the conditional GPT")
    s.add_argument("--stage1", type=Path, help="stage-1 checkpoint")
    s.add_argument("--manifest", type=Path, help="dataset (defaults to the one stage 1 was trained on)")
    s.add_argument("--iters", type=int, help="total Adam steps (2000)")
    s.add_argument("--batch-size", type=int, help="sequences per step (8)")
    s.add_argument("--lr", type=float, help="Adam learning rate (3e-4)")
    s.add_argument("--resume", type=Path, help="continue from this stage-2 checkpoint")

    s = sub.add_parser("sample", parents=[common], help="generate a volume by slice stacking")
    s.add_argument("--stage2", type=Path, help="stage-2 checkpoint")
    s.add_argument("--stage1", type=Path, help="stage-1 checkpoint (defaults to the recorded reference)")
    s.add_argument("--slice", type=Path, help=".rvox whose slice seeds the first chunk")
    s.add_argument("--slice-index", type=int, help="which first-axis slice of --slice to use (0)")
    s.add_argument("--class", type=int, dest="class_", help="rock class label (0)")
    s.add_argument("--porosity", type=float, help="target porosity (defaults to that of the seed slice)")
    s.add_argument("--iters", type=int, help="number of chained chunks (1)")
    s.add_argument("--temperature", type=float, help="softmax temperature (1.0)")
    s.add_argument("--greedy", action="store_true", default=None, help="argmax decoding")
    s.add_argument("--top-k", type=int, help="sample among the k most likely codes")

    s = sub.add_parser("metrics", parents=[common], help="morphology report (JSON and CSV) per volume")
    s.add_argument("volumes", nargs="*", type=Path, help=".rvox files")
    s.add_argument("--r-max", type=int, help="largest lag of the correlation curves (half the extent)")
    s.add_argument("--with-perm", action="store_true", default=None, help="also run the LBM for k_darcy")
    s.add_argument("--axis", type=int, help="flow axis for --with-perm (0)")

    s = sub.add_parser("perm", parents=[common], help="LBM permeability of one volume")
    s.add_argument("volume", nargs="?", type=Path, help=".rvox file")
    s.add_argument("--axis", type=int, help="flow axis (0)")
    s.add_argument("--tau", type=float, help="BGK relaxation time (1.0)")
    s.add_argument("--g", type=float, help="body acceleration, lattice units (1e-5)")
    s.add_argument("--tol", type=float, help="relative-change convergence threshold (1e-6)")
    s.add_argument("--max-steps", type=int, help="step budget (50000)")
    s.add_argument("--dump-velocity", action="store_true", default=None,
                   help="write velocity.bin, 3 float32 LE per node")
    s.add_argument("--allow-unconverged", action="store_true", default=None,
                   help="report k even if the run did not settle")

    s = sub.add_parser("gradcheck", parents=[common], help="run the gradient verification suite")
    s.add_argument("--probes", type=int, help="finite-difference probes per op (20)")
    return p


def resolve(args: argparse.Namespace) -> dict:
    """Merge command defaults, the config file, and explicit flags (in that order)."""
    cfg = dict(DEFAULTS[args.command], seed=0, deterministic=False, threads=None, out=None)
    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(loaded, dict):
            raise UsageError("config must be a JSON object")
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {sorted(unknown)}")
        cfg.update(loaded)
    for key, val in vars(args).items():
        if key in ("command", "config") or val is None:
            continue
        if key == "class_":
            key = "class"
        if key == "volumes" and not val:
            continue
        cfg[key] = val
    def plain(v):
        if isinstance(v, Path):
            return str(v)
        if isinstance(v, list):
            return [plain(x) for x in v]
        return v
    return {k: plain(v) for k, v in cfg.items()}


def _need(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, [])]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _out_dir(cfg: dict, default: str = ".") -> Path:
    out = Path(cfg["out"] or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(cfg: dict, path: Path) -> None:
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(cfg: dict) -> None:
    from .synth import ClassSpec, make_dataset
    out = _out_dir(cfg)
    classes = [ClassSpec.from_dict(c) for c in (cfg["classes"] or DEFAULT_CLASSES)]
    _echo(cfg, out / "run_config.json")
    man = make_dataset(classes, cfg["seed"], out, cfg["l"], cfg["stride"], cfg["split_seed"], cfg["test_fraction"])
    print(f"wrote {len(man['volumes'])} volumes to {out}")


def cmd_extract(cfg: dict) -> None:
    from .pipeline import build_sequences, load_manifest
    _need(cfg, "manifest")
    out = _out_dir(cfg)
    _echo(cfg, out / "run_config.json")
    data = build_sequences(load_manifest(cfg["manifest"]), cfg["split"])
    np.save(out / "sequences.npy", data.x)
    _write_json(out / "sequences.json", {
        "shape": list(data.x.shape),
        "labels": data.labels.tolist(),
        "porosity": [float(p) for p in data.porosity],
        "volume_index": data.volume_index.tolist(),
        "n_classes": data.n_classes,
    })
    print(f"extracted {len(data)} sequences of shape {tuple(data.x.shape[1:])}")


def cmd_train_vqvae(cfg: dict) -> None:
    from .pipeline import train_stage1
    from .vqvae import VqVaeConfig
    _need(cfg, "manifest")
    out = _out_dir(cfg)
    _echo(cfg, out / "run_config.json")
    model = VqVaeConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg["model"].items()})
    ck = train_stage1(cfg["manifest"], model, cfg["iters"], cfg["batch_size"], cfg["lr"], cfg["seed"],
                      out / "ckpt", cfg["resume"])
    print(f"stage 1 done: {len(ck.meta['history'])} steps, final loss {ck.meta['history'][-1]:.4f}")


def cmd_train_gpt(cfg: dict) -> None:
    from .cgpt import GptConfig
    from .pipeline import load_checkpoint, train_stage2
    _need(cfg, "stage1")
    manifest = cfg["manifest"] or load_checkpoint(cfg["stage1"]).meta["manifest"]
    out = _out_dir(cfg)
    _echo(dict(cfg, manifest=manifest), out / "run_config.json")
    model = None
    if cfg["model"]:
        model = GptConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg["model"].items()})
    ck = train_stage2(manifest, cfg["stage1"], model, cfg["iters"], cfg["batch_size"], cfg["lr"], cfg["seed"],
                      out / "ckpt", cfg["resume"])
    print(f"stage 2 done: {len(ck.meta['history'])} steps, final nll {ck.meta['history'][-1]:.4f}")


def cmd_sample(cfg: dict) -> None:
    from .io import VoxelVolume, read_rvox, write_rvox
    from .pipeline import RockGPT
    _need(cfg, "stage2", "slice", "out")
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    _echo(cfg, out.with_name(out.name + ".config.json"))
    seed_vol = read_rvox(cfg["slice"])
    model = RockGPT.load(cfg["stage2"], cfg["stage1"])
    sl = seed_vol.data[cfg["slice_index"]]
    if sl.shape != tuple(model.sequence_shape[1:]):
        raise UsageError(f"seed slice {sl.shape} does not match the model's slices {model.sequence_shape[1:]}")
    phi = cfg["porosity"] if cfg["porosity"] is not None else float(sl.mean())
    vol = model.stack_volume(sl, cfg["iters"], cfg["class"], phi, cfg["seed"], cfg["temperature"],
                             bool(cfg["greedy"]), cfg["top_k"])
    write_rvox(out, VoxelVolume(vol, seed_vol.voxel_size))
    print(f"wrote {out}: shape {vol.shape}, porosity {vol.mean():.4f}")


def cmd_metrics(cfg: dict) -> None:
    from .io import read_rvox
    from .lbm import lbm_run, permeability
    from .morphology import morph_report, reports_to_csv
    _need(cfg, "volumes")
    out = _out_dir(cfg)
    _echo(cfg, out / "run_config.json")
    reports = []
    for path in cfg["volumes"]:
        vol = read_rvox(path)
        k = None
        if cfg["with_perm"]:
            state = lbm_run(vol, axis=cfg["axis"])
            k = permeability(state, vol.voxel_size, cfg["axis"], override=True).k_darcy if state.converged else None
        reports.append(morph_report(vol, Path(path).stem, cfg["r_max"], k))
    _write_json(out / "reports.json", [r.to_dict() for r in reports])
    (out / "metrics.csv").write_text(reports_to_csv(reports))
    for r in reports:
        print(f"{r.id}: phi={r.porosity:.4f} lambda={r.mean_length:.3f} "
              f"S_a={r.specific_surface:.4f} chi_V={r.euler_density:.5f}")


def cmd_perm(cfg: dict) -> None:
    from .io import read_rvox
    from .lbm import lbm_run, permeability
    _need(cfg, "volume")
    out = _out_dir(cfg)
    _echo(cfg, out / "run_config.json")
    vol = read_rvox(cfg["volume"])
    state = lbm_run(vol, cfg["tau"], cfg["g"], cfg["axis"], cfg["tol"], cfg["max_steps"])
    res = permeability(state, vol.voxel_size, cfg["axis"], override=bool(cfg["allow_unconverged"]))
    _write_json(out / "perm.json", dict(res.to_dict(), status=state.status))
    if cfg["dump_velocity"]:
        u = np.moveaxis(state.velocity, 0, -1).astype("<f4")
        (out / "velocity.bin").write_bytes(u.tobytes())
    print(f"k = {res.k_darcy:.6g} D ({res.k_lattice:.6g} lattice units), status {state.status}")


def cmd_gradcheck(cfg: dict) -> None:
    from .checks import run_suite
    out = _out_dir(cfg)
    _echo(cfg, out / "run_config.json")
    records = run_suite(cfg["probes"], cfg["seed"])
    _write_json(out / "gradcheck.json", records)
    for r in records:
        flag = "ok" if r["passed"] else "FAIL"
        print(f"{flag:4s} {r['op']:24s} {r['precision']:8s} {r['max_rel_error']:.2e} (tol {r['tolerance']:.0e})")
    failed = [r["op"] for r in records if not r["passed"]]
    if failed:
        raise RockGPTError(f"gradient check failed for: {', '.join(sorted(set(failed)))}")


COMMANDS = {
    "synth": cmd_synth, "extract": cmd_extract, "train-vqvae": cmd_train_vqvae, "train-gpt": cmd_train_gpt,
    "sample": cmd_sample, "metrics": cmd_metrics, "perm": cmd_perm, "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve(args)
        if cfg["threads"] is not None and cfg["threads"] < 1:
            raise UsageError("--threads must be >= 1")
        T.set_deterministic(bool(cfg["deterministic"]), cfg["threads"])
        T.seed_everything(cfg["seed"])
        COMMANDS[args.command](cfg)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if e.code in (0, None) else 1
    except Exception as e:
        log.debug("command failed", exc_info=True)
        print(f"rockgpt: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
