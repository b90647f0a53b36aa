"""Command-line entry point: ``harunet <verb> [flags]``.

Exit codes: 0 success, 1 validation error (bad flags, bad values, bad
file contents), 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shlex
import sys
from pathlib import Path

from . import __version__

log = logging.getLogger("harunet")


class CliError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)

    def add_argument(self, *args, **kw):
        # argparse hides help-less options from the defaults listing
        if "help" not in kw and args and str(args[0]).startswith("--"):
            kw["help"] = "required" if kw.get("required") else "(default: %(default)s)"
        return super().add_argument(*args, **kw)


class _Help(argparse.ArgumentDefaultsHelpFormatter):
    """Shows the default of every option, including ones without help text."""

    def _get_help_string(self, action):
        text = (action.help or "").strip()
        if action.required:
            return text or "required"
        if action.default is not argparse.SUPPRESS and action.option_strings and "%(default)" not in text \
                and "(default" not in text:
            text = f"{text} (default: %(default)s)".lstrip()
        return text


def _dims(text: str, n: int):
    try:
        vals = tuple(int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected {n} integers joined by 'x', got {text!r}")
    if len(vals) != n or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected {n} positive integers joined by 'x', got {text!r}")
    return vals


def _fractions(text: str):
    try:
        vals = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad split fractions {text!r}")
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("split needs three comma-separated fractions")
    return vals


def _runlog(target: Path, argv) -> None:
    """Append a reproducibility record next to (file) or inside (dir) ``target``."""
    path = target / "runlog.txt" if target.is_dir() else target.with_name(target.name + ".runlog")
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(f"harunet {__version__}\t{' '.join(shlex.quote(a) for a in argv)}\n")


def _volumes_in(path: Path):
    if path.is_dir():
        files = sorted(path.glob("*.hvol"))
        if not files:
            raise CliError(f"no .hvol volumes in {path}")
        return files
    if not path.exists():
        raise FileNotFoundError(path)
    return [path]


def _slice_pngs(path: Path):
    files = sorted(p for p in path.glob("*.png") if not p.stem.endswith(("_m0", "_m1", "_mf")))
    if not files:
        raise CliError(f"no .png slices in {path}")
    return files


def _set_threads(n):
    import torch
    if n:
        torch.set_num_threads(n)
    return n or os.cpu_count() or 1


# ---------------------------------------------------------------- verbs

def cmd_phantom(a):
    from .phantom import generate_phantom_volume
    from .volume_io import store_volume
    v = generate_phantom_volume(a.seed, a.dims)
    store_volume(v, a.out)
    print(f"phantom {v.id}: dims {v.dims}, nonzero fraction {(v.voxels > 0).mean():.3f} -> {a.out}")
    return Path(a.out)


def cmd_simulate_noise(a):
    from .noise import RNG_NAME, NoiseParams, add_noise, noise_generator, randomized_params
    from .volume_io import DatasetManifest, ManifestEntry, read_png, write_manifest, write_png
    if a.no_clip:
        log.warning("--no-clip: PNG storage clips values to [0, 1] on write")
    p = NoiseParams(a.sigma_q, a.sigma_e, a.seed, not a.no_clip)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, f in enumerate(_slice_pngs(Path(a.input))):
        clean = read_png(f)
        params = randomized_params(p, noise_generator(p.seed, (i, 1))) if a.per_slice_sigma else p
        noisy = add_noise(clean, params, (i,))
        h, w = clean.shape
        for role, img in (("noisy", noisy), ("clean", clean)):
            rel = f"{f.stem}_{role}.png"
            write_png(out / rel, img)
            entries.append(ManifestEntry(rel, role, f.stem, a.split, a.volume_id, a.plane, i, 0, 0, w, h))
    header = dict(p.header(), per_slice_sigma=bool(a.per_slice_sigma))
    write_manifest(DatasetManifest(entries, header, p.seed, RNG_NAME), out / "manifest.tsv")
    print(f"simulate-noise: {len(entries) // 2} pairs -> {out / 'manifest.tsv'}")
    return out


def cmd_segment(a):
    from concurrent.futures import ThreadPoolExecutor
    from .segmentation import segment_stages
    from .volume_io import load_volume, read_png, slice_volume, write_mask_png, write_png
    src, out = Path(a.input), Path(a.output)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    if src.is_dir() and not list(src.glob("*.hvol")):
        for f in _slice_pngs(src):
            jobs.append((f.stem, read_png(f), False))
    else:
        for vf in _volumes_in(src):
            v = load_volume(vf)
            for s in slice_volume(v, a.plane):
                jobs.append((f"{v.id}_{a.plane}_{s.index:04d}", s.pixels, True))
    with ThreadPoolExecutor(max_workers=a.threads_eff) as pool:
        stages = list(pool.map(lambda j: segment_stages(j[1]), jobs))
    fg = 0
    for (stem, px, write_slice), (m0, m1, mf) in zip(jobs, stages):
        if write_slice:
            write_png(out / f"{stem}.png", px)
        write_mask_png(out / f"{stem}_mf.png", mf.bits)
        if a.save_stages:
            write_mask_png(out / f"{stem}_m0.png", m0.bits)
            write_mask_png(out / f"{stem}_m1.png", m1.bits)
        fg += int(mf.bits.any())
    print(f"segment: {len(jobs)} slices, {fg} with foreground -> {out}")
    return out


def cmd_patchify(a):
    from .noise import NoiseParams
    from .patching import build_patch_dataset
    from .volume_io import load_volume, write_manifest
    vols = [load_volume(f) for f in _volumes_in(Path(a.input))]
    noise = NoiseParams(a.noise_sigma_q, a.noise_sigma_e, a.seed, not a.no_clip)
    out = Path(a.out)
    m = build_patch_dataset(vols, a.planes.split(","), noise, a.split_seed if a.split_seed is not None else a.seed,
                            out, a.patch, a.split, per_slice_sigma=a.per_slice_sigma, threads=a.threads_eff)
    write_manifest(m, out / "manifest.tsv")
    counts = {s: len(m.pairs(s)) for s in ("train", "val", "test")}
    print(f"patchify: {len(m.entries) // 2} pairs {counts}, {m.skipped_slices} empty slices -> {out / 'manifest.tsv'}")
    return out


def _net_config(a):
    from .network import NetworkConfig
    over = {}
    if getattr(a, "ablate_attention", False):
        over["ablate_attention"] = True
    if a.config:
        return NetworkConfig.load(a.config, **over)
    return NetworkConfig(**over)


def cmd_train(a):
    from .network import HaruNet
    from .training import TrainConfig, train
    from .volume_io import read_manifest
    netcfg = _net_config(a)
    cfg = TrainConfig(lr0=a.lr, batch_size=a.batch_size, max_epochs=a.epochs, seed=a.seed)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    print("effective network config:\n" + netcfg.to_text().rstrip())
    print(f"effective train config: {cfg}")
    manifest = read_manifest(a.manifest)
    net = HaruNet(netcfg, seed=a.seed)
    _, hist = train(net, manifest, cfg, a.manifest, out, max_steps=a.max_steps)
    print(f"train: {hist.epochs} epochs, best val {hist.best_val:.6g} at epoch {hist.best_epoch}, "
          f"stop: {hist.stop_reason} -> {out / 'best.hckpt'}")
    return out


def cmd_denoise(a):
    from .inference import denoise_volume
    from .network import HaruNet, NetworkConfig
    from .nn_core import load_checkpoint
    from .volume_io import load_volume, store_volume
    cfg_path = a.config or Path(a.ckpt).with_name("network.cfg")
    if not Path(cfg_path).exists():
        raise FileNotFoundError(f"network config not found: {cfg_path} (pass --config)")
    net = HaruNet(NetworkConfig.load(cfg_path))
    net.params.load_state(load_checkpoint(a.ckpt))
    v = load_volume(a.volume)
    stats = {}
    out = denoise_volume(net, v, a.tile, a.overlap, stats=stats)
    store_volume(out, a.out)
    print(f"denoise: {v.dims} in {stats['seconds']:.2f} s ({stats['seconds'] / 60:.3f} min/scan) -> {a.out}")
    return Path(a.out)


def cmd_evaluate(a):
    from .metrics import MetricsReport, render_report
    from .volume_io import read_png
    ref, test = Path(a.ref), Path(a.test)
    rep = MetricsReport(a.model)
    for f in _slice_pngs(ref):
        g = test / f.name
        if not g.exists():
            raise CliError(f"no test image matching {f.name}")
        rep.add(f.stem, read_png(f), read_png(g), a.peak)
    text = render_report([rep])
    Path(a.out).write_text(text)
    print(text, end="")
    return Path(a.out)


def cmd_macs(a):
    from .metrics import count_macs
    cfg = _net_config(a)
    b = count_macs(cfg, a.input)
    if a.verbose:
        for k, v in b.per_layer.items():
            print(f"{k}\t{v}")
    print(f"total MACs {b.total} = {b.total_gmacs:.3f} GMACs for input {'x'.join(map(str, a.input))}")
    if a.out:
        Path(a.out).write_text(json.dumps({"total": b.total, "gmacs": b.total_gmacs,
                                           "per_layer": b.per_layer}, indent=1) + "\n")
        return Path(a.out)
    return None


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="harunet", description="HARU-Net CBCT denoising pipeline")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="verb", parser_class=_Parser, metavar="VERB")
    fmt = _Help

    def verb(name, fn, help):
        sp = sub.add_parser(name, help=help, formatter_class=fmt)
        sp.set_defaults(func=fn)
        sp.add_argument("--threads", type=int, default=None,
                        help="worker/thread cap; 1 gives bitwise-reproducible runs (default: all cores)")
        return sp

    sp = verb("phantom", cmd_phantom, "generate a synthetic phantom volume")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--dims", type=lambda t: _dims(t, 3), default=(8, 256, 256), help="DxHxW")
    sp.add_argument("--out", required=True)

    sp = verb("simulate-noise", cmd_simulate_noise, "add quantum + electronic noise to a slice directory")
    sp.add_argument("--input", required=True, help="directory of PNG slices")
    sp.add_argument("--out", required=True)
    sp.add_argument("--sigma-q", type=float, default=0.04)
    sp.add_argument("--sigma-e", type=float, default=0.02)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--no-clip", action="store_true")
    sp.add_argument("--per-slice-sigma", action="store_true", help="randomize sigmas per slice")
    sp.add_argument("--split", default="train", choices=("train", "val", "test"))
    sp.add_argument("--volume-id", default="slices")
    sp.add_argument("--plane", default="axial", choices=("axial", "frontal", "sagittal"))

    sp = verb("segment", cmd_segment, "compute foreground masks (Mf) for slices")
    sp.add_argument("--input", required=True, help="PNG slice directory, .hvol file or directory of them")
    sp.add_argument("--output", required=True)
    sp.add_argument("--save-stages", action="store_true", help="also write M0 and M1")
    sp.add_argument("--plane", default="axial", choices=("axial", "frontal", "sagittal"))

    sp = verb("patchify", cmd_patchify, "build a paired noisy/clean patch dataset")
    sp.add_argument("--input", required=True, help=".hvol file or directory of them")
    sp.add_argument("--out", required=True)
    sp.add_argument("--noise-sigma-q", type=float, default=0.04)
    sp.add_argument("--noise-sigma-e", type=float, default=0.02)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--split-seed", type=int, default=None, help="defaults to --seed")
    sp.add_argument("--patch", type=int, default=256)
    sp.add_argument("--split", type=_fractions, default=(0.7, 0.15, 0.15))
    sp.add_argument("--planes", default="axial,frontal,sagittal")
    sp.add_argument("--no-clip", action="store_true")
    sp.add_argument("--per-slice-sigma", action="store_true")

    sp = verb("train", cmd_train, "train HARU-Net on a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--config", default=None, help="network config file (key = value)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int, default=100)
    sp.add_argument("--batch-size", type=int, default=8)
    sp.add_argument("--lr", type=float, default=1e-4)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--max-steps", type=int, default=None, help="cap optimizer steps per epoch")
    sp.add_argument("--ablate-attention", action="store_true", help="train the ResU-Net baseline")

    sp = verb("denoise", cmd_denoise, "denoise a volume with a trained checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--config", default=None, help="defaults to network.cfg next to the checkpoint")
    sp.add_argument("--volume", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--tile", type=int, default=256)
    sp.add_argument("--overlap", type=int, default=32)

    sp = verb("evaluate", cmd_evaluate, "PSNR/SSIM/GMSD between matching PNGs of two directories")
    sp.add_argument("--ref", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--peak", type=float, default=1.0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--model", default="model")

    sp = verb("macs", cmd_macs, "analytic MAC count of a network config")
    sp.add_argument("--config", default=None)
    sp.add_argument("--input", type=lambda t: _dims(t, 4), default=(1, 1, 256, 256), help="NxCxHxW")
    sp.add_argument("--ablate-attention", action="store_true")
    sp.add_argument("--verbose", action="store_true", help="per-layer breakdown")
    sp.add_argument("--out", default=None, help="optional JSON output")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "verb", None):
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args.threads_eff = _set_threads(args.threads)
    try:
        target = args.func(args)
    except (OSError,) as exc:
        print(f"harunet {args.verb}: I/O error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, RuntimeError) as exc:
        print(f"harunet {args.verb}: error: {exc}", file=sys.stderr)
        return 1
    if target is not None:
        _runlog(Path(target), argv)
    return 0


if __name__ == "__main__":
    sys.exit(main())
