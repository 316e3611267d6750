"""Command-line entry point: ``wavemo <command> [--config FILE] [flags]``.

Every command writes into one run directory (``--out``) holding a
``manifest.txt`` with the resolved settings. Config files are plain
``key=value`` lines (``#`` starts a comment); keys are flag names with
dashes or underscores, and flags given on the command line win.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical
failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from wavemo import io
from wavemo.diversity import MeasurementStack, ModulationSet, write_profile_csv
from wavemo.errors import (
    ConfigurationError,
    ContractError,
    NumericalError,
    UnderdeterminedError,
)
from wavemo.evaluate import (
    evaluate_iterative,
    evaluate_proxy,
    held_out_set,
    mean_mtf_profile,
    score,
    simulate_instance,
    upper_half_mean,
)
from wavemo.metrics import MetricReport, aggregate, write_table_csv
from wavemo.modopt import (
    BASELINE_KINDS,
    TrainConfig,
    generate_baseline,
    mtf_direct_opt,
    train_modulations,
)
from wavemo.optics import pupil_mask
from wavemo.recon_iterative import ReconOptions, reconstruct
from wavemo.recon_proxy import ProxyParams, ProxyTrainOptions, fit_proxy
from wavemo.scenes import SceneSource
from wavemo.zernike import (
    GridSpec,
    build_basis,
    compose_phase,
    desk_sigma_range,
    sample_aberration,
    write_coeffs_csv,
)

log = logging.getLogger("wavemo")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _int_list(text: str) -> list[int]:
    return [int(t) for t in _csv_list(text)]


def worker_count(jobs: int) -> int:
    """Worker cap from ``WAVEMO_THREADS`` (default: CPU count), never above ``jobs``."""
    raw = os.environ.get("WAVEMO_THREADS")
    try:
        cap = int(raw) if raw else (os.cpu_count() or 1)
    except ValueError:
        raise ConfigurationError(f"WAVEMO_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(cap, jobs))


def _fan_out(fn, jobs: list) -> list:
    """Run independent jobs, possibly in worker processes; results keep job order."""
    workers = worker_count(len(jobs))
    if workers == 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


# -- shared argument groups ------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; command-line flags override it")
    p.add_argument("--out", help="run directory (created if missing)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def _grid(p: argparse.ArgumentParser, n: int) -> None:
    p.add_argument("--n", type=int, default=n, help="grid size in pixels (power of two)")
    p.add_argument("--frac", type=float, default=0.5, help="pupil radius as a fraction of n/2")
    p.add_argument("--sigma-lo", type=float, default=None,
                   help="lower aberration coefficient std in rad (default: desk scale for n)")
    p.add_argument("--sigma-hi", type=float, default=None)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = _Parser(prog="wavemo", description="Wavefront-modulation imaging toolkit.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    subs = {}

    p = sub.add_parser("simulate", help="capture a measurement stack of a scene")
    _common(p)
    _grid(p, 64)
    p.add_argument("--k", type=int, default=8, help="number of modulations")
    p.add_argument("--mods", default="random_zernike",
                   help=f"one of {', '.join(BASELINE_KINDS)}, or a modulation directory")
    p.add_argument("--noise", type=float, default=0.01, help="additive Gaussian noise std")
    p.add_argument("--scene", help="PFM/PGM scene file (default: procedural)")
    p.add_argument("--sweep-amp", type=float, default=6.0)
    subs["simulate"] = p

    p = sub.add_parser("learn", help="learn modulations end to end with the proxy")
    _common(p)
    _grid(p, 32)
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--iters", type=int, default=5000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--scene-dir", help="directory of PFM/PGM training scenes (default: procedural)")
    subs["learn"] = p

    p = sub.add_parser("reconstruct", help="blind iterative reconstruction of a stack")
    _common(p)
    p.add_argument("--stack", help="stack directory written by simulate")
    p.add_argument("--mods-dir", help="modulation directory (default: the one stored with the stack)")
    p.add_argument("--frac", type=float, default=0.5)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--step-scene", type=float, default=1e-2)
    p.add_argument("--step-coeffs", type=float, default=3e-2)
    p.add_argument("--tv", type=float, default=0.0, help="total-variation weight")
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--freeze-aberration", action="store_true")
    subs["reconstruct"] = p

    p = sub.add_parser("evaluate", help="score modulation kinds on held-out scenes")
    _common(p)
    _grid(p, 32)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--kinds", default="none,random_zernike,learned")
    p.add_argument("--learned", help="run directory written by learn")
    p.add_argument("--method", choices=("proxy", "iterative", "both"), default="proxy")
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--eval-seed", type=int, default=1000)
    p.add_argument("--train-iters", type=int, default=3000, help="proxy training for baseline kinds")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--recon-iters", type=int, default=2000)
    p.add_argument("--k-sweep", help="comma list of K values: random-modulation ablation")
    p.add_argument("--seeds", default="0,1,2", help="seeds for the K sweep")
    p.add_argument("--scene-dir")
    subs["evaluate"] = p

    p = sub.add_parser("mtf-report", help="radial combined-MTF profiles per modulation kind")
    _common(p)
    _grid(p, 32)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--kinds", default="none,random_zernike,learned")
    p.add_argument("--learned", help="run directory written by learn")
    p.add_argument("--aberration-samples", type=int, default=10)
    p.add_argument("--nbins", type=int, default=16)
    p.add_argument("--mtf-iters", type=int, default=200, help="iterations for the mtf_opt kind")
    subs["mtf-report"] = p

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient chain")
    _common(p)
    p.add_argument("--inject-bug", help=argparse.SUPPRESS)
    subs["gradcheck"] = p
    return parser, subs


def _apply_config(sub: argparse.ArgumentParser, path: str) -> None:
    try:
        entries = io.read_manifest(path)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in entries.items():
        dest = key.replace("-", "_")
        if dest not in actions or dest in ("config", "help"):
            raise UsageError(f"unknown config key {key!r} for {sub.prog}")
        action = actions[dest]
        if isinstance(action, argparse._StoreTrueAction):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key!r} expects a boolean, got {value!r}")
            defaults[dest] = value.lower() in ("true", "1", "yes")
        else:
            defaults[dest] = value  # string defaults go through the action's type
    sub.set_defaults(**defaults)


def parse_args(argv=None) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("a command is required: " + ", ".join(subs))
    if args.config:
        _apply_config(subs[args.command], args.config)
        args = parser.parse_args(argv)
    return args


# -- helpers ---------------------------------------------------------------

def _grid_setup(args):
    try:
        grid = GridSpec(args.n, args.frac)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from None
    lo, hi = desk_sigma_range(grid.n)
    lo = lo if args.sigma_lo is None else args.sigma_lo
    hi = hi if args.sigma_hi is None else args.sigma_hi
    if lo < 0 or hi < lo:
        raise ConfigurationError(f"invalid aberration sigma range ({lo}, {hi})")
    return grid, build_basis(grid), pupil_mask(grid), (lo, hi)


def _out_dir(args) -> Path:
    if not args.out:
        raise ConfigurationError("--out is required")
    return Path(args.out)


def _run_manifest(args, extra=None) -> dict:
    entries = {k: ("" if v is None else v) for k, v in sorted(vars(args).items())
               if k not in ("config", "verbose")}
    entries.update(extra or {})
    return entries


def _kind_rng(seed: int, kind: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(kind.encode())])


def _load_learned(args, basis):
    if not args.learned:
        raise FileNotFoundError("kind 'learned' needs --learned pointing at a learn run directory")
    d = Path(args.learned)
    if not (d / "modulations_manifest.txt").exists():
        raise FileNotFoundError(f"no learned modulations in {d}")
    mods = ModulationSet.load(d, basis)
    proxy = ProxyParams.load(d / "proxy") if (d / "proxy" / "proxy_manifest.txt").exists() else None
    if proxy is not None and proxy.weights.shape[-2:] != basis.grid.shape:
        raise ConfigurationError(f"learned proxy in {d} was trained on another grid size")
    return mods, proxy


# -- commands --------------------------------------------------------------

def cmd_simulate(args) -> int:
    grid, basis, mask, (lo, hi) = _grid_setup(args)
    out = _out_dir(args)
    if args.k < 1:
        raise ConfigurationError("--k must be >= 1")
    if args.noise < 0:
        raise ConfigurationError("--noise must be >= 0")
    mod_dir = None if args.mods in BASELINE_KINDS else Path(args.mods)
    if mod_dir is not None and not (mod_dir / "modulations_manifest.txt").exists():
        raise ConfigurationError(f"--mods must be one of {BASELINE_KINDS} or a modulation directory")
    scene = None
    if args.scene:
        scene = io.read_image(args.scene)
        if scene.shape != grid.shape:
            raise ConfigurationError(f"scene {scene.shape} does not match the {grid.n} px grid")
    mods = args.mods if mod_dir is None else ModulationSet.load(mod_dir, basis)
    stack = simulate_instance(basis, mask, mods, args.seed, args.noise, (lo, hi), scene,
                              K=args.k, sweep_amp=args.sweep_amp)
    stack.save(out)
    man = io.read_manifest(out / "manifest.txt")
    man.update({"command": "simulate", "frac": args.frac, "sigma_lo": lo, "sigma_hi": hi})
    io.write_manifest(out / "manifest.txt", man)
    print(f"wrote {stack.K} frames to {out}")
    return EXIT_OK


def cmd_learn(args) -> int:
    grid, basis, mask, sr = _grid_setup(args)
    out = _out_dir(args)
    try:
        cfg = TrainConfig(iterations=args.iters, learning_rate=args.lr, sigma_range=sr, K=args.k,
                          hidden=args.hidden, noise_sigma=args.noise, seed=args.seed,
                          batch_size=args.batch,
                          scene_source=SceneSource(grid.n, seed=args.seed, directory=args.scene_dir))
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from None
    mods, proxy, history = train_modulations(cfg, basis, mask)
    out.mkdir(parents=True, exist_ok=True)
    mods.save(out)
    proxy.save(out / "proxy")
    io.write_csv(out / "history.csv", ["iter", "loss", "eval_psnr"],
                 [(i, repr(float(l)), repr(float(p))) for i, l, p in history])
    io.write_manifest(out / "manifest.txt", _run_manifest(args, {
        "sigma_lo": sr[0], "sigma_hi": sr[1], "modulation_digest": mods.digest()}))
    if history:
        losses = np.array([h[1] for h in history])
        w = min(500, len(losses))
        print(f"moving-average loss: first {losses[:w].mean():.6g}, final {losses[-w:].mean():.6g}")
    else:
        print("zero iterations: wrote the initialization")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    if not args.stack:
        raise ConfigurationError("--stack is required")
    out = _out_dir(args)
    man = io.read_manifest(Path(args.stack) / "manifest.txt")
    frac = float(man.get("frac", args.frac))
    try:
        grid = GridSpec(int(man["n"]), frac)
        opts = ReconOptions(max_iters=args.iters, step_scene=args.step_scene,
                            step_coeffs=args.step_coeffs, tv_weight=args.tv,
                            restarts=args.restarts, fit_aberration=not args.freeze_aberration,
                            seed=args.seed)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from None
    basis = build_basis(grid)
    mask = pupil_mask(grid)
    mods = ModulationSet.load(args.mods_dir, basis) if args.mods_dir else None
    try:
        stack = MeasurementStack.load(args.stack, basis, modulations=mods)
    except ValueError as exc:
        raise ContractError(str(exc)) from None
    state = reconstruct(stack, mask, basis, opts)
    out.mkdir(parents=True, exist_ok=True)
    io.write_pfm(out / "scene_est.pfm", state.scene_est)
    io.write_pgm(out / "scene_est.pgm", state.scene_est)
    write_coeffs_csv(out / "aberration_est.csv", state.aber_coeffs)
    io.write_csv(out / "loss.csv", ["iter", "loss"],
                 [(i, repr(float(v))) for i, v in enumerate(state.loss_history)])
    entries = _run_manifest(args, {"final_loss": repr(state.loss_history[-1]),
                                   "iterations": state.iteration})
    if stack.scene_truth is not None:
        p, s = score(state.scene_est, stack.scene_truth, align=True)
        entries.update({"psnr": f"{p:.4f}", "ssim": f"{s:.5f}"})
        print(f"psnr={p:.3f} dB ssim={s:.4f} (after translation registration)")
    else:
        print(f"final loss {state.loss_history[-1]:.6g}")
    io.write_manifest(out / "manifest.txt", entries)
    return EXIT_OK


def _eval_kind_job(job):
    """One modulation kind: build or load the set, train a proxy if needed, score."""
    args, kind = job
    grid, basis, mask, sr = _grid_setup(args)
    proxy = None
    if kind == "learned":
        mods, proxy = _load_learned(args, basis)
    else:
        mods = generate_baseline(kind, args.k, basis, _kind_rng(args.seed, kind), sigma_lo=sr[0], sigma_hi=sr[1])
    data = held_out_set(basis, args.scenes, args.eval_seed, sr, args.scene_dir)
    reports = {}
    if args.method in ("proxy", "both"):
        if proxy is None:
            opts = ProxyTrainOptions(iterations=args.train_iters, learning_rate=args.lr,
                                     sigma_lo=sr[0], sigma_hi=sr[1], noise_sigma=args.noise, seed=args.seed)
            proxy, _ = fit_proxy(SceneSource(grid.n, seed=args.seed, directory=args.scene_dir),
                                 mods, mask, basis, opts)
        reports["proxy"] = evaluate_proxy(mods, proxy, data, mask, args.noise, seed=args.eval_seed)
    if args.method in ("iterative", "both"):
        if mods.K < 2:
            reports["iterative"] = MetricReport()  # a single frame cannot be inverted blind
        else:
            opts = ReconOptions(max_iters=args.recon_iters, seed=args.seed)
            reports["iterative"] = evaluate_iterative(mods, data, mask, basis, args.noise, opts,
                                                      seed=args.eval_seed)
    return kind, reports


def _ksweep_job(job):
    args, seed, K = job
    grid, basis, mask, sr = _grid_setup(args)
    full = generate_baseline("random_zernike", max(_int_list(args.k_sweep)), basis,
                             _kind_rng(seed, "random_zernike"), sigma_lo=sr[0], sigma_hi=sr[1])
    mods = ModulationSet.from_coeffs(basis, full.coeffs[:K], "random_zernike")
    opts = ProxyTrainOptions(iterations=args.train_iters, learning_rate=args.lr,
                             sigma_lo=sr[0], sigma_hi=sr[1], noise_sigma=args.noise, seed=seed)
    proxy, _ = fit_proxy(SceneSource(grid.n, seed=seed, directory=args.scene_dir), mods, mask, basis, opts)
    data = held_out_set(basis, args.scenes, args.eval_seed, sr, args.scene_dir)
    return seed, K, evaluate_proxy(mods, proxy, data, mask, args.noise, seed=args.eval_seed)


def cmd_evaluate(args) -> int:
    _grid_setup(args)
    out = _out_dir(args)
    if args.scenes < 1:
        raise ConfigurationError("--scenes must be >= 1")
    if args.k_sweep:
        ks = _int_list(args.k_sweep)
        seeds = _int_list(args.seeds)
        if not ks or min(ks) < 1 or not seeds:
            raise ConfigurationError("--k-sweep and --seeds need positive entries")
        results = _fan_out(_ksweep_job, [(args, s, K) for s in seeds for K in ks])
        out.mkdir(parents=True, exist_ok=True)
        rows = [(s, K, f"{r.mean_psnr:.4f}", f"{r.mean_ssim:.5f}") for s, K, r in results]
        io.write_csv(out / "ksweep_runs.csv", ["seed", "K", "psnr", "ssim"], rows)
        summary = []
        for K in ks:
            m, sd = aggregate([r.mean_psnr for s, k, r in results if k == K])
            summary.append((K, f"{m:.4f}", f"{sd:.4f}"))
            print(f"K={K}: mean psnr {m:.3f} dB (sd {sd:.3f}) over {len(seeds)} seeds")
        io.write_csv(out / "ksweep.csv", ["K", "psnr_mean", "psnr_sd"], summary)
        io.write_manifest(out / "manifest.txt", _run_manifest(args, {"command": "evaluate"}))
        return EXIT_OK

    kinds = _csv_list(args.kinds)
    if not kinds:
        raise ConfigurationError("--kinds is empty")
    for kind in kinds:
        if kind != "learned" and kind not in BASELINE_KINDS:
            raise ConfigurationError(f"unknown modulation kind {kind!r}")
    if "learned" in kinds:
        _load_learned(args, build_basis(GridSpec(args.n, args.frac)))
    results = _fan_out(_eval_kind_job, [(args, k) for k in kinds])
    tables = {}
    for kind, reports in results:
        for method, rep in reports.items():
            tables.setdefault(method, {})[kind] = rep
    out.mkdir(parents=True, exist_ok=True)
    write_table_csv(out / "table.csv", tables)
    items = [(method, kind, item, f"{p:.4f}", f"{s:.5f}")
             for method, by_kind in tables.items() for kind, rep in by_kind.items()
             for item, p, s in rep.per_item]
    io.write_csv(out / "per_item.csv", ["method", "kind", "scene", "psnr", "ssim"], items)
    io.write_manifest(out / "manifest.txt", _run_manifest(args, {"command": "evaluate"}))
    for method, by_kind in tables.items():
        for kind, rep in by_kind.items():
            if rep.per_item:
                print(f"{method:9s} {kind:15s} psnr {rep.mean_psnr:.3f} ({rep.sd_psnr:.3f}) "
                      f"ssim {rep.mean_ssim:.4f} ({rep.sd_ssim:.4f})")
            else:
                print(f"{method:9s} {kind:15s} N/A")
    return EXIT_OK


def cmd_mtf_report(args) -> int:
    grid, basis, mask, sr = _grid_setup(args)
    out = _out_dir(args)
    if args.aberration_samples < 1:
        raise ConfigurationError("--aberration-samples must be >= 1")
    kinds = _csv_list(args.kinds)
    if not kinds:
        raise ConfigurationError("--kinds is empty")
    for kind in kinds:
        if kind not in BASELINE_KINDS + ("learned", "mtf_opt"):
            raise ConfigurationError(f"unknown modulation kind {kind!r}")
    sets = {}
    if "learned" in kinds:
        sets["learned"] = _load_learned(args, basis)[0]
    rng = np.random.default_rng(args.seed)
    samples = [sample_aberration(rng, basis, *sr) for _ in range(args.aberration_samples)]
    phases = np.stack([compose_phase(basis, s.coeffs) for s in samples])
    for kind in kinds:
        if kind == "mtf_opt":
            sets[kind] = mtf_direct_opt(args.k, basis, mask, samples, args.mtf_iters,
                                        _kind_rng(args.seed, kind), init_sigma=sr)
        elif kind != "learned":
            sets[kind] = generate_baseline(kind, args.k, basis, _kind_rng(args.seed, kind),
                                           sigma_lo=sr[0], sigma_hi=sr[1])
    out.mkdir(parents=True, exist_ok=True)
    columns = {}
    for kind in kinds:
        centres, prof = mean_mtf_profile(sets[kind], mask, phases, args.nbins)
        write_profile_csv(out / f"mtf_{kind}.csv", centres, {f"mtf_{kind}": prof})
        columns[f"mtf_{kind}"] = prof
        print(f"{kind:15s} upper-half mean MTF {upper_half_mean(prof):.6f}")
    write_profile_csv(out / "mtf_comparison.csv", centres, columns)
    io.write_manifest(out / "manifest.txt", _run_manifest(args, {"sigma_lo": sr[0], "sigma_hi": sr[1]}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from wavemo.gradcheck import CHAINS, run_all

    if args.inject_bug and args.inject_bug not in CHAINS:
        raise ConfigurationError(f"unknown chain {args.inject_bug!r}")
    results = run_all(inject=args.inject_bug)
    print(f"{'chain':18s} {'rel. error':>12s} {'threshold':>10s}")
    for r in results:
        print(f"{r.chain:18s} {r.error:12.3e} {r.threshold:10.0e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.chain for r in results if not r.passed]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        io.write_csv(out / "gradcheck.csv", ["chain", "error", "threshold"],
                     [(r.chain, f"{r.error:.6e}", r.threshold) for r in results])
        io.write_manifest(out / "manifest.txt", _run_manifest(args))
    if failed:
        print("gradient check failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "learn": cmd_learn,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "mtf-report": cmd_mtf_report,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, UnderdeterminedError, ContractError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
