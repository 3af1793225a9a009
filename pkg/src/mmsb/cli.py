"""Command-line interface: ``mmsb generate|fit|select|predict|eval|oracle``.

Every command writes its artifacts and a ``manifest.json`` into
``--out-dir``.  The manifest records the argument vector, the resolved
options, SHA-256 hashes of the inputs and outputs, the wall time and the
package version, which is enough to rerun the command.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .estimation import FitConfig, FitError, FitResult, fit
from .evaluation import (PHI_BASED, PI_BASED, PredictionMatrix, align_memberships,
                         exact_loglik_bruteforce, precision_recall, predict_matrix)
from .genmodel import Hyperparams, sample_network
from .inference import TERM_NAMES, VariationalState
from .netdata import (EXCLUDED, INCLUDED, InputError, NetworkSet, load_masks, load_network,
                      save_masks, save_network, split_folds)
from .selection import BIC, CV, select_k

logger = logging.getLogger("mmsb")

FORMATS = {"dense_csv": ".csv", "edge_list_tsv": ".tsv"}
BOUND_SLACK = 1e-9


class CommandError(RuntimeError):
    pass


# -- helpers -------------------------------------------------------------------------


def sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _write_json(path: Path, payload) -> Path:
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path


def _write_manifest(args, out_dir: Path, inputs: list, outputs: dict, options: dict,
                    wall_time: float) -> Path:
    manifest = {
        "command": args.command,
        "argv": args.argv,
        "options": options,
        "seed": args.seed,
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": {name: {"path": str(p), "sha256": sha256(p)} for name, p in outputs.items()},
        "wall_time_s": wall_time,
        "version": __version__,
    }
    return _write_json(out_dir / "manifest.json", manifest)


def _load_networks(paths, fmt: str, diagonal: str) -> NetworkSet:
    nets = tuple(load_network(p, fmt, diagonal) for p in paths)
    sizes = {n.n_nodes for n in nets}
    if len(sizes) != 1:
        raise InputError(f"replicates have different sizes: {sorted(sizes)}")
    return NetworkSet(nets)


def _parse_alpha(text: str | None):
    if text is None:
        return None
    values = [float(v) for v in text.split(",")]
    return values[0] if len(values) == 1 else values


def _parse_block(text: str, k: int) -> np.ndarray:
    """``identity``, ``identity:<b>``, ``const:<b>`` or a JSON file with a K x K matrix."""
    if text == "identity" or text.startswith("identity:"):
        scale = float(text.split(":", 1)[1]) if ":" in text else 1.0
        return scale * np.eye(k)
    if text.startswith("const:"):
        return np.full((k, k), float(text.split(":", 1)[1]))
    payload = json.loads(Path(text).read_text())
    B = np.asarray(payload["B"] if isinstance(payload, dict) else payload, dtype=float)
    if B.shape != (k, k):
        raise InputError(f"block matrix in {text} is {B.shape}, expected {(k, k)}")
    return B


def _fit_config(args, k: int) -> FitConfig:
    base = {}
    if getattr(args, "config", None):
        base = json.loads(Path(args.config).read_text())
    base["k_groups"] = k
    base["seed"] = args.seed
    base["threads"] = args.threads
    flag_map = {"schedule": "schedule", "max_em_iters": "max_em_iters", "em_tol": "em_tol",
                "estep_tol": "estep_tol", "max_estep_sweeps": "max_estep_sweeps",
                "rho_mode": "rho_mode", "rho": "rho_value", "init": "init",
                "jitter": "jitter", "n_init": "n_init"}
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            base[key] = value
    if args.rho is not None and args.rho_mode is None:
        base["rho_mode"] = "fixed_value"
    if args.alpha_fixed is not None:
        base["alpha_mode"] = "fixed"
        base["alpha_value"] = _parse_alpha(args.alpha_fixed)
    elif args.alpha_scalar:
        base["alpha_mode"] = "estimate_scalar_symmetric"
    if args.alpha_init is not None:
        base["alpha_value"] = _parse_alpha(args.alpha_init)
    if args.b_fixed is not None:
        base["b_mode"] = "fixed"
        base["b_value"] = _parse_block(args.b_fixed, k).tolist()
    if args.retain_phi:
        base["retain_phi"] = True
    return FitConfig.from_dict(base)


def _save_elbo_csv(result: FitResult, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "total", *TERM_NAMES])
        for i, (total, terms) in enumerate(zip(result.elbo_trace, result.term_trace), start=1):
            w.writerow([i, repr(float(total)), *(repr(float(terms[t])) for t in TERM_NAMES)])


def _save_state(result: FitResult, out_dir: Path) -> dict:
    outputs = {"state": _write_json(out_dir / "state.json",
                                    {"gamma": result.state.gamma.tolist()})}
    if result.state.has_phi:
        path = out_dir / "state_phi.npz"
        with open(path, "wb") as fh:
            np.savez_compressed(fh, phi_out=result.state.phi_out, phi_in=result.state.phi_in,
                                pairs=result.phi_pairs)
        outputs["state_phi"] = path
    return outputs


# -- commands ------------------------------------------------------------------------


def cmd_generate(args, out_dir: Path):
    K = args.k
    if args.b_file:
        B = _parse_block(args.b_file, K)
    else:
        B = np.full((K, K), args.b_off) + np.eye(K) * (args.b - args.b_off)
    hyper = Hyperparams(K, _parse_alpha(args.alpha), B, args.rho)
    nets, truth = sample_network(hyper, args.n, args.replicates, args.seed, args.diagonal,
                                 symmetric=args.symmetric)
    ext = FORMATS[args.format]
    outputs = {}
    for m, net in enumerate(nets.replicates):
        name = "network" if nets.n_replicates == 1 else f"network_r{m}"
        path = out_dir / f"{name}{ext}"
        save_network(net, path, args.format)
        outputs[name] = path
    hyper.save(out_dir / "hyperparams.json")
    truth.save(out_dir / "truth.json", out_dir / "indicators.npz")
    outputs.update(hyperparams=out_dir / "hyperparams.json", truth=out_dir / "truth.json",
                   indicators=out_dir / "indicators.npz")
    options = {"n": args.n, "k": K, "alpha": hyper.alpha.tolist(), "B": B.tolist(),
               "rho": args.rho, "replicates": args.replicates, "diagonal": args.diagonal,
               "symmetric": args.symmetric, "format": args.format}
    return [], outputs, options


def _exclusion(args):
    if args.mask is None:
        return None
    masks = load_masks(args.mask)
    if not 0 <= args.fold < len(masks):
        raise InputError(f"fold {args.fold} outside the {len(masks)} folds in {args.mask}")
    return masks[args.fold]


def cmd_fit(args, out_dir: Path):
    data = _load_networks(args.network, args.format, args.diagonal)
    config = _fit_config(args, args.k)
    result = fit(data, config, exclude=_exclusion(args))
    outputs = {"fit": out_dir / "fit.json", "elbo": out_dir / "elbo.csv"}
    result.save(outputs["fit"])
    _save_elbo_csv(result, outputs["elbo"])
    outputs.update(_save_state(result, out_dir))
    if not result.converged:
        logger.warning("EM stopped after %d iterations without converging", result.iterations)
    inputs = list(args.network) + ([args.mask] if args.mask else [])
    return inputs, outputs, {"config": config.to_dict(), "mask_fold": args.fold if args.mask else None}


def cmd_select(args, out_dir: Path):
    data = _load_networks(args.network, args.format, args.diagonal)
    if args.k_min > args.k_max:
        raise InputError("--k-min exceeds --k-max")
    config = _fit_config(args, args.k_min)
    report = select_k(data, range(args.k_min, args.k_max + 1), args.criterion, args.folds,
                      args.seed, config, jobs=args.jobs)
    outputs = {"report": out_dir / "selection.json", "curve": out_dir / "selection_curve.csv"}
    report.save_json(outputs["report"])
    report.save_csv(outputs["curve"])
    if args.criterion == CV:
        outputs["folds"] = out_dir / "folds.json"
        save_masks(split_folds(data.replicates[0], args.folds, args.seed), outputs["folds"])
    if report.chosen_k is None:
        raise CommandError("every candidate fit failed; see selection.json")
    options = {"k_min": args.k_min, "k_max": args.k_max, "criterion": args.criterion,
               "folds": args.folds, "config": config.to_dict()}
    return list(args.network), outputs, options


def _load_fit(path: str, state_path: str | None) -> FitResult:
    result = FitResult.load(path)
    if state_path:
        with np.load(state_path) as npz:
            result.state = VariationalState(result.state.gamma, npz["phi_out"], npz["phi_in"])
            result.phi_pairs = npz["pairs"]
    return result


def cmd_predict(args, out_dir: Path):
    mode = PHI_BASED if args.mode == "phi" else PI_BASED
    result = _load_fit(args.fit, args.state)
    pred = predict_matrix(result, mode)
    outputs = {"predictions": out_dir / "predictions.csv"}
    pred.save_csv(outputs["predictions"])
    inputs = [args.fit] + ([args.state] if args.state else [])
    return inputs, outputs, {"mode": mode}


def cmd_eval(args, out_dir: Path):
    inputs, outputs, summary = [], {}, {}
    if args.pr:
        if not (args.predictions and args.reference):
            raise InputError("--pr needs --predictions and --reference")
        probs = np.loadtxt(args.predictions, delimiter=",", ndmin=2)
        reference = load_network(args.reference, args.format, args.diagonal)
        curve = precision_recall(PredictionMatrix(probs, "file"), reference)
        outputs["pr_curve"] = out_dir / "pr_curve.csv"
        curve.save_csv(outputs["pr_curve"])
        summary["pr_area"] = curve.area
        inputs += [args.predictions, args.reference]
    if args.truth:
        if not args.fit:
            raise InputError("--truth needs --fit")
        est = FitResult.load(args.fit).pi_hat
        truth = np.asarray(json.loads(Path(args.truth).read_text())["pi"], dtype=float)
        alignment = align_memberships(est, truth)
        outputs["alignment"] = out_dir / "alignment.json"
        alignment.save(outputs["alignment"])
        summary.update(ari=alignment.ari, accuracy=alignment.accuracy)
        inputs += [args.fit, args.truth]
    if args.oracle:
        if not args.fit:
            raise InputError("--oracle needs --fit")
        oracle = json.loads(Path(args.oracle).read_text())
        result = FitResult.load(args.fit)
        o_hyper = Hyperparams.from_dict(oracle["hyper"])
        if not (np.allclose(o_hyper.alpha, result.hyper_hat.alpha, rtol=0, atol=1e-12)
                and np.allclose(o_hyper.block_matrix, result.hyper_hat.block_matrix, rtol=0, atol=1e-12)
                and abs(o_hyper.rho - result.hyper_hat.rho) <= 1e-12):
            raise InputError("the oracle was evaluated at different hyperparameters than the fit")
        holds = result.final_elbo <= oracle["loglik"] + BOUND_SLACK
        summary.update(elbo=result.final_elbo, exact_loglik=oracle["loglik"], bound_holds=bool(holds))
        inputs += [args.fit, args.oracle]
    if not summary:
        raise InputError("nothing to evaluate: pass --pr, --truth or --oracle")
    outputs["summary"] = _write_json(out_dir / "eval.json", summary)
    if args.oracle and not summary["bound_holds"]:
        raise CommandError(f"bound violated: elbo {summary['elbo']} > exact {summary['exact_loglik']}")
    return inputs, outputs, {"pr": args.pr, "truth": args.truth, "oracle": args.oracle}


def cmd_oracle(args, out_dir: Path):
    data = _load_networks(args.network, args.format, args.diagonal)
    hyper = Hyperparams.from_dict(json.loads(Path(args.hyper).read_text()))
    value = exact_loglik_bruteforce(data, hyper)
    outputs = {"oracle": _write_json(out_dir / "oracle.json",
                                     {"loglik": value, "hyper": hyper.to_dict()})}
    return list(args.network) + [args.hyper], outputs, {}


# -- parser --------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="1 is the deterministic reference")
    p.add_argument("--out-dir", default=".", help="directory for outputs and manifest.json")
    p.add_argument("--format", choices=sorted(FORMATS), default="dense_csv",
                   help="network file format")
    p.add_argument("--diagonal", choices=(EXCLUDED, INCLUDED), default=EXCLUDED,
                   help="whether self-pairs are modeled")
    p.add_argument("-v", "--verbose", action="store_true")


def _fit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--network", nargs="+", required=True, help="one file per replicate")
    p.add_argument("--config", help="JSON file of fit options; flags override it")
    p.add_argument("--schedule", choices=("nested", "naive"))
    p.add_argument("--max-em-iters", type=int)
    p.add_argument("--em-tol", type=float)
    p.add_argument("--estep-tol", type=float)
    p.add_argument("--max-estep-sweeps", type=int)
    p.add_argument("--rho-mode", choices=("estimate", "fixed_from_density", "fixed_value"))
    p.add_argument("--rho", type=float, help="value for --rho-mode fixed_value")
    p.add_argument("--alpha-scalar", action="store_true",
                   help="estimate one symmetric concentration")
    p.add_argument("--alpha-fixed", help="fixed concentration, scalar or comma list")
    p.add_argument("--alpha-init", help="Newton starting point, scalar or comma list")
    p.add_argument("--b-fixed", help="identity, identity:<b>, const:<b> or a JSON matrix file")
    p.add_argument("--init", choices=("spectral", "uniform"))
    p.add_argument("--jitter", type=float)
    p.add_argument("--n-init", type=int)
    p.add_argument("--retain-phi", action="store_true",
                   help="keep per-pair distributions (needed for --mode phi)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmsb", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample networks from the model")
    _common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--alpha", default="0.05", help="scalar or comma list")
    p.add_argument("--b", type=float, default=0.3, help="within-group rate")
    p.add_argument("--b-off", type=float, default=0.01, help="between-group rate")
    p.add_argument("--b-file", help="JSON K x K block matrix; overrides --b/--b-off")
    p.add_argument("--rho", type=float, default=0.0)
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--symmetric", action="store_true")
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("fit", help="variational EM")
    _common(p)
    _fit_flags(p)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--mask", help="folds JSON; the fold given by --fold is held out")
    p.add_argument("--fold", type=int, default=0)
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("select", help="choose K by BIC or cross-validation")
    _common(p)
    _fit_flags(p)
    p.add_argument("--k-min", type=int, required=True)
    p.add_argument("--k-max", type=int, required=True)
    p.add_argument("--criterion", choices=(BIC, CV), default=CV)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--jobs", type=int, default=1, help="fits run concurrently")
    p.set_defaults(handler=cmd_select)

    p = sub.add_parser("predict", help="posterior edge probabilities")
    _common(p)
    p.add_argument("--fit", required=True)
    p.add_argument("--mode", choices=("pi", "phi"), default="pi")
    p.add_argument("--state", help="state_phi.npz written by fit --retain-phi")
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("eval", help="precision-recall, membership recovery, bound check")
    _common(p)
    p.add_argument("--pr", action="store_true")
    p.add_argument("--predictions")
    p.add_argument("--reference")
    p.add_argument("--fit")
    p.add_argument("--truth", help="truth.json written by generate")
    p.add_argument("--oracle", help="oracle.json written by the oracle command")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("oracle", help="exact log-likelihood of a tiny network")
    _common(p)
    p.add_argument("--network", nargs="+", required=True)
    p.add_argument("--hyper", required=True, help="hyperparams.json or fit.json")
    p.set_defaults(handler=cmd_oracle)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        inputs, outputs, options = args.handler(args, out_dir)
    except (InputError, FitError, CommandError, ValueError, OSError, KeyError) as exc:
        print(f"mmsb {args.command}: error: {exc}", file=sys.stderr)
        return 1
    _write_manifest(args, out_dir, inputs, outputs, options, time.perf_counter() - start)
    return 0


if __name__ == "__main__":
    sys.exit(main())
