"""Command-line pipeline: gen-codebook | fit | decode | sweep | optimize | simulate.

Every run resolves its configuration (defaults < --config JSON < explicit
flags), executes one pipeline stage, and writes a ``run_manifest.json``
recording the resolved configuration plus SHA-256 digests of all inputs and
outputs. Re-running a stage from its manifest (``--config run_manifest.json``)
reproduces the outputs byte for byte at any thread count.

Exit codes: 0 success, 2 usage/input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import assignopt, channel, codebook, decoder, gmmfit
from .errors import InputError, NumericalError


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(directory, command: str, config: dict, inputs, outputs) -> None:
    manifest = {
        "tool": "mfishcode",
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
    }
    path = Path(directory) / "run_manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_config_file(path) -> dict:
    with open(path) as fh:
        payload = json.load(fh)
    if not isinstance(payload, dict):
        raise InputError(f"{path}: config must be a JSON object")
    if "config" in payload and "tool" in payload:
        payload = payload["config"]  # a previous run's manifest
    return payload


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge defaults, config-file values, and explicit flags (flags win)."""
    file_values = _load_config_file(args.config) if args.config else {}
    resolved = {}
    for key, default in defaults.items():
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            resolved[key] = flag_value
        elif key in file_values and file_values[key] is not None:
            resolved[key] = file_values[key]
        else:
            resolved[key] = default
    return resolved


def _threads(value) -> int:
    return int(value) if value else (os.cpu_count() or 1)


def _load_assignment(cfg, molecule_names) -> codebook.AssignmentMap:
    if cfg.get("assignment"):
        return codebook.load_assignment_tsv(
            cfg["assignment"], molecule_names=molecule_names
        )
    if cfg.get("codebook") and cfg.get("assign_seed") is not None:
        _, book = codebook.load_codebook_tsv(cfg["codebook"])
        return codebook.random_assignment(
            book,
            len(molecule_names),
            int(cfg["assign_seed"]),
            tuple(molecule_names),
        )
    raise InputError("need --assignment, or --codebook together with --assign-seed")


def _bac_from_config(cfg, assignment, prior):
    params, bac = channel.load_params_json(cfg["params"])
    if bac is None:
        thresholds = channel.quantization_thresholds(params, assignment, prior)
        bac = channel.bac_from_gaussian(params, thresholds)
    return params, bac


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_codebook(args) -> int:
    cfg = _resolve(args, {"out": "codebook.tsv"})
    book = codebook.generate_mhd4()
    out = Path(cfg["out"])
    codebook.save_codebook_tsv(out, book)
    report = codebook.validate(book)
    print(
        f"wrote {book.size} codewords (length {book.length}, "
        f"min distance {report.min_distance}, constant weight "
        f"{report.constant_weight}) to {out}"
    )
    _write_manifest(out.parent, "gen-codebook", cfg, [], [out])
    return 0


def cmd_fit(args) -> int:
    cfg = _resolve(
        args,
        {
            "intensities": None,
            "out_params": "params.json",
            "diagnostics": None,
            "grid_size": 99,
            "tol": 1e-8,
            "max_iter": 500,
            "sigma_floor": 1e-3,
            "restarts": 0,
            "assignment": None,
            "codebook": None,
            "prior": None,
            "assign_seed": None,
            "seed": 0,
            "threads": None,
        },
    )
    if not cfg["intensities"]:
        raise InputError("fit needs --intensities")
    table = channel.load_intensity_csv(cfg["intensities"])
    em_config = gmmfit.EmConfig(
        tol=float(cfg["tol"]),
        max_iter=int(cfg["max_iter"]),
        sigma_floor=float(cfg["sigma_floor"]),
        restarts=int(cfg["restarts"]),
        seed=int(cfg["seed"]),
    )
    result = gmmfit.fit_all(table, em_config, n_threads=_threads(cfg["threads"]))
    params = result.params
    bac = None
    if cfg["prior"]:
        names, prior = codebook.load_prior_csv(cfg["prior"])
        assignment = _load_assignment(cfg, names)
        thresholds = channel.quantization_thresholds(params, assignment, prior)
        bac = channel.bac_from_gaussian(params, thresholds)
    out_params = Path(cfg["out_params"])
    channel.save_params_json(out_params, params, bac)
    outputs = [out_params]
    if cfg["diagnostics"]:
        diag = [
            gmmfit.qq_data(table.intensities[:, l], fit, int(cfg["grid_size"]))
            for l, fit in enumerate(result.column_fits)
        ]
        gmmfit.save_diagnostics_csv(cfg["diagnostics"], diag)
        outputs.append(Path(cfg["diagnostics"]))
    flagged = [
        (l + 1, flags) for l, flags in enumerate(result.flags) if flags
    ]
    print(f"fitted {table.length} columns from {table.n_rows} rows")
    for round_no, flags in flagged:
        print(f"  round {round_no}: {', '.join(flags)}")
    inputs = [cfg["intensities"]] + [
        cfg[k] for k in ("prior", "assignment", "codebook") if cfg.get(k)
    ]
    _write_manifest(out_params.parent, "fit", cfg, inputs, outputs)
    return 0


def _decode_spec(cfg, prior) -> decoder.DecoderSpec:
    kind = str(cfg["kind"]).lower()
    if kind == "mapq" or (kind == "map" and cfg.get("q") is not None and float(cfg["q"]) > 0):
        return decoder.DecoderSpec(kind="mapq", q=float(cfg["q"]), omega=prior.probs)
    if kind == "map":
        return decoder.DecoderSpec.map_prior(prior)
    if kind == "mle":
        return decoder.DecoderSpec.mle()
    if kind == "moffitt":
        return decoder.DecoderSpec.moffitt(cfg.get("moffitt_rule") or "distance")
    raise InputError(f"unknown decoder kind {cfg['kind']!r}")


def cmd_decode(args) -> int:
    cfg = _resolve(
        args,
        {
            "prior": None,
            "params": None,
            "assignment": None,
            "codebook": None,
            "assign_seed": None,
            "data": None,
            "kind": "map",
            "q": None,
            "moffitt_rule": "distance",
            "out_dir": "decode_out",
            "seed": 0,
            "threads": None,
        },
    )
    if not cfg["prior"] or not cfg["params"]:
        raise InputError("decode needs --prior and --params")
    names, prior = codebook.load_prior_csv(cfg["prior"])
    assignment = _load_assignment(cfg, names)
    params, bac = _bac_from_config(cfg, assignment, prior)
    spec = _decode_spec(cfg, prior)
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    n_threads = _threads(cfg["threads"])

    table = channel.likelihood_table(assignment.codebook, bac)
    voronoi = decoder.build_voronoi(
        spec, assignment, bac=bac, table=table, n_threads=n_threads
    )
    if spec.kind == "moffitt":
        share = voronoi.accepted_count / voronoi.decode.size
        print(
            f"moffitt acceptance region: {voronoi.accepted_count} of "
            f"{voronoi.decode.size} sequences ({100.0 * share:.3f}%)"
        )
    conf = decoder.confusion(voronoi, assignment, prior, table=table)
    met = decoder.metrics(conf, prior)
    metrics_path = out_dir / "metrics.json"
    decoder.save_metrics_json(metrics_path, conf, met, names)
    outputs = [metrics_path]
    inputs = [cfg["prior"], cfg["params"]] + [
        cfg[k] for k in ("assignment", "codebook", "data") if cfg.get(k)
    ]

    if cfg["data"]:
        data = channel.load_intensity_csv(cfg["data"], molecule_names=names)
        if bac.theta is None:
            raise InputError("params file lacks thresholds; rerun fit with a prior")
        words = channel.quantize(data, bac.theta)
        decoded = decoder.decode_table(voronoi, words)
        post_spec = spec if spec.kind != "moffitt" else decoder.DecoderSpec.mle()
        omega = decoder.resolve_omega(post_spec, assignment.n_molecules)
        cols = table.column_index(assignment.codewords)
        scores = table.loglik[:, cols] + np.log(omega)[None, :]
        from scipy.special import logsumexp

        win = np.exp(scores.max(axis=1) - logsumexp(scores, axis=1))
        decoded_path = out_dir / "decoded.csv"
        with open(decoded_path, "w", newline="") as fh:
            fh.write("row,decoded_molecule,posterior,rejected\n")
            for i, (word, mol) in enumerate(zip(words, decoded)):
                name = names[mol] if mol != decoder.REJECT else ""
                fh.write(f"{i},{name},{float(win[word])!r},{int(mol == decoder.REJECT)}\n")
        outputs.append(decoded_path)
        n_rej = int((decoded == decoder.REJECT).sum())
        print(f"decoded {data.n_rows} rows ({n_rej} rejected) -> {decoded_path}")
        if data.truth is not None:
            accepted = decoded != decoder.REJECT
            n_acc = int(accepted.sum())
            correct = int((decoded[accepted] == data.truth[accepted]).sum())
            rate = correct / n_acc if n_acc else float("nan")
            print(f"empirical accuracy on accepted rows: {correct}/{n_acc} = {rate:.4f}")
    print(
        f"decoder {spec.label()}: mean FDR {met.mean_fdr!r}, "
        f"rejection rate {met.rejection_rate!r}"
    )
    _write_manifest(out_dir, "decode", cfg, inputs, outputs)
    return 0


def cmd_sweep(args) -> int:
    cfg = _resolve(
        args,
        {
            "codebook": None,
            "params": None,
            "molecules": 140,
            "alpha_grid": "0.001,0.01,0.1,1,10,100,1000",
            "draws": 10,
            "decoders": "map,mle",
            "assignment_policy": "per_draw",
            "out_dir": "sweep_out",
            "seed": 0,
            "threads": None,
        },
    )
    if not cfg["codebook"] or not cfg["params"]:
        raise InputError("sweep needs --codebook and --params")
    _, book = codebook.load_codebook_tsv(cfg["codebook"])
    _, bac = channel.load_params_json(cfg["params"])
    if bac is None:
        raise InputError(
            f"{cfg['params']}: sweep needs p01/p10 arrays (run fit with a prior)"
        )
    alphas = [float(a) for a in str(cfg["alpha_grid"]).split(",") if a]
    kinds = [k for k in str(cfg["decoders"]).split(",") if k]
    report = decoder.dirichlet_sweep(
        alphas,
        int(cfg["draws"]),
        kinds,
        book,
        int(cfg["molecules"]),
        bac,
        int(cfg["seed"]),
        assignment_policy=cfg["assignment_policy"],
        n_threads=_threads(cfg["threads"]),
    )
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    out_csv = out_dir / "sweep.csv"
    report.save_summary_csv(out_csv)
    print(f"wrote {len(report.summary_rows())} summary rows to {out_csv}")
    _write_manifest(out_dir, "sweep", cfg, [cfg["codebook"], cfg["params"]], [out_csv])
    return 0


def cmd_optimize(args) -> int:
    cfg = _resolve(
        args,
        {
            "codebook": None,
            "prior": None,
            "params": None,
            "assignment": None,
            "assign_seed": 0,
            "population": 64,
            "generations": 50,
            "mutation_prob": 0.05,
            "decoder": "map",
            "swap_pool": "all_codes",
            "out_dir": "optimize_out",
            "seed": 0,
            "threads": None,
        },
    )
    if not cfg["codebook"] or not cfg["prior"] or not cfg["params"]:
        raise InputError("optimize needs --codebook, --prior and --params")
    names, prior = codebook.load_prior_csv(cfg["prior"])
    _, book = codebook.load_codebook_tsv(cfg["codebook"])
    seed_assignment = codebook.random_assignment(
        book, len(names), int(cfg["assign_seed"]), tuple(names)
    )
    _, bac = channel.load_params_json(cfg["params"])
    if bac is None:
        params, _ = channel.load_params_json(cfg["params"])
        thresholds = channel.quantization_thresholds(params, seed_assignment, prior)
        bac = channel.bac_from_gaussian(params, thresholds)
    evo = assignopt.EvoConfig(
        population_size=int(cfg["population"]),
        mutation_prob=float(cfg["mutation_prob"]),
        generations=int(cfg["generations"]),
        seed=int(cfg["seed"]),
        decoder=cfg["decoder"],
        swap_pool=cfg["swap_pool"],
        n_threads=_threads(cfg["threads"]),
    )
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "evolution.csv"
    # The report is flushed per generation so an interrupted run still leaves
    # a valid prefix on disk.
    with open(report_path, "w", newline="") as fh:
        fh.write("generation,best_fdr,mean_fdr,mean_chi\n")
        fh.flush()

        def record(gen, best, mean, chi):
            fh.write(f"{gen},{best!r},{mean!r},{chi!r}\n")
            fh.flush()

        history = assignopt.evolve(evo, prior, bac, book, tuple(names), on_generation=record)
    best_path = out_dir / "best_assignment.tsv"
    codebook.save_assignment_tsv(best_path, history.best)
    print(
        f"evolved {evo.generations} generations: best mean FDR "
        f"{float(history.best_fdr[0])!r} -> {float(history.best_fdr[-1])!r}"
    )
    _write_manifest(
        out_dir,
        "optimize",
        cfg,
        [cfg["codebook"], cfg["prior"], cfg["params"]],
        [report_path, best_path],
    )
    return 0


def cmd_simulate(args) -> int:
    cfg = _resolve(
        args,
        {
            "prior": None,
            "params": None,
            "assignment": None,
            "codebook": None,
            "assign_seed": None,
            "n": 250000,
            "out": "intensities.csv",
            "seed": 0,
            "threads": None,
        },
    )
    if not cfg["prior"] or not cfg["params"]:
        raise InputError("simulate needs --prior and --params")
    names, prior = codebook.load_prior_csv(cfg["prior"])
    assignment = _load_assignment(cfg, names)
    params, _ = channel.load_params_json(cfg["params"])
    table = channel.simulate(assignment, prior, params, int(cfg["n"]), int(cfg["seed"]))
    out = Path(cfg["out"])
    channel.save_intensity_csv(out, table, molecule_names=names)
    outputs = [out]
    if not cfg["assignment"]:
        # Keep the drawn assignment next to the data for reproducibility.
        assignment_path = out.with_name(out.stem + "_assignment.tsv")
        codebook.save_assignment_tsv(assignment_path, assignment)
        outputs.append(assignment_path)
    print(f"simulated {table.n_rows} rows x {table.length} rounds -> {out}")
    inputs = [cfg["prior"], cfg["params"]] + [
        cfg[k] for k in ("assignment", "codebook") if cfg.get(k)
    ]
    _write_manifest(out.parent, "simulate", cfg, inputs, outputs)
    return 0


# ---------------------------------------------------------------------------
# Parser


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfishcode",
        description="Barcode coding pipeline for multiplexed FISH: codebook "
        "generation, channel fitting, exact decoding, prior sweeps, and "
        "assignment optimization.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, default=None, help="master RNG seed")
        p.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
        p.add_argument("--config", default=None, help="JSON config or a previous run_manifest.json")

    p = sub.add_parser("gen-codebook", help="write the canonical 140-word codebook")
    p.add_argument("--out", default=None, help="output TSV path")
    common(p)
    p.set_defaults(func=cmd_gen_codebook)

    p = sub.add_parser("fit", help="fit per-round Gaussian mixtures to an intensity CSV")
    p.add_argument("--intensities", default=None)
    p.add_argument("--out-params", dest="out_params", default=None)
    p.add_argument("--diagnostics", default=None, help="QQ diagnostics CSV path")
    p.add_argument("--grid-size", dest="grid_size", type=int, default=None)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--max-iter", dest="max_iter", type=int, default=None)
    p.add_argument("--sigma-floor", dest="sigma_floor", type=float, default=None)
    p.add_argument("--restarts", type=int, default=None)
    p.add_argument("--prior", default=None, help="also derive thresholds and crossover rates")
    p.add_argument("--assignment", default=None)
    p.add_argument("--codebook", default=None)
    p.add_argument("--assign-seed", dest="assign_seed", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("decode", help="build a decoder, report exact metrics, optionally decode data")
    p.add_argument("--data", default=None, help="intensity CSV to decode (optional)")
    p.add_argument("--prior", default=None)
    p.add_argument("--params", default=None)
    p.add_argument("--assignment", default=None)
    p.add_argument("--codebook", default=None)
    p.add_argument("--assign-seed", dest="assign_seed", type=int, default=None)
    p.add_argument("--kind", default=None, help="map | mle | mapq | moffitt")
    p.add_argument("--q", type=float, default=None, help="posterior rejection threshold")
    p.add_argument("--moffitt-rule", dest="moffitt_rule", default=None,
                   help="distance | restricted_mle")
    p.add_argument("--out-dir", dest="out_dir", default=None)
    common(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("sweep", help="decoder metrics across Dirichlet prior concentrations")
    p.add_argument("--codebook", default=None)
    p.add_argument("--params", default=None)
    p.add_argument("--molecules", type=int, default=None)
    p.add_argument("--alpha-grid", dest="alpha_grid", default=None)
    p.add_argument("--draws", type=int, default=None)
    p.add_argument("--decoders", default=None, help="comma list: map,mle,mapq:0.5,moffitt")
    p.add_argument("--assignment-policy", dest="assignment_policy", default=None,
                   help="per_draw | fixed")
    p.add_argument("--out-dir", dest="out_dir", default=None)
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("optimize", help="evolve the code assignment to minimize mean FDR")
    p.add_argument("--codebook", default=None)
    p.add_argument("--prior", default=None)
    p.add_argument("--params", default=None)
    p.add_argument("--assign-seed", dest="assign_seed", type=int, default=None)
    p.add_argument("--population", type=int, default=None)
    p.add_argument("--generations", type=int, default=None)
    p.add_argument("--mutation-prob", dest="mutation_prob", type=float, default=None)
    p.add_argument("--decoder", default=None)
    p.add_argument("--swap-pool", dest="swap_pool", default=None,
                   help="all_codes | used_only")
    p.add_argument("--out-dir", dest="out_dir", default=None)
    common(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("simulate", help="draw a synthetic intensity table from the generative model")
    p.add_argument("--prior", default=None)
    p.add_argument("--params", default=None)
    p.add_argument("--assignment", default=None)
    p.add_argument("--codebook", default=None)
    p.add_argument("--assign-seed", dest="assign_seed", type=int, default=None)
    p.add_argument("-n", "--n", type=int, default=None, help="number of rows")
    p.add_argument("--out", default=None)
    common(p)
    p.set_defaults(func=cmd_simulate)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
