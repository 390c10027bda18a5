"""Command-line surface: check, gen-synthetic, train-ae, train-ldm, sample, eval.

Exit codes: 0 success, 1 validation failure, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import autoencoder as ae
from . import selfcheck
from .checkpoint import CheckpointError, assign_parameters, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import (
    FormatError,
    Molecule,
    SizeDistribution,
    SyntheticConfig,
    format_xyz,
    gen_synthetic_templates,
    load_dataset,
    sample_size,
    size_distribution,
    write_manifest,
)
from .diffusion import DenoiserParams, build_schedule, init_denoiser, sample, train_ldm
from .egnn import named_parameters
from .metrics import evaluate_set
from .rng import derive_rng

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2


def _load_run_config(args, **extra):
    overrides = dict(extra)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if args.config:
        return load_config(args.config, **overrides)
    return RunConfig(**overrides)


def cmd_check(args):
    if args.inject_fault == "cog":
        ae._COG_FAULT = True
    try:
        ok = selfcheck.run_all()
    finally:
        ae._COG_FAULT = False
    return EXIT_OK if ok else EXIT_VALIDATION


def cmd_gen_synthetic(args):
    config = _load_run_config(args)
    rng = derive_rng(config.seed, "gen-synthetic")
    syn = SyntheticConfig(jitter=args.jitter if args.jitter is not None else config.jitter,
                          count=args.count)
    molecules, template_ids = gen_synthetic_templates(syn, rng)
    write_manifest(molecules, args.out)
    with open(str(args.out) + ".meta.json", "w") as fh:
        json.dump({"seed": config.seed, "count": syn.count, "jitter": syn.jitter,
                   "template_ids": template_ids}, fh)
    print(f"wrote {len(molecules)} molecules to {args.out}")
    return EXIT_OK


def _ae_metadata(params, config, dataset):
    dist = size_distribution(dataset)
    return {
        "kind": "autoencoder",
        "k": params.k,
        "sigma0": params.sigma0,
        "vocabulary": list(params.vocabulary),
        "conditional": params.conditional,
        "regularizer": params.regularizer,
        "hidden_width": config.hidden_width,
        "encoder_layers": config.encoder_layers,
        "decoder_layers": config.decoder_layers,
        "seed": config.seed,
        "size_support": dist.support.tolist(),
        "size_probs": dist.probabilities.tolist(),
    }


def _write_log(path, log):
    with open(path, "w") as fh:
        for record in log:
            fh.write(json.dumps(record) + "\n")


def cmd_train_ae(args):
    config = _load_run_config(args)
    dataset = load_dataset(args.data, tuple(config.vocabulary))
    params, log = ae.train_autoencoder(dataset, config)
    named = {**{n: t.values for n, t in named_parameters(params.encoder, "encoder").items()},
             **{n: t.values for n, t in named_parameters(params.decoder, "decoder").items()}}
    save_checkpoint(args.out, named, _ae_metadata(params, config, dataset))
    _write_log(str(args.out) + ".log.jsonl", log)
    print(f"autoencoder checkpoint written to {args.out} "
          f"({len(log)} log records)")
    return EXIT_OK


def load_autoencoder(path):
    """Rebuild AutoencoderParams from a checkpoint."""
    named, meta = load_checkpoint(path)
    if meta.get("kind") != "autoencoder":
        raise CheckpointError(f"{path}: not an autoencoder checkpoint")
    config = RunConfig(
        k=meta["k"], sigma0=meta["sigma0"], hidden_width=meta["hidden_width"],
        encoder_layers=meta["encoder_layers"], decoder_layers=meta["decoder_layers"],
        conditional=meta["conditional"], regularizer=meta["regularizer"],
        vocabulary=tuple(meta["vocabulary"]), seed=meta.get("seed", 0),
    )
    params = ae.init_autoencoder(derive_rng(0, "ae-load"), config)
    assign_parameters(params.encoder, named, "encoder")
    assign_parameters(params.decoder, named, "decoder")
    return params, meta


def cmd_train_ldm(args):
    config = _load_run_config(args)
    ae_params, ae_meta = load_autoencoder(args.ae)
    if ae_params.k != config.k:
        print(f"error: autoencoder k={ae_params.k} does not match config k={config.k}",
              file=sys.stderr)
        return EXIT_VALIDATION
    if ae_params.conditional != config.conditional:
        print("error: conditioning flag differs between autoencoder and config",
              file=sys.stderr)
        return EXIT_VALIDATION
    dataset = load_dataset(args.data, ae_params.vocabulary)
    schedule = build_schedule(config.timesteps, config.schedule)
    params, log = train_ldm(dataset, ae_params, schedule, config)
    named = {n: t.values for n, t in named_parameters(params.egnn, "denoiser").items()}
    dist = size_distribution(dataset)
    meta = {
        "kind": "denoiser",
        "k": params.k,
        "conditional": params.conditional,
        "hidden_width": config.hidden_width,
        "denoiser_layers": config.denoiser_layers,
        "schedule": config.schedule,
        "timesteps": config.timesteps,
        "vocabulary": list(ae_params.vocabulary),
        "seed": config.seed,
        "size_support": dist.support.tolist(),
        "size_probs": dist.probabilities.tolist(),
    }
    save_checkpoint(args.out, named, meta)
    _write_log(str(args.out) + ".log.jsonl", log)
    print(f"denoiser checkpoint written to {args.out} ({len(log)} log records)")
    return EXIT_OK


def load_denoiser(path):
    named, meta = load_checkpoint(path)
    if meta.get("kind") != "denoiser":
        raise CheckpointError(f"{path}: not a denoiser checkpoint")
    config = RunConfig(
        k=meta["k"], hidden_width=meta["hidden_width"],
        denoiser_layers=meta["denoiser_layers"], conditional=meta["conditional"],
        vocabulary=tuple(meta["vocabulary"]),
    )
    params = init_denoiser(derive_rng(0, "ldm-load"), config)
    assign_parameters(params.egnn, named, "denoiser")
    return params, meta


def cmd_sample(args):
    ae_params, ae_meta = load_autoencoder(args.ae)
    den_params, den_meta = load_denoiser(args.ldm)
    if ae_meta["k"] != den_meta["k"]:
        print(f"error: k mismatch (autoencoder {ae_meta['k']}, denoiser {den_meta['k']})",
              file=sys.stderr)
        return EXIT_VALIDATION
    if ae_meta["vocabulary"] != den_meta["vocabulary"]:
        print("error: vocabulary mismatch between checkpoints", file=sys.stderr)
        return EXIT_VALIDATION
    if args.condition is not None and not den_params.conditional:
        print("error: --condition given but the checkpoints are unconditional",
              file=sys.stderr)
        return EXIT_VALIDATION
    if args.condition is None and den_params.conditional:
        print("error: conditional checkpoints require --condition", file=sys.stderr)
        return EXIT_VALIDATION
    schedule = build_schedule(den_meta["timesteps"], den_meta["schedule"])
    dist = SizeDistribution(np.array(den_meta["size_support"]),
                            np.array(den_meta["size_probs"]))
    molecules, comments = [], []
    for i in range(args.n):
        rng = derive_rng(args.seed, "sample", i)
        n_atoms = sample_size(dist, rng)
        coords, elements, charges = sample(
            n_atoms, den_params, schedule, ae_params, rng, s=args.condition)
        molecules.append(Molecule(elements, coords, charges))
        comments.append(f"generated seed={args.seed} index={i}")
    with open(args.out, "w") as fh:
        fh.write(format_xyz(molecules, comments))
    print(f"wrote {len(molecules)} molecules to {args.out}")
    return EXIT_OK


def cmd_eval(args):
    molecules = load_dataset(args.samples)
    report = evaluate_set(molecules)
    with open(args.out, "w") as fh:
        fh.write(report.to_json() + "\n")
    print(report.to_json())
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="latmol",
        description="Equivariant latent diffusion over 3D molecules (desk scale).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="run the invariant self-check battery")
    p.add_argument("--inject-fault", choices=["cog"], default=None,
                   help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic template dataset")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--jitter", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_synthetic)

    p = sub.add_parser("train-ae", help="first stage: train the autoencoder")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_ae)

    p = sub.add_parser("train-ldm", help="second stage: train the latent denoiser")
    p.add_argument("--data", required=True)
    p.add_argument("--ae", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_ldm)

    p = sub.add_parser("sample", help="generate molecules from trained checkpoints")
    p.add_argument("--ae", required=True)
    p.add_argument("--ldm", required=True)
    p.add_argument("-n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--condition", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="compute stability/validity/uniqueness metrics")
    p.add_argument("--samples", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FormatError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
