"""Command-line entry points.

Exit codes: 0 on success, 2 for configuration problems (bad TOML,
out-of-range values, missing input paths), 3 when a pipeline stage
fails.  ``RECX_THREADS`` caps per-frame render parallelism inside the
optimization stage; everything else is sequential.
"""

import argparse
import sys

from . import config as cf
from . import pipeline as pl

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="recx",
        description="Sparse-view reconstruction pipeline on synthetic "
                    "desk-scale scenes.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True,
                        help="run configuration (TOML)")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config's global seed")
        sp.add_argument("--out", default=None,
                        help="override the config's output directory")
        return sp

    add("gen-data", "generate the synthetic training corpus")
    tr = add("train", "train the conditioned denoiser on a corpus")
    tr.add_argument("--no-structure-cond", action="store_true",
                    help="train the image-only baseline variant")
    rc = add("reconstruct", "run the full two-view reconstruction pipeline")
    rc.add_argument("--bypass-diffusion", action="store_true",
                    help="substitute ground-truth frames and oracle "
                         "pointmaps (isolates the splatting stage)")
    rc.add_argument("--no-structure-cond", action="store_true",
                    help="sample without structure tokens")
    rc.add_argument("--uniform-confidence", action="store_true",
                    help="ignore confidence maps during optimization")
    add("orbit360", "incremental 360° generation and fusion")
    add("ablate", "run the leave-one-out ablation grid")
    add("eval", "verify artifacts and recompute metrics for a run (--out)")
    add("render", "render the config trajectory from a run's cloud (--out)")
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out_dir"] = args.out
        cfg = cf.load_config(args.config, overrides)

        if args.command == "gen-data":
            out = pl.gen_data(cfg)
            print(f"corpus written: {out} ({cfg.n_scenes} scenes x "
                  f"{cfg.n_frames} frames)")
        elif args.command == "train":
            ckpt = pl.train(cfg, no_structure=args.no_structure_cond)
            print(f"checkpoint written: {ckpt}")
        elif args.command == "reconstruct":
            report = pl.reconstruct(
                cfg,
                bypass_diffusion=args.bypass_diffusion,
                no_structure=args.no_structure_cond,
                uniform_confidence=args.uniform_confidence)
            print(f"mean held-out PSNR {report.metrics['mean_psnr']:.2f} dB; "
                  f"report: {cfg.out_dir}/report.json")
        elif args.command == "orbit360":
            report = pl.orbit360(cfg)
            print(f"orbit closed at {report.metrics['yaw_reached_deg']:.1f}° "
                  f"after {report.metrics['iterations']} iterations; "
                  f"report: {cfg.out_dir}/report.json")
        elif args.command == "ablate":
            table = pl.ablate(cfg)
            print(f"ablation table: {table}")
        elif args.command == "eval":
            result = pl.evaluate(cfg, cfg.out_dir)
            print(f"verified {result['verified_artifacts']} artifacts; "
                  f"metrics recomputed: {result['metrics_recomputed']}")
        elif args.command == "render":
            outdir = pl.render_novel(cfg, cfg.out_dir)
            print(f"renders written: {outdir}")
    except cf.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except pl.StageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
