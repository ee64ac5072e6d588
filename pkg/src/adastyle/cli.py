"""Command-line entry points: generate, benchmark, ablate, dump-attn.

Exit codes: 0 success, 1 runtime failure, 2 configuration error,
3 benchmark finished with failed cells.
"""

import argparse
import hashlib
import json
import logging
import os
import sys

from . import __version__
from .errors import ConfigError
from .evaluation import MockEmbedder, load_grid, run_ablation, run_benchmark, write_results
from .pipeline import AttentionDumper, GenerationConfig, generate, load_backend, load_config_file, save_png

log = logging.getLogger("adastyle")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2, 3

# flag dest -> GenerationConfig key
_GEN_FLAGS = {
    "prompt": "prompt",
    "negative_prompt": "negative_prompt",
    "style_image": "style_image_path",
    "negative_style_image": "negative_style_image_path",
    "seed": "seed",
    "steps": "steps",
    "guidance_scale": "guidance_scale",
    "lambda_": "lambda",
    "fusion_mode": "fusion_mode",
    "teacher_cutoff": "teacher_cutoff",
    "teacher_enabled": "teacher_enabled",
    "scfg_mode": "scfg_mode",
    "scfg_weight": "scfg_weight",
    "backend": "backend",
    "backend_seed": "backend_seed",
    "backend_factory": "backend_factory",
}


def _add_generation_flags(p):
    S = argparse.SUPPRESS
    p.add_argument("--config", help="JSON config file (a previous run's sidecar also works)")
    p.add_argument("--prompt", default=S)
    p.add_argument("--negative-prompt", default=S)
    p.add_argument("--style-image", default=S)
    p.add_argument("--negative-style-image", default=S, help="enables style_cfg unless --scfg-mode says otherwise")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--steps", type=int, default=S)
    p.add_argument("--guidance-scale", type=float, default=S, help="s in neg + s*(cond - neg); default 5")
    p.add_argument("--lambda", dest="lambda_", type=float, default=S, help="style weight for weighted_sum fusion")
    p.add_argument("--fusion-mode", choices=["weighted_sum", "cross_modal_adain"], default=S)
    p.add_argument("--teacher-cutoff", type=int, default=S, help="number of initial steps using teacher maps")
    p.add_argument("--no-teacher", dest="teacher_enabled", action="store_false", default=S)
    p.add_argument("--scfg-mode", choices=["text_cfg", "style_cfg"], default=S)
    p.add_argument("--scfg-weight", type=float, default=S, help="w for style CFG; defaults to guidance scale - 1")
    p.add_argument("--backend", choices=["toy", "external"], default=S)
    p.add_argument("--backend-seed", type=int, default=S)
    p.add_argument("--backend-factory", default=S, help="module:callable returning a backend")


def build_parser():
    parser = argparse.ArgumentParser(prog="adastyle", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate one image")
    _add_generation_flags(g)
    g.add_argument("--out", default="outputs", help="output directory")
    g.add_argument("--dump-attn", metavar="DIR", help="also dump per-step attention maps here")
    g.add_argument("--timing", action="store_true", help="record per-step wall clock in the sidecar")

    d = sub.add_parser("dump-attn", help="run a generation and dump teacher/student attention maps")
    _add_generation_flags(d)
    d.add_argument("--out", required=True, help="dump directory")

    for name, helptext in (("benchmark", "score a prompt x style grid"), ("ablate", "run the four-row ablation")):
        b = sub.add_parser(name, help=helptext)
        b.add_argument("grid", help="grid JSON file")
        b.add_argument("--config", help="base generation config (JSON)")
        b.add_argument("--out", default="bench_out")
        b.add_argument("--csv", action="store_true", help="also write table.csv")
        b.add_argument("--jobs", type=int, default=1)
        b.add_argument("--embedder", choices=["mock", "clip"], default="mock")
        b.add_argument("--timing", action="store_true", help="include wall clock in the tables")
    return parser


def resolve_config(args):
    """Merge documented defaults < config file < command-line flags."""
    file_data = load_config_file(args.config) if getattr(args, "config", None) else {}
    cfg = GenerationConfig.from_dict(file_data)
    flags = {key: getattr(args, dest) for dest, key in _GEN_FLAGS.items() if hasattr(args, dest)}
    cfg = GenerationConfig.from_dict(flags, base=cfg)
    if "scfg_mode" not in flags and "scfg_mode" not in file_data and cfg.negative_style_image_path:
        cfg = cfg.replace(scfg_mode="style_cfg")
    return cfg.validate(warn=False)


def _write_json(path, data):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_generate(args):
    cfg = resolve_config(args)
    backend = load_backend(cfg)
    os.makedirs(args.out, exist_ok=True)
    dumper = AttentionDumper(args.dump_attn) if args.dump_attn else None
    result = generate(cfg, backend=backend, on_step=dumper, record_maps=dumper is not None)
    if dumper is not None:
        dumper.close()
    image_path = os.path.join(args.out, "image.png")
    save_png(result.image, image_path)
    sidecar = {
        "backend": backend.describe(),
        "command": "generate",
        "config": cfg.to_dict(),
        "image": {
            "file": "image.png",
            "height": int(result.image.shape[0]),
            "pixels_sha256": hashlib.sha256(result.image.tobytes()).hexdigest(),
            "width": int(result.image.shape[1]),
        },
        "timesteps": result.timesteps,
    }
    if args.timing:
        sidecar["step_seconds"] = result.step_seconds
    _write_json(os.path.join(args.out, "image.json"), sidecar)
    log.info("wrote %s", image_path)
    return EXIT_OK


def cmd_dump_attn(args):
    cfg = resolve_config(args)
    backend = load_backend(cfg)
    dumper = AttentionDumper(args.out)
    generate(cfg, backend=backend, on_step=dumper, record_maps=True)
    dumper.close()
    _write_json(os.path.join(args.out, "run.json"), {"backend": backend.describe(), "command": "dump-attn", "config": cfg.to_dict()})
    return EXIT_OK


def _embedder(name):
    if name == "clip":
        from .evaluation import ClipEmbedder

        return ClipEmbedder()
    return MockEmbedder()


def _cmd_grid(args, runner):
    grid = load_grid(args.grid)
    base = GenerationConfig.from_dict(load_config_file(args.config)) if args.config else GenerationConfig()
    merged = GenerationConfig.from_dict(grid.config, base=base)
    backend = load_backend(merged)
    table = runner(grid, backend, _embedder(args.embedder), base, args.jobs)
    write_results(table, args.out, csv_export=args.csv, timing=args.timing)
    for row in table.rows:
        mean = "n/a" if row.mean is None else f"{row.mean:.4f}"
        print(f"{row.name}\ttext_alignment={mean}\tcells={len(row.cells)}\tfailed={row.n_failed}")
    if table.failed_cells:
        log.error("%d cell(s) failed; see %s", len(table.failed_cells), os.path.join(args.out, "errors.json"))
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_benchmark(args):
    return _cmd_grid(args, lambda grid, backend, emb, base, jobs: run_benchmark(grid, backend, emb, base, jobs=jobs))


def cmd_ablate(args):
    return _cmd_grid(args, run_ablation)


COMMANDS = {"generate": cmd_generate, "dump-attn": cmd_dump_attn, "benchmark": cmd_benchmark, "ablate": cmd_ablate}


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s: %(message)s", stream=sys.stderr, force=True)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
