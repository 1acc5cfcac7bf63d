"""Command-line entry point: ``mrecg synth|plan|quantize|study``.

Every command writes ``run_manifest.json`` next to its outputs. Failures print
one JSON line ``{"error": ..., "message": ...}`` on stderr and exit nonzero.
The manifest timestamp honours ``SOURCE_DATE_EPOCH`` so repeated runs can be
compared byte for byte.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .capacity import capacity_vector
from .diagnostics import (
    batch_csv,
    batch_size_study,
    batch_summary,
    oscillation_csv,
    oscillation_score,
    sample_schemes,
    schemes_csv,
    schemes_summary,
    write_table,
)
from .model_io import (
    generate_calibration,
    generate_synthetic_model,
    load_calibration,
    load_model,
    read_calibration,
    save_calibration,
    save_model,
)
from .partition import GranularityScheme, build_modules
from .reconstruction import FAMILY_ROUND_WEIGHT, ReconConfig, ReconstructionReport, run_pipeline
from .solver import score_pairs, select_topk

log = logging.getLogger("mrecg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- argument types --------------------------------------------------------------


def _at_least(lo: int):
    def parse(s: str) -> int:
        v = int(s)
        if v < lo:
            raise argparse.ArgumentTypeError(f"must be >= {lo}, got {v}")
        return v

    return parse


def _prob(s: str) -> float:
    v = float(s)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {v}")
    return v


def _int_list(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def _k_range(s: str) -> tuple[int, int]:
    lo, sep, hi = s.partition("..")
    return (int(lo), int(hi)) if sep else (int(lo), int(lo))


# -- parser ----------------------------------------------------------------------


def _recon_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("reconstruction")
    g.add_argument("--iters", type=_at_least(1), default=20000)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--batch-size", type=_at_least(1), default=32)
    g.add_argument("--num-batches", type=_at_least(1), default=16)
    g.add_argument("--qdrop", type=_prob, default=0.0, help="per-element probability of keeping full precision")
    g.add_argument("--wbits", type=_at_least(1), default=4)
    g.add_argument("--abits", type=_at_least(1), default=4)
    g.add_argument("--model-family", choices=sorted(FAMILY_ROUND_WEIGHT), default="resnet")
    g.add_argument("--granularity", choices=["layer", "block"], default=None)
    g.add_argument("--seed", type=int, default=0)


def build_parser() -> _Parser:
    ap = _Parser(prog="mrecg", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"mrecg {__version__}")
    ap.add_argument("--config", help="JSON file of flag values; explicit flags win")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic model and calibration data")
    p.add_argument("--out", required=True)
    p.add_argument("--blocks", type=_at_least(2), default=8)
    p.add_argument("--channels", type=_at_least(1), default=16)
    p.add_argument("--bottleneck", type=int, default=None)
    p.add_argument("--spatial", type=_at_least(1), default=8)
    p.add_argument("--bits", type=_at_least(1), default=4)
    p.add_argument("--calib-samples", type=_at_least(1), default=512)
    p.add_argument("--distribution", choices=["gaussian", "uniform"], default="gaussian")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("plan", help="choose which adjacent modules to merge")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="plan JSON path")
    p.add_argument("--metric", choices=["modcap", "loss"], default="modcap")
    p.add_argument("--k", type=_at_least(0), required=True)
    p.add_argument("--bits", type=_at_least(1), default=None, help="override every layer's weight bits")
    p.add_argument("--mode", choices=["data_free", "data_dependent"], default=None)
    p.add_argument("--granularity", choices=["layer", "block"], default="block")
    p.add_argument("--alpha", type=float, default=1.6, help="capacity factor for stride-2 layers")
    p.add_argument("--baseline-report", default=None)

    p = sub.add_parser("quantize", help="reconstruct the model under a plan")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--plan", default=None)
    p.add_argument("--eval", default=None, help="held-out inputs in calibration format")
    p.add_argument("--out", required=True, help="output directory")
    _recon_flags(p)

    p = sub.add_parser("study", help="diagnostic studies")
    st = p.add_subparsers(dest="study", required=True)

    q = st.add_parser("batch", help="final loss vs calibration batch size")
    q.add_argument("--model", required=True)
    q.add_argument("--sizes", type=_int_list, required=True)
    q.add_argument("--seeds", type=_at_least(1), default=5)
    q.add_argument("--eval-samples", type=_at_least(1), default=256)
    q.add_argument("--out", required=True)
    _recon_flags(q)

    q = st.add_parser("schemes", help="random merge schemes: max earlier loss vs final loss")
    q.add_argument("--model", required=True)
    q.add_argument("--calib", required=True)
    q.add_argument("--samples", type=_at_least(1), default=30)
    q.add_argument("--k", type=_k_range, default=(1, 3), help="inclusive range LO..HI")
    q.add_argument("--out", required=True)
    _recon_flags(q)

    q = st.add_parser("oscillation", help="oscillation score of saved reports")
    q.add_argument("--report", action="append", required=True)
    q.add_argument("--out", required=True)
    return ap


def parse_args(argv) -> argparse.Namespace:
    ap = build_parser()
    args = ap.parse_args(argv)
    if not args.config:
        return args
    overrides = json.loads(Path(args.config).read_text())
    if not isinstance(overrides, dict):
        raise UsageError("--config must hold a JSON object")
    actions = {a.dest: a for a in _actions_on_path(ap, args)}
    unknown = sorted(set(overrides) - set(actions))
    if unknown:
        raise UsageError(f"--config has keys this command does not take: {unknown}")
    # file values become defaults, so flags given on the command line still win
    for key, value in overrides.items():
        actions[key].default = value
    return ap.parse_args(argv)


def _actions_on_path(ap: argparse.ArgumentParser, args) -> list:
    """Actions of the root parser and of each subparser the command went through."""
    out, parser = [], ap
    for name in (args.command, getattr(args, "study", None), None):
        out.extend(a for a in parser._actions if not isinstance(a, argparse._SubParsersAction))
        sub = next((a for a in parser._actions if isinstance(a, argparse._SubParsersAction)), None)
        if sub is None or name is None:
            break
        parser = sub.choices[name]
    return out


# -- helpers -----------------------------------------------------------------------


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return t.strftime("%Y-%m-%dT%H:%M:%SZ")


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _manifest(out_dir: Path, args, inputs: dict, outputs: list[Path]) -> None:
    for p in outputs:
        if not p.is_file():
            raise RuntimeError(f"expected output {p} was not written")
        if p.suffix == ".json":
            json.loads(p.read_text())
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("verbose",)}
    _dump(
        out_dir / "run_manifest.json",
        {
            "command": " ".join(x for x in (args.command, getattr(args, "study", None)) if x),
            "config": config,
            "seed": getattr(args, "seed", None),
            "inputs": inputs,
            "outputs": [str(p) for p in outputs],
            "version": __version__,
            "timestamp": _timestamp(),
        },
    )


def _recon_config(args, granularity: str) -> ReconConfig:
    return ReconConfig.for_family(
        args.model_family,
        iterations=args.iters,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        num_batches=args.num_batches,
        qdrop_prob=args.qdrop,
        seed=args.seed,
        wbits=args.wbits,
        abits=args.abits,
        granularity=granularity,
    )


def _outdir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# -- commands ----------------------------------------------------------------------


def cmd_synth(args) -> None:
    out = _outdir(args.out)
    model = generate_synthetic_model(args.blocks, args.channels, args.bottleneck, args.seed, args.spatial, args.bits)
    model_json, model_bin = save_model(model, out / "model.json")
    calib = generate_calibration(model.input_shape, args.calib_samples, 1, args.distribution, args.seed + 1)
    calib_bin = save_calibration(calib.samples, out / "calib.bin")
    load_model(model_json)  # compose-check the round trip
    _manifest(out, args, {}, [model_json, model_bin, calib_bin])


def cmd_plan(args) -> None:
    model = load_model(args.model)
    if args.bits is not None:
        model = model.with_bits(args.bits)
    modules = build_modules(model, args.granularity)
    mode = args.mode or ("data_free" if args.metric == "modcap" else "data_dependent")
    if args.metric == "loss":
        if not args.baseline_report:
            raise UsageError("--metric loss requires --baseline-report (a zero-mask quantize report.json)")
        base = ReconstructionReport.load(args.baseline_report)
        if any(base.mask):
            log.warning("baseline report was not a zero-mask run; its module losses may not align")
        cm = capacity_vector(modules, "loss", base.final_losses)
    else:
        cm = capacity_vector(modules, "modcap", alpha_stride2=args.alpha)
    scores = score_pairs(cm)
    scheme = select_topk(scores, args.k, mode, args.metric)
    if scheme.shortfall:
        log.warning("only %d of %d pairs selected: data-free pairs may not share a module", scheme.k_achieved, args.k)
    scheme.extra = {
        "granularity": args.granularity,
        "capacity": list(cm.values),
        "pair_scores": [s.score for s in scores],
        "shortfall": scheme.shortfall,
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    scheme.save(out)
    GranularityScheme.load(out)
    inputs = {"model": args.model, "baseline_report": args.baseline_report}
    _manifest(out.parent, args, inputs, [out])


def cmd_quantize(args) -> None:
    out = _outdir(args.out)
    model = load_model(args.model)
    scheme, granularity = None, args.granularity
    if args.plan:
        scheme = GranularityScheme.load(args.plan)
        planned = scheme.extra.get("granularity")
        if granularity and planned and granularity != planned:
            raise UsageError(f"--granularity {granularity} conflicts with the plan's {planned}")
        granularity = granularity or planned
    cfg = _recon_config(args, granularity or "block")
    calib = load_calibration(args.calib, cfg.batch_size, cfg.num_batches)
    eval_inputs = read_calibration(args.eval) if args.eval else None
    t0 = time.perf_counter()
    report = run_pipeline(model, scheme, calib, cfg, eval_inputs)
    log.info("reconstructed %d modules in %.1fs", len(report.modules), time.perf_counter() - t0)
    report.save(out / "report.json")
    (out / "trajectories.csv").write_text(report.trajectories_csv())
    inputs = {"model": args.model, "calib": args.calib, "plan": args.plan, "eval": args.eval}
    _manifest(out, args, inputs, [out / "report.json", out / "trajectories.csv"])


def cmd_study(args) -> None:
    out = _outdir(args.out)
    if args.study == "oscillation":
        rows = [(p, oscillation_score(ReconstructionReport.load(p).final_losses)) for p in args.report]
        write_table(out / "oscillation.csv", oscillation_csv(rows), {"rows": [{"run": n, **s.to_dict()} for n, s in rows]})
        _manifest(out, args, {"reports": args.report}, [out / "oscillation.csv", out / "oscillation.json"])
        return

    model = load_model(args.model)
    cfg = _recon_config(args, args.granularity or "block")
    if args.study == "batch":
        rng = np.random.default_rng(np.random.SeedSequence([args.seed & 0xFFFFFFFFFFFFFFFF, 0xE7A1]))
        eval_inputs = rng.standard_normal((args.eval_samples, *model.input_shape)).astype("<f4").astype(np.float64)
        rows = batch_size_study(model, args.sizes, args.seeds, cfg, eval_inputs, args.seed)
        write_table(out / "batch_study.csv", batch_csv(rows), batch_summary(rows))
        _manifest(out, args, {"model": args.model}, [out / "batch_study.csv", out / "batch_study.json"])
    else:
        calib = load_calibration(args.calib, cfg.batch_size, cfg.num_batches)
        rows = sample_schemes(model, calib, args.samples, args.k, args.seed, cfg)
        write_table(out / "scheme_samples.csv", schemes_csv(rows), schemes_summary(rows))
        inputs = {"model": args.model, "calib": args.calib}
        _manifest(out, args, inputs, [out / "scheme_samples.csv", out / "scheme_samples.json"])


COMMANDS = {"synth": cmd_synth, "plan": cmd_plan, "quantize": cmd_quantize, "study": cmd_study}


def _fail(kind: str, exc: BaseException, code: int) -> int:
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    except (OSError, ValueError) as exc:
        return _fail(type(exc).__name__, exc, 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    except Exception as exc:  # one machine-readable line, whatever went wrong
        return _fail(type(exc).__name__, exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
