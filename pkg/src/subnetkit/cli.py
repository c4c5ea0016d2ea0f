"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error (format/schema),
3 I/O error. Reports go to stdout or ``--out``; diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from statistics import mean
from typing import Optional, Sequence

from . import __version__
from .checkpoint import DEFAULT_CHUNK_ELEMS, open_checkpoint
from .diff import DEFAULT_TOLERANCES, SCHEMA_VERSION, THREADS_ENV, checkpoint_sparsity, default_threads, layer_breakdown
from .dynamics import classify_params, series_sparsity
from .errors import DataError
from .manifest import RunManifest
from .masks import extract_mask, mask_ops, overlap, random_mask, read_mask, schema_of, write_mask
from .rank import F32_EPS, RankPolicy, rank_report
from .roles import RoleClassifier

log = logging.getLogger("subnetkit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


class _FMT(argparse.ArgumentDefaultsHelpFormatter):
    """Append ``(default: ...)`` only when there is a concrete default to show."""

    def _get_help_string(self, action):
        if action.default is None or action.default == [] or action.default is False:
            return action.help
        return super()._get_help_string(action)


def _common() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    g = p.add_argument_group("output")
    g.add_argument("--format", choices=("json", "csv"), default="json", help="report format")
    g.add_argument("--out", metavar="FILE", help="write the report here instead of stdout")
    g.add_argument("--threads", type=int, default=None,
                   help=f"worker threads (default: ${THREADS_ENV} or available cores)")
    g.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")
    return p


def _scan() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    g = p.add_argument_group("scan")
    g.add_argument("--exclude", action="append", default=[], metavar="PATTERN",
                   help="regex; matching tensor names are skipped (repeatable)")
    g.add_argument("--chunk-elems", type=int, default=DEFAULT_CHUNK_ELEMS,
                   help="elements per streamed chunk")
    g.add_argument("--roles", metavar="FILE", help="JSON role-pattern file tried before the built-in table")
    return p


def _pair(p):
    p.add_argument("--init", required=True, help="reference checkpoint (file, shard index or directory)")
    p.add_argument("--tuned", required=True, help="fine-tuned checkpoint")


def build_parser() -> argparse.ArgumentParser:
    common, scan = _common(), _scan()
    parser = _Parser(prog="subnetkit", description="Checkpoint diffing and subnetwork analysis.",
                     formatter_class=_FMT)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("sparsity", parents=[common, scan], formatter_class=_FMT,
                       help="update sparsity between two checkpoints")
    _pair(p)
    p.add_argument("--tol", action="append", type=float, metavar="TAU",
                   help=f"tolerance (repeatable; default {' '.join(map(str, DEFAULT_TOLERANCES))})")

    p = sub.add_parser("layers", parents=[common, scan], formatter_class=_FMT,
                       help="per-layer, per-matrix-kind sparsity rows")
    _pair(p)
    p.add_argument("--tol", type=float, default=1e-5, help="tolerance")

    p = sub.add_parser("mask", formatter_class=_FMT, help="subnetwork masks")
    msub = p.add_subparsers(dest="mask_command", required=True, parser_class=_Parser)
    m = msub.add_parser("extract", parents=[common, scan], formatter_class=_FMT,
                        help="mask of updated parameters")
    _pair(m)
    m.add_argument("--tol", type=float, default=1e-5, help="tolerance")
    m.add_argument("--save", required=True, metavar="FILE", help="mask file to write (.snmk)")
    for op in ("intersect", "union", "difference"):
        m = msub.add_parser(op, parents=[common], formatter_class=_FMT, help=f"{op} of two masks")
        m.add_argument("--a", required=True)
        m.add_argument("--b", required=True)
        m.add_argument("--save", required=True, metavar="FILE")
    m = msub.add_parser("overlap", parents=[common, scan], formatter_class=_FMT,
                        help="one-sided overlaps with random baselines")
    m.add_argument("--a", required=True)
    m.add_argument("--b", required=True)
    m.add_argument("--per-layer", action="store_true", help="add per-layer overlap (extension)")
    m = msub.add_parser("random", parents=[common], formatter_class=_FMT,
                        help="seeded uniform random mask")
    src = m.add_mutually_exclusive_group(required=True)
    src.add_argument("--like", metavar="MASK", help="copy the tensor schema of this mask")
    src.add_argument("--checkpoint", metavar="PATH", help="copy the tensor schema of this checkpoint")
    m.add_argument("--density", type=float, required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--save", required=True, metavar="FILE")

    p = sub.add_parser("rank", parents=[common, scan], formatter_class=_FMT,
                       help="numerical rank of per-matrix update deltas")
    _pair(p)
    p.add_argument("--policy", default=f"rel:{F32_EPS!r}",
                   help="rel:EPS (threshold sigma_max*max(m,n)*EPS) or abs:TAU")
    p.add_argument("--min-dim", type=int, default=1, help="skip matrices with min(rows, cols) below this")
    p.add_argument("--quantize-bf16", action="store_true", help="round deltas to bf16 before the SVD")

    p = sub.add_parser("dynamics", parents=[common, scan], formatter_class=_FMT,
                       help="sparsity trajectory over ordered checkpoints")
    p.add_argument("--init", required=True)
    p.add_argument("--ckpt", nargs="+", required=True, metavar="PATH", help="checkpoints in training order")
    p.add_argument("--final", help="final checkpoint (appended after --ckpt)")
    p.add_argument("--tol", type=float, default=1e-5, help="tolerance")

    p = sub.add_parser("classify", parents=[common, scan], formatter_class=_FMT,
                       help="untouched / canceled / subnetwork partition")
    p.add_argument("--init", required=True)
    p.add_argument("--ckpt", nargs="+", required=True, metavar="PATH", help="intermediate checkpoints")
    p.add_argument("--final", help="final checkpoint (default: last --ckpt)")
    p.add_argument("--tol", type=float, default=1e-5, help="tolerance")

    p = sub.add_parser("toy", formatter_class=_FMT, help="desk-scale training experiments")
    tsub = p.add_subparsers(dest="toy_command", required=True, parser_class=_Parser)
    for name, text in (("run", "train one toy policy"), ("replay", "full vs gradient-masked retraining"),
                       ("sweep", "final sparsity of DPO_IND vs SFT_OOD over seeds")):
        t = tsub.add_parser(name, parents=[common], formatter_class=_FMT, help=text)
        t.add_argument("--config", metavar="FILE", help="JSON or TOML toy config")
        t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field (repeatable)")
        if name == "run":
            t.add_argument("--seed", type=int, help="run seed (default: config seed)")
            t.add_argument("--save-dir", metavar="DIR", help="persist checkpoints, mask and log here")
        else:
            t.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    return parser


# -- helpers -----------------------------------------------------------------

def _classifier(args) -> Optional[RoleClassifier]:
    return RoleClassifier.from_file(args.roles) if getattr(args, "roles", None) else None


def _threads(args) -> int:
    return default_threads() if args.threads is None else max(1, args.threads)


def _params(args) -> dict:
    skip = {"format", "out", "verbose", "threads"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _emit(args, manifest: RunManifest, report: dict, rows: Optional[list[dict]] = None) -> None:
    manifest.finish()
    if args.format == "csv":
        buf = io.StringIO()
        buf.write("# manifest: " + json.dumps(manifest.to_dict(), sort_keys=True) + "\n")
        rows = rows if rows is not None else [report]
        if rows:
            fields = list(dict.fromkeys(k for r in rows for k in r))
            w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        text = buf.getvalue()
    else:
        text = json.dumps({"schema_version": SCHEMA_VERSION, "manifest": manifest.to_dict(),
                           "report": report}, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _manifest(args, inputs: Sequence[str]) -> RunManifest:
    m = RunManifest(" ".join(filter(None, [args.command, getattr(args, "mask_command", None),
                                           getattr(args, "toy_command", None)])), _params(args))
    for path in inputs:
        m.add_input(path)
    return m


def _coerce(text: str):
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def _toy_config(args):
    from .toy.train import ToyConfig

    config = ToyConfig.load(args.config) if args.config else ToyConfig()
    updates = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or key not in ToyConfig.__dataclass_fields__:
            raise UsageError(f"bad --set {item!r}; fields: {', '.join(ToyConfig.__dataclass_fields__)}")
        updates[key] = _coerce(value)
    return replace(config, **updates)


# -- commands ----------------------------------------------------------------

def cmd_sparsity(args):
    tols = sorted(set(args.tol)) if args.tol else list(DEFAULT_TOLERANCES)
    manifest = _manifest(args, [args.init, args.tuned])
    cls = _classifier(args)
    with open_checkpoint(args.init, cls) as a, open_checkpoint(args.tuned, cls) as b:
        report = checkpoint_sparsity(a, b, tols, args.exclude, args.chunk_elems, _threads(args))
    _emit(args, manifest, report.to_dict(), report.rows())


def cmd_layers(args):
    manifest = _manifest(args, [args.init, args.tuned])
    cls = _classifier(args)
    with open_checkpoint(args.init, cls) as a, open_checkpoint(args.tuned, cls) as b:
        report = checkpoint_sparsity(a, b, [args.tol], args.exclude, args.chunk_elems, _threads(args))
    rows = [r.to_dict() for r in layer_breakdown(report)]
    _emit(args, manifest, {"tolerance": args.tol, "rows": rows}, rows)


def cmd_mask(args):
    op = args.mask_command
    if op == "extract":
        manifest = _manifest(args, [args.init, args.tuned])
        with open_checkpoint(args.init) as a, open_checkpoint(args.tuned) as b:
            mask = extract_mask(a, b, args.tol, args.exclude, args.chunk_elems, _threads(args),
                                source=f"{args.init} -> {args.tuned}")
        write_mask(mask, args.save)
        _emit(args, manifest, {"saved": args.save, **mask.summary()})
    elif op in ("intersect", "union", "difference"):
        manifest = _manifest(args, [args.a, args.b])
        mask = mask_ops(read_mask(args.a), read_mask(args.b), op)
        write_mask(mask, args.save)
        _emit(args, manifest, {"saved": args.save, **mask.summary()})
    elif op == "overlap":
        manifest = _manifest(args, [args.a, args.b])
        rep = overlap(read_mask(args.a), read_mask(args.b), args.per_layer, _classifier(args))
        d = rep.to_dict()
        rows = [{"layer": "all", **{k: v for k, v in d.items() if k not in ("per_layer", "per_layer_note")}}]
        for k, v in (rep.per_layer or {}).items():
            rows.append({"layer": k, **v})
        _emit(args, manifest, d, rows)
    elif op == "random":
        if not 0.0 <= args.density <= 1.0:
            raise UsageError("--density must lie in [0, 1]")
        if args.like:
            manifest = _manifest(args, [args.like])
            schema = read_mask(args.like).schema
        else:
            manifest = _manifest(args, [args.checkpoint])
            with open_checkpoint(args.checkpoint) as c:
                schema = schema_of(c)
        mask = random_mask(schema, args.density, args.seed)
        write_mask(mask, args.save)
        _emit(args, manifest, {"saved": args.save, **mask.summary()})


def cmd_rank(args):
    try:
        policy = RankPolicy.parse(args.policy, quantize_bf16=args.quantize_bf16)
    except ValueError as e:
        raise UsageError(str(e)) from e
    manifest = _manifest(args, [args.init, args.tuned])
    with open_checkpoint(args.init) as a, open_checkpoint(args.tuned) as b:
        report = rank_report(a, b, policy, args.exclude, args.min_dim, _threads(args))
    _emit(args, manifest, report.to_dict(), report.rows())


def cmd_dynamics(args):
    paths = list(args.ckpt) + ([args.final] if args.final else [])
    manifest = _manifest(args, [args.init, *paths])
    init = open_checkpoint(args.init)
    seq = [open_checkpoint(p) for p in paths]
    try:
        series = series_sparsity(init, seq, args.tol, args.exclude, args.chunk_elems,
                                 _threads(args), ids=paths)
    finally:
        for c in [init, *seq]:
            c.close()
    _emit(args, manifest, series.to_dict(), series.rows())


def cmd_classify(args):
    paths = list(args.ckpt) + ([args.final] if args.final else [])
    manifest = _manifest(args, [args.init, *paths])
    init = open_checkpoint(args.init)
    seq = [open_checkpoint(p) for p in args.ckpt]
    final = open_checkpoint(args.final) if args.final else None
    try:
        part = classify_params(init, seq, final, args.tol, args.exclude, args.chunk_elems, _threads(args))
    finally:
        for c in [init, *seq, *([final] if final else [])]:
            c.close()
    _emit(args, manifest, part.to_dict())


def cmd_toy(args):
    from .toy.train import Objective, conjecture_replay, final_train_loss, save_run, sweep, train

    try:
        config = _toy_config(args)
    except (ValueError, TypeError) as e:
        raise UsageError(f"invalid toy config: {e}") from e
    manifest = _manifest(args, [args.config] if args.config else [])
    manifest.parameters["resolved_config"] = config.to_dict()
    op = args.toy_command
    if op == "run":
        run = train(config, args.seed)
        report = {"config": run.config.to_dict(),
                  "final_sparsity": run.step_sparsity[-1] if run.step_sparsity else 1.0,
                  "final_loss": final_train_loss(run), "mask_density": run.final_mask.density}
        if args.save_dir:
            save_run(run, args.save_dir)
            report["saved"] = args.save_dir
        rows = [{"step": i + 1, "loss": l, "sparsity": s}
                for i, (l, s) in enumerate(zip(run.loss_curve, run.step_sparsity))]
        _emit(args, manifest, report, rows)
    elif op == "replay":
        rows = []
        for s in args.seeds:
            log.info("replay seed %d", s)
            rows.append(conjecture_replay(config, s).to_dict())
        report = {"runs": rows, "min_agreement_1e-4": min(r["agreement_1e-4"] for r in rows),
                  "mean_agreement_1e-4": mean(r["agreement_1e-4"] for r in rows)}
        _emit(args, manifest, report, rows)
    else:
        rows = sweep(config, args.seeds)
        by = {o.value: [r["final_sparsity"] for r in rows if r["objective"] == o.value] for o in Objective}
        report = {"runs": rows, "mean_final_sparsity": {k: mean(v) for k, v in by.items()},
                  "gap_dpo_minus_sft": mean(by["DPO_IND"]) - mean(by["SFT_OOD"])}
        _emit(args, manifest, report, rows)


COMMANDS = {"sparsity": cmd_sparsity, "layers": cmd_layers, "mask": cmd_mask, "rank": cmd_rank,
            "dynamics": cmd_dynamics, "classify": cmd_classify, "toy": cmd_toy}


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help / --version
        return EXIT_OK if not e.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except UsageError as e:
        print(f"subnetkit: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"subnetkit: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"subnetkit: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"subnetkit: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
