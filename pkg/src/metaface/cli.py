"""Command line workbench: ``metaface <command> [options]``.

Every command that accepts a run configuration reads an optional flat
``key=value`` file (``--config``) and then applies command line flags, so a
flag always wins over the file. Each ``RunConfig`` field has a flag of the
same name with dashes, e.g. ``--outer-steps 50``.

Exit codes: 0 success, 2 configuration error, 3 data error (missing or
malformed corpus, checkpoint or trace, I/O failure), 4 numeric failure.
"""

import argparse
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import fields
from pathlib import Path

from . import autodiff as ad
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, parse_config_text
from .corpus import (
    CorpusError,
    default_manifest,
    expected_noise_norm,
    generate_corpus,
    load_corpus,
    oracle_motion,
    speaker_styles,
    split,
)
from .meta import MetaError
from .model import ConfigError
from .objectives import aggregate, evaluate_clip
from .pipeline import (
    TRACE_FIELDS,
    ablation_cells,
    adapt_speaker,
    evaluate_speaker,
    meta_train,
    run_ablation,
    support_latent,
    zero_predictions,
)
from .serialization import FormatError

log = logging.getLogger("metaface")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
TRACE_VERSION = "metaface-trace/1"
RUN_DIR_ENV = "METAFACE_RUN_DIR"


class DataError(Exception):
    pass


class LockError(Exception):
    pass


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".17g")
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def run_root():
    return Path(os.environ.get(RUN_DIR_ENV) or "runs")


@contextmanager
def run_lock(run_dir):
    """Exclusive lock file so one command at a time writes ``run_dir``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{run_dir} is locked by another command (remove {lock} if stale)") from None
    with os.fdopen(fd, "w") as fh:
        fh.write(f"pid={os.getpid()}\n")
    try:
        yield run_dir
    finally:
        lock.unlink(missing_ok=True)


# --- traces -------------------------------------------------------------------

class TraceWriter:
    """Append-only trace: ``# key=value`` header lines, then one record per step."""

    def __init__(self, path, header):
        self.path = Path(path)
        with open(self.path, "w") as fh:
            fh.write(f"# version={TRACE_VERSION}\n")
            for k, v in header.items():
                fh.write(f"# {k}={_fmt(v)}\n")

    def append(self, row):
        with open(self.path, "a") as fh:
            fh.write(" ".join(f"{k}={_fmt(row[k])}" for k in TRACE_FIELDS) + "\n")


def read_trace(path):
    """(header dict, list of row dicts) from a trace file."""
    header, rows = {}, []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read trace {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            k, _, v = line[1:].strip().partition("=")
            header[k] = v
            continue
        row = {}
        for item in line.split():
            k, sep, v = item.partition("=")
            if not sep:
                raise DataError(f"{path}:{lineno}: malformed record {line!r}")
            row[k] = int(v) if k == "step" else float(v)
        missing = [f for f in TRACE_FIELDS if f not in row]
        if missing:
            raise DataError(f"{path}:{lineno}: missing fields {missing}")
        rows.append(row)
    if header.get("version") != TRACE_VERSION:
        raise DataError(f"{path}: not a trace file (version {header.get('version')!r})")
    return header, rows


# --- config -------------------------------------------------------------------

def _add_config_flags(p):
    p.add_argument("--config", help="flat key=value config file")
    for f in fields(RunConfig):
        p.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, default=None, metavar=f.name.upper())


def resolve_config(args):
    values = {}
    if args.config:
        try:
            values.update(parse_config_text(Path(args.config).read_text()))
        except OSError as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from exc
    for f in fields(RunConfig):
        v = getattr(args, "cfg_" + f.name, None)
        if v is not None:
            values[f.name] = v
    run = RunConfig().with_overrides(values)
    if "out" not in values:
        run = run.with_overrides({"out": str(run_root() / "default")})
    return run


def _load_split(run, adapt_clips=None):
    try:
        corpus = load_corpus(run.corpus)
    except (OSError, FormatError) as exc:
        raise DataError(f"cannot load corpus {run.corpus}: {exc}") from exc
    sp = split(corpus, run.held_out_speakers, run.adapt_clips if adapt_clips is None else adapt_clips)
    return corpus, sp


def _write_config(run, run_dir):
    (Path(run_dir) / "config.txt").write_text(run.to_text())


# --- commands -----------------------------------------------------------------

def cmd_gen_data(args):
    out = Path(args.out) if args.out else run_root() / "corpus"
    manifest = default_manifest(args.speakers, args.clips, args.seed)
    try:
        manifest.validate()
    except CorpusError as exc:
        raise ConfigError(f"corpus sizing: {exc}") from exc
    generate_corpus(manifest, out)
    print(f"corpus={out}")
    print(f"manifest_hash={manifest.digest()}")
    return EXIT_OK


def cmd_meta_train(args):
    run = resolve_config(args)
    corpus, sp = _load_split(run)
    with run_lock(run.out) as run_dir:
        _write_config(run, run_dir)
        for line in sp.verification():
            log.info(line)
        cfg = run.model_config()
        header = {
            "seed": run.seed,
            "order": run.order,
            "meta_init": run.meta_init,
            "drmn": run.drmn,
            "inner_lr": run.inner_lr,
            "outer_lr": run.outer_lr,
            "outer_steps": run.outer_steps,
            "config_hash": cfg.digest(),
            "manifest_hash": corpus.manifest.digest(),
            "fields": ",".join(TRACE_FIELDS),
        }
        trace = TraceWriter(run_dir / "trace.txt", header)
        res = meta_train(sp.meta_train, run, run.seed, on_row=trace.append)
        ckpt = Checkpoint(
            "full", cfg, res.params, res.adapters, step=res.steps, rng_state=res.rng_state,
            info={"seed": run.seed, "order": run.order, "meta_init": run.meta_init, "drmn": run.drmn,
                  "manifest_hash": corpus.manifest.digest()},
        )
        path = save_checkpoint(ckpt, run_dir / "checkpoint.bin")
    print(f"checkpoint={path}")
    if res.rows:
        print(f"query_l2_face first={_fmt(res.rows[0]['query_l2_face'])} last={_fmt(res.rows[-1]['query_l2_face'])}")
    return EXIT_OK


def _checkpoint(path, run):
    try:
        return load_checkpoint(path, run.model_config().digest())
    except FormatError as exc:
        raise DataError(str(exc)) from exc


def cmd_adapt(args):
    run = resolve_config(args)
    if args.clips < 1:
        raise ConfigError("clip_count must be at least 1 (empty support set)")
    corpus, sp = _load_split(run)
    if args.speaker not in sp.adapt:
        raise DataError(f"speaker {args.speaker} is not in the evaluation split (held out: {run.held_out})")
    pool = sp.adapt[args.speaker]
    if args.clips > len(pool):
        raise DataError(f"speaker {args.speaker} has {len(pool)} adaptation clips, asked for {args.clips}")
    base = _checkpoint(args.checkpoint, run)
    support = pool[: args.clips]
    out = Path(args.out) if args.out else Path(run.out) / f"delta_{args.speaker}.bin"
    with run_lock(out.parent):
        params, adapters = adapt_speaker(base.params, base.adapters, support, run, run.seed, drmn=run.drmn)
        extra = {}
        latent = support_latent(params, support, run, drmn=run.drmn)
        if latent is not None:
            extra = {"latent_mean": latent[0], "latent_log_var": latent[1]}
        kind = "delta" if run.finetune_scope == "lora-only" else "full"
        stored = params if kind == "full" else params.subset("__none__")
        ckpt = Checkpoint(
            kind, base.model_config, stored, adapters, step=run.adapt_steps,
            info={"speaker": args.speaker, "clips": args.clips, "scope": run.finetune_scope, "seed": run.seed},
            extra=extra,
        )
        path = save_checkpoint(ckpt, out)
    print(f"delta={path}")
    return EXIT_OK


def _report_text(reports, agg):
    lines = []
    for i, r in enumerate(reports):
        lines.append(f"# clip {i}")
        lines.append(r.to_text().rstrip("\n"))
    return "\n".join(lines) + "\n", agg.to_text()


def cmd_eval(args):
    run = resolve_config(args)
    corpus, sp = _load_split(run)
    cfg = run.model_config()
    styles = speaker_styles(corpus.manifest)
    out_dir = Path(args.out) if args.out else Path(run.out) / f"eval_{args.model}"
    params = adapters = latent = None
    if args.model == "checkpoint":
        if not args.checkpoint:
            raise ConfigError("--checkpoint is required with --model checkpoint")
        base = _checkpoint(args.checkpoint, run)
        params, adapters = base.params, base.adapters
        if args.delta:
            delta = _checkpoint(args.delta, run)
            adapters = delta.adapters or adapters
            if delta.kind == "full":
                params = delta.params
            if "latent_mean" in delta.extra:
                latent = (delta.extra["latent_mean"], delta.extra["latent_log_var"])
    with run_lock(out_dir):
        per_speaker = []
        for sid in sorted(sp.eval):
            clips = sp.eval[sid]
            if args.model == "zero":
                reports, agg = zero_predictions(clips, cfg.lip_range)
            elif args.model == "oracle":
                reports = [evaluate_clip(oracle_motion(styles[sid], f).frames, m, cfg.lip_range) for f, m in clips]
                agg = aggregate(reports)
            else:
                reports, agg = evaluate_speaker(params, adapters, sp.adapt[sid], clips, run, run.seed, latent=latent)
            per_clip, agg_text = _report_text(reports, agg)
            (out_dir / f"{sid}_clips.txt").write_text(per_clip)
            (out_dir / f"{sid}.txt").write_text(agg_text)
            per_speaker.append(agg)
        total = aggregate(per_speaker)
        floor = expected_noise_norm(corpus.manifest.noise_std)
        (out_dir / "aggregate.txt").write_text(total.to_text() + f"noise_floor={_fmt(floor)}\n")
    print(total.to_text(), end="")
    print(f"noise_floor={_fmt(floor)}")
    return EXIT_OK


def _ablation_table(cells):
    head = "meta_init,drmn,finetune,clips,trainable,status,seeds,l2_face_mean,l2_face_min,l2_face_max,lip_sync_mean,lip_sync_min,lip_sync_max,lip_max_mean"
    rows = [head]
    for c in cells:
        l2 = c.summary("l2_face")
        ls = c.summary("lip_sync")
        lm = c.summary("lip_max")
        rows.append(",".join([
            "on" if c.meta_init else "off", "on" if c.drmn else "off", c.scope, str(c.adapt_clips),
            str(c.trainable), c.status, "/".join(str(s) for s in c.seeds),
            *(_fmt(v) for v in l2), *(_fmt(v) for v in ls), _fmt(lm[0]),
        ]))
    return "\n".join(rows) + "\n"


def cmd_ablate(args):
    run = resolve_config(args)
    cells = ablation_cells(run)
    pool = max(c.adapt_clips for c in cells)
    corpus, sp = _load_split(run, adapt_clips=pool)
    with run_lock(run.out) as run_dir:
        _write_config(run, run_dir)

        def progress(cell):
            log.info("%s status=%s l2_face=%.6g", cell.label, cell.status, cell.summary("l2_face")[0])
            if cell.error:
                log.warning("%s: %s", cell.label, cell.error)

        run_ablation(sp, run, cells, on_cell=progress)
        table = _ablation_table(cells)
        (run_dir / "ablation.csv").write_text(table)
        per_seed = []
        for c in cells:
            for s in c.seeds:
                if s in c.metrics:
                    per_seed.append(f"# {c.label} seed={s}\n{c.metrics[s].to_text()}")
        (run_dir / "ablation_seeds.txt").write_text("".join(per_seed))
    print(table, end="")
    failed = [c for c in cells if c.status != "ok"]
    if failed and all("NumericError" in c.error for c in failed) and len(failed) == len(cells):
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_report(args):
    paths = [Path(p) for p in args.traces]
    lines = ["trace,steps,order,meta_init,drmn,first_recon,last_recon,first_lnp,last_lnp,first_query_l2_face,last_query_l2_face"]
    for p in paths:
        if p.is_dir():
            p = p / "trace.txt"
        header, rows = read_trace(p)
        if not rows:
            lines.append(f"{p},0,{header.get('order', '')},{header.get('meta_init', '')},{header.get('drmn', '')},,,,,,")
            continue
        f, l = rows[0], rows[-1]
        lines.append(",".join([
            str(p), str(len(rows)), header.get("order", ""), header.get("meta_init", ""), header.get("drmn", ""),
            _fmt(f["recon"]), _fmt(l["recon"]), _fmt(f["lnp"]), _fmt(l["lnp"]),
            _fmt(f["query_l2_face"]), _fmt(l["query_l2_face"]),
        ]))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="metaface", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    p.add_argument("--speakers", type=int, default=12)
    p.add_argument("--clips", type=int, default=10)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", help=f"corpus directory (default ${RUN_DIR_ENV}/corpus)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("meta-train", help="meta-train and write a checkpoint plus trace")
    _add_config_flags(p)
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("adapt", help="personalise a checkpoint to one held-out speaker")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--speaker", required=True)
    p.add_argument("--clips", type=int, default=4, help="number of adaptation clips")
    p.add_argument("--delta-out", dest="out", help="output path of the delta checkpoint")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="evaluate on the held-out speakers' evaluation clips")
    _add_config_flags(p)
    p.add_argument("--model", choices=("checkpoint", "zero", "oracle"), default="checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--delta", help="personal delta checkpoint from 'adapt'")
    p.add_argument("--report-dir", dest="out", help="directory for report files")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the ablation matrix and clip-count sweep")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="summarise trace files as CSV")
    p.add_argument("traces", nargs="+", help="trace files or run directories")
    p.add_argument("--out", help="write the CSV here as well")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, MetaError, LockError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ad.NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CorpusError, CheckpointError, FormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
