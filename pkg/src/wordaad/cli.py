"""``wordaad`` command line: synth, preprocess, augment, train-eval, compare, report.

Every command writes ``<command>.provenance.json`` beside its outputs with
the resolved configuration, its hash, the master seed, package versions and
SHA-256 digests of inputs and outputs. Exit codes: 0 success, 2 config
error, 3 data error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .augment import build_augmented_corpus
from .config import ConfigError, RunConfig, defaults, load_config
from .data import EaadError, EpochSet, Label, class_counts, read_epochset, write_epochset
from .evaluation import (Comparison, ExperimentReport, SplitPlan, declared_comparisons, make_8fold_plan,
                         make_loso_plan, model_size, run_experiment)
from .preprocessing import ContinuousRecording, EpochingPipeline
from .rng import RngStream
from .synth import synth_dataset, synth_recording, planted_counts
from .training import DivergenceError

logger = logging.getLogger("wordaad")

STAGE_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4


class DataError(RuntimeError):
    """Missing, invalid or incompatible inputs."""


# ----------------------------------------------------------------- provenance


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions():
    import scipy
    import sklearn
    return {"wordaad": __version__, "stage": STAGE_VERSION, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "scikit-learn": sklearn.__version__}


def write_provenance(out: Path, command: str, cfg: RunConfig, inputs, outputs, extra=None):
    record = {
        "command": command,
        "master_seed": cfg.master_seed,
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
        "versions": _versions(),
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {Path(p).name: sha256_file(p) for p in outputs},
    }
    if extra:
        record.update(extra)
    path = out / f"{command}.provenance.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path


def check_stage(input_path: Path):
    """Reject inputs produced by an incompatible stage version."""
    for prov in Path(input_path).parent.glob("*.provenance.json"):
        try:
            rec = json.loads(prov.read_text())
        except (OSError, ValueError):
            continue
        if Path(input_path).name in rec.get("outputs", {}):
            stage = rec.get("versions", {}).get("stage")
            if stage != STAGE_VERSION:
                raise DataError(f"{input_path} was written by stage version {stage}, expected {STAGE_VERSION}")


def _read_set(path) -> EpochSet:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing input {path}")
    check_stage(path)
    return read_epochset(path)


def _write_text(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


# ----------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig, out: Path, args) -> list[Path]:
    s = cfg["synth"]
    outputs = []
    if s["raw"]:
        raw_dir = out / "raw"
        raw_dir.mkdir(exist_ok=True)
        root = RngStream(cfg.master_seed, "synth/raw")
        for p in s["paradigms"]:
            counts = planted_counts(s["raw_subjects"], p, root.child(f"counts/paradigm={p}"))
            for subj in range(1, s["raw_subjects"] + 1):
                snr = cfg.snr_db()
                snr = snr[p] if isinstance(snr, dict) else snr
                rec = synth_recording(subj, p, counts[subj - 1], snr, root.child(f"subject={subj}/paradigm={p}"),
                                      snr_reference=s["snr_reference"])
                path = raw_dir / f"sub{subj:02d}_p{p}.npz"
                save_recording(path, rec)
                outputs.append(path)
    original = synth_dataset(n_subjects=s["n_subjects"], snr_db=cfg.snr_db(), master_seed=cfg.master_seed,
                             paradigms=s["paradigms"], snr_reference=s["snr_reference"])
    path = out / "original.eaad"
    write_epochset(original, path)
    outputs.append(path)
    outputs.append(_write_text(out / "original_counts.csv", counts_csv(original)))
    return outputs


def save_recording(path, rec: ContinuousRecording):
    with open(path, "wb") as fh:
        np.savez(fh, data=rec.data, fs_hz=rec.fs_hz, subject_id=rec.subject_id, paradigm=rec.paradigm,
                 event_samples=rec.event_samples, event_labels=rec.event_labels, event_trials=rec.event_trials)


def load_recording(path) -> ContinuousRecording:
    try:
        with np.load(path) as z:
            return ContinuousRecording(int(z["subject_id"]), int(z["paradigm"]), float(z["fs_hz"]), z["data"],
                                       z["event_samples"], z["event_labels"], z["event_trials"])
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read recording {path}: {exc}") from exc


def cmd_preprocess(cfg: RunConfig, out: Path, args) -> list[Path]:
    inputs = args.input or sorted((out / "raw").glob("*.npz"))
    if not inputs:
        raise DataError("no raw recordings given (use --input or run synth with raw = true)")
    recordings = []
    for p in inputs:
        if not Path(p).exists():
            raise DataError(f"missing input {p}")
        recordings.append(load_recording(p))
    pp = cfg["preprocess"]
    pipe = EpochingPipeline(lo_hz=pp["lo_hz"], hi_hz=pp["hi_hz"], n_taps=pp["n_taps"], reject_uv=pp["reject_uv"],
                            baseline=pp["baseline"])
    epochs = pipe.fit_transform(recordings)
    path = out / "preprocessed.eaad"
    write_epochset(epochs, path)
    return [path, _write_text(out / "preprocessed_counts.csv", counts_csv(epochs))]


def counts_csv(s: EpochSet) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("paradigm", "attended", "unattended"))
    for p in s.paradigms:
        t = class_counts(s, paradigm=p)
        w.writerow((p, t.total(paradigm=p, label=Label.ATTENDED), t.total(paradigm=p, label=Label.UNATTENDED)))
    return buf.getvalue()


def table1_csv(original: EpochSet, corpus) -> str:
    """Attended/unattended counts per set and paradigm, laid out like the dataset table."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("paradigm", "set", "attended", "unattended"))
    for p in original.paradigms:
        t = class_counts(original, paradigm=p)
        w.writerow((p, "original", t.total(paradigm=p, label=Label.ATTENDED),
                    t.total(paradigm=p, label=Label.UNATTENDED)))
        for name, (a, u) in corpus.counts(p).items():
            w.writerow((p, name, a, u))
    return buf.getvalue()


def cmd_augment(cfg: RunConfig, out: Path, args) -> list[Path]:
    src = Path(args.input[0]) if args.input else out / "original.eaad"
    original = _read_set(src)
    a = cfg["augment"]
    corpus = build_augmented_corpus(original, RngStream(cfg.master_seed, "augment"), gains_db=a["gains_db"],
                                    k_max=a["k_max"])
    outputs = [_write_text(out / "augmented_counts.csv", table1_csv(original, corpus))]
    recipes = out / "augmented_recipes.npz"
    with open(recipes, "wb") as fh:
        arrays = {}
        for name, s in corpus.sets.items():
            arrays.update({f"{name}/src": s.src, f"{name}/label": s.label, f"{name}/origin": s.origin,
                           f"{name}/template": s.template, f"{name}/width": s.width, f"{name}/shift": s.shift})
            for i, t in enumerate(s.templates):
                arrays[f"{name}/template{i}"] = t.waveform
        np.savez(fh, **arrays)
    outputs.append(recipes)
    if a["materialize"]:
        for name, s in corpus.sets.items():
            path = out / f"augmented_{name}.eaad"
            write_epochset(s.to_epochset(), path)
            outputs.append(path)
    return outputs


def _plan(cfg: RunConfig, original: EpochSet) -> SplitPlan:
    x = cfg["experiment"]
    rng = RngStream(cfg.master_seed, f"plan/{x['scheme']}")
    if x["scheme"] == "8fold":
        return make_8fold_plan(original, rng, n_folds=x["n_folds"], val_fraction=x["val_fraction"])
    return make_loso_plan(original.subjects, rng, val_fraction=x["val_fraction"])


def cmd_train_eval(cfg: RunConfig, out: Path, args) -> list[Path]:
    src = Path(args.input[0]) if args.input else out / "original.eaad"
    original = _read_set(src)
    plan = _plan(cfg, original)
    report = run_experiment(original, plan, cfg.experiment_config(), master_seed=cfg.master_seed, jobs=args.jobs)
    return [
        _write_text(out / "plan.json", json.dumps(plan.to_dict(), sort_keys=True) + "\n"),
        _write_text(out / "report.csv", report.rows_csv()),
        _write_text(out / "curves.csv", report.curves_csv()),
        _write_text(out / "comparisons.csv", report.comparisons_csv()),
        _write_text(out / "audit.json", json.dumps(report.audits, sort_keys=True) + "\n"),
        _write_text(out / "summary.md", report.to_markdown()),
    ]


def _load_report(path) -> ExperimentReport:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing report {path}")
    check_stage(path)
    try:
        return ExperimentReport.from_rows_csv(path.read_text(encoding="utf-8"))
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed report {path}: {exc}") from exc


def parse_side(text) -> tuple[str, int | None]:
    """``variant`` or ``variant@paradigm``."""
    name, _, p = text.partition("@")
    return name, (int(p) if p else None)


def cmd_compare(cfg: RunConfig, out: Path, args) -> list[Path]:
    src = Path(args.input[0]) if args.input else out / "report.csv"
    report = _load_report(src)
    if args.a or args.b:
        if not (args.a and args.b):
            raise ConfigError("--a and --b must be given together")
        (va, pa), (vb, pb) = parse_side(args.a), parse_side(args.b)
        paradigms = [pa] if pa is not None else report.paradigms()
        comps = [Comparison(va, p, vb, pb if pb is not None else p) for p in paradigms]
    else:
        comps = declared_comparisons(report.variants(), report.paradigms())
    report.run_comparisons(comps, n_draws=cfg["experiment"]["n_permutations"], master_seed=cfg.master_seed)
    return [_write_text(out / "compare.csv", report.comparisons_csv())]


def cmd_report(cfg: RunConfig, out: Path, args) -> list[Path]:
    inputs = args.input or [out / "report.csv"]
    sections, rows_text = [], []
    for i, path in enumerate(inputs):
        report = _load_report(path)
        report.model_params = model_size(cfg.model_config())
        report.run_comparisons(n_draws=cfg["experiment"]["n_permutations"], master_seed=cfg.master_seed)
        sections.append(f"# {Path(path).parent.name or Path(path).name}\n\n{report.to_markdown()}")
        text = report.rows_csv()
        rows_text.append(text if i == 0 else text.split("\n", 1)[1])
    return [_write_text(out / "report.md", "\n".join(sections)),
            _write_text(out / "report_all.csv", "".join(rows_text))]


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "augment": cmd_augment,
    "train-eval": cmd_train_eval,
    "compare": cmd_compare,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wordaad", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="sectioned key = value config file")
        p.add_argument("--seed", type=int, help="master seed (overrides [run] master_seed)")
        p.add_argument("--jobs", type=int, default=1, help="parallel folds (results do not depend on it)")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        p.add_argument("--input", type=Path, action="append", help="input file(s); defaults follow --out")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "compare":
            p.add_argument("--a", help="variant[@paradigm] hypothesised better")
            p.add_argument("--b", help="variant[@paradigm] compared against")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else defaults()
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg = cfg.with_seed(args.seed)
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        args.out.mkdir(parents=True, exist_ok=True)
        inputs = [Path(p) for p in (args.input or [])]
        outputs = COMMANDS[args.command](cfg, args.out, args)
        write_provenance(args.out, args.command, cfg, [p for p in inputs if p.exists()], outputs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DataError, EaadError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
