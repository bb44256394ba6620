"""Cross-validation plans, the paired permutation test, and the experiment runner."""

from __future__ import annotations

import csv
import enum
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentedView, build_augmented_corpus
from .baseline import LAMBDA_GRID, EnvelopeDecoder, cut_windows
from .data import EpochSet, Origin, Paradigm
from .eegnet import EegNetConfig, build_model, forward, param_count
from .rng import RngStream, as_stream
from .synth import synth_envelope_dataset
from .training import TrainConfig, balanced_accuracy, train

logger = logging.getLogger(__name__)

VARIANTS = ("original", "augmented", "paradigm-specific", "linear-baseline")


class Scheme(str, enum.Enum):
    EIGHT_FOLD = "8fold"
    LOSO = "loso"


class LeakageError(RuntimeError):
    """A training set shares provenance ids with its validation or test set."""


# ----------------------------------------------------------------- split plans


@dataclass(frozen=True)
class Fold:
    index: int
    train: tuple[int, ...]
    validation: tuple[int, ...]
    test: tuple[int, ...]


@dataclass(frozen=True)
class SplitPlan:
    """Fold assignments over trial ids (8-fold) or subject ids (LOSO)."""

    scheme: Scheme
    folds: tuple[Fold, ...]

    @property
    def key(self) -> str:
        return "trial" if self.scheme == Scheme.EIGHT_FOLD else "subject"

    def __len__(self):
        return len(self.folds)

    def units(self, epochs) -> np.ndarray:
        return np.asarray(epochs.trial if self.key == "trial" else epochs.subject)

    def masks(self, epochs, fold: Fold | int) -> dict[str, np.ndarray]:
        fold = self.folds[fold] if isinstance(fold, int) else fold
        u = self.units(epochs)
        return {role: np.isin(u, getattr(fold, role)) for role in ("train", "validation", "test")}

    def split(self, epochs: EpochSet, fold) -> tuple[EpochSet, EpochSet, EpochSet]:
        m = self.masks(epochs, fold)
        return epochs.subset(m["train"]), epochs.subset(m["validation"]), epochs.subset(m["test"])

    def check(self):
        """Raise if folds fail to partition the units or roles overlap."""
        tests = [set(f.test) for f in self.folds]
        universe = set().union(*tests)
        if sum(len(t) for t in tests) != len(universe):
            raise ValueError("test units appear in more than one fold")
        for f in self.folds:
            tr, va, te = set(f.train), set(f.validation), set(f.test)
            if tr & va or tr & te or va & te:
                raise ValueError(f"fold {f.index} has overlapping roles")
            if tr | va | te != universe:
                raise ValueError(f"fold {f.index} does not cover every unit")
        return self

    def to_dict(self):
        return {"scheme": self.scheme.value,
                "folds": [{"index": f.index, "train": list(f.train), "validation": list(f.validation),
                           "test": list(f.test)} for f in self.folds]}

    @classmethod
    def from_dict(cls, d):
        folds = tuple(Fold(f["index"], tuple(f["train"]), tuple(f["validation"]), tuple(f["test"]))
                      for f in d["folds"])
        return cls(Scheme(d["scheme"]), folds).check()


def _n_val(n, fraction):
    return min(n - 1, max(1, int(round(n * fraction))))


def make_8fold_plan(original: EpochSet, rng=None, n_folds=8, val_fraction=0.2) -> SplitPlan:
    """Deal each subject/paradigm's shuffled trials into ``n_folds`` folds.

    Within each fold's training portion the trials of every subject/paradigm
    are split again, ``val_fraction`` of them for validation.
    """
    rng = as_stream(rng, "plan/8fold")
    groups: dict[tuple[int, int], list[int]] = {}
    for s, p, t in zip(original.subject.tolist(), original.paradigm.tolist(), original.trial.tolist()):
        groups.setdefault((s, p), set()).add(t)
    if not groups:
        raise ValueError("no epochs to split")
    fold_of: dict[tuple[int, int], list[np.ndarray]] = {}
    for key in sorted(groups):
        trials = np.array(sorted(groups[key]))
        if len(trials) < n_folds:
            raise ValueError(f"subject {key[0]} paradigm {key[1]} has {len(trials)} trials, "
                             f"fewer than {n_folds} folds")
        shuffled = trials[rng.child(f"deal/subject={key[0]}/paradigm={key[1]}").permutation(len(trials))]
        fold_of[key] = [shuffled[f::n_folds] for f in range(n_folds)]
    folds = []
    for f in range(n_folds):
        train, val, test = [], [], []
        for key in sorted(fold_of):
            parts = fold_of[key]
            test.extend(parts[f].tolist())
            pool = np.sort(np.concatenate([parts[g] for g in range(n_folds) if g != f]))
            perm = rng.child(f"validation/fold={f}/subject={key[0]}/paradigm={key[1]}").permutation(len(pool))
            k = _n_val(len(pool), val_fraction)
            val.extend(pool[perm[:k]].tolist())
            train.extend(pool[perm[k:]].tolist())
        folds.append(Fold(f, tuple(sorted(train)), tuple(sorted(val)), tuple(sorted(test))))
    return SplitPlan(Scheme.EIGHT_FOLD, tuple(folds)).check()


def make_loso_plan(subjects=24, rng=None, val_fraction=0.2) -> SplitPlan:
    """One fold per held-out subject; the rest split by subject, ``val_fraction`` to validation."""
    subjects = list(range(1, subjects + 1)) if isinstance(subjects, int) else sorted(int(s) for s in subjects)
    if len(subjects) < 3:
        raise ValueError("LOSO needs at least three subjects")
    rng = as_stream(rng, "plan/loso")
    folds = []
    for i, held in enumerate(subjects):
        rest = np.array([s for s in subjects if s != held])
        perm = rng.child(f"fold={i}").permutation(len(rest))
        k = _n_val(len(rest), val_fraction)
        folds.append(Fold(i, tuple(sorted(rest[perm[k:]].tolist())), tuple(sorted(rest[perm[:k]].tolist())),
                          (held,)))
    return SplitPlan(Scheme.LOSO, tuple(folds)).check()


# ----------------------------------------------------------------- statistics


def _sign_patterns(n):
    bits = (np.arange(2 ** n)[:, None] >> np.arange(n)[None, :]) & 1
    return 1.0 - 2.0 * bits


def paired_permutation_test(a, b, n_draws=100_000, rng=None, method="auto", exact_max=12) -> float:
    """One-sided sign-flip test of ``mean(a - b) > 0``.

    Exhaustive for ``n <= exact_max`` (``p = #{>= observed} / 2**n``),
    otherwise ``p = (1 + #{>= observed}) / (1 + n_draws)``.
    """
    if np.shape(a) != np.shape(b):
        raise ValueError("paired scores differ in length")
    d = (np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)).ravel()
    n = len(d)
    if n < 2:
        raise ValueError("need at least two pairs")
    observed = d.mean()
    tol = 1e-9 * max(np.abs(d).mean(), 1e-300)
    if method == "auto":
        method = "exact" if n <= exact_max else "sampled"
    if method == "exact":
        if n > 24:
            raise ValueError("exhaustive enumeration is limited to 24 pairs")
        means = _sign_patterns(n) @ d / n
        return float(np.mean(means >= observed - tol))
    if method != "sampled":
        raise ValueError(f"unknown method {method!r}")
    rng = as_stream(rng, "permutation")
    hits = 0
    for lo in range(0, n_draws, 10_000):
        m = min(10_000, n_draws - lo)
        signs = 1.0 - 2.0 * rng.draw_integers(0, 2, size=(m, n))
        hits += int(np.sum(signs @ d / n >= observed - tol))
    return (1 + hits) / (1 + n_draws)


# ----------------------------------------------------------------- experiments


@dataclass(frozen=True)
class Comparison:
    """``variant_a`` on ``paradigm_a`` is hypothesised better than ``variant_b`` on ``paradigm_b``."""

    variant_a: str
    paradigm_a: int
    variant_b: str
    paradigm_b: int

    @property
    def name(self):
        if self.paradigm_a == self.paradigm_b:
            return f"{self.variant_a} > {self.variant_b} (P{self.paradigm_a})"
        return f"{self.variant_a} P{self.paradigm_a} > {self.variant_b} P{self.paradigm_b}"


def declared_comparisons(variants, paradigms) -> list[Comparison]:
    out = []
    v = set(variants)
    for p in paradigms:
        if {"augmented", "original"} <= v:
            out.append(Comparison("augmented", p, "original", p))
    for p in paradigms:
        if {"paradigm-specific", "augmented"} <= v:
            out.append(Comparison("paradigm-specific", p, "augmented", p))
    if 3 in paradigms and "linear-baseline" in v:
        for model in ("paradigm-specific", "augmented"):
            if model in v:
                out.append(Comparison(model, 3, "linear-baseline", 3))
                break
    if "augmented" in v and 3 in paradigms:
        for p in (1, 2):
            if p in paradigms:
                out.append(Comparison("augmented", p, "augmented", 3))
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: EegNetConfig = field(default_factory=EegNetConfig)
    variants: tuple = ("original", "augmented", "paradigm-specific", "linear-baseline")
    paradigms: tuple = (1, 2, 3)
    augment_validation: bool = True
    folds: tuple | None = None  # run a subset of fold indices
    n_permutations: int = 100_000
    baseline_snr_db: float = -30.0
    baseline_trial_s: float = 60.0
    baseline_lam_grid: tuple = LAMBDA_GRID

    def __post_init__(self):
        unknown = set(self.variants) - set(VARIANTS)
        if unknown:
            raise ValueError(f"unknown variants {sorted(unknown)}")


@dataclass
class ExperimentReport:
    scheme: str
    rows: list[dict] = field(default_factory=list)
    curves: list[dict] = field(default_factory=list)
    audits: list[dict] = field(default_factory=list)
    comparisons: list[dict] = field(default_factory=list)
    model_params: dict = field(default_factory=dict)  # convention -> scalar count

    ROW_FIELDS = ("scheme", "fold", "variant", "paradigm", "n_train", "n_test", "balanced_accuracy",
                  "best_pass", "best_val_loss")

    def accuracies(self, variant, paradigm) -> np.ndarray:
        """Per-fold accuracies in fold order."""
        rows = sorted((r for r in self.rows if r["variant"] == variant and r["paradigm"] == paradigm),
                      key=lambda r: r["fold"])
        return np.array([r["balanced_accuracy"] for r in rows])

    def folds(self) -> list[int]:
        return sorted({r["fold"] for r in self.rows})

    def variants(self) -> list[str]:
        present = {r["variant"] for r in self.rows}
        return [v for v in VARIANTS if v in present]

    def paradigms(self) -> list[int]:
        return sorted({r["paradigm"] for r in self.rows})

    def compare(self, comp: Comparison, n_draws=100_000, rng=None) -> dict:
        a = self.accuracies(comp.variant_a, comp.paradigm_a)
        b = self.accuracies(comp.variant_b, comp.paradigm_b)
        ok = np.isfinite(a) & np.isfinite(b)
        a, b = a[ok], b[ok]
        p = paired_permutation_test(a, b, n_draws, rng) if len(a) >= 2 else float("nan")
        return {"comparison": comp.name, "variant_a": comp.variant_a, "paradigm_a": comp.paradigm_a,
                "variant_b": comp.variant_b, "paradigm_b": comp.paradigm_b, "n": int(len(a)),
                "mean_a": float(a.mean()) if len(a) else float("nan"),
                "mean_b": float(b.mean()) if len(b) else float("nan"),
                "wins": int(np.sum(a > b)), "p_value": p}

    def run_comparisons(self, comparisons=None, n_draws=100_000, master_seed=0):
        comparisons = comparisons or declared_comparisons(self.variants(), self.paradigms())
        root = RngStream(master_seed, "comparisons")
        self.comparisons = [self.compare(c, n_draws, root.child(c.name)) for c in comparisons]
        return self.comparisons

    # serialisation ----------------------------------------------------------

    def rows_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.ROW_FIELDS)
        for r in sorted(self.rows, key=lambda r: (r["fold"], VARIANTS.index(r["variant"]), r["paradigm"])):
            w.writerow([_fmt(r[k]) for k in self.ROW_FIELDS])
        return buf.getvalue()

    def comparisons_csv(self) -> str:
        fields = ("comparison", "variant_a", "paradigm_a", "variant_b", "paradigm_b", "n", "mean_a", "mean_b",
                  "wins", "p_value")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(fields)
        for c in self.comparisons:
            w.writerow([_fmt(c[k]) for k in fields])
        return buf.getvalue()

    def curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("fold", "variant", "paradigm", "pass", "train_loss", "val_loss"))
        for c in self.curves:
            for i, (tl, vl) in enumerate(zip(c["train_loss"], c["val_loss"])):
                w.writerow([c["fold"], c["variant"], c["paradigm"], i, _fmt(tl), _fmt(vl)])
        return buf.getvalue()

    @classmethod
    def from_rows_csv(cls, text: str) -> "ExperimentReport":
        rows = []
        for r in csv.DictReader(io.StringIO(text)):
            rows.append({"scheme": r["scheme"], "fold": int(r["fold"]), "variant": r["variant"],
                         "paradigm": int(r["paradigm"]), "n_train": int(r["n_train"]), "n_test": int(r["n_test"]),
                         "balanced_accuracy": float(r["balanced_accuracy"]),
                         "best_pass": int(r["best_pass"]), "best_val_loss": float(r["best_val_loss"])})
        if not rows:
            raise ValueError("report has no rows")
        return cls(rows[0]["scheme"], rows)

    def to_markdown(self) -> str:
        paradigms = self.paradigms()
        lines = [f"## Balanced accuracy ({self.scheme}, {len(self.folds())} folds)", "",
                 "| variant | " + " | ".join(f"Prdm. {p}" for p in paradigms) + " |",
                 "|---|" + "---|" * len(paradigms)]
        for v in self.variants():
            cells = []
            for p in paradigms:
                acc = self.accuracies(v, p)
                acc = acc[np.isfinite(acc)]
                cells.append(f"{acc.mean():.3f} ± {acc.std():.3f}" if len(acc) else "–")
            lines.append(f"| {v} | " + " | ".join(cells) + " |")
        if self.comparisons:
            lines += ["", "## One-sided paired permutation tests", "",
                      "| comparison | mean a | mean b | wins | p | |", "|---|---|---|---|---|---|"]
            for c in self.comparisons:
                lines.append(f"| {c['comparison']} | {c['mean_a']:.3f} | {c['mean_b']:.3f} | {c['wins']}/{c['n']} "
                             f"| {c['p_value']:.4g} | {_stars(c['p_value'])} |")
            lines += ["", "Markers: ** p < 0.001, * 0.001 <= p <= 0.05, • p > 0.05."]
        if self.model_params:
            lines += ["", "## Model size", "", "| convention | parameters |", "|---|---|"]
            lines += [f"| {k} | {v} |" for k, v in self.model_params.items()]
        return "\n".join(lines) + "\n"

    def leakage(self) -> int:
        """Total number of shared provenance ids across every audited fold and variant."""
        return sum(a["train_val"] + a["train_test"] for a in self.audits)


def _fmt(v):
    if isinstance(v, float):
        return "nan" if np.isnan(v) else f"{v:.6f}"
    return str(v)


def _stars(p):
    if not np.isfinite(p):
        return ""
    return "**" if p < 0.001 else ("*" if p <= 0.05 else "•")


def audit(train_ids: set, val_ids: set, test_ids: set) -> dict:
    return {"train_val": len(train_ids & val_ids), "train_test": len(train_ids & test_ids)}


def _eval_accuracy(model, test: EpochSet, paradigm) -> tuple[float, int]:
    sub = test.select(paradigm=paradigm)
    if len(sub) == 0 or len(np.unique(sub.label)) < 2:
        return float("nan"), len(sub)
    probs = forward(model, sub.data, mode="eval")
    return balanced_accuracy(probs, sub.label), len(sub)


def _fit(train_set, val_set, cfg: ExperimentConfig, rng: RngStream):
    model = build_model(cfg.model, rng.child("init"))
    result = train(model, train_set, val_set, cfg.train, rng.child("train"))
    model.load_state(result.best_state)
    return model, result


def _augmented_view(epochs: EpochSet, rng: RngStream) -> AugmentedView:
    return AugmentedView(list(build_augmented_corpus(epochs, rng).sets.values()))


def run_fold(original: EpochSet, plan: SplitPlan, fold: Fold, cfg: ExperimentConfig, master_seed: int,
             envelope_trials=None) -> dict:
    """Train and evaluate every configured variant on one fold."""
    rng = RngStream(master_seed, f"experiment/{plan.scheme.value}/fold={fold.index}")
    tr, va, te = plan.split(original, fold)
    if np.any(te.origin != Origin.EXPERIMENTAL):
        raise ValueError("test epochs must all be experimental")
    paradigms = [p for p in cfg.paradigms if p in te.paradigms]
    rows, curves, audits = [], [], []
    test_ids = te.source_ids()

    def record(variant, paradigm, acc, n_train, n_test, result):
        rows.append({"scheme": plan.scheme.value, "fold": fold.index, "variant": variant, "paradigm": int(paradigm),
                     "n_train": int(n_train), "n_test": int(n_test), "balanced_accuracy": float(acc),
                     "best_pass": int(result.best_pass) if result else -1,
                     "best_val_loss": float(result.best_val_loss) if result else float("nan")})

    def log_curve(variant, paradigm, result):
        curves.append({"fold": fold.index, "variant": variant, "paradigm": paradigm,
                       "train_loss": result.train_loss, "val_loss": result.val_loss})

    aug_tr = aug_va = None
    if {"augmented", "paradigm-specific"} & set(cfg.variants):
        aug_tr = _augmented_view(tr, rng.child("augment/train"))
        aug_va = AugmentedView([va])
        if cfg.augment_validation:
            try:
                aug_va = _augmented_view(va, rng.child("augment/validation"))
            except ValueError as exc:
                logger.warning("fold %d: validation set not augmented (%s)", fold.index, exc)

    for variant in cfg.variants:
        v_rng = rng.child(f"variant={variant}")
        if variant in ("original", "augmented"):
            train_set, val_set = (tr, va) if variant == "original" else (aug_tr, aug_va)
            audits.append({"fold": fold.index, "variant": variant,
                           **audit(train_set.source_ids(), val_set.source_ids(), test_ids)})
            model, result = _fit(train_set, val_set, cfg, v_rng)
            log_curve(variant, 0, result)
            for p in paradigms:
                acc, n_test = _eval_accuracy(model, te, p)
                record(variant, p, acc, len(train_set), n_test, result)
        elif variant == "paradigm-specific":
            for p in paradigms:
                train_set, val_set = aug_tr.select_paradigm(p), aug_va.select_paradigm(p)
                audits.append({"fold": fold.index, "variant": f"{variant}/P{p}",
                               **audit(train_set.source_ids(), val_set.source_ids(), test_ids)})
                model, result = _fit(train_set, val_set, cfg, v_rng.child(f"paradigm={p}"))
                log_curve(variant, p, result)
                acc, n_test = _eval_accuracy(model, te, p)
                record(variant, p, acc, len(train_set), n_test, result)
        elif variant == "linear-baseline" and int(Paradigm.P3) in paradigms:
            acc, n_train, n_test = _run_baseline(plan, fold, cfg, envelope_trials, v_rng)
            record(variant, 3, acc, n_train, n_test, None)
    return {"rows": rows, "curves": curves, "audits": audits}


def _run_baseline(plan: SplitPlan, fold: Fold, cfg: ExperimentConfig, trials, rng: RngStream):
    """Stimulus reconstruction on the envelope-driven records of the fold's P3 units."""
    def pick(units):
        units = set(units)
        return [t for t in trials if (t.trial_id if plan.key == "trial" else t.subject_id) in units]

    Xtr, atr, _ = cut_windows(pick(fold.train))
    Xva, ava, _ = cut_windows(pick(fold.validation))
    Xte, ate, ute = cut_windows(pick(fold.test))
    if len(Xtr) == 0 or len(Xte) == 0:
        return float("nan"), len(Xtr), len(Xte)
    dec = EnvelopeDecoder(lam="auto" if len(Xva) else 1e-2, lam_grid=cfg.baseline_lam_grid)
    dec.fit(Xtr, atr, validation_data=(Xva, ava) if len(Xva) else None)
    # Present the streams in random order; label 1 means stream 1 is attended.
    swap = rng.child("order").draw_uniform(len(Xte)) < 0.5
    env1 = np.where(swap[:, None], ute, ate)
    env2 = np.where(swap[:, None], ate, ute)
    truth = (~swap).astype(int)
    pred = dec.classify(Xte, env1, env2)
    return balanced_accuracy(pred.astype(float), truth), len(Xtr), len(Xte)


def model_size(cfg: EegNetConfig) -> dict:
    """Parameter counts of the configured network under both counting conventions."""
    model = build_model(cfg)
    return {"trainable": param_count(model, "trainable"), "+buffers": param_count(model, "+buffers")}


def run_experiment(original: EpochSet, plan: SplitPlan, cfg: ExperimentConfig = None, master_seed=0, jobs=1,
                   envelope_trials=None) -> ExperimentReport:
    """Run every fold of ``plan`` and assemble the report in fold order.

    Splitting precedes augmentation: each fold augments its own training
    (and validation) portion. Raises :class:`LeakageError` if any fold's
    training provenance touches its validation or test epochs.
    """
    cfg = cfg or ExperimentConfig()
    if np.any(original.origin != Origin.EXPERIMENTAL):
        raise ValueError("plans are made from the original (experimental) set")
    if "linear-baseline" in cfg.variants and envelope_trials is None:
        n_subjects = max(original.subjects)
        envelope_trials = synth_envelope_dataset(n_subjects=n_subjects, duration_s=cfg.baseline_trial_s,
                                                 snr_db=cfg.baseline_snr_db, master_seed=master_seed)
    folds = [f for f in plan.folds if cfg.folds is None or f.index in cfg.folds]
    args = [(original, plan, f, cfg, master_seed, envelope_trials) for f in folds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_fold, *zip(*args)))
    else:
        results = [run_fold(*a) for a in args]
    report = ExperimentReport(plan.scheme.value, model_params=model_size(cfg.model))
    for res in results:
        report.rows.extend(res["rows"])
        report.curves.extend(res["curves"])
        report.audits.extend(res["audits"])
    if report.leakage():
        raise LeakageError(f"provenance overlap detected: {report.audits}")
    report.run_comparisons(n_draws=cfg.n_permutations, master_seed=master_seed)
    return report
