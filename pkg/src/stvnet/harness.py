"""Gate windows, subject-level k-fold cross-validation and the T sweep."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NoCavityError, SpecError, TrainingDivergedError, UndefinedMetricError
from .metrics import Agreement, MetricsRow, agreement, evaluate_masks, summarize, write_metrics_csv
from .networks import NetworkSpec, binarize, predict
from .phantom import GatedStudy
from .quantification import QuantResult, quantify_masks, voxel_ml, write_quant_csv
from .training import ArrayDataset, LogRow, TrainConfig, train, write_log

log = logging.getLogger(__name__)

SCORES = ("dsc", "hd", "asd", "sn", "sp")


@dataclass(frozen=True)
class SequenceSample:
    subject: str
    target_gate: int                 # 1-based
    window: tuple[int, ...]          # 1-based, ends at target_gate
    structure: str

    def __post_init__(self):
        if not self.window or self.window[-1] != self.target_gate:
            raise SpecError(f"window {self.window} must end at the target gate {self.target_gate}")


@dataclass(frozen=True)
class FoldPlan:
    fold: int                        # 1-based
    train: tuple[str, ...]
    test: tuple[str, ...]


def sequence_window(gates: int, target: int, length: int) -> list[int]:
    """The ``length`` gates ending at ``target``, wrapping so gate 1 follows gate G."""
    if not 1 <= target <= gates:
        raise SpecError(f"target gate {target} outside 1..{gates}")
    if length < 1:
        raise SpecError(f"window length must be >= 1, got {length}")
    if length > gates:
        raise SpecError(f"window length {length} exceeds the {gates} gates of the cycle")
    return [(target - length + k) % gates + 1 for k in range(length)]


def kfold_split(subjects: Sequence[str], k: int = 5, seed: int = 0) -> list[FoldPlan]:
    """Shuffle subjects with ``seed`` and cut them into ``k`` near-equal test folds."""
    if k < 2:
        raise SpecError(f"k-fold needs k >= 2, got {k}")
    ids = list(subjects)
    if len(set(ids)) != len(ids):
        raise SpecError("subject ids must be unique")
    if len(ids) < k:
        raise SpecError(f"{len(ids)} subjects cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    plans = []
    for f, part in enumerate(np.array_split(order, k)):
        test = set(part.tolist())
        plans.append(FoldPlan(
            fold=f + 1,
            train=tuple(ids[i] for i in order if i not in test),
            test=tuple(ids[i] for i in part),
        ))
    return plans


def build_samples(studies: Iterable[GatedStudy], structure: str, length: int) -> list[SequenceSample]:
    """One sample per (subject, gate): every gate is a target once."""
    out = []
    for s in studies:
        for g in range(1, s.gates + 1):
            out.append(SequenceSample(s.id, g, tuple(sequence_window(s.gates, g, length)), structure))
    return out


def sample_arrays(studies: Sequence[GatedStudy], samples: Sequence[SequenceSample]) -> ArrayDataset:
    """Stack windows ``(N, T, X, Y, Z)`` and target masks ``(N, X, Y, Z)``."""
    by_id = {s.id: s for s in studies}
    windows, masks = [], []
    for smp in samples:
        s = by_id[smp.subject]
        windows.append(s.volumes[[g - 1 for g in smp.window]])
        masks.append(s.masks(smp.structure)[smp.target_gate - 1])
    if not samples:
        shape = studies[0].shape if studies else (0, 0, 0)
        return ArrayDataset(np.zeros((0, 1) + shape), np.zeros((0,) + shape))
    return ArrayDataset(np.stack(windows), np.stack(masks))


# A predictor maps (fold plan, structure, train studies, test studies, test
# samples) to binary masks (N, X, Y, Z) in sample order.
Predictor = Callable[[FoldPlan, str, Sequence[GatedStudy], Sequence[GatedStudy], Sequence[SequenceSample]],
                     np.ndarray]


def oracle_predictor(plan, structure, train_studies, test_studies, samples) -> np.ndarray:
    """Returns the ground truth; checks the pipeline without any training."""
    return sample_arrays(test_studies, samples).masks


@dataclass
class CVReport:
    arch: str
    window_T: int
    plans: list[FoldPlan]
    metrics: list[MetricsRow] = field(default_factory=list)
    # (subject, arch, QuantResult); arch "truth" holds the ground-truth masks
    quant: list[tuple[str, str, QuantResult]] = field(default_factory=list)
    rvef_agreement: Agreement | None = None
    # (subject, gate, predicted ml, truth ml) of the myocardium
    volume_pairs: list[tuple[str, int, float, float]] = field(default_factory=list)
    logs: dict[tuple[int, str], list[LogRow]] = field(default_factory=dict)

    def subject_means(self, structure: str, score: str) -> dict[str, float]:
        per: dict[str, list[float]] = {}
        for r in self.metrics:
            if r.structure == structure:
                per.setdefault(r.subject, []).append(getattr(r, score))
        return {s: summarize(v)[0] for s, v in per.items()}

    def aggregate(self) -> list[tuple[str, str, float, float]]:
        """``(structure, score, mean, std)`` over test subjects, each subject
        first averaged over its gates."""
        rows = []
        for structure in sorted({r.structure for r in self.metrics}):
            for score in SCORES:
                mean, std = summarize(self.subject_means(structure, score).values())
                rows.append((structure, score, mean, std))
        return rows

    def per_gate(self) -> list[tuple[str, int, str, float, float]]:
        """``(structure, gate, score, mean, std)`` over all test subjects."""
        rows = []
        for structure in sorted({r.structure for r in self.metrics}):
            gates = sorted({r.gate for r in self.metrics if r.structure == structure})
            for g in gates:
                sel = [r for r in self.metrics if r.structure == structure and r.gate == g]
                for score in SCORES:
                    rows.append((structure, g, score) + summarize(getattr(r, score) for r in sel))
        return rows

    def mean(self, structure: str, score: str) -> float:
        for st, sc, m, _ in self.aggregate():
            if (st, sc) == (structure, score):
                return m
        raise KeyError((structure, score))


def _trained_predictor(spec: NetworkSpec, cfg: TrainConfig, on_log=None) -> Predictor:
    def run(plan, structure, train_studies, test_studies, samples):
        tr = sample_arrays(train_studies, build_samples(train_studies, structure, spec.window_T))
        fold_spec = replace(spec, structure=structure)
        fold_cfg = replace(cfg, seed=cfg.seed + 1000 * plan.fold)
        try:
            result = train(tr, fold_spec, fold_cfg)
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(exc.epoch, exc.batch,
                                        f"fold {plan.fold} ({structure}): loss is not finite") from exc
        if on_log:
            on_log(plan.fold, structure, result.log)
        te = sample_arrays(test_studies, samples)
        return binarize(predict(result.net, te.windows, cfg.batch_size))
    return run


def run_cv(studies: Sequence[GatedStudy], spec: NetworkSpec, cfg: TrainConfig,
           structures: Sequence[str] = ("epi", "endo"), predictor: Predictor | None = None,
           plans: Sequence[FoldPlan] | None = None) -> CVReport:
    """Subject-level k-fold cross-validation, one model per fold and structure.

    ``predictor`` replaces training (see :func:`oracle_predictor`).  RVEF is
    quantified from the predicted endocardial masks of every test subject
    and compared against the ground-truth masks; myocardial volume pairs
    need both structures.
    """
    by_id = {s.id: s for s in studies}
    if len(by_id) != len(studies):
        raise SpecError("subject ids must be unique")
    plans = list(plans) if plans is not None else kfold_split(list(by_id), cfg.folds, cfg.seed)
    report = CVReport(spec.arch, spec.window_T, plans)
    if predictor is None:
        predictor = _trained_predictor(
            spec, cfg, on_log=lambda fold, st, rows: report.logs.__setitem__((fold, st), rows))

    predicted: dict[tuple[str, str], np.ndarray] = {}   # (subject, structure) -> (G, X, Y, Z)
    tested: list[str] = []
    for plan in plans:
        if set(plan.train) & set(plan.test):
            raise SpecError(f"fold {plan.fold}: subjects on both sides of the split")
        train_studies = [by_id[i] for i in plan.train]
        test_studies = [by_id[i] for i in plan.test]
        tested.extend(plan.test)
        for structure in structures:
            samples = build_samples(test_studies, structure, spec.window_T)
            masks = np.asarray(predictor(plan, structure, train_studies, test_studies, samples))
            if masks.shape[0] != len(samples):
                raise SpecError(f"fold {plan.fold}: {masks.shape[0]} predictions for {len(samples)} samples")
            for smp, m in zip(samples, masks):
                s = by_id[smp.subject]
                buf = predicted.setdefault((s.id, structure), np.zeros_like(s.epi))
                buf[smp.target_gate - 1] = m
                report.metrics.append(evaluate_masks(
                    m, s.masks(structure)[smp.target_gate - 1], s.id, smp.target_gate, structure, spec.arch))
            log.info("fold %d %s done", plan.fold, structure)

    if len(tested) != len(set(tested)):
        raise SpecError("a subject appears in more than one test fold")
    seen = [(r.subject, r.gate, r.structure) for r in report.metrics]
    if len(seen) != len(set(seen)):
        raise SpecError("a (subject, gate) was reported twice")

    if "endo" in structures:
        pred_ef, true_ef = [], []
        for sid in tested:
            s = by_id[sid]
            truth = quantify_masks(s.endo, s.spacing_mm)
            report.quant.append((sid, "truth", truth))
            try:
                q = quantify_masks(predicted[(sid, "endo")], s.spacing_mm)
            except NoCavityError:
                log.warning("subject %s: no predicted cavity in any gate", sid)
                continue
            report.quant.append((sid, spec.arch, q))
            pred_ef.append(q.rvef)
            true_ef.append(truth.rvef)
        try:
            report.rvef_agreement = agreement(pred_ef, true_ef)
        except UndefinedMetricError as exc:
            log.warning("RVEF agreement not available: %s", exc)

    if {"epi", "endo"} <= set(structures):
        for sid in tested:
            s = by_id[sid]
            ml = voxel_ml(s.spacing_mm)
            myo_p = predicted[(sid, "epi")].astype(bool) & ~predicted[(sid, "endo")].astype(bool)
            myo_t = s.epi.astype(bool) & ~s.endo.astype(bool)
            for g in range(s.gates):
                report.volume_pairs.append(
                    (sid, g + 1, int(myo_p[g].sum()) * ml, int(myo_t[g].sum()) * ml))
    return report


def sweep_gates(studies: Sequence[GatedStudy], spec: NetworkSpec, cfg: TrainConfig,
                t_values: Iterable[int], structures: Sequence[str] = ("endo",),
                predictor: Predictor | None = None) -> list[tuple]:
    """One aggregate row per window length, all on the same fold plan.

    Rows are ``(arch, T, structure, score, mean, std)``.
    """
    plans = kfold_split([s.id for s in studies], cfg.folds, cfg.seed)
    rows = []
    for t in t_values:
        t_spec = replace(spec, window_T=t)
        report = run_cv(studies, t_spec, replace(cfg, window_T=t), structures, predictor, plans)
        rows.extend((spec.arch, t) + r for r in report.aggregate())
    return rows


# --------------------------------------------------------------------------
# outputs
# --------------------------------------------------------------------------

def _num(x: float) -> str:
    return "" if isinstance(x, float) and math.isnan(x) else repr(x)


def write_sweep_csv(rows: Sequence[tuple], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arch", "T", "structure", "score", "mean", "std"])
        for arch, t, st, sc, m, s in rows:
            w.writerow([arch, t, st, sc, _num(m), _num(s)])


def write_report(report: CVReport, out_dir) -> dict[str, str]:
    """Write every table of a run into ``out_dir``; returns name -> file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"metrics": "metrics.csv", "summary": "summary.csv", "per_gate": "per_gate.csv",
             "sweep": "sweep.csv"}
    write_metrics_csv(report.metrics, out / files["metrics"])
    with open(out / files["summary"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arch", "structure", "score", "mean", "std"])
        for st, sc, m, s in report.aggregate():
            w.writerow([report.arch, st, sc, _num(m), _num(s)])
    with open(out / files["per_gate"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arch", "structure", "gate", "score", "mean", "std"])
        for st, g, sc, m, s in report.per_gate():
            w.writerow([report.arch, st, g, sc, _num(m), _num(s)])
    write_sweep_csv([(report.arch, report.window_T) + r for r in report.aggregate()], out / files["sweep"])
    if report.quant:
        files["quant"] = "quant.csv"
        write_quant_csv(report.quant, out / files["quant"])
    if report.rvef_agreement is not None:
        files["agreement"] = "rvef_agreement.csv"
        with open(out / files["agreement"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["arch", "mae", "rmse", "pcc"])
            w.writerow([report.arch] + [repr(v) for v in report.rvef_agreement])
    if report.volume_pairs:
        files["volumes"] = "myocardium_volumes.csv"
        with open(out / files["volumes"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subject", "gate", "pred_ml", "truth_ml"])
            for sid, g, p, t in report.volume_pairs:
                w.writerow([sid, g, repr(p), repr(t)])
    if report.logs:
        files["folds"] = "folds.csv"
        with open(out / files["folds"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fold", "side", "subject"])
            for p in report.plans:
                w.writerows([p.fold, "train", s] for s in p.train)
                w.writerows([p.fold, "test", s] for s in p.test)
        for (fold, st), rows in report.logs.items():
            write_log(rows, out / f"log_fold{fold}_{st}.csv")
    return files
