"""Run directories: every stage reads its inputs from and writes its outputs to one directory.

The CLI stage commands and ``run_pipeline`` call the same step functions, so a manual
composition of stage commands produces the same bytes as a full pipeline run.

Layout (paths relative to the run directory)::

    config.json                      resolved configuration
    data/{semi,truth,heldout}.csv    benchmark; truth is read only by evaluation
    stage1/{msn,probe}.json, stage1/s1.csv
    stage2/denoiser.json, stage2/s2.csv     S2 holds max(K grid) samples per class
    stage3/probe_k{K}.json                  one probe per K, trained on the first K per class
    stage4/round{r}/{s1.csv,denoiser.json,s2.csv,probe.json}
    eval/metrics.json, eval/*.csv
    manifest.json, timings.json             written by run_pipeline only
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np

from .config import canonical_json, config_echo
from .data import (
    HiddenTruth,
    LabeledData,
    Table,
    labeled_to_table,
    read_table,
    read_truth,
    semi_to_table,
    table_to_labeled,
    table_to_semi,
    write_table,
    write_truth,
)
from .diffusion import ConditionalDenoiser, sample
from .metrics import (
    accuracy,
    confusion,
    generation_report,
    per_class_pr,
    pr_delta,
    sorted_deltas,
    write_class_stats,
    write_sorted_deltas,
)
from .numcore import ConfigError, load_checkpoint, save_checkpoint
from .pipeline import (
    STREAMS,
    DptState,
    PipelineConfig,
    prepare_data,
    pseudo_label_table,
    pseudo_sample_table,
    stage1_train_and_label,
    stage3_retrain,
    stage4_refine,
    stream,
    subset_per_class,
    train_generator,
)
from .ssl_classifier import LinearProbe, MsnState, extract_features, predict

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1


class MissingArtifact(FileNotFoundError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class Run:
    """Path helper and artifact I/O for one run directory."""

    def __init__(self, root, cfg: PipelineConfig):
        self.root = Path(root)
        self.cfg = cfg

    def path(self, rel: str) -> Path:
        return self.root / rel

    def need(self, rel: str) -> Path:
        p = self.path(rel)
        if not p.exists():
            raise MissingArtifact(f"missing artifact {rel} in {self.root}")
        return p

    def _prepare(self, rel: str) -> Path:
        p = self.path(rel)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_json(self, rel: str, doc) -> str:
        self._prepare(rel).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        return rel

    def write_table(self, rel: str, table: Table) -> str:
        write_table(self._prepare(rel), table)
        return rel

    def save(self, rel: str, kind: str, payload: dict) -> str:
        save_checkpoint(self._prepare(rel), kind, payload, {"seed": self.cfg.seed})
        return rel

    def load(self, rel: str, kind: str) -> dict:
        return load_checkpoint(self.need(rel), kind)[0]

    # typed loaders
    def semi(self):
        return table_to_semi(read_table(self.need("data/semi.csv")), self.cfg.num_classes)

    def truth(self) -> HiddenTruth:
        return read_truth(self.need("data/truth.csv"))

    def heldout(self) -> LabeledData:
        return table_to_labeled(read_table(self.need("data/heldout.csv")))

    def msn(self) -> MsnState:
        return MsnState.from_dict(self.load("stage1/msn.json", "msn"))

    def probe(self, rel: str) -> LinearProbe:
        return LinearProbe.from_dict(self.load(rel, "probe"))

    def denoiser(self, rel: str = "stage2/denoiser.json") -> ConditionalDenoiser:
        return ConditionalDenoiser.from_dict(self.load(rel, "denoiser"))

    def table(self, rel: str) -> Table:
        return read_table(self.need(rel))


def probe_path(K: int) -> str:
    return f"stage3/probe_k{K}.json"


def round_dir(r: int) -> str:
    return f"stage4/round{r}"


def write_config(run: Run) -> str:
    return run.write_json("config.json", config_echo(run.cfg))


# -- stage steps -------------------------------------------------------------

def step_gen_data(run: Run) -> list[str]:
    bench = prepare_data(run.cfg)
    write_truth(run._prepare("data/truth.csv"), bench.truth)
    return [run.write_table("data/semi.csv", semi_to_table(bench.semi)),
            "data/truth.csv",
            run.write_table("data/heldout.csv", labeled_to_table(bench.heldout))]


def step_train_classifier(run: Run) -> list[str]:
    semi = run.semi()
    st = stage1_train_and_label(semi, run.cfg)
    return [run.save("stage1/msn.json", "msn", st.msn.to_dict()),
            run.save("stage1/probe.json", "probe", st.probe.to_dict())]


def step_pseudo_label(run: Run, probe_rel: str = "stage1/probe.json", out: str = "stage1/s1.csv") -> list[str]:
    s1 = pseudo_label_table(run.semi(), run.msn(), run.probe(probe_rel))
    return [run.write_table(out, s1)]


def step_train_diffusion(run: Run, s1_rel: str = "stage1/s1.csv", out: str = "stage2/denoiser.json",
                         init_rel: str | None = None) -> list[str]:
    s1 = run.table(s1_rel)
    if len(s1) == 0:
        raise ConfigError("S1 is empty")
    init = run.denoiser(init_rel) if init_rel else None
    model = train_generator(s1.x, s1.labels, run.cfg.num_classes, run.cfg.diffusion, run.cfg.seed, init)
    return [run.save(out, "denoiser", model.to_dict())]


def _id_base(run: Run, s1: Table) -> int:
    return int(s1.ids.max()) + 1 + run.cfg.heldout_per_class * run.cfg.num_classes


def step_sample(run: Run, K: int | None = None, model_rel: str = "stage2/denoiser.json",
                s1_rel: str = "stage1/s1.csv", out: str = "stage2/s2.csv") -> list[str]:
    """S2 with ``K`` (default: largest K of the grid) samples for every class."""
    K = max(run.cfg.k_values()) if K is None else K
    table = pseudo_sample_table(run.denoiser(model_rel), K, run.cfg.diffusion, run.cfg.seed,
                                _id_base(run, run.table(s1_rel)))
    return [run.write_table(out, table)]


def step_sample_class(run: Run, c: int, n: int, out: str) -> list[str]:
    """``n`` samples of one class; row i equals row i of that class in any S2 with K >= n."""
    C = run.cfg.num_classes
    if not 0 <= c < C:
        raise ConfigError(f"class must be in [0, {C}), got {c}")
    if n < 0:
        raise ConfigError("n must be nonnegative")
    x = sample(run.denoiser(), c, run.cfg.diffusion.schedule(), run.cfg.diffusion.guidance,
               stream(run.cfg.seed, "diffusion_sample"), n)
    base = _id_base(run, run.table("stage1/s1.csv")) + c * n
    table = Table(base + np.arange(n), np.full(n, c), ["pseudo"] * n, x.reshape(n, -1))
    return [run.write_table(out, table)]


def _encoder_digest(msn: MsnState) -> str:
    h = hashlib.sha256()
    for a in msn.anchor.arrays() + msn.target.arrays() + [msn.prototypes]:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def step_retrain_probe(run: Run, K: int | None = None, s2_rel: str = "stage2/s2.csv") -> list[str]:
    K = run.cfg.K if K is None else K
    s2 = run.table(s2_rel)
    C = run.cfg.num_classes
    have = min(int(np.sum(s2.labels == c)) for c in range(C))
    if have < K:
        raise ConfigError(f"S2 holds {have} samples for some class, fewer than K={K}; re-run sample")
    msn = run.msn()
    before = _encoder_digest(msn)
    probe = stage3_retrain(msn, run.semi(), subset_per_class(s2, K, C), run.cfg)
    if _encoder_digest(msn) != before:
        raise RuntimeError("encoder changed during probe retraining")
    return [run.save(probe_path(K), "probe", probe.to_dict())]


def step_refine(run: Run, rounds: int | None = None) -> list[str]:
    rounds = run.cfg.refinement_rounds if rounds is None else rounds
    if rounds < 0:
        raise ConfigError("rounds must be nonnegative")
    cfg, C = run.cfg, run.cfg.num_classes
    semi, msn = run.semi(), run.msn()
    state = DptState(msn, run.probe("stage1/probe.json"), run.table("stage1/s1.csv"), run.denoiser(),
                     subset_per_class(run.table("stage2/s2.csv"), cfg.K, C), run.probe(probe_path(cfg.K)))
    written = []
    for r in range(1, rounds + 1):
        state = stage4_refine(state, semi, cfg, 1, K=cfg.K)
        d = round_dir(r)
        written += [run.write_table(f"{d}/s1.csv", state.s1),
                    run.save(f"{d}/denoiser.json", "denoiser", state.denoiser.to_dict()),
                    run.write_table(f"{d}/s2.csv", state.s2),
                    run.save(f"{d}/probe.json", "probe", state.probe3.to_dict())]
    return written


# -- evaluation ----------------------------------------------------------------

def _stats_dicts(stats):
    return [dataclasses.asdict(s) for s in stats]


def _gen(real_x, real_y, table: Table, bayes, C) -> dict:
    return generation_report(real_x, real_y, table.x, table.labels, bayes.predict, C).to_dict()


def step_evaluate(run: Run, before_rel: str = "stage1/probe.json", after_rel: str | None = None) -> list[str]:
    """Accuracy, per-class P/R and their stage-to-stage deltas, generation quality.

    Ground truth for the training items is read here and nowhere else.
    """
    cfg, C = run.cfg, run.cfg.num_classes
    after_rel = after_rel or probe_path(cfg.K)
    semi, msn, held = run.semi(), run.msn(), run.heldout()
    y_train = run.truth().lookup(semi.ids)
    bayes = cfg.mixture.bayes()
    F_train, F_held = extract_features(msn, semi.x), extract_features(msn, held.x)

    def probe_metrics(rel):
        p = run.probe(rel)
        return {"train_accuracy": accuracy(y_train, predict(p, F_train)[0]),
                "heldout_accuracy": accuracy(held.labels, predict(p, F_held)[0])}

    s1 = run.table("stage1/s1.csv")
    metrics: dict = {"stage1": {"pseudo_label_accuracy": accuracy(y_train, s1.labels),
                                **probe_metrics("stage1/probe.json")}}
    s2 = run.table("stage2/s2.csv")
    metrics["stage2"] = {"s2_size": len(s2), "generation": _gen(semi.x, y_train, s2, bayes, C)}
    metrics["stage3"] = {}
    for K in cfg.k_values():
        if run.path(probe_path(K)).exists():
            metrics["stage3"][f"k{K}"] = {"train_size": semi.N + K * C, **probe_metrics(probe_path(K))}
    rounds = []
    r = 1
    while run.path(f"{round_dir(r)}/probe.json").exists():
        d = round_dir(r)
        rs1 = run.table(f"{d}/s1.csv")
        rounds.append({"round": r, "pseudo_label_accuracy": accuracy(y_train, rs1.labels),
                       "generation": _gen(semi.x, y_train, run.table(f"{d}/s2.csv"), bayes, C),
                       **probe_metrics(f"{d}/probe.json")})
        r += 1
    metrics["stage4"] = rounds

    written = []
    pr = {}
    before, after = run.probe(before_rel), run.probe(after_rel)
    for split, F, y in (("train", F_train, y_train), ("heldout", F_held, held.labels)):
        cm_b = confusion(y, predict(before, F)[0], C)
        cm_a = confusion(y, predict(after, F)[0], C)
        sb, sa = per_class_pr(cm_b), per_class_pr(cm_a)
        deltas = pr_delta(sb, sa)
        for which in ("precision", "recall"):
            rel = f"eval/delta_{which}_{split}.csv"
            write_sorted_deltas(run._prepare(rel), sorted_deltas(deltas, which), f"delta_{which}")
            written.append(rel)
        for tag, st in (("before", sb), ("after", sa)):
            rel = f"eval/class_stats_{tag}_{split}.csv"
            write_class_stats(run._prepare(rel), st)
            written.append(rel)
        pr[split] = {"n": int(len(y)), "confusion_before": cm_b.tolist(), "confusion_after": cm_a.tolist(),
                     "before": _stats_dicts(sb), "after": _stats_dicts(sa),
                     "delta": [dataclasses.asdict(d) for d in deltas]}
    metrics["pr"] = {"before": before_rel, "after": after_rel, **pr}
    written.append(run.write_json("eval/metrics.json", metrics))
    return written


# -- checks and the full pipeline ----------------------------------------------

def _check(name: str, ok: bool, detail) -> dict:
    return {"name": name, "passed": bool(ok), "detail": detail}


def bookkeeping_checks(run: Run, metrics: dict, encoder_digest: str) -> list[dict]:
    cfg, C = run.cfg, run.cfg.num_classes
    semi = run.semi()
    n_items = semi.N + semi.M
    s1, s2 = run.table("stage1/s1.csv"), run.table("stage2/s2.csv")
    K_max = max(cfg.k_values())
    out = [
        _check("s1_size", len(s1) == n_items and np.array_equal(np.sort(s1.ids), np.sort(semi.ids)),
               {"size": len(s1), "expected": n_items}),
        _check("s1_labels_in_range", bool(np.all((s1.labels >= 0) & (s1.labels < C))), None),
        _check("s2_size", len(s2) == K_max * C and all(np.sum(s2.labels == c) == K_max for c in range(C)),
               {"size": len(s2), "expected": K_max * C}),
    ]
    for K in cfg.k_values():
        sub = subset_per_class(s2, K, C)
        out.append(_check(f"s2_subset_k{K}", len(sub) == K * C, {"size": len(sub), "expected": K * C}))
    for r, rd in enumerate(metrics["stage4"], start=1):
        rs1, rs2 = run.table(f"{round_dir(r)}/s1.csv"), run.table(f"{round_dir(r)}/s2.csv")
        out.append(_check(f"round{r}_sizes", len(rs1) == n_items and len(rs2) == cfg.K * C,
                          {"s1": len(rs1), "s2": len(rs2)}))
    for split in ("train", "heldout"):
        pr = metrics["pr"][split]
        totals = [int(np.sum(pr["confusion_before"])), int(np.sum(pr["confusion_after"]))]
        out.append(_check(f"confusion_total_{split}", totals == [pr["n"]] * 2, {"totals": totals, "n": pr["n"]}))
        vals = [s[k] for tag in ("before", "after") for s in pr[tag] for k in ("precision", "recall")]
        out.append(_check(f"pr_range_{split}", all(v is None or 0.0 <= v <= 1.0 for v in vals), None))
    out.append(_check("encoder_frozen", _encoder_digest(run.msn()) == encoder_digest, None))
    if 0 in cfg.k_values():
        p0, p1 = run.probe(probe_path(0)), run.probe("stage1/probe.json")
        same = np.array_equal(p0.weight, p1.weight) and np.array_equal(p0.bias, p1.bias)
        out.append(_check("k0_probe_equals_stage1", same, None))
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _manifest(run: Run, written: list[str], status: str, metrics=None, checks=None, failure=None) -> dict:
    artifacts = {rel: _sha256(run.path(rel)) for rel in sorted(set(written)) if run.path(rel).exists()}
    doc = {
        "version": MANIFEST_VERSION,
        "status": status,
        "config": config_echo(run.cfg),
        "seed": run.cfg.seed,
        "streams": {name: [run.cfg.seed, off] for name, off in STREAMS.items()},
        "artifacts": artifacts,
        "sidecars": ["timings.json"],
        "metrics": metrics,
        "checks": checks,
    }
    if failure:
        doc["failure"] = failure
    return doc


def run_pipeline(cfg: PipelineConfig, root, reuse: bool = False) -> dict:
    """All stages in order; returns the manifest (also written to ``manifest.json``).

    With ``reuse``, data, stage-1 and stage-2 training outputs already present in ``root`` are
    kept; they are deterministic, so the manifest matches that of a fresh run. Wall-clock
    times go to ``timings.json`` so that manifests of reruns are byte-identical.
    """
    cfg.validate()
    run = Run(root, cfg)
    run.root.mkdir(parents=True, exist_ok=True)
    written: list[str] = [write_config(run)]
    timings: dict[str, float] = {}
    digest = None

    def reusable(*rels):
        return reuse and all(run.path(r).exists() for r in rels)

    def s2_has_kmax():
        if not run.path("stage2/s2.csv").exists():
            return False
        s2 = run.table("stage2/s2.csv")
        return len(s2) == max(cfg.k_values()) * cfg.num_classes

    steps = [
        ("gen-data", lambda: step_gen_data(run), ("data/semi.csv", "data/truth.csv", "data/heldout.csv")),
        ("train-classifier", lambda: step_train_classifier(run), ("stage1/msn.json", "stage1/probe.json")),
        ("pseudo-label", lambda: step_pseudo_label(run), ("stage1/s1.csv",)),
        ("train-diffusion", lambda: step_train_diffusion(run), ("stage2/denoiser.json",)),
        ("sample", lambda: step_sample(run), None),
    ]
    steps += [(f"retrain-probe[k{K}]", (lambda K=K: step_retrain_probe(run, K)), None) for K in cfg.k_values()]
    steps += [("refine", lambda: step_refine(run), None), ("evaluate", lambda: step_evaluate(run), None)]

    for name, fn, outputs in steps:
        t0 = time.perf_counter()
        try:
            if outputs and reusable(*outputs):
                written += list(outputs)
            elif name == "sample" and reuse and s2_has_kmax():
                written.append("stage2/s2.csv")
            else:
                written += fn()
            if name == "train-classifier":
                digest = _encoder_digest(run.msn())
        except Exception as e:  # noqa: BLE001 - recorded, then re-raised with the stage name
            timings[name] = time.perf_counter() - t0
            run.write_json("timings.json", timings)
            manifest = _manifest(run, written, "failed",
                                 failure={"stage": name, "error": f"{type(e).__name__}: {e}"})
            run.write_json("manifest.json", manifest)
            raise StageError(name, e) from e
        timings[name] = time.perf_counter() - t0
        log.info("%s done in %.1fs", name, timings[name])

    metrics = json.loads(run.path("eval/metrics.json").read_text())
    checks = bookkeeping_checks(run, metrics, digest)
    run.write_json("timings.json", timings)
    manifest = _manifest(run, written, "ok", metrics, checks)
    run.write_json("manifest.json", manifest)
    return manifest


def manifest_digest(manifest: dict) -> str:
    return hashlib.sha256(canonical_json(manifest).encode()).hexdigest()
