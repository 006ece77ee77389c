"""Stage orchestration with input-hash idempotence and provenance stamping.

Output layout under ``output_dir``::

    config.yaml               resolved configuration
    run_manifest.json         one record per completed stage
    data/                     phantom volumes + manifest.json
    translation/              translation.ckpt, translation_history.csv, fidelity.json
    synthetic/                translated source volumes (domain synthetic_AB)
    arms/<arm>/               segmentation.ckpt, histories, metrics.json
    arms/drl_st/round<r>/     pseudo/*.vol, segmentation.ckpt, finetune_history.csv
    efficiency/               efficiency.csv, efficiency.json
    report/                   tables and figures

A stage is skipped when its key (stage name, relevant config sections and
upstream artifact hashes) matches the recorded one and every recorded output
still hashes to the recorded value.  Every artifact records the config hash
and its upstream hashes: in the header ``meta`` of volumes and checkpoints,
under a ``provenance`` key in JSON files and in a ``<name>.prov.json``
sidecar for everything else.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import storage
from .config import PipelineConfig
from .evaluation import evaluate_model
from .metrics import MetricsReport
from .phantom import DatasetManifest, LabeledVolume, build_dataset, preprocess
from .profiling import efficiency_table, profile_run
from .segmentation import SegmentationModel, predict, train_segmentation
from .segmentation.trainer import write_history
from .self_training import PseudoPair, finetune_combined, generate_pseudo_labels, model_digest
from .translation import TranslationModel, fidelity, train_translation, translate_volume
from .translation.trainer import volume_slices

log = logging.getLogger(__name__)

CONTAINERS = (".vol", ".ckpt")
SIDECAR = ".prov.json"


class StageError(RuntimeError):
    """A stage cannot run: a missing input or an aborted training run."""


class ConfigMismatch(RuntimeError):
    """The output directory already holds a run made with a different config."""


def provenance(config_hash, stage, upstream):
    return {"config_hash": config_hash, "stage": stage, "upstream": dict(sorted(upstream.items()))}


def stamp(path, prov):
    path = Path(path)
    if path.suffix in CONTAINERS:
        storage.update_meta(path, {"provenance": prov})
    elif path.suffix == ".json" and not path.name.endswith(SIDECAR):
        d = json.loads(path.read_text())
        if isinstance(d, dict):
            d["provenance"] = prov
            path.write_text(json.dumps(d, indent=2))
        else:
            Path(str(path) + SIDECAR).write_text(json.dumps(prov, indent=2))
    else:
        Path(str(path) + SIDECAR).write_text(json.dumps(prov, indent=2))


def read_provenance(path):
    path = Path(path)
    if path.suffix in CONTAINERS:
        return storage.read_meta(path).get("provenance")
    if path.suffix == ".json" and not path.name.endswith(SIDECAR):
        d = json.loads(path.read_text())
        if isinstance(d, dict) and "provenance" in d:
            return d["provenance"]
    side = Path(str(path) + SIDECAR)
    return json.loads(side.read_text()) if side.exists() else None


def _save_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, default=storage._json_default))


@dataclass
class StageRecord:
    name: str
    key: str
    outputs: dict
    skipped: bool = False
    seconds: float = 0.0
    info: dict = field(default_factory=dict)


class Pipeline:
    """Runs the five stages and the three-arm ablation for one resolved config."""

    def __init__(self, cfg: PipelineConfig, resume=False):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.config_hash = cfg.digest()
        self.manifest_path = self.out / "run_manifest.json"
        self.runs = {"config_hash": self.config_hash, "stages": {}}
        if self.manifest_path.exists():
            prev = json.loads(self.manifest_path.read_text())
            if prev.get("config_hash") != self.config_hash and not resume:
                raise ConfigMismatch(
                    f"{self.out} holds a run made with config {prev.get('config_hash')}, "
                    f"current config is {self.config_hash}; pass --resume to recompute stale stages "
                    f"or choose another --output")
            self.runs["stages"] = prev.get("stages", {})
        self.out.mkdir(parents=True, exist_ok=True)
        cfg.save(self.out / "config.yaml")
        stamp(self.out / "config.yaml", provenance(self.config_hash, "config", {}))
        self._save_runs()

    # bookkeeping

    def _save_runs(self):
        _save_json(self.manifest_path, self.runs)

    def _section(self, *names):
        d = self.cfg.to_dict()
        return {n: d[n] for n in names}

    def _fresh(self, name, key):
        rec = self.runs["stages"].get(name)
        if not rec or rec.get("key") != key or rec.get("status") != "done":
            return None
        for rel, h in rec["outputs"].items():
            p = self.out / rel
            if not p.exists() or storage.hash_file(p) != h:
                return None
        return rec

    def stage(self, name, sections, upstream, fn):
        """Run ``fn() -> (list of output paths, info dict)`` unless already fresh."""
        key = storage.hash_obj({"stage": name, "config": self._section(*sections), "upstream": upstream})
        rec = self._fresh(name, key)
        if rec is not None:
            log.info("stage %s up to date, skipping", name)
            return StageRecord(name, key, rec["outputs"], True, 0.0, rec.get("info", {}))
        t0 = time.perf_counter()
        paths, info = fn()
        prov = provenance(self.config_hash, name, upstream)
        outputs = {}
        for p in paths:
            p = Path(p)
            stamp(p, prov)
            outputs[str(p.relative_to(self.out))] = storage.hash_file(p)
        secs = time.perf_counter() - t0
        self.runs["stages"][name] = {"key": key, "status": "done", "upstream": upstream, "outputs": outputs,
                                     "seconds": secs, "info": info, "finished": time.strftime("%Y-%m-%dT%H:%M:%S")}
        self._save_runs()
        log.info("stage %s done in %.1f s", name, secs)
        return StageRecord(name, key, outputs, False, secs, info)

    def record_failure(self, name, exc):
        self.runs["stages"][name] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
        self._save_runs()

    def output_hash(self, name, rel=None):
        rec = self.runs["stages"].get(name)
        if not rec or rec.get("status") != "done":
            raise StageError(f"stage {name!r} has not completed in {self.out}; run it first")
        if rel is None:
            return storage.hash_obj(rec["outputs"])
        return rec["outputs"][rel]

    def _require(self, path, producer):
        if not Path(path).exists():
            raise StageError(f"missing input {path}; run '{producer}' first")
        return path

    # data access

    @property
    def data_dir(self):
        return self.out / "data"

    def manifest(self):
        return DatasetManifest.load_file(self._require(self.data_dir / "manifest.json", "gen-data"))

    def _prep(self, v):
        return preprocess(v, self.cfg.data.slice_size, self.cfg.data.zscore_scope)

    def source_volumes(self):
        m = self.manifest()
        return [self._prep(m.load(r)) for r in m.source_train]

    def target_volumes(self):
        m = self.manifest()
        return [self._prep(m.load(r)) for r in m.target_train]

    def oracle_volumes(self, domain="B"):
        m = self.manifest()
        return [self._prep(m.load(a if domain == "A" else b)) for a, b in m.paired_oracle]

    def synthetic_volumes(self):
        d = self._require(self.out / "synthetic", "translate")
        return [self._prep(LabeledVolume.load(p)) for p in sorted(Path(d).glob("*.vol"))]

    def arm_dir(self, arm):
        return self.out / "arms" / arm

    def seg_model(self, arm, round_index=None):
        d = self.arm_dir(arm) if round_index is None else self.arm_dir(arm) / f"round{round_index}"
        model, _ = SegmentationModel.load(self._require(d / "segmentation.ckpt", "train-seg/finetune"))
        return model

    def final_model_path(self, arm):
        if arm == "drl_st":
            return self.arm_dir(arm) / f"round{self.st_cfg().rounds}" / "segmentation.ckpt"
        return self.arm_dir(arm) / "segmentation.ckpt"

    def st_cfg(self):
        over = self.cfg.ablation.overrides.get("drl_st", {}).get("self_training", {})
        return replace(self.cfg.self_training, **over)

    # stages

    def gen_data(self):
        c = self.cfg

        def run():
            m = build_dataset(c.data.phantom_spec(0), c.data.n_source, c.data.n_target, c.data.n_oracle, c.seed,
                              self.data_dir)
            paths = [self.data_dir / r.path for r in m.source_train + m.target_train]
            paths += [self.data_dir / r.path for pair in m.paired_oracle for r in pair]
            counts = {"source_train": len(m.source_train), "target_train": len(m.target_train),
                      "paired_oracle": len(m.paired_oracle)}
            return paths + [self.data_dir / "manifest.json"], {"manifest_hash": m.digest(), "counts": counts}

        return self.stage("gen-data", ["data", "seed"], {}, run)

    def train_translate(self):
        up = {"gen-data": self.output_hash("gen-data")}
        tdir = self.out / "translation"

        def run():
            m = self.manifest()
            res = train_translation(m, self.cfg.translation, tdir, log_every=250)
            oa = volume_slices(self.oracle_volumes("A"), self.cfg.translation.slice_size, True)
            ob = volume_slices(self.oracle_volumes("B"), self.cfg.translation.slice_size, True)
            fid = fidelity(res.model, oa, ob, self.cfg.seed)
            fid["class_profile"] = class_profile_check(self, res.model)
            _save_json(tdir / "fidelity.json", fid)
            outs = [res.checkpoint, tdir / "translation_history.csv", tdir / "fidelity.json"]
            return outs + sorted(tdir.glob("translation_it*.ckpt")), {"fidelity": fid}

        return self.stage("train-translate", ["translation", "data"], up, run)

    def translation_model(self):
        model, _ = TranslationModel.load(self._require(self.out / "translation" / "translation.ckpt",
                                                       "train-translate"))
        return model

    def translate(self):
        up = {"gen-data": self.output_hash("gen-data"),
              "train-translate": self.output_hash("train-translate", "translation/translation.ckpt")}
        sdir = self.out / "synthetic"

        def run():
            model = self.translation_model()
            src, tgt = self.source_volumes(), self.target_volumes()
            rng = np.random.default_rng([self.cfg.seed, 7])
            paths = []
            for i, v in enumerate(src):
                style = tgt[int(rng.integers(len(tgt)))]
                x_ab = translate_volume(v, style, model, seed=int(rng.integers(2**31)))
                p = sdir / f"{v.id}_AB.vol"
                x_ab.save(p)
                paths.append(p)
            return paths, {"count": len(paths)}

        return self.stage("translate", ["data", "seed"], up, run)

    def train_seg(self, arm):
        if arm not in ("no_uda", "drl"):
            raise StageError("train-seg handles arms no_uda and drl; drl_st is built by pseudo-label/finetune")
        src_stage = "gen-data" if arm == "no_uda" else "translate"
        up = {src_stage: self.output_hash(src_stage)}
        adir = self.arm_dir(arm)

        def run():
            pairs = self.source_volumes() if arm == "no_uda" else self.synthetic_volumes()
            res = train_segmentation(pairs, self.cfg.segmentation, adir)
            return [res.checkpoint, adir / "segmentation_history.csv"], {"final_loss": res.history[-1]["loss"]}

        return self.stage(f"train-seg:{arm}", ["segmentation", "data"], up, run)

    def _st_input_model(self, r):
        if r == 1:
            return "train-seg:drl", "arms/drl/segmentation.ckpt"
        return f"finetune:r{r - 1}", f"arms/drl_st/round{r - 1}/segmentation.ckpt"

    def pseudo_label(self, r=1):
        st = self.st_cfg()
        if not 1 <= r <= st.rounds:
            raise StageError(f"round {r} outside 1..{st.rounds}")
        src_stage, src_rel = self._st_input_model(r)
        up = {"gen-data": self.output_hash("gen-data"), src_stage: self.output_hash(src_stage, src_rel)}
        pdir = self.arm_dir("drl_st") / f"round{r}" / "pseudo"

        def run():
            model, _ = SegmentationModel.load(self._require(self.out / src_rel, src_stage))
            pairs = generate_pseudo_labels(self.target_volumes(), model, st)
            paths = []
            for p in pairs:
                path = pdir / f"{p.image.id}.vol"
                p.save(path)
                paths.append(path)
            valid = float(np.mean([p.valid.mean() for p in pairs]))
            return paths, {"checkpoint_id": pairs[0].checkpoint_id, "valid_fraction": valid}

        return self.stage(f"pseudo-label:r{r}", ["self_training", "ablation"], up, run)

    def load_pseudo(self, r):
        pdir = self._require(self.arm_dir("drl_st") / f"round{r}" / "pseudo", "pseudo-label")
        st = self.st_cfg()
        pairs = []
        for path in sorted(Path(pdir).glob("*.vol")):
            v = LabeledVolume.load(path)
            conf = v.meta.pop("confidence")
            image = replace(v, domain_tag="B")
            pairs.append(PseudoPair(image, v.labels, conf, v.meta.get("checkpoint_id", ""), st.confidence_threshold))
        return pairs

    def finetune(self, r=1):
        st = self.st_cfg()
        src_stage, src_rel = self._st_input_model(r)
        up = {"translate": self.output_hash("translate"), f"pseudo-label:r{r}": self.output_hash(f"pseudo-label:r{r}"),
              src_stage: self.output_hash(src_stage, src_rel)}
        rdir = self.arm_dir("drl_st") / f"round{r}"

        def run():
            model, _ = SegmentationModel.load(self.out / src_rel)
            new, history = finetune_combined(self.synthetic_volumes(), self.load_pseudo(r), model, st,
                                             self.cfg.segmentation, round_index=r)
            new.save(rdir / "segmentation.ckpt", r, {"pseudo_from": model_digest(model)})
            write_history(rdir / "finetune_history.csv", history)
            return [rdir / "segmentation.ckpt", rdir / "finetune_history.csv"], {"checkpoint_id": model_digest(new)}

        return self.stage(f"finetune:r{r}", ["segmentation", "self_training", "ablation"], up, run)

    def self_train(self):
        recs = []
        for r in range(1, self.st_cfg().rounds + 1):
            recs.append(self.pseudo_label(r))
            recs.append(self.finetune(r))
        return recs

    def _final_stage(self, arm):
        return f"finetune:r{self.st_cfg().rounds}" if arm == "drl_st" else f"train-seg:{arm}"

    def evaluate(self, arm):
        fstage = self._final_stage(arm)
        rel = str(self.final_model_path(arm).relative_to(self.out))
        up = {"gen-data": self.output_hash("gen-data"), fstage: self.output_hash(fstage, rel)}
        path = self.arm_dir(arm) / "metrics.json"

        def run():
            model, _ = SegmentationModel.load(self.out / rel)
            rep = evaluate_model(model, self.oracle_volumes("B"), tolerance_mm=self.cfg.metrics.tolerance_mm,
                                 class_names=self.cfg.data.class_names)
            d = rep.to_dict()
            d["arm"] = arm
            if arm == "drl_st":
                d["rounds"] = self._round_scores()
            _save_json(path, d)
            return [path], {"overall_dsc": rep.overall_dsc, "overall_nsd": rep.overall_nsd}

        return self.stage(f"evaluate:{arm}", ["metrics", "data"], up, run)

    def _round_scores(self):
        rows = []
        cases = self.oracle_volumes("B")
        for r in range(1, self.st_cfg().rounds + 1):
            rep = evaluate_model(self.seg_model("drl_st", r), cases, tolerance_mm=self.cfg.metrics.tolerance_mm)
            rows.append({"round": r, "overall_dsc": rep.overall_dsc, "overall_nsd": rep.overall_nsd})
        return rows

    def profile(self, arm):
        fstage = self._final_stage(arm)
        rel = str(self.final_model_path(arm).relative_to(self.out))
        up = {"gen-data": self.output_hash("gen-data"), fstage: self.output_hash(fstage, rel)}
        edir = self.out / "efficiency"

        def run():
            model, _ = SegmentationModel.load(self.out / rel)
            m = self.manifest()
            rows = []
            for _, ref in m.paired_oracle:
                raw = m.load(ref)

                def task(raw=raw):
                    return predict(self._prep(raw), model)

                res = profile_run(task, self.cfg.metrics.profile_interval_s)
                rows.append({"case_id": ref.id, "image_size": list(raw.shape), **res.row()})
            (edir).mkdir(parents=True, exist_ok=True)
            (edir / "efficiency.csv").write_text(efficiency_table(rows))
            _save_json(edir / "efficiency.json", {"arm": arm, "rows": rows})
            return [edir / "efficiency.csv", edir / "efficiency.json"], {"cases": len(rows)}

        return self.stage("profile", ["metrics"], up, run)

    def reports(self):
        out = {}
        for arm in self.cfg.ablation.arms:
            p = self.arm_dir(arm) / "metrics.json"
            if p.exists():
                d = json.loads(p.read_text())
                out[arm] = MetricsReport.from_dict(d)
        return out


def class_profile_check(pipe: Pipeline, model):
    """Class-mean intensities of X^a, X^{a->b} and the true B rendering on oracle pairs.

    Returns the profiles and their L1 distances to the B profile.
    """
    xa, xb = pipe.oracle_volumes("A"), pipe.oracle_volumes("B")
    rng = np.random.default_rng([pipe.cfg.seed, 11])
    tgt = pipe.target_volumes()
    x_ab = [translate_volume(v, tgt[int(rng.integers(len(tgt)))], model, int(rng.integers(2**31))) for v in xa]
    k = pipe.cfg.data.num_classes

    def profile(vols):
        vals = np.concatenate([v.intensities.ravel() for v in vols])
        labs = np.concatenate([v.labels.ravel() for v in vols])
        return [float(vals[labs == c].mean()) if (labs == c).any() else 0.0 for c in range(k)]

    pa, pab, pb = profile(xa), profile(x_ab), profile(xb)
    return {"a": pa, "ab": pab, "b": pb,
            "dist_a_to_b": float(np.abs(np.subtract(pa, pb)).sum()),
            "dist_ab_to_b": float(np.abs(np.subtract(pab, pb)).sum())}


def run_arm(pipe: Pipeline, arm):
    if arm == "no_uda":
        pipe.train_seg("no_uda")
    else:
        pipe.train_translate()
        pipe.translate()
        pipe.train_seg("drl")
        if arm == "drl_st":
            pipe.self_train()
    return pipe.evaluate(arm)


def ablate(pipe: Pipeline, arms=None):
    """Run the requested arms on shared data and write the comparison table.

    An arm that fails is recorded and the remaining arms still run; the
    comparison then carries ``partial: true`` and lists the failures.
    """
    from .metrics import comparison_table

    arms = list(arms or pipe.cfg.ablation.arms)
    pipe.gen_data()
    failures = {}
    for arm in arms:
        try:
            run_arm(pipe, arm)
        except Exception as exc:  # noqa: BLE001 - reported per arm
            log.error("arm %s failed: %s", arm, exc)
            pipe.record_failure(f"arm:{arm}", exc)
            failures[arm] = f"{type(exc).__name__}: {exc}"
    done = [a for a in arms if a not in failures]
    if done:
        pipe.profile(done[-1])
    reports = {a: r for a, r in pipe.reports().items() if a in done}
    summary = {
        "arms": {a: {"overall_dsc": r.overall_dsc, "overall_nsd": r.overall_nsd} for a, r in reports.items()},
        "manifest_hash": pipe.manifest().digest(),
        "partial": bool(failures),
        "failures": failures,
    }
    cdir = pipe.out / "ablation"
    _save_json(cdir / "comparison.json", summary)
    paths = [cdir / "comparison.json"]
    if reports:
        (cdir / "comparison.csv").write_text(comparison_table(reports))
        paths.append(cdir / "comparison.csv")
    prov = provenance(pipe.config_hash, "ablate", {f"evaluate:{a}": pipe.output_hash(f"evaluate:{a}") for a in done})
    for p in paths:
        stamp(p, prov)
    return summary
