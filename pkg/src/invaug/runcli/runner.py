"""Phased experiment runner with content-hash skipping and a shared
artifact cache.

Every phase derives an input hash from its config slice plus upstream
artifact hashes; a phase whose hash is unchanged and whose outputs exist is
skipped, which makes reruns idempotent and grids cheap (variants share the
victim, shadow, evaluators and adversarial caches through the cache).
"""

from __future__ import annotations

import csv
import shutil
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import datahub as dh
from ..augment import (
    AugmentPolicy,
    build_training_set,
    disjointness_audit,
    finalize_traces,
    training_set_manifest,
)
from ..blackbox import SimbaParams, batch_summary, read_adversarial_cache, simba_batch, write_adversarial_cache
from ..datahub import ImageBatch, SplitManifest, image_hashes
from ..defense import DefenseConfig, adversarial_train, robust_accuracy
from ..distill import harvest_soft_labels, target_fingerprint, top1_agreement, train_shadow
from ..evalkit import (
    MetricsRecord,
    attack_accuracy,
    calibrate_convention,
    diversity_report,
    pseudo_label_consistency_probe,
    recon_error,
)
from ..invert import InversionLossConfig, reconstruct, train_inversion
from ..modelzoo import (
    ModelHandle,
    TrainConfig,
    build_model,
    classification_accuracy,
    load_checkpoint,
    save_checkpoint,
    train_classifier,
)
from ..util import append_jsonl, derive_seed, hash_file, read_json, stable_hash, write_json
from .config import RunConfig

PHASES = ["split", "train-target", "distill", "gen-adv", "train-inversion", "evaluate"]


class PhaseFailure(Exception):
    def __init__(self, phase: str, message: str):
        super().__init__(f"phase {phase!r} failed: {message}")
        self.phase = phase


@dataclass
class _Paths:
    run_dir: Path

    def __post_init__(self) -> None:
        self.run_dir = Path(self.run_dir)

    @property
    def manifest(self) -> Path:
        return self.run_dir / "manifest.json"

    @property
    def state(self) -> Path:
        return self.run_dir / "phase_state.json"

    @property
    def metrics(self) -> Path:
        return self.run_dir / "metrics.jsonl"

    @property
    def run_manifest(self) -> Path:
        return self.run_dir / "run-manifest.json"

    def ckpt(self, name: str) -> Path:
        return self.run_dir / "checkpoints" / f"{name}.ckpt"

    def cache(self, name: str) -> Path:
        return self.run_dir / "cache" / name


class ArtifactCache:
    """Content-addressed store shared between runs: <root>/<kind>/<key>."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def lookup(self, kind: str, key: str) -> Path | None:
        p = self.root / kind / key[:24]
        return p if p.exists() else None

    def put(self, kind: str, key: str, src: Path) -> None:
        dst = self.root / kind / key[:24]
        if dst.exists():
            return
        dst.parent.mkdir(parents=True, exist_ok=True)
        tmp = dst.with_suffix(".tmp")
        if tmp.exists():
            shutil.rmtree(tmp) if tmp.is_dir() else tmp.unlink()
        if src.is_dir():
            shutil.copytree(src, tmp)
        else:
            shutil.copy2(src, tmp)
        tmp.rename(dst)

    @staticmethod
    def fetch(found: Path, dst: Path) -> None:
        dst.parent.mkdir(parents=True, exist_ok=True)
        if dst.exists():
            shutil.rmtree(dst) if dst.is_dir() else dst.unlink()
        if found.is_dir():
            shutil.copytree(found, dst)
        else:
            shutil.copy2(found, dst)


class Runner:
    def __init__(self, cfg: RunConfig, run_dir: str | Path | None = None):
        self.cfg = cfg
        self.paths = _Paths(Path(run_dir or cfg.out_dir))
        self.paths.run_dir.mkdir(parents=True, exist_ok=True)
        cache_root = cfg.artifact_cache or str(Path(cfg.out_dir).parent / "artifact-cache")
        self.cache = ArtifactCache(cache_root)
        self.run_id = stable_hash(cfg.to_dict())
        self._state = read_json(self.paths.state) if self.paths.state.exists() else {}
        if cfg.deterministic:
            import torch

            torch.use_deterministic_algorithms(True)

    # -- plumbing -----------------------------------------------------------

    def _save_state(self) -> None:
        write_json(self.paths.state, self._state)

    def _outputs_exist(self, phase: str) -> bool:
        entry = self._state.get(phase)
        if not entry:
            return False
        return all((self.paths.run_dir / rel).exists() for rel in entry.get("outputs", {}))

    def _record(self, phase: str, input_hash: str, outputs: dict, wall: float, info: dict) -> None:
        self._state[phase] = {
            "input_hash": input_hash,
            "outputs": outputs,
            "wall_time": wall,
            "info": info,
        }
        self._save_state()
        append_jsonl(self.paths.metrics, {"run_id": self.run_id, "phase": phase, "wall_time": wall, **info})

    def _phase(self, phase: str, input_hash: str, execute) -> dict:
        entry = self._state.get(phase)
        if entry and entry.get("input_hash") == input_hash and self._outputs_exist(phase):
            return entry["info"]
        t0 = time.time()
        try:
            outputs, info = execute()
        except PhaseFailure:
            raise
        except Exception as exc:
            raise PhaseFailure(phase, str(exc)) from exc
        self._record(phase, input_hash, outputs, time.time() - t0, info)
        return info

    def _seed(self, *tags) -> int:
        return derive_seed(self.cfg.seed, *tags)

    # -- dataset helpers ------------------------------------------------------

    def _manifest(self) -> SplitManifest:
        if not self.paths.manifest.exists():
            raise PhaseFailure("train-target", "manifest missing; run the split phase first")
        return SplitManifest.load(self.paths.manifest)

    def _width_and_map(self, manifest: SplitManifest):
        source = dh.load_source(self.cfg.dataset, self.cfg.data_root)
        if self.cfg.classes is not None:
            width = int(self.cfg.classes)
            label_map = None
            if width < max(source.class_ids) + 1:
                label_map = list(manifest.private_class_ids)
            return width, label_map
        if source.kind == "identities":
            return len(manifest.private_class_ids), list(manifest.private_class_ids)
        return len(source.class_ids), None

    def _image_shape(self) -> tuple[int, int, int]:
        source = dh.load_source(self.cfg.dataset, self.cfg.data_root)
        return tuple(int(d) for d in source.train_images.shape[1:])  # type: ignore[return-value]

    def _load(self, side, subset) -> ImageBatch:
        return dh.load_all(self._manifest(), side, subset, self.cfg.data_root)

    def _oracle_handle(self) -> ModelHandle:
        name = "defended-target" if self.cfg.defense else "target"
        path = self.paths.ckpt(name)
        if not path.exists():
            raise PhaseFailure("distill", f"{name} checkpoint missing; run train-target first")
        return load_checkpoint(path).as_query_only()

    # -- phases ---------------------------------------------------------------

    def phase_split(self) -> dict:
        cfg = self.cfg
        input_hash = stable_hash(
            {"dataset": cfg.dataset, "split": cfg.split.__dict__, "seed": cfg.seed}
        )

        def execute():
            if cfg.split.scheme == "by-class-range":
                scheme = dh.SplitScheme.by_class_range(
                    tuple(cfg.split.private), tuple(cfg.split.public)
                )
            else:
                scheme = dh.SplitScheme.by_identity_count(
                    int(cfg.split.private[0] if isinstance(cfg.split.private, list) else cfg.split.private),
                    int(cfg.split.public[0] if isinstance(cfg.split.public, list) else cfg.split.public),
                )
            manifest = dh.build_split(cfg.dataset, scheme, cfg.seed, cfg.data_root)
            manifest.save(self.paths.manifest)
            return {"manifest.json": manifest.checksum}, {
                "manifest_checksum": manifest.checksum,
                "private_classes": list(manifest.private_class_ids),
                "public_classes": list(manifest.public_class_ids),
            }

        return self._phase("split", input_hash, execute)

    def phase_train_target(self) -> dict:
        cfg = self.cfg
        manifest = self._manifest()
        input_hash = stable_hash(
            {
                "manifest": manifest.checksum,
                "target": cfg.target.__dict__,
                "defense": cfg.defense.__dict__ if cfg.defense else None,
                "classes": cfg.classes,
                "seed": self._seed("target"),
            }
        )

        def execute():
            width, label_map = self._width_and_map(manifest)
            shape = self._image_shape()
            info: dict = {}
            outputs: dict = {}
            test = self._load("private", "test")

            def train_one(name: str, defended: bool) -> None:
                ckpt = self.paths.ckpt(name)
                cached = self.cache.lookup("checkpoint", input_hash + name)
                if cached:
                    ArtifactCache.fetch(cached, ckpt)
                    handle = load_checkpoint(ckpt)
                else:
                    base = build_model(
                        cfg.target.arch, num_classes=width, image_shape=shape,
                        seed=self._seed("target-init", name),
                    )
                    source = dh.batch_source(
                        manifest, "private", cfg.target.batch_size,
                        self._seed("target-shuffle", name), data_root=cfg.data_root,
                    )
                    if defended:
                        dcfg = DefenseConfig(
                            gamma=cfg.defense.gamma,
                            mix_ratio=cfg.defense.mix_ratio,
                            warmup_epochs=cfg.defense.warmup_epochs,
                        )
                        hyper = TrainConfig(
                            epochs=cfg.defense.epochs, lr=cfg.defense.lr,
                            label_smoothing=cfg.defense.label_smoothing,
                            seed=self._seed("target-train", name),
                        )
                        handle, _ = adversarial_train(
                            base, source, dcfg, hyper, label_map=label_map
                        )
                    else:
                        hyper = TrainConfig(
                            epochs=cfg.target.epochs, lr=cfg.target.lr,
                            optimizer=cfg.target.optimizer,
                            label_smoothing=cfg.target.label_smoothing,
                            weight_decay=cfg.target.weight_decay,
                            seed=self._seed("target-train", name),
                        )
                        handle, _ = train_classifier(base, source, hyper, label_map=label_map)
                    save_checkpoint(handle, ckpt)
                    self.cache.put("checkpoint", input_hash + name, ckpt)
                outputs[f"checkpoints/{name}.ckpt"] = hash_file(ckpt)
                info[f"{name}_test_accuracy"] = classification_accuracy(handle, test, label_map)
                if defended:
                    info[f"{name}_robust_accuracy"] = robust_accuracy(
                        handle, test, cfg.defense.gamma, label_map
                    )

            train_one("target", defended=False)
            if cfg.defense:
                train_one("defended-target", defended=True)
            return outputs, info

        return self._phase("train-target", input_hash, execute)

    def phase_distill(self) -> dict:
        cfg = self.cfg
        manifest = self._manifest()
        oracle = self._oracle_handle()
        fp = target_fingerprint(oracle, manifest.checksum)
        input_hash = stable_hash({"fingerprint": fp, "shadow": cfg.shadow.__dict__, "seed": self._seed("shadow")})

        def execute():
            outputs: dict = {}
            cached = self.cache.lookup("shadow", input_hash)
            train_cache = self.paths.cache(f"softlabels-train")
            test_cache = self.paths.cache(f"softlabels-test")
            queries_before = oracle.query_count
            dset = harvest_soft_labels(
                oracle, [self._load("public", "train")], fp, cache_dir=train_cache
            )
            dset_ho = harvest_soft_labels(
                oracle, [self._load("public", "test")], fp, cache_dir=test_cache
            )
            harvest_queries = oracle.query_count - queries_before
            ckpt = self.paths.ckpt("shadow")
            if cached:
                ArtifactCache.fetch(cached, ckpt)
                shadow = load_checkpoint(ckpt)
                agreement = None
            else:
                width = dset.targets.shape[1]
                base = build_model(
                    cfg.shadow.arch, num_classes=width, image_shape=self._image_shape(),
                    seed=self._seed("shadow-init"),
                )
                hyper = TrainConfig(epochs=cfg.shadow.epochs, lr=cfg.shadow.lr, seed=self._seed("shadow-train"))
                shadow, log = train_shadow(
                    base, dset, hyper, holdout=dset_ho,
                    temperature=cfg.shadow.temperature, batch_size=cfg.shadow.batch_size,
                )
                agreement = log[-1]["agreement"] if log else None
                save_checkpoint(shadow, ckpt)
                self.cache.put("shadow", input_hash, ckpt)
            if agreement is None:
                agreement = top1_agreement(shadow, dset_ho)
            outputs["checkpoints/shadow.ckpt"] = hash_file(ckpt)
            outputs["cache/softlabels-train/records.npz"] = fp
            outputs["cache/softlabels-test/records.npz"] = fp
            return outputs, {
                "fingerprint": fp,
                "agreement": agreement,
                "harvest_queries": harvest_queries,
            }

        return self._phase("distill", input_hash, execute)

    def _attack_oracle(self) -> tuple[ModelHandle, str]:
        if self.cfg.attack.query_oracle == "shadow":
            path = self.paths.ckpt("shadow")
            if not path.exists():
                raise PhaseFailure("gen-adv", "shadow checkpoint missing; run distill first")
            return load_checkpoint(path).as_query_only(), "shadow"
        return self._oracle_handle(), "target"

    def phase_gen_adv(self) -> dict:
        cfg = self.cfg
        if not cfg.inversion.augment:
            input_hash = stable_hash({"augment": False})
            return self._phase("gen-adv", input_hash, lambda: ({}, {"skipped": "augment disabled"}))
        manifest = self._manifest()
        oracle, oracle_name = self._attack_oracle()
        target = self._oracle_handle()
        input_hash = stable_hash(
            {
                "oracle": oracle.state_fingerprint(),
                "attack": cfg.attack.__dict__,
                "manifest": manifest.checksum,
                "seed": self._seed("adv"),
            }
        )

        def execute():
            adv_dir = self.paths.cache("adv")
            cached = self.cache.lookup("adv", input_hash)
            pub = self._load("public", "train")
            pixels, hashes = pub.pixels, image_hashes(pub.pixels)
            if cfg.attack.max_images is not None and cfg.attack.max_images < len(pixels):
                rng = np.random.default_rng(self._seed("adv-subset"))
                idx = np.sort(rng.permutation(len(pixels))[: cfg.attack.max_images])
                pixels = pixels[idx]
                hashes = [hashes[i] for i in idx]
            target_before = target.query_count
            if cached:
                ArtifactCache.fetch(cached, adv_dir)
                records = read_adversarial_cache(adv_dir)
                summary = {
                    "asr": float(np.mean([r.success for r in records])),
                    "mean_l2": float(
                        np.mean([r.delta_l2 for r in records if r.success])
                    )
                    if any(r.success for r in records)
                    else None,
                    "mean_queries": float(np.mean([r.queries_used for r in records])),
                    "count": len(records),
                    "successes": int(sum(r.success for r in records)),
                }
            else:
                params = SimbaParams(
                    epsilon=cfg.attack.epsilon, k=cfg.attack.k,
                    max_rounds=cfg.attack.max_rounds,
                    direction_space=cfg.attack.direction_space,
                )
                traces = simba_batch(oracle, pixels, params, seed=self._seed("adv"))
                summary = batch_summary(traces)
                records = finalize_traces(oracle, pixels, hashes, traces)
                write_adversarial_cache(adv_dir, records)
                self.cache.put("adv", input_hash, adv_dir)
            # criterion: crafting via the shadow must not consume target queries
            target_queries = (
                (target.query_count - target_before) if oracle_name == "target" else 0
            )
            info = {
                "oracle": oracle_name,
                "asr": summary["asr"],
                "mean_l2": summary["mean_l2"],
                "mean_queries": summary["mean_queries"],
                "attacked": summary["count"],
                "successes": summary["successes"],
                "target_queries_this_phase": target_queries
                if oracle_name == "target"
                else 0,
                "failed_discarded": summary["count"] - summary["successes"],
            }
            return {"cache/adv/index.csv": input_hash}, info

        return self._phase("gen-adv", input_hash, execute)

    def _training_samples(self, dset, for_eval: bool = False):
        cfg = self.cfg
        records = []
        if cfg.inversion.augment:
            adv_dir = self.paths.cache("adv")
            if not (adv_dir / "index.csv").exists():
                raise PhaseFailure("train-inversion", "adversarial cache missing; run gen-adv")
            records = read_adversarial_cache(adv_dir)
        policy = AugmentPolicy(adv_ratio=cfg.inversion.adv_ratio, shuffle_seed=self._seed("mix"))
        return build_training_set(dset, records, policy)

    def phase_train_inversion(self) -> dict:
        cfg = self.cfg
        manifest = self._manifest()
        oracle = self._oracle_handle()
        fp = target_fingerprint(oracle, manifest.checksum)
        shadow_hash = None
        if cfg.inversion.lam > 0:
            shadow_path = self.paths.ckpt("shadow")
            if not shadow_path.exists():
                raise PhaseFailure("train-inversion", "shadow checkpoint missing; run distill")
            shadow_hash = hash_file(shadow_path)
        adv_state = self._state.get("gen-adv", {}).get("input_hash") if cfg.inversion.augment else None
        input_hash = stable_hash(
            {
                "fingerprint": fp,
                "inversion": cfg.inversion.__dict__,
                "shadow": shadow_hash,
                "adv": adv_state,
                "seed": self._seed("inversion"),
            }
        )

        def execute():
            dset = harvest_soft_labels(
                oracle, [self._load("public", "train")], fp,
                cache_dir=self.paths.cache("softlabels-train"),
            )
            samples = self._training_samples(dset)
            tmanifest = training_set_manifest(samples)
            write_json(self.paths.run_dir / "samples" / "training-set.json", tmanifest)
            ckpt = self.paths.ckpt("inversion")
            cached = self.cache.lookup("inversion", input_hash)
            if cached:
                ArtifactCache.fetch(cached, ckpt)
            else:
                shadow = load_checkpoint(self.paths.ckpt("shadow")) if cfg.inversion.lam > 0 else None
                losscfg = InversionLossConfig(
                    lam=cfg.inversion.lam, recon_metric=cfg.inversion.recon_metric,
                    semantic_backend=shadow,
                )
                width = dset.targets.shape[1]
                inv0 = build_model(
                    cfg.inversion.arch, num_classes=width,
                    output_shape=self._image_shape(), seed=self._seed("inversion-init"),
                )
                hyper = TrainConfig(
                    epochs=cfg.inversion.epochs, lr=cfg.inversion.lr,
                    seed=self._seed("inversion-train"),
                )
                loss_log = self.paths.run_dir / "inversion-loss.jsonl"
                loss_log.unlink(missing_ok=True)
                inv, _ = train_inversion(
                    inv0, samples, losscfg, hyper,
                    batch_size=cfg.inversion.batch_size,
                    sink=lambda entry: append_jsonl(loss_log, entry),
                    grid_dir=self.paths.run_dir / "figures" if cfg.inversion.grid_every else None,
                    grid_every=cfg.inversion.grid_every,
                )
                save_checkpoint(inv, ckpt)
                self.cache.put("inversion", input_hash, ckpt)
            info = {
                "samples": len(samples),
                "counts": tmanifest["counts"],
                "lambda": cfg.inversion.lam,
                "augment": cfg.inversion.augment,
            }
            if cfg.inversion.augment:
                info["disjointness_audit"] = disjointness_audit(samples, cfg.attack.k)
            return {"checkpoints/inversion.ckpt": hash_file(ckpt)}, info

        return self._phase("train-inversion", input_hash, execute)

    def _evaluator_handles(self, manifest) -> dict[str, ModelHandle]:
        cfg = self.cfg
        width, label_map = self._width_and_map(manifest)
        shape = self._image_shape()
        out: dict[str, ModelHandle] = {}
        for ecfg in cfg.evaluators:
            name = ecfg.arch + ("-robust" if ecfg.robust_gamma else "")
            key = stable_hash(
                {"manifest": manifest.checksum, "evaluator": ecfg.__dict__, "classes": cfg.classes,
                 "seed": self._seed("evaluator", name)}
            )
            ckpt = self.paths.ckpt(f"evaluator-{name}")
            cached = self.cache.lookup("checkpoint", key)
            if ckpt.exists():
                out[name] = load_checkpoint(ckpt)
                continue
            if cached:
                ArtifactCache.fetch(cached, ckpt)
                out[name] = load_checkpoint(ckpt)
                continue
            base = build_model(
                ecfg.arch, num_classes=width, image_shape=shape, seed=self._seed("evaluator-init", name)
            )
            source = dh.batch_source(
                manifest, "private", ecfg.batch_size, self._seed("evaluator-shuffle", name),
                data_root=cfg.data_root,
            )
            hyper = TrainConfig(
                epochs=ecfg.epochs, lr=ecfg.lr, label_smoothing=ecfg.label_smoothing,
                seed=self._seed("evaluator-train", name),
            )
            if ecfg.robust_gamma:
                handle, _ = adversarial_train(
                    base, source, DefenseConfig(gamma=ecfg.robust_gamma), hyper, label_map=label_map
                )
            else:
                handle, _ = train_classifier(base, source, hyper, label_map=label_map)
            save_checkpoint(handle, ckpt)
            self.cache.put("checkpoint", key, ckpt)
            out[name] = handle
        return out

    def phase_evaluate(self) -> dict:
        cfg = self.cfg
        manifest = self._manifest()
        inv_path = self.paths.ckpt("inversion")
        if not inv_path.exists():
            raise PhaseFailure("evaluate", "inversion checkpoint missing; run train-inversion")
        oracle = self._oracle_handle()
        input_hash = stable_hash(
            {
                "inversion": hash_file(inv_path),
                "oracle": oracle.state_fingerprint(),
                "evaluators": [e.__dict__ for e in cfg.evaluators],
                "evaluate": cfg.evaluate.__dict__,
                "probe": cfg.probe.__dict__ if cfg.evaluate.probe else None,
                "manifest": manifest.checksum,
            }
        )

        def execute():
            width, label_map = self._width_and_map(manifest)
            inv = load_checkpoint(inv_path)
            evaluators = self._evaluator_handles(manifest)
            priv = self._load("private", "train")
            n_eval = min(cfg.evaluate.eval_count, len(priv.pixels))
            eval_x = priv.pixels[:n_eval]
            eval_y = priv.labels[:n_eval]
            supervision = oracle.query(eval_x)
            xhat = reconstruct(inv, supervision)
            convention = cfg.evaluate.convention
            if convention == "auto":
                convention = calibrate_convention(eval_x, xhat, cfg.evaluate.reference_error)
            err = recon_error(eval_x, xhat, convention)
            accs = {
                name: attack_accuracy(xhat, eval_y, handle, label_map)
                for name, handle in evaluators.items()
            }
            test = self._load("private", "test")
            evaluator_clean = {
                name: classification_accuracy(handle, test, label_map)
                for name, handle in evaluators.items()
            }
            extra: dict = {
                "convention": convention,
                "evaluator_clean_accuracy": evaluator_clean,
                "eval_count": int(n_eval),
            }
            div = None
            if cfg.inversion.augment and cfg.inversion.lam > 0:
                fp = target_fingerprint(oracle, manifest.checksum)
                dset = harvest_soft_labels(
                    oracle, [self._load("public", "train")], fp,
                    cache_dir=self.paths.cache("softlabels-train"),
                )
                samples = self._training_samples(dset)
                rng = np.random.default_rng(self._seed("diversity"))
                clean = [s for s in samples if s.provenance == "clean"]
                adv = [s for s in samples if s.provenance == "adversarial"]
                keep = lambda lst: [lst[i] for i in rng.permutation(len(lst))[:600]]  # noqa: E731
                shadow = load_checkpoint(self.paths.ckpt("shadow"))
                losscfg = InversionLossConfig(
                    lam=cfg.inversion.lam, recon_metric=cfg.inversion.recon_metric,
                    semantic_backend=shadow,
                )
                div = diversity_report(inv, keep(clean) + keep(adv), losscfg)
            probe_tables = None
            if cfg.evaluate.probe:
                probe_tables = {}
                for side_name, batch in (
                    ("id", self._load("private", "test")),
                    ("ood", self._load("public", "test")),
                ):
                    px = batch.pixels[: cfg.probe.samples]
                    rows = {}
                    for eta in cfg.probe.noise_levels:
                        rows[str(eta)] = pseudo_label_consistency_probe(
                            oracle, ImageBatch(px), float(eta), cfg.probe.k_values,
                            cfg.probe.trials, seed=self._seed("probe", side_name, eta),
                        )
                    probe_tables[side_name] = rows
                extra["probe"] = probe_tables
            gen_info = self._state.get("gen-adv", {}).get("info", {})
            wall_times = {p: e.get("wall_time", 0.0) for p, e in self._state.items()}
            record = MetricsRecord(
                run_id=self.run_id,
                recon_error=err,
                attack_accuracy=accs,
                diversity=div,
                asr=gen_info.get("asr"),
                mean_l2=gen_info.get("mean_l2"),
                wall_times=wall_times,
                extra=extra,
            )
            append_jsonl(self.paths.metrics, {"phase": "metrics", **record.to_json()})
            summary = {
                "run_id": self.run_id,
                "name": cfg.name,
                "lambda": cfg.inversion.lam,
                "augment": cfg.inversion.augment,
                "recon_metric": cfg.inversion.recon_metric,
                "query_oracle": cfg.attack.query_oracle,
                "defense_gamma": cfg.defense.gamma if cfg.defense else None,
                "recon_error": err,
                "convention": convention,
                "attack_accuracy": accs,
                "evaluator_clean_accuracy": evaluator_clean,
                "diversity": div,
                "asr": gen_info.get("asr"),
                "mean_l2": gen_info.get("mean_l2"),
                "target_test_accuracy": self._state.get("train-target", {})
                .get("info", {})
                .get("target_test_accuracy"),
                "defended_test_accuracy": self._state.get("train-target", {})
                .get("info", {})
                .get("defended-target_test_accuracy"),
                "shadow_agreement": self._state.get("distill", {}).get("info", {}).get("agreement"),
                "wall_times": wall_times,
                "probe": probe_tables,
            }
            write_json(self.paths.run_dir / "summary.json", summary)
            return {"summary.json": stable_hash(summary)}, {
                "recon_error": err,
                "attack_accuracy": accs,
                "convention": convention,
            }

        return self._phase("evaluate", input_hash, execute)

    # -- entry ----------------------------------------------------------------

    def run(self, phases: list[str] | None = None) -> dict:
        cfg_copy = self.paths.run_dir / "config.yaml"
        import yaml

        cfg_copy.write_text(yaml.safe_dump(self.cfg.to_dict(), sort_keys=True))
        dispatch = {
            "split": self.phase_split,
            "train-target": self.phase_train_target,
            "distill": self.phase_distill,
            "gen-adv": self.phase_gen_adv,
            "train-inversion": self.phase_train_inversion,
            "evaluate": self.phase_evaluate,
        }
        result = {}
        for phase in phases or self.cfg.phases:
            result[phase] = dispatch[phase]()
        return result


def run_grid(variants: list[tuple[str, RunConfig]], out_dir: str | Path) -> list[dict]:
    """Run every variant (shared artifact cache) and write a comparison CSV."""
    out_dir = Path(out_dir)
    summaries = []
    for name, cfg in variants:
        run_dir = out_dir / "variants" / name if len(variants) > 1 else out_dir
        cfg.artifact_cache = cfg.artifact_cache or str(out_dir / "artifact-cache")
        runner = Runner(cfg, run_dir)
        runner.run()
        summaries.append(read_json(run_dir / "summary.json"))
    write_summary_table(summaries, out_dir / "tables" / "summary.csv")
    return summaries


def write_summary_table(summaries: list[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    eval_names = sorted({k for s in summaries for k in (s.get("attack_accuracy") or {})})
    cols = [
        "name", "run_id", "lambda", "augment", "recon_metric", "query_oracle",
        "defense_gamma", "recon_error", "convention", "asr", "mean_l2",
    ] + [f"acc_{n}" for n in eval_names]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(cols)
        for s in summaries:
            row = [s.get(c) for c in cols if not c.startswith("acc_")]
            row += [(s.get("attack_accuracy") or {}).get(n) for n in eval_names]
            writer.writerow(row)
