"""Stage orchestration: diffusion training, donor synthesis, AFS, joint training, evaluation.

Every stage writes into ``<work_dir>/<group>/<stage>-<key>/`` where ``key``
hashes the configuration fields the stage depends on together with the keys
of its upstream stages. A stage whose directory already holds a completed
``done.json`` is not recomputed.
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import diffusion as dm
from .compositor import SynthConfig, foreground_mask, synth_dataset
from .config import PipelineConfig
from .engine import (Rng, load_param_set, load_params, make_optimizer, param_set, params_digest, save_params,
                     save_tensor, set_deterministic)
from .features import AFSIndexCache, BuiltinExtractor, ExtractorConfig, FileExtractor, afs_select, apply_selection
from .imageio import (list_test, list_train, load_image, load_mask, save_heat_overlay, save_pgm16, save_png)
from .metrics import EvalReport, evaluate_scores
from .model import RealNetHead, predict, train_pipeline_step
from .rrs import RRSConfig

log = logging.getLogger(__name__)

DIFFUSION_KEYS = ["image_size", "diffusion_size", "diffusion_T", "diffusion_schedule", "diffusion_steps",
                  "diffusion_batch", "diffusion_lr", "diffusion_base", "diffusion_mults", "gamma", "multiclass"]
SYNTH_KEYS = ["sampler_kind", "sample_steps", "ddim_sigma_choice", "synth_count", "s_range", "seed",
              "donor_source", "texture_dir", "image_size"]
EXTRACTOR_KEYS = ["extractor_kind", "extractor_widths", "extractor_strides", "extractor_convs", "extractor_seed",
                  "feature_dir"]
AFS_KEYS = EXTRACTOR_KEYS + ["m", "afs_batches", "afs_batch_size", "afs_norm", "delta_range", "use_foreground",
                             "mask_threshold", "seed"]
TRAIN_KEYS = ["arch", "recon_depth", "recon_reduction", "rrs_mode", "rrs_P", "disc_hidden", "bn_momentum",
              "seg_at", "train_steps", "batch_size", "lr", "anomaly_fraction", "delta_range", "use_foreground",
              "mask_threshold", "seed"]


class MissingArtifactError(FileNotFoundError):
    pass


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    name: str
    train: torch.Tensor
    train_refs: list
    foregrounds: list
    digest: str


def groups(cfg: PipelineConfig) -> list[list[str]]:
    return [list(cfg.categories)] if cfg.multiclass else [[c] for c in cfg.categories]


def group_name(cats: list[str]) -> str:
    return "+".join(cats)


def _map(cfg: PipelineConfig, fn, items):
    if cfg.workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(cfg.workers) as pool:
        return list(pool.map(fn, items))


def _stack(images: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).contiguous()


def _tensor_digest(*ts) -> str:
    import hashlib
    h = hashlib.sha256()
    for t in ts:
        h.update(np.ascontiguousarray(t.numpy() if isinstance(t, torch.Tensor) else t).tobytes())
    return h.hexdigest()[:16]


def load_train(cfg: PipelineConfig, cats: list[str]) -> Dataset:
    records = []
    for c in cats:
        cat_dir = Path(cfg.dataset_root) / c / "train" / "good"
        if not cat_dir.is_dir():
            raise DataError(f"training directory not found: {cat_dir}")
        records += list_train(cfg.dataset_root, c)
    if not records:
        raise DataError(f"no training images under {Path(cfg.dataset_root)} for {cats}")
    images = _map(cfg, lambda r: load_image(r.path, cfg.image_size), records)
    fgs = _map(cfg, foreground_mask, images) if cfg.use_foreground else None
    train = _stack(images)
    return Dataset(group_name(cats), train, [r.relpath for r in records], fgs, _tensor_digest(train))


def load_test(cfg: PipelineConfig, cats: list[str]):
    records = []
    for c in cats:
        records += list_test(cfg.dataset_root, c)
    if not records:
        raise DataError(f"empty test split under {Path(cfg.dataset_root)} for {cats}")
    images = _map(cfg, lambda r: load_image(r.path, cfg.image_size), records)

    def mask_of(r):
        if r.mask_path is None:
            return np.zeros((cfg.image_size, cfg.image_size), np.float32)
        if not r.mask_path.exists():
            raise DataError(f"missing ground-truth mask {r.mask_path}")
        return load_mask(r.mask_path, cfg.image_size)

    masks = _map(cfg, mask_of, records)
    return records, _stack(images), np.stack(masks)


def _stage_dir(cfg: PipelineConfig, group: str, stage: str, key: str) -> Path:
    return Path(cfg.work_dir) / group / f"{stage}-{key}"


def _done(d: Path) -> bool:
    return (d / "done.json").exists()


def _finish(d: Path, cfg: PipelineConfig, info: dict) -> None:
    (d / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    (d / "done.json").write_text(json.dumps(info, indent=1, sort_keys=True))


def _locate(cfg, group, stage, key, what) -> Path:
    d = _stage_dir(cfg, group, stage, key)
    if not _done(d):
        raise MissingArtifactError(f"{what} not found at {d}; run the '{stage}' stage first")
    return d


def make_extractor(cfg: PipelineConfig):
    if cfg.extractor_kind == "file_ingest":
        return FileExtractor(cfg.feature_dir, K=len(cfg.m))
    return BuiltinExtractor(ExtractorConfig(widths=tuple(cfg.extractor_widths), strides=tuple(cfg.extractor_strides),
                                            convs_per_stage=cfg.extractor_convs, seed=cfg.extractor_seed))


def synth_config(cfg: PipelineConfig) -> SynthConfig:
    return SynthConfig(delta_range=tuple(cfg.delta_range), anomaly_fraction=cfg.anomaly_fraction,
                       use_foreground=cfg.use_foreground, threshold=cfg.mask_threshold)


# --------------------------------------------------------------------------
# stage keys
# --------------------------------------------------------------------------


def diffusion_key(cfg, data: Dataset) -> str:
    return cfg.digest(DIFFUSION_KEYS, {"seed": cfg.effective_diffusion_seed, "data": data.digest})


def synth_key(cfg, data: Dataset) -> str:
    up = diffusion_key(cfg, data) if cfg.donor_source == "sdas" else "texture"
    return cfg.digest(SYNTH_KEYS, {"up": up})


def afs_key(cfg, data: Dataset) -> str:
    return cfg.digest(AFS_KEYS, {"up": synth_key(cfg, data), "data": data.digest})


def train_key(cfg, data: Dataset) -> str:
    return cfg.digest(TRAIN_KEYS, {"up": afs_key(cfg, data)})


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------


def diffusion_train_config(cfg: PipelineConfig) -> dm.DiffusionTrainConfig:
    return dm.DiffusionTrainConfig(T=cfg.diffusion_T, schedule=cfg.diffusion_schedule, steps=cfg.diffusion_steps,
                                   batch_size=cfg.diffusion_batch, lr=cfg.diffusion_lr, gamma=cfg.gamma,
                                   base=cfg.diffusion_base, mults=tuple(cfg.diffusion_mults))


def _resize_images(x: torch.Tensor, size: int) -> torch.Tensor:
    if x.shape[-1] == size and x.shape[-2] == size:
        return x
    return torch.nn.functional.interpolate(x, size=(size, size), mode="bilinear", antialias=True,
                                           align_corners=False).clamp(0, 1)


def stage_train_diffusion(cfg: PipelineConfig, data: Dataset) -> Path:
    d = _stage_dir(cfg, data.name, "diffusion", diffusion_key(cfg, data))
    if _done(d):
        log.info("diffusion: cache hit %s", d)
        return d
    d.mkdir(parents=True, exist_ok=True)
    tcfg = diffusion_train_config(cfg)
    model, params, losses = dm.train_diffusion(_resize_images(data.train, cfg.diffusion_size), tcfg,
                                                Rng(cfg.effective_diffusion_seed).split("diffusion"))
    save_params(d / "model.params", params)
    with open(d / "loss.jsonl", "w") as f:
        for i, l in enumerate(losses):
            f.write(json.dumps({"step": i, "l_simple": l}) + "\n")
    _finish(d, cfg, {"digest": params_digest(params), "final_loss": losses[-1] if losses else None})
    return d


def load_denoiser(cfg: PipelineConfig, d: Path):
    tcfg = diffusion_train_config(cfg)
    model = dm.UNetDenoiser(channels=3, base=tcfg.base, mults=tcfg.mults)
    load_param_set(model, load_params(d / "model.params"))
    return model.eval(), dm.build_schedule(tcfg.T, tcfg.schedule)


def draw_strength(rng: Rng, lo: float, hi: float) -> float:
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def stage_synth(cfg: PipelineConfig, data: Dataset) -> Path:
    """Pre-generate the donor pool (SDAS samples) with a JSON-lines manifest."""
    d = _stage_dir(cfg, data.name, "synth", synth_key(cfg, data))
    if _done(d):
        log.info("synth: cache hit %s", d)
        return d
    if cfg.donor_source == "texture_dir":
        tex = Path(cfg.texture_dir)
        if not tex.is_dir() or not any(tex.iterdir()):
            raise DataError(f"texture donor directory empty or missing: {tex}")
        d.mkdir(parents=True, exist_ok=True)
        _finish(d, cfg, {"count": 0, "source": str(tex)})
        return d
    ddir = _locate(cfg, data.name, "diffusion", diffusion_key(cfg, data), "diffusion checkpoint")
    model, sched = load_denoiser(cfg, ddir)
    d.mkdir(parents=True, exist_ok=True)
    rng = Rng(cfg.seed).split("synth")
    lo, hi = cfg.s_range
    steps = dm.spaced_steps(cfg.diffusion_T, cfg.sample_steps)
    with open(d / "manifest.jsonl", "w") as f:
        for i in range(cfg.synth_count):
            r = rng.split(i)
            s = draw_strength(r, lo, hi)
            sc = dm.SamplerConfig(kind=cfg.sampler_kind, s=s, ddim_sigma_choice=cfg.ddim_sigma_choice, steps=steps)
            x = dm.sdas_sample(model, sched, sc, r, (1, 3, cfg.diffusion_size, cfg.diffusion_size))
            img = dm.to_unit_range(x)[0].permute(1, 2, 0).numpy()
            save_png(d / f"{i:05d}.png", img)
            save_tensor(d / f"{i:05d}.rntf", img)
            f.write(json.dumps({"index": i, "seed": cfg.seed, "s": s, "steps": steps,
                                "path": f"{i:05d}.png"}) + "\n")
    _finish(d, cfg, {"count": cfg.synth_count})
    return d


def load_donors(cfg: PipelineConfig, data: Dataset) -> list[np.ndarray]:
    if cfg.donor_source == "texture_dir":
        tex = Path(cfg.texture_dir)
        paths = sorted(p for p in tex.rglob("*") if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
        if not paths:
            raise DataError(f"no donor images in {tex}")
        return _map(cfg, lambda p: load_image(p, cfg.image_size), paths)
    d = _locate(cfg, data.name, "synth", synth_key(cfg, data), "synthesised donor pool")
    from .engine import load_tensor
    paths = sorted(d.glob("*.rntf"))
    if not paths:
        raise DataError(f"donor pool at {d} is empty")
    imgs = [load_tensor(p).permute(2, 0, 1)[None] for p in paths]
    x = _resize_images(torch.cat(imgs), cfg.image_size)
    return [img.permute(1, 2, 0).numpy() for img in x]


def afs_triplets(cfg: PipelineConfig, data: Dataset, donors, n: int, key: str):
    scfg = synth_config(cfg)
    scfg.anomaly_fraction = 1.0
    stream = synth_dataset([img.permute(1, 2, 0).numpy() for img in data.train], donors, scfg,
                           Rng(cfg.seed).split(key), count=n, foregrounds=data.foregrounds)
    samples = list(stream)
    A = _stack([s.A for s in samples])
    I = _stack([s.I for s in samples])
    M = torch.from_numpy(np.stack([s.M for s in samples]))
    refs_i = [data.train_refs[s.source_index] for s in samples]
    return A, I, M, refs_i


def stage_afs(cfg: PipelineConfig, data: Dataset) -> Path:
    d = _stage_dir(cfg, data.name, "afs", afs_key(cfg, data))
    cache_path = d / "afs_cache.json"
    if _done(d) and cache_path.exists():
        log.info("afs: cache hit %s", cache_path)
        return d
    donors = load_donors(cfg, data)
    A, I, M, refs_i = afs_triplets(cfg, data, donors, cfg.afs_batches * cfg.afs_batch_size, "afs")
    extractor = make_extractor(cfg)
    if cfg.extractor_kind == "file_ingest":
        raise DataError("AFS on synthesised images needs the builtin extractor; supply a precomputed cache")
    cache, hit = afs_select(extractor, A, I, M, cfg.m, cache_path=cache_path, norm=cfg.afs_norm)
    if hit:
        log.info("afs: cache hit %s", cache_path)
    for k, (idx, losses) in enumerate(zip(cache.indices, cache.losses)):
        sel = [losses[i] for i in idx]
        log.info("afs layer %d: kept %d/%d, loss %.4f..%.4f", k, len(idx), len(losses), min(sel), max(sel))
    _finish(d, cfg, {"digest": cache.digest, "cache_hit": hit})
    return d


def load_afs_cache(cfg, data: Dataset, extractor) -> AFSIndexCache:
    d = _locate(cfg, data.name, "afs", afs_key(cfg, data), "AFS cache")
    cache = AFSIndexCache.load(d / "afs_cache.json")
    if cache.extractor_id != extractor.extractor_id:
        raise MissingArtifactError(f"AFS cache at {d} was built for extractor {cache.extractor_id}")
    return cache


def build_head(cfg: PipelineConfig) -> RealNetHead:
    return RealNetHead(cfg.m, RRSConfig(cfg.rrs_mode, cfg.rrs_P), cfg.arch, cfg.recon_depth, cfg.disc_hidden,
                       cfg.bn_momentum, Rng(cfg.seed).split("head"))


def train_head(cfg: PipelineConfig, data: Dataset, donors, extractor, cache: AFSIndexCache, log_file=None):
    head = build_head(cfg)
    opt = make_optimizer(head.parameters(), lr=cfg.lr)
    stream = synth_dataset([img.permute(1, 2, 0).numpy() for img in data.train], donors, synth_config(cfg),
                           Rng(cfg.seed).split("train"), foregrounds=data.foregrounds)
    size = (cfg.image_size, cfg.image_size)
    history = []
    for step in range(cfg.train_steps):
        batch = [next(stream) for _ in range(cfg.batch_size)]
        A = _stack([s.A for s in batch])
        I = _stack([s.I for s in batch])
        M = torch.from_numpy(np.stack([s.M for s in batch]))
        sel_a = apply_selection(extractor.extract(A), cache)
        sel_i = apply_selection(extractor.extract(I), cache)
        res = train_pipeline_step(head, opt, sel_a, sel_i, M, size, cfg.recon_reduction, cfg.seg_at)
        history.append(res)
        if log_file is not None:
            log_file.write(json.dumps({"step": step, "recon": res.recon, "seg": res.seg}) + "\n")
        if step % 100 == 0:
            log.info("train step %d  L_recon %.3f  L_seg %.4f", step, res.recon, res.seg)
    head.eval()
    return head, history


def stage_train(cfg: PipelineConfig, data: Dataset) -> Path:
    d = _stage_dir(cfg, data.name, "train", train_key(cfg, data))
    if _done(d):
        log.info("train: cache hit %s", d)
        return d
    extractor = make_extractor(cfg)
    cache = load_afs_cache(cfg, data, extractor)
    donors = load_donors(cfg, data) if cfg.anomaly_fraction > 0 else []
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "losses.jsonl", "w") as f:
        head, history = train_head(cfg, data, donors, extractor, cache, f)
    params = param_set(head)
    save_params(d / "head.params", params)
    _finish(d, cfg, {"digest": params_digest(params),
                     "final_seg": history[-1].seg if history else None,
                     "final_recon": history[-1].recon if history else None})
    return d


def load_head(cfg: PipelineConfig, data: Dataset) -> RealNetHead:
    d = _locate(cfg, data.name, "train", train_key(cfg, data), "trained checkpoint")
    head = build_head(cfg)
    load_param_set(head, load_params(d / "head.params"))
    return head.eval()


def stage_eval(cfg: PipelineConfig, data: Dataset, export_dir: Path | None = None):
    cats = data.name.split("+")
    extractor = make_extractor(cfg)
    cache = load_afs_cache(cfg, data, extractor)
    head = load_head(cfg, data)
    records, images, masks = load_test(cfg, cats)
    refs = [r.relpath for r in records] if cfg.extractor_kind == "file_ingest" else None
    scores = predict(head, extractor, cache, images, refs)
    pixel = scores.pixel.double().numpy()
    image_scores = scores.image.double().numpy()
    report = evaluate_scores(image_scores, pixel, masks, [r.category for r in records], cfg.fpr_limit,
                             config_digest=cfg.result_digest())
    out = export_dir or (Path(cfg.work_dir) / data.name / f"eval-{train_key(cfg, data)}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.table() + "\n")
    if cfg.export_maps:
        with open(out / "scores.jsonl", "w") as f:
            for i, r in enumerate(records):
                name = f"{r.category}_{r.defect}_{r.path.stem}"
                save_pgm16(out / "maps" / f"{name}.pgm", pixel[i])
                save_heat_overlay(out / "maps" / f"{name}.png", images[i].permute(1, 2, 0).numpy(), pixel[i])
                f.write(json.dumps({"image": str(r.path), "mask": str(r.mask_path) if r.mask_path else None,
                                    "image_score": float(image_scores[i]), "map": f"maps/{name}.pgm"}) + "\n")
    return report, out


def merge_reports(reports: list[EvalReport], cfg: PipelineConfig) -> EvalReport:
    if len(reports) == 1:
        return reports[0]
    per_cat = {}
    for r in reports:
        per_cat.update(r.per_category)
    keys = ("image_auroc", "pixel_auroc", "pro")
    avg = {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
    return EvalReport(n_images=sum(r.n_images for r in reports), n_anomalous=sum(r.n_anomalous for r in reports),
                      n_pixels_positive=sum(r.n_pixels_positive for r in reports),
                      n_pixels_negative=sum(r.n_pixels_negative for r in reports), per_category=per_cat,
                      config_digest=cfg.result_digest(), **avg)


def run_all(cfg: PipelineConfig) -> EvalReport:
    """All five stages for every category group; returns the (merged) report."""
    set_deterministic(cfg.threads)
    reports = []
    for cats in groups(cfg):
        data = load_train(cfg, cats)
        t0 = time.time()
        if cfg.donor_source == "sdas":
            stage_train_diffusion(cfg, data)
        stage_synth(cfg, data)
        stage_afs(cfg, data)
        stage_train(cfg, data)
        report, _ = stage_eval(cfg, data)
        log.info("%s done in %.1fs", data.name, time.time() - t0)
        reports.append(report)
    return merge_reports(reports, cfg)
