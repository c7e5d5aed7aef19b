"""Pipeline orchestration CLI.

Subcommands cover each stage (dataset, fit, train-vae, train-ldm, sample,
refine, caption, eval) plus `e2e`, which chains them with artifact caching:
a stage reruns only when its config slice or an upstream artifact changed.
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

import click
import numpy as np

from . import captionflow
from . import report as reporting
from .artifacts import ArtifactStore
from .autodiff import Tensor
from .autodiff.io import load_bundle, save_bundle
from .config import PROFILES, PipelineConfig, default_config, load_config
from .diffusion import (
    Denoiser,
    build_schedule,
    ddim_sample,
    embed_caption,
    train_ldm,
)
from .fitting import eval_psnr, samples_from_manifest, train_shared_decoder
from .refine import (
    AnalyticGaussianScore,
    Mesh,
    load_obj,
    marching_cubes,
    orbit_cameras_for_refine,
    refine_pipeline,
    remove_floaters,
    save_obj,
    save_ply,
)
from .synthdata import build_manifest, load_manifest, save_image
from .triplane import (
    SharedDecoder,
    decode_point,
    load_triplane,
    render_image,
    save_triplane,
)
from .vae import (
    LatentStats,
    TriplaneVae,
    compute_latent_stats,
    decode_latent,
    denormalize_latent,
    encode_triplane,
    normalize_latent,
    train_vae,
)

STAGE_ORDER = ("dataset", "fit", "vae", "ldm", "sample", "refine")

# Config keys (by prefix) that participate in each stage's cache hash;
# upstream changes are caught through recorded artifact hashes instead.
STAGE_PREFIXES = {
    "dataset": ("seed", "dataset."),
    "fit": ("seed", "fit."),
    "vae": ("seed", "vae.", "fit.channels", "fit.resolution", "fit.split"),
    "ldm": ("seed", "ldm."),
    "sample": ("seed", "sample.", "ldm.timesteps", "ldm.snr_shift"),
    "refine": ("seed", "refine."),
}

STAGE_UPSTREAM = {
    "dataset": (),
    "fit": ("dataset",),
    "vae": ("fit",),
    "ldm": ("vae",),
    "sample": ("ldm", "vae", "fit"),
    "refine": ("sample", "fit"),
}


def _stage_hash(cfg: PipelineConfig, stage, extra=None):
    keep = {
        k: v for k, v in cfg.values.items()
        if any(k == p or k.startswith(p) for p in STAGE_PREFIXES[stage])
    }
    if extra:
        keep.update(extra)
    blob = json.dumps(keep, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _load_cfg(config_path, profile, artifacts, seed):
    cfg = load_config(config_path) if config_path \
        else default_config(profile or "desk")
    if profile and config_path:
        base = dict(default_config(profile).values)
        base.update(cfg.values)
        cfg = PipelineConfig(base)
    updates = {}
    if artifacts:
        updates["artifacts"] = artifacts
    if seed is not None:
        updates["seed"] = seed
    return cfg.replace(**updates) if updates else cfg


def common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(exists=True),
                      default=None, help="Pipeline config file.")(fn)
    fn = click.option("--profile", type=click.Choice(sorted(PROFILES)),
                      default=None, help="Named settings profile.")(fn)
    fn = click.option("--artifacts", default=None,
                      help="Artifact directory override.")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="Seed override.")(fn)
    return fn


# ---------------------------------------------------------------- geometry


def mesh_from_triplane(tp, dec, resolution=32, iso=None, extent=0.95,
                       chunk=16384) -> Mesh:
    """Extract a colored mesh from a tri-plane's density field.

    Evaluates density on a lattice over [-extent, extent]^3, thresholds it
    at `iso` (default: quarter of the peak density), and runs marching
    cubes on (iso - density) so dense regions are inside.
    """
    axis = np.linspace(-extent, extent, resolution, dtype=np.float32)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    sigma = np.empty(len(pts), np.float32)
    for start in range(0, len(pts), chunk):
        _, s = decode_point(tp, dec, pts[start:start + chunk])
        sigma[start:start + chunk] = s.data.reshape(-1)
    if iso is None:
        lo, hi = float(sigma.min()), float(sigma.max())
        iso = max(0.25 * hi, 1e-3)
        if not lo < iso < hi:  # density never crosses the usual level
            iso = 0.5 * (lo + hi)
    field = (iso - sigma).reshape(resolution, resolution, resolution)
    spacing = 2.0 * extent / (resolution - 1)
    verts, faces = marching_cubes(
        Tensor(field), origin=np.array([-extent] * 3, np.float32),
        spacing=spacing)
    if len(faces) == 0:
        return Mesh(np.zeros((0, 3), np.float32), np.zeros((0, 3), np.int64))
    rgb, _ = decode_point(tp, dec, np.clip(verts.data, -1.0, 1.0))
    return Mesh(verts.data, faces, np.clip(rgb.data, 0.0, 1.0))


# ------------------------------------------------------------------ stages


def _manifest(store):
    return load_manifest(store.root / "dataset" / "manifest.jsonl")


def _load_decoder(store):
    arrays, meta = load_bundle(store.root / "fit" / "decoder")
    dec = SharedDecoder(meta["color_in"], meta["density_in"],
                        hidden=meta["hidden"], depth=meta["depth"])
    dec.load_state(arrays)
    return dec


def _load_latents(store):
    data = np.load(store.root / "vae" / "latents.npz", allow_pickle=False)
    stats = LatentStats(mu=data["mu"], sigma=data["sigma"])
    return data["latents"], list(data["ids"]), stats


def run_dataset(cfg, store, log=print):
    h = _stage_hash(cfg, "dataset")
    if store.fresh("dataset", h):
        return "cached"
    build_manifest(cfg["dataset.n_objects"], cfg["dataset.n_views"],
                   cfg["dataset.resolution"], store.root / "dataset",
                   seed=cfg.seed)
    store.record("dataset", h)
    return "built"


def run_fit(cfg, store, log=print):
    h = _stage_hash(cfg, "fit")
    if store.fresh("fit", h, STAGE_UPSTREAM["fit"]):
        return "cached"
    samples = samples_from_manifest(_manifest(store))
    fc = cfg.fit_config()
    dec, planes, _ = train_shared_decoder(samples, fc)
    psnrs = {}
    for sample in samples:
        psnrs[sample.object_id] = eval_psnr(planes[sample.object_id], dec,
                                            sample, fc, max_views=2)
        save_triplane(store.root / "fit" / "triplanes" / sample.object_id,
                      planes[sample.object_id])
    save_bundle(
        store.root / "fit" / "decoder", dec.state_arrays(),
        {"color_in": 3 * fc.split, "density_in": 3 * (fc.channels - fc.split),
         "hidden": fc.hidden, "depth": fc.depth},
    )
    (store.root / "fit" / "psnr.json").write_text(
        json.dumps(psnrs, indent=2, sort_keys=True))
    log(f"  mean fit PSNR {np.mean(list(psnrs.values())):.2f} dB")
    store.record("fit", h, STAGE_UPSTREAM["fit"])
    return "built"


def run_vae(cfg, store, log=print):
    h = _stage_hash(cfg, "vae")
    if store.fresh("vae", h, STAGE_UPSTREAM["vae"]):
        return "cached"
    manifest = _manifest(store)
    ids = manifest.object_ids
    planes = [load_triplane(store.root / "fit" / "triplanes" / oid)
              for oid in ids]
    vae, _ = train_vae(planes, cfg.vae_config(), steps=cfg["vae.steps"],
                       lr=cfg["vae.lr"], batch=cfg["vae.batch"],
                       seed=cfg.seed)
    latents = [encode_triplane(vae, tp) for tp in planes]
    stats = compute_latent_stats(latents)
    normed = np.stack([normalize_latent(l, stats) for l in latents])
    vae.save(store.root / "vae" / "model")
    np.savez(store.root / "vae" / "latents.npz", latents=normed,
             ids=np.array(ids), mu=stats.mu, sigma=stats.sigma)
    store.record("vae", h, STAGE_UPSTREAM["vae"])
    return "built"


def run_ldm(cfg, store, log=print):
    h = _stage_hash(cfg, "ldm")
    if store.fresh("ldm", h, STAGE_UPSTREAM["ldm"]):
        return "cached"
    latents, ids, _ = _load_latents(store)
    caption_by_id = {r["id"]: r.get("caption", "")
                     for r in _manifest(store).records}
    captions = [caption_by_id[i] for i in ids]
    schedule = build_schedule(cfg["ldm.timesteps"],
                              shift=cfg["ldm.snr_shift"])
    model, history = train_ldm(
        list(latents), captions, schedule, steps=cfg["ldm.steps"],
        lr=cfg["ldm.lr"], batch=cfg["ldm.batch"], seed=cfg.seed,
        model_cfg=cfg.denoiser_config(),
    )
    log(f"  final LDM loss {np.mean(history[-50:]):.4f}")
    model.save(store.root / "ldm" / "model", schedule)
    store.record("ldm", h, STAGE_UPSTREAM["ldm"])
    return "built"


def run_sample(cfg, store, prompt, steps=None, guidance=None, seed=None,
               log=print):
    steps = cfg["sample.steps"] if steps is None else steps
    guidance = cfg["sample.guidance"] if guidance is None else guidance
    seed = cfg.seed if seed is None else seed
    extra = {"prompt": prompt, "steps": steps, "guidance": guidance,
             "sample_seed": seed}
    h = _stage_hash(cfg, "sample", extra)
    if store.fresh("sample", h, STAGE_UPSTREAM["sample"]):
        return "cached"
    model, schedule = Denoiser.load(store.root / "ldm" / "model")
    if schedule is None:
        schedule = build_schedule(cfg["ldm.timesteps"],
                                  shift=cfg["ldm.snr_shift"])
    _, _, stats = _load_latents(store)
    latent = ddim_sample(model, embed_caption(prompt), schedule,
                         n_steps=steps, guidance=guidance, seed=seed)
    latent_hash = hashlib.sha256(latent.tobytes()).hexdigest()
    vae = TriplaneVae.load(store.root / "vae" / "model")
    tp = decode_latent(vae, denormalize_latent(latent, stats))
    dec = _load_decoder(store)
    mesh = remove_floaters(
        mesh_from_triplane(tp, dec, resolution=cfg["refine.sdf_resolution"]))
    if mesh.is_empty():
        raise click.ClickException("sampled density field has no surface")
    out = store.root / "sample"
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "latent.npy", latent)
    save_triplane(out / "triplane", tp)
    save_obj(out / "coarse.obj", mesh)
    preview_cam = orbit_cameras_for_refine(cfg.refine_config())[0]
    img = render_image(tp, dec, preview_cam, 24)
    save_image(out / "preview.png", np.clip(img.data, 0.0, 1.0))
    (out / "meta.json").write_text(json.dumps(
        {"prompt": prompt, "steps": steps, "guidance": guidance,
         "seed": seed, "latent_hash": latent_hash}, indent=2, sort_keys=True))
    log(f"  coarse mesh: {mesh.n_faces} faces, latent {latent_hash[:12]}")
    store.record("sample", h, STAGE_UPSTREAM["sample"])
    return "built"


def run_refine(cfg, store, prompt, skip_latent=False, latent_iters=None,
               pixel_iters=None, seed=None, log=print):
    rcfg = cfg.refine_config()
    if latent_iters is not None:
        rcfg.latent_iters = latent_iters
    if pixel_iters is not None:
        rcfg.pixel_iters = pixel_iters
    if seed is not None:
        rcfg.seed = seed
    rcfg.skip_latent = skip_latent
    extra = {"prompt": prompt, "skip_latent": rcfg.skip_latent,
             "latent_iters": rcfg.latent_iters,
             "pixel_iters": rcfg.pixel_iters, "refine_seed": rcfg.seed}
    h = _stage_hash(cfg, "refine", extra)
    if store.fresh("refine", h, STAGE_UPSTREAM["refine"]):
        return "cached"
    mesh = load_obj(store.root / "sample" / "coarse.obj")
    tp = load_triplane(store.root / "sample" / "triplane")
    dec = _load_decoder(store)
    cams = orbit_cameras_for_refine(rcfg)
    stage1 = []
    for cam in cams:
        img = render_image(tp, dec, cam, 24)
        stage1.append((cam, np.clip(img.data, 0.0, 1.0)))
    schedule = build_schedule(cfg["ldm.timesteps"])
    # Analytic priors stand in for pretrained diffusion models: the latent
    # prior pulls renders toward the mean stage-1 view, the pixel prior
    # sharpens toward the frozen coarse-texture render.
    mean_view = np.mean([img for _, img in stage1], axis=0)
    latent_score = AnalyticGaussianScore(schedule, m=mean_view)
    pixel_score = AnalyticGaussianScore(schedule, m=None)
    final, _ = refine_pipeline(mesh, stage1, prompt, latent_score,
                               pixel_score, schedule, rcfg, cameras=cams)
    out = store.root / "refine"
    out.mkdir(parents=True, exist_ok=True)
    save_obj(out / "refined.obj", final)
    save_ply(out / "refined.ply", final)
    log(f"  refined mesh: {final.n_faces} faces "
        f"(budget {rcfg.face_budget})")
    store.record("refine", h, STAGE_UPSTREAM["refine"])
    return "built"


def _default_prompt(store):
    records = _manifest(store).records
    if not records:
        raise click.ClickException("dataset manifest is empty")
    return records[0].get("caption", "an object")


# -------------------------------------------------------------------- CLI


@click.group()
def main():
    """Two-stage text-to-3D pipeline: tri-plane latent diffusion plus
    SDS-refined mesh export."""


@main.command()
@common_options
def dataset(config_path, profile, artifacts, seed):
    """Render the procedural multi-view dataset."""
    cfg = _load_cfg(config_path, profile, artifacts, seed)
    status = run_dataset(cfg, ArtifactStore(cfg.artifact_dir))
    click.echo(f"dataset: {status}")


@main.command()
@common_options
def fit(config_path, profile, artifacts, seed):
    """Fit per-object tri-planes with a shared decoder."""
    cfg = _load_cfg(config_path, profile, artifacts, seed)
    status = run_fit(cfg, ArtifactStore(cfg.artifact_dir), log=click.echo)
    click.echo(f"fit: {status}")


@main.command("train-vae")
@common_options
def train_vae_cmd(config_path, profile, artifacts, seed):
    """Train the tri-plane VAE and encode the latent set."""
    cfg = _load_cfg(config_path, profile, artifacts, seed)
    status = run_vae(cfg, ArtifactStore(cfg.artifact_dir), log=click.echo)
    click.echo(f"vae: {status}")


@main.command("train-ldm")
@common_options
def train_ldm_cmd(config_path, profile, artifacts, seed):
    """Train the caption-conditioned latent diffusion model."""
    cfg = _load_cfg(config_path, profile, artifacts, seed)
    status = run_ldm(cfg, ArtifactStore(cfg.artifact_dir), log=click.echo)
    click.echo(f"ldm: {status}")


@main.command()
@common_options
@click.option("--prompt", required=True, help="Text prompt.")
@click.option("--steps", type=int, default=None, help="DDIM steps.")
@click.option("--guidance", type=float, default=None,
              help="Classifier-free guidance scale.")
@click.option("--sample-seed", type=int, default=None,
              help="Sampling noise seed.")
@click.option("--out", type=click.Path(), default=None,
              help="Also copy the coarse OBJ here.")
def sample(config_path, profile, artifacts, seed, prompt, steps, guidance,
           sample_seed, out):
    """Sample a latent from text and decode it to a coarse mesh."""
    cfg = _load_cfg(config_path, profile, artifacts, seed)
    store = ArtifactStore(cfg.artifact_dir)
    status = run_sample(cfg, store, prompt, steps=steps, guidance=guidance,
                        seed=sample_seed, log=click.echo)
    src = store.root / "sample" / "coarse.obj"
    if out:
        Path(out).write_text(src.read_text())
    click.echo(f"sample: {status} -> {out or src}")


@main.command()
@common_options
@click.option("--mesh", "mesh_path", type=click.Path(exists=True),
              default=None,
              help="Coarse OBJ to refine (default: sample stage output).")
@click.option("--prompt", required=True, help="Text prompt.")
@click.option("--latent-iters", type=int, default=None)
@click.option("--pixel-iters", type=int, default=None)
@click.option("--skip-latent", is_flag=True, default=False,
              help="Skip the latent-space refinement phase.")
@click.option("--refine-seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None,
              help="Also copy the refined OBJ here.")
def refine(config_path, profile, artifacts, seed, mesh_path, prompt,
           latent_iters, pixel_iters, skip_latent, refine_seed, out):
    """Refine a coarse mesh with score-distillation texture/geometry."""
    cfg = _load_cfg(config_path, profile, artifacts, seed)
    store = ArtifactStore(cfg.artifact_dir)
    if mesh_path:
        target = store.root / "sample" / "coarse.obj"
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(Path(mesh_path).read_text())
    status = run_refine(cfg, store, prompt, skip_latent=skip_latent,
                        latent_iters=latent_iters, pixel_iters=pixel_iters,
                        seed=refine_seed, log=click.echo)
    src = store.root / "refine" / "refined.obj"
    if out:
        Path(out).write_text(src.read_text())
    click.echo(f"refine: {status} -> {out or src}")


@main.command()
@click.option("--manifest", "manifest_path", type=click.Path(exists=True),
              required=True)
@click.option("--provider-config", type=click.Path(exists=True), default=None)
@click.option("--out", type=click.Path(), required=True)
@click.option("--resume/--no-resume", default=True)
@click.option("--mock", is_flag=True, default=False,
              help="Use the offline mock provider.")
def caption(manifest_path, provider_config, out, resume, mock):
    """Run the caption -> simplify -> fuse pipeline over a dataset."""
    pcfg = captionflow.ProviderConfig.from_file(provider_config) \
        if provider_config else captionflow.ProviderConfig()
    provider = captionflow.MockProvider() if mock \
        else captionflow.HttpProvider(pcfg)
    manifest = load_manifest(manifest_path)
    stats = captionflow.run_pipeline(manifest, provider, pcfg, out,
                                     log_path=str(out) + ".requests",
                                     resume=resume)
    click.echo(json.dumps(stats, sort_keys=True))


@main.command("eval")
@common_options
def eval_cmd(config_path, profile, artifacts, seed):
    """Evaluate artifacts: fit PSNR, VAE render PSNR, latent stats,
    sampling determinism. Writes JSON/CSV plus figures."""
    from .fitting import psnr

    cfg = _load_cfg(config_path, profile, artifacts, seed)
    store = ArtifactStore(cfg.artifact_dir)
    missing = store.missing(["dataset", "fit", "vae", "ldm"])
    if missing:
        raise click.ClickException(f"missing artifacts: {missing}")

    fit_psnr = json.loads((store.root / "fit" / "psnr.json").read_text())

    manifest = _manifest(store)
    dec = _load_decoder(store)
    vae = TriplaneVae.load(store.root / "vae" / "model")
    samples = samples_from_manifest(manifest)
    fc = cfg.fit_config()
    vals = []
    for s in samples[:2]:
        tp = load_triplane(store.root / "fit" / "triplanes" / s.object_id)
        recon = decode_latent(
            vae, denormalize_latent(
                normalize_latent(encode_triplane(vae, tp),
                                 _load_latents(store)[2]),
                _load_latents(store)[2]))
        cam = s.views[0][0]
        a = render_image(tp, dec, cam, fc.eval_samples)
        b = render_image(recon, dec, cam, fc.eval_samples)
        vals.append(psnr(a.data, b.data))
    vae_psnr = float(np.mean(vals))

    latents, _, _ = _load_latents(store)
    norm_stats = compute_latent_stats(list(latents))

    model, schedule = Denoiser.load(store.root / "ldm" / "model")
    e = embed_caption(_default_prompt(store))
    l1 = ddim_sample(model, e, schedule, n_steps=20, seed=cfg.seed)
    l2 = ddim_sample(model, e, schedule, n_steps=20, seed=cfg.seed)
    if not np.array_equal(l1, l2):
        raise click.ClickException("sampling is not deterministic")
    sample_hash = hashlib.sha256(l1.tobytes()).hexdigest()

    rep = reporting.build_report(fit_psnr, vae_psnr, norm_stats, sample_hash)
    paths = reporting.write_report(rep, store.root / "eval")
    click.echo(json.dumps({k: str(v) for k, v in paths.items()
                           if k != "figures"}, sort_keys=True))
    for f in paths["figures"]:
        click.echo(f"figure: {f}")
    click.echo(f"fit PSNR mean {rep['fit_psnr_mean']:.2f} dB, "
               f"VAE render PSNR {rep['vae_psnr']:.2f} dB "
               f"(pass={rep['vae_psnr_pass']})")


@main.command()
@common_options
@click.option("--prompt", default=None,
              help="Sampling prompt (default: first dataset caption).")
@click.option("--dry-run", is_flag=True, default=False,
              help="Print the stage plan and exit.")
def e2e(config_path, profile, artifacts, seed, prompt, dry_run):
    """Run the full pipeline: dataset -> fit -> vae -> ldm -> sample ->
    refine."""
    cfg = _load_cfg(config_path, profile, artifacts, seed)
    if dry_run:
        click.echo(f"profile: {cfg['profile']}")
        click.echo(f"artifacts: {cfg.artifact_dir}")
        for name in STAGE_ORDER:
            ups = STAGE_UPSTREAM[name]
            click.echo(f"  {name}" + (f" (after {', '.join(ups)})"
                                      if ups else ""))
        return
    store = ArtifactStore(cfg.artifact_dir)
    t_total = time.time()
    for name in STAGE_ORDER:
        t0 = time.time()
        try:
            if name == "sample":
                status = run_sample(cfg, store,
                                    prompt or _default_prompt(store),
                                    log=click.echo)
            elif name == "refine":
                status = run_refine(cfg, store,
                                    prompt or _default_prompt(store),
                                    log=click.echo)
            else:
                runner = {"dataset": run_dataset, "fit": run_fit,
                          "vae": run_vae, "ldm": run_ldm}[name]
                status = runner(cfg, store, log=click.echo)
        except click.ClickException:
            raise
        except Exception as exc:
            raise click.ClickException(
                f"stage '{name}' failed: {exc}") from exc
        click.echo(f"[{name}] {status} ({time.time() - t0:.1f}s)")
    click.echo(f"done in {time.time() - t_total:.1f}s; refined mesh at "
               f"{store.root / 'refine' / 'refined.obj'}")


if __name__ == "__main__":
    main()
