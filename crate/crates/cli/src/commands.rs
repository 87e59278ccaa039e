//! Subcommand bodies. Every stage reads the dataset manifest plus the files
//! written by the stages before it.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use polarstereo::albedo::LightSource;
use polarstereo::eval::{depth_mae, normal_mae, MetricsReport};
use polarstereo::io;
use polarstereo::pipeline::{
    depth_output_normals, files, parse_vector, read_guide, run_pipeline, stage_albedo, stage_depth,
    stage_disambiguate, stage_stereo, write_depth, write_disambiguation, write_guide, Dataset, PipelineConfig,
};
use polarstereo::polarisation::RefractiveIndex;
use polarstereo::synth::{render, SceneConfig};

use crate::{AlbedoArgs, DepthArgs, DisambiguateArgs, EvalArgs, PipelineArgs, StageArgs, StereoArgs, SynthArgs};

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => io::read_json(p).with_context(|| format!("reading configuration {}", p.display())),
        None => Ok(PipelineConfig::default()),
    }
}

/// Dataset and configuration with the shared overrides applied.
fn open_stage(a: &StageArgs) -> Result<(Dataset, PipelineConfig)> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(eta) = a.eta {
        cfg.eta = Some(RefractiveIndex::new(eta)?);
    }
    if let Some(s) = &a.light {
        cfg.light = Some(LightSource::new(parse_vector(s)?)?);
    }
    let ds = Dataset::read(&a.dataset).with_context(|| format!("reading dataset {}", a.dataset.display()))?;
    Ok((ds, cfg))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let mut cfg: SceneConfig = match &a.config {
        Some(p) => io::read_json(p).with_context(|| format!("reading scene {}", p.display()))?,
        None => SceneConfig::default(),
    };
    if let Some(n) = a.noise {
        cfg.noise = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let truth = render(&cfg)?;
    let manifest = Dataset::from_scene(&truth, &cfg)?.write(&a.out)?;
    io::write_json(a.out.join("scene.json"), &cfg)?;
    log::info!(
        "wrote {} files for {} foreground pixels to {}",
        manifest.files.len(),
        truth.foreground.count(),
        a.out.display()
    );
    Ok(())
}

pub fn stereo(a: &StereoArgs) -> Result<()> {
    let (ds, mut cfg) = open_stage(&a.stage)?;
    if let Some(d) = a.min_disp {
        cfg.sgm.min_disparity = d;
    }
    if let Some(d) = a.max_disp {
        cfg.sgm.max_disparity = d;
    }
    if let Some(p) = &a.guide_depth {
        cfg.guide_depth = Some(p.clone());
        cfg.skip_stereo = true;
    }
    let guide = stage_stereo(&ds, &cfg).context("stage stereo")?;
    log::info!("guide: {} measured of {} foreground pixels", guide.valid.count(), ds.foreground.count());
    write_guide(&guide, &a.out)?;
    Ok(())
}

pub fn disambiguate(a: &DisambiguateArgs) -> Result<()> {
    let (ds, mut cfg) = open_stage(&a.stage)?;
    if let Some(k) = a.k {
        cfg.mrf.k = k;
    }
    if let Some(w) = a.w_pair {
        cfg.mrf.w_pair = w;
    }
    if let Some(w) = a.w_tern {
        cfg.mrf.w_tern = w;
    }
    if let Some(n) = a.iters {
        cfg.bp.max_iters = n;
    }
    let guide = read_guide(&a.guide)?;
    let pol = ds.polarisation()?;
    let dis = stage_disambiguate(&ds, &pol, &guide, &cfg).context("stage disambiguate")?;
    write_disambiguation(&dis, &a.out)?;
    Ok(())
}

pub fn albedo(a: &AlbedoArgs) -> Result<()> {
    let (ds, mut cfg) = open_stage(&a.stage)?;
    if let Some(l) = a.lambda_i {
        cfg.albedo.lambda_i = l;
    }
    if let Some(t) = a.t {
        cfg.albedo.t = t;
    }
    let nprime = io::read_vector_pfm(&a.normals)?;
    let specular = io::read_mask_png(&a.mask)?;
    let pol = ds.polarisation()?;
    let albedo = stage_albedo(&ds, &pol, &nprime, &specular, &cfg).context("stage albedo")?;
    create_parent(&a.out)?;
    io::write_scalar_pfm(&a.out, &albedo)?;
    Ok(())
}

pub fn depth(a: &DepthArgs) -> Result<()> {
    let (ds, mut cfg) = open_stage(&a.stage)?;
    if let Some(l) = a.lambda {
        cfg.depth.lambda = l;
    }
    let nprime = io::read_vector_pfm(&a.normals)?;
    let specular = io::read_mask_png(&a.mask)?;
    let albedo = io::read_scalar_pfm(&a.albedo)?;
    let guide = read_guide(&a.guide)?;
    let pol = ds.polarisation()?;
    let sol = stage_depth(&ds, &pol, &nprime, &specular, &albedo, &guide, &cfg).context("stage depth")?;
    log::info!(
        "depth: {} pixels, relative residual {:.3e}, {} solver iterations",
        sol.depth.count_valid(),
        sol.residuals.relative,
        sol.solver.iterations
    );
    let normals = depth_output_normals(&sol.depth, &ds.rig.left)?;
    write_depth(&sol.depth, &normals, &ds.rig.left, &a.out)?;
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let est = io::read_scalar_pfm(&a.est)?;
    let gt = io::read_scalar_pfm(&a.gt)?;
    let mut report = MetricsReport::default();
    let e = depth_mae(&est, &gt, a.align_scale)?;
    report.push("depth_mae", e.mae_mm, "mm", e.pixels);
    report.push("scale_applied", e.scale, "ratio", e.pixels);
    if let (Some(ne), Some(ng)) = (&a.normals_est, &a.normals_gt) {
        let (n, c) = normal_mae(&io::read_vector_pfm(ne)?, &io::read_vector_pfm(ng)?)?;
        report.push("normal_mae", n, "deg", c);
    }
    for m in &report.metrics {
        log::info!("{} = {:.6} {} over {} pixels", m.metric, m.value, m.unit, m.pixels);
    }
    create_parent(&a.out)?;
    report.write_csv(&a.out)?;
    Ok(())
}

pub fn pipeline(a: &PipelineArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(l) = a.lambda {
        cfg.depth.lambda = l;
    }
    if let Some(p) = &a.guide_depth {
        cfg.guide_depth = Some(p.clone());
    }
    cfg.skip_stereo |= a.skip_stereo;
    if let Some(dir) = &a.dataset {
        let ds = Dataset::read(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
        let out = run_pipeline(&ds, &cfg, Some(&a.out))?;
        log_report(&out.report);
        return Ok(());
    }
    let Some(scene_path) = &a.scene else {
        bail!("either --dataset or --scene is required");
    };
    let scene: SceneConfig =
        io::read_json(scene_path).with_context(|| format!("reading scene {}", scene_path.display()))?;
    let levels = if a.noise_sweep.is_empty() {
        vec![scene.noise]
    } else {
        a.noise_sweep.clone()
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut sweep = csv::Writer::from_path(a.out.join("sweep.csv"))?;
    sweep.write_record(["sigma", "metric", "value", "unit", "pixels"])?;
    for sigma in levels {
        let cfg_scene = SceneConfig {
            noise: sigma,
            ..scene.clone()
        };
        let dir = a.out.join(format!("sigma_{sigma}"));
        log::info!("noise level {sigma}: {}", dir.display());
        let truth = render(&cfg_scene)?;
        let ds = Dataset::from_scene(&truth, &cfg_scene)?;
        ds.write(dir.join("dataset"))?;
        let out = run_pipeline(&ds, &cfg, Some(&dir))?;
        log_report(&out.report);
        for m in &out.report.metrics {
            sweep.write_record([
                sigma.to_string(),
                m.metric.clone(),
                m.value.to_string(),
                m.unit.clone(),
                m.pixels.to_string(),
            ])?;
        }
    }
    sweep.flush()?;
    Ok(())
}

fn log_report(r: &MetricsReport) {
    for m in &r.metrics {
        log::info!("{} = {:.6} {}", m.metric, m.value, m.unit);
    }
    log::info!("metrics written to {}", files::METRICS);
}
