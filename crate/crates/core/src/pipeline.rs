//! Dataset layout and the five-stage reconstruction: stereo guide,
//! disambiguation, albedo, depth, evaluation.
//!
//! A dataset directory holds `manifest.json` listing every file with a role
//! tag, so each stage can be re-run on its own.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::albedo::{estimate_albedo, fill_specular, AlbedoConfig, LightSource};
use crate::camera::{CameraIntrinsics, StereoRig};
use crate::depth::{reconstruct_depth, DepthConfig, DepthInputs, DepthSolution};
use crate::error::{Error, Result};
use crate::eval::{depth_mae, normal_mae, MetricsReport};
use crate::geometry::{depth_normals, DifferenceScheme};
use crate::image::{Mask, ScalarMap, VectorMap};
use crate::io;
use crate::mrf::{build_graph, disambiguate, initial_specular_mask, BpConfig, Disambiguation, MrfWeights};
use crate::polarisation::{candidates, decompose, PolarisationImage, RefractiveIndex};
use crate::stereo::{disparity_to_depth, fill_and_smooth, sgm_disparity, FillConfig, GuideDepth, SgmConfig};
use crate::synth::{polarise, right_view, SceneConfig, SceneTruth};

/// Version of the manifest and configuration formats.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub role: String,
    pub path: PathBuf,
    /// Polariser angle in degrees for `polariser` entries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle_deg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub rig: StereoRig,
    pub light: LightSource,
    pub eta: RefractiveIndex,
    /// Sensor full range of the intensity images.
    pub full_range: f64,
    pub files: Vec<FileEntry>,
}

impl Manifest {
    pub fn file(&self, role: &str) -> Option<&FileEntry> {
        self.files.iter().find(|f| f.role == role)
    }
}

/// Ground truth carried by synthetic datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub depth: ScalarMap,
    pub normals: VectorMap,
    pub albedo: ScalarMap,
    pub dominance: Mask,
}

/// Observed inputs of one capture, optionally with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub rig: StereoRig,
    pub light: LightSource,
    pub eta: RefractiveIndex,
    pub full_range: f64,
    /// Polariser images `(angle in radians, image)` of the left camera.
    pub stack: Vec<(f64, ScalarMap)>,
    pub right: Option<ScalarMap>,
    pub foreground: Mask,
    pub truth: Option<GroundTruth>,
}

impl Dataset {
    /// Noisy observations of a rendered scene.
    pub fn from_scene(truth: &SceneTruth, cfg: &SceneConfig) -> Result<Self> {
        Ok(Self {
            rig: truth.rig,
            light: truth.light,
            eta: truth.eta,
            full_range: cfg.full_range,
            stack: polarise(truth, cfg)?,
            right: Some(right_view(truth, cfg)),
            foreground: truth.foreground.clone(),
            truth: Some(GroundTruth {
                depth: truth.depth.clone(),
                normals: truth.normals.clone(),
                albedo: truth.albedo.clone(),
                dominance: truth.dominance.clone(),
            }),
        })
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Manifest> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        let mut add = |role: &str, name: String, angle_deg: Option<f64>| {
            files.push(FileEntry {
                role: role.into(),
                path: PathBuf::from(&name),
                angle_deg,
            });
            dir.join(name)
        };
        for (k, (a, img)) in self.stack.iter().enumerate() {
            let deg = a.to_degrees();
            io::write_scalar_pfm(add("polariser", format!("pol_{k}.pfm"), Some(deg)), img)?;
        }
        if let Some(r) = &self.right {
            io::write_scalar_pfm(add("right", "right.pfm".into(), None), r)?;
        }
        io::write_mask_png(add("foreground", "foreground.png".into(), None), &self.foreground)?;
        if let Some(t) = &self.truth {
            io::write_scalar_pfm(add("gt_depth", "gt_depth.pfm".into(), None), &t.depth)?;
            io::write_vector_pfm(add("gt_normals", "gt_normals.pfm".into(), None), &t.normals)?;
            io::write_scalar_pfm(add("gt_albedo", "gt_albedo.pfm".into(), None), &t.albedo)?;
            io::write_mask_png(add("gt_dominance", "gt_dominance.png".into(), None), &t.dominance)?;
        }
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            rig: self.rig,
            light: self.light,
            eta: self.eta,
            full_range: self.full_range,
            files,
        };
        io::write_json(dir.join("manifest.json"), &manifest)?;
        Ok(manifest)
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = io::read_json(dir.join("manifest.json"))?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidInput(format!(
                "manifest schema {} is not supported (expected {SCHEMA_VERSION})",
                manifest.schema_version
            )));
        }
        manifest.rig.validate()?;
        let path = |role: &str| manifest.file(role).map(|f| dir.join(&f.path));
        let mut stack = Vec::new();
        for f in manifest.files.iter().filter(|f| f.role == "polariser") {
            let angle = f
                .angle_deg
                .ok_or_else(|| Error::InvalidInput(format!("polariser image {} has no angle", f.path.display())))?;
            stack.push((angle.to_radians(), io::read_intensity(dir.join(&f.path))?));
        }
        let right = path("right").map(io::read_intensity).transpose()?;
        let foreground = match path("foreground") {
            Some(p) => io::read_mask_png(p)?,
            None => Mask::new(manifest.rig.left.width, manifest.rig.left.height, true),
        };
        let truth = match (path("gt_depth"), path("gt_normals"), path("gt_albedo"), path("gt_dominance")) {
            (Some(d), Some(n), Some(a), Some(m)) => Some(GroundTruth {
                depth: io::read_scalar_pfm(d)?,
                normals: io::read_vector_pfm(n)?,
                albedo: io::read_scalar_pfm(a)?,
                dominance: io::read_mask_png(m)?,
            }),
            _ => None,
        };
        Ok(Self {
            rig: manifest.rig,
            light: manifest.light,
            eta: manifest.eta,
            full_range: manifest.full_range,
            stack,
            right,
            foreground,
            truth,
        })
    }

    /// Decomposed polarisation restricted to the foreground.
    pub fn polarisation(&self) -> Result<PolarisationImage> {
        Ok(decompose(&self.stack)?.image.restrict(&self.foreground))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub eta: Option<RefractiveIndex>,
    pub light: Option<LightSource>,
    pub mrf: MrfWeights,
    pub bp: BpConfig,
    pub sgm: SgmConfig,
    pub fill: FillConfig,
    pub albedo: AlbedoConfig,
    pub depth: DepthConfig,
    /// Fraction of the full range above which a pixel starts out specular.
    pub sat_threshold: f64,
    /// Use this depth map (PFM, metres) instead of running stereo.
    pub guide_depth: Option<PathBuf>,
    pub skip_stereo: bool,
    /// Skip the evaluation stage even when ground truth is present.
    pub skip_eval: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            eta: None,
            light: None,
            mrf: MrfWeights::default(),
            bp: BpConfig::default(),
            // verging rig: negative disparities occur; lighter penalties
            // keep the curved surface from being flattened
            sgm: SgmConfig {
                min_disparity: -64,
                max_disparity: 64,
                p1: 3,
                p2: 30,
                uniqueness: 0.1,
                ..SgmConfig::default()
            },
            fill: FillConfig::default(),
            albedo: AlbedoConfig::default(),
            depth: DepthConfig::default(),
            sat_threshold: 0.98,
            guide_depth: None,
            skip_stereo: false,
            skip_eval: false,
        }
    }
}

impl PipelineConfig {
    pub fn eta(&self, ds: &Dataset) -> RefractiveIndex {
        self.eta.unwrap_or(ds.eta)
    }

    pub fn light(&self, ds: &Dataset) -> LightSource {
        self.light.unwrap_or(ds.light)
    }
}

/// Stage 1: stereo depth restricted to the foreground, filled and filtered.
/// Depth and normals come back at file precision.
pub fn stage_stereo(ds: &Dataset, cfg: &PipelineConfig) -> Result<GuideDepth> {
    let mut g = stereo_guide(ds, cfg)?;
    g.depth = io::stored_scalar(&g.depth);
    g.normals = io::stored_vector(&g.normals);
    Ok(g)
}

/// Reads a guide written by [`write_guide`].
pub fn read_guide(dir: &Path) -> Result<GuideDepth> {
    let depth = io::read_scalar_pfm(dir.join(files::GUIDE_DEPTH))?;
    let normals = io::read_vector_pfm(dir.join(files::GUIDE_NORMALS))?;
    normals.check_dims(depth.dims())?;
    Ok(GuideDepth {
        valid: depth.mask(),
        depth,
        normals,
    })
}

pub fn write_guide(guide: &GuideDepth, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    io::write_scalar_pfm(dir.join(files::GUIDE_DEPTH), &guide.depth)?;
    io::write_vector_pfm(dir.join(files::GUIDE_NORMALS), &guide.normals)
}

fn stereo_guide(ds: &Dataset, cfg: &PipelineConfig) -> Result<GuideDepth> {
    let cam = &ds.rig.left;
    if cfg.skip_stereo || cfg.guide_depth.is_some() {
        let path = cfg
            .guide_depth
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("skipping stereo requires a guide depth map".into()))?;
        let depth = io::read_scalar_pfm(path)?;
        depth.check_dims(cam.dims())?;
        let keep = ds.foreground.and(&depth.mask());
        return GuideDepth::from_depth(depth.with_mask(&keep), cam)?.densify(&ds.foreground, cam, &cfg.depth.solver);
    }
    let right = ds
        .right
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("dataset has no right view".into()))?;
    // the unpolarised intensity is the left view; background is left at zero
    let mut left = ScalarMap::filled(cam.width, cam.height, 0.0);
    let full = decompose(&ds.stack)?.image;
    for (x, y, &v) in full.iun.iter_valid() {
        left.set(x, y, v);
    }
    let disp = sgm_disparity(&left, right, &cfg.sgm)?;
    let depth = disparity_to_depth(&disp, &ds.rig)?;
    let keep = depth.mask().and(&ds.foreground);
    let depth = depth.with_mask(&keep);
    fill_and_smooth(&depth, cam, &cfg.fill)?.densify(&ds.foreground, cam, &cfg.depth.solver)
}

/// Stage 2: candidates, graph and inference. The normals come back at file
/// precision.
pub fn stage_disambiguate(
    ds: &Dataset,
    pol: &PolarisationImage,
    guide: &GuideDepth,
    cfg: &PipelineConfig,
) -> Result<Disambiguation> {
    let (cands, stats) = candidates(pol, cfg.eta(ds), &ds.rig.left)?;
    log::info!(
        "candidates: {} low-polarisation, {} clamped diffuse, {} plane misses",
        stats.low_polarisation,
        stats.diffuse_clamped,
        stats.cone_misses
    );
    let l0 = initial_specular_mask(&pol.iun, cfg.sat_threshold, ds.full_range);
    let problem = build_graph(&cands, &pol.mask, &guide.normals, &l0, &ds.rig.left, &cfg.mrf)?;
    let mut out = disambiguate(&problem, &cfg.bp)?;
    out.normals = io::stored_vector(&out.normals);
    log::info!(
        "disambiguation energy {:.6} (unary-only {:.6}), {} specular",
        out.inference.energy,
        out.inference.baseline_energy,
        out.specular.count()
    );
    Ok(out)
}

/// Stage 3: albedo on diffuse pixels, nearest-neighbour filled elsewhere,
/// at file precision.
pub fn stage_albedo(
    ds: &Dataset,
    pol: &PolarisationImage,
    nprime: &VectorMap,
    specular: &Mask,
    cfg: &PipelineConfig,
) -> Result<ScalarMap> {
    let est = estimate_albedo(&pol.iun, nprime, specular, &cfg.light(ds), &cfg.albedo)?;
    log::info!(
        "albedo: {} clamped, {} unlit, {} dropped",
        est.clamped,
        est.unlit,
        est.dropped
    );
    Ok(io::stored_scalar(&fill_specular(&est.albedo, &nprime.mask())?))
}

/// Stage 4: the guide-anchored linear depth solve.
pub fn stage_depth(
    ds: &Dataset,
    pol: &PolarisationImage,
    nprime: &VectorMap,
    specular: &Mask,
    albedo: &ScalarMap,
    guide: &GuideDepth,
    cfg: &PipelineConfig,
) -> Result<DepthSolution> {
    let light = cfg.light(ds);
    let inputs = DepthInputs {
        pol,
        nprime,
        specular,
        albedo,
        guide: &guide.depth,
        light: &light,
        eta: cfg.eta(ds),
        cam: &ds.rig.left,
    };
    reconstruct_depth(&inputs, &cfg.depth)
}

/// Everything the pipeline produces.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub guide: GuideDepth,
    pub disambiguation: Disambiguation,
    pub albedo: ScalarMap,
    pub depth: DepthSolution,
    /// Normals of the final depth.
    pub normals: VectorMap,
    pub report: MetricsReport,
}

/// Stage 5: metrics against ground truth plus solver diagnostics.
pub fn stage_eval(
    truth: Option<&GroundTruth>,
    guide: &GuideDepth,
    dis: &Disambiguation,
    depth: &DepthSolution,
    normals: &VectorMap,
) -> Result<MetricsReport> {
    let mut r = MetricsReport::default();
    if let Some(t) = truth {
        let fg = depth.depth.mask();
        let on_fg = |m: &ScalarMap| m.clone().with_mask(&m.mask().and(&fg));
        let e = depth_mae(&depth.depth, &t.depth, false)?;
        r.push("depth_mae", e.mae_mm, "mm", e.pixels);
        // stereo and the proposed depth compared on the stereo pixels
        let anchors = on_fg(&guide.depth);
        let g = depth_mae(&anchors, &t.depth, false)?;
        r.push("guide_depth_mae", g.mae_mm, "mm", g.pixels);
        let both = depth.depth.clone().with_mask(&anchors.mask());
        let e = depth_mae(&both, &t.depth, false)?;
        r.push("depth_mae_on_guide_pixels", e.mae_mm, "mm", e.pixels);
        let (n, c) = normal_mae(normals, &t.normals)?;
        r.push("normal_mae", n, "deg", c);
        let gn = guide.normals.clone().with_mask(&guide.normals.mask().and(&fg));
        let (n, c) = normal_mae(&gn, &t.normals)?;
        r.push("guide_normal_mae", n, "deg", c);
        let (n, c) = normal_mae(&dis.normals, &t.normals)?;
        r.push("disambiguated_normal_mae", n, "deg", c);
        let mut agree = 0;
        let mut total = 0;
        for (x, y, _) in dis.normals.iter_valid() {
            if t.depth.is_valid(x, y) {
                total += 1;
                agree += (dis.specular.get(x, y) == t.dominance.get(x, y)) as usize;
            }
        }
        r.push("mask_agreement", agree as f64 / total.max(1) as f64, "fraction", total);
    }
    let n = depth.depth.count_valid();
    let res = &depth.residuals;
    r.push("residual_phase", res.phase, "norm", n);
    r.push("residual_guide_normal", res.guide_normal, "norm", n);
    r.push("residual_shading", res.shading, "norm", n);
    r.push("residual_anchor", res.anchor, "m", n);
    r.push("residual_relative", res.relative, "ratio", n);
    r.push("solver_iterations", depth.solver.iterations as f64, "count", n);
    r.push("mrf_energy", dis.inference.energy, "energy", dis.normals.count_valid());
    Ok(r)
}

/// Runs every stage and, when `out` is given, writes each intermediate.
pub fn run_pipeline(ds: &Dataset, cfg: &PipelineConfig, out: Option<&Path>) -> Result<PipelineOutput> {
    let pol = ds.polarisation().map_err(|e| e.in_stage("decompose"))?;
    let guide = stage_stereo(ds, cfg).map_err(|e| e.in_stage("stereo"))?;
    let dis = stage_disambiguate(ds, &pol, &guide, cfg).map_err(|e| e.in_stage("disambiguate"))?;
    let albedo = stage_albedo(ds, &pol, &dis.normals, &dis.specular, cfg).map_err(|e| e.in_stage("albedo"))?;
    let depth = stage_depth(ds, &pol, &dis.normals, &dis.specular, &albedo, &guide, cfg)
        .map_err(|e| e.in_stage("depth"))?;
    let normals = depth_output_normals(&depth.depth, &ds.rig.left)?;
    let truth = if cfg.skip_eval { None } else { ds.truth.as_ref() };
    let report = stage_eval(truth, &guide, &dis, &depth, &normals).map_err(|e| e.in_stage("eval"))?;
    let output = PipelineOutput {
        guide,
        disambiguation: dis,
        albedo,
        depth,
        normals,
        report,
    };
    if let Some(dir) = out {
        write_outputs(&output, ds, cfg, dir).map_err(|e| e.in_stage("write"))?;
    }
    Ok(output)
}

/// Output file names, shared with the stage subcommands.
pub mod files {
    pub const GUIDE_DEPTH: &str = "guide_depth.pfm";
    pub const GUIDE_NORMALS: &str = "guide_normals.pfm";
    pub const LABELS: &str = "labels.pfm";
    pub const NPRIME: &str = "nprime.pfm";
    pub const MASK: &str = "L.png";
    pub const ENERGY_TRACE: &str = "energy_trace.csv";
    pub const ALBEDO: &str = "albedo.pfm";
    pub const DEPTH: &str = "depth.pfm";
    pub const NORMALS: &str = "normals.pfm";
    pub const MESH: &str = "mesh.ply";
    pub const METRICS: &str = "metrics.csv";
    pub const CONFIG: &str = "config.json";
}

pub fn write_outputs(o: &PipelineOutput, ds: &Dataset, cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_guide(&o.guide, dir)?;
    write_disambiguation(&o.disambiguation, dir)?;
    io::write_scalar_pfm(dir.join(files::ALBEDO), &o.albedo)?;
    write_depth(&o.depth.depth, &o.normals, &ds.rig.left, dir)?;
    o.report.write_csv(dir.join(files::METRICS))?;
    io::write_json(dir.join(files::CONFIG), cfg)
}

/// Writes n′, the specular mask, the candidate labels and the energy trace.
pub fn write_disambiguation(d: &Disambiguation, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    io::write_vector_pfm(dir.join(files::NPRIME), &d.normals)?;
    io::write_mask_png(dir.join(files::MASK), &d.specular)?;
    io::write_scalar_pfm(dir.join(files::LABELS), &d.labels.labels.map(|&l| l as f64))?;
    let path = dir.join(files::ENERGY_TRACE);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["iteration", "energy"])?;
    for (i, e) in d.inference.trace.iter().enumerate() {
        w.write_record([i.to_string(), format!("{e:.17e}")])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Writes the depth, its normals and the triangulated mesh.
pub fn write_depth(depth: &ScalarMap, normals: &VectorMap, cam: &CameraIntrinsics, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    io::write_scalar_pfm(dir.join(files::DEPTH), depth)?;
    io::write_vector_pfm(dir.join(files::NORMALS), normals)?;
    io::write_depth_ply(dir.join(files::MESH), depth, cam)
}

/// Normals of a final depth map.
pub fn depth_output_normals(depth: &ScalarMap, cam: &CameraIntrinsics) -> Result<VectorMap> {
    depth_normals(depth, cam, DifferenceScheme::SmoothedCentral)
}

/// Unit vector helper for configuration parsing (`"x,y,z"`).
pub fn parse_vector(s: &str) -> Result<Vector3<f64>> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidInput(format!("cannot parse vector {s:?}")))?;
    if v.len() != 3 {
        return Err(Error::InvalidInput(format!("expected 3 components in {s:?}")));
    }
    Ok(Vector3::new(v[0], v[1], v[2]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::render;

    fn tiny() -> SceneConfig {
        SceneConfig {
            width: 64,
            height: 64,
            focal: 75.0,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn dataset_roundtrips_through_disk() {
        let cfg = tiny();
        let ds = Dataset::from_scene(&render(&cfg).unwrap(), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = ds.write(dir.path()).unwrap();
        assert_eq!(manifest.files.iter().filter(|f| f.role == "polariser").count(), 4);
        let back = Dataset::read(dir.path()).unwrap();
        assert_eq!(back.stack.len(), ds.stack.len());
        for ((a, x), (b, y)) in back.stack.iter().zip(&ds.stack) {
            assert!((a - b).abs() < 1e-12);
            for (p, q) in x.data().iter().zip(y.data()) {
                assert!((p - q).abs() < 1e-6);
            }
        }
        assert_eq!(back.foreground, ds.foreground);
        assert_eq!(back.truth.unwrap().dominance, ds.truth.unwrap().dominance);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let err = serde_json::from_str::<PipelineConfig>(r#"{"lambda_x": 1}"#).unwrap_err();
        assert!(err.to_string().contains("lambda_x"));
        let cfg: PipelineConfig = serde_json::from_str(r#"{"albedo": {"lambda_i": 3}}"#).unwrap();
        assert_eq!(cfg.albedo.lambda_i, 3.0);
        assert_eq!(cfg.depth.lambda, 0.5);
    }

    #[test]
    fn defaults_follow_the_method() {
        let c = PipelineConfig::default();
        assert_eq!((c.mrf.k, c.albedo.lambda_i, c.albedo.t, c.depth.lambda), (0.1, 1.0, 0.01, 0.5));
    }

    #[test]
    fn parse_vector_forms() {
        assert_eq!(parse_vector("0, 0,1").unwrap(), Vector3::z());
        assert!(parse_vector("0,1").is_err());
        assert!(parse_vector("a,b,c").is_err());
    }
}
