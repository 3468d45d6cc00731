//! Run configuration, the two pipeline drivers, and image scoring.
//!
//! A `RunConfig` fully determines a run: the scene geometry, the image
//! plane, the source parameterization, loss weights, and solver settings.
//! Drivers echo the config into the output directory so every artifact can
//! be regenerated from that copy alone.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fluxrender::{
    flux_to_gray, gray_to_flux, neutral_reference_total, render_flux, FluxImage, Gamma,
    GrayImage, RenderReport,
};
use crate::geometry::{ImagePlane, LensSurface, Rect};
use crate::io::{self, BitDepth};
use crate::objectives::{
    lens_design_objective, source_fit_objective, DesignWeights, FitWeights, LensDesignProblem,
    SourceFitProblem,
};
use crate::oracle::{dense_grid_render, SourceProfile};
use crate::solver::{minimize, Minimization, SolverConfig, StopReason};
use crate::sourcemodel::{
    cell_center, init_params, InitMode, ParamKind, PointSourceSet, SourceParams,
};

/// Which optimization stage a solver config is for; the stages differ only
/// in their default gradient tolerance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Fit,
    Design,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Side of the square surface source at z = 0, cm.
    pub b: f64,
    /// z of the flat front face.
    pub front_z: f64,
    /// z of the receiving plane.
    pub plane_z: f64,
    pub lens_width: f64,
    pub lens_height: f64,
    pub grid_w: usize,
    pub grid_h: usize,
    /// Front-to-back distance of the initial flat lens.
    pub thickness: f64,
    pub refractive_index: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            b: 1.0,
            front_z: 120.0,
            plane_z: 150.0,
            lens_width: 10.0,
            lens_height: 10.0,
            grid_w: 65,
            grid_h: 65,
            thickness: 1.0,
            refractive_index: 1.49,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageConfig {
    /// Physical extent of the image on the receiving plane, cm.
    pub width: f64,
    pub height: f64,
    pub res_w: usize,
    pub res_h: usize,
    /// Display gamma exponent.
    pub gamma: f64,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self { width: 9.9, height: 9.9, res_w: 128, res_h: 128, gamma: 2.2 }
    }
}

/// How emitter parameters are laid out for the optimizer.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum Parameterization {
    Contracted,
    ContractedQuadrant,
    /// Verbatim coordinates; bounds enforced only by penalty terms.
    Raw,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    /// Number of rendered emitters.
    pub n: usize,
    pub parameterization: Parameterization,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self { n: 16, parameterization: Parameterization::Contracted }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsConfig {
    pub flux: f64,
    pub boundary: f64,
    pub intensity: f64,
    pub image: f64,
    pub gradient: f64,
    pub outside: f64,
    pub smooth: f64,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        let f = FitWeights::default();
        let d = DesignWeights::default();
        Self {
            flux: f.flux,
            boundary: f.boundary,
            intensity: f.intensity,
            image: d.image,
            gradient: d.gradient,
            outside: d.outside,
            smooth: d.smooth,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub history: usize,
    pub c1: f64,
    pub c2: f64,
    /// Stage default when absent: 1e-2 for fitting, 1e-4 for design.
    pub grad_tol: Option<f64>,
    pub max_iters: Option<usize>,
    pub max_line_search_steps: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        let base = SolverConfig::source_fit();
        Self {
            history: base.history,
            c1: base.c1,
            c2: base.c2,
            grad_tol: None,
            max_iters: None,
            max_line_search_steps: base.max_line_search_steps,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ReferencePair {
    pub lens: PathBuf,
    pub image: PathBuf,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub output_dir: PathBuf,
    /// Fit stage: observed images with the lenses they were seen through.
    pub references: Vec<ReferencePair>,
    /// Design stage inputs.
    pub source_table: Option<PathBuf>,
    pub target: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub image: ImageConfig,
    pub source: SourceConfig,
    pub weights: WeightsConfig,
    pub solver: SolverSection,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Fit-stage defaults at desk scale (65x65 lens grid, 128x128 image).
    pub fn desk_fit() -> Self {
        Self::default()
    }

    /// Design-stage defaults at desk scale: small source, far plane.
    pub fn desk_design() -> Self {
        let mut cfg = Self::default();
        cfg.scene.b = 0.1;
        cfg.scene.plane_z = 240.0;
        cfg.image.width = 20.0;
        cfg.image.height = 20.0;
        cfg
    }

    /// Published-scale fit profile (641x641 mesh, 640x640 image); expect
    /// hours per run.
    pub fn paper_fit() -> Self {
        let mut cfg = Self::desk_fit();
        cfg.scene.grid_w = 641;
        cfg.scene.grid_h = 641;
        cfg.image.res_w = 640;
        cfg.image.res_h = 640;
        cfg
    }

    /// Published-scale design profile.
    pub fn paper_design() -> Self {
        let mut cfg = Self::desk_design();
        cfg.scene.grid_w = 641;
        cfg.scene.grid_h = 641;
        cfg.image.res_w = 640;
        cfg.image.res_h = 640;
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }

    /// Write the fully resolved config into `dir` so the run can be
    /// reproduced from the output directory alone.
    pub fn echo_into(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join("config.toml");
        fs::write(&path, self.to_toml_string()?)?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scene;
        if !(s.b > 0.0 && s.lens_width > 0.0 && s.lens_height > 0.0 && s.thickness > 0.0) {
            return Err(Error::Config("scene lengths must be positive".into()));
        }
        if !(0.0 < s.front_z && s.front_z + s.thickness < s.plane_z) {
            return Err(Error::Config(format!(
                "need 0 < front_z and front_z + thickness < plane_z, got {} + {} vs {}",
                s.front_z, s.thickness, s.plane_z
            )));
        }
        if s.refractive_index <= 1.0 {
            return Err(Error::Config(format!(
                "refractive index must exceed 1, got {}",
                s.refractive_index
            )));
        }
        if s.grid_w < 2 || s.grid_h < 2 {
            return Err(Error::Config(format!(
                "lens grid must be at least 2x2, got {}x{}",
                s.grid_w, s.grid_h
            )));
        }
        let img = &self.image;
        if !(img.width > 0.0 && img.height > 0.0) || img.res_w == 0 || img.res_h == 0 {
            return Err(Error::Config("image extent and resolution must be positive".into()));
        }
        if !(img.gamma > 0.0) {
            return Err(Error::Config(format!("gamma {} must be positive", img.gamma)));
        }
        if self.source.n == 0 {
            return Err(Error::Config("source model needs at least one emitter".into()));
        }
        let w = &self.weights;
        for (name, v) in [
            ("flux", w.flux),
            ("boundary", w.boundary),
            ("intensity", w.intensity),
            ("image", w.image),
            ("gradient", w.gradient),
            ("outside", w.outside),
            ("smooth", w.smooth),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("weight {name} = {v} must be finite and >= 0")));
            }
        }
        self.solver_config(Stage::Fit)?.validate()
    }

    pub fn lens(&self) -> Result<LensSurface> {
        let s = &self.scene;
        LensSurface::flat(
            s.grid_w,
            s.grid_h,
            Rect::centered(s.lens_width, s.lens_height)?,
            s.front_z,
            s.thickness,
            s.refractive_index,
        )
    }

    pub fn plane(&self) -> Result<ImagePlane> {
        ImagePlane::new(
            self.scene.plane_z,
            Rect::centered(self.image.width, self.image.height)?,
            self.image.res_w,
            self.image.res_h,
        )
    }

    pub fn gamma(&self) -> Result<Gamma> {
        Gamma::new(self.image.gamma)
    }

    pub fn fit_weights(&self) -> FitWeights {
        FitWeights {
            flux: self.weights.flux,
            boundary: self.weights.boundary,
            intensity: self.weights.intensity,
        }
    }

    pub fn design_weights(&self) -> DesignWeights {
        DesignWeights {
            image: self.weights.image,
            gradient: self.weights.gradient,
            outside: self.weights.outside,
            smooth: self.weights.smooth,
        }
    }

    pub fn solver_config(&self, stage: Stage) -> Result<SolverConfig> {
        let default_tol = match stage {
            Stage::Fit => 1e-2,
            Stage::Design => 1e-4,
        };
        let cfg = SolverConfig {
            history: self.solver.history,
            c1: self.solver.c1,
            c2: self.solver.c2,
            max_iters: self.solver.max_iters.unwrap_or(300_000),
            grad_tol: self.solver.grad_tol.unwrap_or(default_tol),
            max_line_search_steps: self.solver.max_line_search_steps,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Starting parameter vector for the configured source model: a uniform
    /// lattice with equal intensities, expressed in the configured
    /// parameterization.
    pub fn initial_params(&self) -> Result<SourceParams> {
        let (n, b) = (self.source.n, self.scene.b);
        match self.source.parameterization {
            Parameterization::Contracted => init_params(n, b, InitMode::Grid),
            Parameterization::ContractedQuadrant => {
                init_params(n, b, InitMode::QuadrantSymmetric)
            }
            Parameterization::Raw => {
                let side = (n as f64).sqrt().round() as usize;
                if side * side != n {
                    return Err(Error::Config(format!(
                        "raw lattice init needs a perfect square, got N = {n}"
                    )));
                }
                let mut data = Vec::with_capacity(3 * n);
                for j in 0..side {
                    for i in 0..side {
                        data.push(cell_center(i, side, b));
                        data.push(cell_center(j, side, b));
                        data.push(1.0 / n as f64);
                    }
                }
                SourceParams::new(ParamKind::Raw, data, b)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Metrics and error maps
// ---------------------------------------------------------------------------

/// Full-reference scores in normalized gray space with C_max = 1.
#[derive(Clone, Copy, Debug)]
pub struct Metrics {
    pub mae: f64,
    pub mse: f64,
    /// 10 log10(1 / MSE) dB; infinite for identical images.
    pub psnr: f64,
}

fn check_same_size(p: &GrayImage, q: &GrayImage) -> Result<()> {
    if p.res_w() != q.res_w() || p.res_h() != q.res_h() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            p.res_w(),
            p.res_h(),
            q.res_w(),
            q.res_h()
        )));
    }
    Ok(())
}

fn metrics_of(diffs: impl Iterator<Item = f64>, n: usize) -> Metrics {
    let (mut abs, mut sq) = (0.0, 0.0);
    for d in diffs {
        abs += d.abs();
        sq += d * d;
    }
    let mae = abs / n as f64;
    let mse = sq / n as f64;
    let psnr = if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() };
    Metrics { mae, mse, psnr }
}

/// MAE and PSNR between two normalized images, computed in real space so
/// scores are not floored by 8-bit quantization.
pub fn metrics(p: &GrayImage, q: &GrayImage) -> Result<Metrics> {
    check_same_size(p, q)?;
    let n = p.data().len();
    Ok(metrics_of(p.data().iter().zip(q.data()).map(|(a, b)| a - b), n))
}

/// Same scores after snapping both images to the given sample grid, for
/// parity with scores computed on quantized files.
pub fn metrics_quantized(p: &GrayImage, q: &GrayImage, depth: BitDepth) -> Result<Metrics> {
    check_same_size(p, q)?;
    let maxval = match depth {
        BitDepth::Eight => 255.0,
        BitDepth::Sixteen => 65535.0,
    };
    let snap = move |v: f64| (v * maxval).round() / maxval;
    let n = p.data().len();
    Ok(metrics_of(p.data().iter().zip(q.data()).map(move |(a, b)| snap(*a) - snap(*b)), n))
}

/// Pixelwise absolute difference as a displayable image.
pub fn error_map(p: &GrayImage, q: &GrayImage) -> Result<GrayImage> {
    check_same_size(p, q)?;
    let data = p
        .data()
        .iter()
        .zip(q.data())
        .map(|(a, b)| (a - b).abs().min(1.0))
        .collect();
    GrayImage::from_data(p.res_w(), p.res_h(), data)
}

/// Mean and maximum of an error map.
pub fn error_stats(map: &GrayImage) -> (f64, f64) {
    let n = map.data().len() as f64;
    let mean = map.data().iter().sum::<f64>() / n;
    let max = map.data().iter().cloned().fold(0.0, f64::max);
    (mean, max)
}

/// Warn when more than 1% of streamed triangles lost their flux to total
/// internal reflection.
pub fn tir_warning(report: &RenderReport, streamed_pairs: usize) -> Option<String> {
    if streamed_pairs == 0 {
        return None;
    }
    let frac = report.tir as f64 / streamed_pairs as f64;
    (frac > 0.01).then(|| {
        format!(
            "total internal reflection on {:.2}% of triangles ({} of {streamed_pairs})",
            frac * 100.0,
            report.tir
        )
    })
}

// ---------------------------------------------------------------------------
// Pipeline drivers
// ---------------------------------------------------------------------------

/// Result of a source-fitting run.
pub struct FitOutcome {
    pub params: SourceParams,
    pub sources: PointSourceSet,
    pub initial_energy: f64,
    pub result: Minimization,
    /// Final render through each reference lens, with its report.
    pub rendered: Vec<(GrayImage, RenderReport)>,
    pub warnings: Vec<String>,
}

fn load_references(config: &RunConfig) -> Result<Vec<(LensSurface, GrayImage)>> {
    if config.paths.references.is_empty() {
        return Err(Error::Config("source fitting needs at least one reference pair".into()));
    }
    config
        .paths
        .references
        .iter()
        .map(|pair| {
            let lens = io::read_lens_obj(
                &pair.lens,
                config.scene.front_z,
                config.scene.refractive_index,
            )?;
            let image = io::read_pgm(&pair.image)?;
            Ok((lens, image))
        })
        .collect()
}

/// Fit the configured emitter model to the reference images.
pub fn run_fit(config: &RunConfig) -> Result<FitOutcome> {
    config.validate()?;
    let references = load_references(config)?;
    let mut problem = SourceFitProblem::new(references, config.plane()?, config.gamma()?)?;
    problem.weights = config.fit_weights();

    let params0 = config.initial_params()?;
    let kind = params0.kind;
    let b = params0.side();
    let objective = |x: &[f64]| {
        let p = SourceParams::new(kind, x.to_vec(), b)?;
        let ev = source_fit_objective(&p, &problem)?;
        Ok((ev.energy, ev.grad))
    };
    let result = minimize(objective, &params0.data, &config.solver_config(Stage::Fit)?)?;

    let params = SourceParams::new(kind, result.x.clone(), b)?;
    let sources = params.decode();
    let mut rendered = Vec::new();
    let mut warnings = Vec::new();
    for (m, (lens, _)) in problem.references().iter().enumerate() {
        let (flux, report) = render_flux(&sources, lens, problem.plane())?;
        let budget = gray_to_flux(&problem.references()[m].1, problem.gamma).total();
        let gray = flux_to_gray(&flux, budget, problem.gamma)?;
        if let Some(w) = tir_warning(&report, sources.len() * lens.triangle_count()) {
            warnings.push(format!("reference {m}: {w}"));
        }
        rendered.push((gray, report));
    }
    Ok(FitOutcome {
        params,
        sources,
        initial_energy: result.trace[0].energy,
        result,
        rendered,
        warnings,
    })
}

/// Write all fit artifacts into the configured output directory.
pub fn emit_fit_outputs(config: &RunConfig, outcome: &FitOutcome) -> Result<()> {
    let dir = &config.paths.output_dir;
    config.echo_into(dir)?;
    io::write_source_table(&dir.join("source_table.txt"), &outcome.sources)?;
    io::write_trace_csv(&dir.join("trace.csv"), &outcome.result.trace)?;
    for (m, (gray, _)) in outcome.rendered.iter().enumerate() {
        io::write_pgm(&dir.join(format!("rendered_{m}.pgm")), gray, BitDepth::Eight)?;
        let reference = io::read_pgm(&config.paths.references[m].image)?;
        let map = error_map(gray, &reference)?;
        io::write_pgm(&dir.join(format!("errormap_{m}.pgm")), &map, BitDepth::Eight)?;
        let (mean, max) = error_stats(&map);
        io::write_sidecar(
            &dir.join(format!("errormap_{m}.txt")),
            &[
                ("mean_abs_error", format!("{mean:.6e}")),
                ("max_abs_error", format!("{max:.6e}")),
            ],
        )?;
    }
    write_run_report(&dir.join("report.txt"), &outcome.result, &outcome.warnings)?;
    Ok(())
}

/// Result of a lens-design run.
pub struct DesignOutcome {
    pub lens: LensSurface,
    pub initial_energy: f64,
    pub result: Minimization,
    pub rendered: GrayImage,
    pub report: RenderReport,
    pub warnings: Vec<String>,
}

/// Optimize the back-surface heights against the target image.
pub fn run_design(config: &RunConfig) -> Result<DesignOutcome> {
    config.validate()?;
    let table = config
        .paths
        .source_table
        .as_ref()
        .ok_or_else(|| Error::Config("design needs paths.source_table".into()))?;
    let target_path = config
        .paths
        .target
        .as_ref()
        .ok_or_else(|| Error::Config("design needs paths.target".into()))?;
    let sources = io::read_source_table(table)?;
    let target = io::read_pgm(target_path)?;
    let lens = config.lens()?;
    run_design_with(config, sources, lens, target)
}

/// Same as [`run_design`] with the inputs already in memory.
pub fn run_design_with(
    config: &RunConfig,
    sources: PointSourceSet,
    lens: LensSurface,
    target: GrayImage,
) -> Result<DesignOutcome> {
    let mut problem =
        LensDesignProblem::new(sources, lens, target, config.plane()?, config.gamma()?)?;
    problem.weights = config.design_weights();

    let x0 = problem.lens().heights().to_vec();
    let objective = |x: &[f64]| {
        let ev = lens_design_objective(x, &problem)?;
        Ok((ev.energy, ev.grad))
    };
    let result = minimize(objective, &x0, &config.solver_config(Stage::Design)?)?;

    let lens = problem.lens().clone().with_heights(&result.x)?;
    let (flux, report) = render_flux(problem.sources(), &lens, problem.plane())?;
    let budget = gray_to_flux(problem.target(), problem.gamma).total();
    let rendered = flux_to_gray(&flux, budget, problem.gamma)?;
    let mut warnings = Vec::new();
    if let Some(w) =
        tir_warning(&report, problem.sources().len() * lens.triangle_count())
    {
        warnings.push(w);
    }
    Ok(DesignOutcome {
        lens,
        initial_energy: result.trace[0].energy,
        result,
        rendered,
        report,
        warnings,
    })
}

/// Write all design artifacts into the configured output directory.
pub fn emit_design_outputs(config: &RunConfig, outcome: &DesignOutcome) -> Result<()> {
    let dir = &config.paths.output_dir;
    config.echo_into(dir)?;
    io::write_lens_obj(&dir.join("lens.obj"), &outcome.lens)?;
    io::write_trace_csv(&dir.join("trace.csv"), &outcome.result.trace)?;
    io::write_pgm(&dir.join("rendered.pgm"), &outcome.rendered, BitDepth::Eight)?;
    if let Some(target_path) = &config.paths.target {
        let target = io::read_pgm(target_path)?;
        let map = error_map(&outcome.rendered, &target)?;
        io::write_pgm(&dir.join("errormap.pgm"), &map, BitDepth::Eight)?;
        let (mean, max) = error_stats(&map);
        io::write_sidecar(
            &dir.join("errormap.txt"),
            &[
                ("mean_abs_error", format!("{mean:.6e}")),
                ("max_abs_error", format!("{max:.6e}")),
            ],
        )?;
    }
    write_run_report(&dir.join("report.txt"), &outcome.result, &outcome.warnings)?;
    Ok(())
}

fn write_run_report(path: &Path, result: &Minimization, warnings: &[String]) -> Result<()> {
    let mut entries = vec![
        ("stop_reason", format!("{:?}", result.stop)),
        ("iterations", result.iterations.to_string()),
        ("initial_energy", format!("{:.6e}", result.trace[0].energy)),
        ("final_energy", format!("{:.6e}", result.energy)),
        ("final_grad_norm", format!("{:.6e}", result.grad_norm)),
    ];
    for (k, w) in warnings.iter().enumerate() {
        entries.push(("warning", format!("[{k}] {w}")));
    }
    io::write_sidecar(path, &entries)
}

/// Exit status for a finished optimization: converged runs exit 0, runs
/// stopped by budget or a stalled search exit 2.
pub fn exit_code_for(stop: StopReason) -> u8 {
    match stop {
        StopReason::GradTol => 0,
        _ => 2,
    }
}

/// Render the tabulated sources through a lens; grayscale uses the neutral
/// mid-gray budget since no reference sets the scale.
pub fn run_render(
    config: &RunConfig,
    sources: &PointSourceSet,
    lens: &LensSurface,
) -> Result<(GrayImage, FluxImage, RenderReport)> {
    let plane = config.plane()?;
    let gamma = config.gamma()?;
    let (flux, report) = render_flux(sources, lens, &plane)?;
    let budget = neutral_reference_total(plane.res_w, plane.res_h, gamma);
    let gray = flux_to_gray(&flux, budget, gamma)?;
    Ok((gray, flux, report))
}

/// Brute-force reference image: a dense lattice standing in for the real
/// extended source.
pub fn run_oracle_render(
    config: &RunConfig,
    lens: &LensSurface,
    grid_n: usize,
    center_weighted: bool,
) -> Result<(GrayImage, RenderReport)> {
    let profile = if center_weighted {
        SourceProfile::center_weighted(config.scene.b)
    } else {
        SourceProfile::Uniform
    };
    dense_grid_render(
        grid_n,
        config.scene.b,
        profile,
        lens,
        &config.plane()?,
        config.gamma()?,
    )
}
