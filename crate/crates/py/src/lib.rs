//! Thin Python face over the core toolkit. In-memory entry points take a
//! config as TOML text plus plain lists; the pipeline entry points work on
//! files exactly like the CLI so runs stay reproducible from the echoed
//! config.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use caustic_core::fluxrender::{flux_to_gray, neutral_reference_total, GrayImage, RenderReport};
use caustic_core::geometry::LensSurface;
use caustic_core::harness::{
    self, exit_code_for, metrics as harness_metrics, RunConfig,
};
use caustic_core::objectives::{
    lens_design_objective, source_fit_objective, LensDesignProblem, SourceFitProblem,
};
use caustic_core::sourcemodel::{Emitter, ParamKind, PointSourceSet, SourceParams};
use caustic_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_config(text: &str) -> PyResult<RunConfig> {
    RunConfig::from_toml_str(text).map_err(to_py)
}

fn source_set(emitters: Vec<(f64, f64, f64)>, b: f64) -> PyResult<PointSourceSet> {
    let emitters = emitters
        .into_iter()
        .map(|(x, y, q)| Emitter { x, y, q })
        .collect();
    PointSourceSet::new(emitters, b).map_err(to_py)
}

fn lens_from(config: &RunConfig, heights: Option<Vec<f64>>) -> PyResult<LensSurface> {
    let lens = config.lens().map_err(to_py)?;
    match heights {
        Some(h) => lens.with_heights(&h).map_err(to_py),
        None => Ok(lens),
    }
}

fn gray_image(values: Vec<f64>, res_w: usize, res_h: usize) -> PyResult<GrayImage> {
    GrayImage::from_data(res_w, res_h, values).map_err(to_py)
}

fn report_dict<'py>(py: Python<'py>, report: &RenderReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("emitted", report.emitted)?;
    d.set_item("escaped", report.escaped)?;
    d.set_item("lost_flux", report.lost_flux)?;
    d.set_item("tir", report.tir)?;
    d.set_item("missed_plane", report.missed_plane)?;
    d.set_item("degenerate", report.degenerate)?;
    Ok(d)
}

/// Render emitters through a lens onto the receiving plane.
///
/// Returns ``(res_w, res_h, gray, report)`` where ``gray`` is the
/// row-major normalized image (row 0 at the bottom of the plane) and
/// ``report`` the flux bookkeeping. ``heights`` defaults to the flat
/// back surface from the config.
#[pyfunction]
#[pyo3(signature = (config, emitters, heights=None))]
fn render(
    py: Python<'_>,
    config: &str,
    emitters: Vec<(f64, f64, f64)>,
    heights: Option<Vec<f64>>,
) -> PyResult<(usize, usize, Vec<f64>, Py<PyDict>)> {
    let cfg = parse_config(config)?;
    let sources = source_set(emitters, cfg.scene.b)?;
    let lens = lens_from(&cfg, heights)?;
    let (gray, _flux, report) = harness::run_render(&cfg, &sources, &lens).map_err(to_py)?;
    Ok((
        gray.res_w(),
        gray.res_h(),
        gray.data().to_vec(),
        report_dict(py, &report)?.into(),
    ))
}

/// Mean absolute error and PSNR (dB) between two normalized images of the
/// given resolution. PSNR is ``inf`` for identical inputs.
#[pyfunction]
fn metrics(p: Vec<f64>, q: Vec<f64>, res_w: usize, res_h: usize) -> PyResult<(f64, f64)> {
    let p = gray_image(p, res_w, res_h)?;
    let q = gray_image(q, res_w, res_h)?;
    let m = harness_metrics(&p, &q).map_err(to_py)?;
    Ok((m.mae, m.psnr))
}

/// Source-fit objective value and gradient at packed parameters ``x``.
///
/// ``references`` pairs each reference lens (its height field) with the
/// observed normalized image; ``kind`` is ``"contracted"``, ``"quadrant"``
/// or ``"raw"`` and must match the packing of ``x``.
#[pyfunction]
fn fit_objective(
    config: &str,
    references: Vec<(Vec<f64>, Vec<f64>)>,
    x: Vec<f64>,
    kind: &str,
) -> PyResult<(f64, Vec<f64>)> {
    let cfg = parse_config(config)?;
    let plane = cfg.plane().map_err(to_py)?;
    let mut pairs = Vec::with_capacity(references.len());
    for (heights, image) in references {
        let lens = lens_from(&cfg, Some(heights))?;
        let img = gray_image(image, plane.res_w, plane.res_h)?;
        pairs.push((lens, img));
    }
    let mut problem =
        SourceFitProblem::new(pairs, plane, cfg.gamma().map_err(to_py)?).map_err(to_py)?;
    problem.weights = cfg.fit_weights();
    let kind = match kind {
        "contracted" => ParamKind::Contracted,
        "quadrant" => ParamKind::ContractedQuadrant,
        "raw" => ParamKind::Raw,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown parameterization {other:?}; use \"contracted\", \"quadrant\" or \"raw\""
            )))
        }
    };
    let params = SourceParams::new(kind, x, cfg.scene.b).map_err(to_py)?;
    let ev = source_fit_objective(&params, &problem).map_err(to_py)?;
    Ok((ev.energy, ev.grad))
}

/// Lens-design objective value and gradient at back-surface ``heights``.
///
/// Suitable as an energy/jacobian pair for external optimizers.
#[pyfunction]
fn design_objective(
    config: &str,
    emitters: Vec<(f64, f64, f64)>,
    target: Vec<f64>,
    heights: Vec<f64>,
) -> PyResult<(f64, Vec<f64>)> {
    let cfg = parse_config(config)?;
    let plane = cfg.plane().map_err(to_py)?;
    let sources = source_set(emitters, cfg.scene.b)?;
    let target = gray_image(target, plane.res_w, plane.res_h)?;
    let lens = cfg.lens().map_err(to_py)?;
    let mut problem =
        LensDesignProblem::new(sources, lens, target, plane, cfg.gamma().map_err(to_py)?)
            .map_err(to_py)?;
    problem.weights = cfg.design_weights();
    let ev = lens_design_objective(&heights, &problem).map_err(to_py)?;
    Ok((ev.energy, ev.grad))
}

fn outcome_dict<'py>(
    py: Python<'py>,
    result: &caustic_core::solver::Minimization,
) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("stop", format!("{:?}", result.stop))?;
    d.set_item("iterations", result.iterations)?;
    d.set_item("energy", result.energy)?;
    d.set_item("grad_norm", result.grad_norm)?;
    d.set_item("exit_code", exit_code_for(result.stop))?;
    Ok(d)
}

/// Run the full source-fit pipeline from a config file, writing the same
/// artifacts as the CLI into ``paths.output_dir``.
#[pyfunction]
fn run_fit(py: Python<'_>, config_path: &str) -> PyResult<Py<PyDict>> {
    let cfg = RunConfig::load(config_path.as_ref()).map_err(to_py)?;
    let outcome = harness::run_fit(&cfg).map_err(to_py)?;
    harness::emit_fit_outputs(&cfg, &outcome).map_err(to_py)?;
    let d = outcome_dict(py, &outcome.result)?;
    d.set_item("initial_energy", outcome.initial_energy)?;
    d.set_item("warnings", outcome.warnings.clone())?;
    Ok(d.into())
}

/// Run the full lens-design pipeline from a config file, writing the same
/// artifacts as the CLI into ``paths.output_dir``.
#[pyfunction]
fn run_design(py: Python<'_>, config_path: &str) -> PyResult<Py<PyDict>> {
    let cfg = RunConfig::load(config_path.as_ref()).map_err(to_py)?;
    let outcome = harness::run_design(&cfg).map_err(to_py)?;
    harness::emit_design_outputs(&cfg, &outcome).map_err(to_py)?;
    let d = outcome_dict(py, &outcome.result)?;
    d.set_item("initial_energy", outcome.initial_energy)?;
    d.set_item("warnings", outcome.warnings.clone())?;
    Ok(d.into())
}

/// Normalization budget a standalone render uses when no reference image
/// fixes the flux scale.
#[pyfunction]
fn neutral_budget(config: &str) -> PyResult<f64> {
    let cfg = parse_config(config)?;
    let gamma = cfg.gamma().map_err(to_py)?;
    Ok(neutral_reference_total(cfg.image.res_w, cfg.image.res_h, gamma))
}

/// Re-normalize a raw flux image against a grayscale budget; exposed so
/// external renders can be compared on the toolkit's scale.
#[pyfunction]
fn normalize_flux(
    config: &str,
    flux: Vec<f64>,
    budget: f64,
) -> PyResult<Vec<f64>> {
    let cfg = parse_config(config)?;
    let img = caustic_core::fluxrender::FluxImage::from_data(
        cfg.image.res_w,
        cfg.image.res_h,
        flux,
    )
    .map_err(to_py)?;
    let gray = flux_to_gray(&img, budget, cfg.gamma().map_err(to_py)?).map_err(to_py)?;
    Ok(gray.data().to_vec())
}

#[pymodule]
fn caustic_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(fit_objective, m)?)?;
    m.add_function(wrap_pyfunction!(design_objective, m)?)?;
    m.add_function(wrap_pyfunction!(run_fit, m)?)?;
    m.add_function(wrap_pyfunction!(run_design, m)?)?;
    m.add_function(wrap_pyfunction!(neutral_budget, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_flux, m)?)?;
    Ok(())
}
