//! Python bindings for metaforge.
//!
//! Functions take plain lists of effects and standard errors and return
//! dictionaries. Invalid input raises `ValueError`; numerical failures raise
//! `ArithmeticError`.

use metaforge::effects::{ClusteredDataset, EffectRecord, MetaDataset, Metric};
use metaforge::error::MetaError;
use metaforge::heterogeneity::{i2, tau2_dl};
use metaforge::metareg::{fit_fixed, fit_mixed, ModeratorSpec, VarianceMethod};
use metaforge::multilevel::fit_three_level;
use metaforge::pooling::{ci_hksj, ci_standard, pool_fixed, pool_random, prediction_interval, DfRule, Interval, PoolResult};
use metaforge::pubbias::{egger_fat, pet_peese, top10, waap, SubsetPool};
use metaforge::rve::{rve_coef_test, rve_fit, WorkingModel};
use metaforge::simlab::{coverage_experiment, MethodDescriptor, SimScenario};
use metaforge::uwls::uwls_pool;
use nalgebra::DMatrix;
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: MetaError) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

type Columns = Vec<(String, Vec<f64>)>;

fn columns(moderators: Option<&Bound<'_, PyDict>>) -> PyResult<Columns> {
    let Some(m) = moderators else { return Ok(vec![]) };
    m.iter().map(|(k, v)| Ok((k.extract::<String>()?, v.extract::<Vec<f64>>()?))).collect()
}

fn dataset(effects: &[f64], ses: &[f64], cols: &Columns, studies: Option<&[String]>) -> PyResult<MetaDataset> {
    if effects.len() != ses.len() {
        return Err(PyValueError::new_err("effects and ses differ in length"));
    }
    if let Some((name, _)) = cols.iter().find(|(_, c)| c.len() != effects.len()) {
        return Err(PyValueError::new_err(format!("moderator '{name}' has the wrong length")));
    }
    if studies.is_some_and(|s| s.len() != effects.len()) {
        return Err(PyValueError::new_err("studies has the wrong length"));
    }
    let records = (0..effects.len())
        .map(|i| {
            let mut r = EffectRecord::new(effects[i], ses[i]).with_moderators(cols.iter().map(|(_, c)| c[i]).collect());
            if let Some(s) = studies {
                r = r.with_study(s[i].clone());
            }
            r
        })
        .collect();
    let names = cols.iter().map(|(n, _)| n.clone()).collect();
    MetaDataset::new(records, Metric::Generic, names, studies.map(|_| "study_id".to_string())).map_err(to_py)
}

fn spec(cols: &Columns) -> PyResult<ModeratorSpec> {
    if cols.is_empty() {
        Ok(ModeratorSpec::none())
    } else {
        ModeratorSpec::new(&cols.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>()).map_err(to_py)
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn pool_dict<'py>(py: Python<'py>, p: &PoolResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("mu_hat", p.mu_hat)?;
    d.set_item("var_hat", p.var_hat)?;
    d.set_item("se", p.var_hat.sqrt())?;
    d.set_item("tau2", p.tau2)?;
    d.set_item("weights", p.weights.clone())?;
    d.set_item("k", p.k)?;
    Ok(d)
}

fn interval_tuple(iv: Interval) -> (f64, f64) {
    (iv.lo, iv.hi)
}

fn subset_dict<'py>(py: Python<'py>, s: &SubsetPool) -> PyResult<Bound<'py, PyDict>> {
    let d = pool_dict(py, &s.pool)?;
    d.set_item("selected", s.selected.clone())?;
    d.set_item("inadequate_set", s.inadequate_set)?;
    Ok(d)
}

/// Inverse-variance pool. `model` is "fixed" or "random" (DerSimonian-Laird tau2).
#[pyfunction]
#[pyo3(signature = (effects, ses, model = "random", ci = "z", level = 0.95))]
fn pool<'py>(py: Python<'py>, effects: Vec<f64>, ses: Vec<f64>, model: &str, ci: &str, level: f64) -> PyResult<Bound<'py, PyDict>> {
    let data = dataset(&effects, &ses, &vec![], None)?;
    let result = match model {
        "fixed" => pool_fixed(&data),
        "random" => tau2_dl(&data).and_then(|t| pool_random(&data, t)),
        other => return Err(PyValueError::new_err(format!("unknown model '{other}'"))),
    }
    .map_err(to_py)?;
    let iv = match ci {
        "z" => ci_standard(&result, level, DfRule::Z),
        "t-k1" => ci_standard(&result, level, DfRule::KMinus1),
        "hksj" => ci_hksj(&data, &result, level, false),
        "hksj-mod" => ci_hksj(&data, &result, level, true),
        other => return Err(PyValueError::new_err(format!("unknown interval '{other}'"))),
    }
    .map_err(to_py)?;
    let d = pool_dict(py, &result)?;
    d.set_item("ci", interval_tuple(iv))?;
    if model == "random" && data.k() >= 3 {
        d.set_item("prediction", interval_tuple(prediction_interval(&result, level).map_err(to_py)?))?;
    }
    Ok(d)
}

/// Cochran's Q, tau2, I2, H and the heterogeneity label.
#[pyfunction]
fn heterogeneity<'py>(py: Python<'py>, effects: Vec<f64>, ses: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let h = i2(&dataset(&effects, &ses, &vec![], None)?).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("q", h.q)?;
    d.set_item("df", h.df)?;
    d.set_item("p_value", h.p_value)?;
    d.set_item("tau2", h.tau2)?;
    d.set_item("i2", h.i2)?;
    d.set_item("h", h.h)?;
    d.set_item("label", format!("{:?}", h.label).to_lowercase())?;
    Ok(d)
}

/// Meta-regression. `model` is "fixed" or "mixed"; `method` is "mm", "ml" or "reml".
#[pyfunction]
#[pyo3(signature = (effects, ses, moderators = None, model = "mixed", method = "reml"))]
fn meta_regression<'py>(
    py: Python<'py>,
    effects: Vec<f64>,
    ses: Vec<f64>,
    moderators: Option<&Bound<'py, PyDict>>,
    model: &str,
    method: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let cols = columns(moderators)?;
    let data = dataset(&effects, &ses, &cols, None)?;
    let mods = spec(&cols)?;
    let fit = match model {
        "fixed" => fit_fixed(&data, &mods),
        "mixed" => fit_mixed(&data, &mods, method.parse::<VarianceMethod>().map_err(to_py)?),
        other => return Err(PyValueError::new_err(format!("unknown model '{other}'"))),
    }
    .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("names", fit.names.clone())?;
    d.set_item("beta", fit.beta.clone())?;
    d.set_item("cov", rows(&fit.cov))?;
    d.set_item("tau2_res", fit.tau2_res)?;
    d.set_item("q_res", fit.q_res)?;
    d.set_item("df_res", fit.df_res)?;
    d.set_item("i2_res", fit.i2_res)?;
    d.set_item("loglik", fit.loglik)?;
    Ok(d)
}

/// Egger FAT, PET-PEESE, Top-10, WAAP and UWLS in one call.
#[pyfunction]
#[pyo3(signature = (effects, ses, alpha = 0.05))]
fn publication_bias<'py>(py: Python<'py>, effects: Vec<f64>, ses: Vec<f64>, alpha: f64) -> PyResult<Bound<'py, PyDict>> {
    let data = dataset(&effects, &ses, &vec![], None)?;
    let fat = egger_fat(&data).map_err(to_py)?;
    let pp = pet_peese(&data, alpha).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("fat_b0", fat.asymmetry.estimate)?;
    d.set_item("fat_p", fat.asymmetry.p_value)?;
    d.set_item("fat_severity", format!("{:?}", fat.severity).to_lowercase())?;
    d.set_item("pet_b1", fat.effect.estimate)?;
    d.set_item("pet_peese_estimate", pp.estimate)?;
    d.set_item("pet_peese_branch", format!("{:?}", pp.branch).to_lowercase())?;
    d.set_item("top10", subset_dict(py, &top10(&data).map_err(to_py)?)?)?;
    d.set_item("waap", subset_dict(py, &waap(&data).map_err(to_py)?)?)?;
    let u = uwls_pool(&data).map_err(to_py)?;
    d.set_item("uwls", u.estimates[0])?;
    d.set_item("uwls_se", u.cov[(0, 0)].sqrt())?;
    Ok(d)
}

/// Robust variance estimation over clusters given by `studies`.
#[pyfunction]
#[pyo3(signature = (effects, ses, studies, moderators = None, working = "ce", rho = 0.8, small_sample = true, level = 0.95))]
#[allow(clippy::too_many_arguments)]
fn robust_variance<'py>(
    py: Python<'py>,
    effects: Vec<f64>,
    ses: Vec<f64>,
    studies: Vec<String>,
    moderators: Option<&Bound<'py, PyDict>>,
    working: &str,
    rho: f64,
    small_sample: bool,
    level: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let cols = columns(moderators)?;
    let data = dataset(&effects, &ses, &cols, Some(&studies))?;
    let clustered = ClusteredDataset::from_dataset(&data).map_err(to_py)?;
    let wm = match working {
        "ce" => WorkingModel::CorrelatedEffects { rho },
        "he" => WorkingModel::HierarchicalEffects,
        other => return Err(PyValueError::new_err(format!("unknown working model '{other}'"))),
    };
    let fit = rve_fit(&clustered, &spec(&cols)?, wm, small_sample).map_err(to_py)?;
    let intervals = (0..fit.beta.len())
        .map(|j| rve_coef_test(&fit, j, level).map(|t| interval_tuple(t.interval)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("names", fit.names.clone())?;
    d.set_item("beta", fit.beta.clone())?;
    d.set_item("robust_cov", rows(&fit.robust_cov))?;
    d.set_item("intervals", intervals)?;
    d.set_item("tau2", fit.tau2)?;
    d.set_item("df", fit.df)?;
    Ok(d)
}

/// Three-level model with effects nested in `studies`.
#[pyfunction]
#[pyo3(signature = (effects, ses, studies, moderators = None, method = "reml"))]
fn three_level<'py>(
    py: Python<'py>,
    effects: Vec<f64>,
    ses: Vec<f64>,
    studies: Vec<String>,
    moderators: Option<&Bound<'py, PyDict>>,
    method: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let cols = columns(moderators)?;
    let data = dataset(&effects, &ses, &cols, Some(&studies))?;
    let clustered = ClusteredDataset::from_dataset(&data).map_err(to_py)?;
    let fit = fit_three_level(&clustered, &spec(&cols)?, method.parse().map_err(to_py)?).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("names", fit.names.clone())?;
    d.set_item("beta", fit.beta.clone())?;
    d.set_item("cov", rows(&fit.cov))?;
    d.set_item("omega2", fit.omega2)?;
    d.set_item("tau2", fit.tau2)?;
    d.set_item("loglik", fit.loglik)?;
    d.set_item("converged", fit.converged)?;
    Ok(d)
}

/// Coverage rows for a JSON scenario; `methods` are labels such as "fixed_z" or "hksj".
#[pyfunction]
#[pyo3(signature = (scenario_json, methods, level = 0.95))]
fn coverage<'py>(py: Python<'py>, scenario_json: &str, methods: Vec<String>, level: f64) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let sc = SimScenario::from_json(scenario_json).map_err(to_py)?;
    let descriptors = methods.iter().map(|m| m.parse::<MethodDescriptor>()).collect::<Result<Vec<_>, _>>().map_err(to_py)?;
    let rows = py.detach(|| coverage_experiment(&sc, &descriptors, level)).map_err(to_py)?;
    rows.iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("method", r.method.clone())?;
            d.set_item("coverage", r.coverage)?;
            d.set_item("mc_se", r.mc_se)?;
            d.set_item("mean_width", r.mean_width)?;
            d.set_item("failures", r.failures)?;
            d.set_item("reps", r.reps)?;
            Ok(d)
        })
        .collect()
}

/// Runs a CLI subcommand in-process; returns `(exit_code, stdout, stderr)`.
#[pyfunction]
fn run_cli(args: Vec<String>) -> (i32, String, String) {
    let argv = std::iter::once("metaforge".to_string()).chain(args);
    let out = metaforge::iocli::run_subcommand(argv.map(std::ffi::OsString::from));
    (out.code, out.stdout, out.stderr)
}

#[pymodule]
fn metaforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(pool, m)?)?;
    m.add_function(wrap_pyfunction!(heterogeneity, m)?)?;
    m.add_function(wrap_pyfunction!(meta_regression, m)?)?;
    m.add_function(wrap_pyfunction!(publication_bias, m)?)?;
    m.add_function(wrap_pyfunction!(robust_variance, m)?)?;
    m.add_function(wrap_pyfunction!(three_level, m)?)?;
    m.add_function(wrap_pyfunction!(coverage, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
