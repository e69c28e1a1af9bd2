use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use super::plotdata::{emit_plot_data, PlotKind, PlotOptions};
use super::report::{ReportDocument, ReportNode};
use super::{parse_csv, Derive, LoadOptions, LoadedData};
use crate::effects::Metric;
use crate::error::{MetaError, Result};
use crate::heterogeneity::{i2, tau2_dl};
use crate::metareg::{coef_test_kh, fit_fixed, fit_mixed, omnibus_test, pseudo_r2, ModeratorSpec, RegressionFit, VarianceMethod};
use crate::multilevel::{
    coef_test_scaled, fit_three_level, fit_three_level_restricted, level_decomposition, lr_variance_test, Component,
};
use crate::pooling::{
    ci_hksj, ci_standard, hksj_variance, pool_fixed, pool_random, prediction_interval, DfRule, Interval, PoolModel,
    PoolResult,
};
use crate::pubbias::{bias_report, FunnelAxis, SubsetPool, DEFAULT_CONTOURS};
use crate::rve::{rho_sensitivity, rve_coef_test, rve_fit, WorkingModel, DEFAULT_RHO};
use crate::simlab::{coverage_experiment, MethodDescriptor, SimScenario};
use crate::statkernel::{CoefTest, WaldTest};
use crate::uwls::{uwls_pool, uwls_regress};

const SYNOPSIS: &str =
    "usage: metaforge <pool|hetero|regress|bias|uwls|rve|mlma|simulate|plotdata> [--input FILE] [options]; see --help";

/// Exit status and captured streams of one invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliOutcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

#[derive(Parser, Debug)]
#[command(name = "metaforge", version, about = "Meta-analysis, meta-regression and publication-bias diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fixed or random-effects pooled estimate with an interval.
    Pool(PoolArgs),
    /// Cochran's Q, tau^2, I^2, H and R.
    Hetero(InputArgs),
    /// Fixed or mixed-effects meta-regression.
    Regress(RegressArgs),
    /// FAT/PET/PEESE, MST, Top-10 and WAAP.
    Bias(BiasArgs),
    /// Unrestricted weighted least squares.
    Uwls(ModsArgs),
    /// Robust variance estimation over clusters.
    Rve(RveArgs),
    /// Three-level meta-analysis.
    Mlma(MlmaArgs),
    /// Monte Carlo coverage experiment.
    Simulate(SimulateArgs),
    /// Plot coordinates as TSV.
    Plotdata(PlotArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum OutputFormat {
    Json,
    Tsv,
}

#[derive(Args, Debug)]
struct InputArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, value_enum)]
    output: Option<OutputFormat>,
    /// generic, partial_r or fisher_z
    #[arg(long, default_value = "generic")]
    metric: String,
    /// none, from_t or from_z
    #[arg(long, default_value = "none")]
    derive: String,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum CiArg {
    Z,
    #[value(name = "t-k1")]
    TK1,
    #[value(name = "t-k2")]
    TK2,
    #[value(name = "t-k4")]
    TK4,
    Hksj,
    HksjMod,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum ModelArg {
    Fixed,
    Random,
}

#[derive(Args, Debug)]
struct PoolArgs {
    #[command(flatten)]
    io: InputArgs,
    #[arg(long, value_enum, default_value = "random")]
    model: ModelArg,
    #[arg(long, value_enum, default_value = "z")]
    ci: CiArg,
    /// Add a prediction interval for a new true effect.
    #[arg(long)]
    prediction: bool,
}

#[derive(Args, Debug)]
struct ModsArgs {
    #[command(flatten)]
    io: InputArgs,
    /// Comma-separated moderator columns.
    #[arg(long = "moderators", visible_alias = "mods", value_delimiter = ',')]
    mods: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum RegModelArg {
    Fixed,
    Mixed,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum TestArg {
    Z,
    /// Knapp-Hartung scaled t tests.
    Kh,
}

#[derive(Args, Debug)]
struct RegressArgs {
    #[command(flatten)]
    base: ModsArgs,
    #[arg(long, value_enum, default_value = "mixed")]
    model: RegModelArg,
    /// mm, ml or reml
    #[arg(long, visible_alias = "variance", default_value = "reml")]
    method: String,
    #[arg(long, value_enum, default_value = "z")]
    test: TestArg,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum BiasTest {
    Fat,
    Type2,
    Pet,
    Peese,
    Petpeese,
    Mst,
    Top10,
    Waap,
}

#[derive(Args, Debug)]
struct BiasArgs {
    #[command(flatten)]
    io: InputArgs,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Comma-separated subset of the battery; all by default (mst only with a df column).
    #[arg(long, value_enum, value_delimiter = ',')]
    tests: Vec<BiasTest>,
    /// Emit plot data as TSV instead of the test report.
    #[arg(long, value_enum)]
    plot: Option<KindArg>,
    /// Funnel axis for --plot: se, precision, variance or inverse_variance.
    #[arg(long, default_value = "se")]
    axis: String,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum WorkingArg {
    Ce,
    He,
}

#[derive(Args, Debug)]
struct RveArgs {
    #[command(flatten)]
    base: ModsArgs,
    #[arg(long, default_value = "study_id")]
    cluster_col: String,
    #[arg(long, value_enum, default_value = "ce")]
    working: WorkingArg,
    #[arg(long, default_value_t = DEFAULT_RHO)]
    rho: f64,
    /// Apply the m/(m-p-1) correction of the meat (the default).
    #[arg(long, conflicts_with = "no_small_sample")]
    small_sample: bool,
    /// Drop the m/(m-p-1) correction of the meat.
    #[arg(long)]
    no_small_sample: bool,
    /// Comma-separated rho values for a sensitivity table.
    #[arg(long, value_delimiter = ',')]
    rho_grid: Vec<f64>,
}

#[derive(Args, Debug)]
struct MlmaArgs {
    #[command(flatten)]
    base: ModsArgs,
    #[arg(long, default_value = "study_id")]
    cluster_col: String,
    /// ml or reml
    #[arg(long, default_value = "reml")]
    method: String,
    #[arg(long, value_enum, default_value = "z")]
    test: TestArg,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Comma-separated interval methods.
    #[arg(long, value_delimiter = ',', default_value = "fixed_z,random_z,random_t_k1,hksj,hksj_mod,prediction,uwls")]
    methods: Vec<String>,
    #[arg(long, value_enum)]
    output: Option<OutputFormat>,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum KindArg {
    Forest,
    Funnel,
    Contour,
    Galbraith,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[command(flatten)]
    io: InputArgs,
    #[arg(long, value_enum)]
    kind: KindArg,
    /// se, variance, precision or inv_variance
    #[arg(long, default_value = "se")]
    axis: String,
    #[arg(long, value_enum, default_value = "random")]
    model: ModelArg,
    #[arg(long, value_delimiter = ',')]
    contours: Vec<f64>,
}

/// Parses `argv` (program name first) and runs the subcommand without touching
/// the process streams.
pub fn run_subcommand<I, S>(argv: I) -> CliOutcome
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            return if code == 0 {
                CliOutcome { code, stdout: text, stderr: String::new() }
            } else {
                CliOutcome { code, stdout: String::new(), stderr: text }
            };
        }
    };
    match dispatch(cli.command) {
        Ok(stdout) => CliOutcome { code: 0, stdout, stderr: String::new() },
        Err(e) => {
            let code = if e.is_numerical() { 2 } else { 1 };
            let mut stderr = format!("error: {e}\n");
            if matches!(e, MetaError::Usage(_)) {
                stderr.push_str(SYNOPSIS);
                stderr.push('\n');
            }
            CliOutcome { code, stdout: String::new(), stderr }
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| MetaError::Io(format!("{}: {e}", path.display())))
}

struct Loaded {
    bytes: Vec<u8>,
    data: LoadedData,
    config: Vec<(String, String)>,
}

fn load(io: &InputArgs, cluster_col: Option<&str>) -> Result<Loaded> {
    let metric: Metric = io.metric.parse()?;
    let derive: Derive = io.derive.parse()?;
    let bytes = read_bytes(&io.input)?;
    let opts = LoadOptions { metric, derive, cluster_col: cluster_col.map(String::from) };
    let data = parse_csv(&bytes, &opts)?;
    let mut config = vec![
        ("input".to_string(), io.input.display().to_string()),
        ("level".to_string(), io.level.to_string()),
        ("metric".to_string(), io.metric.clone()),
        ("derive".to_string(), io.derive.clone()),
    ];
    if let Some(c) = cluster_col {
        config.push(("cluster_col".into(), c.into()));
    }
    Ok(Loaded { bytes, data, config })
}

fn finish(command: &str, loaded: &Loaded, config: Vec<(String, String)>, results: ReportNode, fmt: Option<OutputFormat>) -> String {
    let mut all = loaded.config.clone();
    all.extend(config);
    let doc = ReportDocument::new(command, Some(&loaded.bytes), all, results);
    match fmt.unwrap_or(OutputFormat::Json) {
        OutputFormat::Json => doc.to_json(),
        OutputFormat::Tsv => doc.to_tsv(),
    }
}

fn tag<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::new(),
    }
}

fn kv(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn mods_spec(mods: &[String]) -> Result<ModeratorSpec> {
    ModeratorSpec::new(mods)
}

fn interval_node(iv: &Interval, formula: &str) -> ReportNode {
    ReportNode::new()
        .stat("lo", iv.lo, formula)
        .stat("hi", iv.hi, formula)
        .stat("level", iv.level, "confidence_level")
        .text("method", tag(&iv.method))
        .flag("degenerate", iv.degenerate)
}

fn coef_node(name: &str, t: &CoefTest, iv: Option<&Interval>, formula: &str) -> ReportNode {
    let dist = if t.df.is_some() { "t_statistic" } else { "z_statistic" };
    let mut n = ReportNode::new()
        .text("name", name)
        .stat("estimate", t.estimate, formula)
        .stat("se", t.se, &format!("{formula}_se"))
        .stat("statistic", t.stat, dist)
        .stat_opt("df", t.df, "residual_df")
        .stat("p_value", t.p_value, &format!("{dist}_p_value"));
    if let Some(iv) = iv {
        n = n.child("interval", interval_node(iv, &format!("{formula}_interval")));
    }
    n
}

fn wald_node(w: &WaldTest, formula: &str) -> ReportNode {
    ReportNode::new()
        .stat("statistic", w.stat, formula)
        .count("df", w.df)
        .stat("p_value", w.p_value, "chi_square_p_value")
}

fn pool_node(p: &PoolResult, formula: &str) -> ReportNode {
    ReportNode::new()
        .stat("mu_hat", p.mu_hat, formula)
        .stat("var_hat", p.var_hat, "inverse_weight_sum")
        .stat("se", p.se(), "inverse_weight_sum_sqrt")
        .stat("tau2", p.tau2, "between_study_variance")
        .count("k", p.k)
        .text("model", tag(&p.model))
}

fn dispatch(cmd: Command) -> Result<String> {
    match cmd {
        Command::Pool(a) => cmd_pool(a),
        Command::Hetero(a) => cmd_hetero(a),
        Command::Regress(a) => cmd_regress(a),
        Command::Bias(a) => cmd_bias(a),
        Command::Uwls(a) => cmd_uwls(a),
        Command::Rve(a) => cmd_rve(a),
        Command::Mlma(a) => cmd_mlma(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Plotdata(a) => cmd_plot(a),
    }
}

fn cmd_pool(a: PoolArgs) -> Result<String> {
    let loaded = load(&a.io, None)?;
    let data = loaded.data.flat();
    let (pooled, formula) = match a.model {
        ModelArg::Fixed => (pool_fixed(data)?, "inverse_variance_mean"),
        ModelArg::Random => (pool_random(data, tau2_dl(data)?)?, "random_effects_mean_dl"),
    };
    let level = a.io.level;
    let mut results = ReportNode::new().child("pooled", pool_node(&pooled, formula));
    let (interval, var_s) = match a.ci {
        CiArg::Z => (ci_standard(&pooled, level, DfRule::Z)?, None),
        CiArg::TK1 => (ci_standard(&pooled, level, DfRule::KMinus1)?, None),
        CiArg::TK2 => (ci_standard(&pooled, level, DfRule::KMinus2)?, None),
        CiArg::TK4 => (ci_standard(&pooled, level, DfRule::KMinus4)?, None),
        CiArg::Hksj | CiArg::HksjMod => {
            let rover = a.ci == CiArg::HksjMod;
            (ci_hksj(data, &pooled, level, rover)?, Some(hksj_variance(data, &pooled, rover)?))
        }
    };
    results = results.child("interval", interval_node(&interval, "pooled_interval"));
    if let Some(v) = var_s {
        results = results.child(
            "hksj",
            ReportNode::new()
                .stat("q", v.q, "hksj_scale")
                .stat("q_used", v.q_used, "hksj_scale_truncated")
                .stat("var_s", v.var_s, "hksj_variance"),
        );
    }
    if a.prediction {
        let random = if pooled.model == PoolModel::Random { pooled.clone() } else { pool_random(data, tau2_dl(data)?)? };
        results = results.child("prediction", interval_node(&prediction_interval(&random, level)?, "prediction_interval"));
    }
    let config = vec![kv("model", tag_model(a.model)), kv("ci", ci_name(a.ci)), kv("prediction", a.prediction)];
    Ok(finish("pool", &loaded, config, results, a.io.output))
}

fn tag_model(m: ModelArg) -> &'static str {
    match m {
        ModelArg::Fixed => "fixed",
        ModelArg::Random => "random",
    }
}

fn ci_name(c: CiArg) -> String {
    c.to_possible_value().map_or_else(String::new, |v| v.get_name().to_string())
}

fn cmd_hetero(a: InputArgs) -> Result<String> {
    let loaded = load(&a, None)?;
    let h = i2(loaded.data.flat())?;
    let results = ReportNode::new()
        .stat("q", h.q, "cochran_q")
        .count("df", h.df)
        .stat("p_value", h.p_value, "chi_square_p_value")
        .stat("tau2", h.tau2, "dl_moment_tau2")
        .stat("s2_typical", h.s2_typical, "typical_within_variance")
        .stat("i2", h.i2, "i2_from_q")
        .stat("i2_from_tau2", h.i2_from_tau2, "i2_from_tau2")
        .text("i2_label", tag(&h.label))
        .stat("h", h.h, "h_statistic")
        .stat("r_ratio", h.r_ratio, "r_ratio");
    Ok(finish("hetero", &loaded, vec![], results, a.output))
}

fn regression_node(fit: &RegressionFit, level: f64, kh: bool) -> Result<ReportNode> {
    let mut coefs = Vec::with_capacity(fit.beta.len());
    for (j, name) in fit.names.iter().enumerate() {
        coefs.push(if kh {
            let t = coef_test_kh(fit, j, level)?;
            coef_node(name, &t.test, Some(&t.interval), "gls_coefficient").stat("kh_scale", t.scale, "kh_scale")
        } else {
            coef_node(name, &fit.z_test(j), Some(&fit.z_interval(j, level)?), "gls_coefficient")
        });
    }
    let mut n = ReportNode::new()
        .children("coefficients", coefs)
        .text("model", tag(&fit.model))
        .stat("tau2_res", fit.tau2_res, "residual_tau2")
        .stat("q_res", fit.q_res, "residual_q")
        .count("df_res", fit.df_res)
        .stat("i2_res", fit.i2_res, "residual_i2")
        .stat_opt("loglik", fit.loglik, "log_likelihood")
        .count("k", fit.k);
    if let Some(m) = fit.method {
        n = n.text("method", tag(&m));
    }
    if fit.beta.len() > 1 {
        n = n.child("omnibus", wald_node(&omnibus_test(fit)?, "moderator_wald"));
    }
    Ok(n)
}

fn cmd_regress(a: RegressArgs) -> Result<String> {
    let loaded = load(&a.base.io, None)?;
    let data = loaded.data.flat();
    let mods = mods_spec(&a.base.mods)?;
    let level = a.base.io.level;
    let method: VarianceMethod = a.method.parse()?;
    let fit = match a.model {
        RegModelArg::Fixed => fit_fixed(data, &mods)?,
        RegModelArg::Mixed => fit_mixed(data, &mods, method)?,
    };
    let mut results = regression_node(&fit, level, a.test == TestArg::Kh)?;
    if a.model == RegModelArg::Mixed && !mods.is_empty() {
        let null = fit_mixed(data, &ModeratorSpec::none(), method)?;
        results = results
            .stat("tau2_total", null.tau2_res, "moderator_free_tau2")
            .stat("pseudo_r2", pseudo_r2(null.tau2_res, fit.tau2_res), "pseudo_r2");
    }
    let config = vec![
        kv("mods", a.base.mods.join(",")),
        kv("model", if a.model == RegModelArg::Fixed { "fixed" } else { "mixed" }),
        kv("method", &a.method),
        kv("test", if a.test == TestArg::Kh { "kh" } else { "z" }),
    ];
    Ok(finish("regress", &loaded, config, results, a.base.io.output))
}

fn subset_node(s: &SubsetPool, formula: &str) -> ReportNode {
    ReportNode::new()
        .child("pooled", pool_node(&s.pool, formula))
        .series("selected", &s.selected.iter().map(|&i| i as f64).collect::<Vec<_>>(), "record_index")
        .flag("inadequate_set", s.inadequate_set)
}

fn cmd_bias(a: BiasArgs) -> Result<String> {
    let loaded = load(&a.io, None)?;
    let data = loaded.data.flat();
    if let Some(kind) = a.plot {
        let opts = PlotOptions { level: a.io.level, axis: a.axis.parse()?, ..Default::default() };
        return emit_plot_data(plot_kind(kind), data, &opts);
    }
    let r = bias_report(data, a.alpha)?;
    let want = |t: BiasTest| a.tests.is_empty() || a.tests.contains(&t);
    if a.tests.contains(&BiasTest::Mst) && r.mst.is_none() {
        return Err(MetaError::Usage("the meta-significance test needs a df column".into()));
    }
    let mut results = ReportNode::new().stat("alpha", r.alpha, "significance_level");
    if want(BiasTest::Fat) {
        results = results.child(
            "fat",
            ReportNode::new()
                .child("asymmetry", coef_node("se", &r.fat.asymmetry, None, "fat_asymmetry"))
                .child("effect", coef_node("intercept", &r.fat.effect, None, "pet_effect"))
                .text("severity", tag(&r.fat.severity))
                .stat("mse", r.fat.regression.mse, "regression_mse")
                .stat("route_gap", r.fat.regression.route_gap, "wls_ols_route_gap"),
        );
    }
    if want(BiasTest::Type2) {
        results = results.child("type2", coef_node("se", &r.type2.asymmetry, None, "type2_asymmetry"));
    }
    if want(BiasTest::Pet) {
        results = results.child("pet", coef_node("intercept", &r.fat.effect, None, "pet_effect"));
    }
    if want(BiasTest::Peese) {
        results = results.child(
            "peese",
            ReportNode::new()
                .child("effect", coef_node("intercept", &r.peese.effect, None, "peese_effect"))
                .child("bias", coef_node("variance", &r.peese.bias, None, "peese_bias")),
        );
    }
    if want(BiasTest::Petpeese) {
        results = results.child(
            "pet_peese",
            ReportNode::new()
                .stat("estimate", r.pet_peese.estimate, "pet_peese_estimate")
                .text("branch", tag(&r.pet_peese.branch)),
        );
    }
    if want(BiasTest::Top10) {
        results = results.child("top10", subset_node(&r.top10, "top10_mean"));
    }
    if want(BiasTest::Waap) {
        results = results.child("waap", subset_node(&r.waap, "waap_mean"));
    }
    if want(BiasTest::Mst) {
        results = match &r.mst {
            Some(m) => results.child(
                "mst",
                ReportNode::new()
                    .child("slope", coef_node("ln_df", &m.slope, None, "mst_slope"))
                    .stat("intercept", m.intercept, "mst_intercept")
                    .count("dropped", m.dropped)
                    .count("k_used", m.k_used),
            ),
            None => results.null("mst", "mst_slope"),
        };
    }
    let tests = if a.tests.is_empty() { "all".to_string() } else { a.tests.iter().map(tag_value).collect::<Vec<_>>().join(",") };
    Ok(finish("bias", &loaded, vec![kv("alpha", a.alpha), kv("tests", tests)], results, a.io.output))
}

fn tag_value<T: ValueEnum>(v: &T) -> String {
    v.to_possible_value().map(|p| p.get_name().to_string()).unwrap_or_default()
}

fn plot_kind(k: KindArg) -> PlotKind {
    match k {
        KindArg::Forest => PlotKind::Forest,
        KindArg::Funnel => PlotKind::Funnel,
        KindArg::Contour => PlotKind::Contour,
        KindArg::Galbraith => PlotKind::Galbraith,
    }
}

fn cmd_uwls(a: ModsArgs) -> Result<String> {
    let loaded = load(&a.io, None)?;
    let mods = mods_spec(&a.mods)?;
    let data = loaded.data.flat();
    let u = if mods.is_empty() { uwls_pool(data)? } else { uwls_regress(data, &mods)? };
    let mut coefs = Vec::new();
    for (j, name) in u.names.iter().enumerate() {
        coefs.push(coef_node(name, &u.t_test(j), Some(&u.interval(j, a.io.level)?), "uwls_coefficient"));
    }
    let results = ReportNode::new()
        .children("coefficients", coefs)
        .stat("s2", u.s2, "uwls_scale")
        .count("df", u.df)
        .flag("degenerate", u.degenerate);
    Ok(finish("uwls", &loaded, vec![kv("mods", a.mods.join(","))], results, a.io.output))
}

fn cmd_rve(a: RveArgs) -> Result<String> {
    let loaded = load(&a.base.io, Some(&a.cluster_col))?;
    let data = loaded.data.clustered()?;
    let mods = mods_spec(&a.base.mods)?;
    let small = !a.no_small_sample;
    let wm = match a.working {
        WorkingArg::Ce => WorkingModel::CorrelatedEffects { rho: a.rho },
        WorkingArg::He => WorkingModel::HierarchicalEffects,
    };
    let fit = rve_fit(data, &mods, wm, small)?;
    let mut coefs = Vec::new();
    for (j, name) in fit.names.iter().enumerate() {
        let t = rve_coef_test(&fit, j, a.base.io.level)?;
        coefs.push(coef_node(name, &t.test, Some(&t.interval), "rve_coefficient"));
    }
    let mut results = ReportNode::new()
        .children("coefficients", coefs)
        .stat("tau2", fit.tau2, "working_tau2")
        .stat_opt("omega2", fit.omega2, "working_omega2")
        .count("df", fit.df)
        .flag("small_sample", fit.adjusted)
        .count("m", fit.m)
        .count("k", fit.k);
    if !a.rho_grid.is_empty() {
        let rows = rho_sensitivity(data, &mods, &a.rho_grid, small)?
            .into_iter()
            .map(|r| {
                ReportNode::new()
                    .stat("rho", r.rho, "working_rho")
                    .stat("tau2", r.tau2, "working_tau2")
                    .series("beta", &r.beta, "rve_coefficient")
                    .series("se", &r.se, "rve_coefficient_se")
            })
            .collect();
        results = results.children("rho_sensitivity", rows);
    }
    let working = match a.working {
        WorkingArg::Ce => format!("ce(rho={})", a.rho),
        WorkingArg::He => "he".into(),
    };
    let grid: Vec<String> = a.rho_grid.iter().map(f64::to_string).collect();
    let config =
        vec![kv("mods", a.base.mods.join(",")), kv("working", working), kv("small_sample", small), kv("rho_grid", grid.join(","))];
    Ok(finish("rve", &loaded, config, results, a.base.io.output))
}

fn cmd_mlma(a: MlmaArgs) -> Result<String> {
    let loaded = load(&a.base.io, Some(&a.cluster_col))?;
    let data = loaded.data.clustered()?;
    let mods = mods_spec(&a.base.mods)?;
    let method: VarianceMethod = a.method.parse()?;
    let level = a.base.io.level;
    let fit = fit_three_level(data, &mods, method)?;
    let mut coefs = Vec::new();
    for (j, name) in fit.names.iter().enumerate() {
        coefs.push(if a.test == TestArg::Kh {
            let t = coef_test_scaled(&fit, j, level)?;
            coef_node(name, &t.test, Some(&t.interval), "gls_coefficient").stat("kh_scale", t.scale, "kh_scale")
        } else {
            let t = fit.z_test(j);
            let iv = Interval::symmetric(t.estimate, crate::pooling::z_crit(level)? * t.se, level, crate::pooling::IntervalMethod::WaldZ);
            coef_node(name, &t, Some(&iv), "gls_coefficient")
        });
    }
    let null = if mods.is_empty() { None } else { Some(fit_three_level(data, &ModeratorSpec::none(), method)?) };
    let d = level_decomposition(&fit, data, null.as_ref())?;
    let mut lr = Vec::new();
    for (component, name) in [(Component::Omega2, "omega2"), (Component::Tau2, "tau2")] {
        let reduced = fit_three_level_restricted(data, &mods, method, component)?;
        let t = lr_variance_test(&fit, &reduced, component)?;
        lr.push(
            ReportNode::new()
                .text("component", name)
                .stat("lr", t.lr, "likelihood_ratio")
                .count("df", t.df)
                .stat("p_value", t.p_value, "boundary_chi_square_p_value"),
        );
    }
    let results = ReportNode::new()
        .children("coefficients", coefs)
        .stat("omega2", fit.omega2, "within_cluster_variance")
        .stat("tau2", fit.tau2, "between_cluster_variance")
        .stat("loglik", fit.loglik, "log_likelihood")
        .text("method", tag(&fit.method))
        .flag("converged", fit.converged)
        .count("evaluations", fit.evaluations)
        .count("k", fit.k)
        .count("m", fit.m)
        .child(
            "levels",
            ReportNode::new()
                .stat("s2_typical", d.s2_typical, "typical_within_variance")
                .stat("i2_level2", d.i2_level2, "level2_i2")
                .stat("i2_level3", d.i2_level3, "level3_i2")
                .stat_opt("icc2", d.icc2, "level2_icc")
                .stat_opt("icc3", d.icc3, "level3_icc")
                .stat_opt("r2_level2", d.r2_level2, "level2_r2")
                .stat_opt("r2_level3", d.r2_level3, "level3_r2"),
        )
        .children("variance_tests", lr);
    let config = vec![
        kv("mods", a.base.mods.join(",")),
        kv("method", &a.method),
        kv("test", if a.test == TestArg::Kh { "kh" } else { "z" }),
    ];
    Ok(finish("mlma", &loaded, config, results, a.base.io.output))
}

fn cmd_simulate(a: SimulateArgs) -> Result<String> {
    let bytes = read_bytes(&a.scenario)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| MetaError::Usage(format!("scenario is not UTF-8: {e}")))?;
    let mut sc = SimScenario::from_json(text)?;
    if let Some(r) = a.reps {
        sc.reps = r;
    }
    if let Some(s) = a.seed {
        sc.master_seed = s;
    }
    sc.validate()?;
    let methods = a.methods.iter().map(|m| m.parse::<MethodDescriptor>()).collect::<Result<Vec<_>>>()?;
    let rows = coverage_experiment(&sc, &methods, a.level)?
        .into_iter()
        .map(|r| {
            ReportNode::new()
                .text("method", r.method)
                .stat("coverage", r.coverage, "empirical_coverage")
                .stat("mc_se", r.mc_se, "binomial_standard_error")
                .stat("mean_width", r.mean_width, "mean_interval_width")
                .stat("rejection_rate", r.rejection_rate, "empirical_rejection_rate")
                .count("failures", r.failures)
        })
        .collect();
    let results = ReportNode::new().children("methods", rows).count("reps", sc.reps);
    let config = vec![
        kv("scenario", a.scenario.display()),
        kv("reps", sc.reps),
        kv("seed", sc.master_seed),
        kv("level", a.level),
        kv("methods", a.methods.join(",")),
    ];
    let doc = ReportDocument::new("simulate", Some(&bytes), config, results);
    Ok(match a.output.unwrap_or(OutputFormat::Json) {
        OutputFormat::Json => doc.to_json(),
        OutputFormat::Tsv => doc.to_tsv(),
    })
}

fn cmd_plot(a: PlotArgs) -> Result<String> {
    let loaded = load(&a.io, None)?;
    let kind = plot_kind(a.kind);
    let axis: FunnelAxis = a.axis.parse()?;
    let opts = PlotOptions {
        level: a.io.level,
        model: if a.model == ModelArg::Fixed { PoolModel::Fixed } else { PoolModel::Random },
        axis,
        contour_levels: if a.contours.is_empty() { DEFAULT_CONTOURS.to_vec() } else { a.contours.clone() },
    };
    let tsv = emit_plot_data(kind, loaded.data.flat(), &opts)?;
    if a.io.output.unwrap_or(OutputFormat::Tsv) == OutputFormat::Tsv {
        return Ok(tsv);
    }
    let mut lines = tsv.lines().map(|l| l.split('\t').collect::<Vec<_>>());
    let header = lines.next().unwrap_or_default();
    let body: Vec<Vec<&str>> = lines.collect();
    let mut results = ReportNode::new();
    for (j, name) in header.iter().enumerate() {
        let cells: Vec<&str> = body.iter().map(|r| r[j]).collect();
        let numeric: Option<Vec<f64>> = cells.iter().map(|c| c.parse::<f64>().ok()).collect();
        results = match numeric {
            Some(v) => results.series(name, &v, &format!("plot_{name}")),
            None => results.texts(name, &cells.iter().map(|s| s.to_string()).collect::<Vec<_>>()),
        };
    }
    let config = vec![
        kv("kind", format!("{:?}", kind).to_lowercase()),
        kv("axis", &a.axis),
        kv("model", tag_model(a.model)),
        kv("contours", opts.contour_levels.iter().map(f64::to_string).collect::<Vec<_>>().join(",")),
    ];
    Ok(finish("plotdata", &loaded, config, results, Some(OutputFormat::Json)))
}
