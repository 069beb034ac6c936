//! Monte Carlo study harness: population generation, replicate studies, and
//! table-style summaries.
//!
//! A study draws a truth (either a fixed preset or a log-normal recipe),
//! simulates `replicates` datasets of `n` subjects, fits every configured
//! method to each dataset, and reports per-parameter Mean, S.D. (with the
//! `R - 1` denominator), RMSE, and S.E. (the mean of per-replicate sandwich
//! standard errors), plus per-method iteration and timing averages.
//!
//! Replicates are embarrassingly parallel. Each replicate derives its own
//! RNG stream from the study seed and the replicate index, and aggregation
//! is ordered by replicate index, so a fixed seed makes the whole study
//! deterministic regardless of thread count. Non-convergent replicates are
//! excluded from the statistics and counted, never retried: retrying would
//! bias the summaries. Wall-clock timing is reported in the text summary
//! only; it is hardware-dependent, and only ratios are meaningful.

use crate::approximation::Method;
use crate::error::{Error, Result};
use crate::estimator::{fit, FitControls, FitOptions, FitResult};
use crate::model::{sigmoid, Dataset, ModelSpec, Theta};
use crate::posterior::InnerOptions;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use rayon::prelude::*;
use serde::Deserialize;

// ---------------------------------------------------------------------------
// seeding
// ---------------------------------------------------------------------------

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent stream seed from a study seed and an index.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}

const TRUTH_STREAM: u64 = 0xF00D_5EED;

// ---------------------------------------------------------------------------
// population generation
// ---------------------------------------------------------------------------

/// Log-normal recipe for drawing intercepts and free loadings. The defaults
/// reproduce the magnitude range of the shipped preset truths (roughly 0.35
/// to 1.7).
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    #[serde(default = "Recipe::default_mu")]
    pub mu: f64,
    #[serde(default = "Recipe::default_sigma")]
    pub sigma: f64,
}

impl Recipe {
    fn default_mu() -> f64 {
        -0.3
    }
    fn default_sigma() -> f64 {
        0.5
    }
}

impl Default for Recipe {
    fn default() -> Self {
        Recipe {
            mu: -0.3,
            sigma: 0.5,
        }
    }
}

/// Draw a truth: intercepts and free loadings i.i.d. log-normal under the
/// recipe, masked loadings zero. Deterministic in the seed.
pub fn generate_truth(spec: &ModelSpec, recipe: &Recipe, seed: u64) -> Result<Theta> {
    if !(recipe.sigma >= 0.0) || !recipe.mu.is_finite() {
        return Err(Error::invalid(
            "recipe needs finite mu and non-negative sigma",
        ));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let dist = LogNormal::new(recipe.mu, recipe.sigma)
        .map_err(|e| Error::invalid(format!("log-normal recipe: {e}")))?;
    let mut theta = Theta::zeros(spec);
    for j in 0..spec.p() {
        theta.intercepts[j] = dist.sample(&mut rng);
    }
    for j in 0..spec.p() {
        for m in 0..spec.q() {
            if spec.is_free(j, m) {
                theta.loadings[[j, m]] = dist.sample(&mut rng);
            }
        }
    }
    Ok(theta)
}

/// Simulate `n` subjects: `z ~ N(0, I_q)`, then conditionally independent
/// Bernoulli items with success probability `sigma(eta_j(z))`.
pub fn generate_dataset(truth: &Theta, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("dataset size n must be at least 1"));
    }
    let p = truth.p();
    let q = truth.q();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut y = Array2::<u8>::zeros((n, p));
    let mut z = vec![0.0f64; q];
    for l in 0..n {
        for zm in z.iter_mut() {
            *zm = StandardNormal.sample(&mut rng);
        }
        for j in 0..p {
            let mut e = truth.intercepts[j];
            for m in 0..q {
                e += truth.loadings[[j, m]] * z[m];
            }
            let u: f64 = rng.random();
            y[[l, j]] = (u < sigmoid(e)) as u8;
        }
    }
    Dataset::new(y)
}

// ---------------------------------------------------------------------------
// study configuration
// ---------------------------------------------------------------------------

/// Where the generating truth comes from.
#[derive(Debug, Clone)]
pub enum TruthSource {
    Explicit(Theta),
    Recipe(Recipe),
}

/// A fully resolved study description.
#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub spec: ModelSpec,
    pub truth: TruthSource,
    pub n: usize,
    pub replicates: usize,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub controls: FitControls,
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::config("replicates", "must be at least 1"));
        }
        if self.n == 0 {
            return Err(Error::config("n", "must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods", "must list at least one method"));
        }
        if let TruthSource::Explicit(theta) = &self.truth {
            if theta.p() != self.spec.p() || theta.q() != self.spec.q() {
                return Err(Error::config(
                    "truth",
                    format!(
                        "truth is {}x{} but the model is {}x{}",
                        theta.p(),
                        theta.q(),
                        self.spec.p(),
                        self.spec.q()
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Resolve the generating truth (drawing from the recipe if needed).
    pub fn resolve_truth(&self) -> Result<Theta> {
        match &self.truth {
            TruthSource::Explicit(theta) => Ok(theta.clone()),
            TruthSource::Recipe(recipe) => {
                generate_truth(&self.spec, recipe, derive_seed(self.seed, TRUTH_STREAM))
            }
        }
    }
}

/// Built-in study designs with fixed truth loadings (three- and five-factor
/// binary designs) and their customary method/node-count pairings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Table1,
    Table2,
    Table3,
}

impl Preset {
    pub const NAMES: [&'static str; 3] = ["table1", "table2", "table3"];

    pub fn parse(s: &str) -> Result<Preset> {
        match s.trim().to_ascii_lowercase().as_str() {
            "table1" => Ok(Preset::Table1),
            "table2" => Ok(Preset::Table2),
            "table3" => Ok(Preset::Table3),
            other => Err(Error::config(
                "preset",
                format!(
                    "unknown preset `{other}`; available presets: {}",
                    Preset::NAMES.join(", ")
                ),
            )),
        }
    }

    /// The design's generating loadings (factor columns) with zero
    /// intercepts.
    pub fn truth(&self) -> (ModelSpec, Theta) {
        let (p, q, cols): (usize, usize, Vec<Vec<f64>>) = match self {
            Preset::Table1 | Preset::Table3 => (
                6,
                3,
                vec![
                    vec![1.01, 0.91, 0.50, 0.74, 1.16, 1.22],
                    vec![0.00, 0.83, 0.44, 0.88, 1.73, 1.46],
                    vec![0.00, 0.00, 1.45, 1.05, 0.62, 0.91],
                ],
            ),
            Preset::Table2 => (
                10,
                5,
                vec![
                    vec![1.01, 0.91, 0.50, 0.74, 1.16, 1.22, 0.55, 0.83, 0.44, 0.88],
                    vec![0.00, 1.46, 0.89, 1.64, 1.45, 1.05, 0.62, 0.91, 1.59, 1.27],
                    vec![0.00, 0.00, 0.71, 0.35, 0.53, 0.83, 0.71, 0.65, 0.95, 0.88],
                    vec![0.00, 0.00, 0.00, 1.10, 0.50, 0.49, 1.20, 0.41, 0.85, 0.72],
                    vec![0.00, 0.00, 0.00, 0.00, 0.62, 0.99, 1.12, 0.86, 0.71, 1.39],
                ],
            ),
        };
        let spec = ModelSpec::echelon(p, q).expect("preset dimensions are valid");
        let mut loadings = Array2::<f64>::zeros((p, q));
        for (m, col) in cols.iter().enumerate() {
            for (j, &v) in col.iter().enumerate() {
                loadings[[j, m]] = v;
            }
        }
        let theta = Theta::from_parts(&spec, Array1::zeros(p), loadings)
            .expect("preset truth respects the mask");
        (spec, theta)
    }

    fn default_methods(&self) -> Vec<Method> {
        match self {
            Preset::Table1 => vec![Method::Agh { k: 5 }, Method::Laplace2],
            Preset::Table2 => vec![Method::Agh { k: 3 }, Method::Laplace2],
            Preset::Table3 => vec![
                Method::Agh { k: 5 },
                Method::Agh { k: 9 },
                Method::Agh { k: 15 },
            ],
        }
    }

    /// Study configuration at the published design scale (200 subjects, 100
    /// replicates).
    pub fn study_config(&self, seed: u64) -> StudyConfig {
        let (spec, theta) = self.truth();
        StudyConfig {
            spec,
            truth: TruthSource::Explicit(theta),
            n: 200,
            replicates: 100,
            methods: self.default_methods(),
            seed,
            controls: FitControls::default(),
        }
    }
}

// --- TOML schema ---

/// Loading-mask field of a config file: `"echelon"`, `"none"`, or explicit
/// 0/1 rows (one row per item).
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum MaskConfig {
    Named(String),
    Rows(Vec<Vec<u8>>),
}

impl MaskConfig {
    pub fn build(&self, p: usize, q: usize) -> Result<ModelSpec> {
        match self {
            MaskConfig::Named(name) => match name.as_str() {
                "echelon" => ModelSpec::echelon(p, q),
                "none" => {
                    if q != 1 {
                        return Err(Error::config(
                            "model.mask",
                            "mask \"none\" (intercept-only) requires q = 1",
                        ));
                    }
                    ModelSpec::intercept_only(p)
                }
                other => Err(Error::config(
                    "model.mask",
                    format!("unknown mask `{other}` (expected \"echelon\", \"none\", or 0/1 rows)"),
                )),
            },
            MaskConfig::Rows(rows) => {
                if rows.len() != p {
                    return Err(Error::config(
                        "model.mask",
                        format!("expected {p} mask rows, got {}", rows.len()),
                    ));
                }
                let mut mask = Array2::<bool>::from_elem((p, q), false);
                for (j, row) in rows.iter().enumerate() {
                    if row.len() != q {
                        return Err(Error::config(
                            "model.mask",
                            format!("mask row {} has {} entries, expected {q}", j + 1, row.len()),
                        ));
                    }
                    for (m, &v) in row.iter().enumerate() {
                        if v > 1 {
                            return Err(Error::config(
                                "model.mask",
                                format!("mask entries must be 0 or 1, got {v}"),
                            ));
                        }
                        mask[[j, m]] = v == 1;
                    }
                }
                ModelSpec::new(p, q, mask)
            }
        }
    }
}

fn default_mask() -> MaskConfig {
    MaskConfig::Named("echelon".to_string())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    p: usize,
    q: usize,
    #[serde(default = "default_mask")]
    mask: MaskConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTruth {
    intercepts: Option<Vec<f64>>,
    loadings: Option<Vec<Vec<f64>>>,
    recipe: Option<Recipe>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFit {
    outer_param_tol: Option<f64>,
    outer_score_tol: Option<f64>,
    max_outer: Option<usize>,
    inner_tol: Option<f64>,
    inner_max_iter: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStudy {
    preset: Option<String>,
    seed: Option<u64>,
    n: Option<usize>,
    replicates: Option<usize>,
    methods: Option<Vec<String>>,
    model: Option<RawModel>,
    truth: Option<RawTruth>,
    fit: Option<RawFit>,
}

impl StudyConfig {
    /// Parse and validate a TOML study description. Seeds are mandatory:
    /// studies must be reproducible, so there is no wall-clock default.
    pub fn from_toml_str(text: &str) -> Result<StudyConfig> {
        let raw: RawStudy = toml::from_str(text)
            .map_err(|e| Error::config("<study config>", e.to_string()))?;

        let seed = raw
            .seed
            .ok_or_else(|| Error::config("seed", "a study seed is required"))?;

        let mut config = match &raw.preset {
            Some(name) => {
                let preset = Preset::parse(name)?;
                if raw.model.is_some() || raw.truth.is_some() {
                    return Err(Error::config(
                        "preset",
                        "a preset already fixes [model] and [truth]; remove those sections",
                    ));
                }
                preset.study_config(seed)
            }
            None => {
                let model = raw
                    .model
                    .as_ref()
                    .ok_or_else(|| Error::config("model", "required without a preset"))?;
                let spec = model.mask.build(model.p, model.q)?;
                let truth_section = raw
                    .truth
                    .as_ref()
                    .ok_or_else(|| Error::config("truth", "required without a preset"))?;
                let truth = match (
                    &truth_section.recipe,
                    &truth_section.intercepts,
                    &truth_section.loadings,
                ) {
                    (Some(recipe), None, None) => TruthSource::Recipe(*recipe),
                    (None, Some(ints), Some(loads)) => {
                        let intercepts = Array1::from_vec(ints.clone());
                        if loads.len() != spec.p() {
                            return Err(Error::config(
                                "truth.loadings",
                                format!("expected {} rows, got {}", spec.p(), loads.len()),
                            ));
                        }
                        let mut loadings = Array2::<f64>::zeros((spec.p(), spec.q()));
                        for (j, row) in loads.iter().enumerate() {
                            if row.len() != spec.q() {
                                return Err(Error::config(
                                    "truth.loadings",
                                    format!(
                                        "row {} has {} entries, expected {}",
                                        j + 1,
                                        row.len(),
                                        spec.q()
                                    ),
                                ));
                            }
                            for (m, &v) in row.iter().enumerate() {
                                loadings[[j, m]] = v;
                            }
                        }
                        let theta = Theta::from_parts(&spec, intercepts, loadings)
                            .map_err(|e| Error::config("truth", e.to_string()))?;
                        TruthSource::Explicit(theta)
                    }
                    _ => {
                        return Err(Error::config(
                            "truth",
                            "provide either `recipe` or both `intercepts` and `loadings`",
                        ))
                    }
                };
                StudyConfig {
                    spec,
                    truth,
                    n: 200,
                    replicates: 100,
                    methods: vec![Method::Agh { k: 5 }],
                    seed,
                    controls: FitControls::default(),
                }
            }
        };

        if let Some(n) = raw.n {
            config.n = n;
        }
        if let Some(r) = raw.replicates {
            config.replicates = r;
        }
        if let Some(methods) = &raw.methods {
            let mut parsed = Vec::with_capacity(methods.len());
            for m in methods {
                parsed.push(
                    Method::parse(m).map_err(|e| Error::config("methods", e.to_string()))?,
                );
            }
            config.methods = parsed;
        }
        if let Some(fit) = &raw.fit {
            if let Some(v) = fit.outer_param_tol {
                config.controls.outer_param_tol = v;
            }
            if let Some(v) = fit.outer_score_tol {
                config.controls.outer_score_tol = v;
            }
            if let Some(v) = fit.max_outer {
                config.controls.max_outer = v;
            }
            let mut inner = InnerOptions::default();
            if let Some(v) = fit.inner_tol {
                inner.tol = v;
            }
            if let Some(v) = fit.inner_max_iter {
                inner.max_iter = v;
            }
            config.controls.inner = inner;
        }
        if !(config.controls.outer_param_tol > 0.0)
            || !(config.controls.outer_score_tol > 0.0)
            || !(config.controls.inner.tol > 0.0)
        {
            return Err(Error::config("fit", "tolerances must be positive"));
        }
        config.validate()?;
        Ok(config)
    }
}

// ---------------------------------------------------------------------------
// study execution and reporting
// ---------------------------------------------------------------------------

/// Statistics for one reported parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamRow {
    pub name: String,
    pub truth: f64,
    /// Masked loadings have no estimate; every statistic renders as a dash.
    pub masked: bool,
    pub mean: f64,
    pub sd: f64,
    pub rmse: f64,
    pub se: f64,
}

/// One replicate's raw outcome for one method.
#[derive(Debug, Clone)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub converged: bool,
    pub iterations: usize,
    pub elapsed_seconds: f64,
    /// Flat estimates (free-parameter order); empty when the fit errored.
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
}

/// Aggregated results for one method.
#[derive(Debug, Clone)]
pub struct MethodReport {
    pub method: Method,
    pub rows: Vec<ParamRow>,
    pub avg_iterations: f64,
    pub avg_minutes: f64,
    pub nonconverged: usize,
    pub included: usize,
    pub records: Vec<ReplicateRecord>,
}

/// Full study output.
#[derive(Debug, Clone)]
pub struct SimulationReport {
    pub spec: ModelSpec,
    pub truth: Theta,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub methods: Vec<MethodReport>,
}

/// Run a study with the library's fitting routine.
pub fn run_study(config: &StudyConfig) -> Result<SimulationReport> {
    run_study_with(config, |data, spec, options| fit(data, spec, options))
}

/// Run a study with an injected fitting routine (the harness tests use a
/// stub that returns the truth exactly).
pub fn run_study_with<F>(config: &StudyConfig, fitter: F) -> Result<SimulationReport>
where
    F: Fn(&Dataset, &ModelSpec, &FitOptions) -> Result<FitResult> + Sync,
{
    config.validate()?;
    let truth = config.resolve_truth()?;
    let spec = &config.spec;

    type RepOutcome = Vec<std::result::Result<FitResult, String>>;
    let outcomes: Vec<Result<RepOutcome>> = (0..config.replicates)
        .into_par_iter()
        .map(|r| {
            let data = generate_dataset(&truth, config.n, derive_seed(config.seed, r as u64 + 1))?;
            let per_method: RepOutcome = config
                .methods
                .iter()
                .map(|&method| {
                    let options = FitOptions {
                        method,
                        controls: config.controls,
                    };
                    fitter(&data, spec, &options).map_err(|e| e.to_string())
                })
                .collect();
            Ok(per_method)
        })
        .collect();

    let mut per_replicate: Vec<RepOutcome> = Vec::with_capacity(config.replicates);
    for o in outcomes {
        per_replicate.push(o?);
    }

    let mut methods = Vec::with_capacity(config.methods.len());
    for (mi, &method) in config.methods.iter().enumerate() {
        let mut records = Vec::with_capacity(config.replicates);
        for (r, rep) in per_replicate.iter().enumerate() {
            let record = match &rep[mi] {
                Ok(res) => ReplicateRecord {
                    replicate: r,
                    converged: res.converged,
                    iterations: res.iterations,
                    elapsed_seconds: res.elapsed_seconds,
                    estimates: res.theta_hat.flatten(spec).to_vec(),
                    std_errors: res.std_errors.to_vec(),
                },
                Err(msg) => {
                    log::warn!("replicate {r} failed for {method}: {msg}");
                    ReplicateRecord {
                        replicate: r,
                        converged: false,
                        iterations: 0,
                        elapsed_seconds: 0.0,
                        estimates: Vec::new(),
                        std_errors: Vec::new(),
                    }
                }
            };
            records.push(record);
        }
        let included: Vec<&ReplicateRecord> = records.iter().filter(|r| r.converged).collect();
        if included.is_empty() {
            return Err(Error::AllReplicatesFailed {
                method: method.to_string(),
                replicates: config.replicates,
            });
        }
        let rows = summarize(spec, &truth, &included);
        let avg_iterations = included.iter().map(|r| r.iterations as f64).sum::<f64>()
            / included.len() as f64;
        let avg_minutes = included
            .iter()
            .map(|r| r.elapsed_seconds / 60.0)
            .sum::<f64>()
            / included.len() as f64;
        methods.push(MethodReport {
            method,
            rows,
            avg_iterations,
            avg_minutes,
            nonconverged: config.replicates - included.len(),
            included: included.len(),
            records,
        });
    }

    Ok(SimulationReport {
        spec: spec.clone(),
        truth,
        n: config.n,
        replicates: config.replicates,
        seed: config.seed,
        methods,
    })
}

/// Reported parameters in table order: intercepts by item, then loading
/// cells factor-major including masked cells (which render as dashes).
fn report_params(spec: &ModelSpec) -> Vec<(String, Option<usize>, f64, bool, usize, usize)> {
    // (name, flat index, .., masked, item, factor); intercepts use factor = usize::MAX
    let mut flat_index = vec![vec![None; spec.q()]; spec.p()];
    let mut pos = spec.p();
    for j in 0..spec.p() {
        for m in 0..spec.q() {
            if spec.is_free(j, m) {
                flat_index[j][m] = Some(pos);
                pos += 1;
            }
        }
    }
    let mut out = Vec::new();
    for j in 0..spec.p() {
        out.push((format!("a0_{}", j + 1), Some(j), 0.0, false, j, usize::MAX));
    }
    for m in 0..spec.q() {
        for j in 0..spec.p() {
            out.push((
                format!("a{}_{}", j + 1, m + 1),
                flat_index[j][m],
                0.0,
                flat_index[j][m].is_none(),
                j,
                m,
            ));
        }
    }
    out
}

fn summarize(spec: &ModelSpec, truth: &Theta, included: &[&ReplicateRecord]) -> Vec<ParamRow> {
    let r = included.len() as f64;
    report_params(spec)
        .into_iter()
        .map(|(name, flat, _, masked, item, factor)| {
            let truth_value = if factor == usize::MAX {
                truth.intercepts[item]
            } else {
                truth.loadings[[item, factor]]
            };
            if masked {
                return ParamRow {
                    name,
                    truth: truth_value,
                    masked: true,
                    mean: f64::NAN,
                    sd: f64::NAN,
                    rmse: f64::NAN,
                    se: f64::NAN,
                };
            }
            let idx = flat.expect("unmasked parameters have a flat index");
            let values: Vec<f64> = included.iter().map(|rec| rec.estimates[idx]).collect();
            let mean = values.iter().sum::<f64>() / r;
            let sd = if included.len() > 1 {
                (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (r - 1.0)).sqrt()
            } else {
                0.0
            };
            let rmse = (values
                .iter()
                .map(|v| (v - truth_value) * (v - truth_value))
                .sum::<f64>()
                / r)
                .sqrt();
            let se = included.iter().map(|rec| rec.std_errors[idx]).sum::<f64>() / r;
            ParamRow {
                name,
                truth: truth_value,
                masked: false,
                mean,
                sd,
                rmse,
                se,
            }
        })
        .collect()
}

/// Output format for [`render_table`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    /// Aligned human-readable table, 2-decimal display.
    Text,
    /// Machine-readable CSV at full precision (17 significant digits).
    /// Deterministic for a fixed seed: wall-clock timing is excluded.
    Csv,
}

/// Full-precision float formatting (17 significant digits round-trips f64).
pub fn format_g17(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_g17(s: &str) -> Option<f64> {
    s.parse::<f64>().ok()
}

/// Render a study report.
pub fn render_table(report: &SimulationReport, format: TableFormat) -> String {
    match format {
        TableFormat::Text => render_text(report),
        TableFormat::Csv => render_csv(report),
    }
}

fn render_text(report: &SimulationReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "study: p = {}, q = {}, n = {}, replicates = {}, seed = {}\n",
        report.spec.p(),
        report.spec.q(),
        report.n,
        report.replicates,
        report.seed
    ));
    for m in &report.methods {
        out.push_str(&format!("\nmethod {}\n", m.method));
        out.push_str(&format!(
            "{:<8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "param", "true", "mean", "s.d.", "rmse", "s.e."
        ));
        for row in &m.rows {
            if row.masked {
                out.push_str(&format!(
                    "{:<8} {:>8.2} {:>8} {:>8} {:>8} {:>8}\n",
                    row.name, row.truth, "-", "-", "-", "-"
                ));
            } else {
                out.push_str(&format!(
                    "{:<8} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8.2}\n",
                    row.name, row.truth, row.mean, row.sd, row.rmse, row.se
                ));
            }
        }
        out.push_str(&format!(
            "avg iterations = {:.2}, avg minutes = {:.4} (wall-clock; hardware-dependent, compare ratios only), non-convergent = {}, included = {}\n",
            m.avg_iterations, m.avg_minutes, m.nonconverged, m.included
        ));
    }
    out
}

fn render_csv(report: &SimulationReport) -> String {
    let mut out = String::from("kind,method,parameter,truth,mean,sd,rmse,se\n");
    for m in &report.methods {
        for row in &m.rows {
            if row.masked {
                out.push_str(&format!(
                    "param,{},{},{},-,-,-,-\n",
                    m.method,
                    row.name,
                    format_g17(row.truth)
                ));
            } else {
                out.push_str(&format!(
                    "param,{},{},{},{},{},{},{}\n",
                    m.method,
                    row.name,
                    format_g17(row.truth),
                    format_g17(row.mean),
                    format_g17(row.sd),
                    format_g17(row.rmse),
                    format_g17(row.se)
                ));
            }
        }
        out.push_str(&format!(
            "stat,{},avg_iterations,{},,,,\n",
            m.method,
            format_g17(m.avg_iterations)
        ));
        out.push_str(&format!(
            "stat,{},nonconverged,{},,,,\n",
            m.method, m.nonconverged
        ));
        out.push_str(&format!(
            "stat,{},included_replicates,{},,,,\n",
            m.method, m.included
        ));
    }
    out
}

/// Parse the `param` rows of a report CSV back into
/// `(method, name, truth, mean, sd, rmse, se)` tuples; masked statistics
/// come back as NaN. Used to verify that the CSV round-trips bit-exactly.
#[allow(clippy::type_complexity)]
pub fn parse_report_csv(
    text: &str,
) -> Result<Vec<(String, String, f64, f64, f64, f64, f64)>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields[0] != "param" {
            continue;
        }
        if fields.len() != 8 {
            return Err(Error::config(
                format!("report csv line {}", i + 1),
                "expected 8 fields",
            ));
        }
        let num = |s: &str| -> f64 {
            if s == "-" {
                f64::NAN
            } else {
                parse_g17(s).unwrap_or(f64::NAN)
            }
        };
        rows.push((
            fields[1].to_string(),
            fields[2].to_string(),
            num(fields[3]),
            num(fields[4]),
            num(fields[5]),
            num(fields[6]),
            num(fields[7]),
        ));
    }
    Ok(rows)
}

/// Per-replicate raw estimates as CSV (one row per parameter and replicate).
pub fn render_estimates_csv(report: &SimulationReport) -> String {
    let names: Vec<String> = report.spec.param_names();
    let mut out = String::from("method,replicate,converged,iterations,parameter,estimate,se\n");
    for m in &report.methods {
        for rec in &m.records {
            if rec.estimates.is_empty() {
                out.push_str(&format!(
                    "{},{},false,{},-,-,-\n",
                    m.method, rec.replicate, rec.iterations
                ));
                continue;
            }
            for (i, name) in names.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    m.method,
                    rec.replicate,
                    rec.converged,
                    rec.iterations,
                    name,
                    format_g17(rec.estimates[i]),
                    format_g17(rec.std_errors[i])
                ));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn seeded_truth_is_reproducible() {
        let spec = ModelSpec::echelon(4, 2).unwrap();
        let recipe = Recipe::default();
        let a = generate_truth(&spec, &recipe, 99).unwrap();
        let b = generate_truth(&spec, &recipe, 99).unwrap();
        assert_eq!(a.loadings, b.loadings);
        assert_eq!(a.intercepts, b.intercepts);
        let c = generate_truth(&spec, &recipe, 100).unwrap();
        assert_ne!(a.loadings, c.loadings);
        // masked entries stay zero
        assert_eq!(a.loadings[[0, 1]], 0.0);
    }

    #[test]
    fn degenerate_recipe_gives_constant_loadings() {
        let spec = ModelSpec::echelon(3, 1).unwrap();
        let recipe = Recipe { mu: -0.3, sigma: 0.0 };
        let theta = generate_truth(&spec, &recipe, 7).unwrap();
        for j in 0..3 {
            assert_relative_eq!(theta.loadings[[j, 0]], (-0.3f64).exp(), epsilon = 1e-12);
        }
    }

    #[test]
    fn seeded_dataset_is_bit_identical() {
        let spec = ModelSpec::echelon(4, 2).unwrap();
        let truth = generate_truth(&spec, &Recipe::default(), 5).unwrap();
        let a = generate_dataset(&truth, 50, 11).unwrap();
        let b = generate_dataset(&truth, 50, 11).unwrap();
        assert_eq!(a.responses(), b.responses());
    }

    #[test]
    fn zero_loading_items_are_fair_coins() {
        let spec = ModelSpec::intercept_only(2).unwrap();
        let truth = Theta::zeros(&spec);
        let n = 10_000;
        let data = generate_dataset(&truth, n, 3).unwrap();
        let means = data.item_means();
        let bound = 3.0 / (n as f64).sqrt() * 0.5;
        for j in 0..2 {
            assert!(
                (means[j] - 0.5).abs() <= bound,
                "item {j} mean {} outside {bound}",
                means[j]
            );
        }
    }

    #[test]
    fn preset_truths_embed_published_values() {
        let (spec, theta) = Preset::Table1.truth();
        assert_eq!((spec.p(), spec.q()), (6, 3));
        assert_relative_eq!(theta.loadings[[0, 0]], 1.01, epsilon = 1e-15);
        assert_relative_eq!(theta.loadings[[4, 1]], 1.73, epsilon = 1e-15);
        assert_relative_eq!(theta.loadings[[2, 2]], 1.45, epsilon = 1e-15);
        assert_eq!(theta.loadings[[0, 1]], 0.0);
        let (spec2, theta2) = Preset::Table2.truth();
        assert_eq!((spec2.p(), spec2.q()), (10, 5));
        assert_relative_eq!(theta2.loadings[[9, 4]], 1.39, epsilon = 1e-15);
        assert!(Preset::parse("table9").is_err());
    }

    #[test]
    fn config_requires_seed_and_methods() {
        let err = StudyConfig::from_toml_str("preset = \"table1\"").unwrap_err();
        assert!(err.to_string().contains("seed"));

        let err = StudyConfig::from_toml_str(
            "preset = \"table1\"\nseed = 1\nmethods = []\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("methods"));

        let ok = StudyConfig::from_toml_str(
            "preset = \"table1\"\nseed = 1\nreplicates = 2\nn = 50\n",
        )
        .unwrap();
        assert_eq!(ok.n, 50);
        assert_eq!(ok.replicates, 2);
        assert_eq!(ok.methods.len(), 2);
    }

    #[test]
    fn explicit_model_config_parses() {
        let text = r#"
seed = 9
n = 30
replicates = 2
methods = ["agh3"]

[model]
p = 4
q = 2

[truth]
recipe = { mu = -0.3, sigma = 0.4 }
"#;
        let config = StudyConfig::from_toml_str(text).unwrap();
        assert_eq!(config.spec.p(), 4);
        assert!(matches!(config.truth, TruthSource::Recipe(_)));
        let truth = config.resolve_truth().unwrap();
        assert_eq!(truth.loadings[[0, 1]], 0.0);
    }

    #[test]
    fn config_rejects_bad_truth_shape() {
        let text = r#"
seed = 9
[model]
p = 3
q = 1
[truth]
intercepts = [0.0, 0.0, 0.0]
loadings = [[1.0], [0.5]]
"#;
        let err = StudyConfig::from_toml_str(text).unwrap_err();
        assert!(err.to_string().contains("truth.loadings"));
    }

    #[test]
    fn csv_round_trips_bit_exactly() {
        let spec = ModelSpec::echelon(2, 1).unwrap();
        let truth = Theta::from_parts(
            &spec,
            Array1::from_vec(vec![0.125, -0.25]),
            Array2::from_shape_vec((2, 1), vec![1.01, 0.7]).unwrap(),
        )
        .unwrap();
        let report = SimulationReport {
            spec: spec.clone(),
            truth,
            n: 10,
            replicates: 2,
            seed: 1,
            methods: vec![MethodReport {
                method: Method::Agh { k: 5 },
                rows: vec![ParamRow {
                    name: "a0_1".into(),
                    truth: 0.125,
                    masked: false,
                    mean: 1.0 / 3.0,
                    sd: 2.0f64.sqrt() / 7.0,
                    rmse: 0.1234567890123456789,
                    se: 1e-37,
                }],
                avg_iterations: 9.5,
                avg_minutes: 0.01,
                nonconverged: 0,
                included: 2,
                records: vec![],
            }],
        };
        let csv = render_csv(&report);
        let rows = parse_report_csv(&csv).unwrap();
        assert_eq!(rows.len(), 1);
        let (_, _, truth, mean, sd, rmse, se) = rows[0].clone();
        assert_eq!(truth.to_bits(), 0.125f64.to_bits());
        assert_eq!(mean.to_bits(), (1.0f64 / 3.0).to_bits());
        assert_eq!(sd.to_bits(), (2.0f64.sqrt() / 7.0).to_bits());
        assert_eq!(rmse.to_bits(), 0.1234567890123456789f64.to_bits());
        assert_eq!(se.to_bits(), 1e-37f64.to_bits());
    }
}
