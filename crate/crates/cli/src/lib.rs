//! Command-line driver: synthesize data, learn markers, run K ablations,
//! reconstruct meshes, train the coefficient adapter and evaluate.
//!
//! Every command is a thin wrapper over a function in this crate, so tests can
//! call the same code paths directly.

pub mod config;
pub mod pipeline;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use virtual_markers::archetypal::{
    factorization_error, fit_archetypes, reconstruction_error, FitOptions, InitStrategy, ReconstructionError,
};
use virtual_markers::dataset::{
    assemble_data_matrix, compute_symmetric_pairs, generate_synthetic_dataset, load_dataset, read_obj,
    save_dataset, write_obj, MeshDataset, MeshSample, DEFAULT_MIDLINE_TOLERANCE,
};
use virtual_markers::evaluation::{evaluate_meshes, MetricReport};
use virtual_markers::heatmap::MarkerEstimate;
use virtual_markers::markers::{
    baseline_pca_error, baseline_random_markers, load_marker_set, marker_set_from_indices, refit_coefficients,
    save_marker_set, snap_to_vertices, symmetrize_markers, MarkerSet,
};
use virtual_markers::reconstruction::{
    load_adapter, reconstruct_adaptive, reconstruct_fixed, save_adapter, train_adapter, AdapterTrainConfig,
    CoefficientAdapter, Optimizer, TrainHistory, TrainSample,
};
use virtual_markers::vmat::load_vmat;

pub use config::{AblationConfig, HeatmapConfig, RunConfig};
use pipeline::{gt_estimates, heatmap_estimates, is_eval_index, rms_mm, rms_of, split_samples};

pub const DATASET_FILE: &str = "dataset.vmds";
pub const MARKERS_FILE: &str = "markers.json";
pub const MARKERS_A_FILE: &str = "markers_A.vmat";
pub const LEARN_REPORT_FILE: &str = "learn_report.json";
pub const ABLATION_FILE: &str = "ablate_k.csv";
pub const RECON_DIR: &str = "recon";
pub const RECON_REPORT_FILE: &str = "recon_report.json";
pub const RECON_ESTIMATES_FILE: &str = "recon_estimates.json";
pub const ADAPTER_FILE: &str = "adapter.json";
pub const ADAPTER_MARKERS_FILE: &str = "adapter_markers.json";
pub const ADAPTER_MARKERS_A_FILE: &str = "adapter_markers_A.vmat";
pub const TRAIN_LOG_FILE: &str = "train_log.json";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lib(#[from] virtual_markers::Error),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: virtual_markers::Error,
    },
}

impl CliError {
    /// 2 for usage and configuration errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        use virtual_markers::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Lib(E::Parameter(_)) | CliError::Context { source: E::Parameter(_), .. } => 2,
            _ => 1,
        }
    }
}

trait Context<T> {
    fn context(self, f: impl FnOnce() -> String) -> Result<T, CliError>;
}

impl<T> Context<T> for virtual_markers::Result<T> {
    fn context(self, f: impl FnOnce() -> String) -> Result<T, CliError> {
        self.map_err(|source| CliError::Context { context: f(), source })
    }
}

#[derive(Debug, Parser)]
#[command(name = "vmarker", version, about = "Learn virtual surface markers and reconstruct meshes from them")]
pub struct Cli {
    /// JSON run configuration; flags override its values
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice (default 0 or the config's `seed`)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; results do not depend on it
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic articulated-body dataset
    Synth(SynthArgs),
    /// Learn K markers from a dataset
    Learn(LearnArgs),
    /// Compare learned, random and PCA reconstruction errors over several K
    AblateK(AblateArgs),
    /// Reconstruct meshes from marker estimates
    Recon(ReconArgs),
    /// Train the confidence-conditioned coefficient adapter
    TrainAdapter(TrainArgs),
    /// Score predicted meshes against ground truth
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n_samples: Option<usize>,
    /// Approximate vertex count
    #[arg(long)]
    pub vertices: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// Noise standard deviation in mm
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    FurthestSum,
    RandomVertices,
}

#[derive(Debug, Args)]
pub struct LearnArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(short, long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub outer_tol: Option<f64>,
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Comma-separated list of K values
    #[arg(long, value_delimiter = ',')]
    pub k_values: Option<Vec<usize>>,
    #[arg(long)]
    pub random_sets: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimateSource {
    /// Exact marker vertices with confidence 1
    Gt,
    /// Decoded from simulated, partly corrupted heatmaps
    Heatmap,
    /// Read from --estimates
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    All,
    Train,
    Eval,
}

impl Split {
    fn keeps(self, n: usize) -> bool {
        match self {
            Split::All => true,
            Split::Train => !is_eval_index(n),
            Split::Eval => is_eval_index(n),
        }
    }
}

#[derive(Debug, Args)]
pub struct ReconArgs {
    /// Dataset giving topology and ground truth
    #[arg(long)]
    pub dataset: PathBuf,
    /// Marker set; optional when --adapter is given
    #[arg(long)]
    pub markers: Option<PathBuf>,
    /// Adapter manifest; switches to adaptive reconstruction
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "gt")]
    pub source: EstimateSource,
    /// JSON array of estimates, one per dataset sample
    #[arg(long)]
    pub estimates: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub markers: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    #[arg(long)]
    pub corrupt_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of OBJ files (sorted by name) or a VMDS file
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth VMDS dataset
    #[arg(long)]
    pub gt: PathBuf,
    /// M×J joint regressor as VMAT; defaults to the dataset's own
    #[arg(long)]
    pub regressor: Option<PathBuf>,
    /// Report MPVE only
    #[arg(long)]
    pub no_joints: bool,
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli))
}

fn base_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.unwrap_or(cfg.seed);
    Ok(cfg.with_seed(seed))
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = base_config(cli)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Synth(a) => {
            set(&mut cfg.synth.n_samples, a.n_samples);
            set(&mut cfg.synth.target_vertices, a.vertices);
            set(&mut cfg.synth.latent_dim, a.latent_dim);
            set(&mut cfg.synth.noise_sigma, a.noise);
            cmd_synth(&cfg, out)
        }
        Command::Learn(a) => {
            set(&mut cfg.fit.k, a.k);
            set(&mut cfg.fit.restarts, a.restarts);
            set(&mut cfg.fit.max_outer_iters, a.max_iters);
            set(&mut cfg.fit.outer_tol, a.outer_tol);
            set(
                &mut cfg.fit.init_strategy,
                a.init.map(|i| match i {
                    InitArg::FurthestSum => InitStrategy::FurthestSum,
                    InitArg::RandomVertices => InitStrategy::RandomVertices,
                }),
            );
            cmd_learn(&cfg, &a.dataset, out)
        }
        Command::AblateK(a) => {
            set(&mut cfg.ablation.k_values, a.k_values.clone());
            set(&mut cfg.ablation.random_sets, a.random_sets);
            set(&mut cfg.fit.restarts, a.restarts);
            cmd_ablate_k(&cfg, &a.dataset, out)
        }
        Command::Recon(a) => cmd_recon(&cfg, a, out),
        Command::TrainAdapter(a) => {
            set(&mut cfg.train.epochs, a.epochs);
            set(&mut cfg.train.learning_rate, a.lr);
            set(&mut cfg.train.batch_size, a.batch_size);
            set(
                &mut cfg.train.optimizer,
                a.optimizer.map(|o| match o {
                    OptimizerArg::Sgd => Optimizer::Sgd,
                    OptimizerArg::Adam => Optimizer::Adam,
                }),
            );
            set(&mut cfg.heatmap.corrupt_fraction, a.corrupt_fraction);
            cmd_train_adapter(&cfg, &a.dataset, &a.markers, out)
        }
        Command::Eval(a) => cmd_eval(a, out),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| virtual_markers::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| virtual_markers::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(virtual_markers::Error::from)? + "\n";
    write_text(path, &text)
}

fn load(path: &Path) -> Result<MeshDataset, CliError> {
    load_dataset(path).context(|| format!("loading dataset {}", path.display()))
}

/// Number of principal components holding 99.9% of the centered variance.
pub fn effective_rank(dataset: &MeshDataset) -> usize {
    let x = assemble_data_matrix(dataset).x;
    let mean = x.column_mean();
    let mut c = x;
    for mut col in c.column_iter_mut() {
        col -= &mean;
    }
    let gram = if c.nrows() <= c.ncols() { &c * c.transpose() } else { c.tr_mul(&c) };
    let mut ev: Vec<f64> = SymmetricEigen::new(gram).eigenvalues.iter().map(|e| e.max(0.0)).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = ev.iter().sum();
    if total == 0.0 {
        return 0;
    }
    let mut acc = 0.0;
    for (i, e) in ev.iter().enumerate() {
        acc += e;
        if acc >= 0.999 * total {
            return i + 1;
        }
    }
    ev.len()
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    cfg.synth.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let ds = generate_synthetic_dataset(&cfg.synth, cfg.seed)?;
    ensure_dir(out)?;
    let path = out.join(DATASET_FILE);
    save_dataset(&ds, &path)?;
    println!(
        "wrote {}: N = {}, M = {}, F = {}, J = {}, rank (99.9% variance) = {}",
        path.display(),
        ds.n_samples(),
        ds.n_vertices(),
        ds.n_faces(),
        ds.n_joints(),
        effective_rank(&ds)
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub frobenius_sq: f64,
    pub mpve_mm: f64,
    pub rms_mm: f64,
}

impl ErrorSummary {
    fn new(e: &ReconstructionError, n: usize, m: usize) -> Self {
        Self {
            frobenius_sq: e.frobenius_sq,
            mpve_mm: e.mean_per_vertex_mm,
            rms_mm: rms_of(e, n, m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBound {
    pub frobenius_sq: f64,
    pub rms_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnReport {
    #[serde(rename = "K")]
    pub k: usize,
    pub n_samples: usize,
    pub n_vertices: usize,
    pub fit: FitOptions,
    pub objective_history: Vec<f64>,
    pub converged: bool,
    pub degenerate: bool,
    pub best_restart: usize,
    pub restart_objectives: Vec<f64>,
    /// Archetypes before snapping.
    pub archetype_error: ErrorSummary,
    pub snapped_indices: Vec<usize>,
    pub snapped_error: ErrorSummary,
    pub marker_indices: Vec<usize>,
    pub midline: Vec<usize>,
    pub symmetric_error: ErrorSummary,
    pub pca_bound: PcaBound,
    pub marker_set: String,
}

/// Fit, snap, symmetrize and refit.
pub fn learn_markers(dataset: &MeshDataset, fit: &FitOptions) -> Result<(MarkerSet, LearnReport), CliError> {
    let x = assemble_data_matrix(dataset);
    let (n, m) = (x.n_samples, x.n_vertices);
    fit.validate(m)?;
    let (model, history) = fit_archetypes(&x, fit)?;
    let pairing = compute_symmetric_pairs(&dataset.template, DEFAULT_MIDLINE_TOLERANCE);
    let snapped = snap_to_vertices(&model, &x);
    let snapped_a = refit_coefficients(&x, &snapped)?;
    let snapped_err = factorization_error(&x, &x.x.select_columns(&snapped), &snapped_a)?;
    let sym = symmetrize_markers(&snapped, &pairing, &dataset.template)?;
    let set = marker_set_from_indices(&x, sym, &pairing, &dataset.template)?;
    let sym_err = set.refit_error(&x)?;
    let pca = baseline_pca_error(&x, fit.k)?;
    let report = LearnReport {
        k: fit.k,
        n_samples: n,
        n_vertices: m,
        fit: fit.clone(),
        objective_history: history.objective_per_iter,
        converged: history.converged,
        degenerate: history.degenerate,
        best_restart: history.best_restart,
        restart_objectives: history.restart_objectives,
        archetype_error: ErrorSummary::new(&reconstruction_error(&x, &model)?, n, m),
        snapped_indices: snapped,
        snapped_error: ErrorSummary::new(&snapped_err, n, m),
        marker_indices: set.vertex_indices.clone(),
        midline: set.midline.clone(),
        symmetric_error: ErrorSummary::new(&sym_err, n, m),
        pca_bound: PcaBound {
            frobenius_sq: pca,
            rms_mm: rms_mm(pca, n, m),
        },
        marker_set: MARKERS_FILE.into(),
    };
    Ok((set, report))
}

pub fn cmd_learn(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<(), CliError> {
    let ds = load(dataset)?;
    let (set, report) = learn_markers(&ds, &cfg.fit)?;
    ensure_dir(out)?;
    save_marker_set(&set, out.join(MARKERS_FILE), MARKERS_A_FILE)?;
    write_json(&out.join(LEARN_REPORT_FILE), &report)?;
    println!(
        "K = {}: MPVE snapped {:.3} mm, symmetric {:.3} mm ({} sweeps, converged: {})",
        report.k,
        report.snapped_error.mpve_mm,
        report.symmetric_error.mpve_mm,
        report.objective_history.len().saturating_sub(1),
        report.converged
    );
    Ok(())
}

/// One CSV row. Errors are RMS per-vertex distances in mm so the PCA bound is
/// directly comparable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    #[serde(rename = "K")]
    pub k: usize,
    pub learned_err: f64,
    pub random_err_mean: f64,
    pub random_err_std: f64,
    pub pca_bound: f64,
}

pub fn ablate_k(dataset: &MeshDataset, cfg: &RunConfig) -> Result<Vec<AblationRow>, CliError> {
    if cfg.ablation.k_values.is_empty() {
        return Err(CliError::Usage("the K list is empty".into()));
    }
    if cfg.ablation.random_sets == 0 {
        return Err(CliError::Usage("random_sets must be >= 1".into()));
    }
    let x = assemble_data_matrix(dataset);
    let (n, m) = (x.n_samples, x.n_vertices);
    let mut rows = Vec::new();
    for &k in &cfg.ablation.k_values {
        let fit = FitOptions { k, ..cfg.fit.clone() };
        let (_, report) = learn_markers(dataset, &fit)?;
        let random: Vec<f64> = (0..cfg.ablation.random_sets as u64)
            .map(|r| {
                let set = baseline_random_markers(m, k, cfg.seed.wrapping_add(r), &x)?;
                Ok(rms_of(&set.refit_error(&x)?, n, m))
            })
            .collect::<Result<_, CliError>>()?;
        let mean = random.iter().sum::<f64>() / random.len() as f64;
        let std = if random.len() > 1 {
            (random.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (random.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        rows.push(AblationRow {
            k,
            learned_err: report.symmetric_error.rms_mm,
            random_err_mean: mean,
            random_err_std: std,
            pca_bound: report.pca_bound.rms_mm,
        });
    }
    Ok(rows)
}

pub fn format_ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("K,learned_err,random_err_mean,random_err_std,pca_bound\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.k, r.learned_err, r.random_err_mean, r.random_err_std, r.pca_bound
        );
    }
    s
}

pub fn cmd_ablate_k(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<(), CliError> {
    let ds = load(dataset)?;
    let rows = ablate_k(&ds, cfg)?;
    ensure_dir(out)?;
    let csv = format_ablation_csv(&rows);
    write_text(&out.join(ABLATION_FILE), &csv)?;
    print!("{csv}");
    Ok(())
}

/// Reconstructs every estimate, adaptively when an adapter is given.
pub fn reconstruct_all(
    estimates: &[MarkerEstimate],
    set: &MarkerSet,
    adapter: Option<&CoefficientAdapter>,
) -> Result<Vec<MeshSample>, CliError> {
    use rayon::prelude::*;
    Ok(estimates
        .par_iter()
        .map(|e| match adapter {
            Some(ad) => reconstruct_adaptive(&e.p, &e.c, ad),
            None => reconstruct_fixed(&e.p, &set.a_sym),
        })
        .collect::<virtual_markers::Result<_>>()?)
}

fn load_estimates(path: &Path) -> Result<Vec<MarkerEstimate>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| virtual_markers::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("bad estimates file {}: {e}", path.display())))
}

pub fn cmd_recon(cfg: &RunConfig, a: &ReconArgs, out: &Path) -> Result<(), CliError> {
    let ds = load(&a.dataset)?;
    let (set, adapter, set_path) = match (&a.adapter, &a.markers) {
        (Some(ap), mp) => {
            let (adapter, set) =
                load_adapter(ap).context(|| format!("loading adapter {}", ap.display()))?;
            if let Some(mp) = mp {
                let other = load_marker_set(mp).context(|| format!("loading marker set {}", mp.display()))?;
                if other.vertex_indices != set.vertex_indices || other.n_vertices() != set.n_vertices() {
                    return Err(CliError::Usage(format!(
                        "marker set {} (K = {}) differs from the one adapter {} was trained on (K = {})",
                        mp.display(),
                        other.k(),
                        ap.display(),
                        set.k()
                    )));
                }
            }
            (set, Some(adapter), ap.clone())
        }
        (None, Some(mp)) => (
            load_marker_set(mp).context(|| format!("loading marker set {}", mp.display()))?,
            None,
            mp.clone(),
        ),
        (None, None) => return Err(CliError::Usage("recon needs --markers or --adapter".into())),
    };
    if set.n_vertices() != ds.n_vertices() {
        return Err(CliError::Usage(format!(
            "{} covers M = {} vertices but dataset {} has M = {}",
            set_path.display(),
            set.n_vertices(),
            a.dataset.display(),
            ds.n_vertices()
        )));
    }
    let estimates = match a.source {
        EstimateSource::Gt => gt_estimates(&ds, &set),
        EstimateSource::Heatmap => heatmap_estimates(&ds, &set, &cfg.heatmap, cfg.seed)?,
        EstimateSource::File => {
            let p = a
                .estimates
                .as_ref()
                .ok_or_else(|| CliError::Usage("--source file needs --estimates".into()))?;
            let est = load_estimates(p)?;
            if est.len() != ds.n_samples() {
                return Err(CliError::Usage(format!(
                    "{} holds {} estimates, dataset {} has {} samples",
                    p.display(),
                    est.len(),
                    a.dataset.display(),
                    ds.n_samples()
                )));
            }
            if let Some(e) = est.iter().find(|e| e.k() != set.k() || e.c.len() != set.k()) {
                return Err(CliError::Usage(format!(
                    "{} has an estimate with K = {} but {} has K = {}",
                    p.display(),
                    e.k(),
                    set_path.display(),
                    set.k()
                )));
            }
            est
        }
    };
    let keep: Vec<usize> = (0..ds.n_samples()).filter(|&n| a.split.keeps(n)).collect();
    let chosen: Vec<MarkerEstimate> = keep.iter().map(|&n| estimates[n].clone()).collect();
    let gt: Vec<MeshSample> = keep.iter().map(|&n| ds.samples[n].clone()).collect();
    let meshes = reconstruct_all(&chosen, &set, adapter.as_ref())?;
    let report = evaluate_meshes(&meshes, &gt, ds.joint_regressor.as_ref())?;

    let dir = out.join(RECON_DIR);
    ensure_dir(&dir)?;
    for (n, mesh) in keep.iter().zip(&meshes) {
        write_obj(dir.join(format!("sample_{n:05}.obj")), &mesh.vertices, &ds.faces)?;
    }
    if a.source != EstimateSource::File {
        write_json(&out.join(RECON_ESTIMATES_FILE), &estimates)?;
    }
    write_json(&out.join(RECON_REPORT_FILE), &report)?;
    println!(
        "{} reconstruction of {} meshes: MPVE {:.3} mm",
        if adapter.is_some() { "adaptive" } else { "fixed" },
        meshes.len(),
        report.mpve()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub fixed_mpve: f64,
    pub adaptive_mpve: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    #[serde(rename = "K")]
    pub k: usize,
    pub n_vertices: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub train: AdapterTrainConfig,
    pub heatmap: HeatmapConfig,
    pub history: TrainHistory,
    pub train_split: Comparison,
    pub eval_split: Comparison,
    pub adapter: String,
}

fn compare(samples: &[TrainSample], set: &MarkerSet, adapter: &CoefficientAdapter) -> Result<Comparison, CliError> {
    let est: Vec<MarkerEstimate> = samples.iter().map(|s| s.estimate.clone()).collect();
    let gt: Vec<MeshSample> = samples.iter().map(|s| s.mesh.clone()).collect();
    let fixed = evaluate_meshes(&reconstruct_all(&est, set, None)?, &gt, None)?;
    let adaptive = evaluate_meshes(&reconstruct_all(&est, set, Some(adapter))?, &gt, None)?;
    Ok(Comparison {
        fixed_mpve: fixed.mpve(),
        adaptive_mpve: adaptive.mpve(),
    })
}

/// Simulates corrupted estimates, trains on the training split and compares
/// fixed and adaptive MPVE on both splits.
pub fn train_on_dataset(
    dataset: &MeshDataset,
    set: &MarkerSet,
    cfg: &RunConfig,
) -> Result<(CoefficientAdapter, TrainReport), CliError> {
    if set.n_vertices() != dataset.n_vertices() {
        return Err(CliError::Usage(format!(
            "marker set covers M = {} vertices, dataset has M = {}",
            set.n_vertices(),
            dataset.n_vertices()
        )));
    }
    let estimates = heatmap_estimates(dataset, set, &cfg.heatmap, cfg.seed)?;
    let (train, eval) = split_samples(dataset, &estimates);
    if eval.is_empty() || train.is_empty() {
        return Err(CliError::Usage("dataset too small for a train/eval split".into()));
    }
    let (adapter, history) = train_adapter(&train, dataset, &cfg.train, set).map_err(|e| match e {
        virtual_markers::Error::Numerical(_) => CliError::Context {
            context: format!(
                "training diverged at learning rate {}; try a smaller --lr",
                cfg.train.learning_rate
            ),
            source: e,
        },
        e => e.into(),
    })?;
    let report = TrainReport {
        k: set.k(),
        n_vertices: set.n_vertices(),
        n_train: train.len(),
        n_eval: eval.len(),
        train: cfg.train.clone(),
        heatmap: cfg.heatmap.clone(),
        history,
        train_split: compare(&train, set, &adapter)?,
        eval_split: compare(&eval, set, &adapter)?,
        adapter: ADAPTER_FILE.into(),
    };
    Ok((adapter, report))
}

pub fn cmd_train_adapter(cfg: &RunConfig, dataset: &Path, markers: &Path, out: &Path) -> Result<(), CliError> {
    let ds = load(dataset)?;
    let set = load_marker_set(markers).context(|| format!("loading marker set {}", markers.display()))?;
    let (adapter, report) = train_on_dataset(&ds, &set, cfg)?;
    ensure_dir(out)?;
    save_marker_set(&set, out.join(ADAPTER_MARKERS_FILE), ADAPTER_MARKERS_A_FILE)?;
    save_adapter(&adapter, out.join(ADAPTER_FILE), ADAPTER_MARKERS_FILE)?;
    write_json(&out.join(TRAIN_LOG_FILE), &report)?;
    for (e, (loss, lr)) in report.history.epoch_loss.iter().zip(&report.history.learning_rate).enumerate() {
        println!("epoch {:3}: loss {loss:.6} (lr {lr:.2e})", e + 1);
    }
    println!(
        "held-out MPVE: fixed {:.3} mm, adaptive {:.3} mm",
        report.eval_split.fixed_mpve, report.eval_split.adaptive_mpve
    );
    Ok(())
}

/// Predicted meshes from a VMDS file or a directory of OBJ files. OBJ faces
/// must match `faces`.
pub fn load_predictions(path: &Path, faces: &[[usize; 3]]) -> Result<Vec<MeshSample>, CliError> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| virtual_markers::Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("obj")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(CliError::Usage(format!("no OBJ files in {}", path.display())));
        }
        files
            .iter()
            .map(|f| {
                let (v, fc) = read_obj(f)?;
                if fc != faces {
                    return Err(virtual_markers::Error::Topology(format!(
                        "{} has different faces than the ground truth",
                        f.display()
                    ))
                    .into());
                }
                Ok(MeshSample::new(v))
            })
            .collect()
    } else {
        let ds = load(path)?;
        if ds.faces != faces {
            return Err(virtual_markers::Error::Topology(format!(
                "{} has different faces than the ground truth",
                path.display()
            ))
            .into());
        }
        Ok(ds.samples)
    }
}

pub fn evaluate_files(a: &EvalArgs) -> Result<MetricReport, CliError> {
    let gt = load(&a.gt)?;
    let pred = load_predictions(&a.pred, &gt.faces)?;
    if pred.len() != gt.n_samples() {
        return Err(virtual_markers::Error::Topology(format!(
            "{} meshes in {} for {} in {}",
            pred.len(),
            a.pred.display(),
            gt.n_samples(),
            a.gt.display()
        ))
        .into());
    }
    if let Some(p) = pred.iter().find(|p| p.n_vertices() != gt.n_vertices()) {
        return Err(virtual_markers::Error::Topology(format!(
            "predicted mesh with {} vertices, ground truth has {}",
            p.n_vertices(),
            gt.n_vertices()
        ))
        .into());
    }
    let regressor: Option<DMatrix<f64>> = if a.no_joints {
        None
    } else {
        match &a.regressor {
            Some(p) => Some(load_vmat(p).context(|| format!("loading regressor {}", p.display()))?),
            None => gt.joint_regressor.clone(),
        }
    };
    Ok(evaluate_meshes(&pred, &gt.samples, regressor.as_ref())?)
}

pub fn cmd_eval(a: &EvalArgs, out: &Path) -> Result<(), CliError> {
    let report = evaluate_files(a)?;
    ensure_dir(out)?;
    write_json(&out.join(EVAL_REPORT_FILE), &report)?;
    let agg = &report.aggregate;
    let mut line = format!("MPVE {:.3} mm", agg.mpve);
    if let Some(j) = agg.mpjpe {
        let _ = write!(line, ", MPJPE {j:.3} mm");
    }
    if let Some(j) = agg.pa_mpjpe {
        let _ = write!(line, ", PA-MPJPE {j:.3} mm");
    }
    println!("{line}");
    Ok(())
}
