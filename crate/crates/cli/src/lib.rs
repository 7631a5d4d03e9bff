//! Command-line driver: `synth → consensus → lift → render → eval`, plus a
//! `pipeline` subcommand chaining all stages.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 when no view
//! survives consensus.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use pq_core::consensus::{run_consensus, ConsensusConfig, ConsensusReport, ConsensusView};
use pq_core::eval::{aggregate_by_type_with, MetricsTable, QueryRecord, QueryType};
use pq_core::field::{query_mask, train, IdentityField, Supervision, TrainConfig};
use pq_core::io::{self, Dataset, MaskSet, QueryMeta};
use pq_core::synth::{fixture_proposals, generate_scene, CorruptionSpec, SceneSpec};
use pq_core::{BinaryMask, MaskSequence};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NO_EVIDENCE: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] pq_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(pq_core::Error::NoReliableEvidence) => EXIT_NO_EVIDENCE,
            CliError::Core(_) => EXIT_DATA,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "pq", version, about = "Query-time 4D grounding on dynamic point-Gaussian scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with analytic ground truth
    Synth(SynthArgs),
    /// Run multi-view consensus over the proposals of a dataset
    Consensus(ConsensusArgs),
    /// Train an identity field on the reliable proposals
    Lift(LiftArgs),
    /// Render a query mask for one view and frame
    Render(RenderArgs),
    /// Score prediction masks against ground truth
    Eval(EvalArgs),
    /// synth, consensus, lift, render and eval in one go
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    /// Scene description (JSON); the two-spheres fixture when omitted
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Ring views of the default fixture
    #[arg(long, default_value_t = 8)]
    pub views: usize,
    /// Corruption description (JSON); the standard corruption when omitted
    #[arg(long)]
    pub corruption: Option<PathBuf>,
    /// Use the ground-truth masks as proposals
    #[arg(long)]
    pub clean: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConsensusFlags {
    #[arg(long, default_value_t = 0.3)]
    pub delta: f64,
    #[arg(long, default_value_t = 0.5)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0.3)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.6)]
    pub visibility: f64,
    #[arg(long, default_value_t = 0.01)]
    pub occlusion_tol: f64,
    /// Sub-pixel samples per axis when transferring masks
    #[arg(long, default_value_t = 3)]
    pub supersample: usize,
}

impl ConsensusFlags {
    pub fn config(&self) -> ConsensusConfig {
        ConsensusConfig {
            delta: self.delta,
            epsilon: self.epsilon,
            tau: self.tau,
            visibility_min: self.visibility,
            occlusion_tol: self.occlusion_tol,
            supersample: self.supersample,
            ..ConsensusConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct ConsensusArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub flags: ConsensusFlags,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda2d: f64,
    #[arg(long, default_value_t = 2.0)]
    pub lambda3d: f64,
    #[arg(long, default_value_t = 1000)]
    pub m: usize,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
}

impl TrainFlags {
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations: self.iters,
            learning_rate: self.lr,
            lambda_2d: self.lambda2d,
            lambda_3d: self.lambda3d,
            m: self.m,
            k: self.k,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct LiftArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Consensus report selecting the reliable views
    #[arg(long, required_unless_present = "all_proposals")]
    pub report: Option<PathBuf>,
    /// Train on every view's proposals, ignoring consensus
    #[arg(long)]
    pub all_proposals: bool,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-iteration loss trace (CSV)
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long)]
    pub view: usize,
    #[arg(long)]
    pub frame: usize,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Minimum IoU for a frame to count as a valid intersection
    #[arg(long, default_value_t = 0.0)]
    pub min_iou: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub consensus: ConsensusFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Seeds the scene, the corruption and the training run
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Supervise with every proposal instead of the consensus survivors
    #[arg(long)]
    pub no_consensus: bool,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `argv` (including the program name), runs the command and maps
/// the outcome to an exit code. Diagnostics go to stderr.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Honors `PQ_THREADS` (0 or unset: rayon's default).
fn configure_threads() {
    let threads = std::env::var("PQ_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    if threads > 0 {
        // a pool may already exist when called repeatedly in-process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
}

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Synth(a) => synth_cmd(&a),
        Command::Consensus(a) => consensus_cmd(&a),
        Command::Lift(a) => lift_cmd(&a),
        Command::Render(a) => render_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Pipeline(a) => pipeline_cmd(&a),
    }
}

/// Builds the dataset described by `args`.
pub fn build_dataset(args: &SceneArgs, seed: u64) -> CliResult<Dataset> {
    let spec = match &args.spec {
        Some(path) => io::read_document::<SceneSpec>(path)?,
        None => SceneSpec::two_spheres(args.views, seed),
    };
    let synth = generate_scene(&spec)?;
    let views = synth.ring_views();
    let proposals: Vec<MaskSequence> = if args.clean {
        (0..views).map(|v| synth.target_gt(v).clone()).collect()
    } else {
        let cspec = match &args.corruption {
            Some(path) => io::read_document::<CorruptionSpec>(path)?,
            None => CorruptionSpec::standard(views, seed),
        };
        fixture_proposals(&synth, &cspec)?
    };
    let query = QueryMeta {
        id: "q0".into(),
        query_type: QueryType::Action,
        prompt: "the sphere that moves".into(),
    };
    Ok(Dataset::from_synthetic(&synth, &proposals, vec![query])?)
}

fn synth_cmd(a: &SynthArgs) -> CliResult<()> {
    let data = build_dataset(&a.scene, a.seed)?;
    io::save_dataset(&a.out, &data)?;
    println!(
        "wrote {} views x {} frames to {}",
        data.views.len(),
        data.manifest.frames,
        a.out.display()
    );
    Ok(())
}

/// Runs consensus over the ring views that carry proposals.
pub fn consensus_on(data: &Dataset, cfg: &ConsensusConfig) -> CliResult<ConsensusReport> {
    let views: Vec<ConsensusView<'_>> = data
        .ring_views()
        .filter_map(|v| {
            v.proposals.as_ref().map(|masks| ConsensusView {
                masks,
                depths: &v.depths,
                camera: &v.camera,
            })
        })
        .collect();
    Ok(run_consensus(&views, cfg)?)
}

fn consensus_cmd(a: &ConsensusArgs) -> CliResult<()> {
    let data = io::load_dataset(&a.data)?;
    let report = consensus_on(&data, &a.flags.config())?;
    io::save_report(&a.report, &report)?;
    println!("reliable views: {:?}", report.reliable_views());
    Ok(())
}

/// Supervision from the reliable views of `report`, or from every view with
/// proposals when `report` is `None`.
pub fn supervision(data: &Dataset, report: Option<&ConsensusReport>) -> CliResult<Vec<Supervision>> {
    let keep = report.map(ConsensusReport::reliable_views);
    let sup: Vec<Supervision> = data
        .ring_views()
        .filter(|v| keep.as_ref().is_none_or(|k| k.contains(&v.id)))
        .filter_map(|v| {
            v.proposals.as_ref().map(|masks| Supervision {
                camera: v.camera.clone(),
                masks: masks.clone(),
            })
        })
        .collect();
    if sup.is_empty() {
        return Err(pq_core::Error::NoReliableEvidence.into());
    }
    Ok(sup)
}

fn lift_cmd(a: &LiftArgs) -> CliResult<()> {
    let data = io::load_dataset(&a.data)?;
    let report = match (&a.report, a.all_proposals) {
        (_, true) => None,
        (Some(path), false) => Some(io::load_report(path)?),
        (None, false) => return Err(CliError::Usage("lift needs --report or --all-proposals".into())),
    };
    if let Some(r) = &report {
        let stale = r.inconsistencies();
        if !stale.is_empty() {
            log::warn!("report verdicts disagree with its own evidence for views {stale:?}");
        }
    }
    let sup = supervision(&data, report.as_ref())?;
    let (field, trace) = train(&data.scene, &sup, &a.train.config(a.seed))?;
    io::save_field(&a.out, &field)?;
    if let Some(path) = &a.trace {
        io::write_trace(path, &trace)?;
    }
    if let Some((head, tail)) = trace.head_tail_means(50) {
        println!("trained on {} views; loss {head:.4} -> {tail:.4}", sup.len());
    }
    Ok(())
}

fn render_cmd(a: &RenderArgs) -> CliResult<()> {
    let data = io::load_dataset(&a.data)?;
    let field = io::load_field(&a.field)?;
    let view = data
        .view(a.view)
        .ok_or_else(|| CliError::Usage(format!("no view {} in the dataset", a.view)))?;
    let t = data.scene.time_of(a.frame)?;
    let mask = query_mask(&data.scene, &field, &view.camera, t, a.threshold)?;
    io::write_pgm(&a.out, &mask)?;
    println!("{} foreground pixels", mask.count());
    Ok(())
}

/// Pairs prediction and ground-truth sets by `(query, view)`.
pub fn records(pred: &[MaskSet], gt: &[MaskSet]) -> CliResult<Vec<QueryRecord>> {
    gt.iter()
        .map(|g| {
            let p = pred
                .iter()
                .find(|p| p.query == g.query && p.view == g.view)
                .ok_or_else(|| CliError::Usage(format!("no prediction for query {} in view {}", g.query, g.view)))?;
            let id = format!("{}@v{:02}", g.query, g.view);
            let valid = g.valid_frames.clone().unwrap_or_else(|| (0..g.masks.len()).collect());
            Ok(QueryRecord::new(id, g.query_type, p.masks.clone(), g.masks.clone(), valid)?)
        })
        .collect()
}

fn eval_cmd(a: &EvalArgs) -> CliResult<()> {
    let pred = io::load_mask_dir(&a.pred)?;
    let gt = io::load_mask_dir(&a.gt)?;
    let table = aggregate_by_type_with(&records(&pred, &gt)?, a.min_iou)?;
    io::save_metrics(&a.out, &table)?;
    print_table(&table);
    Ok(())
}

fn print_table(table: &MetricsTable) {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    for row in table.rows.iter().chain(std::iter::once(&table.overall)) {
        println!("{:<12} queries {:>2}  mAcc {}  mIoU {}", row.group, row.queries, fmt(row.macc), fmt(row.miou));
    }
}

/// Renders every query in every held-out view across all frames.
pub fn render_heldout(data: &Dataset, field: &IdentityField, threshold: f64) -> CliResult<Vec<MaskSet>> {
    let mut sets = Vec::new();
    for view in data.heldout_views() {
        let masks: Vec<BinaryMask> = data
            .scene
            .timestamps()
            .iter()
            .map(|&t| query_mask(&data.scene, field, &view.camera, t, threshold))
            .collect::<pq_core::Result<_>>()?;
        for q in &data.manifest.queries {
            sets.push(MaskSet {
                query: q.id.clone(),
                query_type: q.query_type,
                view: view.id,
                masks: masks.clone(),
                valid_frames: None,
            });
        }
    }
    Ok(sets)
}

/// Ground-truth sets of the held-out views.
pub fn heldout_gt(data: &Dataset) -> Vec<MaskSet> {
    data.heldout_views()
        .filter_map(|v| v.gt.as_ref().map(|gt| (v.id, gt)))
        .flat_map(|(id, gt)| {
            data.manifest.queries.iter().map(move |q| MaskSet {
                query: q.id.clone(),
                query_type: q.query_type,
                view: id,
                masks: gt.masks.clone(),
                valid_frames: None,
            })
        })
        .collect()
}

/// Output locations of a pipeline run under its root directory.
pub struct PipelinePaths {
    pub data: PathBuf,
    pub report: PathBuf,
    pub field: PathBuf,
    pub trace: PathBuf,
    pub pred: PathBuf,
    pub gt: PathBuf,
    pub metrics: PathBuf,
}

impl PipelinePaths {
    pub fn under(root: &Path) -> Self {
        Self {
            data: root.join("data"),
            report: root.join("report.json"),
            field: root.join("field.json"),
            trace: root.join("trace.csv"),
            pred: root.join("pred"),
            gt: root.join("gt"),
            metrics: root.join("metrics.json"),
        }
    }
}

fn pipeline_cmd(a: &PipelineArgs) -> CliResult<()> {
    let paths = PipelinePaths::under(&a.out);
    let data = build_dataset(&a.scene, a.seed)?;
    io::save_dataset(&paths.data, &data)?;
    info!("dataset written to {}", paths.data.display());

    let report = consensus_on(&data, &a.consensus.config())?;
    io::save_report(&paths.report, &report)?;
    println!("reliable views: {:?}", report.reliable_views());

    let sup = supervision(&data, (!a.no_consensus).then_some(&report))?;
    let (field, trace) = train(&data.scene, &sup, &a.train.config(a.seed))?;
    io::save_field(&paths.field, &field)?;
    io::write_trace(&paths.trace, &trace)?;

    let pred = render_heldout(&data, &field, a.threshold)?;
    let gt = heldout_gt(&data);
    io::save_mask_dir(&paths.pred, &pred)?;
    io::save_mask_dir(&paths.gt, &gt)?;
    let table = aggregate_by_type_with(&records(&pred, &gt)?, 0.0)?;
    io::save_metrics(&paths.metrics, &table)?;
    print_table(&table);
    Ok(())
}
