use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tokenmatch::contrastive::{
    read_head, trace_csv, train_head, write_head, LabeledQuery, LabeledTemplate, LossVariant, OptimizerConfig,
    ProjectionHead, TupleDataset, DEFAULT_TAU,
};
use tokenmatch::geometry::{sample_hemisphere, sample_sphere_with_inplane, write_viewpoints, Viewpoint};
use tokenmatch::matcher::{batch_match, encode_results_csv, parse_results_csv, with_threads, MatchParams, QueryRecord, DEFAULT_DELTA};
use tokenmatch::metrics::report::{curve_svg, default_thresholds, evaluate, EvalReport, PoseEvalContext};
use tokenmatch::metrics::{decode_pgm16, parse_ply, DepthMap, TriMesh, VsdParams, VSD_TAU};
use tokenmatch::store::{
    encode_manifest, encode_tmpd, read_grids, read_manifest, GridEntry, ManifestRecord, TemplateDb, TemplateDbBuilder,
    TemplateMeta,
};
use tokenmatch::synthetic::{hemisphere_queries, synthetic_meta, DescriptorModel, MaskShape, SyntheticSpec, SYNTH_CLASS};
use tokenmatch::Error;

#[derive(Parser)]
#[command(name = "tokenmatch", version, about = "Template retrieval over token-grid descriptors")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Global {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Matcher worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Per-token similarity threshold.
    #[arg(long, global = true, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    /// Expected descriptor dimension; checked against inputs when given.
    /// For `train-head` and `synthesize` it sets the output dimension.
    #[arg(long, global = true)]
    descriptor_dim: Option<usize>,
    /// Expected token grid side; checked against inputs when given.
    #[arg(long, global = true)]
    grid_size: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample template viewpoints to a JSON-lines file.
    SampleViews(SampleViews),
    /// Build a template database from descriptor files and manifests.
    BuildDb(BuildDb),
    /// Retrieve the best templates for each query.
    Match(MatchCmd),
    /// Score retrieval and pose accuracy, with plots.
    Evaluate(Evaluate),
    /// Train a projection head with the contrastive objective.
    TrainHead(TrainHead),
    /// Recompute aggregates and plots from a per-query CSV.
    Report(Report),
    /// Write synthetic template or query descriptors.
    Synthesize(Synthesize),
}

#[derive(Clone, Copy, ValueEnum)]
enum ViewMode {
    Hemisphere,
    Sphere,
}

#[derive(Args)]
struct SampleViews {
    #[arg(long, value_enum, default_value = "hemisphere")]
    mode: ViewMode,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    count: u64,
    /// In-plane steps per view (sphere mode).
    #[arg(long, default_value_t = 36, value_parser = clap::value_parser!(u64).range(1..))]
    inplane: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildDb {
    /// Descriptor file; repeat together with `--manifest`.
    #[arg(long = "descriptors", required = true)]
    descriptors: Vec<PathBuf>,
    #[arg(long = "manifest", required = true)]
    manifests: Vec<PathBuf>,
    /// Project descriptors through this head first.
    #[arg(long)]
    head: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    out_manifest: PathBuf,
}

#[derive(Args)]
struct DbArgs {
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    db_manifest: PathBuf,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    query_manifest: Option<PathBuf>,
    /// Project query descriptors through this head first.
    #[arg(long)]
    head: Option<PathBuf>,
}

#[derive(Args)]
struct MatchCmd {
    #[command(flatten)]
    db: DbArgs,
    #[command(flatten)]
    queries: QueryArgs,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    top_k: u64,
    #[arg(long)]
    class_filter: Option<String>,
    /// Divide scores by mask cardinality.
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Evaluate {
    #[command(flatten)]
    db: DbArgs,
    #[command(flatten)]
    queries: QueryArgs,
    /// Match results from `match`; matching is rerun when absent.
    #[arg(long)]
    results: Option<PathBuf>,
    /// Object mesh as CLASS=PATH.ply; repeatable.
    #[arg(long = "mesh")]
    meshes: Vec<String>,
    /// Directory of test depth maps named 000000.pgm, 000001.pgm, ...
    #[arg(long)]
    test_depth_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    /// Misalignment tolerance in meters.
    #[arg(long, default_value_t = VSD_TAU)]
    vsd_tau: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Standard,
    PaperLiteral,
}

#[derive(Args)]
struct TrainHead {
    #[arg(long)]
    train_queries: PathBuf,
    #[arg(long)]
    train_query_manifest: PathBuf,
    #[arg(long)]
    templates: PathBuf,
    #[arg(long)]
    template_manifest: PathBuf,
    /// Starting head; a random head calibrated on the data otherwise.
    #[arg(long)]
    init_head: Option<PathBuf>,
    /// Base learning rate before the batch-size scaling rule.
    #[arg(long, default_value_t = 2.5e-5)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    #[arg(long, value_enum, default_value = "standard")]
    variant: Variant,
    #[arg(long, default_value_t = 0.04)]
    wd_start: f64,
    #[arg(long, default_value_t = 0.4)]
    wd_end: f64,
    /// Same-class templates closer than this (degrees) are never negatives.
    #[arg(long, default_value_t = 30.0)]
    negative_min_angle: f64,
    #[arg(long)]
    out_head: PathBuf,
    #[arg(long)]
    out_trace: PathBuf,
}

#[derive(Args)]
struct Report {
    #[arg(long)]
    per_query: PathBuf,
    #[arg(long, default_value = "Accuracy vs. rotation threshold")]
    title: String,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Templates,
    Queries,
}

#[derive(Args)]
struct Synthesize {
    #[arg(long, value_enum)]
    kind: SynthKind,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    count: u64,
    /// Seed of the descriptor function, shared by templates and queries.
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
    /// Signal subspace dimension (whole space when absent).
    #[arg(long)]
    signal_dim: Option<usize>,
    #[arg(long, default_value_t = 0)]
    nuisance_dim: usize,
    /// Query noise, relative to the signal RMS.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Query domain-gap amplitude.
    #[arg(long, default_value_t = 0.0)]
    nuisance: f64,
    /// Mask disc radius as a fraction of the half-grid; 0 for a full mask.
    #[arg(long, default_value_t = 0.8)]
    mask_radius: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    out_manifest: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn report_error(kind: &str, code: u8, message: &str) -> ExitCode {
    let line = serde_json::json!({ "error": kind, "exit_code": code, "message": message });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            return report_error("usage", 2, &first);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => report_error("usage", 2, &m),
        Err(Failure::Runtime(e)) => report_error(e.kind(), 1, &e.to_string()),
    }
}

fn run(cli: Cli) -> CmdResult {
    let g = cli.global;
    if !(g.delta.is_finite() && (-1.0..=1.0).contains(&g.delta)) {
        return Err(usage(format!("--delta must lie in [-1, 1], got {}", g.delta)));
    }
    if g.descriptor_dim == Some(0) || g.grid_size == Some(0) {
        return Err(usage("--descriptor-dim and --grid-size must be positive"));
    }
    let threads = g.threads;
    let res = with_threads(threads, move || match cli.command {
        Command::SampleViews(a) => sample_views(&g, a),
        Command::BuildDb(a) => build_db(&g, a),
        Command::Match(a) => match_cmd(&g, a),
        Command::Evaluate(a) => evaluate_cmd(&g, a),
        Command::TrainHead(a) => train_head_cmd(&g, a),
        Command::Report(a) => report_cmd(a),
        Command::Synthesize(a) => synthesize(&g, a),
    })?;
    res
}

fn require_file(p: &Path, flag: &str) -> CmdResult {
    if !p.is_file() {
        return Err(usage(format!("{flag} {}: no such file", p.display())));
    }
    Ok(())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, bytes).map_err(|e| Failure::Runtime(Error::Io { path: path.into(), source: e }))
}

fn check_shape(g: &Global, shape: (usize, usize, usize), what: &str) -> CmdResult {
    let (h, w, d) = shape;
    if let Some(s) = g.grid_size {
        if (h, w) != (s, s) {
            return Err(Error::InvalidArgument(format!("{what} grid is {h}x{w}, --grid-size is {s}")).into());
        }
    }
    if let Some(dim) = g.descriptor_dim {
        if d != dim {
            return Err(Error::InvalidArgument(format!("{what} descriptor dim is {d}, --descriptor-dim is {dim}")).into());
        }
    }
    Ok(())
}

fn sample_views(g: &Global, a: SampleViews) -> CmdResult {
    let views = match a.mode {
        ViewMode::Hemisphere => sample_hemisphere(a.count as usize, g.seed)?,
        ViewMode::Sphere => sample_sphere_with_inplane(a.count as usize, a.inplane as usize, g.seed)?,
    };
    let mut out = Vec::new();
    write_viewpoints(&mut out, &views).expect("writing to memory");
    write_file(&a.out, out)
}

fn load_head(p: &Path, flag: &str) -> Result<ProjectionHead, Failure> {
    require_file(p, flag)?;
    Ok(read_head(p)?)
}

fn build_db(g: &Global, a: BuildDb) -> CmdResult {
    if a.descriptors.len() != a.manifests.len() {
        return Err(usage("each --descriptors needs a matching --manifest"));
    }
    for (d, m) in a.descriptors.iter().zip(&a.manifests) {
        require_file(d, "--descriptors")?;
        require_file(m, "--manifest")?;
    }
    let head = a.head.as_deref().map(|p| load_head(p, "--head")).transpose()?;
    let mut builder: Option<TemplateDbBuilder> = None;
    let mut index = 0usize;
    for (d, m) in a.descriptors.iter().zip(&a.manifests) {
        let entries = read_grids(d)?;
        let manifest = read_manifest(m)?;
        if entries.len() != manifest.len() {
            return Err(Error::InvalidArgument(format!(
                "{} holds {} records but {} has {}",
                d.display(),
                entries.len(),
                m.display(),
                manifest.len()
            ))
            .into());
        }
        for (e, r) in entries.into_iter().zip(&manifest) {
            let meta = TemplateMeta::from_manifest(r, index)?;
            let grid = match &head {
                Some(h) => h.project(&e.grid).map_err(|err| Error::InvalidArgument(format!("record {index}: {err}")))?,
                None => e.grid,
            };
            let b = builder.get_or_insert_with(|| {
                let (h, w, dim) = grid.shape();
                TemplateDbBuilder::new(h, w, dim)
            });
            b.push_parts(meta, grid.data(), e.mask.bits())?;
            index += 1;
        }
    }
    let db = builder.ok_or_else(|| usage("no input records"))?.finish()?;
    check_shape(g, db.grid_shape(), "database")?;
    let (tmpd, manifest) = db.encode()?;
    write_file(&a.out, tmpd)?;
    write_file(&a.out_manifest, manifest)
}

fn load_db(g: &Global, a: &DbArgs) -> Result<TemplateDb, Failure> {
    require_file(&a.db, "--db")?;
    require_file(&a.db_manifest, "--db-manifest")?;
    let db = TemplateDb::load(&a.db, &a.db_manifest)?;
    check_shape(g, db.grid_shape(), "database")?;
    Ok(db)
}

fn load_queries(a: &QueryArgs, db: &TemplateDb) -> Result<Vec<QueryRecord>, Failure> {
    require_file(&a.queries, "--queries")?;
    if let Some(m) = &a.query_manifest {
        require_file(m, "--query-manifest")?;
    }
    let head = a.head.as_deref().map(|p| load_head(p, "--head")).transpose()?;
    let entries = read_grids(&a.queries)?;
    let manifest = match &a.query_manifest {
        Some(m) => {
            let r = read_manifest(m)?;
            if r.len() != entries.len() {
                return Err(Error::InvalidArgument(format!(
                    "query file holds {} records but the manifest has {}",
                    entries.len(),
                    r.len()
                ))
                .into());
            }
            r
        }
        None => vec![ManifestRecord::default(); entries.len()],
    };
    let mut out = Vec::with_capacity(entries.len());
    for (i, (e, r)) in entries.into_iter().zip(&manifest).enumerate() {
        let grid = match &head {
            Some(h) => h.project(&e.grid)?,
            None => e.grid,
        };
        if grid.shape() != db.grid_shape() {
            return Err(Error::InvalidArgument(format!(
                "query {i}: grid {:?} does not match database {:?}",
                grid.shape(),
                db.grid_shape()
            ))
            .into());
        }
        out.push(QueryRecord::from_manifest(grid, r, i)?);
    }
    Ok(out)
}

fn match_cmd(g: &Global, a: MatchCmd) -> CmdResult {
    let db = load_db(g, &a.db)?;
    let queries = load_queries(&a.queries, &db)?;
    let params = MatchParams {
        top_k: a.top_k as usize,
        delta: g.delta,
        class_filter: a.class_filter,
        normalize_by_mask: a.normalize,
    };
    let results = batch_match(&queries, &db, &params)?;
    write_file(&a.out, encode_results_csv(&results)?)
}

fn parse_meshes(specs: &[String]) -> Result<HashMap<String, TriMesh>, Failure> {
    let mut out = HashMap::new();
    for s in specs {
        let (class, path) = s
            .split_once('=')
            .ok_or_else(|| usage(format!("--mesh expects CLASS=PATH, got {s:?}")))?;
        let path = Path::new(path);
        require_file(path, "--mesh")?;
        let text = fs::read_to_string(path).map_err(|e| Failure::Runtime(Error::Io { path: path.into(), source: e }))?;
        let mesh = parse_ply(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
        out.insert(class.to_string(), mesh);
    }
    Ok(out)
}

fn write_report(report: &EvalReport, title: &str, dir: &Path, with_rows: bool) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(Error::Io { path: dir.into(), source: e }))?;
    if with_rows {
        write_file(&dir.join("per_query.csv"), report.to_csv()?)?;
    }
    write_file(&dir.join("aggregates.json"), report.aggregates_json() + "\n")?;
    let thresholds = default_thresholds();
    let curves = report.curves_by_class(&thresholds);
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = std::iter::once("threshold_deg".to_string())
        .chain(curves.iter().map(|(k, _)| k.clone()))
        .collect();
    let csv_err = |e: csv::Error| Failure::Runtime(Error::InvalidArgument(format!("csv: {e}")));
    w.write_record(&header).map_err(csv_err)?;
    for (i, t) in thresholds.iter().enumerate() {
        let row: Vec<String> = std::iter::once(t.to_string())
            .chain(curves.iter().map(|(_, c)| c[i].1.to_string()))
            .collect();
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::Runtime(Error::InvalidArgument(format!("csv: {e}"))))?;
    write_file(&dir.join("curve.csv"), bytes)?;
    write_file(&dir.join("curve.svg"), curve_svg(title, &curves))
}

fn evaluate_cmd(g: &Global, a: Evaluate) -> CmdResult {
    if !(a.vsd_tau > 0.0 && a.vsd_tau.is_finite()) {
        return Err(usage("--vsd-tau must be positive"));
    }
    if a.width == 0 || a.height == 0 {
        return Err(usage("--width and --height must be positive"));
    }
    let db = load_db(g, &a.db)?;
    let queries = load_queries(&a.queries, &db)?;
    let meshes = parse_meshes(&a.meshes)?;
    let results = match &a.results {
        Some(p) => {
            require_file(p, "--results")?;
            let text = fs::read_to_string(p).map_err(|e| Failure::Runtime(Error::Io { path: p.clone(), source: e }))?;
            let r = parse_results_csv(&text, queries.len(), g.delta)?;
            if let Some((i, _)) = r.iter().enumerate().find(|(_, r)| r.hits.iter().any(|h| h.template >= db.len())) {
                return Err(Error::InvalidArgument(format!("results for query {i} name a template outside the database")).into());
            }
            r
        }
        None => batch_match(&queries, &db, &MatchParams { delta: g.delta, ..Default::default() })?,
    };
    let depths: Option<Vec<DepthMap>> = match &a.test_depth_dir {
        Some(dir) => Some(
            (0..queries.len())
                .map(|i| {
                    let p = dir.join(format!("{i:06}.pgm"));
                    require_file(&p, "--test-depth-dir")?;
                    let bytes = fs::read(&p).map_err(|e| Failure::Runtime(Error::Io { path: p.clone(), source: e }))?;
                    Ok(decode_pgm16(&bytes)?)
                })
                .collect::<Result<_, Failure>>()?,
        ),
        None => None,
    };
    let ctx = PoseEvalContext {
        db: &db,
        meshes: &meshes,
        test_depths: depths.as_deref(),
        width: a.width,
        height: a.height,
        vsd: VsdParams {
            tau: a.vsd_tau,
            occlusion_tol: a.vsd_tau,
        },
    };
    let report = evaluate(&queries, &results, &ctx)?;
    write_report(&report, "Accuracy vs. rotation threshold", &a.out_dir, true)
}

fn report_cmd(a: Report) -> CmdResult {
    require_file(&a.per_query, "--per-query")?;
    let text = fs::read_to_string(&a.per_query).map_err(|e| Failure::Runtime(Error::Io { path: a.per_query.clone(), source: e }))?;
    let report = EvalReport::from_rows(EvalReport::rows_from_csv(&text)?)?;
    write_report(&report, &a.title, &a.out_dir, false)
}

fn labeled(entries: Vec<GridEntry>, manifest: &[ManifestRecord], what: &str) -> Result<Vec<(GridEntry, String, Viewpoint)>, Failure> {
    if entries.len() != manifest.len() {
        return Err(Error::InvalidArgument(format!(
            "{what}: {} descriptor records but {} manifest lines",
            entries.len(),
            manifest.len()
        ))
        .into());
    }
    entries
        .into_iter()
        .zip(manifest)
        .enumerate()
        .map(|(i, (e, r))| {
            let class = r
                .class_id
                .clone()
                .ok_or_else(|| Error::InvalidArgument(format!("{what} record {i}: missing field `class_id`")))?;
            let v = r
                .viewpoint()
                .map_err(|err| Error::InvalidArgument(format!("{what} record {i}: {err}")))?
                .ok_or_else(|| Error::InvalidArgument(format!("{what} record {i}: missing field `azimuth`")))?;
            Ok((e, class, v))
        })
        .collect()
}

fn train_head_cmd(g: &Global, a: TrainHead) -> CmdResult {
    for (p, f) in [
        (&a.train_queries, "--train-queries"),
        (&a.train_query_manifest, "--train-query-manifest"),
        (&a.templates, "--templates"),
        (&a.template_manifest, "--template-manifest"),
    ] {
        require_file(p, f)?;
    }
    if a.batch_size < 2 {
        return Err(usage("--batch-size must be at least 2"));
    }
    let queries = labeled(read_grids(&a.train_queries)?, &read_manifest(&a.train_query_manifest)?, "query")?;
    let templates = labeled(read_grids(&a.templates)?, &read_manifest(&a.template_manifest)?, "template")?;
    if let Some(s) = g.grid_size {
        if let Some((e, _, _)) = templates.first() {
            let (h, w, _) = e.grid.shape();
            if (h, w) != (s, s) {
                return Err(Error::InvalidArgument(format!("template grid is {h}x{w}, --grid-size is {s}")).into());
            }
        }
    }
    let dataset = TupleDataset::new(
        queries
            .into_iter()
            .map(|(e, class_id, viewpoint)| LabeledQuery {
                grid: e.grid,
                class_id,
                viewpoint,
            })
            .collect(),
        templates
            .into_iter()
            .map(|(e, class_id, viewpoint)| LabeledTemplate {
                grid: e.grid,
                mask: e.mask,
                class_id,
                viewpoint,
            })
            .collect(),
        a.negative_min_angle,
    )?;
    let dim_in = dataset.templates()[0].grid.dim();
    let head = match &a.init_head {
        Some(p) => load_head(p, "--init-head")?,
        None => {
            let mut h = ProjectionHead::random(dim_in, g.descriptor_dim.unwrap_or(32), g.seed)?;
            h.calibrate(&dataset.all_grids())?;
            h
        }
    };
    if let Some(d) = g.descriptor_dim {
        if head.dim_out() != d {
            return Err(Error::InvalidArgument(format!("head output dim {} differs from --descriptor-dim {d}", head.dim_out())).into());
        }
    }
    let cfg = OptimizerConfig {
        base_lr: a.lr,
        batch_size: a.batch_size,
        weight_decay_start: a.wd_start,
        weight_decay_end: a.wd_end,
        epochs: a.epochs,
        max_steps: a.max_steps,
        tau: a.tau,
        variant: match a.variant {
            Variant::Standard => LossVariant::StandardInfoNce,
            Variant::PaperLiteral => LossVariant::PaperLiteral,
        },
        ..Default::default()
    };
    let out = train_head(&dataset, head, &cfg, g.seed)?;
    write_head(&a.out_head, &out.head)?;
    write_file(&a.out_trace, trace_csv(&out.trace)?)
}

fn synthesize(g: &Global, a: Synthesize) -> CmdResult {
    let mask = if a.mask_radius == 0.0 {
        MaskShape::Full
    } else if a.mask_radius > 0.0 {
        MaskShape::Disc { radius: a.mask_radius }
    } else {
        return Err(usage("--mask-radius must be non-negative"));
    };
    let model = DescriptorModel::new(SyntheticSpec {
        grid: g.grid_size.unwrap_or(14),
        dim: g.descriptor_dim.unwrap_or(32),
        signal_dim: a.signal_dim,
        nuisance_dim: a.nuisance_dim,
        mask,
        seed: a.model_seed,
    })?;
    let n = a.count as usize;
    let (entries, manifest): (Vec<GridEntry>, Vec<ManifestRecord>) = match a.kind {
        SynthKind::Templates => sample_hemisphere(n, g.seed)?
            .into_iter()
            .map(|v| {
                (
                    GridEntry::new(model.template_grid(&v), model.mask().clone()).expect("mask matches grid"),
                    synthetic_meta(SYNTH_CLASS, v).to_manifest(),
                )
            })
            .unzip(),
        SynthKind::Queries => hemisphere_queries(&model, n, a.noise, a.nuisance, g.seed)
            .into_iter()
            .map(|q| {
                let r = q.to_manifest();
                (GridEntry::unmasked(q.grid), r)
            })
            .unzip(),
    };
    write_file(&a.out, encode_tmpd(&entries)?)?;
    write_file(&a.out_manifest, encode_manifest(&manifest))
}
