use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crpcl::config::RunConfig;
use crpcl::crp::{AssignmentDecision, CrpState, ModalityCluster};
use crpcl::embedding::{
    generate_synthetic_stream, load_prompt_embeddings, task_embedding, EmbeddingSource, StreamStats, TaskEmbedding,
};
use crpcl::eval::{self, PartitionScore, TaskOrder};
use crpcl::similarity::SimilarityModel;
use crpcl::toy::{dump_tasks, generate_toy_stream, load_task_dump, ToyTask};
use crpcl::trainer::{learner_for, ContinualLearner, RunSummary};
use crpcl::{Error, Result};

#[derive(Parser)]
#[command(
    name = "crpcl",
    version,
    about = "CRP task discovery and structure-aware continual learning"
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Label used in experiment file names instead of the current time.
    #[arg(long, global = true)]
    stamp: Option<String>,
    /// Config override as dotted.key=value; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic stream: prompts.jsonl, stream.json and tasks/.
    GenStream,
    /// Clusters tasks without training.
    Discover {
        /// JSONL prompt embeddings; the synthetic stream is used otherwise.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Runs the continual learner and writes summary.json, ledger.csv and state.json.
    Train {
        /// Task dump directory; the synthetic toy stream is used otherwise.
        #[arg(long)]
        tasks: Option<PathBuf>,
        /// Continue from <out>/state.json.
        #[arg(long)]
        resume: bool,
    },
    /// Prints a summary.json as a table.
    #[command(alias = "report")]
    Evaluate {
        /// Defaults to <out>/summary.json.
        summary: Option<PathBuf>,
    },
    /// Module ablation over seeds.
    Ablate,
    /// Task-order sensitivity over seeds.
    Orders,
    /// Fisher-weighted merges of every cluster pair.
    Merge,
    /// Misassignment rate against the Chernoff bound.
    Prop1,
    /// Discovered K for each configured α.
    SweepAlpha,
    /// Within-cluster forgetting for each configured λ on a single-cluster stream.
    SweepLambda,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let config = RunConfig::load(cli.config.as_deref(), &overrides)?;
    if let Command::Evaluate { summary } = &cli.command {
        let path = summary.clone().unwrap_or_else(|| cli.out.join("summary.json"));
        return report(&path);
    }
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    let stamp = cli.stamp.clone().unwrap_or_else(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs().to_string())
            .unwrap_or_else(|_| "0".into())
    });
    let out = cli.out.as_path();
    match &cli.command {
        Command::GenStream => gen_stream(&config, out),
        Command::Discover { embeddings } => discover(&config, embeddings.as_deref(), out),
        Command::Train { tasks, resume } => train(&config, tasks.as_deref(), *resume, out),
        Command::Evaluate { .. } => unreachable!("handled above"),
        Command::Ablate => ablate(&config, out, &stamp),
        Command::Orders => orders(&config, out, &stamp),
        Command::Merge => merge(&config, out, &stamp),
        Command::Prop1 => prop1(&config, out, &stamp),
        Command::SweepAlpha => sweep_alpha(&config, out, &stamp),
        Command::SweepLambda => sweep_lambda(&config, out, &stamp),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value).expect("outputs serialize");
    std::fs::write(path, body + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct StreamTask<'a> {
    task_id: &'a str,
    true_cluster: usize,
}

#[derive(Serialize)]
struct StreamFile<'a> {
    spec: &'a crpcl::SyntheticStreamSpec,
    stats: &'a StreamStats,
    tasks: Vec<StreamTask<'a>>,
}

#[derive(Serialize)]
struct PromptLine<'a> {
    task_id: &'a str,
    prompt_id: &'a str,
    vector: &'a [f64],
}

fn gen_stream(config: &RunConfig, out: &Path) -> Result<()> {
    let stream = generate_synthetic_stream(&config.stream)?;
    let toy = generate_toy_stream(&config.stream, &config.world)?;
    let prompts_path = out.join("prompts.jsonl");
    let mut body = String::new();
    for t in &stream.tasks {
        for p in &t.prompts {
            let line = PromptLine {
                task_id: &t.task_id,
                prompt_id: &p.prompt_id,
                vector: &p.vector,
            };
            body += &serde_json::to_string(&line).expect("prompt lines serialize");
            body.push('\n');
        }
    }
    std::fs::write(&prompts_path, body).map_err(|e| Error::io(&prompts_path, e))?;
    write_json(
        &out.join("stream.json"),
        &StreamFile {
            spec: &config.stream,
            stats: &stream.stats,
            tasks: stream
                .tasks
                .iter()
                .map(|t| StreamTask {
                    task_id: &t.task_id,
                    true_cluster: t.true_cluster,
                })
                .collect(),
        },
    )?;
    dump_tasks(&toy.tasks, &out.join("tasks"))?;
    println!(
        "{} tasks in {} true clusters written to {}",
        stream.tasks.len(),
        config.stream.true_cluster_count,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct DiscoveryReport {
    discovered_k: usize,
    alpha: f64,
    clusters: Vec<ModalityCluster>,
    similarity_model: SimilarityModel,
    trace: Vec<AssignmentDecision>,
    /// Present when true labels are known (synthetic streams).
    partition: Option<PartitionScore>,
}

fn discover(config: &RunConfig, embeddings: Option<&Path>, out: &Path) -> Result<()> {
    let (tasks, truth): (Vec<TaskEmbedding>, Option<Vec<usize>>) = match embeddings {
        Some(path) => {
            let groups = load_prompt_embeddings(path)?;
            let tasks = groups
                .into_iter()
                .map(|(id, prompts)| task_embedding(id, &prompts, EmbeddingSource::File))
                .collect::<Result<Vec<_>>>()?;
            (tasks, None)
        }
        None => {
            let stream = generate_synthetic_stream(&config.stream)?;
            let truth = stream.tasks.iter().map(|t| t.true_cluster).collect();
            (stream.tasks.into_iter().map(|t| t.embedding).collect(), Some(truth))
        }
    };
    let mut crp = CrpState::new(
        config.train.alpha,
        SimilarityModel::new(config.train.sigma_min, config.train.epsilon),
    );
    for e in &tasks {
        crp.assign(e)?;
    }
    let partition = match (&truth, tasks.is_empty()) {
        (Some(t), false) => Some(eval::score_partition(&crp.labels(), t)?),
        _ => None,
    };
    let report = DiscoveryReport {
        discovered_k: crp.discovered_k(),
        alpha: crp.alpha,
        clusters: crp.clusters.clone(),
        similarity_model: crp.similarity_model.clone(),
        trace: crp.trace.clone(),
        partition,
    };
    write_json(&out.join("discovery.json"), &report)?;
    println!("Discovered K: {}", report.discovered_k);
    if let Some(p) = &report.partition {
        println!("Exact match: {}  Rand index: {:.4}", p.exact_match, p.rand_index);
    }
    for c in &report.clusters {
        println!("  {}: {}", c.cluster_id, c.member_task_ids.join(", "));
    }
    Ok(())
}

#[derive(Serialize)]
struct LedgerRow<'a> {
    task_id: &'a str,
    checkpoint_index: usize,
    dice: f64,
}

fn train(config: &RunConfig, dump: Option<&Path>, resume: bool, out: &Path) -> Result<()> {
    let tasks: Vec<ToyTask> = match dump {
        Some(dir) => load_task_dump(dir)?,
        None => generate_toy_stream(&config.stream, &config.world)?.tasks,
    };
    let state_path = out.join("state.json");
    let mut learner = if resume {
        let body = std::fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
        let learner: ContinualLearner = serde_json::from_str(&body).map_err(|e| Error::Json {
            path: state_path.clone(),
            source: e,
        })?;
        if learner.config != config.train {
            log::warn!("resuming with the checkpoint's training config; the current one is ignored");
        }
        learner
    } else {
        learner_for(&tasks, &config.train)?
    };
    let already = learner.ledger.len();
    learner.run(&tasks)?;
    write_json(&state_path, &learner)?;

    let ledger_path = out.join("ledger.csv");
    let mut writer = csv::Writer::from_path(&ledger_path).map_err(|e| Error::io(&ledger_path, e.into()))?;
    for (c, row) in learner.ledger.dice.iter().enumerate() {
        for (i, &dice) in row.iter().enumerate() {
            writer
                .serialize(LedgerRow {
                    task_id: &learner.ledger.task_ids[i],
                    checkpoint_index: c,
                    dice,
                })
                .map_err(|e| Error::io(&ledger_path, e.into()))?;
        }
    }
    writer.flush().map_err(|e| Error::io(&ledger_path, e))?;

    let summary = learner.summary()?;
    write_json(&out.join("summary.json"), &summary)?;
    // Wall-clock numbers vary between runs, so they live apart from the
    // deterministic outputs.
    let timing: Vec<(String, f64)> = learner.ledger.task_ids[already..]
        .iter()
        .cloned()
        .zip(learner.ledger.wall_clock_secs.iter().copied())
        .collect();
    write_json(&out.join("timing.json"), &timing)?;
    print!("{}", summary.render());
    Ok(())
}

fn report(path: &Path) -> Result<()> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let summary: RunSummary = serde_json::from_str(&body).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut stdout = std::io::stdout().lock();
    stdout
        .write_all(summary.render().as_bytes())
        .map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn print_medians(rows: &[eval::MedianRow]) {
    println!(
        "{:<16}  {:>4}  {:>10}  {:>10}",
        "label", "runs", "avg_dice", "forgetting"
    );
    for m in rows {
        println!(
            "{:<16}  {:>4}  {:>10.4}  {:>+10.4}",
            m.label, m.runs, m.median_avg_dice, m.median_forgetting
        );
    }
}

#[derive(Serialize)]
struct MedianSummary {
    seeds: u64,
    medians: Vec<eval::MedianRow>,
    discovered_k: Vec<usize>,
}

fn median_summary(config: &RunConfig, rows: &[eval::RunRow]) -> MedianSummary {
    let mut ks: Vec<usize> = rows.iter().map(|r| r.discovered_k).collect();
    ks.sort_unstable();
    ks.dedup();
    MedianSummary {
        seeds: config.experiments.seeds,
        medians: eval::medians(rows),
        discovered_k: ks,
    }
}

fn ablate(config: &RunConfig, out: &Path, stamp: &str) -> Result<()> {
    let rows = eval::run_ablation(
        &config.stream,
        &config.world,
        &config.train,
        &config.experiments.seed_list(),
    )?;
    let summary = median_summary(config, &rows);
    eval::write_experiment(out, "ablation", stamp, &rows, &summary)?;
    print_medians(&summary.medians);
    Ok(())
}

fn orders(config: &RunConfig, out: &Path, stamp: &str) -> Result<()> {
    let rows = eval::run_order_sensitivity(
        &config.stream,
        &config.world,
        &config.train,
        &config.experiments.seed_list(),
        &TaskOrder::ALL,
    )?;
    let summary = median_summary(config, &rows);
    eval::write_experiment(out, "orders", stamp, &rows, &summary)?;
    print_medians(&summary.medians);
    println!("discovered K across runs: {:?}", summary.discovered_k);
    Ok(())
}

fn sweep_lambda(config: &RunConfig, out: &Path, stamp: &str) -> Result<()> {
    let single = crpcl::SyntheticStreamSpec {
        true_cluster_count: 1,
        tasks_per_cluster: vec![3],
        ..config.stream.clone()
    };
    let rows = eval::run_lambda_sweep(
        &single,
        &config.world,
        &config.train,
        &config.experiments.seed_list(),
        &config.experiments.lambdas,
    )?;
    let summary = median_summary(config, &rows);
    eval::write_experiment(out, "lambda", stamp, &rows, &summary)?;
    print_medians(&summary.medians);
    Ok(())
}

#[derive(Serialize)]
struct MergeSummary {
    cross_pairs: usize,
    cross_negative: usize,
    cross_negative_fraction: f64,
    self_pairs: usize,
    max_self_abs_delta: f64,
}

fn merge(config: &RunConfig, out: &Path, stamp: &str) -> Result<()> {
    let rows = eval::run_merge_experiment(
        &config.stream,
        &config.world,
        &config.train,
        &config.experiments.seed_list(),
        config.experiments.readapt_epochs,
    )?;
    let cross: Vec<_> = rows.iter().filter(|r| r.cluster_i != r.cluster_j).collect();
    let negative = cross.iter().filter(|r| r.delta < 0.0).count();
    let selfs: Vec<_> = rows.iter().filter(|r| r.cluster_i == r.cluster_j).collect();
    let summary = MergeSummary {
        cross_pairs: cross.len(),
        cross_negative: negative,
        cross_negative_fraction: if cross.is_empty() {
            0.0
        } else {
            negative as f64 / cross.len() as f64
        },
        self_pairs: selfs.len(),
        max_self_abs_delta: selfs.iter().map(|r| r.delta.abs()).fold(0.0, f64::max),
    };
    eval::write_experiment(out, "merge", stamp, &rows, &summary)?;
    println!(
        "cross-cluster merges with delta < 0: {}/{}; largest self-merge |delta|: {:.4}",
        summary.cross_negative, summary.cross_pairs, summary.max_self_abs_delta
    );
    Ok(())
}

#[derive(Serialize)]
struct Prop1Summary {
    trials: usize,
    alpha: f64,
    layout: Vec<usize>,
    points_checked: usize,
    points_within_bound: usize,
    gaussian_points_within_bound: usize,
    rows: Vec<eval::Prop1Row>,
}

fn prop1(config: &RunConfig, out: &Path, stamp: &str) -> Result<()> {
    let layout = config.stream.tasks_per_cluster.clone();
    let rows = eval::run_proposition1(
        &config.experiments.grid,
        config.experiments.trials,
        &layout,
        config.train.alpha,
        config.seed,
    )?;
    let checked = rows.iter().filter(|r| r.within_bound.is_some()).count();
    let within = rows.iter().filter(|r| r.within_bound == Some(true)).count();
    let gaussian_within = rows.iter().filter(|r| r.gaussian_within_bound == Some(true)).count();
    let mark = |c: Option<bool>| match c {
        Some(true) => "ok",
        Some(false) => "VIOLATED",
        None => "-",
    };
    println!(
        "{:>6} {:>8} {:>8} {:>9} {:>8} {:>9} {:>8} {:>8}  {:<8} gaussian",
        "delta", "s_intra", "s_inter", "all", "se", "gaussian", "se", "bound", "all"
    );
    for r in &rows {
        println!(
            "{:>6.3} {:>8.3} {:>8.3} {:>9.4} {:>8.4} {:>9.4} {:>8.4} {:>8.4}  {:<8} {}",
            r.delta,
            r.sigma_intra,
            r.sigma_inter,
            r.empirical_error,
            r.std_error,
            r.gaussian_error,
            r.gaussian_std_error,
            r.bound,
            mark(r.within_bound),
            mark(r.gaussian_within_bound)
        );
    }
    println!("{within}/{checked} separated points within bound + 3 SE (all decisions)");
    println!("{gaussian_within}/{checked} separated points within bound + 3 SE (Gaussian-mode decisions only)");
    let summary = Prop1Summary {
        trials: config.experiments.trials,
        alpha: config.train.alpha,
        layout,
        points_checked: checked,
        points_within_bound: within,
        gaussian_points_within_bound: gaussian_within,
        rows: rows.clone(),
    };
    eval::write_experiment(out, "prop1", stamp, &rows, &summary)?;
    Ok(())
}

#[derive(Serialize)]
struct AlphaRow {
    seed: u64,
    alpha: f64,
    discovered_k: usize,
}

#[derive(Serialize)]
struct AlphaSummary {
    alphas: Vec<f64>,
    /// Seeds whose K decreased somewhere along increasing α.
    non_monotone_seeds: Vec<u64>,
    rows: Vec<AlphaRow>,
}

fn sweep_alpha(config: &RunConfig, out: &Path, stamp: &str) -> Result<()> {
    let mut rows = Vec::new();
    let mut non_monotone = Vec::new();
    for seed in config.experiments.seed_list() {
        let spec = crpcl::SyntheticStreamSpec {
            seed,
            ..config.stream.clone()
        };
        let stream = generate_synthetic_stream(&spec)?;
        let emb: Vec<TaskEmbedding> = stream.tasks.into_iter().map(|t| t.embedding).collect();
        let sweep = eval::alpha_sweep(&emb, &config.experiments.alphas)?;
        if !eval::monotonicity_violations(&sweep).is_empty() {
            non_monotone.push(seed);
        }
        rows.extend(sweep.into_iter().map(|r| AlphaRow {
            seed,
            alpha: r.alpha,
            discovered_k: r.discovered_k,
        }));
    }
    for &alpha in &config.experiments.alphas {
        let ks: Vec<usize> = rows
            .iter()
            .filter(|r| r.alpha == alpha)
            .map(|r| r.discovered_k)
            .collect();
        println!("alpha {alpha:>10}: K = {ks:?}");
    }
    if !non_monotone.is_empty() {
        println!("K not monotone in alpha for seeds {non_monotone:?}");
    }
    let summary = AlphaSummary {
        alphas: config.experiments.alphas.clone(),
        non_monotone_seeds: non_monotone,
        rows,
    };
    eval::write_experiment(out, "alpha", stamp, &summary.rows, &summary)?;
    Ok(())
}
