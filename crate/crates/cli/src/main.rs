use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use dpicl_core::llm_client::{ChatClient, LanguageModel, MockBehavior, MockLlm};
use dpicl_core::pipeline::{plan_privacy, Experiment, OutcomeMode, PipelineError, PrivacyPlan, RunConfig};
use dpicl_core::privacy_filter::{FilterError, FilterState};
use dpicl_core::retrieval::{load_corpus, load_queries, summarize_corpus};

#[derive(Parser)]
#[command(name = "dpicl", version, about = "Differentially private in-context learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a JSONL corpus and print its size, dimension and norm statistics.
    IndexBuild { corpus: PathBuf },
    /// Print the noise scale, committed order, per-query cost and guarantee.
    Account(AccountArgs),
    /// Run an experiment file and write the report and ledger checkpoint.
    Run(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Classification,
    Qa,
}

#[derive(clap::Args)]
struct AccountArgs {
    /// Experiment file whose run settings are planned.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "classification")]
    preset: Preset,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// Times each record may be used.
    #[arg(long)]
    uses: Option<u32>,
    /// Fixed noise scale instead of calibration.
    #[arg(long)]
    sigma: Option<f64>,
    /// Print the plan as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum MockKind {
    Majority,
    KeywordEcho,
    Fixed,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Answer with a local mock instead of the configured endpoint.
    #[arg(long, value_enum)]
    mock: Option<MockKind>,
    /// Response text for `--mock fixed`.
    #[arg(long, default_value = "")]
    mock_text: String,
    /// Plan and validate inputs without calling any model.
    #[arg(long)]
    dry_run: bool,
    /// Continue from a ledger checkpoint, skipping queries it already logged.
    #[arg(long)]
    resume: Option<PathBuf>,
}

/// Run settings plus the files they apply to. Relative paths resolve against
/// the experiment file's directory.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    corpus: PathBuf,
    queries: PathBuf,
    output: PathBuf,
    #[serde(default)]
    checkpoint: Option<PathBuf>,
    run: RunConfig,
}

impl ExperimentFile {
    fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut file: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut file.corpus, &mut file.queries, &mut file.output] {
            *p = base.join(&*p);
        }
        file.checkpoint = file.checkpoint.map(|c| base.join(c));
        Ok(file)
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.output.with_extension("ledger.json"))
    }
}

enum Failure {
    Config(anyhow::Error),
    Transport(anyhow::Error),
    Invariant(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Transport(_) => 3,
            Failure::Invariant(_) => 4,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Config(e)
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Invariant(_) | PipelineError::Filter(FilterError::InvariantViolation { .. }) => {
                Failure::Invariant(e.into())
            }
            PipelineError::Llm { .. } => Failure::Transport(e.into()),
            _ => Failure::Config(e.into()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::IndexBuild { corpus } => index_build(&corpus),
        Command::Account(args) => account(&args),
        Command::Run(args) => run(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let (Failure::Config(e) | Failure::Transport(e) | Failure::Invariant(e)) = &failure;
            eprintln!("error: {e:#}");
            ExitCode::from(failure.code())
        }
    }
}

fn index_build(corpus: &Path) -> Result<(), Failure> {
    let file = fs::File::open(corpus).with_context(|| format!("opening {}", corpus.display()))?;
    let summary = summarize_corpus(BufReader::new(file)).with_context(|| format!("{}", corpus.display()))?;
    println!("records    {}", summary.records);
    println!("dimension  {}", summary.dimension);
    println!(
        "raw norm   min {:.6}  mean {:.6}  max {:.6}",
        summary.norm_min, summary.norm_mean, summary.norm_max
    );
    Ok(())
}

fn account(args: &AccountArgs) -> Result<(), Failure> {
    let mut config = match &args.config {
        Some(path) => ExperimentFile::load(path)?.run,
        None => {
            let epsilon = args.epsilon.ok_or_else(|| anyhow!("--epsilon is required without --config"))?;
            match args.preset {
                Preset::Classification => RunConfig::classification_preset(vec![], epsilon),
                Preset::Qa => RunConfig::qa_preset(epsilon),
            }
        }
    };
    if let Some(e) = args.epsilon {
        config.privacy.epsilon = e;
    }
    if let Some(d) = args.delta {
        config.privacy.delta = d;
    }
    if let Some(t) = args.uses {
        config.privacy.uses_per_record = t;
    }
    if args.sigma.is_some() {
        config.mechanism.sigma = args.sigma;
    }
    let plan = plan_privacy(&config)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&plan).context("serializing plan")?);
    } else {
        print_plan(&plan);
    }
    Ok(())
}

fn print_plan(plan: &PrivacyPlan) {
    let mechanism = serde_json::to_value(plan.mechanism).ok();
    let kind = mechanism.as_ref().and_then(|m| m["kind"].as_str()).unwrap_or("?");
    println!("mechanism        {kind}");
    println!("sigma            {:.6}", plan.sigma);
    println!("alpha*           {}", plan.alpha_star.value());
    println!("query epsilon    {:.6e}", plan.cost.epsilon_t);
    println!("query delta      {:.6e}", plan.cost.delta_t);
    println!("uses per record  {}", plan.uses_per_record);
    println!("budget epsilon   {:.6e}", plan.budget.epsilon_max);
    println!("budget delta     {:.6e}", plan.budget.delta_max);
    println!("guarantee        epsilon {:.6}  delta {:e}", plan.guarantee.epsilon_hat, plan.guarantee.delta_hat);
}

fn build_model(args: &RunArgs, config: &RunConfig) -> anyhow::Result<Box<dyn LanguageModel>> {
    let behavior = match args.mock {
        Some(MockKind::Majority) => MockBehavior::MajorityLabel,
        Some(MockKind::KeywordEcho) => MockBehavior::KeywordEcho,
        Some(MockKind::Fixed) => MockBehavior::FixedText(args.mock_text.clone()),
        None => {
            let mut client = ChatClient::from_env(config.endpoint.clone())?;
            if let Some(trace) = &config.endpoint.trace_path {
                client = client.with_trace(trace).with_context(|| format!("opening trace {}", trace.display()))?;
            }
            return Ok(Box::new(client));
        }
    };
    Ok(Box::new(MockLlm::new(behavior)))
}

fn run(args: &RunArgs) -> Result<(), Failure> {
    let file = ExperimentFile::load(&args.config)?;
    let mut config = file.run.clone();
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    let index = load_corpus(&file.corpus).with_context(|| format!("corpus {}", file.corpus.display()))?;
    let (dimension, queries) =
        load_queries(&file.queries).with_context(|| format!("queries {}", file.queries.display()))?;
    if dimension != index.dimension() {
        return Err(anyhow!("query dimension {dimension} differs from corpus dimension {}", index.dimension()).into());
    }

    if args.dry_run {
        let plan = plan_privacy(&config)?;
        print_plan(&plan);
        println!("corpus records   {}", index.len());
        println!("queries          {}", queries.len());
        return Ok(());
    }

    let model = build_model(args, &config)?;
    let mut experiment = Experiment::new(&index, model.as_ref(), config)?;
    if let Some(path) = &args.resume {
        let state = FilterState::load_checkpoint(path).with_context(|| format!("checkpoint {}", path.display()))?;
        experiment = experiment.resume(state)?;
    }
    let done = experiment.completed_queries();
    let pending: Vec<_> = queries.into_iter().filter(|q| !done.contains(&q.id)).collect();

    let report = experiment.run(&pending)?;
    let json = serde_json::to_string_pretty(&report).context("serializing report")?;
    fs::write(&file.output, json + "\n").with_context(|| format!("writing {}", file.output.display()))?;
    if let Some(state) = experiment.filter_state() {
        let path = file.checkpoint_path();
        state.save_checkpoint(&path).with_context(|| format!("writing {}", path.display()))?;
    }

    let s = &report.summary;
    println!(
        "{} queries: {} full, {} zero-shot fallback, {} abstained, {} failed; {} records exhausted",
        s.queries, s.full, s.fallback_zero_shot, s.abstained, s.failed, s.exhausted_records
    );
    println!("guarantee epsilon {:.6} delta {:e}", report.guarantee.epsilon_hat, report.guarantee.delta_hat);
    if let Some(m) = &report.metrics {
        println!(
            "exact_match {:.4} rouge1 {:.4} rouge2 {:.4} rougeL {:.4} bleu {:.4} anls {:.4}",
            m.mean.exact_match, m.mean.rouge1, m.mean.rouge2, m.mean.rouge_l, m.mean.bleu, m.mean.anls
        );
    }
    if s.failed > 0 {
        let first = report.outcomes.iter().find(|o| o.mode == OutcomeMode::Failed);
        let detail = first.and_then(|o| o.error.clone()).unwrap_or_default();
        return Err(Failure::Transport(anyhow!("{} queries failed; first error: {detail}", s.failed)));
    }
    Ok(())
}
