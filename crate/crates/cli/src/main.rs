//! `mmret`: ingest datasets, check embedding files, inspect retrieval and
//! prompts for single questions, and run evaluations, ablations and
//! strategy sweeps.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use mmret_core::dataset::{load_dataset, DatasetConfig, DatasetKind, LoadedDataset, RationaleSource};
use mmret_core::embedding::{load_with_stats, EmbeddingFormat, EmbeddingSet};
use mmret_core::eval::{
    prepare_bundle, run_ablation, run_eval, sweep_strategies, trace_question, EvalContext, EvalReport,
    StrategySource,
};
use mmret_core::gateway::{Gateway, GatewayConfig, Provider, Rulebook};
use mmret_core::prompt::PromptTemplate;
use mmret_core::retrieval::{RetrievalStore, DEFAULT_OVERFETCH};
use mmret_core::sampler::StrategyTable;
use mmret_core::synthetic::{generate, SyntheticSpec};
use mmret_core::{Channel, Space};

// stdout writes that surface errors (a closed pipe) instead of panicking
macro_rules! out {
    ($($t:tt)*) => { write!(std::io::stdout().lock(), $($t)*)? };
}
macro_rules! outln {
    ($($t:tt)*) => { writeln!(std::io::stdout().lock(), $($t)*)? };
}

#[derive(Parser)]
#[command(name = "mmret", version, about = "Multi-modal demonstration retrieval for chain-of-thought prompting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a dataset and write it in canonical form.
    Ingest {
        #[command(flatten)]
        data: DataArgs,
        /// Output file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check EMB1 (or JSONL) embedding files or a directory of them.
    ValidateEmb {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        /// Read the JSONL debug variant.
        #[arg(long)]
        jsonl: bool,
    },
    /// Per-channel lists and the sampled demonstrations for one question.
    Retrieve {
        #[command(flatten)]
        ctx: ContextArgs,
        /// Eval question id.
        #[arg(long)]
        id: String,
    },
    /// Render the prompt bundle for one question without calling a model.
    Prompt {
        #[command(flatten)]
        ctx: ContextArgs,
        #[arg(long)]
        id: String,
        /// Print only the rendered prompt text.
        #[arg(long)]
        text: bool,
    },
    /// Full evaluation over the eval split.
    Run {
        #[command(flatten)]
        ctx: ContextArgs,
        #[command(flatten)]
        gateway: GatewayArgs,
        /// Directory for run_log.jsonl, report.json and categories.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy of each channel alone across shot counts.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        emb: EmbArgs,
        #[command(flatten)]
        gateway: GatewayArgs,
        /// Channels to ablate (default: all four).
        #[arg(long, value_delimiter = ',')]
        channel: Vec<Channel>,
        /// Shot counts, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        shots: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_OVERFETCH)]
        overfetch: usize,
        /// Directory for one ablation_<channel>.csv per channel.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank candidate strategy tables by dev-split accuracy.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        emb: EmbArgs,
        #[command(flatten)]
        gateway: GatewayArgs,
        /// Candidate table files; each is named by its file stem.
        #[arg(long = "candidate", required = true)]
        candidates: Vec<PathBuf>,
        #[arg(long, default_value_t = 2)]
        shots: usize,
        #[arg(long, default_value_t = DEFAULT_OVERFETCH)]
        overfetch: usize,
    },
    /// Re-render the accuracy table and CSV from a run log.
    Report {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value = "")]
        fingerprint: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a seeded synthetic corpus (generic schema) with embeddings.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        pool_size: usize,
        #[arg(long, default_value_t = 20)]
        eval_size: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long)]
        jsonl: bool,
    },
}

#[derive(Args, Clone)]
struct DataArgs {
    /// scienceqa, mathvista or generic.
    #[arg(long)]
    dataset: DatasetKind,
    #[arg(long)]
    pool: PathBuf,
    #[arg(long)]
    eval: PathBuf,
    /// Caption/OCR sidecar JSON.
    #[arg(long)]
    visual_info: Option<PathBuf>,
    /// JSON map of id to rationale, applied to pool items.
    #[arg(long)]
    rationale_file: Option<PathBuf>,
    #[arg(long)]
    pool_split: Option<String>,
    #[arg(long)]
    eval_split: Option<String>,
}

#[derive(Args, Clone)]
struct EmbArgs {
    #[arg(long)]
    emb_dir: PathBuf,
    #[arg(long, value_enum, default_value = "emb1")]
    emb_format: EmbFormatArg,
}

#[derive(Args, Clone)]
struct ContextArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    emb: EmbArgs,
    /// Strategy table JSON (defaults to the built-in table).
    #[arg(long)]
    strategy_table: Option<PathBuf>,
    /// Use this channel alone instead of a strategy table.
    #[arg(long, conflicts_with = "strategy_table")]
    channel: Option<Channel>,
    #[arg(long, default_value_t = 2)]
    shots: usize,
    /// Prompt template JSON.
    #[arg(long)]
    template: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_OVERFETCH)]
    overfetch: usize,
    /// Attach the test question's image to the request.
    #[arg(long)]
    attach_images: bool,
    /// Reserved; the pipeline is deterministic.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct GatewayArgs {
    /// Gateway config JSON; the flags below override it.
    #[arg(long)]
    gateway_config: Option<PathBuf>,
    #[arg(long, value_enum)]
    provider: Option<ProviderArg>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    parallelism: Option<usize>,
    /// Mock provider rules (JSON).
    #[arg(long)]
    rulebook: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbFormatArg {
    Emb1,
    Jsonl,
}

impl From<EmbFormatArg> for EmbeddingFormat {
    fn from(f: EmbFormatArg) -> Self {
        match f {
            EmbFormatArg::Emb1 => EmbeddingFormat::Emb1,
            EmbFormatArg::Jsonl => EmbeddingFormat::Jsonl,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderArg {
    Mock,
    Remote,
}

impl DataArgs {
    fn load(&self) -> Result<LoadedDataset> {
        let mut config = DatasetConfig::new(self.dataset, &self.pool, &self.eval);
        config.visual_info_path = self.visual_info.clone();
        if let Some(path) = &self.rationale_file {
            config.rationale_source = RationaleSource::ExternalFile { path: path.clone() };
        }
        config.pool_split_filter = self.pool_split.clone();
        config.eval_split_filter = self.eval_split.clone();
        let ds = load_dataset(&config).context("loading dataset")?;
        info!(
            "loaded {} pool / {} eval questions ({} non-selectable)",
            ds.pool.len(),
            ds.eval.len(),
            ds.report.non_selectable.len()
        );
        Ok(ds)
    }
}

impl EmbArgs {
    fn load(&self) -> Result<EmbeddingSet> {
        let set = EmbeddingSet::load_dir(&self.emb_dir, self.emb_format.into())
            .with_context(|| format!("loading embeddings from {}", self.emb_dir.display()))?;
        if set.spaces().next().is_none() {
            bail!("no embedding files found in {}", self.emb_dir.display());
        }
        Ok(set)
    }
}

impl GatewayArgs {
    fn build(&self) -> Result<Gateway> {
        let mut config = match &self.gateway_config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => GatewayConfig::default(),
        };
        if let Some(p) = self.provider {
            config.provider = match p {
                ProviderArg::Mock => Provider::Mock,
                ProviderArg::Remote => Provider::RemoteChat,
            };
        }
        if let Some(m) = &self.model {
            config.model_name = m.clone();
        }
        if let Some(dir) = &self.cache_dir {
            config.cache_dir = Some(dir.clone());
        }
        if let Some(n) = self.parallelism {
            config.parallelism = n;
        }
        let rulebook = self.rulebook.as_deref().map(Rulebook::load).transpose()?;
        Ok(Gateway::from_config(config, rulebook)?)
    }
}

struct Loaded {
    dataset: LoadedDataset,
    store: RetrievalStore,
}

fn load_context(data: &DataArgs, emb: &EmbArgs) -> Result<Loaded> {
    let dataset = data.load()?;
    let set = emb.load()?;
    let store = RetrievalStore::new(&dataset.pool, &set, set.clone())?;
    Ok(Loaded { dataset, store })
}

impl ContextArgs {
    fn source(&self) -> Result<StrategySource> {
        Ok(match (self.channel, &self.strategy_table) {
            (Some(c), _) => StrategySource::SingleChannel(c),
            (None, Some(path)) => StrategySource::Table(StrategyTable::load(path)?),
            (None, None) => StrategySource::Table(StrategyTable::default()),
        })
    }

    fn context<'a>(&self, loaded: &'a Loaded) -> Result<EvalContext<'a>> {
        let template = match &self.template {
            Some(p) => PromptTemplate::load(p)?,
            None => PromptTemplate::default(),
        };
        Ok(EvalContext::new(&loaded.dataset, &loaded.store)
            .with_template(template)
            .with_overfetch(self.overfetch)
            .with_attach_images(self.attach_images))
    }
}

fn eval_question<'a>(ds: &'a LoadedDataset, id: &str) -> Result<&'a mmret_core::MultimodalQuestion> {
    ds.eval
        .iter()
        .find(|q| q.id == id)
        .with_context(|| format!("no eval question with id `{id}`"))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_file(&dir.join("run_log.jsonl"), &report.run_log_jsonl())?;
    write_file(&dir.join("report.json"), &report.to_json())?;
    write_file(&dir.join("categories.csv"), &report.category_csv())?;
    Ok(())
}

fn validate_emb(paths: &[PathBuf], jsonl: bool) -> Result<bool> {
    let format = if jsonl { EmbeddingFormat::Jsonl } else { EmbeddingFormat::Emb1 };
    let ext = if jsonl { "jsonl" } else { "emb1" };
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut inner: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == ext))
                .collect();
            inner.sort();
            files.extend(inner);
        } else {
            files.push(p.clone());
        }
    }
    let mut ok = true;
    let mut dims: Vec<(Space, usize)> = Vec::new();
    for f in &files {
        match load_with_stats(f, format) {
            Ok((m, stats)) => {
                outln!(
                    "ok   {}: space={} dim={} rows={} max_norm_deviation={:.2e}",
                    f.display(),
                    m.space(),
                    m.dim(),
                    stats.rows,
                    stats.max_norm_deviation
                );
                dims.push((m.space(), m.dim()));
            }
            Err(e) => {
                ok = false;
                outln!("FAIL {}: {e}", f.display());
            }
        }
    }
    let cross: Vec<usize> = dims
        .iter()
        .filter(|(s, _)| matches!(s, Space::CrossText | Space::CrossImage))
        .map(|&(_, d)| d)
        .collect();
    if cross.windows(2).any(|w| w[0] != w[1]) {
        ok = false;
        outln!("FAIL cross_text and cross_image dimensions differ: {cross:?}");
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Ingest { data, out } => {
            let ds = data.load()?;
            eprintln!("{}", serde_json::to_string(&ds.report)?);
            let json = ds.canonical_json();
            match out {
                Some(p) => write_file(&p, &json)?,
                None => outln!("{json}"),
            }
        }
        Command::ValidateEmb { paths, jsonl } => return validate_emb(&paths, jsonl),
        Command::Retrieve { ctx, id } => {
            let loaded = load_context(&ctx.data, &ctx.emb)?;
            let ectx = ctx.context(&loaded)?;
            let q = eval_question(&loaded.dataset, &id)?;
            let trace = trace_question(&ectx, q, &ctx.source()?, ctx.shots)?;
            outln!("{}", serde_json::to_string_pretty(&trace)?);
        }
        Command::Prompt { ctx, id, text } => {
            let loaded = load_context(&ctx.data, &ctx.emb)?;
            let ectx = ctx.context(&loaded)?;
            let q = eval_question(&loaded.dataset, &id)?;
            let (bundle, _) = prepare_bundle(&ectx, q, &ctx.source()?, ctx.shots)?;
            if text {
                out!("{}", bundle.rendered_prompt);
            } else {
                outln!("{}", serde_json::to_string_pretty(&bundle)?);
            }
        }
        Command::Run { ctx, gateway, out } => {
            let loaded = load_context(&ctx.data, &ctx.emb)?;
            let ectx = ctx.context(&loaded)?;
            let gw = gateway.build()?;
            let report = match ctx.source()? {
                StrategySource::Table(t) => run_eval(&ectx, &t, ctx.shots, &gw)?,
                StrategySource::SingleChannel(c) => {
                    let mut r = run_ablation(&ectx, c, &[ctx.shots], &gw)?;
                    r.reports.remove(&ctx.shots).expect("one report per shot count")
                }
            };
            info!("{} transport calls", gw.transport_calls());
            out!("{}", report.render_table());
            if let Some(dir) = out {
                write_report(&dir, &report)?;
            }
        }
        Command::Ablate {
            data,
            emb,
            gateway,
            channel,
            shots,
            overfetch,
            out,
        } => {
            let loaded = load_context(&data, &emb)?;
            let ectx = EvalContext::new(&loaded.dataset, &loaded.store).with_overfetch(overfetch);
            let gw = gateway.build()?;
            let channels = if channel.is_empty() { Channel::ALL.to_vec() } else { channel };
            if let Some(dir) = &out {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            for c in channels {
                let result = run_ablation(&ectx, c, &shots, &gw)?;
                let csv = result.csv();
                match &out {
                    Some(dir) => write_file(&dir.join(format!("ablation_{c}.csv")), &csv)?,
                    None => out!("{csv}"),
                }
            }
        }
        Command::Sweep {
            data,
            emb,
            gateway,
            candidates,
            shots,
            overfetch,
        } => {
            let loaded = load_context(&data, &emb)?;
            let ectx = EvalContext::new(&loaded.dataset, &loaded.store).with_overfetch(overfetch);
            let gw = gateway.build()?;
            let named = candidates
                .iter()
                .map(|p| {
                    let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    Ok((name, StrategyTable::load(p)?))
                })
                .collect::<Result<Vec<_>>>()?;
            for entry in sweep_strategies(&ectx, &named, shots, &gw)? {
                outln!("{}\t{:.4}", entry.name, entry.accuracy);
            }
        }
        Command::Report { log, fingerprint, out } => {
            let text = std::fs::read_to_string(&log).with_context(|| format!("reading {}", log.display()))?;
            let report = EvalReport::from_records(EvalReport::parse_run_log(&text)?, fingerprint);
            out!("{}", report.render_table());
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                write_file(&dir.join("report.json"), &report.to_json())?;
                write_file(&dir.join("categories.csv"), &report.category_csv())?;
            }
        }
        Command::Synth {
            out,
            seed,
            pool_size,
            eval_size,
            dim,
            jsonl,
        } => {
            let corpus = generate(&SyntheticSpec {
                seed,
                kind: DatasetKind::Generic,
                pool_size,
                eval_size,
                dim,
                ..SyntheticSpec::default()
            });
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let ds = &corpus.dataset;
            write_file(&out.join("pool.json"), &serde_json::to_string_pretty(&ds.pool)?)?;
            write_file(&out.join("eval.json"), &serde_json::to_string_pretty(&ds.eval)?)?;
            write_file(&out.join("visual.json"), &serde_json::to_string_pretty(&ds.visual)?)?;
            // The built-in table has no generic row; reuse the ScienceQA one.
            let mut table = StrategyTable::default();
            let row = table.rows["scienceqa"].clone();
            table.rows.insert(DatasetKind::Generic.as_str().to_string(), row);
            write_file(&out.join("strategy_table.json"), &table.to_json())?;
            let format = if jsonl { EmbeddingFormat::Jsonl } else { EmbeddingFormat::Emb1 };
            corpus.embeddings.write_dir(&out.join("emb"), format)?;
            outln!("wrote {} pool / {} eval questions to {}", ds.pool.len(), ds.eval.len(), out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) if e.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
