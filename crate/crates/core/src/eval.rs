//! Evaluation loop, per-category accuracy, single-channel shot ablations
//! and strategy-table sweeps.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{visual_for, LoadedDataset};
use crate::error::{Error, Result};
use crate::gateway::{CacheKey, Gateway, GatewayError};
use crate::model::{Channel, MultimodalQuestion};
use crate::prompt::{assemble_prompt, extract_answer, is_correct, ExtractionMethod, PromptBundle, PromptTemplate};
use crate::retrieval::{check_channel, retrieve_channels, RetrievalStore, DEFAULT_OVERFETCH};
use crate::sampler::{select_strategy, stratified_sample, SampleOutcome, SamplingStrategy, StrategyTable};
use crate::index::RankedList;

/// Everything a run needs besides the strategy and the gateway.
pub struct EvalContext<'a> {
    pub dataset: &'a LoadedDataset,
    pub store: &'a RetrievalStore,
    pub template: PromptTemplate,
    pub overfetch: usize,
    pub attach_images: bool,
    pool_index: HashMap<&'a str, &'a MultimodalQuestion>,
}

impl<'a> EvalContext<'a> {
    pub fn new(dataset: &'a LoadedDataset, store: &'a RetrievalStore) -> Self {
        Self {
            dataset,
            store,
            template: PromptTemplate::default(),
            overfetch: DEFAULT_OVERFETCH,
            attach_images: false,
            pool_index: dataset.pool.iter().map(|q| (q.id.as_str(), q)).collect(),
        }
    }

    pub fn with_template(mut self, template: PromptTemplate) -> Self {
        self.template = template;
        self
    }

    pub fn with_overfetch(mut self, overfetch: usize) -> Self {
        self.overfetch = overfetch;
        self
    }

    pub fn with_attach_images(mut self, attach: bool) -> Self {
        self.attach_images = attach;
        self
    }

    pub fn pool_question(&self, id: &str) -> Option<&'a MultimodalQuestion> {
        self.pool_index.get(id).copied()
    }
}

/// How each question's sampling strategy is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategySource {
    Table(StrategyTable),
    /// Every question uses this channel alone. Questions that cannot query
    /// it (no image for an image-side channel) run zero-shot and are flagged.
    SingleChannel(Channel),
}

pub const FLAG_ZERO_SHOT_FALLBACK: &str = "zero_shot_fallback";

fn strategy_for(
    q: &MultimodalQuestion,
    ctx: &EvalContext<'_>,
    source: &StrategySource,
    total_shots: usize,
    flags: &mut Vec<String>,
) -> Result<SamplingStrategy> {
    match source {
        StrategySource::Table(table) => select_strategy(q, ctx.dataset.kind, table, total_shots),
        StrategySource::SingleChannel(channel) => {
            let name = format!("single/{channel}");
            if channel.needs_query_image() && !q.has_image() {
                flags.push(FLAG_ZERO_SHOT_FALLBACK.into());
                Ok(SamplingStrategy::zero_shot(name))
            } else {
                Ok(SamplingStrategy::new(name, vec![*channel], total_shots))
            }
        }
    }
}

/// Retrieval and sampling detail for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTrace {
    pub question_id: String,
    pub strategy: SamplingStrategy,
    pub lists: BTreeMap<Channel, RankedList>,
    pub sample: SampleOutcome,
    pub flags: Vec<String>,
}

pub fn trace_question(
    ctx: &EvalContext<'_>,
    q: &MultimodalQuestion,
    source: &StrategySource,
    total_shots: usize,
) -> Result<RetrievalTrace> {
    let mut flags = Vec::new();
    let strategy = strategy_for(q, ctx, source, total_shots, &mut flags)?;
    let lists = retrieve_channels(q, &strategy.channel_requests(), ctx.store, ctx.overfetch)?;
    let sample = stratified_sample(&lists, &strategy, |id| ctx.pool_question(id))?;
    if !sample.shortfall.is_empty() {
        flags.push("shortfall".into());
    }
    Ok(RetrievalTrace {
        question_id: q.id.clone(),
        strategy,
        lists,
        sample,
        flags,
    })
}

/// Retrieval, sampling and prompt assembly for one question.
pub fn prepare_bundle(
    ctx: &EvalContext<'_>,
    q: &MultimodalQuestion,
    source: &StrategySource,
    total_shots: usize,
) -> Result<(PromptBundle, RetrievalTrace)> {
    let trace = trace_question(ctx, q, source, total_shots)?;
    let visual = visual_for(q, &ctx.dataset.visual);
    let bundle = assemble_prompt(
        q,
        &visual,
        &trace.sample.demonstrations,
        &ctx.dataset.visual,
        &ctx.template,
        ctx.attach_images,
    )?;
    Ok((bundle, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoProvenance {
    pub id: String,
    pub channel: Channel,
    pub rank: usize,
    pub score: f32,
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub predicted: String,
    pub gold: String,
    pub correct: bool,
    pub method: ExtractionMethod,
    pub categories: Vec<String>,
    pub strategy: String,
    pub demonstrations: Vec<DemoProvenance>,
    pub shortfall: BTreeMap<Channel, usize>,
    pub flags: Vec<String>,
    /// Content hash of the request; names the cache entry when caching.
    pub cache_key: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl CategoryScore {
    fn new(correct: usize, total: usize) -> Self {
        Self {
            correct,
            total,
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_accuracy: f64,
    pub overall: CategoryScore,
    pub per_category: BTreeMap<String, CategoryScore>,
    pub per_question: Vec<QuestionRecord>,
    pub config_fingerprint: String,
}

impl EvalReport {
    /// Aggregates records (sorted by id) into overall and per-tag accuracy.
    pub fn from_records(mut records: Vec<QuestionRecord>, config_fingerprint: String) -> Self {
        records.sort_by(|a, b| a.id.cmp(&b.id));
        let correct = records.iter().filter(|r| r.correct).count();
        let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for r in &records {
            for tag in &r.categories {
                let e = tally.entry(tag.clone()).or_default();
                e.0 += usize::from(r.correct);
                e.1 += 1;
            }
        }
        let overall = CategoryScore::new(correct, records.len());
        Self {
            overall_accuracy: overall.accuracy,
            overall,
            per_category: tally.into_iter().map(|(k, (c, t))| (k, CategoryScore::new(c, t))).collect(),
            per_question: records,
            config_fingerprint,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn run_log_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.per_question {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse_run_log(text: &str) -> Result<Vec<QuestionRecord>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Config(format!("run log line {}: {e}", i + 1)))
            })
            .collect()
    }

    /// `category,correct,total,accuracy`, overall row first.
    pub fn category_csv(&self) -> String {
        let mut out = String::from("category,correct,total,accuracy\n");
        let rows = std::iter::once(("overall", &self.overall)).chain(self.per_category.iter().map(|(k, v)| (k.as_str(), v)));
        for (name, s) in rows {
            writeln!(out, "{name},{},{},{:.6}", s.correct, s.total, s.accuracy).unwrap();
        }
        out
    }

    /// Plain-text table, one column per category tag.
    pub fn render_table(&self) -> String {
        let mut header = String::from("| ALL ");
        let mut values = format!("| {:.1} ", self.overall_accuracy * 100.0);
        for (tag, s) in &self.per_category {
            write!(header, "| {tag} ").unwrap();
            write!(values, "| {:.1} ", s.accuracy * 100.0).unwrap();
        }
        format!("{header}|\n{values}|\n")
    }
}

fn fingerprint(value: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

struct Prepared {
    bundle: PromptBundle,
    trace: RetrievalTrace,
}

/// Strategy feasibility and embedding presence for every question, before
/// anything is sent to a model.
pub fn preflight(ctx: &EvalContext<'_>, source: &StrategySource, total_shots: usize) -> Result<()> {
    for q in &ctx.dataset.eval {
        let mut flags = Vec::new();
        let strategy = strategy_for(q, ctx, source, total_shots, &mut flags)?;
        for (channel, k) in strategy.quotas() {
            if k > 0 {
                check_channel(q, channel, ctx.store)?;
            }
        }
    }
    Ok(())
}

fn run_with_source(
    ctx: &EvalContext<'_>,
    source: &StrategySource,
    total_shots: usize,
    gateway: &Gateway,
) -> Result<EvalReport> {
    preflight(ctx, source, total_shots)?;

    let mut eval: Vec<&MultimodalQuestion> = ctx.dataset.eval.iter().collect();
    eval.sort_by(|a, b| a.id.cmp(&b.id));
    let prepared = eval
        .iter()
        .map(|q| prepare_bundle(ctx, q, source, total_shots).map(|(bundle, trace)| Prepared { bundle, trace }))
        .collect::<Result<Vec<_>>>()?;

    let responses = complete_all(&prepared, gateway)?;

    let records = eval
        .iter()
        .zip(prepared)
        .zip(responses)
        .map(|((q, p), response)| make_record(q, p, response, gateway))
        .collect();

    let fp = fingerprint(&serde_json::json!({
        "dataset_kind": ctx.dataset.kind,
        "strategy": source,
        "total_shots": total_shots,
        "template": ctx.template,
        "overfetch": ctx.overfetch,
        "attach_images": ctx.attach_images,
        "gateway": {
            "provider": gateway.config().provider,
            "model_name": gateway.config().model_name,
            "endpoint_url": gateway.config().endpoint_url,
            "temperature": gateway.config().temperature,
            "max_output_tokens": gateway.config().max_output_tokens,
        },
    }));
    Ok(EvalReport::from_records(records, fp))
}

/// Sends every bundle with up to `parallelism` requests in flight. Results
/// come back in input order. A fatal gateway error stops the run.
fn complete_all(prepared: &[Prepared], gateway: &Gateway) -> Result<Vec<Result<String, GatewayError>>> {
    let workers = gateway.config().parallelism.clamp(1, prepared.len().max(1));
    let slots: Vec<Mutex<Option<Result<String, GatewayError>>>> = prepared.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);

    let work = || loop {
        if abort.load(Ordering::SeqCst) {
            break;
        }
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(p) = prepared.get(i) else { break };
        let out = gateway.complete(&p.bundle);
        if out.as_ref().is_err_and(GatewayError::is_fatal) {
            abort.store(true, Ordering::SeqCst);
        }
        *slots[i].lock().unwrap() = Some(out);
    };

    if workers == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(work);
            }
        });
    }

    let mut out = Vec::with_capacity(prepared.len());
    for slot in slots {
        match slot.into_inner().unwrap() {
            Some(Err(e)) if e.is_fatal() => return Err(e.into()),
            Some(r) => out.push(r),
            None => {
                return Err(Error::Config("run aborted before all questions were sent".into()));
            }
        }
    }
    Ok(out)
}

fn make_record(
    q: &MultimodalQuestion,
    p: Prepared,
    response: Result<String, GatewayError>,
    gateway: &Gateway,
) -> QuestionRecord {
    let mut flags = p.trace.flags;
    if p.bundle.dropped_demonstrations > 0 {
        flags.push(format!("dropped_demonstrations:{}", p.bundle.dropped_demonstrations));
    }
    let answer = match response {
        Ok(text) => extract_answer(&text, q),
        Err(e) => {
            flags.push(format!("gateway_error:{e}"));
            extract_answer("", q)
        }
    };
    let correct = is_correct(&answer, q);
    QuestionRecord {
        id: q.id.clone(),
        predicted: answer.predicted,
        gold: q.gold_answer.clone(),
        correct,
        method: answer.method,
        categories: q.categories.keys().cloned().collect(),
        strategy: p.trace.strategy.name.clone(),
        demonstrations: p
            .bundle
            .demonstrations_used
            .iter()
            .map(|d| DemoProvenance {
                id: d.question.id.clone(),
                channel: d.source_channel,
                rank: d.rank_in_channel,
                score: d.score,
            })
            .collect(),
        shortfall: p.trace.sample.shortfall,
        flags,
        cache_key: CacheKey::new(gateway.config(), &p.bundle).0,
    }
}

pub fn run_eval(
    ctx: &EvalContext<'_>,
    table: &StrategyTable,
    total_shots: usize,
    gateway: &Gateway,
) -> Result<EvalReport> {
    run_with_source(ctx, &StrategySource::Table(table.clone()), total_shots, gateway)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub channel: Channel,
    pub reports: BTreeMap<usize, EvalReport>,
}

impl AblationResult {
    /// `channel,shots,category,accuracy`: one overall row plus one row per
    /// category tag, per shot count.
    pub fn csv(&self) -> String {
        let mut out = String::from("channel,shots,category,accuracy\n");
        for (shots, report) in &self.reports {
            writeln!(out, "{},{shots},overall,{:.6}", self.channel, report.overall_accuracy).unwrap();
            for (tag, s) in &report.per_category {
                writeln!(out, "{},{shots},{tag},{:.6}", self.channel, s.accuracy).unwrap();
            }
        }
        out
    }
}

pub fn run_ablation(
    ctx: &EvalContext<'_>,
    channel: Channel,
    shots: &[usize],
    gateway: &Gateway,
) -> Result<AblationResult> {
    let source = StrategySource::SingleChannel(channel);
    let mut reports = BTreeMap::new();
    for &n in shots {
        reports.insert(n, run_with_source(ctx, &source, n, gateway)?);
    }
    Ok(AblationResult { channel, reports })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub name: String,
    pub accuracy: f64,
    pub table: StrategyTable,
}

/// Evaluates each candidate table on the dev split and ranks by accuracy
/// descending, then name ascending.
pub fn sweep_strategies(
    ctx: &EvalContext<'_>,
    candidates: &[(String, StrategyTable)],
    total_shots: usize,
    gateway: &Gateway,
) -> Result<Vec<SweepEntry>> {
    let pool_ids: BTreeSet<&str> = ctx.dataset.pool.iter().map(|q| q.id.as_str()).collect();
    if let Some(q) = ctx.dataset.eval.iter().find(|q| pool_ids.contains(q.id.as_str())) {
        return Err(Error::Config(format!("dev question `{}` is also in the pool", q.id)));
    }
    let mut out = Vec::with_capacity(candidates.len());
    for (name, table) in candidates {
        let report = run_eval(ctx, table, total_shots, gateway)?;
        out.push(SweepEntry {
            name: name.clone(),
            accuracy: report.overall_accuracy,
            table: table.clone(),
        });
    }
    out.sort_by(|a, b| b.accuracy.total_cmp(&a.accuracy).then_with(|| a.name.cmp(&b.name)));
    Ok(out)
}
