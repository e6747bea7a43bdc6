//! Browser bindings: a seeded synthetic corpus held in memory, with three
//! operations exposed to the page — a per-channel top-k explorer (plus a 2-D
//! projection for plotting), a quota calculator, and stratified sampling
//! with prompt rendering. Everything returns JSON strings; errors come back
//! as plain messages.

use std::collections::BTreeMap;

use serde::Serialize;
use wasm_bindgen::prelude::*;

use mmret_core::dataset::{visual_for, DatasetKind, LoadedDataset};
use mmret_core::eval::{prepare_bundle, EvalContext, StrategySource};
use mmret_core::retrieval::{retrieve_channels, ChannelRequest, RetrievalStore};
use mmret_core::sampler::{SamplingStrategy, StrategyTable};
use mmret_core::synthetic::{generate, SyntheticSpec};
use mmret_core::{Channel, MultimodalQuestion};

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

fn parse_channels(list: &str) -> Result<Vec<Channel>, String> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<Channel>())
        .collect()
}

#[derive(Serialize)]
struct QuotaView {
    channel: Channel,
    quota: usize,
}

/// Per-channel quotas for `shots` spread over a comma-separated channel list.
#[wasm_bindgen]
pub fn quotas(channels: &str, shots: u32) -> Result<String, String> {
    let s = SamplingStrategy::new("demo", parse_channels(channels)?, shots as usize);
    let view: Vec<QuotaView> = s
        .quotas()
        .into_iter()
        .map(|(channel, quota)| QuotaView { channel, quota })
        .collect();
    Ok(to_json(&view))
}

#[derive(Serialize)]
struct QuestionView<'a> {
    id: &'a str,
    text: &'a str,
    topic: &'a str,
    has_image: bool,
}

#[derive(Serialize)]
struct Point<'a> {
    id: &'a str,
    topic: &'a str,
    x: f64,
    y: f64,
}

#[derive(Serialize)]
struct Scatter<'a> {
    space: String,
    pool: Vec<Point<'a>>,
    query: Option<Point<'a>>,
}

#[derive(Serialize)]
struct HitView<'a> {
    rank: usize,
    id: &'a str,
    topic: &'a str,
    score: f32,
    same_topic: bool,
}

#[derive(Serialize)]
struct DemoView<'a> {
    id: &'a str,
    channel: Channel,
    rank: usize,
    score: f32,
    topic: &'a str,
}

#[derive(Serialize)]
struct AssembleView<'a> {
    strategy: SamplingStrategy,
    quotas: Vec<QuotaView>,
    demonstrations: Vec<DemoView<'a>>,
    shortfall: BTreeMap<Channel, usize>,
    flags: Vec<String>,
    prompt: String,
    token_estimate: usize,
}

fn topic(q: &MultimodalQuestion) -> &str {
    q.categories.get("topic").map_or("", String::as_str)
}

#[wasm_bindgen]
pub struct Demo {
    dataset: LoadedDataset,
    store: RetrievalStore,
}

#[wasm_bindgen]
impl Demo {
    /// A fresh synthetic corpus. `noise` widens topic clusters (0 = every
    /// item sits on its topic center).
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, pool_size: u32, eval_size: u32, noise: f64) -> Result<Demo, String> {
        let corpus = generate(&SyntheticSpec {
            seed: u64::from(seed),
            kind: DatasetKind::Scienceqa,
            pool_size: pool_size as usize,
            eval_size: eval_size as usize,
            noise,
            ..SyntheticSpec::default()
        });
        let store = RetrievalStore::new(&corpus.dataset.pool, &corpus.embeddings, corpus.embeddings.clone())
            .map_err(|e| e.to_string())?;
        Ok(Demo {
            dataset: corpus.dataset,
            store,
        })
    }

    fn eval_question(&self, id: &str) -> Result<&MultimodalQuestion, String> {
        self.dataset
            .eval
            .iter()
            .find(|q| q.id == id)
            .ok_or_else(|| format!("no eval question `{id}`"))
    }

    fn pool_topic(&self, id: &str) -> &str {
        self.dataset.pool_question(id).map_or("", topic)
    }

    /// Eval questions as `[{id, text, topic, has_image}]`.
    pub fn questions(&self) -> String {
        let v: Vec<QuestionView> = self
            .dataset
            .eval
            .iter()
            .map(|q| QuestionView {
                id: &q.id,
                text: &q.text_context,
                topic: topic(q),
                has_image: q.has_image(),
            })
            .collect();
        to_json(&v)
    }

    /// Pool vectors of `channel`'s pool space projected onto their top two
    /// principal axes, plus the query vector of `id` on the same axes when
    /// it has one.
    pub fn scatter(&self, channel: &str, id: &str) -> Result<String, String> {
        let channel: Channel = channel.parse()?;
        let q = self.eval_question(id)?;
        let pool = self
            .store
            .pool_matrix(channel.pool_space())
            .ok_or_else(|| format!("no pool vectors in {}", channel.pool_space()))?;
        let rows: Vec<&[f32]> = pool.rows().map(|(_, r)| r).collect();
        let axes = Projection::fit(&rows);
        let points = pool
            .rows()
            .map(|(pid, r)| {
                let (x, y) = axes.apply(r);
                Point {
                    id: pid,
                    topic: self.pool_topic(pid),
                    x,
                    y,
                }
            })
            .collect();
        let query = self
            .store
            .query_embeddings()
            .get(channel.query_space())
            .and_then(|m| m.lookup(&q.id).ok())
            .map(|r| {
                let (x, y) = axes.apply(r);
                Point {
                    id: &q.id,
                    topic: topic(q),
                    x,
                    y,
                }
            });
        Ok(to_json(&Scatter {
            space: channel.pool_space().to_string(),
            pool: points,
            query,
        }))
    }

    /// Top-`k` pool items for question `id` through one channel.
    pub fn search(&self, id: &str, channel: &str, k: u32) -> Result<String, String> {
        let channel: Channel = channel.parse()?;
        let q = self.eval_question(id)?;
        let lists = retrieve_channels(q, &[ChannelRequest::new(channel, k as usize)], &self.store, 1)
            .map_err(|e| e.to_string())?;
        let hits: Vec<HitView> = lists[&channel]
            .entries
            .iter()
            .enumerate()
            .map(|(i, h)| {
                let t = self.pool_topic(&h.id);
                HitView {
                    rank: i + 1,
                    id: &h.id,
                    topic: t,
                    score: h.score,
                    same_topic: t == topic(q),
                }
            })
            .collect();
        Ok(to_json(&hits))
    }

    /// Stratified sample over a comma-separated channel list and the prompt
    /// it produces for question `id`.
    pub fn assemble(&self, id: &str, channels: &str, shots: u32) -> Result<String, String> {
        let q = self.eval_question(id)?;
        let table = StrategyTable::uniform(DatasetKind::Scienceqa, parse_channels(channels)?);
        let ctx = EvalContext::new(&self.dataset, &self.store);
        let (bundle, trace) =
            prepare_bundle(&ctx, q, &StrategySource::Table(table), shots as usize).map_err(|e| e.to_string())?;
        let demonstrations = bundle
            .demonstrations_used
            .iter()
            .map(|d| DemoView {
                id: &d.question.id,
                channel: d.source_channel,
                rank: d.rank_in_channel,
                score: d.score,
                topic: self.pool_topic(&d.question.id),
            })
            .collect();
        let quotas = trace
            .strategy
            .quotas()
            .into_iter()
            .map(|(channel, quota)| QuotaView { channel, quota })
            .collect();
        Ok(to_json(&AssembleView {
            quotas,
            demonstrations,
            shortfall: trace.sample.shortfall,
            flags: trace.flags,
            prompt: bundle.rendered_prompt.clone(),
            token_estimate: bundle.token_estimate,
            strategy: trace.strategy,
        }))
    }

    /// Caption of the test question's image, if any (for the page header).
    pub fn caption(&self, id: &str) -> Result<String, String> {
        let q = self.eval_question(id)?;
        Ok(visual_for(q, &self.dataset.visual).caption)
    }
}

/// Mean and two leading principal axes, by power iteration with deflation.
struct Projection {
    mean: Vec<f64>,
    axes: [Vec<f64>; 2],
}

impl Projection {
    fn fit(rows: &[&[f32]]) -> Self {
        let dim = rows.first().map_or(0, |r| r.len());
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, &x) in mean.iter_mut().zip(*r) {
                *m += x as f64 / n;
            }
        }
        let centered: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().zip(&mean).map(|(&x, m)| x as f64 - m).collect())
            .collect();
        let first = leading_axis(&centered, None);
        let second = leading_axis(&centered, Some(&first));
        Self {
            mean,
            axes: [first, second],
        }
    }

    fn apply(&self, row: &[f32]) -> (f64, f64) {
        let proj = |axis: &[f64]| {
            row.iter()
                .zip(&self.mean)
                .zip(axis)
                .map(|((&x, m), a)| (x as f64 - m) * a)
                .sum::<f64>()
        };
        (proj(&self.axes[0]), proj(&self.axes[1]))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn leading_axis(rows: &[Vec<f64>], orthogonal_to: Option<&[f64]>) -> Vec<f64> {
    let dim = rows.first().map_or(0, Vec::len);
    // deterministic, non-degenerate start
    let mut v: Vec<f64> = (0..dim).map(|i| 1.0 + (i as f64 * 0.618).fract()).collect();
    for _ in 0..100 {
        if let Some(u) = orthogonal_to {
            let p = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
        }
        let mut next = vec![0.0; dim];
        for r in rows {
            let s = dot(r, &v);
            next.iter_mut().zip(r).for_each(|(x, y)| *x += s * y);
        }
        let norm = dot(&next, &next).sqrt();
        if norm < 1e-12 {
            break;
        }
        v = next.into_iter().map(|x| x / norm).collect();
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn demo() -> Demo {
        Demo::new(7, 120, 10, 0.5).unwrap()
    }

    fn first_with_image(d: &Demo) -> String {
        let qs: Value = serde_json::from_str(&d.questions()).unwrap();
        qs.as_array()
            .unwrap()
            .iter()
            .find(|q| q["has_image"] == true)
            .map(|q| q["id"].as_str().unwrap().to_string())
            .unwrap()
    }

    #[test]
    fn quotas_split_remainder_to_earlier_channels() {
        let v: Value = serde_json::from_str(&quotas("T2I, T2T", 5).unwrap()).unwrap();
        assert_eq!(v[0]["channel"], "T2I");
        assert_eq!(v[0]["quota"], 3);
        assert_eq!(v[1]["quota"], 2);
        assert!(quotas("X2Y", 2).is_err());
        assert_eq!(quotas("", 4).unwrap(), "[]");
    }

    #[test]
    fn search_is_ranked() {
        let d = demo();
        let id = first_with_image(&d);
        let hits: Value = serde_json::from_str(&d.search(&id, "I2I", 8).unwrap()).unwrap();
        let hits = hits.as_array().unwrap();
        assert_eq!(hits.len(), 8);
        let scores: Vec<f64> = hits.iter().map(|h| h["score"].as_f64().unwrap()).collect();
        assert!(scores.windows(2).all(|w| w[0] >= w[1]));
        assert!(d.search("nope", "I2I", 3).is_err());
    }

    #[test]
    fn assemble_matches_quotas_and_renders_prompt() {
        let d = demo();
        let id = first_with_image(&d);
        let v: Value = serde_json::from_str(&d.assemble(&id, "I2I,T2T", 4).unwrap()).unwrap();
        let demos = v["demonstrations"].as_array().unwrap();
        assert_eq!(demos.len(), 4);
        let prompt = v["prompt"].as_str().unwrap();
        for demo in demos {
            assert!(prompt.contains(&format!("Question {} ", demo["id"].as_str().unwrap())));
        }
        assert!(prompt.trim_end().ends_with("Solution:"));
    }

    #[test]
    fn scatter_separates_topics() {
        let d = Demo::new(1, 150, 5, 0.2).unwrap();
        let id = first_with_image(&d);
        let v: Value = serde_json::from_str(&d.scatter("I2I", &id).unwrap()).unwrap();
        let pts = v["pool"].as_array().unwrap();
        assert!(!pts.is_empty());
        assert!(v["query"].is_object());
        // projected points spread out rather than collapsing to one spot
        let xs: Vec<f64> = pts.iter().map(|p| p["x"].as_f64().unwrap()).collect();
        let spread = xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread > 0.1, "spread {spread}");
    }
}
