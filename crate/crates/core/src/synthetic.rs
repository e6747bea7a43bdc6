//! Seeded synthetic corpora: questions grouped into topics, with embeddings
//! clustered around a per-topic center in every space. Used by tests, the
//! CLI's `synth` command and the browser demo.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetKind, IngestReport, LoadedDataset};
use crate::embedding::{EmbeddingMatrix, EmbeddingSet};
use crate::model::{choice_label, MultimodalQuestion, Space, Split, VisualInfo};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub kind: DatasetKind,
    pub pool_size: usize,
    pub eval_size: usize,
    pub dim: usize,
    pub topics: usize,
    /// Fraction of items that carry an image.
    pub image_fraction: f64,
    /// Spread of items around their topic center (0 = identical).
    pub noise: f64,
    /// Eval items reuse pool ids (and vectors) instead of fresh ones.
    pub eval_from_pool: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            kind: DatasetKind::Scienceqa,
            pool_size: 200,
            eval_size: 20,
            dim: 32,
            topics: 5,
            image_fraction: 0.5,
            noise: 0.6,
            eval_from_pool: false,
        }
    }
}

pub struct SyntheticCorpus {
    pub dataset: LoadedDataset,
    /// Vectors for every pool and eval id (image spaces only for items with
    /// images).
    pub embeddings: EmbeddingSet,
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn perturb(rng: &mut ChaCha8Rng, center: &[f64], noise: f64) -> Vec<f32> {
    let dir = random_unit(rng, center.len());
    let v: Vec<f64> = center.iter().zip(&dir).map(|(c, d)| c + noise * d).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| (x / n) as f32).collect()
}

const TOPIC_NAMES: [&str; 8] = [
    "magnets", "plants", "weather", "maps", "fractions", "circuits", "grammar", "geometry",
];

pub fn generate(spec: &SyntheticSpec) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let topics = spec.topics.max(1);
    let centers: BTreeMap<Space, Vec<Vec<f64>>> = Space::ALL
        .into_iter()
        .map(|s| (s, (0..topics).map(|_| random_unit(&mut rng, spec.dim)).collect()))
        .collect();

    let make = |rng: &mut ChaCha8Rng, id: String, split: Split| {
        let topic = rng.gen_range(0..topics);
        let has_image = rng.gen_bool(spec.image_fraction.clamp(0.0, 1.0));
        let name = TOPIC_NAMES[topic % TOPIC_NAMES.len()];
        let gold = rng.gen_range(0..4);
        let q = MultimodalQuestion {
            text_context: format!("Question {id} about {name}."),
            image_ref: has_image.then(|| format!("images/{id}.png")),
            choices: (0..4).map(|c| format!("{name} option {c}")).collect(),
            gold_answer: choice_label(gold),
            rationale: (split == Split::Pool).then(|| format!("Recall the facts about {name}. It follows from them.")),
            categories: BTreeMap::from([
                ("topic".to_string(), name.to_string()),
                (if has_image { "IMG" } else { "NO" }.to_string(), String::new()),
            ]),
            split,
            id,
        };
        (q, topic)
    };

    let mut pool = Vec::with_capacity(spec.pool_size);
    let mut eval = Vec::with_capacity(spec.eval_size);
    let mut topic_of = BTreeMap::new();
    for i in 0..spec.pool_size {
        let (q, t) = make(&mut rng, format!("p{i:04}"), Split::Pool);
        topic_of.insert(q.id.clone(), t);
        pool.push(q);
    }
    if spec.eval_from_pool {
        for q in pool.iter().take(spec.eval_size) {
            eval.push(MultimodalQuestion {
                split: Split::Eval,
                rationale: None,
                ..q.clone()
            });
        }
    } else {
        for i in 0..spec.eval_size {
            let (q, t) = make(&mut rng, format!("e{i:04}"), Split::Eval);
            topic_of.insert(q.id.clone(), t);
            eval.push(q);
        }
    }

    let with_image: BTreeMap<&str, bool> = pool
        .iter()
        .chain(&eval)
        .map(|q| (q.id.as_str(), q.has_image()))
        .collect();
    let mut embeddings = EmbeddingSet::new();
    for space in Space::ALL {
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for (id, &topic) in &topic_of {
            if space.is_image() && !with_image[id.as_str()] {
                continue;
            }
            ids.push(id.clone());
            data.extend(perturb(&mut rng, &centers[&space][topic], spec.noise));
        }
        let m = EmbeddingMatrix::from_rows(space, spec.dim, ids, data).expect("synthetic rows are unit norm");
        embeddings.insert(m).expect("shared dim");
    }

    let visual = pool
        .iter()
        .chain(&eval)
        .filter(|q| q.has_image())
        .map(|q| {
            let topic = &q.categories["topic"];
            (q.id.clone(), VisualInfo::new(format!("a diagram about {topic}"), ""))
        })
        .collect();

    let report = IngestReport {
        records_read: pool.len() + eval.len(),
        filtered: 0,
        pool: pool.len(),
        eval: eval.len(),
        non_selectable: Vec::new(),
    };
    SyntheticCorpus {
        dataset: LoadedDataset {
            kind: spec.kind,
            pool,
            eval,
            visual,
            report,
        },
        embeddings,
    }
}
