#![allow(dead_code)]

use std::collections::BTreeMap;

use mmret_core::dataset::{DatasetKind, IngestReport, LoadedDataset};
use mmret_core::embedding::{EmbeddingMatrix, EmbeddingSet};
use mmret_core::gateway::{Rulebook, RulePredicate};
use mmret_core::{MultimodalQuestion, Space, Split};

pub const CORRECT: &str = "Reasoning done. The answer is (A).";
pub const WRONG: &str = "Reasoning done. The answer is (B).";

pub fn basis(dim: usize, i: usize) -> Vec<f32> {
    let mut v = vec![0.0; dim];
    v[i] = 1.0;
    v
}

pub fn question(id: &str, split: Split, image: bool, topic: &str) -> MultimodalQuestion {
    MultimodalQuestion {
        id: id.into(),
        text_context: format!("Which option fits {id}?"),
        image_ref: image.then(|| format!("images/{id}.png")),
        choices: vec!["first".into(), "second".into()],
        gold_answer: "A".into(),
        rationale: (split == Split::Pool).then(|| format!("Worked solution for {id}.")),
        categories: BTreeMap::from([("topic".to_string(), topic.to_string())]),
        split,
    }
}

pub fn matrix(space: Space, dim: usize, rows: Vec<(String, Vec<f32>)>) -> EmbeddingMatrix {
    let ids = rows.iter().map(|(id, _)| id.clone()).collect();
    let data = rows.into_iter().flat_map(|(_, v)| v).collect();
    EmbeddingMatrix::from_rows(space, dim, ids, data).unwrap()
}

pub fn dataset(kind: DatasetKind, pool: Vec<MultimodalQuestion>, eval: Vec<MultimodalQuestion>) -> LoadedDataset {
    LoadedDataset {
        kind,
        report: IngestReport {
            records_read: pool.len() + eval.len(),
            filtered: 0,
            pool: pool.len(),
            eval: eval.len(),
            non_selectable: pool.iter().filter(|q| !q.is_selectable()).map(|q| q.id.clone()).collect(),
        },
        pool,
        eval,
        visual: BTreeMap::new(),
    }
}

/// Twenty ScienceQA-style eval questions `e00..e19`, all with images, and
/// twenty pool items `p00..p19`. In the image space `e_i` and `p_i` are both
/// basis vector `i`, so `p_i` is the I2I rank-1 demonstration of `e_i`. Pool
/// item `p_i` shares its topic with `e_i` only for `i < 12`.
pub fn twenty_question_fixture() -> (LoadedDataset, EmbeddingSet) {
    let dim = 24;
    let mut pool = Vec::new();
    let mut eval = Vec::new();
    let mut image_rows = Vec::new();
    let mut text_rows = Vec::new();
    for i in 0..20 {
        let topic = format!("t{i:02}");
        let pid = format!("p{i:02}");
        let eid = format!("e{i:02}");
        let pool_topic = if i < 12 { topic.clone() } else { "unrelated".to_string() };
        pool.push(question(&pid, Split::Pool, true, &pool_topic));
        eval.push(question(&eid, Split::Eval, true, &topic));
        image_rows.push((pid.clone(), basis(dim, i)));
        image_rows.push((eid.clone(), basis(dim, i)));
        text_rows.push((pid, basis(dim, (i + 1) % dim)));
        text_rows.push((eid, basis(dim, i)));
    }
    let mut emb = EmbeddingSet::new();
    emb.insert(matrix(Space::IntraImage, dim, image_rows.clone())).unwrap();
    emb.insert(matrix(Space::CrossImage, dim, image_rows)).unwrap();
    emb.insert(matrix(Space::IntraText, dim, text_rows.clone())).unwrap();
    emb.insert(matrix(Space::CrossText, dim, text_rows)).unwrap();
    (dataset(DatasetKind::Scienceqa, pool, eval), emb)
}

/// Correct exactly when the I2I rank-1 demonstration shares the question's
/// topic.
pub fn topic_rulebook() -> Rulebook {
    Rulebook::with_default(WRONG).rule(
        RulePredicate::RankOneSharesCategory {
            channel: mmret_core::Channel::I2I,
            tag: "topic".into(),
        },
        CORRECT,
    )
}
