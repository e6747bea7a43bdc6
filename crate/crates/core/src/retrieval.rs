//! Four-channel retrieval: intra-modal (T2T, I2I) and cross-modal (T2I, I2T)
//! top-k lists for one test question.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingMatrix, EmbeddingSet};
use crate::error::{Error, Result};
use crate::index::{top_k, RankedList};
use crate::model::{Channel, MultimodalQuestion, Space};

pub const DEFAULT_OVERFETCH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelRequest {
    pub channel: Channel,
    pub k: usize,
}

impl ChannelRequest {
    pub fn new(channel: Channel, k: usize) -> Self {
        Self { channel, k }
    }
}

/// Pool matrices restricted to selectable demonstrations, plus the query
/// matrices for test questions.
#[derive(Debug, Clone)]
pub struct RetrievalStore {
    pool: HashMap<Space, EmbeddingMatrix>,
    queries: EmbeddingSet,
}

impl RetrievalStore {
    /// Builds the searchable pool. Every selectable pool item needs a vector
    /// in both text spaces, and in both image spaces when it has an image.
    /// Spaces with no loaded matrix are simply unavailable.
    pub fn new(
        pool_questions: &[MultimodalQuestion],
        pool_embeddings: &EmbeddingSet,
        query_embeddings: EmbeddingSet,
    ) -> Result<Self> {
        let mut pool = HashMap::new();
        for space in pool_embeddings.spaces() {
            let matrix = pool_embeddings.get(space).expect("listed space");
            let mut ids = Vec::new();
            for q in pool_questions.iter().filter(|q| q.is_selectable()) {
                let needed = !space.is_image() || q.has_image();
                if matrix.contains(&q.id) {
                    ids.push(q.id.as_str());
                } else if needed {
                    return Err(Error::MissingEmbedding {
                        id: q.id.clone(),
                        space,
                    });
                }
            }
            pool.insert(space, matrix.subset(ids)?);
        }
        Ok(Self {
            pool,
            queries: query_embeddings,
        })
    }

    pub fn pool_matrix(&self, space: Space) -> Option<&EmbeddingMatrix> {
        self.pool.get(&space)
    }

    pub fn query_embeddings(&self) -> &EmbeddingSet {
        &self.queries
    }

    pub fn has_space(&self, space: Space) -> bool {
        self.pool.contains_key(&space) && self.queries.get(space).is_some()
    }
}

/// The precomputed embedding of `q` in `space`.
pub fn embed_query<'a>(q: &MultimodalQuestion, space: Space, queries: &'a EmbeddingSet) -> Result<&'a [f32]> {
    queries
        .get(space)
        .and_then(|m| m.lookup(&q.id).ok())
        .ok_or_else(|| Error::MissingEmbedding {
            id: q.id.clone(),
            space,
        })
}

/// Checks that `q` can be served on `channel` without running a search.
pub fn check_channel(q: &MultimodalQuestion, channel: Channel, store: &RetrievalStore) -> Result<()> {
    if channel.needs_query_image() && !q.has_image() {
        return Err(Error::MissingImage {
            id: q.id.clone(),
            channel,
        });
    }
    let (query_space, pool_space) = channel.spaces();
    embed_query(q, query_space, &store.queries)?;
    if store.pool_matrix(pool_space).is_none() {
        return Err(Error::MissingEmbedding {
            id: "<pool>".into(),
            space: pool_space,
        });
    }
    Ok(())
}

/// Runs each requested channel, fetching `k * overfetch` candidates and
/// never returning `q` itself.
pub fn retrieve_channels(
    q: &MultimodalQuestion,
    requests: &[ChannelRequest],
    store: &RetrievalStore,
    overfetch: usize,
) -> Result<BTreeMap<Channel, RankedList>> {
    let overfetch = overfetch.max(1);
    let mut out = BTreeMap::new();
    for req in requests {
        if req.k == 0 {
            out.insert(req.channel, RankedList::empty(req.channel));
            continue;
        }
        check_channel(q, req.channel, store)?;
        let (query_space, pool_space) = req.channel.spaces();
        let query = embed_query(q, query_space, &store.queries)?;
        let pool = store.pool_matrix(pool_space).expect("checked above");
        let k = req.k.saturating_mul(overfetch);
        let entries = top_k(query, pool, k, &[q.id.as_str()])?;
        out.insert(
            req.channel,
            RankedList {
                channel: req.channel,
                entries,
                k_requested: k,
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::cosine;
    use crate::model::Split;

    fn question(id: &str, image: bool, rationale: bool, split: Split) -> MultimodalQuestion {
        MultimodalQuestion {
            id: id.into(),
            text_context: format!("text {id}"),
            image_ref: image.then(|| format!("{id}.png")),
            choices: vec!["x".into(), "y".into()],
            gold_answer: "A".into(),
            rationale: rationale.then(|| "because".into()),
            categories: Default::default(),
            split,
        }
    }

    fn set(space: Space, rows: &[(&str, [f32; 2])]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(
            space,
            2,
            rows.iter().map(|(i, _)| i.to_string()).collect(),
            rows.iter().flat_map(|(_, v)| *v).collect(),
        )
        .unwrap()
    }

    fn unit(deg: f32) -> [f32; 2] {
        let r = deg.to_radians();
        [r.cos(), r.sin()]
    }

    fn five_item_fixture() -> (Vec<MultimodalQuestion>, RetrievalStore, MultimodalQuestion) {
        let pool: Vec<_> = (1..=5).map(|i| question(&format!("p{i}"), i % 2 == 1, true, Split::Pool)).collect();
        let q = question("q", true, false, Split::Eval);
        let text_rows = [
            ("p1", unit(20.0)),
            ("p2", unit(70.0)),
            ("p3", unit(5.0)),
            ("p4", unit(120.0)),
            ("p5", unit(45.0)),
            ("q", unit(0.0)),
        ];
        let image_rows = [("p1", unit(90.0)), ("p3", unit(30.0)), ("p5", unit(10.0)), ("q", unit(0.0))];
        let mut emb = EmbeddingSet::new();
        emb.insert(set(Space::IntraText, &text_rows)).unwrap();
        emb.insert(set(Space::CrossText, &text_rows)).unwrap();
        emb.insert(set(Space::IntraImage, &image_rows)).unwrap();
        emb.insert(set(Space::CrossImage, &image_rows)).unwrap();
        let store = RetrievalStore::new(&pool, &emb, emb.clone()).unwrap();
        (pool, store, q)
    }

    #[test]
    fn t2t_matches_brute_force() {
        let (_, store, q) = five_item_fixture();
        // Oracle: cosine against every pool row, sorted.
        let query = embed_query(&q, Space::IntraText, store.query_embeddings()).unwrap();
        let pool = store.pool_matrix(Space::IntraText).unwrap();
        let mut oracle: Vec<(String, f64)> = pool
            .rows()
            .map(|(id, row)| (id.to_string(), cosine(query, row).unwrap()))
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        assert_eq!(oracle[0].0, "p3");
        assert_eq!(oracle[1].0, "p1");

        let lists = retrieve_channels(&q, &[ChannelRequest::new(Channel::T2T, 2)], &store, 1).unwrap();
        let ids: Vec<_> = lists[&Channel::T2T].ids().collect();
        assert_eq!(ids, ["p3", "p1"]);
    }

    #[test]
    fn overfetch_multiplies_k() {
        let (_, store, q) = five_item_fixture();
        let lists = retrieve_channels(&q, &[ChannelRequest::new(Channel::T2T, 2)], &store, 2).unwrap();
        assert_eq!(lists[&Channel::T2T].entries.len(), 4);
        assert_eq!(lists[&Channel::T2T].k_requested, 4);
    }

    #[test]
    fn zero_k_everywhere() {
        let (_, store, q) = five_item_fixture();
        let reqs: Vec<_> = Channel::ALL.iter().map(|&c| ChannelRequest::new(c, 0)).collect();
        let lists = retrieve_channels(&q, &reqs, &store, 4).unwrap();
        assert_eq!(lists.len(), 4);
        assert!(lists.values().all(|l| l.entries.is_empty()));
    }

    #[test]
    fn image_channel_needs_image() {
        let (_, store, _) = five_item_fixture();
        let q = question("p2", false, false, Split::Eval);
        let err = retrieve_channels(&q, &[ChannelRequest::new(Channel::I2I, 1)], &store, 1).unwrap_err();
        assert!(matches!(err, Error::MissingImage { channel: Channel::I2I, .. }));
    }

    #[test]
    fn image_pool_holds_only_image_items() {
        let (_, store, q) = five_item_fixture();
        let lists = retrieve_channels(&q, &[ChannelRequest::new(Channel::I2I, 10)], &store, 1).unwrap();
        let ids: Vec<_> = lists[&Channel::I2I].ids().collect();
        assert_eq!(ids, ["p5", "p3", "p1"]);
    }

    #[test]
    fn missing_query_embedding() {
        let (_, store, _) = five_item_fixture();
        let q = question("stranger", false, false, Split::Eval);
        match embed_query(&q, Space::CrossText, store.query_embeddings()).unwrap_err() {
            Error::MissingEmbedding { id, space } => {
                assert_eq!(id, "stranger");
                assert_eq!(space, Space::CrossText);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn non_selectable_items_filtered() {
        let mut pool: Vec<_> = (1..=3).map(|i| question(&format!("p{i}"), false, true, Split::Pool)).collect();
        pool[0].rationale = None;
        let rows = [("p1", unit(0.0)), ("p2", unit(30.0)), ("p3", unit(60.0)), ("q", unit(0.0))];
        let mut emb = EmbeddingSet::new();
        emb.insert(set(Space::IntraText, &rows)).unwrap();
        let store = RetrievalStore::new(&pool, &emb, emb.clone()).unwrap();
        let q = question("q", false, false, Split::Eval);
        let lists = retrieve_channels(&q, &[ChannelRequest::new(Channel::T2T, 3)], &store, 1).unwrap();
        let ids: Vec<_> = lists[&Channel::T2T].ids().collect();
        assert_eq!(ids, ["p2", "p3"]);
    }

    #[test]
    fn pool_item_without_text_vector_is_an_error() {
        let pool = vec![question("p1", false, true, Split::Pool), question("p2", false, true, Split::Pool)];
        let mut emb = EmbeddingSet::new();
        emb.insert(set(Space::IntraText, &[("p1", unit(0.0))])).unwrap();
        let err = RetrievalStore::new(&pool, &emb, emb.clone()).unwrap_err();
        assert!(matches!(err, Error::MissingEmbedding { ref id, space: Space::IntraText } if id == "p2"));
    }

    #[test]
    fn never_retrieves_itself() {
        let (pool, _, _) = five_item_fixture();
        let mut emb = EmbeddingSet::new();
        let rows: Vec<(&str, [f32; 2])> =
            pool.iter().enumerate().map(|(i, q)| (q.id.as_str(), unit(i as f32 * 10.0))).collect();
        emb.insert(set(Space::IntraText, &rows)).unwrap();
        let store = RetrievalStore::new(&pool, &emb, emb.clone()).unwrap();
        for q in &pool {
            let lists = retrieve_channels(q, &[ChannelRequest::new(Channel::T2T, 5)], &store, 1).unwrap();
            assert!(lists[&Channel::T2T].ids().all(|id| id != q.id));
            assert_eq!(lists[&Channel::T2T].entries.len(), 4);
        }
    }
}
