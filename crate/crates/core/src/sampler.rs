//! Strategy selection and stratified sampling across channel lists.
//!
//! A [`StrategyTable`] decides, per dataset kind and image presence, which
//! channels are active. [`stratified_sample`] then draws from the active
//! channels' ranked lists in rounds, one candidate per channel per round, so
//! the prompt mixes retrieval directions instead of drawing everything from
//! the strongest channel.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetKind;
use crate::error::{Error, Result};
use crate::index::RankedList;
use crate::model::{Channel, Demonstration, MultimodalQuestion};
use crate::retrieval::ChannelRequest;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingStrategy {
    pub name: String,
    /// Interleave precedence.
    pub active_channels: Vec<Channel>,
    pub total_shots: usize,
}

impl SamplingStrategy {
    /// An empty channel list always means zero shots.
    pub fn new(name: impl Into<String>, active_channels: Vec<Channel>, total_shots: usize) -> Self {
        let total_shots = if active_channels.is_empty() { 0 } else { total_shots };
        Self {
            name: name.into(),
            active_channels,
            total_shots,
        }
    }

    pub fn zero_shot(name: impl Into<String>) -> Self {
        Self::new(name, Vec::new(), 0)
    }

    /// Each active channel gets `total / n`; the first `total % n` channels
    /// in active order get one more.
    pub fn quotas(&self) -> Vec<(Channel, usize)> {
        let n = self.active_channels.len();
        if n == 0 {
            return Vec::new();
        }
        let base = self.total_shots / n;
        let extra = self.total_shots % n;
        self.active_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, base + usize::from(i < extra)))
            .collect()
    }

    pub fn quota_of(&self, channel: Channel) -> usize {
        self.quotas()
            .into_iter()
            .find(|(c, _)| *c == channel)
            .map_or(0, |(_, k)| k)
    }

    pub fn channel_requests(&self) -> Vec<ChannelRequest> {
        self.quotas().into_iter().map(|(c, k)| ChannelRequest::new(c, k)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub with_image: Vec<Channel>,
    pub without_image: Vec<Channel>,
}

/// Active channels per dataset kind and image presence.
///
/// Stored as `{dataset: {with_image: [...], without_image: [...]}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StrategyTable {
    pub rows: BTreeMap<String, StrategyRow>,
}

impl Default for StrategyTable {
    fn default() -> Self {
        let mut rows = BTreeMap::new();
        rows.insert(
            DatasetKind::Scienceqa.as_str().to_string(),
            StrategyRow {
                with_image: vec![Channel::I2I],
                without_image: vec![Channel::T2I, Channel::T2T],
            },
        );
        rows.insert(
            DatasetKind::Mathvista.as_str().to_string(),
            StrategyRow {
                with_image: vec![Channel::T2T, Channel::I2I],
                without_image: vec![],
            },
        );
        Self { rows }
    }
}

impl StrategyTable {
    /// A table that applies the same channels to every question of `kind`.
    pub fn uniform(kind: DatasetKind, channels: Vec<Channel>) -> Self {
        let mut rows = BTreeMap::new();
        rows.insert(
            kind.as_str().to_string(),
            StrategyRow {
                with_image: channels.clone(),
                without_image: channels,
            },
        );
        Self { rows }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("strategy table: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    /// Every channel any row can activate for `kind`.
    pub fn channels_for(&self, kind: DatasetKind) -> BTreeSet<Channel> {
        self.rows
            .get(kind.as_str())
            .map(|r| r.with_image.iter().chain(&r.without_image).copied().collect())
            .unwrap_or_default()
    }
}

pub fn select_strategy(
    q: &MultimodalQuestion,
    kind: DatasetKind,
    table: &StrategyTable,
    total_shots: usize,
) -> Result<SamplingStrategy> {
    let row = table
        .rows
        .get(kind.as_str())
        .ok_or_else(|| Error::UnknownDataset(kind.as_str().to_string()))?;
    let (suffix, channels) = if q.has_image() {
        ("with_image", &row.with_image)
    } else {
        ("without_image", &row.without_image)
    };
    Ok(SamplingStrategy::new(format!("{kind}/{suffix}"), channels.clone(), total_shots))
}

/// One draw from a channel list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pick {
    pub id: String,
    pub channel: Channel,
    pub rank: usize,
    pub score: f32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Interleaved {
    pub picks: Vec<Pick>,
    /// Channels that ran out of unused candidates before meeting quota.
    pub shortfall: BTreeMap<Channel, usize>,
}

/// Round-robin draw over the active channels.
///
/// Each round visits the active channels in order and takes each one's next
/// candidate not already picked. A channel that runs dry is skipped for the
/// remaining rounds and its deficit reported; other channels never make it
/// up.
pub fn interleave(lists: &BTreeMap<Channel, RankedList>, strategy: &SamplingStrategy) -> Interleaved {
    let quotas = strategy.quotas();
    let mut cursors = vec![0usize; quotas.len()];
    let mut taken = vec![0usize; quotas.len()];
    let mut exhausted = vec![false; quotas.len()];
    let mut used: BTreeSet<String> = BTreeSet::new();
    let mut out = Interleaved::default();

    loop {
        let mut progressed = false;
        for (slot, &(channel, quota)) in quotas.iter().enumerate() {
            if taken[slot] >= quota || exhausted[slot] {
                continue;
            }
            let entries = lists.get(&channel).map_or(&[][..], |l| &l.entries[..]);
            while cursors[slot] < entries.len() && used.contains(&entries[cursors[slot]].id) {
                cursors[slot] += 1;
            }
            match entries.get(cursors[slot]) {
                Some(hit) => {
                    used.insert(hit.id.clone());
                    out.picks.push(Pick {
                        id: hit.id.clone(),
                        channel,
                        rank: cursors[slot] + 1,
                        score: hit.score,
                    });
                    cursors[slot] += 1;
                    taken[slot] += 1;
                    progressed = true;
                }
                None => {
                    exhausted[slot] = true;
                    out.shortfall.insert(channel, quota - taken[slot]);
                }
            }
        }
        if !progressed {
            break;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub demonstrations: Vec<Demonstration>,
    pub shortfall: BTreeMap<Channel, usize>,
}

/// [`interleave`] followed by resolving each pick against the pool.
pub fn stratified_sample<'a, F>(
    lists: &BTreeMap<Channel, RankedList>,
    strategy: &SamplingStrategy,
    pool: F,
) -> Result<SampleOutcome>
where
    F: Fn(&str) -> Option<&'a MultimodalQuestion>,
{
    let Interleaved { picks, shortfall } = interleave(lists, strategy);
    let demonstrations = picks
        .into_iter()
        .map(|p| {
            let question = pool(&p.id).ok_or_else(|| Error::UnknownId(p.id.clone()))?;
            Ok(Demonstration {
                question: question.clone(),
                source_channel: p.channel,
                rank_in_channel: p.rank,
                score: p.score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleOutcome {
        demonstrations,
        shortfall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::Hit;
    use crate::model::Split;

    fn list(channel: Channel, entries: &[(&str, f32)]) -> RankedList {
        RankedList {
            channel,
            entries: entries
                .iter()
                .map(|(id, s)| Hit {
                    id: id.to_string(),
                    score: *s,
                })
                .collect(),
            k_requested: entries.len(),
        }
    }

    fn q(image: bool) -> MultimodalQuestion {
        MultimodalQuestion {
            id: "q".into(),
            text_context: "t".into(),
            image_ref: image.then(|| "q.png".into()),
            choices: vec![],
            gold_answer: "1".into(),
            rationale: None,
            categories: Default::default(),
            split: Split::Eval,
        }
    }

    #[test]
    fn table_rows() {
        let t = StrategyTable::default();
        let s = select_strategy(&q(true), DatasetKind::Scienceqa, &t, 2).unwrap();
        assert_eq!(s.active_channels, [Channel::I2I]);
        assert_eq!(s.quotas(), [(Channel::I2I, 2)]);

        let s = select_strategy(&q(false), DatasetKind::Scienceqa, &t, 2).unwrap();
        assert_eq!(s.active_channels, [Channel::T2I, Channel::T2T]);
        assert_eq!(s.quotas(), [(Channel::T2I, 1), (Channel::T2T, 1)]);

        let s = select_strategy(&q(false), DatasetKind::Mathvista, &t, 4).unwrap();
        assert!(s.active_channels.is_empty());
        assert_eq!(s.total_shots, 0);

        let s = select_strategy(&q(true), DatasetKind::Mathvista, &t, 3).unwrap();
        assert_eq!(s.quotas(), [(Channel::T2T, 2), (Channel::I2I, 1)]);

        assert!(matches!(
            select_strategy(&q(true), DatasetKind::Generic, &t, 2),
            Err(Error::UnknownDataset(_))
        ));
    }

    #[test]
    fn table_json_shape() {
        let json = r#"{"scienceqa": {"with_image": ["I2I"], "without_image": ["T2I", "T2T"]},
                       "mathvista": {"with_image": ["T2T", "I2I"], "without_image": []}}"#;
        assert_eq!(StrategyTable::from_json(json).unwrap(), StrategyTable::default());
        let back = StrategyTable::from_json(&StrategyTable::default().to_json()).unwrap();
        assert_eq!(back, StrategyTable::default());
    }

    #[test]
    fn disjoint_single_round() {
        let s = SamplingStrategy::new("s", vec![Channel::T2I, Channel::T2T], 2);
        let lists: BTreeMap<_, _> = [
            (Channel::T2I, list(Channel::T2I, &[("a", 0.9)])),
            (Channel::T2T, list(Channel::T2T, &[("b", 0.8)])),
        ]
        .into();
        let out = interleave(&lists, &s);
        assert_eq!(
            out.picks,
            [
                Pick { id: "a".into(), channel: Channel::T2I, rank: 1, score: 0.9 },
                Pick { id: "b".into(), channel: Channel::T2T, rank: 1, score: 0.8 },
            ]
        );
        assert!(out.shortfall.is_empty());
    }

    #[test]
    fn dedup_trace() {
        let s = SamplingStrategy::new("s", vec![Channel::T2T, Channel::I2I], 4);
        let lists: BTreeMap<_, _> = [
            (Channel::T2T, list(Channel::T2T, &[("a", 0.9), ("b", 0.8), ("c", 0.7)])),
            (Channel::I2I, list(Channel::I2I, &[("a", 0.95), ("d", 0.6)])),
        ]
        .into();
        let out = interleave(&lists, &s);
        let got: Vec<_> = out.picks.iter().map(|p| (p.id.as_str(), p.channel, p.rank)).collect();
        assert_eq!(got, [("a", Channel::T2T, 1), ("d", Channel::I2I, 2), ("b", Channel::T2T, 2)]);
        assert_eq!(out.shortfall, [(Channel::I2I, 1)].into());
    }

    #[test]
    fn zero_total_is_empty() {
        let s = SamplingStrategy::new("s", vec![Channel::T2T], 0);
        let lists: BTreeMap<_, _> = [(Channel::T2T, list(Channel::T2T, &[("a", 0.9)]))].into();
        assert!(interleave(&lists, &s).picks.is_empty());
        assert!(interleave(&lists, &SamplingStrategy::zero_shot("z")).picks.is_empty());
    }

    #[test]
    fn missing_pool_entry_is_an_error() {
        let s = SamplingStrategy::new("s", vec![Channel::T2T], 1);
        let lists: BTreeMap<_, _> = [(Channel::T2T, list(Channel::T2T, &[("ghost", 0.9)]))].into();
        let err = stratified_sample(&lists, &s, |_| None).unwrap_err();
        assert!(matches!(err, Error::UnknownId(ref id) if id == "ghost"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn channel_set() -> impl Strategy<Value = Vec<Channel>> {
            proptest::sample::subsequence(Channel::ALL.to_vec(), 0..=4).prop_shuffle()
        }

        fn lists_strategy() -> impl Strategy<Value = BTreeMap<Channel, RankedList>> {
            proptest::collection::vec(proptest::collection::vec(0u8..12, 0..8), 4).prop_map(|per| {
                Channel::ALL
                    .iter()
                    .zip(per)
                    .map(|(&c, ids)| {
                        let mut seen = BTreeSet::new();
                        let entries: Vec<(String, f32)> = ids
                            .into_iter()
                            .filter(|i| seen.insert(*i))
                            .enumerate()
                            .map(|(r, i)| (format!("p{i}"), 1.0 - r as f32 * 0.1))
                            .collect();
                        let refs: Vec<(&str, f32)> = entries.iter().map(|(s, f)| (s.as_str(), *f)).collect();
                        (c, list(c, &refs))
                    })
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn quotas_sum_to_total(active in channel_set(), total in 0usize..40) {
                let s = SamplingStrategy::new("s", active.clone(), total);
                let sum: usize = s.quotas().iter().map(|(_, k)| k).sum();
                prop_assert_eq!(sum, if active.is_empty() { 0 } else { total });
                let ks: Vec<usize> = s.quotas().iter().map(|(_, k)| *k).collect();
                prop_assert!(ks.windows(2).all(|w| w[0] >= w[1] && w[0] - w[1] <= 1));
            }

            #[test]
            fn output_is_unique_bounded_and_drawn_from_inputs(
                active in channel_set(), total in 0usize..12, lists in lists_strategy()
            ) {
                let s = SamplingStrategy::new("s", active, total);
                let out = interleave(&lists, &s);
                let ids: BTreeSet<_> = out.picks.iter().map(|p| p.id.clone()).collect();
                prop_assert_eq!(ids.len(), out.picks.len());
                prop_assert!(out.picks.len() <= s.total_shots);
                for p in &out.picks {
                    let entry = &lists[&p.channel].entries[p.rank - 1];
                    prop_assert_eq!(&entry.id, &p.id);
                }
                for (c, k) in s.quotas() {
                    let n = out.picks.iter().filter(|p| p.channel == c).count();
                    prop_assert!(n <= k);
                    prop_assert_eq!(n + out.shortfall.get(&c).copied().unwrap_or(0), k);
                }
            }

            #[test]
            fn inactive_channels_do_not_matter(
                active in channel_set(), total in 0usize..12, lists in lists_strategy(), other in lists_strategy()
            ) {
                let s = SamplingStrategy::new("s", active.clone(), total);
                let mut mixed = other.clone();
                for c in &active {
                    mixed.insert(*c, lists[c].clone());
                }
                prop_assert_eq!(interleave(&lists, &s), interleave(&mixed, &s));
            }

            #[test]
            fn single_channel_is_prefix(total in 0usize..12, lists in lists_strategy(), which in 0usize..4) {
                let c = Channel::ALL[which];
                let s = SamplingStrategy::new("s", vec![c], total);
                let out = interleave(&lists, &s);
                let prefix: Vec<&str> = lists[&c].ids().take(total).collect();
                let got: Vec<&str> = out.picks.iter().map(|p| p.id.as_str()).collect();
                prop_assert_eq!(got, prefix);
            }
        }
    }
}
