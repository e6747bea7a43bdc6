//! Domain types shared by every stage of the pipeline.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Which side of the experiment a question belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pool,
    Eval,
}

/// One multiple-choice or free-form QA item.
///
/// `categories` maps a column tag (e.g. `NAT`, `G1-6`, `FQA`) to a free-form
/// value. A question counts toward a tag's accuracy whenever the tag is
/// present as a key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultimodalQuestion {
    pub id: String,
    pub text_context: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    #[serde(default)]
    pub choices: Vec<String>,
    pub gold_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    #[serde(default)]
    pub categories: BTreeMap<String, String>,
    pub split: Split,
}

impl MultimodalQuestion {
    pub fn has_image(&self) -> bool {
        self.image_ref.is_some()
    }

    /// A pool item can serve as a demonstration only when it carries both a
    /// rationale and a gold answer.
    pub fn is_selectable(&self) -> bool {
        self.rationale.as_deref().is_some_and(|r| !r.trim().is_empty())
            && !self.gold_answer.trim().is_empty()
    }

    /// Choice labels in display order: `A`, `B`, ...
    pub fn choice_labels(&self) -> impl Iterator<Item = String> + '_ {
        (0..self.choices.len()).map(choice_label)
    }
}

/// Label for the choice at `index` (`0 -> "A"`). Past `Z` the labels continue
/// as `AA`, `AB`, ... which no real benchmark reaches.
pub fn choice_label(index: usize) -> String {
    let mut n = index;
    let mut out = Vec::new();
    loop {
        out.push(b'A' + (n % 26) as u8);
        if n < 26 {
            break;
        }
        n = n / 26 - 1;
    }
    out.reverse();
    String::from_utf8(out).expect("ascii")
}

/// Inverse of [`choice_label`], case-insensitive.
pub fn label_index(label: &str) -> Option<usize> {
    let label = label.trim();
    if label.is_empty() || !label.chars().all(|c| c.is_ascii_alphabetic()) {
        return None;
    }
    let mut n: usize = 0;
    for (i, c) in label.to_ascii_uppercase().bytes().enumerate() {
        let digit = (c - b'A') as usize;
        n = if i == 0 { digit } else { (n + 1) * 26 + digit };
    }
    Some(n)
}

/// Text surrogate for an image: caption followed by OCR text.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualInfo {
    #[serde(default)]
    pub caption: String,
    #[serde(default, alias = "ocr_text")]
    pub ocr: String,
}

impl VisualInfo {
    pub fn new(caption: impl Into<String>, ocr: impl Into<String>) -> Self {
        Self {
            caption: caption.into(),
            ocr: ocr.into(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.caption.is_empty() && self.ocr.is_empty()
    }
}

/// An embedding space. `CrossText` and `CrossImage` live in the same joint
/// comparison space; the intra spaces are each their own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    IntraText,
    IntraImage,
    CrossText,
    CrossImage,
}

impl Space {
    pub const ALL: [Space; 4] = [
        Space::IntraText,
        Space::IntraImage,
        Space::CrossText,
        Space::CrossImage,
    ];

    /// Tag byte used by the EMB1 header.
    pub fn tag(self) -> u8 {
        match self {
            Space::IntraText => 0,
            Space::IntraImage => 1,
            Space::CrossText => 2,
            Space::CrossImage => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Space> {
        Space::ALL.get(tag as usize).copied()
    }

    pub fn is_image(self) -> bool {
        matches!(self, Space::IntraImage | Space::CrossImage)
    }

    /// Two spaces are comparable iff they share a comparison space.
    pub fn comparable_with(self, other: Space) -> bool {
        self.comparison_group() == other.comparison_group()
    }

    fn comparison_group(self) -> u8 {
        match self {
            Space::IntraText => 0,
            Space::IntraImage => 1,
            Space::CrossText | Space::CrossImage => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Space::IntraText => "intra_text",
            Space::IntraImage => "intra_image",
            Space::CrossText => "cross_text",
            Space::CrossImage => "cross_image",
        }
    }
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Space {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Space::ALL
            .into_iter()
            .find(|sp| sp.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown space `{s}`"))
    }
}

/// A retrieval direction: query modality to pool modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    T2T,
    T2I,
    I2T,
    I2I,
}

impl Channel {
    pub const ALL: [Channel; 4] = [Channel::T2T, Channel::T2I, Channel::I2T, Channel::I2I];

    /// `(query space, pool space)` for this channel.
    pub fn spaces(self) -> (Space, Space) {
        match self {
            Channel::T2T => (Space::IntraText, Space::IntraText),
            Channel::I2I => (Space::IntraImage, Space::IntraImage),
            Channel::I2T => (Space::CrossImage, Space::CrossText),
            Channel::T2I => (Space::CrossText, Space::CrossImage),
        }
    }

    pub fn query_space(self) -> Space {
        self.spaces().0
    }

    pub fn pool_space(self) -> Space {
        self.spaces().1
    }

    /// Channels whose query side is the test question's image.
    pub fn needs_query_image(self) -> bool {
        self.query_space().is_image()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::T2T => "T2T",
            Channel::T2I => "T2I",
            Channel::I2T => "I2T",
            Channel::I2I => "I2I",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Channel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Channel::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown channel `{s}` (expected T2T, T2I, I2T or I2I)"))
    }
}

/// A pool question chosen for the prompt, with the retrieval evidence that
/// put it there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub question: MultimodalQuestion,
    pub source_channel: Channel,
    /// 1-based rank within the channel's ranked list.
    pub rank_in_channel: usize,
    pub score: f32,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_question() -> MultimodalQuestion {
        MultimodalQuestion {
            id: "q1".into(),
            text_context: "Which magnet pole is north?".into(),
            image_ref: Some("img/q1.png".into()),
            choices: vec!["left".into(), "right".into()],
            gold_answer: "B".into(),
            rationale: Some("Opposite poles attract.".into()),
            categories: [("NAT".to_string(), "natural science".to_string())].into(),
            split: Split::Pool,
        }
    }

    #[test]
    fn channel_space_pairs() {
        assert_eq!(Channel::T2T.spaces(), (Space::IntraText, Space::IntraText));
        assert_eq!(Channel::I2I.spaces(), (Space::IntraImage, Space::IntraImage));
        assert_eq!(Channel::I2T.spaces(), (Space::CrossImage, Space::CrossText));
        assert_eq!(Channel::T2I.spaces(), (Space::CrossText, Space::CrossImage));
        for c in Channel::ALL {
            let (q, p) = c.spaces();
            assert!(q.comparable_with(p));
        }
        assert!(!Space::IntraText.comparable_with(Space::CrossText));
    }

    #[test]
    fn labels() {
        assert_eq!(choice_label(0), "A");
        assert_eq!(choice_label(25), "Z");
        assert_eq!(choice_label(26), "AA");
        assert_eq!(label_index("b"), Some(1));
        assert_eq!(label_index("AA"), Some(26));
        assert_eq!(label_index("1"), None);
    }

    #[test]
    fn selectable_requires_rationale() {
        let mut q = sample_question();
        assert!(q.is_selectable());
        q.rationale = Some("   ".into());
        assert!(!q.is_selectable());
        q.rationale = None;
        assert!(!q.is_selectable());
    }

    #[test]
    fn question_json_round_trip() {
        let q = sample_question();
        let json = serde_json::to_string(&q).unwrap();
        let back: MultimodalQuestion = serde_json::from_str(&json).unwrap();
        assert_eq!(q, back);

        let d = Demonstration {
            question: q,
            source_channel: Channel::I2T,
            rank_in_channel: 3,
            score: 0.25,
        };
        let back: Demonstration = serde_json::from_str(&serde_json::to_string(&d).unwrap()).unwrap();
        assert_eq!(d, back);
    }

    proptest! {
        #[test]
        fn label_round_trip(i in 0usize..2000) {
            prop_assert_eq!(label_index(&choice_label(i)), Some(i));
        }

        #[test]
        fn visual_info_round_trip(caption in ".*", ocr in ".*") {
            let v = VisualInfo::new(caption, ocr);
            let back: VisualInfo = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
            prop_assert_eq!(v, back);
        }
    }
}
