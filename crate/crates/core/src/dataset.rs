//! Dataset ingestion: generic JSON, ScienceQA and MathVista adapters, visual
//! sidecars and external rationale files.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::{choice_label, label_index, MultimodalQuestion, Split, VisualInfo};
use crate::prompt::{extract_answer, ExtractionMethod};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Scienceqa,
    Mathvista,
    Generic,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Scienceqa => "scienceqa",
            DatasetKind::Mathvista => "mathvista",
            DatasetKind::Generic => "generic",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "scienceqa" => Ok(DatasetKind::Scienceqa),
            "mathvista" => Ok(DatasetKind::Mathvista),
            "generic" => Ok(DatasetKind::Generic),
            other => Err(format!("unknown dataset kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RationaleSource {
    #[default]
    Native,
    /// JSON map `id -> rationale` applied to pool items.
    ExternalFile { path: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub dataset_kind: DatasetKind,
    pub pool_path: PathBuf,
    pub eval_path: PathBuf,
    #[serde(default)]
    pub visual_info_path: Option<PathBuf>,
    #[serde(default)]
    pub rationale_source: RationaleSource,
    /// ScienceQA only: keep pool records whose native `split` equals this.
    #[serde(default)]
    pub pool_split_filter: Option<String>,
    /// ScienceQA only: keep eval records whose native `split` equals this.
    #[serde(default)]
    pub eval_split_filter: Option<String>,
}

impl DatasetConfig {
    pub fn new(kind: DatasetKind, pool: impl Into<PathBuf>, eval: impl Into<PathBuf>) -> Self {
        Self {
            dataset_kind: kind,
            pool_path: pool.into(),
            eval_path: eval.into(),
            visual_info_path: None,
            rationale_source: RationaleSource::Native,
            pool_split_filter: None,
            eval_split_filter: None,
        }
    }
}

/// Record accounting for one load.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub records_read: usize,
    /// Records skipped by a split filter.
    pub filtered: usize,
    pub pool: usize,
    pub eval: usize,
    /// Pool ids that cannot serve as demonstrations (no rationale or answer).
    pub non_selectable: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadedDataset {
    pub kind: DatasetKind,
    pub pool: Vec<MultimodalQuestion>,
    pub eval: Vec<MultimodalQuestion>,
    pub visual: BTreeMap<String, VisualInfo>,
    pub report: IngestReport,
}

impl LoadedDataset {
    /// Canonical, deterministic JSON dump (pool then eval, generic schema).
    pub fn canonical_json(&self) -> String {
        let all: Vec<&MultimodalQuestion> = self.pool.iter().chain(self.eval.iter()).collect();
        serde_json::to_string_pretty(&all).expect("questions serialize")
    }

    pub fn pool_question(&self, id: &str) -> Option<&MultimodalQuestion> {
        self.pool.iter().find(|q| q.id == id)
    }
}

pub fn load_dataset(config: &DatasetConfig) -> Result<LoadedDataset> {
    let mut report = IngestReport::default();

    let mut pool = load_split(config, Split::Pool, &mut report)?;
    let eval = load_split(config, Split::Eval, &mut report)?;

    if let RationaleSource::ExternalFile { path } = &config.rationale_source {
        let rationales = read_rationale_file(path)?;
        for q in pool.iter_mut() {
            if let Some(r) = rationales.get(&q.id) {
                q.rationale = Some(r.clone());
            }
        }
    }

    // Pools built from unanswered test sets take their answer from the
    // rationale's own conclusion.
    for q in pool.iter_mut() {
        if q.gold_answer.trim().is_empty() {
            if let Some(rationale) = &q.rationale {
                let extracted = extract_answer(rationale, q);
                if extracted.method != ExtractionMethod::Failed {
                    q.gold_answer = extracted.predicted;
                }
            }
        }
    }

    report.pool = pool.len();
    report.eval = eval.len();
    report.non_selectable = pool
        .iter()
        .filter(|q| !q.is_selectable())
        .map(|q| q.id.clone())
        .collect();

    let visual = match &config.visual_info_path {
        Some(path) => read_visual_sidecar(path)?,
        None => BTreeMap::new(),
    };

    Ok(LoadedDataset {
        kind: config.dataset_kind,
        pool,
        eval,
        visual,
        report,
    })
}

fn load_split(
    config: &DatasetConfig,
    split: Split,
    report: &mut IngestReport,
) -> Result<Vec<MultimodalQuestion>> {
    let (path, filter) = match split {
        Split::Pool => (&config.pool_path, config.pool_split_filter.as_deref()),
        Split::Eval => (&config.eval_path, config.eval_split_filter.as_deref()),
    };
    let root = read_json(path)?;
    let records = records_of(&root, path)?;
    report.records_read += records.len();

    let mut out = Vec::with_capacity(records.len());
    let mut seen = HashSet::new();
    for (key, obj) in records {
        let q = match config.dataset_kind {
            DatasetKind::Generic => parse_generic(key, obj, split)?,
            DatasetKind::Scienceqa => {
                if let Some(wanted) = filter {
                    let native = obj.get("split").and_then(Value::as_str);
                    if native != Some(wanted) {
                        report.filtered += 1;
                        continue;
                    }
                }
                parse_scienceqa(key, obj, split)?
            }
            DatasetKind::Mathvista => parse_mathvista(key, obj, split)?,
        };
        if !seen.insert(q.id.clone()) {
            return Err(Error::DuplicateId(q.id));
        }
        validate(&q)?;
        out.push(q);
    }
    Ok(out)
}

fn validate(q: &MultimodalQuestion) -> Result<()> {
    if q.id.is_empty() {
        return Err(Error::schema("", "id", "empty id"));
    }
    if q.split == Split::Eval && !q.choices.is_empty() {
        match label_index(&q.gold_answer) {
            Some(i) if i < q.choices.len() => {}
            _ => {
                return Err(Error::schema(
                    &q.id,
                    "gold_answer",
                    format!(
                        "`{}` is not one of the {} choice labels",
                        q.gold_answer,
                        q.choices.len()
                    ),
                ))
            }
        }
    }
    Ok(())
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// A record and, for id-keyed files, its key.
type Record<'a> = (Option<&'a str>, &'a Map<String, Value>);

/// Accepts either a JSON array of records or an object keyed by id.
fn records_of<'a>(root: &'a Value, path: &Path) -> Result<Vec<Record<'a>>> {
    let bad = |what: &str| Error::schema("", "<root>", format!("{}: {what}", path.display()));
    match root {
        Value::Array(items) => items
            .iter()
            .map(|v| v.as_object().map(|o| (None, o)).ok_or_else(|| bad("array element is not an object")))
            .collect(),
        Value::Object(map) => map
            .iter()
            .map(|(k, v)| {
                v.as_object()
                    .map(|o| (Some(k.as_str()), o))
                    .ok_or_else(|| bad("map value is not an object"))
            })
            .collect(),
        _ => Err(bad("expected an array or an object of records")),
    }
}

fn record_id(key: Option<&str>, obj: &Map<String, Value>, fields: &[&str]) -> Result<String> {
    for f in fields {
        match obj.get(*f) {
            Some(Value::String(s)) => return Ok(s.clone()),
            Some(Value::Number(n)) => return Ok(n.to_string()),
            Some(_) => return Err(Error::schema("?", f, "expected a string")),
            None => {}
        }
    }
    key.map(str::to_string)
        .ok_or_else(|| Error::schema("?", fields[0], "missing"))
}

fn req_str(id: &str, obj: &Map<String, Value>, field: &str) -> Result<String> {
    match obj.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(Error::schema(id, field, "expected a string")),
        None => Err(Error::schema(id, field, "missing")),
    }
}

fn opt_str(id: &str, obj: &Map<String, Value>, field: &str) -> Result<Option<String>> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(Error::schema(id, field, "expected a string or null")),
    }
}

fn str_list(id: &str, value: &Value, field: &str) -> Result<Vec<String>> {
    let arr = value
        .as_array()
        .ok_or_else(|| Error::schema(id, field, "expected an array of strings"))?;
    arr.iter()
        .map(|v| match v {
            Value::String(s) => Ok(s.clone()),
            Value::Number(n) => Ok(n.to_string()),
            _ => Err(Error::schema(id, field, "expected an array of strings")),
        })
        .collect()
}

fn non_empty(s: Option<String>) -> Option<String> {
    s.filter(|s| !s.trim().is_empty())
}

fn parse_generic(key: Option<&str>, obj: &Map<String, Value>, split: Split) -> Result<MultimodalQuestion> {
    let id = record_id(key, obj, &["id"])?;
    let mut text_context = req_str(&id, obj, "text_context")?;
    if let Some(extra) = non_empty(opt_str(&id, obj, "extra_context")?) {
        text_context.push('\n');
        text_context.push_str(&extra);
    }
    let choices = match obj.get("choices") {
        Some(v) => str_list(&id, v, "choices")?,
        None => return Err(Error::schema(&id, "choices", "missing")),
    };
    let categories = match obj.get("categories") {
        Some(Value::Object(m)) => m
            .iter()
            .map(|(k, v)| match v {
                Value::String(s) => Ok((k.clone(), s.clone())),
                Value::Bool(_) | Value::Number(_) => Ok((k.clone(), v.to_string())),
                _ => Err(Error::schema(&id, "categories", format!("tag `{k}` must map to a string"))),
            })
            .collect::<Result<BTreeMap<_, _>>>()?,
        Some(_) => return Err(Error::schema(&id, "categories", "expected an object")),
        None => return Err(Error::schema(&id, "categories", "missing")),
    };
    let declared = req_str(&id, obj, "split")?;
    let declared = match declared.as_str() {
        "pool" => Split::Pool,
        "eval" => Split::Eval,
        other => return Err(Error::schema(&id, "split", format!("unknown split `{other}`"))),
    };
    if declared != split {
        return Err(Error::schema(
            &id,
            "split",
            format!("record declares {declared:?} but was loaded from the {split:?} file"),
        ));
    }
    Ok(MultimodalQuestion {
        image_ref: non_empty(opt_str(&id, obj, "image_ref")?),
        gold_answer: req_str(&id, obj, "gold_answer")?,
        rationale: non_empty(opt_str(&id, obj, "rationale")?),
        text_context,
        choices,
        categories,
        split,
        id,
    })
}

fn parse_scienceqa(key: Option<&str>, obj: &Map<String, Value>, split: Split) -> Result<MultimodalQuestion> {
    let id = record_id(key, obj, &["id", "pid"])?;
    let question = req_str(&id, obj, "question")?;
    let choices = str_list(
        &id,
        obj.get("choices").ok_or_else(|| Error::schema(&id, "choices", "missing"))?,
        "choices",
    )?;
    let answer = obj
        .get("answer")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::schema(&id, "answer", "expected a non-negative integer index"))?
        as usize;
    if answer >= choices.len() {
        return Err(Error::schema(&id, "answer", format!("index {answer} out of range")));
    }
    let hint = opt_str(&id, obj, "hint")?.unwrap_or_default();
    let image = non_empty(opt_str(&id, obj, "image")?);

    let mut text_context = question;
    if !hint.trim().is_empty() {
        text_context.push_str("\nContext: ");
        text_context.push_str(hint.trim());
    }
    if let Some(extra) = non_empty(opt_str(&id, obj, "extra_context")?) {
        text_context.push('\n');
        text_context.push_str(&extra);
    }

    let lecture = opt_str(&id, obj, "lecture")?.unwrap_or_default();
    let solution = opt_str(&id, obj, "solution")?.unwrap_or_default();
    let rationale = [lecture.trim(), solution.trim()]
        .into_iter()
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("\n");

    let mut categories = BTreeMap::new();
    if let Some(subject) = opt_str(&id, obj, "subject")? {
        let tag = match subject.as_str() {
            "natural science" => "NAT",
            "social science" => "SOC",
            "language science" => "LAN",
            other => other,
        };
        categories.insert(tag.to_string(), subject.clone());
    }
    if !hint.trim().is_empty() {
        categories.insert("TXT".into(), "text context".into());
    }
    if image.is_some() {
        categories.insert("IMG".into(), "image context".into());
    }
    if hint.trim().is_empty() && image.is_none() {
        categories.insert("NO".into(), "no context".into());
    }
    if let Some(grade) = opt_str(&id, obj, "grade")? {
        let n: Option<u32> = grade.trim_start_matches("grade").parse().ok();
        match n {
            Some(1..=6) => {
                categories.insert("G1-6".into(), grade.clone());
            }
            Some(7..=12) => {
                categories.insert("G7-12".into(), grade.clone());
            }
            _ => {}
        }
    }

    Ok(MultimodalQuestion {
        image_ref: image.map(|img| format!("{id}/{img}")),
        gold_answer: choice_label(answer),
        rationale: non_empty(Some(rationale)),
        text_context,
        choices,
        categories,
        split,
        id,
    })
}

fn mathvista_task_tag(task: &str) -> String {
    match task {
        "figure question answering" => "FQA".into(),
        "geometry problem solving" => "GPS".into(),
        "math word problem" => "MWP".into(),
        "textbook question answering" => "TQA".into(),
        "visual question answering" => "VQA".into(),
        other => other.to_string(),
    }
}

fn mathvista_skill_tag(skill: &str) -> String {
    match skill {
        "algebraic reasoning" => "ALG".into(),
        "arithmetic reasoning" => "ARI".into(),
        "geometry reasoning" => "GEO".into(),
        "logical reasoning" => "LOG".into(),
        "numeric commonsense" => "NUM".into(),
        "scientific reasoning" => "SCI".into(),
        "statistical reasoning" => "STA".into(),
        other => other.to_string(),
    }
}

fn parse_mathvista(key: Option<&str>, obj: &Map<String, Value>, split: Split) -> Result<MultimodalQuestion> {
    let id = record_id(key, obj, &["pid", "id"])?;
    let question = req_str(&id, obj, "question")?;
    let text_context = non_empty(opt_str(&id, obj, "query")?).unwrap_or(question);
    let choices = match obj.get("choices") {
        None | Some(Value::Null) => Vec::new(),
        Some(v) => str_list(&id, v, "choices")?,
    };
    let answer = match obj.get("answer") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => return Err(Error::schema(&id, "answer", "expected a string or number")),
    };
    let gold_answer = if choices.is_empty() || answer.is_empty() {
        answer
    } else {
        match choices.iter().position(|c| c.trim() == answer.trim()) {
            Some(i) => choice_label(i),
            None if label_index(&answer).is_some_and(|i| i < choices.len()) => answer.trim().to_uppercase(),
            None => {
                return Err(Error::schema(&id, "answer", format!("`{answer}` matches no choice")));
            }
        }
    };

    let mut categories = BTreeMap::new();
    if let Some(meta) = obj.get("metadata") {
        let meta = meta
            .as_object()
            .ok_or_else(|| Error::schema(&id, "metadata", "expected an object"))?;
        if let Some(task) = opt_str(&id, meta, "task")? {
            categories.insert(mathvista_task_tag(&task), task);
        }
        let skills = match meta.get("skills").or_else(|| meta.get("skill")) {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::String(s)) => vec![s.clone()],
            Some(v) => str_list(&id, v, "metadata.skills")?,
        };
        for s in skills {
            categories.insert(mathvista_skill_tag(&s), s);
        }
    }

    Ok(MultimodalQuestion {
        image_ref: non_empty(opt_str(&id, obj, "image")?),
        rationale: non_empty(opt_str(&id, obj, "rationale")?),
        text_context,
        choices,
        gold_answer,
        categories,
        split,
        id,
    })
}

pub fn read_rationale_file(path: &Path) -> Result<BTreeMap<String, String>> {
    if !path.exists() {
        return Err(Error::MissingRationaleFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn read_visual_sidecar(path: &Path) -> Result<BTreeMap<String, VisualInfo>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Questions paired with their visual info.
#[derive(Debug, Clone, PartialEq)]
pub struct AttachedVisuals<'a> {
    pub items: Vec<(&'a MultimodalQuestion, VisualInfo)>,
    /// Questions with an image but no sidecar entry.
    pub missing: usize,
}

pub fn attach_visual_info<'a>(
    questions: &'a [MultimodalQuestion],
    visual: &BTreeMap<String, VisualInfo>,
) -> AttachedVisuals<'a> {
    let mut missing = 0;
    let items = questions
        .iter()
        .map(|q| {
            let info = if q.has_image() {
                match visual.get(&q.id) {
                    Some(v) => v.clone(),
                    None => {
                        missing += 1;
                        VisualInfo::default()
                    }
                }
            } else {
                VisualInfo::default()
            };
            (q, info)
        })
        .collect();
    if missing > 0 {
        log::warn!("{missing} question(s) with images have no visual sidecar entry");
    }
    AttachedVisuals { items, missing }
}

/// Visual info for a single question under the same rules as
/// [`attach_visual_info`].
pub fn visual_for(q: &MultimodalQuestion, visual: &BTreeMap<String, VisualInfo>) -> VisualInfo {
    if q.has_image() {
        visual.get(&q.id).cloned().unwrap_or_default()
    } else {
        VisualInfo::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use std::io::Write;

    fn write_json(dir: &Path, name: &str, value: &Value) -> PathBuf {
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(serde_json::to_string_pretty(value).unwrap().as_bytes()).unwrap();
        path
    }

    fn generic(id: &str, split: &str, rationale: Option<&str>) -> Value {
        json!({
            "id": id,
            "text_context": format!("question {id}"),
            "choices": ["yes", "no"],
            "gold_answer": "A",
            "rationale": rationale,
            "categories": {"NAT": "natural science"},
            "split": split,
        })
    }

    #[test]
    fn generic_well_formed() {
        let dir = tempfile::tempdir().unwrap();
        let pool = write_json(
            dir.path(),
            "pool.json",
            &json!([generic("p1", "pool", Some("r1")), generic("p2", "pool", Some("r2")), generic("p3", "pool", Some("r3"))]),
        );
        let eval = write_json(dir.path(), "eval.json", &json!([generic("e1", "eval", None)]));
        let ds = load_dataset(&DatasetConfig::new(DatasetKind::Generic, pool, eval)).unwrap();
        assert_eq!(ds.pool.len(), 3);
        assert_eq!(ds.eval.len(), 1);
        assert!(ds.report.non_selectable.is_empty());
        assert_eq!(ds.report.records_read, 4);
        assert_eq!(ds.report.pool + ds.report.eval + ds.report.filtered, ds.report.records_read);
    }

    #[test]
    fn missing_rationale_is_kept_but_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let pool = write_json(
            dir.path(),
            "pool.json",
            &json!([generic("p1", "pool", Some("r1")), generic("p2", "pool", None)]),
        );
        let eval = write_json(dir.path(), "eval.json", &json!([]));
        let ds = load_dataset(&DatasetConfig::new(DatasetKind::Generic, pool, eval)).unwrap();
        assert_eq!(ds.pool.len(), 2);
        assert_eq!(ds.report.non_selectable, vec!["p2".to_string()]);
    }

    #[test]
    fn duplicate_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let pool = write_json(
            dir.path(),
            "pool.json",
            &json!([generic("q7", "pool", Some("a")), generic("q7", "pool", Some("b"))]),
        );
        let eval = write_json(dir.path(), "eval.json", &json!([]));
        let err = load_dataset(&DatasetConfig::new(DatasetKind::Generic, pool, eval)).unwrap_err();
        assert!(matches!(err, Error::DuplicateId(ref id) if id == "q7"), "{err}");
    }

    #[test]
    fn schema_error_names_id_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let mut bad = generic("p9", "pool", Some("r"));
        bad["gold_answer"] = json!(3);
        let pool = write_json(dir.path(), "pool.json", &json!([bad]));
        let eval = write_json(dir.path(), "eval.json", &json!([]));
        match load_dataset(&DatasetConfig::new(DatasetKind::Generic, pool, eval)).unwrap_err() {
            Error::Schema { id, field, .. } => {
                assert_eq!(id, "p9");
                assert_eq!(field, "gold_answer");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn eval_gold_must_be_a_choice_label() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = generic("e1", "eval", None);
        e["gold_answer"] = json!("C");
        let pool = write_json(dir.path(), "pool.json", &json!([]));
        let eval = write_json(dir.path(), "eval.json", &json!([e]));
        let err = load_dataset(&DatasetConfig::new(DatasetKind::Generic, pool, eval)).unwrap_err();
        assert!(matches!(err, Error::Schema { ref field, .. } if field == "gold_answer"));
    }

    #[test]
    fn split_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let pool = write_json(dir.path(), "pool.json", &json!([generic("p1", "eval", Some("r"))]));
        let eval = write_json(dir.path(), "eval.json", &json!([]));
        assert!(load_dataset(&DatasetConfig::new(DatasetKind::Generic, pool, eval)).is_err());
    }

    #[test]
    fn mathvista_external_rationales() {
        let dir = tempfile::tempdir().unwrap();
        let pool = write_json(
            dir.path(),
            "test.json",
            &json!({
                "101": {"pid": "101", "question": "What is 2+3?", "image": "images/101.png",
                        "choices": null, "metadata": {"task": "math word problem", "skills": ["arithmetic reasoning"]}},
                "102": {"pid": "102", "question": "Which shape?", "image": "images/102.png",
                        "choices": ["circle", "square"], "metadata": {"task": "visual question answering"}}
            }),
        );
        let eval = write_json(
            dir.path(),
            "testmini.json",
            &json!([{"pid": "1", "question": "Angle?", "image": "images/1.png", "choices": ["30", "60"],
                     "answer": "60", "metadata": {"task": "geometry problem solving", "skills": ["geometry reasoning", "algebraic reasoning"]}}]),
        );
        let rationales = write_json(
            dir.path(),
            "gpt4v_zero_shot.json",
            &json!({"101": "Two plus three is five. The answer is 5.", "102": "It has four corners. The answer is (B)."}),
        );
        let mut cfg = DatasetConfig::new(DatasetKind::Mathvista, pool, eval);
        cfg.rationale_source = RationaleSource::ExternalFile { path: rationales };
        let ds = load_dataset(&cfg).unwrap();

        let p101 = ds.pool_question("101").unwrap();
        assert_eq!(p101.rationale.as_deref(), Some("Two plus three is five. The answer is 5."));
        assert_eq!(p101.gold_answer, "5");
        assert!(p101.categories.contains_key("MWP"));
        assert!(p101.categories.contains_key("ARI"));
        assert_eq!(ds.pool_question("102").unwrap().gold_answer, "B");
        assert!(ds.report.non_selectable.is_empty());

        let e = &ds.eval[0];
        assert_eq!(e.gold_answer, "B");
        assert!(e.categories.contains_key("GPS"));
        assert!(e.categories.contains_key("GEO"));
        assert!(e.categories.contains_key("ALG"));
    }

    #[test]
    fn missing_rationale_file() {
        let dir = tempfile::tempdir().unwrap();
        let pool = write_json(dir.path(), "pool.json", &json!([]));
        let eval = write_json(dir.path(), "eval.json", &json!([]));
        let mut cfg = DatasetConfig::new(DatasetKind::Mathvista, pool, eval);
        cfg.rationale_source = RationaleSource::ExternalFile {
            path: dir.path().join("nope.json"),
        };
        assert!(matches!(load_dataset(&cfg).unwrap_err(), Error::MissingRationaleFile(_)));
    }

    #[test]
    fn scienceqa_adapter_and_split_filter() {
        let dir = tempfile::tempdir().unwrap();
        let problems = write_json(
            dir.path(),
            "problems.json",
            &json!({
                "5": {"question": "Which is a mammal?", "choices": ["frog", "whale"], "answer": 1,
                      "hint": "", "image": null, "lecture": "Mammals have fur.", "solution": "A whale is a mammal.",
                      "subject": "natural science", "grade": "grade3", "split": "train"},
                "9": {"question": "Which magnet pole?", "choices": ["N", "S", "neither"], "answer": 0,
                      "hint": "Look at the figure.", "image": "image.png", "lecture": "", "solution": "",
                      "subject": "natural science", "grade": "grade8", "split": "test"},
                "12": {"question": "Which word?", "choices": ["a", "b"], "answer": 0, "hint": "",
                       "image": null, "lecture": "", "solution": "", "subject": "language science",
                       "grade": "grade2", "split": "val"}
            }),
        );
        let mut cfg = DatasetConfig::new(DatasetKind::Scienceqa, &problems, &problems);
        cfg.pool_split_filter = Some("train".into());
        cfg.eval_split_filter = Some("test".into());
        let ds = load_dataset(&cfg).unwrap();
        assert_eq!(ds.report.records_read, 6);
        assert_eq!(ds.report.filtered, 4);
        assert_eq!(ds.pool.len() + ds.eval.len() + ds.report.filtered, ds.report.records_read);

        let p = &ds.pool[0];
        assert_eq!(p.gold_answer, "B");
        assert_eq!(p.rationale.as_deref(), Some("Mammals have fur.\nA whale is a mammal."));
        assert!(p.categories.contains_key("NAT") && p.categories.contains_key("NO") && p.categories.contains_key("G1-6"));

        let e = &ds.eval[0];
        assert_eq!(e.gold_answer, "A");
        assert_eq!(e.image_ref.as_deref(), Some("9/image.png"));
        assert!(e.text_context.ends_with("Context: Look at the figure."));
        for tag in ["IMG", "TXT", "G7-12"] {
            assert!(e.categories.contains_key(tag), "{tag}");
        }
        assert!(!e.categories.contains_key("NO"));
    }

    #[test]
    fn load_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let pool = write_json(
            dir.path(),
            "pool.json",
            &json!([generic("b", "pool", Some("r")), generic("a", "pool", Some("r"))]),
        );
        let eval = write_json(dir.path(), "eval.json", &json!([generic("e", "eval", None)]));
        let cfg = DatasetConfig::new(DatasetKind::Generic, pool, eval);
        let a = load_dataset(&cfg).unwrap().canonical_json();
        let b = load_dataset(&cfg).unwrap().canonical_json();
        assert_eq!(a, b);
    }

    fn q(id: &str, image: bool) -> MultimodalQuestion {
        MultimodalQuestion {
            id: id.into(),
            text_context: "t".into(),
            image_ref: image.then(|| format!("{id}.png")),
            choices: vec![],
            gold_answer: "1".into(),
            rationale: None,
            categories: BTreeMap::new(),
            split: Split::Eval,
        }
    }

    #[test]
    fn attach_visual_rules() {
        let mut visual = BTreeMap::new();
        visual.insert("chart".to_string(), VisualInfo::new("a bar chart of sales", "Q1 40 Q2 55"));
        let qs = vec![q("plain", false), q("chart", true)];
        let attached = attach_visual_info(&qs, &visual);
        assert_eq!(attached.items[0].1, VisualInfo::new("", ""));
        assert_eq!(attached.items[1].1, VisualInfo::new("a bar chart of sales", "Q1 40 Q2 55"));
        assert_eq!(attached.missing, 0);
    }

    #[test]
    fn attach_visual_counts_missing_entries() {
        // 10 questions: 7 with images, 3 of those in the sidecar; 4 missing.
        let qs: Vec<_> = (0..10).map(|i| q(&format!("q{i}"), i < 7)).collect();
        let mut visual = BTreeMap::new();
        for i in [0, 3, 5] {
            visual.insert(format!("q{i}"), VisualInfo::new("c", "o"));
        }
        // A sidecar entry for an image-less question is ignored.
        visual.insert("q9".into(), VisualInfo::new("stray", ""));
        let expected_missing = qs
            .iter()
            .filter(|q| q.has_image() && !visual.contains_key(&q.id))
            .count();
        assert_eq!(expected_missing, 4);
        let attached = attach_visual_info(&qs, &visual);
        assert_eq!(attached.missing, 4);
        assert_eq!(attached.items[9].1, VisualInfo::default());
    }
}
