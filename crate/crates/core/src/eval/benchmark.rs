//! Benchmark documents.
//!
//! Native shape (JSON):
//!
//! ```json
//! {
//!   "format": "visagent-benchmark",
//!   "version": 1,
//!   "cases": [{
//!     "story_id": "jack",
//!     "story": "optional source text",
//!     "characters": ["jack", "mother"],
//!     "scenes": [{
//!       "bg_prompt": "a small cottage",
//!       "fg": [{"character_id": "jack", "prompt": "a boy", "bbox": [0.1, 0.3, 0.4, 0.95]}]
//!     }]
//!   }]
//! }
//! ```
//!
//! `characters` entries may also be objects carrying an `id`. `bbox` is
//! optional, normalized `[x_min, y_min, x_max, y_max]`.
//!
//! A top-level JSON array is read as a CMIGBench-like document through a
//! [`FieldMapping`]. The default mapping expects
//! `[{"id", "story", "characters": [..], "frames": [{"background", "objects": [{"name", "caption", "box"}]}]}]`.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::image::layout::validate_bbox;
use crate::image::BBox;
use crate::story::{FgPrompt, LayeredPrompts};

pub const BENCHMARK_FORMAT: &str = "visagent-benchmark";
pub const BENCHMARK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BenchmarkError {
    #[error("cannot parse benchmark: {0}")]
    Parse(String),
    #[error("case `{case}`: {message}")]
    Schema { case: String, message: String },
    #[error("case `{case}`, scene {scene}: undefined character `{character_id}`")]
    UndefinedCharacter { case: String, scene: usize, character_id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkFg {
    pub character_id: String,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
}

impl BenchmarkFg {
    pub fn bbox(&self) -> Option<BBox> {
        self.bbox.map(BBox::from_array)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkScene {
    pub bg_prompt: String,
    pub fg: Vec<BenchmarkFg>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkCase {
    pub story_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub story: Option<String>,
    pub characters: Vec<String>,
    pub scenes: Vec<BenchmarkScene>,
}

impl BenchmarkCase {
    /// Scene prompts in pipeline form.
    pub fn layered_prompts(&self, separator: &str) -> Vec<LayeredPrompts> {
        self.scenes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let fg = s
                    .fg
                    .iter()
                    .map(|f| FgPrompt { character_id: f.character_id.clone(), prompt: f.prompt.clone() })
                    .collect();
                LayeredPrompts::new(i, s.bg_prompt.clone(), fg, separator)
            })
            .collect()
    }
}

/// Field names used to read a foreign benchmark document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldMapping {
    pub case_id: String,
    pub story: String,
    pub characters: String,
    /// Key of the id inside a character object; plain strings are ids already.
    pub character_id: String,
    pub scenes: String,
    pub bg_prompt: String,
    pub subjects: String,
    pub subject_character: String,
    pub subject_prompt: String,
    pub subject_bbox: String,
    /// Box coordinates are divided by this (e.g. 512 for pixel boxes).
    pub bbox_scale: f64,
}

impl Default for FieldMapping {
    fn default() -> Self {
        Self {
            case_id: "id".into(),
            story: "story".into(),
            characters: "characters".into(),
            character_id: "name".into(),
            scenes: "frames".into(),
            bg_prompt: "background".into(),
            subjects: "objects".into(),
            subject_character: "name".into(),
            subject_prompt: "caption".into(),
            subject_bbox: "box".into(),
            bbox_scale: 1.0,
        }
    }
}

impl FieldMapping {
    /// Mapping of the native case shape.
    pub fn native() -> Self {
        Self {
            case_id: "story_id".into(),
            story: "story".into(),
            characters: "characters".into(),
            character_id: "id".into(),
            scenes: "scenes".into(),
            bg_prompt: "bg_prompt".into(),
            subjects: "fg".into(),
            subject_character: "character_id".into(),
            subject_prompt: "prompt".into(),
            subject_bbox: "bbox".into(),
            bbox_scale: 1.0,
        }
    }
}

/// Serializes cases in the native shape.
pub fn to_native_json(cases: &[BenchmarkCase]) -> String {
    let doc = serde_json::json!({"format": BENCHMARK_FORMAT, "version": BENCHMARK_VERSION, "cases": cases});
    serde_json::to_string_pretty(&doc).expect("benchmark serializes")
}

/// Parses a benchmark document. Object documents must be native; array
/// documents are read through `mapping`.
pub fn parse_benchmark(text: &str, mapping: &FieldMapping) -> Result<Vec<BenchmarkCase>, BenchmarkError> {
    if text.trim().is_empty() {
        return Err(BenchmarkError::Parse("document is empty".into()));
    }
    let doc: Value = serde_json::from_str(text).map_err(|e| BenchmarkError::Parse(e.to_string()))?;
    let (items, mapping) = match doc {
        Value::Object(mut o) => {
            match o.get("format").and_then(Value::as_str) {
                Some(BENCHMARK_FORMAT) => {}
                other => return Err(BenchmarkError::Parse(format!("unknown format {other:?}"))),
            }
            let version = o.get("version").and_then(Value::as_u64);
            if version != Some(BENCHMARK_VERSION as u64) {
                return Err(BenchmarkError::Parse(format!("unsupported version {version:?}")));
            }
            match o.remove("cases") {
                Some(Value::Array(a)) => (a, FieldMapping::native()),
                _ => return Err(BenchmarkError::Parse("`cases` must be an array".into())),
            }
        }
        Value::Array(a) => (a, mapping.clone()),
        _ => return Err(BenchmarkError::Parse("expected an object or an array".into())),
    };

    let mut seen = BTreeSet::new();
    let mut cases = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let case = read_case(i, item, &mapping)?;
        if !seen.insert(case.story_id.clone()) {
            return Err(BenchmarkError::Schema { case: case.story_id, message: "duplicate case id".into() });
        }
        cases.push(case);
    }
    Ok(cases)
}

fn field<'a>(o: &'a Map<String, Value>, key: &str, case: &str) -> Result<&'a Value, BenchmarkError> {
    o.get(key).ok_or_else(|| BenchmarkError::Schema { case: case.into(), message: format!("missing field `{key}`") })
}

fn text_field(o: &Map<String, Value>, key: &str, case: &str) -> Result<String, BenchmarkError> {
    match field(o, key, case)? {
        Value::String(s) if !s.trim().is_empty() => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        _ => Err(BenchmarkError::Schema { case: case.into(), message: format!("`{key}` must be a non-empty string") }),
    }
}

fn array_field<'a>(o: &'a Map<String, Value>, key: &str, case: &str) -> Result<&'a Vec<Value>, BenchmarkError> {
    field(o, key, case)?
        .as_array()
        .ok_or_else(|| BenchmarkError::Schema { case: case.into(), message: format!("`{key}` must be an array") })
}

fn read_case(index: usize, item: &Value, m: &FieldMapping) -> Result<BenchmarkCase, BenchmarkError> {
    let fallback = format!("#{index}");
    let o = item
        .as_object()
        .ok_or_else(|| BenchmarkError::Schema { case: fallback.clone(), message: "case must be an object".into() })?;
    let id = text_field(o, &m.case_id, &fallback)?;
    let story = o.get(&m.story).and_then(Value::as_str).map(String::from);

    let mut characters = Vec::new();
    for c in array_field(o, &m.characters, &id)? {
        let cid = match c {
            Value::String(s) => s.clone(),
            Value::Object(co) => text_field(co, &m.character_id, &id)?,
            _ => {
                return Err(BenchmarkError::Schema { case: id, message: "character entries must be strings or objects".into() })
            }
        };
        if characters.contains(&cid) {
            return Err(BenchmarkError::Schema { case: id, message: format!("character `{cid}` declared twice") });
        }
        characters.push(cid);
    }

    let raw_scenes = array_field(o, &m.scenes, &id)?;
    if raw_scenes.is_empty() {
        return Err(BenchmarkError::Schema { case: id, message: "no scenes".into() });
    }
    let mut scenes = Vec::with_capacity(raw_scenes.len());
    for (si, s) in raw_scenes.iter().enumerate() {
        let so = s
            .as_object()
            .ok_or_else(|| BenchmarkError::Schema { case: id.clone(), message: format!("scene {si} must be an object") })?;
        let bg_prompt = text_field(so, &m.bg_prompt, &id)?;
        let mut fg: Vec<BenchmarkFg> = Vec::new();
        for f in array_field(so, &m.subjects, &id)? {
            let fo = f.as_object().ok_or_else(|| BenchmarkError::Schema {
                case: id.clone(),
                message: format!("scene {si}: subject entries must be objects"),
            })?;
            let character_id = text_field(fo, &m.subject_character, &id)?;
            if !characters.contains(&character_id) {
                return Err(BenchmarkError::UndefinedCharacter { case: id, scene: si, character_id });
            }
            if fg.iter().any(|g| g.character_id == character_id) {
                return Err(BenchmarkError::Schema {
                    case: id,
                    message: format!("scene {si}: character `{character_id}` appears twice"),
                });
            }
            let prompt = text_field(fo, &m.subject_prompt, &id)?;
            let bbox = match fo.get(&m.subject_bbox) {
                None | Some(Value::Null) => None,
                Some(v) => Some(read_bbox(v, m.bbox_scale).map_err(|message| BenchmarkError::Schema {
                    case: id.clone(),
                    message: format!("scene {si}, `{character_id}`: {message}"),
                })?),
            };
            fg.push(BenchmarkFg { character_id, prompt, bbox });
        }
        scenes.push(BenchmarkScene { bg_prompt, fg });
    }
    Ok(BenchmarkCase { story_id: id, story, characters, scenes })
}

fn read_bbox(v: &Value, scale: f64) -> Result<[f64; 4], String> {
    let a = v.as_array().filter(|a| a.len() == 4).ok_or("bbox must be an array of 4 numbers")?;
    let mut out = [0.0; 4];
    for (o, x) in out.iter_mut().zip(a) {
        *o = x.as_f64().ok_or("bbox must be an array of 4 numbers")? / scale;
    }
    validate_bbox(&BBox::from_array(out), 0.0).map_err(|vs| {
        let parts: Vec<String> = vs.iter().map(|v| v.to_string()).collect();
        parts.join("; ")
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const NATIVE: &str = r#"{"format": "visagent-benchmark", "version": 1, "cases": [
        {"story_id": "a", "characters": ["x", {"id": "y"}], "scenes": [
            {"bg_prompt": "a field", "fg": [{"character_id": "x", "prompt": "a fox", "bbox": [0.1, 0.2, 0.5, 0.9]}]},
            {"bg_prompt": "a river", "fg": [{"character_id": "y", "prompt": "a heron"}]}
        ]}
    ]}"#;

    #[test]
    fn native_document() {
        let cases = parse_benchmark(NATIVE, &FieldMapping::default()).unwrap();
        assert_eq!(cases.len(), 1);
        assert_eq!(cases[0].characters, ["x", "y"]);
        assert_eq!(cases[0].scenes[0].fg[0].bbox, Some([0.1, 0.2, 0.5, 0.9]));
        assert_eq!(cases[0].scenes[1].fg[0].bbox, None);
        let again = parse_benchmark(&to_native_json(&cases), &FieldMapping::default()).unwrap();
        assert_eq!(again, cases);
        let lp = cases[0].layered_prompts(", ");
        assert_eq!(lp[1].scene_index, 1);
        assert_eq!(lp[0].fg_prompts[0].character_id, "x");
    }

    #[test]
    fn cmig_like_document_with_pixel_boxes() {
        let doc = r#"[{"id": 7, "characters": [{"name": "cat"}], "frames": [
            {"background": "a kitchen", "objects": [{"name": "cat", "caption": "a cat", "box": [0, 256, 256, 512]}]}
        ]}]"#;
        let m = FieldMapping { bbox_scale: 512.0, ..FieldMapping::default() };
        let cases = parse_benchmark(doc, &m).unwrap();
        assert_eq!(cases[0].story_id, "7");
        assert_eq!(cases[0].scenes[0].fg[0].bbox, Some([0.0, 0.5, 0.5, 1.0]));
    }

    #[test]
    fn empty_and_malformed_are_parse_errors() {
        assert!(matches!(parse_benchmark("", &FieldMapping::default()), Err(BenchmarkError::Parse(_))));
        assert!(matches!(parse_benchmark("  \n", &FieldMapping::default()), Err(BenchmarkError::Parse(_))));
        assert!(matches!(parse_benchmark("{", &FieldMapping::default()), Err(BenchmarkError::Parse(_))));
        assert!(matches!(
            parse_benchmark(r#"{"format": "other", "version": 1, "cases": []}"#, &FieldMapping::default()),
            Err(BenchmarkError::Parse(_))
        ));
    }

    #[test]
    fn dangling_character_is_named() {
        let doc = NATIVE.replace(r#""character_id": "y""#, r#""character_id": "ghost""#);
        let err = parse_benchmark(&doc, &FieldMapping::default()).unwrap_err();
        assert_eq!(err, BenchmarkError::UndefinedCharacter { case: "a".into(), scene: 1, character_id: "ghost".into() });
        assert!(err.to_string().contains("ghost"));
    }

    #[test]
    fn schema_violations() {
        let no_scenes = r#"{"format": "visagent-benchmark", "version": 1, "cases": [{"story_id": "a", "characters": [], "scenes": []}]}"#;
        assert!(matches!(parse_benchmark(no_scenes, &FieldMapping::default()), Err(BenchmarkError::Schema { .. })));
        let bad_box = NATIVE.replace("[0.1, 0.2, 0.5, 0.9]", "[0.5, 0.2, 0.1, 0.9]");
        assert!(matches!(parse_benchmark(&bad_box, &FieldMapping::default()), Err(BenchmarkError::Schema { .. })));
        let dup = NATIVE.replace(r#"{"story_id": "a""#, r#"{"story_id": "a"}, {"story_id": "a""#);
        assert!(parse_benchmark(&dup, &FieldMapping::default()).is_err());
    }
}
