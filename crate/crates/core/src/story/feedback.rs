use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde_json::Value;

use super::{
    validate_characters, validate_scenes, Act, CharacterCategorySchema, CharacterDescription,
    FeedbackEdit, SceneDescription, SourceSpan, StoryError, TargetKind, Verdict,
};

/// The human side of the description gate.
pub trait FeedbackChannel {
    /// Returns the reviewer's edits. An empty list approves everything.
    fn review(
        &mut self,
        scenes: &[SceneDescription],
        characters: &[CharacterDescription],
    ) -> Result<Vec<FeedbackEdit>, StoryError>;
}

/// Approves every gate immediately.
#[derive(Debug, Default, Clone, Copy)]
pub struct AutoApprove;

impl FeedbackChannel for AutoApprove {
    fn review(&mut self, _: &[SceneDescription], _: &[CharacterDescription]) -> Result<Vec<FeedbackEdit>, StoryError> {
        Ok(Vec::new())
    }
}

/// Replays queued edit rounds, then approves. With `timeout_when_empty` set
/// an exhausted queue reports [`StoryError::FeedbackTimeout`] instead.
#[derive(Debug, Default, Clone)]
pub struct ScriptedFeedback {
    rounds: VecDeque<Vec<FeedbackEdit>>,
    pub timeout_when_empty: bool,
    pub reviews: usize,
}

impl ScriptedFeedback {
    pub fn new(rounds: impl IntoIterator<Item = Vec<FeedbackEdit>>) -> Self {
        Self { rounds: rounds.into_iter().collect(), timeout_when_empty: false, reviews: 0 }
    }
}

impl FeedbackChannel for ScriptedFeedback {
    fn review(&mut self, _: &[SceneDescription], _: &[CharacterDescription]) -> Result<Vec<FeedbackEdit>, StoryError> {
        self.reviews += 1;
        match self.rounds.pop_front() {
            Some(r) => Ok(r),
            None if self.timeout_when_empty => Err(StoryError::FeedbackTimeout),
            None => Ok(Vec::new()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackOutcome {
    pub scenes: Vec<SceneDescription>,
    pub characters: Vec<CharacterDescription>,
    /// Targets that need a fresh backend call, in edit order.
    pub regenerate: Vec<(TargetKind, String)>,
    pub approved: usize,
    pub modified: usize,
}

fn bad(msg: impl Into<String>) -> StoryError {
    StoryError::InvariantViolation(msg.into())
}

fn as_str(field: &str, v: &Value) -> Result<String, StoryError> {
    v.as_str().map(str::to_string).ok_or_else(|| bad(format!("`{field}` must be a string")))
}

fn as_strings(field: &str, v: &Value) -> Result<Vec<String>, StoryError> {
    v.as_array()
        .ok_or_else(|| bad(format!("`{field}` must be a list")))?
        .iter()
        .map(|x| as_str(field, x))
        .collect()
}

fn patch_scene(
    scene: &mut SceneDescription,
    field: &str,
    value: &Value,
    characters: &[CharacterDescription],
) -> Result<(), StoryError> {
    match field {
        "summary" => scene.summary = as_str(field, value)?,
        "act" => {
            scene.act = serde_json::from_value::<Act>(value.clone()).map_err(|_| bad("`act` must be setup, conflict or resolution"))?
        }
        "source_span" => {
            scene.source_span =
                serde_json::from_value::<SourceSpan>(value.clone()).map_err(|_| bad("`source_span` must be {start, end}"))?
        }
        "character_refs" => {
            let mut refs: Vec<String> = Vec::new();
            for name in as_strings(field, value)? {
                let id = characters
                    .iter()
                    .find(|c| c.answers_to(&name))
                    .map(|c| c.character_id.clone())
                    .ok_or(StoryError::MissingCharacter { scene_index: scene.scene_index, character: name })?;
                if !refs.contains(&id) {
                    refs.push(id);
                }
            }
            scene.character_refs = refs;
        }
        other => return Err(bad(format!("scene field `{other}` cannot be edited"))),
    }
    Ok(())
}

fn patch_character(c: &mut CharacterDescription, field: &str, value: &Value) -> Result<(), StoryError> {
    match field {
        "name" => c.name = as_str(field, value)?,
        "aliases" => c.aliases = as_strings(field, value)?,
        "attire_inferred" => c.attire_inferred = value.as_bool().ok_or_else(|| bad("`attire_inferred` must be a bool"))?,
        "attributes" => {
            let map = value.as_object().ok_or_else(|| bad("`attributes` must be an object"))?;
            for (k, v) in map {
                c.attributes.insert(k.clone(), as_str(k, v)?);
            }
        }
        other => match other.strip_prefix("attributes.") {
            Some(key) if !key.is_empty() => {
                c.attributes.insert(key.to_string(), as_str(other, value)?);
            }
            _ => return Err(bad(format!("character field `{other}` cannot be edited"))),
        },
    }
    Ok(())
}

/// Applies reviewer edits to the extracted descriptions.
///
/// Approve leaves a target untouched, modify writes `patched_fields`
/// verbatim and regenerate marks the target for a fresh backend call. The
/// whole batch is rejected if any edit fails or the patched descriptions
/// break an invariant.
pub fn apply_feedback(
    scenes: &[SceneDescription],
    characters: &[CharacterDescription],
    schema: &CharacterCategorySchema,
    edits: &[FeedbackEdit],
) -> Result<FeedbackOutcome, StoryError> {
    let mut out = FeedbackOutcome {
        scenes: scenes.to_vec(),
        characters: characters.to_vec(),
        regenerate: Vec::new(),
        approved: 0,
        modified: 0,
    };
    for edit in edits {
        let key = edit.key();
        let scene_pos = match edit.target {
            TargetKind::Scene => Some(
                edit.target_id
                    .parse::<usize>()
                    .ok()
                    .filter(|i| *i < out.scenes.len())
                    .ok_or_else(|| StoryError::UnknownTarget(key.clone()))?,
            ),
            TargetKind::Character => {
                if !out.characters.iter().any(|c| c.character_id == edit.target_id) {
                    return Err(StoryError::UnknownTarget(key));
                }
                None
            }
        };
        match edit.verdict {
            Verdict::Approve | Verdict::Regenerate if !edit.patched_fields.is_empty() => {
                return Err(bad(format!("{key}: only `modify` edits may carry patched fields")));
            }
            Verdict::Approve => out.approved += 1,
            Verdict::Regenerate => {
                let t = (edit.target, edit.target_id.clone());
                if !out.regenerate.contains(&t) {
                    out.regenerate.push(t);
                }
            }
            Verdict::Modify => {
                out.modified += 1;
                for (field, value) in &edit.patched_fields {
                    match scene_pos {
                        Some(i) => {
                            let chars = out.characters.clone();
                            patch_scene(&mut out.scenes[i], field, value, &chars)?
                        }
                        None => {
                            let c = out
                                .characters
                                .iter_mut()
                                .find(|c| c.character_id == edit.target_id)
                                .expect("resolved above");
                            patch_character(c, field, value)?
                        }
                    }
                }
            }
        }
    }
    validate_scenes(&out.scenes, &out.characters)?;
    validate_characters(&out.characters, schema)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeMap;
    use alloc::vec;
    use serde_json::json;

    fn fixture() -> (Vec<SceneDescription>, Vec<CharacterDescription>) {
        let mk = |id: &str, name: &str| {
            let mut attributes = BTreeMap::new();
            for k in ["attire", "gender", "age", "appearance"] {
                attributes.insert(k.to_string(), format!("{name} {k}"));
            }
            CharacterDescription { character_id: id.into(), name: name.into(), aliases: vec![], attributes, attire_inferred: false }
        };
        let chars = vec![mk("jack", "Jack"), mk("merchant", "Merchant"), mk("giant", "Giant")];
        let acts = [Act::Setup, Act::Setup, Act::Conflict, Act::Conflict, Act::Resolution];
        let scenes = acts
            .iter()
            .enumerate()
            .map(|(i, a)| SceneDescription {
                scene_index: i,
                act: *a,
                summary: format!("scene {i}"),
                source_span: SourceSpan { start: i * 10, end: i * 10 + 10 },
                character_refs: vec!["jack".into()],
            })
            .collect();
        (scenes, chars)
    }

    #[test]
    fn approve_all_is_identity() {
        let (s, c) = fixture();
        let mut edits: Vec<FeedbackEdit> = (0..5).map(|i| FeedbackEdit::approve(TargetKind::Scene, i.to_string())).collect();
        edits.extend(c.iter().map(|c| FeedbackEdit::approve(TargetKind::Character, c.character_id.clone())));
        let out = apply_feedback(&s, &c, &CharacterCategorySchema::default(), &edits).unwrap();
        assert_eq!(out.scenes, s);
        assert_eq!(out.characters, c);
        assert!(out.regenerate.is_empty());
        assert_eq!(out.approved, 8);
    }

    #[test]
    fn modify_patches_one_field_only() {
        let (s, c) = fixture();
        let edit = FeedbackEdit::modify(TargetKind::Scene, "2", "summary", json!("Jack finds a cottage"));
        let out = apply_feedback(&s, &c, &CharacterCategorySchema::default(), &[edit]).unwrap();
        for (i, (a, b)) in out.scenes.iter().zip(&s).enumerate() {
            if i == 2 {
                assert_eq!(a.summary, "Jack finds a cottage");
                assert_eq!(SceneDescription { summary: b.summary.clone(), ..a.clone() }, *b);
            } else {
                assert_eq!(a, b);
            }
        }
        assert_eq!(out.characters, c);
    }

    #[test]
    fn character_attribute_patch() {
        let (s, c) = fixture();
        let edit = FeedbackEdit::modify(TargetKind::Character, "giant", "attributes.attire", json!("a red cloak"));
        let out = apply_feedback(&s, &c, &CharacterCategorySchema::default(), &[edit]).unwrap();
        assert_eq!(out.characters[2].attributes["attire"], "a red cloak");
        assert_eq!(out.characters[..2], c[..2]);
    }

    #[test]
    fn regenerate_marks_target() {
        let (s, c) = fixture();
        let edits = [
            FeedbackEdit::regenerate(TargetKind::Character, "merchant"),
            FeedbackEdit::regenerate(TargetKind::Character, "merchant"),
        ];
        let out = apply_feedback(&s, &c, &CharacterCategorySchema::default(), &edits).unwrap();
        assert_eq!(out.regenerate, vec![(TargetKind::Character, "merchant".to_string())]);
    }

    #[test]
    fn unknown_targets_and_bad_patches_are_rejected_atomically() {
        let (s, c) = fixture();
        let schema = CharacterCategorySchema::default();
        let unknown = FeedbackEdit::approve(TargetKind::Scene, "9");
        assert_eq!(apply_feedback(&s, &c, &schema, &[unknown]), Err(StoryError::UnknownTarget("scene:9".into())));
        let ghost = FeedbackEdit::approve(TargetKind::Character, "ghost");
        assert!(matches!(apply_feedback(&s, &c, &schema, &[ghost]), Err(StoryError::UnknownTarget(_))));

        // Act regression breaks the narrative-order invariant.
        let backwards = FeedbackEdit::modify(TargetKind::Scene, "0", "act", json!("resolution"));
        assert!(matches!(apply_feedback(&s, &c, &schema, &[backwards]), Err(StoryError::InvariantViolation(_))));

        let blank = FeedbackEdit::modify(TargetKind::Character, "jack", "attributes.gender", json!(" "));
        assert!(matches!(apply_feedback(&s, &c, &schema, &[blank]), Err(StoryError::InvariantViolation(_))));

        let mut approve_with_patch = FeedbackEdit::approve(TargetKind::Scene, "1");
        approve_with_patch.patched_fields.insert("summary".into(), json!("x"));
        assert!(apply_feedback(&s, &c, &schema, &[approve_with_patch]).is_err());

        let unknown_field = FeedbackEdit::modify(TargetKind::Scene, "1", "mood", json!("grim"));
        assert!(apply_feedback(&s, &c, &schema, &[unknown_field]).is_err());
    }
}
