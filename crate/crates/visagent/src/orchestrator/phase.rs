use std::fmt;

use serde::{Deserialize, Serialize};
use visagent_core::events::Gate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Distilling,
    AwaitingDescriptionFeedback,
    Prompting,
    Reflecting,
    ElementGeneration,
    AwaitingElementApproval,
    Locating,
    Stitching,
    Rendering,
    Evaluating,
    Done,
    Failed,
}

impl Phase {
    pub const ALL: [Phase; 12] = [
        Phase::Distilling,
        Phase::AwaitingDescriptionFeedback,
        Phase::Prompting,
        Phase::Reflecting,
        Phase::ElementGeneration,
        Phase::AwaitingElementApproval,
        Phase::Locating,
        Phase::Stitching,
        Phase::Rendering,
        Phase::Evaluating,
        Phase::Done,
        Phase::Failed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Distilling => "distilling",
            Phase::AwaitingDescriptionFeedback => "awaiting_description_feedback",
            Phase::Prompting => "prompting",
            Phase::Reflecting => "reflecting",
            Phase::ElementGeneration => "element_generation",
            Phase::AwaitingElementApproval => "awaiting_element_approval",
            Phase::Locating => "locating",
            Phase::Stitching => "stitching",
            Phase::Rendering => "rendering",
            Phase::Evaluating => "evaluating",
            Phase::Done => "done",
            Phase::Failed => "failed",
        }
    }

    pub fn parse(s: &str) -> Option<Phase> {
        Phase::ALL.into_iter().find(|p| p.as_str() == s)
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Done | Phase::Failed)
    }

    /// The gate a waiting phase belongs to.
    pub fn gate(self) -> Option<Gate> {
        match self {
            Phase::AwaitingDescriptionFeedback => Some(Gate::Descriptions),
            Phase::AwaitingElementApproval => Some(Gate::Element),
            _ => None,
        }
    }

    /// The declared state graph. Self-loops on the two waiting phases are
    /// regeneration rounds; every non-terminal phase may fail.
    pub fn can_transition(self, to: Phase) -> bool {
        use Phase::*;
        if to == Failed {
            return !self.is_terminal();
        }
        matches!(
            (self, to),
            (Distilling, AwaitingDescriptionFeedback)
                | (AwaitingDescriptionFeedback, AwaitingDescriptionFeedback)
                | (AwaitingDescriptionFeedback, Prompting)
                | (Prompting, Reflecting)
                | (Reflecting, ElementGeneration)
                | (ElementGeneration, AwaitingElementApproval)
                | (AwaitingElementApproval, AwaitingElementApproval)
                | (AwaitingElementApproval, Locating)
                | (Locating, Stitching)
                | (Stitching, Rendering)
                | (Rendering, ElementGeneration)
                | (Rendering, Evaluating)
                | (Rendering, Done)
                | (Evaluating, Done)
        )
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
