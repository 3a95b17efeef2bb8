use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec::Vec;

use super::{BackendDescriptor, BackendError, Capability, LayoutProposal, LayoutRequest, MultimodalBackend};

/// Scene locator stand-in.
///
/// Without a script it spreads the characters left to right in
/// neighbouring, slightly overlapping standing boxes. With a script it
/// returns the queued proposals in order and fails once they run out.
#[derive(Debug, Clone, Default)]
pub struct MockLayoutBackend {
    script: Option<VecDeque<Vec<LayoutProposal>>>,
    feedback: Vec<Vec<String>>,
}

impl MockLayoutBackend {
    pub fn scripted(rounds: Vec<Vec<LayoutProposal>>) -> Self {
        Self { script: Some(rounds.into()), feedback: Vec::new() }
    }

    /// Violation feedback attached to each request, in call order.
    pub fn feedback_seen(&self) -> &[Vec<String>] {
        &self.feedback
    }

    pub fn procedural(ids: &[&str]) -> Vec<LayoutProposal> {
        let n = ids.len().max(1) as f64;
        let width = (1.4 / n).min(0.5);
        ids.iter()
            .enumerate()
            .map(|(i, id)| {
                let cx = (i as f64 + 0.5) / n;
                let x_min = (cx - width / 2.0).clamp(0.0, 1.0 - width);
                LayoutProposal { character_id: (*id).into(), bbox: [x_min, 0.3, x_min + width, 0.95], z_order: None }
            })
            .collect()
    }
}

impl MultimodalBackend for MockLayoutBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor::mock("mock-layout", Capability::MultimodalLayout)
    }

    fn propose_layout(&mut self, request: &LayoutRequest<'_>) -> Result<Vec<LayoutProposal>, BackendError> {
        self.feedback.push(request.feedback.to_vec());
        match &mut self.script {
            Some(q) => q.pop_front().ok_or_else(|| BackendError::new("mock-layout", "layout script exhausted")),
            None => Ok(Self::procedural(&request.prompts.character_ids().collect::<Vec<_>>())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::layout::{validate_bbox, BBox};

    #[test]
    fn procedural_boxes_are_valid_and_overlap() {
        for n in 1..6 {
            let ids: Vec<String> = (0..n).map(|i| alloc::format!("c{i}")).collect();
            let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
            let p = MockLayoutBackend::procedural(&refs);
            assert_eq!(p.len(), n);
            for b in &p {
                validate_bbox(&BBox::from_array(b.bbox), 0.01).unwrap();
            }
            if n >= 3 {
                assert!(p[0].bbox[2] > p[1].bbox[0]);
            }
        }
    }
}
