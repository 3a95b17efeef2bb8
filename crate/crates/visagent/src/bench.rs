//! Matching stored runs against benchmark cases.

use visagent_core::eval::{parse_benchmark, BenchmarkCase, FieldMapping};

use crate::orchestrator::PipelineRun;

pub fn load_cases(path: &std::path::Path, mapping: &FieldMapping) -> anyhow::Result<Vec<BenchmarkCase>> {
    let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    Ok(parse_benchmark(&text, mapping)?)
}

/// The case for a run: same story id as the run title, or same story text.
pub fn find_case<'a>(cases: &'a [BenchmarkCase], run: &PipelineRun) -> Option<&'a BenchmarkCase> {
    let title = run.story.title.as_deref();
    cases
        .iter()
        .find(|c| Some(c.story_id.as_str()) == title)
        .or_else(|| cases.iter().find(|c| c.story.as_deref().map(str::trim) == Some(run.story.text.trim())))
}

/// Global prompts of a case, one per scene, for scoring TIS.
pub fn case_prompts(case: &BenchmarkCase, separator: &str) -> Vec<String> {
    case.layered_prompts(separator).into_iter().map(|p| p.global_prompt).collect()
}
