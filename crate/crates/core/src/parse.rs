//! Extraction of code and unit tests from raw model responses, and the
//! functional-to-stdio value encoding.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::types::{CandidateKind, CandidateRecord, Payload, TestCase};

pub const TEST_INPUT_MARKER: &str = "**Test Input:**";
pub const TEST_OUTPUT_MARKER: &str = "**Test Output:**";

const FENCE: &str = "```";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, thiserror::Error)]
#[serde(rename_all = "snake_case")]
pub enum ParseFailure {
    #[error("no fenced code block")]
    NoCodeBlock,
    #[error("missing test input marker or block")]
    MissingTestInputMarker,
    #[error("missing test output marker or block")]
    MissingTestOutputMarker,
    #[error("fenced block is empty")]
    EmptyBlock,
}

/// Delimiters of a reasoning section that precedes the final answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThinkDelimiters {
    pub open: String,
    pub close: String,
}

impl Default for ThinkDelimiters {
    fn default() -> Self {
        Self {
            open: "<think>".to_string(),
            close: "</think>".to_string(),
        }
    }
}

/// A fenced block located in some text. Offsets are byte positions into the
/// scanned text; `end` points just past the closing fence.
#[derive(Debug, Clone, PartialEq, Eq)]
struct FencedBlock<'a> {
    content: &'a str,
    end: usize,
}

/// Scans `text` for fenced blocks in order of appearance.
///
/// An opening fence is a line whose first non-blank characters are three
/// backticks, optionally followed by a language tag. If the rest of that line
/// contains another fence, the block is inline and its content is whatever lies
/// between the two fences. Otherwise the content runs from the line after the
/// opening fence up to (not including) the newline before the closing fence
/// line. Unterminated blocks are dropped.
fn fenced_blocks(text: &str) -> Vec<FencedBlock<'_>> {
    let mut blocks = Vec::new();
    let mut open: Option<usize> = None; // byte offset where content starts
    let mut offset = 0;

    for line in text.split_inclusive('\n') {
        let line_start = offset;
        offset += line.len();
        let body = line.trim_end_matches(['\n', '\r']);
        let lead = body.len() - body.trim_start().len();
        let trimmed = &body[lead..];

        match open {
            None => {
                let Some(rest) = trimmed.strip_prefix(FENCE) else {
                    continue;
                };
                let rest_start = line_start + lead + FENCE.len();
                if let Some(close) = rest.find(FENCE) {
                    blocks.push(FencedBlock {
                        content: &text[rest_start..rest_start + close],
                        end: rest_start + close + FENCE.len(),
                    });
                } else {
                    open = Some(offset);
                }
            }
            Some(start) => {
                if trimmed.starts_with(FENCE) && trimmed[FENCE.len()..].trim().is_empty() {
                    // Content ends before the newline that precedes the fence line.
                    let mut end = line_start.max(start);
                    if end > start && text.as_bytes()[end - 1] == b'\n' {
                        end -= 1;
                        if end > start && text.as_bytes()[end - 1] == b'\r' {
                            end -= 1;
                        }
                    }
                    blocks.push(FencedBlock {
                        content: &text[start..end],
                        end: line_start + lead + FENCE.len(),
                    });
                    open = None;
                }
            }
        }
    }
    blocks
}

/// Returns the contents of the last fenced block in the response.
pub fn extract_code(raw: &str) -> Result<String, ParseFailure> {
    let block = fenced_blocks(raw).pop().ok_or(ParseFailure::NoCodeBlock)?;
    if block.content.trim().is_empty() {
        return Err(ParseFailure::EmptyBlock);
    }
    Ok(block.content.to_string())
}

/// Strips everything up to and including the last closing think delimiter,
/// when the response contains both delimiters.
fn answer_region<'a>(raw: &'a str, think: &ThinkDelimiters) -> &'a str {
    if think.open.is_empty() || think.close.is_empty() || !raw.contains(&think.open) {
        return raw;
    }
    match raw.rfind(&think.close) {
        Some(pos) => &raw[pos + think.close.len()..],
        None => raw,
    }
}

/// Extracts the final test example from a response written in the
/// `**Test Input:**` / `**Test Output:**` format.
///
/// The last input marker wins; the output marker is the first one after the
/// input block. Anything after the output block is ignored.
pub fn extract_test(raw: &str, think: &ThinkDelimiters) -> Result<TestCase, ParseFailure> {
    let region = answer_region(raw, think);

    let input_at = region
        .rfind(TEST_INPUT_MARKER)
        .ok_or(ParseFailure::MissingTestInputMarker)?;
    let after_input = &region[input_at + TEST_INPUT_MARKER.len()..];
    let input_block = first_block_before(after_input, TEST_OUTPUT_MARKER)
        .ok_or(ParseFailure::MissingTestInputMarker)?;

    let rest = &after_input[input_block.end..];
    let output_at = rest
        .find(TEST_OUTPUT_MARKER)
        .ok_or(ParseFailure::MissingTestOutputMarker)?;
    let after_output = &rest[output_at + TEST_OUTPUT_MARKER.len()..];
    let output_block = fenced_blocks(after_output)
        .into_iter()
        .next()
        .ok_or(ParseFailure::MissingTestOutputMarker)?;

    if output_block.content.trim().is_empty() {
        return Err(ParseFailure::EmptyBlock);
    }
    Ok(TestCase::new(input_block.content, output_block.content))
}

/// First fenced block that starts before `stop` (if `stop` occurs at all).
fn first_block_before<'a>(text: &'a str, stop: &str) -> Option<FencedBlock<'a>> {
    let limit = text.find(stop).unwrap_or(text.len());
    let block = fenced_blocks(text).into_iter().next()?;
    let start = block.content.as_ptr() as usize - text.as_ptr() as usize;
    (start <= limit).then_some(block)
}

/// Parses one response into a candidate record.
pub fn parse_candidate(
    task_id: &str,
    kind: CandidateKind,
    index: usize,
    raw: String,
    length_units: Option<u64>,
    think: &ThinkDelimiters,
) -> (CandidateRecord, Option<ParseFailure>) {
    let outcome = match kind {
        CandidateKind::Code => extract_code(&raw).map(Payload::Code),
        CandidateKind::Test => extract_test(&raw, think).map(Payload::Test),
    };
    let length_units = length_units.unwrap_or_else(|| crate::types::whitespace_units(&raw));
    let (parsed, failure) = match outcome {
        Ok(p) => (Some(p), None),
        Err(f) => (None, Some(f)),
    };
    (
        CandidateRecord {
            task_id: task_id.to_string(),
            kind,
            index,
            raw,
            parsed,
            length_units,
        },
        failure,
    )
}

/// Encodes function arguments (or a return value) as stdio text: one value
/// per line, flat lists joined by single spaces.
pub fn stdio_encode(values: &[Value]) -> Result<String> {
    let mut lines = Vec::with_capacity(values.len());
    for value in values {
        let line = match value {
            Value::Array(items) => items
                .iter()
                .map(render_scalar)
                .collect::<Result<Vec<_>>>()?
                .join(" "),
            other => render_scalar(other)?,
        };
        lines.push(line);
    }
    Ok(lines.join("\n"))
}

fn render_scalar(value: &Value) -> Result<String> {
    match value {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        // Candidate programs are Python; print(True) writes "True".
        Value::Bool(true) => Ok("True".to_string()),
        Value::Bool(false) => Ok("False".to_string()),
        Value::Array(_) => Err(Error::UnsupportedShape(
            "lists nested deeper than one level".to_string(),
        )),
        Value::Object(_) => Err(Error::UnsupportedShape("objects".to_string())),
        Value::Null => Err(Error::UnsupportedShape("null".to_string())),
    }
}
