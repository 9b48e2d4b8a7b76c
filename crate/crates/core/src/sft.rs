//! SFT data preparation: reasoning strip, chat rendering, loss masking, and
//! the drop filter.
//!
//! Loss masks are built from per-turn token offsets: every turn is rendered
//! and tokenized on its own, the token lists are concatenated, and the mask
//! is 1 exactly on the spans that came from model turns. Nothing here depends
//! on a particular tokenizer.

use std::ops::Add;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    #[serde(alias = "assistant")]
    Model,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    #[serde(alias = "content")]
    pub text: String,
}

impl Turn {
    pub fn new(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RawSample {
    #[serde(alias = "messages")]
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnSpan {
    pub start: usize,
    pub length: usize,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedSample {
    pub token_ids: Vec<u32>,
    pub loss_mask: Vec<u8>,
    pub per_turn_offsets: Vec<TurnSpan>,
    /// No model turn contributed any content tokens.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub empty_target: bool,
}

impl TokenizedSample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn loss_tokens(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m == 1).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PipelineStats {
    pub total: usize,
    pub kept: usize,
    pub dropped_too_long: usize,
    pub dropped_empty: usize,
}

impl PipelineStats {
    pub fn balanced(&self) -> bool {
        self.total == self.kept + self.dropped_too_long + self.dropped_empty
    }
}

impl Add for PipelineStats {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self {
            total: self.total + rhs.total,
            kept: self.kept + rhs.kept,
            dropped_too_long: self.dropped_too_long + rhs.dropped_too_long,
            dropped_empty: self.dropped_empty + rhs.dropped_empty,
        }
    }
}

pub trait Tokenizer {
    fn encode(&self, text: &str) -> Vec<u32>;
}

impl<F: Fn(&str) -> Vec<u32>> Tokenizer for F {
    fn encode(&self, text: &str) -> Vec<u32> {
        self(text)
    }
}

/// One token per whitespace-separated word; ids are 32-bit FNV-1a hashes.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|word| {
                word.bytes()
                    .fold(0x811c_9dc5u32, |h, b| (h ^ b as u32).wrapping_mul(0x0100_0193))
            })
            .collect()
    }
}

/// One token per UTF-8 byte.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }
}

/// Turn delimiters. A rendered turn is `prefix + text + suffix`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTemplate {
    pub user_prefix: String,
    pub model_prefix: String,
    pub turn_suffix: String,
}

impl Default for ChatTemplate {
    fn default() -> Self {
        Self {
            user_prefix: "<start_of_turn>user\n".into(),
            model_prefix: "<start_of_turn>model\n".into(),
            turn_suffix: "<end_of_turn>\n".into(),
        }
    }
}

impl ChatTemplate {
    /// Renders turns verbatim, with no delimiters.
    pub fn bare() -> Self {
        Self {
            user_prefix: String::new(),
            model_prefix: String::new(),
            turn_suffix: String::new(),
        }
    }
}

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";
const FENCE: &str = "```";
const VERILOG_FENCE: &str = "```verilog";

/// Removes `<think>` blocks and keeps only the answer.
///
/// An unclosed `<think>` removes everything after it. The first
/// `<answer>...</answer>` block wins; failing that, the first ```` ```verilog ````
/// fence. The rule is applied until nothing changes, so the result is a
/// fixed point.
pub fn strip_reasoning(text: &str) -> String {
    let mut current = text.to_string();
    loop {
        let next = strip_once(&current);
        if next == current {
            return current;
        }
        current = next;
    }
}

fn strip_once(text: &str) -> String {
    let without_think = remove_think_blocks(text);
    if let Some(answer) = delimited(&without_think, ANSWER_OPEN, ANSWER_CLOSE) {
        return answer.trim().to_string();
    }
    if let Some(code) = verilog_fence(&without_think) {
        return code.trim().to_string();
    }
    without_think
}

fn remove_think_blocks(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(open) = rest.find(THINK_OPEN) {
        out.push_str(&rest[..open]);
        let after = &rest[open + THINK_OPEN.len()..];
        match after.find(THINK_CLOSE) {
            Some(close) => rest = &after[close + THINK_CLOSE.len()..],
            None => return out,
        }
    }
    out.push_str(rest);
    out
}

fn delimited<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = text.find(open)? + open.len();
    let end = text[start..].find(close)?;
    Some(&text[start..start + end])
}

fn verilog_fence(text: &str) -> Option<&str> {
    let start = text.find(VERILOG_FENCE)? + VERILOG_FENCE.len();
    let end = text[start..].find(FENCE)?;
    Some(&text[start..start + end])
}

/// Drops system turns and wraps the rest in the template's delimiters.
pub fn render_turns(sample: &RawSample, template: &ChatTemplate) -> Vec<(Role, String)> {
    sample
        .turns
        .iter()
        .filter_map(|turn| {
            let prefix = match turn.role {
                Role::System => return None,
                Role::User => &template.user_prefix,
                Role::Model => &template.model_prefix,
            };
            Some((turn.role, format!("{prefix}{}{}", turn.text, template.turn_suffix)))
        })
        .collect()
}

pub fn build_loss_mask<T: Tokenizer + ?Sized>(
    sample: &RawSample,
    tokenizer: &T,
    template: &ChatTemplate,
) -> TokenizedSample {
    let mut token_ids = Vec::new();
    let mut loss_mask = Vec::new();
    let mut per_turn_offsets = Vec::new();
    for (role, rendered) in render_turns(sample, template) {
        let ids = tokenizer.encode(&rendered);
        let bit = u8::from(role == Role::Model);
        per_turn_offsets.push(TurnSpan {
            start: token_ids.len(),
            length: ids.len(),
            role,
        });
        loss_mask.extend(std::iter::repeat_n(bit, ids.len()));
        token_ids.extend(ids);
    }
    let empty_target = !sample
        .turns
        .iter()
        .any(|t| t.role == Role::Model && !tokenizer.encode(&t.text).is_empty());
    TokenizedSample {
        token_ids,
        loss_mask,
        per_turn_offsets,
        empty_target,
    }
}

/// Drops samples longer than `max_seq_len` (length equal to the limit is
/// kept), then samples with nothing to train on.
pub fn filter_samples(samples: Vec<TokenizedSample>, max_seq_len: usize) -> (Vec<TokenizedSample>, PipelineStats) {
    let mut stats = PipelineStats {
        total: samples.len(),
        ..Default::default()
    };
    let kept: Vec<TokenizedSample> = samples
        .into_iter()
        .filter(|s| {
            if s.len() > max_seq_len {
                stats.dropped_too_long += 1;
                false
            } else if s.empty_target || s.loss_tokens() == 0 {
                stats.dropped_empty += 1;
                false
            } else {
                true
            }
        })
        .collect();
    stats.kept = kept.len();
    (kept, stats)
}

/// Strips reasoning from model turns and drops system turns.
pub fn clean_sample(sample: &RawSample) -> RawSample {
    RawSample {
        turns: sample
            .turns
            .iter()
            .filter(|t| t.role != Role::System)
            .map(|t| match t.role {
                Role::Model => Turn::new(Role::Model, strip_reasoning(&t.text)),
                _ => t.clone(),
            })
            .collect(),
    }
}

/// The full pipeline over a batch: clean, tokenize with masks, filter.
/// Returns each kept sample alongside its cleaned source.
pub fn prepare<T: Tokenizer + Sync + ?Sized>(
    samples: &[RawSample],
    tokenizer: &T,
    template: &ChatTemplate,
    max_seq_len: usize,
) -> (Vec<(RawSample, TokenizedSample)>, PipelineStats) {
    let processed: Vec<(RawSample, TokenizedSample)> = samples
        .par_iter()
        .map(|raw| {
            let cleaned = clean_sample(raw);
            let tokenized = build_loss_mask(&cleaned, tokenizer, template);
            (cleaned, tokenized)
        })
        .collect();
    let mut stats = PipelineStats::default();
    let mut kept = Vec::new();
    for (cleaned, tokenized) in processed {
        let (mut survivors, s) = filter_samples(vec![tokenized], max_seq_len);
        stats = stats + s;
        if let Some(t) = survivors.pop() {
            kept.push((cleaned, t));
        }
    }
    (kept, stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(turns: &[(Role, &str)]) -> RawSample {
        RawSample {
            turns: turns.iter().map(|(r, t)| Turn::new(*r, *t)).collect(),
        }
    }

    #[test]
    fn strip_examples() {
        assert_eq!(
            strip_reasoning("<think>x</think><answer>module m; endmodule</answer>"),
            "module m; endmodule"
        );
        assert_eq!(strip_reasoning("plain text, no tags"), "plain text, no tags");
        assert_eq!(
            strip_reasoning("<think>a</think><think>b</think>```verilog\ncode\n```"),
            "code"
        );
    }

    #[test]
    fn strip_edge_cases() {
        assert_eq!(strip_reasoning("keep <think>never closed"), "keep ");
        assert_eq!(strip_reasoning("<answer>one</answer><answer>two</answer>"), "one");
        assert_eq!(
            strip_reasoning("<answer>```verilog\nmodule a;\n```</answer>"),
            "module a;"
        );
        assert_eq!(strip_reasoning("<answer>unclosed"), "<answer>unclosed");
    }

    #[test]
    fn system_turns_are_dropped() {
        let t = ChatTemplate::default();
        let s = sample(&[(Role::System, "sys"), (Role::User, "u"), (Role::Model, "m")]);
        let rendered = render_turns(&s, &t);
        assert_eq!(rendered.len(), 2);
        assert_eq!(
            rendered[0],
            (Role::User, "<start_of_turn>user\nu<end_of_turn>\n".to_string())
        );
        assert_eq!(
            render_turns(&sample(&[(Role::User, "u"), (Role::Model, "m")]), &t).len(),
            2
        );
        assert!(render_turns(&sample(&[(Role::System, "only")]), &t).is_empty());
    }

    #[test]
    fn mask_follows_model_spans() {
        let s = sample(&[(Role::User, "a b c"), (Role::Model, "d e f g h")]);
        let t = build_loss_mask(&s, &WhitespaceTokenizer, &ChatTemplate::bare());
        assert_eq!(t.loss_mask, vec![0, 0, 0, 1, 1, 1, 1, 1]);
        assert_eq!(
            t.per_turn_offsets[1],
            TurnSpan {
                start: 3,
                length: 5,
                role: Role::Model
            }
        );

        let model_only = build_loss_mask(
            &sample(&[(Role::Model, "x y")]),
            &WhitespaceTokenizer,
            &ChatTemplate::bare(),
        );
        assert_eq!(model_only.loss_mask, vec![1, 1]);
    }

    #[test]
    fn empty_model_turn_is_flagged() {
        let s = sample(&[(Role::User, "question"), (Role::Model, "   ")]);
        let t = build_loss_mask(&s, &WhitespaceTokenizer, &ChatTemplate::default());
        assert!(t.empty_target);
        let (kept, stats) = filter_samples(vec![t], 100);
        assert!(kept.is_empty());
        assert_eq!(stats.dropped_empty, 1);
    }

    #[test]
    fn length_boundary() {
        let make = |n: usize| {
            let text = vec!["w"; n].join(" ");
            build_loss_mask(
                &sample(&[(Role::Model, &text)]),
                &WhitespaceTokenizer,
                &ChatTemplate::bare(),
            )
        };
        let (kept, stats) = filter_samples(vec![make(4), make(5), make(3)], 4);
        assert_eq!(kept.len(), 2);
        assert_eq!(stats.dropped_too_long, 1);
        assert!(stats.balanced());
    }

    #[test]
    fn prepare_strips_and_counts() {
        let raw = vec![
            sample(&[
                (Role::System, "s"),
                (Role::User, "q"),
                (Role::Model, "<think>long</think><answer>m</answer>"),
            ]),
            sample(&[(Role::User, "q"), (Role::Model, "<think>only thinking</think>")]),
            sample(&[(Role::User, "q q q q q q"), (Role::Model, "a")]),
        ];
        let (kept, stats) = prepare(&raw, &WhitespaceTokenizer, &ChatTemplate::bare(), 4);
        assert_eq!(
            stats,
            PipelineStats {
                total: 3,
                kept: 1,
                dropped_too_long: 1,
                dropped_empty: 1
            }
        );
        assert_eq!(kept[0].0.turns.len(), 2);
        assert_eq!(kept[0].0.turns[1].text, "m");
    }

    #[test]
    fn role_aliases() {
        let s: RawSample =
            serde_json::from_str(r#"{"turns":[{"role":"user","text":"a"},{"role":"assistant","text":"b"}]}"#).unwrap();
        assert_eq!(s.turns[1].role, Role::Model);
    }
}
