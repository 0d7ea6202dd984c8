//! Sentinel-delimited surface format used to tune and query the instruction
//! synthesizer.
//!
//! A formatted example looks like
//!
//! ```text
//! <s> <CON> {text} </CON>
//!
//! <QUE> {instruction} <ANS> {response} </END>
//!
//! <QUE> ... </END> </s>
//! ```
//!
//! Multiple-choice pairs list their options after an `Options:` line, and
//! chain-of-thought pairs end the question with `Let's think step by step.`
//! and put the rationale before `Therefore, the answer is`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OPTIONS_HEADER: &str = "Options:";
pub const OPTION_PREFIX: &str = "- ";
pub const COT_TRIGGER: &str = "Let's think step by step.";
pub const COT_ANSWER_MARKER: &str = "Therefore, the answer is";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairFormat {
    FreeForm,
    MultipleChoice,
    FreeFormCot,
    MultipleChoiceCot,
}

impl PairFormat {
    pub const ALL: [PairFormat; 4] = [
        PairFormat::FreeForm,
        PairFormat::MultipleChoice,
        PairFormat::FreeFormCot,
        PairFormat::MultipleChoiceCot,
    ];

    pub fn from_parts(multiple_choice: bool, cot: bool) -> Self {
        match (multiple_choice, cot) {
            (false, false) => PairFormat::FreeForm,
            (true, false) => PairFormat::MultipleChoice,
            (false, true) => PairFormat::FreeFormCot,
            (true, true) => PairFormat::MultipleChoiceCot,
        }
    }

    pub fn is_multiple_choice(self) -> bool {
        matches!(self, PairFormat::MultipleChoice | PairFormat::MultipleChoiceCot)
    }

    pub fn is_cot(self) -> bool {
        matches!(self, PairFormat::FreeFormCot | PairFormat::MultipleChoiceCot)
    }
}

/// One synthesized (or gold) task attached to a raw text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionResponsePair {
    pub instruction: String,
    pub response: String,
    pub format: PairFormat,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cot: Option<String>,
}

impl InstructionResponsePair {
    pub fn free_form(instruction: impl Into<String>, response: impl Into<String>) -> Self {
        InstructionResponsePair {
            instruction: instruction.into(),
            response: response.into(),
            format: PairFormat::FreeForm,
            options: Vec::new(),
            cot: None,
        }
    }

    pub fn multiple_choice(
        instruction: impl Into<String>,
        options: Vec<String>,
        response: impl Into<String>,
    ) -> Self {
        InstructionResponsePair {
            instruction: instruction.into(),
            response: response.into(),
            format: PairFormat::MultipleChoice,
            options,
            cot: None,
        }
    }

    /// Adds a rationale, turning the pair into the matching CoT format.
    pub fn with_cot(mut self, cot: impl Into<String>) -> Self {
        self.cot = Some(cot.into());
        self.format = PairFormat::from_parts(self.format.is_multiple_choice(), true);
        self
    }

    /// Structural checks that do not depend on sentinels.
    pub fn check_shape(&self) -> Result<()> {
        let mc = self.format.is_multiple_choice();
        if mc == self.options.is_empty() {
            return Err(Error::InvalidPair(format!(
                "format {:?} with {} options",
                self.format,
                self.options.len()
            )));
        }
        let has_cot = self.cot.as_deref().is_some_and(|c| !c.trim().is_empty());
        if self.format.is_cot() != has_cot {
            return Err(Error::InvalidPair(format!(
                "format {:?} with cot {:?}",
                self.format, self.cot
            )));
        }
        for opt in &self.options {
            if opt.trim().is_empty() || opt.contains('\n') || opt.trim() != opt {
                return Err(Error::InvalidPair(format!("malformed option {opt:?}")));
            }
        }
        if self.instruction.lines().any(|l| l.trim_end() == OPTIONS_HEADER) {
            return Err(Error::InvalidPair(
                "instruction contains an options header line".into(),
            ));
        }
        if self.instruction.trim_end().ends_with(COT_TRIGGER) {
            return Err(Error::InvalidPair(
                "instruction ends with the chain-of-thought trigger".into(),
            ));
        }
        if self.format.is_cot() && self.response.contains(COT_ANSWER_MARKER) {
            return Err(Error::InvalidPair(
                "chain-of-thought response contains the answer marker".into(),
            ));
        }
        Ok(())
    }

    fn fields(&self) -> impl Iterator<Item = (&'static str, &str)> {
        [
            ("instruction", self.instruction.as_str()),
            ("response", self.response.as_str()),
        ]
        .into_iter()
        .chain(self.options.iter().map(|o| ("option", o.as_str())))
        .chain(self.cot.iter().map(|c| ("cot", c.as_str())))
    }

    /// Concatenation used by the text-similarity metrics.
    pub fn flatten(&self) -> String {
        format!("{} {}", self.instruction, self.response)
    }
}

/// A raw text together with the pairs conditioned on it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisExample {
    pub text: String,
    pub pairs: Vec<InstructionResponsePair>,
    #[serde(default)]
    pub source_id: String,
    #[serde(default)]
    pub dataset_id: String,
}

impl SynthesisExample {
    pub fn new(text: impl Into<String>, pairs: Vec<InstructionResponsePair>) -> Self {
        SynthesisExample {
            text: text.into(),
            pairs,
            source_id: String::new(),
            dataset_id: String::new(),
        }
    }

    pub fn with_ids(mut self, source_id: impl Into<String>, dataset_id: impl Into<String>) -> Self {
        self.source_id = source_id.into();
        self.dataset_id = dataset_id.into();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionPolicy {
    /// Fields containing a sentinel are rejected.
    #[default]
    Reject,
    /// Sentinels inside fields are broken up with an interior space.
    Escape,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SentinelConfig {
    #[serde(default = "defaults::example_open")]
    pub example_open: String,
    #[serde(default = "defaults::example_close")]
    pub example_close: String,
    #[serde(default = "defaults::context_open")]
    pub context_open: String,
    #[serde(default = "defaults::context_close")]
    pub context_close: String,
    #[serde(default = "defaults::que")]
    pub que: String,
    #[serde(default = "defaults::ans")]
    pub ans: String,
    #[serde(default = "defaults::end")]
    pub end: String,
    #[serde(default = "defaults::joiner")]
    pub joiner: String,
    #[serde(default)]
    pub on_collision: CollisionPolicy,
}

mod defaults {
    pub fn example_open() -> String {
        "<s>".into()
    }
    pub fn example_close() -> String {
        "</s>".into()
    }
    pub fn context_open() -> String {
        "<CON>".into()
    }
    pub fn context_close() -> String {
        "</CON>".into()
    }
    pub fn que() -> String {
        "<QUE>".into()
    }
    pub fn ans() -> String {
        "<ANS>".into()
    }
    pub fn end() -> String {
        "</END>".into()
    }
    pub fn joiner() -> String {
        "\n\n".into()
    }
}

impl Default for SentinelConfig {
    fn default() -> Self {
        SentinelConfig {
            example_open: defaults::example_open(),
            example_close: defaults::example_close(),
            context_open: defaults::context_open(),
            context_close: defaults::context_close(),
            que: defaults::que(),
            ans: defaults::ans(),
            end: defaults::end(),
            joiner: defaults::joiner(),
            on_collision: CollisionPolicy::Reject,
        }
    }
}

impl SentinelConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: SentinelConfig = serde_json::from_str(&raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn all(&self) -> [&str; 8] {
        [
            &self.example_open,
            &self.example_close,
            &self.context_open,
            &self.context_close,
            &self.que,
            &self.ans,
            &self.end,
            &self.joiner,
        ]
    }

    /// Sentinels that may never appear inside a field. The joiner is excluded
    /// because raw texts legitimately contain blank lines.
    pub fn reserved(&self) -> [&str; 7] {
        [
            &self.example_open,
            &self.example_close,
            &self.context_open,
            &self.context_close,
            &self.que,
            &self.ans,
            &self.end,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.all();
        for (i, a) in all.iter().enumerate() {
            if a.is_empty() {
                return Err(Error::InvalidConfig(format!("sentinel #{i} is empty")));
            }
            if all[..i].contains(a) {
                return Err(Error::InvalidConfig(format!("sentinel {a:?} is duplicated")));
            }
        }
        Ok(())
    }

    /// Returns the first reserved sentinel contained in `field`.
    pub fn find_collision(&self, field: &str) -> Option<&str> {
        self.reserved().into_iter().find(|s| field.contains(s))
    }

    fn clean<'a>(&self, field_name: &'static str, field: &'a str) -> Result<std::borrow::Cow<'a, str>> {
        match self.find_collision(field) {
            None => Ok(std::borrow::Cow::Borrowed(field)),
            Some(s) => match self.on_collision {
                CollisionPolicy::Reject => Err(Error::SentinelCollision {
                    field: field_name,
                    sentinel: s.to_string(),
                }),
                CollisionPolicy::Escape => {
                    let escaped = self.escape(field);
                    match self.find_collision(&escaped) {
                        None => Ok(std::borrow::Cow::Owned(escaped)),
                        Some(s) => Err(Error::SentinelCollision {
                            field: field_name,
                            sentinel: s.to_string(),
                        }),
                    }
                }
            },
        }
    }

    /// Breaks every reserved sentinel in `field` by inserting a space after
    /// its first character, e.g. `<QUE>` becomes `< QUE>`.
    pub fn escape(&self, field: &str) -> String {
        let mut out = field.to_string();
        // Bounded: a pathological sentinel could survive its own escaping.
        for _ in 0..16 {
            let Some(s) = self.find_collision(&out) else { break };
            let first = s.chars().next().map_or(1, char::len_utf8);
            let broken = format!("{} {}", &s[..first], &s[first..]);
            out = out.replace(s, &broken);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Context,
    Pairs,
    Sentinel,
}

/// Byte range of a rendered string tagged with what produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub kind: SegmentKind,
}

impl Serialize for Segment {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        (self.start, self.end, self.kind).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Segment {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let (start, end, kind) = <(usize, usize, SegmentKind)>::deserialize(d)?;
        Ok(Segment { start, end, kind })
    }
}

/// A rendered string plus the segments that tile it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Rendered {
    pub text: String,
    pub segments: Vec<Segment>,
}

impl Rendered {
    pub fn push(&mut self, piece: &str, kind: SegmentKind) {
        if piece.is_empty() {
            return;
        }
        let start = self.text.len();
        self.text.push_str(piece);
        let end = self.text.len();
        match self.segments.last_mut() {
            Some(last) if last.kind == kind && last.end == start => last.end = end,
            _ => self.segments.push(Segment { start, end, kind }),
        }
    }

    pub fn append(&mut self, other: &Rendered) {
        let offset = self.text.len();
        for seg in &other.segments {
            self.push(&other.text[seg.start..seg.end], seg.kind);
        }
        debug_assert_eq!(self.text.len(), offset + other.text.len());
    }
}

/// Renders one pair with the template matching its format.
pub fn render_pair(pair: &InstructionResponsePair, cfg: &SentinelConfig) -> Result<String> {
    pair.check_shape()?;
    let mut fields = Vec::with_capacity(4);
    for (name, value) in pair.fields() {
        fields.push(cfg.clean(name, value)?);
    }
    let instruction = &fields[0];
    let response = &fields[1];
    let options = &fields[2..2 + pair.options.len()];

    let mut out = format!("{} {}", cfg.que, instruction);
    if pair.format.is_multiple_choice() {
        out.push('\n');
        out.push_str(OPTIONS_HEADER);
        for opt in options {
            out.push('\n');
            out.push_str(OPTION_PREFIX);
            out.push_str(opt);
        }
    }
    if pair.format.is_cot() {
        let cot = fields.last().expect("cot field present for CoT formats");
        out.push('\n');
        out.push_str(COT_TRIGGER);
        out.push_str(&format!(" {} {}\n{} {} {}", cfg.ans, cot, COT_ANSWER_MARKER, response, cfg.end));
    } else {
        out.push_str(&format!(" {} {} {}", cfg.ans, response, cfg.end));
    }
    Ok(out)
}

/// Renders an example and records which bytes are context, pairs or
/// sentinel scaffolding.
pub fn render_example_segments(ex: &SynthesisExample, cfg: &SentinelConfig) -> Result<Rendered> {
    let text = cfg.clean("text", &ex.text)?;
    let pairs = ex
        .pairs
        .iter()
        .map(|p| render_pair(p, cfg))
        .collect::<Result<Vec<_>>>()?;

    let mut out = Rendered::default();
    out.push(&format!("{} {} ", cfg.example_open, cfg.context_open), SegmentKind::Sentinel);
    out.push(&text, SegmentKind::Context);
    out.push(&format!(" {}", cfg.context_close), SegmentKind::Sentinel);
    if !pairs.is_empty() {
        out.push(&cfg.joiner, SegmentKind::Sentinel);
        out.push(&pairs.join(&cfg.joiner), SegmentKind::Pairs);
    }
    out.push(&format!(" {}", cfg.example_close), SegmentKind::Sentinel);
    Ok(out)
}

pub fn render_example(ex: &SynthesisExample, cfg: &SentinelConfig) -> Result<String> {
    render_example_segments(ex, cfg).map(|r| r.text)
}

/// Opening of an example whose pairs are still to be generated:
/// `<s> <CON> {text} </CON>` followed by the joiner.
pub fn render_open_stub(text: &str, cfg: &SentinelConfig) -> Result<String> {
    let text = cfg.clean("text", text)?;
    Ok(format!(
        "{} {} {} {}{}",
        cfg.example_open, cfg.context_open, text, cfg.context_close, cfg.joiner
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    /// A question opened but the input ended before its end sentinel.
    TruncatedPair,
    /// Sentinels out of order, e.g. a second question before an answer.
    MalformedPair,
    /// A field would contain a reserved sentinel.
    SentinelInField,
    /// A chain-of-thought question without the answer marker.
    MissingAnswerMarker,
    /// An options block with lines that are not options.
    MalformedOptions,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseIssue {
    pub kind: IssueKind,
    /// Byte offset of the question sentinel the issue refers to.
    pub offset: usize,
    pub detail: String,
}

impl fmt::Display for ParseIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at byte {}: {}", self.kind, self.offset, self.detail)
    }
}

fn find_from(haystack: &str, needle: &str, from: usize) -> Option<usize> {
    haystack[from..].find(needle).map(|i| i + from)
}

/// Extracts every well-formed `<QUE> .. <ANS> .. </END>` span from arbitrary
/// model output.
pub fn parse_pairs(raw: &str, cfg: &SentinelConfig) -> (Vec<InstructionResponsePair>, Vec<ParseIssue>) {
    let mut pairs = Vec::new();
    let mut issues = Vec::new();
    let mut pos = 0;
    while let Some(q) = find_from(raw, &cfg.que, pos) {
        let body = q + cfg.que.len();
        let next_que = find_from(raw, &cfg.que, body);
        let end = find_from(raw, &cfg.end, body);
        let limit = next_que.unwrap_or(raw.len());
        let issue = |kind, detail: &str| ParseIssue {
            kind,
            offset: q,
            detail: detail.to_string(),
        };
        let Some(e) = end.filter(|&e| e < limit) else {
            match next_que {
                Some(nq) => {
                    issues.push(issue(IssueKind::MalformedPair, "question reopened before it was closed"));
                    pos = nq;
                    continue;
                }
                None => {
                    issues.push(issue(IssueKind::TruncatedPair, "input ended inside a pair"));
                    break;
                }
            }
        };
        pos = e + cfg.end.len();
        let Some(a) = find_from(raw, &cfg.ans, body).filter(|&a| a < e) else {
            issues.push(issue(IssueKind::MalformedPair, "pair closed without an answer"));
            continue;
        };
        let question = &raw[body..a];
        let answer = &raw[a + cfg.ans.len()..e];
        if let Some(s) = cfg.find_collision(question).or_else(|| cfg.find_collision(answer)) {
            issues.push(issue(
                IssueKind::SentinelInField,
                &format!("field contains {s:?}"),
            ));
            continue;
        }
        let (pair, problems) = classify_pair(question, answer);
        issues.extend(problems.into_iter().map(|(k, d)| issue(k, &d)));
        pairs.push(pair);
    }
    (pairs, issues)
}

fn classify_pair(question: &str, answer: &str) -> (InstructionResponsePair, Vec<(IssueKind, String)>) {
    let mut problems = Vec::new();
    let mut question = question.trim();
    let mut cot_requested = false;
    if let Some(stripped) = question.strip_suffix(COT_TRIGGER) {
        question = stripped.trim_end();
        cot_requested = true;
    }

    let mut instruction = question.to_string();
    let mut options = Vec::new();
    let lines: Vec<&str> = question.split('\n').collect();
    if let Some(header) = lines.iter().rposition(|l| l.trim_end() == OPTIONS_HEADER) {
        let block = &lines[header + 1..];
        let parsed: Option<Vec<String>> = block
            .iter()
            .map(|l| l.strip_prefix(OPTION_PREFIX).map(|o| o.trim().to_string()))
            .collect();
        match parsed {
            Some(opts) if !opts.is_empty() && opts.iter().all(|o| !o.is_empty()) => {
                instruction = lines[..header].join("\n").trim_end().to_string();
                options = opts;
            }
            _ => problems.push((
                IssueKind::MalformedOptions,
                "options block has non-option lines; treated as free-form".to_string(),
            )),
        }
    }

    let answer = answer.trim();
    let mut cot = None;
    let mut response = answer.to_string();
    if cot_requested {
        match answer.rfind(COT_ANSWER_MARKER) {
            Some(i) => {
                let rationale = answer[..i].trim();
                if rationale.is_empty() {
                    problems.push((
                        IssueKind::MissingAnswerMarker,
                        "empty rationale; treated as non-CoT".to_string(),
                    ));
                } else {
                    cot = Some(rationale.to_string());
                }
                response = answer[i + COT_ANSWER_MARKER.len()..].trim().to_string();
            }
            None => problems.push((
                IssueKind::MissingAnswerMarker,
                "answer marker absent; whole answer kept as response".to_string(),
            )),
        }
    }
    let format = PairFormat::from_parts(!options.is_empty(), cot.is_some());
    (
        InstructionResponsePair {
            instruction,
            response,
            format,
            options,
            cot,
        },
        problems,
    )
}

/// Parses a single formatted example back into text and pairs. The source
/// and dataset ids are not part of the surface format and come back empty.
pub fn parse_example(raw: &str, cfg: &SentinelConfig) -> Result<SynthesisExample> {
    parse_example_with_issues(raw, cfg).map(|(ex, _)| ex)
}

pub fn parse_example_with_issues(
    raw: &str,
    cfg: &SentinelConfig,
) -> Result<(SynthesisExample, Vec<ParseIssue>)> {
    let opens: Vec<usize> = raw.match_indices(cfg.context_open.as_str()).map(|(i, _)| i).collect();
    let open = match opens.as_slice() {
        [] => return Err(Error::MissingContext),
        [one] => *one,
        many => return Err(Error::AmbiguousContext { count: many.len() }),
    };
    let body = open + cfg.context_open.len();
    let close = find_from(raw, &cfg.context_close, body).ok_or(Error::MissingContext)?;
    let text = raw[body..close].trim().to_string();
    let rest_start = close + cfg.context_close.len();
    let rest_end = find_from(raw, &cfg.example_close, rest_start).unwrap_or(raw.len());
    let (pairs, issues) = parse_pairs(&raw[rest_start..rest_end], cfg);
    Ok((SynthesisExample::new(text, pairs), issues))
}
