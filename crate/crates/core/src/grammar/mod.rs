//! Grounded markup: prompts, responses and instruction templates.
//!
//! A grounded response interleaves plain text with spans of the form
//! `<p>phrase</p> <roi><r4><r7></roi>`. The canonical form has exactly one
//! space between `</p>` and `<roi>` and nothing but proxy tokens inside the
//! roi block. Grammar (EBNF, `TEXT` is any run of characters that does not
//! lex as a tag):
//!
//! ```text
//! response = { TEXT | span } ;
//! span     = "<p>" [ TEXT ] "</p>" " " "<roi>" proxy { proxy } "</roi>" ;
//! proxy    = "<r" nonzero-digit { digit } ">" ;
//! ```
//!
//! Lenient mode (for checking third-party generations) also accepts any
//! whitespace, including none, between `</p>` and `<roi>` and between
//! proxies, and trims the phrase. It rejects the same structural errors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::region::ProxyRegistry;

mod prompt;
mod template;

pub use prompt::{
    assemble_sequence, parse_prompt, render_prompt, MultimodalSequence, Prompt, SeqElement, PROMPT_PREAMBLE,
    VISUAL_TOKEN_BUDGET,
};
pub use template::{apply_template, apply_template_variant, template_variants, TemplateTask};

pub const IMAGE_TOKEN: &str = "<image>";
pub const REGION_TOKEN: &str = "<region>";
pub const PHRASE_OPEN: &str = "<p>";
pub const PHRASE_CLOSE: &str = "</p>";
pub const ROI_OPEN: &str = "<roi>";
pub const ROI_CLOSE: &str = "</roi>";
pub const GROUNDING_FLAG: &str = "[grounding]";

/// Surface form of proxy `i`: `<r{i}>`.
pub fn proxy_token(i: usize) -> String {
    format!("<r{i}>")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GrammarError {
    #[error("malformed markup at byte {offset}: {reason}")]
    MalformedMarkup { offset: usize, reason: String },
    #[error("stray proxy <r{index}> at byte {offset}: proxies must sit inside a <roi> block")]
    StrayProxy { index: usize, offset: usize },
    #[error("unknown referent, {index}, registry size {registry_size}")]
    UnknownReferent { index: usize, registry_size: usize },
    #[error("span {phrase:?} has no referents")]
    EmptyReferents { phrase: String },
    #[error("text contains reserved markup: {0:?}")]
    ReservedMarkup(String),
    #[error("placeholder mismatch: {0}")]
    PlaceholderMismatch(String),
    #[error("template for {task} is missing placeholder {{{name}}}")]
    MissingPlaceholder { task: &'static str, name: String },
    #[error("not a prompt: {0}")]
    NotAPrompt(String),
}

/// Anything that bounds valid proxy indices to `1..=referent_count()`.
pub trait ReferentScope {
    fn referent_count(&self) -> usize;
}

impl ReferentScope for ProxyRegistry {
    fn referent_count(&self) -> usize {
        self.len()
    }
}

impl ReferentScope for usize {
    fn referent_count(&self) -> usize {
        *self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedSpan {
    pub phrase: String,
    pub referents: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Segment {
    Text(String),
    Span(GroundedSpan),
}

/// Plain text interleaved with grounded spans. Adjacent text is coalesced
/// and empty text dropped, so equal responses compare equal.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedResponse {
    segments: Vec<Segment>,
}

impl GroundedResponse {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_segments(segments: impl IntoIterator<Item = Segment>) -> Self {
        let mut r = Self::new();
        for s in segments {
            match s {
                Segment::Text(t) => r.push_text(&t),
                Segment::Span(s) => r.push_span(s),
            }
        }
        r
    }

    pub fn push_text(&mut self, text: &str) {
        if text.is_empty() {
            return;
        }
        if let Some(Segment::Text(last)) = self.segments.last_mut() {
            last.push_str(text);
        } else {
            self.segments.push(Segment::Text(text.to_string()));
        }
    }

    pub fn push_span(&mut self, span: GroundedSpan) {
        self.segments.push(Segment::Span(span));
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn spans(&self) -> impl Iterator<Item = &GroundedSpan> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Span(sp) => Some(sp),
            Segment::Text(_) => None,
        })
    }

    /// Every referent, in order of appearance.
    pub fn referents(&self) -> impl Iterator<Item = usize> + '_ {
        self.spans().flat_map(|s| s.referents.iter().copied())
    }

    /// Apply `f` to every referent; used to rewrite marker labels into
    /// registry proxies.
    pub fn map_referents(&self, mut f: impl FnMut(usize) -> Option<usize>) -> Option<GroundedResponse> {
        let mut out = GroundedResponse::new();
        for s in &self.segments {
            match s {
                Segment::Text(t) => out.push_text(t),
                Segment::Span(sp) => {
                    let referents = sp.referents.iter().map(|&i| f(i)).collect::<Option<Vec<_>>>()?;
                    out.push_span(GroundedSpan { phrase: sp.phrase.clone(), referents });
                }
            }
        }
        Some(out)
    }

    /// Plain text with the markup removed.
    pub fn plain_text(&self) -> String {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Text(t) => t.as_str(),
                Segment::Span(sp) => sp.phrase.as_str(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseMode {
    #[default]
    Strict,
    Lenient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Tag {
    PhraseOpen,
    PhraseClose,
    RoiOpen,
    RoiClose,
    Proxy(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Lexeme<'a> {
    Text(&'a str),
    Tag(Tag),
}

/// Recognise a tag at the start of `s`. Returns the tag and its byte length,
/// `None` if `s` does not start with a tag, or an error for a malformed
/// proxy such as `<r0>` or `<r07>`.
fn tag_at(s: &str, offset: usize) -> Result<Option<(Tag, usize)>, GrammarError> {
    for (lit, tag) in [
        (PHRASE_OPEN, Tag::PhraseOpen),
        (PHRASE_CLOSE, Tag::PhraseClose),
        (ROI_OPEN, Tag::RoiOpen),
        (ROI_CLOSE, Tag::RoiClose),
    ] {
        if s.starts_with(lit) {
            return Ok(Some((tag, lit.len())));
        }
    }
    let Some(rest) = s.strip_prefix("<r") else {
        return Ok(None);
    };
    let digits = rest.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 || rest.as_bytes().get(digits) != Some(&b'>') {
        return Ok(None);
    }
    let num = &rest[..digits];
    if num.starts_with('0') {
        return Err(GrammarError::MalformedMarkup {
            offset,
            reason: format!("invalid proxy token <r{num}>"),
        });
    }
    let index = num.parse::<usize>().map_err(|_| GrammarError::MalformedMarkup {
        offset,
        reason: format!("proxy index {num} out of range"),
    })?;
    Ok(Some((Tag::Proxy(index), 2 + digits + 1)))
}

/// Split `s` into text runs and tags, with byte offsets.
pub(crate) fn lex(s: &str) -> Result<Vec<(usize, Lexeme<'_>)>, GrammarError> {
    let mut out = Vec::new();
    let mut text_start = 0;
    let mut i = 0;
    while i < s.len() {
        if s.as_bytes()[i] == b'<' {
            if let Some((tag, len)) = tag_at(&s[i..], i)? {
                if text_start < i {
                    out.push((text_start, Lexeme::Text(&s[text_start..i])));
                }
                out.push((i, Lexeme::Tag(tag)));
                i += len;
                text_start = i;
                continue;
            }
        }
        i += 1;
    }
    if text_start < s.len() {
        out.push((text_start, Lexeme::Text(&s[text_start..])));
    }
    Ok(out)
}

/// True when `s` contains anything the lexer would treat as markup.
pub fn contains_markup(s: &str) -> bool {
    match lex(s) {
        Ok(lexemes) => lexemes.iter().any(|(_, l)| matches!(l, Lexeme::Tag(_))),
        Err(_) => true,
    }
}

/// Canonical text of `response`.
pub fn serialize(response: &GroundedResponse) -> Result<String, GrammarError> {
    let mut out = String::new();
    for seg in response.segments() {
        match seg {
            Segment::Text(t) => {
                if contains_markup(t) {
                    return Err(GrammarError::ReservedMarkup(t.clone()));
                }
                out.push_str(t);
            }
            Segment::Span(span) => {
                if span.referents.is_empty() {
                    return Err(GrammarError::EmptyReferents { phrase: span.phrase.clone() });
                }
                if contains_markup(&span.phrase) {
                    return Err(GrammarError::ReservedMarkup(span.phrase.clone()));
                }
                out.push_str(PHRASE_OPEN);
                out.push_str(&span.phrase);
                out.push_str(PHRASE_CLOSE);
                out.push(' ');
                out.push_str(ROI_OPEN);
                for &r in &span.referents {
                    if r == 0 {
                        return Err(GrammarError::MalformedMarkup { offset: out.len(), reason: "proxy index 0".into() });
                    }
                    out.push_str(&proxy_token(r));
                }
                out.push_str(ROI_CLOSE);
            }
        }
    }
    Ok(out)
}

/// Strict parse against `scope`.
pub fn parse(text: &str, scope: &impl ReferentScope) -> Result<GroundedResponse, GrammarError> {
    parse_with_mode(text, scope, ParseMode::Strict)
}

pub fn parse_with_mode(text: &str, scope: &impl ReferentScope, mode: ParseMode) -> Result<GroundedResponse, GrammarError> {
    let n = scope.referent_count();
    let lexemes = lex(text)?;
    let mut it = lexemes.into_iter().peekable();
    let mut response = GroundedResponse::new();
    let malformed = |offset: usize, reason: &str| GrammarError::MalformedMarkup { offset, reason: reason.to_string() };

    while let Some((off, lx)) = it.next() {
        match lx {
            Lexeme::Text(t) => response.push_text(t),
            Lexeme::Tag(Tag::Proxy(index)) => return Err(GrammarError::StrayProxy { index, offset: off }),
            Lexeme::Tag(Tag::PhraseClose) => return Err(malformed(off, "</p> without matching <p>")),
            Lexeme::Tag(Tag::RoiOpen) => return Err(malformed(off, "<roi> without a preceding phrase")),
            Lexeme::Tag(Tag::RoiClose) => return Err(malformed(off, "</roi> without matching <roi>")),
            Lexeme::Tag(Tag::PhraseOpen) => {
                let mut phrase = String::new();
                loop {
                    match it.next() {
                        None => return Err(malformed(off, "unterminated <p>")),
                        Some((_, Lexeme::Text(t))) => phrase.push_str(t),
                        Some((_, Lexeme::Tag(Tag::PhraseClose))) => break,
                        Some((o, Lexeme::Tag(Tag::PhraseOpen))) => return Err(malformed(o, "nested <p>")),
                        Some((o, Lexeme::Tag(Tag::Proxy(index)))) => {
                            return Err(GrammarError::StrayProxy { index, offset: o })
                        }
                        Some((o, Lexeme::Tag(_))) => return Err(malformed(o, "roi tag inside a phrase")),
                    }
                }
                // separator between </p> and <roi>
                match it.peek() {
                    Some((_, Lexeme::Text(" "))) => {
                        it.next();
                    }
                    Some((_, Lexeme::Text(t))) if mode == ParseMode::Lenient && t.trim().is_empty() => {
                        it.next();
                    }
                    _ if mode == ParseMode::Lenient => {}
                    Some((o, _)) => return Err(malformed(*o, "expected a single space then <roi> after </p>")),
                    None => return Err(malformed(text.len(), "expected <roi> after </p>")),
                }
                match it.next() {
                    Some((_, Lexeme::Tag(Tag::RoiOpen))) => {}
                    Some((o, _)) => return Err(malformed(o, "expected <roi> after </p>")),
                    None => return Err(malformed(text.len(), "expected <roi> after </p>")),
                }
                let mut referents = Vec::new();
                loop {
                    match it.next() {
                        None => return Err(malformed(text.len(), "unterminated <roi>")),
                        Some((_, Lexeme::Tag(Tag::Proxy(i)))) => {
                            if i > n {
                                return Err(GrammarError::UnknownReferent { index: i, registry_size: n });
                            }
                            referents.push(i);
                        }
                        Some((_, Lexeme::Tag(Tag::RoiClose))) => break,
                        Some((_, Lexeme::Text(t))) if mode == ParseMode::Lenient && t.trim().is_empty() => {}
                        Some((o, Lexeme::Text(_))) => return Err(malformed(o, "text inside <roi> block")),
                        Some((o, Lexeme::Tag(_))) => return Err(malformed(o, "unexpected tag inside <roi> block")),
                    }
                }
                if referents.is_empty() {
                    return Err(malformed(off, "empty <roi> block"));
                }
                if mode == ParseMode::Lenient {
                    phrase = phrase.trim().to_string();
                }
                response.push_span(GroundedSpan { phrase, referents });
            }
        }
    }
    Ok(response)
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOG: &str = "<p>A dog</p> <roi><r4></roi> is jumping to catch <p>a frisbee</p> <roi><r7></roi> over <p>a fallen man</p> <roi><r1></roi>.";

    fn span(p: &str, r: &[usize]) -> Segment {
        Segment::Span(GroundedSpan { phrase: p.into(), referents: r.to_vec() })
    }

    fn text(t: &str) -> Segment {
        Segment::Text(t.into())
    }

    fn dog_response() -> GroundedResponse {
        GroundedResponse::from_segments([
            span("A dog", &[4]),
            text(" is jumping to catch "),
            span("a frisbee", &[7]),
            text(" over "),
            span("a fallen man", &[1]),
            text("."),
        ])
    }

    #[test]
    fn serializes_dog_example() {
        assert_eq!(serialize(&dog_response()).unwrap(), DOG);
    }

    #[test]
    fn parses_dog_example() {
        let r = parse(DOG, &7usize).unwrap();
        assert_eq!(r, dog_response());
        let spans: Vec<(&str, &[usize])> = r.spans().map(|s| (s.phrase.as_str(), s.referents.as_slice())).collect();
        assert_eq!(spans, vec![("A dog", &[4][..]), ("a frisbee", &[7][..]), ("a fallen man", &[1][..])]);
    }

    #[test]
    fn multi_referent_span() {
        let r = GroundedResponse::from_segments([span("two cats", &[2, 5])]);
        let s = serialize(&r).unwrap();
        assert_eq!(s, "<p>two cats</p> <roi><r2><r5></roi>");
        assert_eq!(parse(&s, &5usize).unwrap(), r);
    }

    #[test]
    fn plain_text_is_identity() {
        let r = parse("hello world", &0usize).unwrap();
        assert_eq!(r.segments(), &[text("hello world")]);
        assert_eq!(serialize(&r).unwrap(), "hello world");
        assert!(parse("", &0usize).unwrap().segments().is_empty());
    }

    #[test]
    fn text_coalesces() {
        let r = GroundedResponse::from_segments([text("a"), text(""), text("b")]);
        assert_eq!(r.segments(), &[text("ab")]);
    }

    #[test]
    fn strict_rejections() {
        let cases: &[(&str, fn(&GrammarError) -> bool)] = &[
            ("<p>dog</p>", |e| matches!(e, GrammarError::MalformedMarkup { .. })),
            ("<p>dog</p><roi><r1></roi>", |e| matches!(e, GrammarError::MalformedMarkup { .. })),
            ("<p>dog</p>  <roi><r1></roi>", |e| matches!(e, GrammarError::MalformedMarkup { .. })),
            ("<p>a <p>b</p></p> <roi><r1></roi>", |e| matches!(e, GrammarError::MalformedMarkup { .. })),
            ("see <r2> here", |e| matches!(e, GrammarError::StrayProxy { index: 2, .. })),
            ("<p>dog</p> <roi><r9></roi>", |e| {
                matches!(e, GrammarError::UnknownReferent { index: 9, registry_size: 3 })
            }),
            ("<p>dog</p> <roi></roi>", |e| matches!(e, GrammarError::MalformedMarkup { .. })),
            ("<p>dog</p> <roi><r1> <r2></roi>", |e| matches!(e, GrammarError::MalformedMarkup { .. })),
            ("<p>dog</p> <roi><r01></roi>", |e| matches!(e, GrammarError::MalformedMarkup { .. })),
            ("</roi>", |e| matches!(e, GrammarError::MalformedMarkup { .. })),
        ];
        for (input, check) in cases {
            let err = parse(input, &3usize).unwrap_err();
            assert!(check(&err), "{input:?} gave {err:?}");
        }
        assert_eq!(
            parse("<p>x</p> <roi><r9></roi>", &3usize).unwrap_err().to_string(),
            "unknown referent, 9, registry size 3"
        );
    }

    #[test]
    fn empty_registry_rejects_grounding() {
        assert!(matches!(
            parse("<p>x</p> <roi><r1></roi>", &0usize),
            Err(GrammarError::UnknownReferent { index: 1, registry_size: 0 })
        ));
    }

    #[test]
    fn lenient_tolerates_whitespace_only() {
        let messy = "<p> the dog </p><roi> <r2>\n<r3> </roi> runs";
        let r = parse_with_mode(messy, &3usize, ParseMode::Lenient).unwrap();
        assert_eq!(serialize(&r).unwrap(), "<p>the dog</p> <roi><r2><r3></roi> runs");
        assert!(parse_with_mode("<p>dog</p> runs", &3usize, ParseMode::Lenient).is_err());
        assert!(parse_with_mode("<p>dog</p> <roi>x<r1></roi>", &3usize, ParseMode::Lenient).is_err());
        assert!(parse_with_mode("<r1>", &3usize, ParseMode::Lenient).is_err());
    }

    #[test]
    fn serialize_rejects_invalid_responses() {
        let r = GroundedResponse::from_segments([span("dog", &[])]);
        assert!(matches!(serialize(&r), Err(GrammarError::EmptyReferents { .. })));
        let r = GroundedResponse::from_segments([text("a <roi> b")]);
        assert!(matches!(serialize(&r), Err(GrammarError::ReservedMarkup(_))));
        let r = GroundedResponse::from_segments([span("<r1>", &[1])]);
        assert!(matches!(serialize(&r), Err(GrammarError::ReservedMarkup(_))));
    }

    #[test]
    fn non_tag_angle_brackets_are_text() {
        let s = "a < b and <rx> and <r12 and <image>";
        let r = parse(s, &0usize).unwrap();
        assert_eq!(r.segments(), &[text(s)]);
        assert_eq!(serialize(&r).unwrap(), s);
    }

    #[test]
    fn map_referents_relabels() {
        let r = dog_response();
        let m = r.map_referents(|i| Some(i + 10)).unwrap();
        assert_eq!(m.referents().collect::<Vec<_>>(), vec![14, 17, 11]);
        assert!(r.map_referents(|i| (i != 7).then_some(i)).is_none());
        assert_eq!(r.plain_text(), "A dog is jumping to catch a frisbee over a fallen man.");
    }
}
