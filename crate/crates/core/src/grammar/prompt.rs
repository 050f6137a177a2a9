//! User-prompt rendering and parsing, and multimodal sequence assembly.

use serde::{Deserialize, Serialize};

use super::{lex, GrammarError, Lexeme, ReferentScope, Tag, GROUNDING_FLAG, IMAGE_TOKEN, REGION_TOKEN};

/// Fixed opening of every prompt, up to and including the image slot.
pub const PROMPT_PREAMBLE: &str = "Here is an image with region crops from it. Image: <image>. ";
const REGIONS_LEAD: &str = "Regions: ";

/// Visual tokens allowed under the default configuration: 256 merged image
/// tokens plus 100 region tokens.
pub const VISUAL_TOKEN_BUDGET: usize = 356;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub registry_size: usize,
    pub grounding: bool,
    pub instruction: String,
}

impl Prompt {
    pub fn render(&self) -> Result<String, GrammarError> {
        render_prompt(&self.registry_size, &self.instruction, self.grounding)
    }
}

/// Render the user prompt.
///
/// Layout: preamble, then `Regions: <r1><region>, …, <rn><region>. ` when
/// the registry is non-empty, then `[grounding] ` iff `grounding`, then the
/// instruction. An instruction that already starts with `[grounding] `
/// (as grounded templates do) has the flag lifted out and forces
/// `grounding` on. Any proxy mentioned in the instruction must exist.
pub fn render_prompt(scope: &impl ReferentScope, instruction: &str, grounding: bool) -> Result<String, GrammarError> {
    let n = scope.referent_count();
    let (instruction, grounding) = match instruction.strip_prefix(GROUNDING_FLAG) {
        Some(rest) => (rest.strip_prefix(' ').unwrap_or(rest), true),
        None => (instruction, grounding),
    };
    for (_, lx) in lex(instruction)? {
        if let Lexeme::Tag(Tag::Proxy(i)) = lx {
            if i > n {
                return Err(GrammarError::UnknownReferent { index: i, registry_size: n });
            }
        }
    }
    let mut out = String::from(PROMPT_PREAMBLE);
    if n > 0 {
        out.push_str(REGIONS_LEAD);
        let slots: Vec<String> = (1..=n).map(|i| format!("<r{i}>{REGION_TOKEN}")).collect();
        out.push_str(&slots.join(", "));
        out.push_str(". ");
    }
    if grounding {
        out.push_str(GROUNDING_FLAG);
        out.push(' ');
    }
    out.push_str(instruction);
    Ok(out)
}

/// Parse `Regions: <r1><region>, …, <rn><region>. ` at the start of `s`.
fn parse_region_list(s: &str) -> Option<(usize, &str)> {
    let mut rest = s.strip_prefix(REGIONS_LEAD)?;
    let mut n = 0;
    loop {
        let slot = format!("<r{}>{REGION_TOKEN}", n + 1);
        rest = rest.strip_prefix(slot.as_str())?;
        n += 1;
        if let Some(r) = rest.strip_prefix(". ") {
            return Some((n, r));
        }
        rest = rest.strip_prefix(", ")?;
    }
}

/// Inverse of [`render_prompt`]: recovers registry size, grounding flag and
/// instruction.
pub fn parse_prompt(text: &str) -> Result<Prompt, GrammarError> {
    let rest = text
        .strip_prefix(PROMPT_PREAMBLE)
        .ok_or_else(|| GrammarError::NotAPrompt("missing image preamble".into()))?;
    let (registry_size, rest) = parse_region_list(rest).unwrap_or((0, rest));
    let (grounding, instruction) = match rest.strip_prefix(GROUNDING_FLAG) {
        Some(r) => match r.strip_prefix(' ') {
            Some(r) => (true, r),
            None => return Err(GrammarError::NotAPrompt("grounding flag not followed by a space".into())),
        },
        None => (false, rest),
    };
    Ok(Prompt { registry_size, grounding, instruction: instruction.to_string() })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum SeqElement {
    Text(String),
    /// Index into the image token sequence.
    Image(usize),
    /// Proxy index of the region token occupying this slot.
    Region(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultimodalSequence {
    pub elements: Vec<SeqElement>,
    pub image_tokens: usize,
    /// Distinct region tokens, i.e. the registry size.
    pub region_tokens: usize,
    /// Extra `<rK><region>` slots in the instruction that re-use a
    /// registered token.
    pub region_mentions: usize,
    pub visual_tokens: usize,
    pub over_budget: bool,
}

/// Replace `<image>` by `image_tokens` image elements and each
/// `<rK><region>` by region token `K`.
///
/// The first `n` region slots must be the region list `<r1>…<rn>` in order;
/// any further slots are referring mentions of already-registered tokens.
/// `visual_tokens = image_tokens + n`; exceeding [`VISUAL_TOKEN_BUDGET`]
/// sets `over_budget` and logs a warning.
pub fn assemble_sequence(
    prompt: &str,
    image_tokens: usize,
    scope: &impl ReferentScope,
) -> Result<MultimodalSequence, GrammarError> {
    let n = scope.referent_count();
    let mut elements = Vec::new();
    let mut text = String::new();
    let mut images = 0;
    let mut slots: Vec<usize> = Vec::new();

    let flush = |text: &mut String, elements: &mut Vec<SeqElement>| {
        if !text.is_empty() {
            elements.push(SeqElement::Text(std::mem::take(text)));
        }
    };

    let mut rest = prompt;
    while let Some(pos) = rest.find('<') {
        text.push_str(&rest[..pos]);
        let here = &rest[pos..];
        if let Some(after) = here.strip_prefix(IMAGE_TOKEN) {
            flush(&mut text, &mut elements);
            images += 1;
            elements.extend((0..image_tokens).map(SeqElement::Image));
            rest = after;
        } else if here.starts_with(REGION_TOKEN) {
            return Err(GrammarError::PlaceholderMismatch(format!(
                "<region> at byte {} is not preceded by a proxy token",
                prompt.len() - here.len()
            )));
        } else if let Some((k, after)) = proxy_slot(here) {
            if k == 0 || k > n {
                return Err(GrammarError::UnknownReferent { index: k, registry_size: n });
            }
            flush(&mut text, &mut elements);
            // keep the proxy token itself as text, the slot becomes the region token
            elements.push(SeqElement::Text(format!("<r{k}>")));
            elements.push(SeqElement::Region(k));
            slots.push(k);
            rest = after;
        } else {
            text.push('<');
            rest = &here[1..];
        }
    }
    text.push_str(rest);
    flush(&mut text, &mut elements);

    if images != 1 {
        return Err(GrammarError::PlaceholderMismatch(format!("expected exactly one <image>, found {images}")));
    }
    if slots.len() < n || slots.iter().take(n).enumerate().any(|(i, &k)| k != i + 1) {
        return Err(GrammarError::PlaceholderMismatch(format!(
            "region list does not cover proxies 1..={n} in order (slots {slots:?})"
        )));
    }
    let visual_tokens = image_tokens + n;
    let over_budget = visual_tokens > VISUAL_TOKEN_BUDGET;
    if over_budget {
        log::warn!("over default budget: {visual_tokens} visual tokens > {VISUAL_TOKEN_BUDGET}");
    }
    Ok(MultimodalSequence {
        elements,
        image_tokens,
        region_tokens: n,
        region_mentions: slots.len() - n,
        visual_tokens,
        over_budget,
    })
}

/// `<rK><region>` at the start of `s`.
fn proxy_slot(s: &str) -> Option<(usize, &str)> {
    let rest = s.strip_prefix("<r")?;
    let digits = rest.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let k = rest[..digits].parse().ok()?;
    let after = rest[digits..].strip_prefix('>')?.strip_prefix(REGION_TOKEN)?;
    Some((k, after))
}
