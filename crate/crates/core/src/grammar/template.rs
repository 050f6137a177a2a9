//! Task instruction templates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::GrammarError;
use crate::rng::DetRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateTask {
    ImageCaption,
    RegionCaption,
    Rec,
    MultiGround,
    GroundedCaption,
    GroundedChat,
}

impl TemplateTask {
    pub const ALL: [TemplateTask; 6] = [
        TemplateTask::ImageCaption,
        TemplateTask::RegionCaption,
        TemplateTask::Rec,
        TemplateTask::MultiGround,
        TemplateTask::GroundedCaption,
        TemplateTask::GroundedChat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateTask::ImageCaption => "image_caption",
            TemplateTask::RegionCaption => "region_caption",
            TemplateTask::Rec => "rec",
            TemplateTask::MultiGround => "multi_ground",
            TemplateTask::GroundedCaption => "grounded_caption",
            TemplateTask::GroundedChat => "grounded_chat",
        }
    }
}

impl std::str::FromStr for TemplateTask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateTask::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown task {s:?}"))
    }
}

// Placeholders are `{name}`. `{region}` expects a proxy slot such as
// `<r3><region>`.
const IMAGE_CAPTION: &[&str] = &[
    "What is this photo about?",
    "Describe the following image.",
    "Analyze the image in a comprehensive and detailed manner.",
];
const REGION_CAPTION: &[&str] = &[
    "What is {region}?",
    "Please briefly describe {region}.",
    "Give a concise description of {region}.",
];
const REC: &[&str] = &[
    "Locate <p>{expression}</p> in the image.",
    "Which region matches <p>{expression}</p>?",
    "Identify the region that corresponds to <p>{expression}</p>.",
];
const MULTI_GROUND: &[&str] = &[
    "Locate all <p>{object class}</p> in this image.",
    "Find out all instances of <p>{object class}</p> in the image.",
    "Detect and list each <p>{object class}</p> that appears in the picture.",
];
const GROUNDED_CAPTION: &[&str] = &[
    "[grounding] Give me a short description of the image.",
    "[grounding] Succinctly summarize what you see in the image.",
    "[grounding] Please summarize the content of this image in brief.",
];
const GROUNDED_CHAT: &[&str] = &["[grounding] {instruction}"];

pub fn template_variants(task: TemplateTask) -> &'static [&'static str] {
    match task {
        TemplateTask::ImageCaption => IMAGE_CAPTION,
        TemplateTask::RegionCaption => REGION_CAPTION,
        TemplateTask::Rec => REC,
        TemplateTask::MultiGround => MULTI_GROUND,
        TemplateTask::GroundedCaption => GROUNDED_CAPTION,
        TemplateTask::GroundedChat => GROUNDED_CHAT,
    }
}

/// Fill variant `variant` of `task`'s templates. Placeholder values are
/// inserted verbatim; extra arguments are ignored.
pub fn apply_template_variant(
    task: TemplateTask,
    variant: usize,
    args: &BTreeMap<String, String>,
) -> Result<String, GrammarError> {
    let variants = template_variants(task);
    let template = variants[variant % variants.len()];
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let close = open + rest[open..].find('}').expect("template placeholders are closed");
        let name = &rest[open + 1..close];
        let value = args
            .get(name)
            .ok_or_else(|| GrammarError::MissingPlaceholder { task: task.name(), name: name.to_string() })?;
        out.push_str(&rest[..open]);
        out.push_str(value);
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Fill a uniformly chosen variant; the choice is a function of `seed`.
pub fn apply_template(task: TemplateTask, args: &BTreeMap<String, String>, seed: u64) -> Result<String, GrammarError> {
    let mut rng = DetRng::scoped(seed, &format!("template/{}", task.name()));
    apply_template_variant(task, rng.below(template_variants(task).len()), args)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn canonical_variants() {
        assert_eq!(
            apply_template_variant(TemplateTask::MultiGround, 0, &args(&[("object class", "cat")])).unwrap(),
            "Locate all <p>cat</p> in this image."
        );
        assert_eq!(
            apply_template_variant(TemplateTask::GroundedCaption, 0, &args(&[])).unwrap(),
            "[grounding] Give me a short description of the image."
        );
        assert_eq!(
            apply_template_variant(TemplateTask::Rec, 0, &args(&[("expression", "a red mug")])).unwrap(),
            "Locate <p>a red mug</p> in the image."
        );
        assert_eq!(
            apply_template_variant(TemplateTask::RegionCaption, 0, &args(&[("region", "<r3><region>")])).unwrap(),
            "What is <r3><region>?"
        );
    }

    #[test]
    fn missing_placeholder() {
        let err = apply_template_variant(TemplateTask::Rec, 1, &args(&[])).unwrap_err();
        assert!(matches!(err, GrammarError::MissingPlaceholder { name, .. } if name == "expression"));
    }

    #[test]
    fn seeded_choice_is_stable_and_covers_variants() {
        let a = args(&[("object class", "dog")]);
        let first = apply_template(TemplateTask::MultiGround, &a, 5).unwrap();
        assert_eq!(first, apply_template(TemplateTask::MultiGround, &a, 5).unwrap());
        let seen: std::collections::BTreeSet<String> =
            (0..64).map(|s| apply_template(TemplateTask::MultiGround, &a, s).unwrap()).collect();
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn task_names_parse() {
        for t in TemplateTask::ALL {
            assert_eq!(t.name().parse::<TemplateTask>().unwrap(), t);
        }
        assert!("nope".parse::<TemplateTask>().is_err());
    }
}
