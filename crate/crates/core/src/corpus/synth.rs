//! Grammar-based synthetic corpus generation.
//!
//! Two styles with deliberately disjoint content lexicons: `radiology`
//! produces telegraphic fragments with dense negation patterns over a
//! finding/anatomy vocabulary, `general` produces full sentences about
//! civic life. Impressions are a deterministic rule-compression of the
//! findings so the summarization task is learnable from few examples.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Report;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    General,
    Radiology,
}

impl Style {
    fn tag(self) -> u64 {
        match self {
            Style::General => 1,
            Style::Radiology => 2,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Style::General => "gen",
            Style::Radiology => "rad",
        }
    }
}

impl std::str::FromStr for Style {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "general" => Ok(Style::General),
            "radiology" => Ok(Style::Radiology),
            other => Err(format!("unknown corpus style: {other}")),
        }
    }
}

pub const FINDING_TERMS: [&str; 12] = [
    "pleural effusion",
    "pneumothorax",
    "focal consolidation",
    "pulmonary edema",
    "atelectasis",
    "cardiomegaly",
    "patchy opacity",
    "interstitial markings",
    "pneumonia",
    "nodular density",
    "rib fracture",
    "hilar prominence",
];

pub const ANATOMY_SITES: [&str; 10] = [
    "right lower lobe",
    "left lower lobe",
    "right upper lobe",
    "left upper lobe",
    "cardiac silhouette",
    "costophrenic angle",
    "lung bases",
    "mediastinum",
    "hilar region",
    "right hemidiaphragm",
];

/// Negation phrases the radiology grammar draws from; the metric lexicon
/// reuses the single-word forms.
pub const NEGATION_MARKERS: [&str; 4] = ["no evidence of", "no", "without", "negative for"];

const POSITIVE_QUALIFIERS: [&str; 4] = ["mild", "small", "moderate", "subtle"];

const INDICATIONS: [&str; 5] = [
    "cough",
    "chest pain",
    "fever",
    "shortness of breath",
    "follow up examination",
];

const COMPARISONS: [&str; 3] = [
    "none available",
    "prior study reviewed",
    "comparison with prior exam",
];

pub const GENERAL_SUBJECTS: [&str; 10] = [
    "the committee",
    "the library",
    "the orchestra",
    "the museum",
    "the harbor authority",
    "the bakery",
    "the council",
    "the workshop",
    "the garden club",
    "the market board",
];

const GENERAL_VERBS: [&str; 10] = [
    "reviewed",
    "organized",
    "hosted",
    "expanded",
    "documented",
    "celebrated",
    "planned",
    "restored",
    "approved",
    "launched",
];

pub const GENERAL_OBJECTS: [&str; 10] = [
    "the annual budget",
    "a new exhibit",
    "the weekend festival",
    "several proposals",
    "the quarterly schedule",
    "a community program",
    "the visiting delegation",
    "a lecture series",
    "the renovation project",
    "local partnerships",
];

const GENERAL_TAILS: [&str; 6] = [
    "over the past month",
    "with broad support",
    "despite early delays",
    "ahead of schedule",
    "in recent weeks",
    "after long deliberation",
];

/// Deterministic corpus generation: pure in (seed, style, n). Each report
/// draws from its own derived stream, so a length-n corpus is a prefix of
/// any longer corpus with the same seed.
pub fn synth_corpus(seed: u64, style: Style, n: usize) -> Vec<Report> {
    assert!(n >= 1, "synth_corpus requires n >= 1");
    (0..n)
        .map(|i| {
            let id = format!("{}-{seed:08x}-{i:05}", style.prefix());
            let mut r = rng::stream(&[seed, style.tag(), i as u64]);
            match style {
                Style::Radiology => radiology_report(id, &mut r),
                Style::General => general_report(id, &mut r),
            }
        })
        .collect()
}

fn pick<'a>(rng: &mut impl Rng, items: &[&'a str]) -> &'a str {
    items[rng.gen_range(0..items.len())]
}

fn radiology_report(id: String, rng: &mut impl Rng) -> Report {
    let n_sentences = rng.gen_range(2..=4);
    let mut findings = Vec::new();
    let mut positives: Vec<(String, String)> = Vec::new();
    for _ in 0..n_sentences {
        let roll: f64 = rng.gen();
        if roll < 0.32 {
            let term = pick(rng, &FINDING_TERMS);
            let site = pick(rng, &ANATOMY_SITES);
            let sentence = match rng.gen_range(0..3) {
                0 => {
                    if rng.gen_bool(0.5) {
                        let adj = pick(rng, &POSITIVE_QUALIFIERS);
                        format!("{adj} {term} in the {site}.")
                    } else {
                        format!("{term} in the {site}.")
                    }
                }
                1 => format!("there is {term} at the {site}."),
                _ => format!("{term} is seen in the {site}."),
            };
            findings.push(sentence);
            if !positives.iter().any(|(t, s)| t == term && s == site) {
                positives.push((term.to_string(), site.to_string()));
            }
        } else if roll < 0.76 {
            let term = pick(rng, &FINDING_TERMS);
            let sentence = match rng.gen_range(0..4) {
                0 => format!("no evidence of {term}."),
                1 => format!("no {term} is identified."),
                2 => {
                    let site = pick(rng, &ANATOMY_SITES);
                    format!("the {site} is clear without {term}.")
                }
                _ => format!("negative for {term}."),
            };
            findings.push(sentence);
        } else {
            let site = pick(rng, &ANATOMY_SITES);
            let sentence = match rng.gen_range(0..3) {
                0 => format!("the {site} is unremarkable."),
                1 => format!("stable appearance of the {site}."),
                _ => format!("the {site} remains within normal limits."),
            };
            findings.push(sentence);
        }
    }
    // Rule compression: restate each distinct positive finding
    // telegraphically; an all-negative study collapses to one phrase.
    let impression = if positives.is_empty() {
        "no acute findings.".to_string()
    } else {
        positives
            .iter()
            .map(|(t, s)| format!("{t} in the {s}."))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let indication = rng
        .gen_bool(0.5)
        .then(|| format!("{}.", pick(rng, &INDICATIONS)));
    let comparison = rng
        .gen_bool(0.3)
        .then(|| format!("{}.", pick(rng, &COMPARISONS)));
    Report {
        id,
        indication,
        comparison,
        findings: findings.join(" "),
        impression,
    }
}

fn general_report(id: String, rng: &mut impl Rng) -> Report {
    let n_sentences = rng.gen_range(2..=4);
    let mut sentences = Vec::new();
    let mut first_core = String::new();
    for i in 0..n_sentences {
        let subject = pick(rng, &GENERAL_SUBJECTS);
        let verb = pick(rng, &GENERAL_VERBS);
        let object = pick(rng, &GENERAL_OBJECTS);
        let core = format!("{subject} {verb} {object}");
        if i == 0 {
            first_core = core.clone();
        }
        let sentence = if rng.gen_bool(0.6) {
            format!("{core} {}.", pick(rng, &GENERAL_TAILS))
        } else {
            format!("{core}.")
        };
        sentences.push(sentence);
    }
    Report {
        id,
        indication: None,
        comparison: None,
        findings: sentences.join(" "),
        // Compression rule: the lead sentence stripped of its tail.
        impression: format!("{first_core}."),
    }
}
