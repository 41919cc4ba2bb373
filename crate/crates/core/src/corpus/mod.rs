//! Report parsing, mid-training sequence assembly, synthetic corpus
//! generation, and few-shot subset sampling.

mod synth;

pub use synth::{
    synth_corpus, Style, ANATOMY_SITES, FINDING_TERMS, GENERAL_OBJECTS, GENERAL_SUBJECTS,
    NEGATION_MARKERS,
};

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tokenizer::normalize;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("report is missing required section: {0}")]
    MissingSection(&'static str),
    #[error("few-shot subset size {max_k} exceeds training set size {available}")]
    SubsetTooLarge { max_k: usize, available: usize },
    #[error("bad few-shot plan line {line}: {reason}")]
    BadPlanLine { line: usize, reason: String },
    #[error("bad report on line {line}: {reason}")]
    BadReportLine { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One clinical report. Findings is the summarization source, impression
/// the target; both are non-empty and whitespace-normalized once parsing
/// has succeeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indication: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<String>,
    pub findings: String,
    pub impression: String,
}

const HEADERS: [(&str, usize); 4] = [
    ("INDICATION:", 0),
    ("COMPARISON:", 1),
    ("FINDINGS:", 2),
    ("IMPRESSION:", 3),
];

/// Splits raw sectioned text on case-insensitive headers appearing at line
/// starts. Header order is not assumed and unheadered leading text is
/// ignored. Headers embedded mid-line never match; radiology prose
/// routinely contains colons.
pub fn parse_report(raw: &str) -> Result<Report, CorpusError> {
    let mut sections: [String; 4] = Default::default();
    let mut current: Option<usize> = None;
    for line in raw.lines() {
        let trimmed = line.trim_start();
        let upper = trimmed.to_ascii_uppercase();
        let mut matched = None;
        for (header, slot) in HEADERS {
            if upper.starts_with(header) {
                matched = Some((slot, &trimmed[header.len()..]));
                break;
            }
        }
        match matched {
            Some((slot, rest)) => {
                current = Some(slot);
                push_text(&mut sections[slot], rest);
            }
            None => {
                if let Some(slot) = current {
                    push_text(&mut sections[slot], line);
                }
            }
        }
    }
    let [indication, comparison, findings, impression] = sections;
    let findings = normalize(&findings);
    let impression = normalize(&impression);
    if findings.is_empty() {
        return Err(CorpusError::MissingSection("findings"));
    }
    if impression.is_empty() {
        return Err(CorpusError::MissingSection("impression"));
    }
    let opt = |s: String| {
        let n = normalize(&s);
        (!n.is_empty()).then_some(n)
    };
    Ok(Report {
        id: String::new(),
        indication: opt(indication),
        comparison: opt(comparison),
        findings,
        impression,
    })
}

fn push_text(section: &mut String, text: &str) {
    if !text.trim().is_empty() {
        if !section.is_empty() {
            section.push(' ');
        }
        section.push_str(text.trim());
    }
}

/// Renders a report back to canonical sectioned text; inverse of
/// [`parse_report`] up to the (ignored) id field.
pub fn render_report(report: &Report) -> String {
    let mut out = String::new();
    if let Some(ind) = &report.indication {
        writeln!(out, "INDICATION: {ind}").expect("string write");
    }
    if let Some(cmp) = &report.comparison {
        writeln!(out, "COMPARISON: {cmp}").expect("string write");
    }
    writeln!(out, "FINDINGS: {}", report.findings).expect("string write");
    writeln!(out, "IMPRESSION: {}", report.impression).expect("string write");
    out
}

/// Raw sequence for the unsupervised stages: findings and impression
/// concatenated with a single space, no headers.
pub fn midtrain_sequence(report: &Report) -> String {
    format!("{} {}", report.findings, report.impression)
}

/// Nested few-shot sampling plan: for every k, the selected ids are the
/// length-k prefix of one seeded shuffle, so smaller plans are strict
/// subsets of larger ones.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotPlan {
    pub ks: Vec<usize>,
    pub seed: u64,
    /// Shuffled id order; plan for k = first k entries.
    order: Vec<String>,
}

impl FewShotPlan {
    pub fn ids_for(&self, k: usize) -> &[String] {
        assert!(
            self.ks.contains(&k),
            "k={k} not part of this plan ({:?})",
            self.ks
        );
        &self.order[..k]
    }

    /// Persists as CSV `k,report_id`, one row per id per k.
    pub fn save_csv(&self, path: &Path) -> Result<(), CorpusError> {
        let mut out = String::from("k,report_id\n");
        for &k in &self.ks {
            for id in self.ids_for(k) {
                writeln!(out, "{k},{id}").expect("string write");
            }
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Draws nested subsets of the training set via one seeded shuffle.
pub fn fewshot_subsets(
    train: &[Report],
    ks: &[usize],
    seed: u64,
) -> Result<FewShotPlan, CorpusError> {
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let max_k = ks.last().copied().unwrap_or(0);
    if max_k > train.len() {
        return Err(CorpusError::SubsetTooLarge {
            max_k,
            available: train.len(),
        });
    }
    let mut order: Vec<String> = train.iter().map(|r| r.id.clone()).collect();
    let mut rng = rng::stream(&[seed, 0x6665_7773_686f_74]); // "fewshot"
    order.shuffle(&mut rng);
    order.truncate(max_k);
    Ok(FewShotPlan { ks, seed, order })
}

/// Deterministic 3-way split by seeded shuffle; ratios are (train, val)
/// fractions, the remainder is test.
pub fn split_corpus(
    reports: &[Report],
    train_frac: f64,
    val_frac: f64,
    seed: u64,
) -> (Vec<Report>, Vec<Report>, Vec<Report>) {
    let mut indices: Vec<usize> = (0..reports.len()).collect();
    let mut rng = rng::stream(&[seed, 0x7370_6c69_74]); // "split"
    indices.shuffle(&mut rng);
    let n_train = (reports.len() as f64 * train_frac).round() as usize;
    let n_val = (reports.len() as f64 * val_frac).round() as usize;
    let pick = |range: &[usize]| -> Vec<Report> {
        range.iter().map(|&i| reports[i].clone()).collect()
    };
    let n_train = n_train.min(reports.len());
    let n_val = n_val.min(reports.len() - n_train);
    (
        pick(&indices[..n_train]),
        pick(&indices[n_train..n_train + n_val]),
        pick(&indices[n_train + n_val..]),
    )
}

/// Reads reports from JSONL (`id`, `findings`, `impression`, optional
/// `indication`/`comparison`), validating the section invariants.
pub fn read_jsonl(path: &Path) -> Result<Vec<Report>, CorpusError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut report: Report =
            serde_json::from_str(line).map_err(|e| CorpusError::BadReportLine {
                line: i + 1,
                reason: e.to_string(),
            })?;
        report.findings = normalize(&report.findings);
        report.impression = normalize(&report.impression);
        if report.findings.is_empty() {
            return Err(CorpusError::MissingSection("findings"));
        }
        if report.impression.is_empty() {
            return Err(CorpusError::MissingSection("impression"));
        }
        if !seen.insert(report.id.clone()) {
            return Err(CorpusError::BadReportLine {
                line: i + 1,
                reason: format!("duplicate report id {}", report.id),
            });
        }
        out.push(report);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, reports: &[Report]) -> Result<(), CorpusError> {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r).expect("report serializes"));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_minimal_report() {
        let r = parse_report("FINDINGS: Clear lungs.\nIMPRESSION: Normal.").unwrap();
        assert_eq!(r.findings, "Clear lungs.");
        assert_eq!(r.impression, "Normal.");
        assert!(r.indication.is_none() && r.comparison.is_none());
    }

    #[test]
    fn parses_all_four_sections_in_standard_order() {
        let raw = "INDICATION: Cough.\nCOMPARISON: None available.\n\
                   FINDINGS: Lungs are clear.\nIMPRESSION: No acute disease.";
        let r = parse_report(raw).unwrap();
        assert_eq!(r.indication.as_deref(), Some("Cough."));
        assert_eq!(r.comparison.as_deref(), Some("None available."));
        assert_eq!(r.findings, "Lungs are clear.");
        assert_eq!(r.impression, "No acute disease.");
    }

    #[test]
    fn missing_impression_is_named_in_error() {
        let err = parse_report("FINDINGS: something").unwrap_err();
        assert!(matches!(err, CorpusError::MissingSection("impression")));
    }

    #[test]
    fn missing_findings_is_named_in_error() {
        let err = parse_report("IMPRESSION: fine").unwrap_err();
        assert!(matches!(err, CorpusError::MissingSection("findings")));
    }

    #[test]
    fn headers_match_case_insensitively_at_line_start_only() {
        let raw = "findings: Ratio was 2:1 and findings: noted.\nimpression: ok";
        let r = parse_report(raw).unwrap();
        // The embedded "findings:" mid-line stays inside the section body.
        assert_eq!(r.findings, "Ratio was 2:1 and findings: noted.");
    }

    #[test]
    fn leading_unheadered_text_is_ignored() {
        let raw = "dictated by someone\nFINDINGS: a\nIMPRESSION: b";
        let r = parse_report(raw).unwrap();
        assert_eq!(r.findings, "a");
    }

    #[test]
    fn multiline_sections_accumulate() {
        let raw = "FINDINGS: first line\nsecond line\nIMPRESSION: done";
        let r = parse_report(raw).unwrap();
        assert_eq!(r.findings, "first line second line");
    }

    #[test]
    fn render_parse_round_trip() {
        let reports = synth_corpus(7, Style::Radiology, 25);
        for r in reports {
            let mut back = parse_report(&render_report(&r)).unwrap();
            back.id = r.id.clone();
            assert_eq!(back, r);
        }
    }

    #[test]
    fn midtrain_sequence_concatenates_with_space() {
        let r = Report {
            id: "x".into(),
            indication: None,
            comparison: None,
            findings: "A.".into(),
            impression: "B.".into(),
        };
        assert_eq!(midtrain_sequence(&r), "A. B.");
    }

    #[test]
    fn fewshot_plan_has_exact_paper_sizes() {
        let train = synth_corpus(3, Style::Radiology, 1200);
        let ks = [5, 10, 20, 30, 50, 100, 200, 500, 1000];
        let plan = fewshot_subsets(&train, &ks, 42).unwrap();
        for &k in &ks {
            assert_eq!(plan.ids_for(k).len(), k);
        }
    }

    #[test]
    fn fewshot_subsets_nest() {
        let train = synth_corpus(3, Style::Radiology, 60);
        let plan = fewshot_subsets(&train, &[5, 10, 20], 11).unwrap();
        let small: HashSet<_> = plan.ids_for(5).iter().collect();
        let mid: HashSet<_> = plan.ids_for(10).iter().collect();
        assert!(small.is_subset(&mid));
    }

    #[test]
    fn fewshot_same_seed_same_plan() {
        let train = synth_corpus(3, Style::General, 40);
        let a = fewshot_subsets(&train, &[5, 10], 9).unwrap();
        let b = fewshot_subsets(&train, &[5, 10], 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fewshot_rejects_oversized_k() {
        let train = synth_corpus(3, Style::General, 8);
        assert!(matches!(
            fewshot_subsets(&train, &[5, 16], 1),
            Err(CorpusError::SubsetTooLarge { max_k: 16, .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn fewshot_nesting_holds_for_all_seeds(seed in any::<u64>()) {
            let train = synth_corpus(5, Style::Radiology, 30);
            let plan = fewshot_subsets(&train, &[3, 9, 21], seed).unwrap();
            let a: HashSet<_> = plan.ids_for(3).iter().collect();
            let b: HashSet<_> = plan.ids_for(9).iter().collect();
            let c: HashSet<_> = plan.ids_for(21).iter().collect();
            prop_assert_eq!(a.len(), 3);
            prop_assert_eq!(b.len(), 9);
            prop_assert_eq!(c.len(), 21);
            prop_assert!(a.is_subset(&b) && b.is_subset(&c));
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reports.jsonl");
        let reports = synth_corpus(1, Style::Radiology, 10);
        write_jsonl(&path, &reports).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back, reports);
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let reports = synth_corpus(2, Style::General, 100);
        let (tr, va, te) = split_corpus(&reports, 0.8, 0.1, 5);
        assert_eq!(tr.len(), 80);
        assert_eq!(va.len(), 10);
        assert_eq!(te.len(), 10);
        let (tr2, ..) = split_corpus(&reports, 0.8, 0.1, 5);
        assert_eq!(tr, tr2);
    }
}
