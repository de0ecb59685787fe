use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VsType {
    #[serde(rename = "Condition/Clinical")]
    ConditionClinical,
    #[serde(rename = "Condition/Diagnosis")]
    ConditionDiagnosis,
    #[serde(rename = "Medication")]
    Medication,
    #[serde(rename = "Lab/Observation")]
    LabObservation,
    #[serde(rename = "Procedure")]
    Procedure,
    #[serde(rename = "Other")]
    Other,
}

impl VsType {
    pub const ALL: [VsType; 6] = [
        VsType::ConditionClinical,
        VsType::ConditionDiagnosis,
        VsType::Medication,
        VsType::LabObservation,
        VsType::Procedure,
        VsType::Other,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            VsType::ConditionClinical => "Condition/Clinical",
            VsType::ConditionDiagnosis => "Condition/Diagnosis",
            VsType::Medication => "Medication",
            VsType::LabObservation => "Lab/Observation",
            VsType::Procedure => "Procedure",
            VsType::Other => "Other",
        }
    }
}

impl fmt::Display for VsType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VsType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        VsType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown value set type {s:?}"))
    }
}

/// One row of the title keyword table. A rule fires when any lowercased title
/// word equals one of `words` or ends with one of `suffixes` (the word must be
/// at least three characters longer than the suffix).
#[derive(Debug, Clone, Copy)]
pub struct TypeRule {
    pub vs_type: VsType,
    pub words: &'static [&'static str],
    pub suffixes: &'static [&'static str],
}

/// Rules in priority order; the first rule that fires wins.
pub const TYPE_RULES: &[TypeRule] = &[
    TypeRule {
        vs_type: VsType::Medication,
        words: &[
            "medication", "medications", "drug", "drugs", "medicine", "medicines",
            "pharmacologic", "pharmacotherapy", "rx", "tablet", "tablets", "injection",
            "injectable", "vaccine", "vaccines", "immunization", "insulin", "antibiotic",
            "antibiotics", "opioid", "opioids", "anticoagulant", "anticoagulants",
            "antidepressant", "antidepressants", "antipsychotic", "antipsychotics", "statin",
            "statins",
        ],
        suffixes: &[
            "statin", "statins", "mab", "pril", "sartan", "olol", "mycin", "cillin",
            "azole", "prazole", "dipine", "gliptin", "floxacin", "cycline",
        ],
    },
    TypeRule {
        vs_type: VsType::LabObservation,
        words: &[
            "lab", "labs", "laboratory", "test", "tests", "testing", "assay", "assays",
            "result", "results", "observation", "observations", "panel", "measurement",
            "measurements", "level", "levels", "culture", "specimen",
        ],
        suffixes: &[],
    },
    TypeRule {
        vs_type: VsType::Procedure,
        words: &[
            "procedure", "procedures", "surgery", "surgeries", "surgical", "operation",
            "operations", "transplant", "transplantation", "implant", "replacement",
            "repair", "biopsy", "imaging", "therapy", "intervention", "interventions",
        ],
        suffixes: &["ectomy", "oscopy", "otomy", "ostomy", "plasty", "graphy"],
    },
    TypeRule {
        vs_type: VsType::ConditionDiagnosis,
        words: &["diagnosis", "diagnoses", "dx", "diagnosed", "diagnostic"],
        suffixes: &[],
    },
    TypeRule {
        vs_type: VsType::ConditionClinical,
        words: &[
            "disease", "diseases", "disorder", "disorders", "syndrome", "syndromes",
            "condition", "conditions", "infection", "infections", "cancer", "cancers",
            "neoplasm", "neoplasms", "injury", "injuries", "failure", "deficiency",
            "pain", "diabetes", "asthma", "hypertension", "pregnancy", "fracture",
            "fractures", "dementia", "depression", "obesity", "stroke", "sepsis",
            "tumor", "tumors", "lesion", "lesions", "problem", "problems",
        ],
        suffixes: &["itis", "oma", "omas", "emia", "osis", "pathy", "algia", "plegia"],
    },
];

fn rule_fires(rule: &TypeRule, words: &[String]) -> bool {
    words.iter().any(|w| {
        rule.words.contains(&w.as_str())
            || rule
                .suffixes
                .iter()
                .any(|s| w.len() >= s.len() + 3 && w.ends_with(s))
    })
}

/// Infer a value set's type from its title with the keyword table above.
pub fn infer_value_set_type(title: &str) -> VsType {
    let lower = title.to_lowercase();
    let words: Vec<String> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect();
    TYPE_RULES
        .iter()
        .find(|r| rule_fires(r, &words))
        .map(|r| r.vs_type)
        .unwrap_or(VsType::Other)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyword_examples() {
        assert_eq!(infer_value_set_type("Diabetes Medications"), VsType::Medication);
        assert_eq!(infer_value_set_type("Hemoglobin A1c Lab Test"), VsType::LabObservation);
        assert_eq!(infer_value_set_type("Quarterly Reporting Bundle"), VsType::Other);
        assert_eq!(infer_value_set_type("Appendectomy"), VsType::Procedure);
        assert_eq!(infer_value_set_type("Asthma Diagnosis"), VsType::ConditionDiagnosis);
        assert_eq!(infer_value_set_type("Chronic Kidney Disease"), VsType::ConditionClinical);
        assert_eq!(infer_value_set_type("HIGH INTENSITY STATIN THERAPY"), VsType::Medication);
    }

    #[test]
    fn serde_uses_display_labels() {
        for t in VsType::ALL {
            let json = serde_json::to_string(&t).unwrap();
            assert_eq!(json, format!("\"{}\"", t.as_str()));
            assert_eq!(t.as_str().parse::<VsType>().unwrap(), t);
        }
    }
}
