/// Canonical short forms, in the fixed slot order used by the system one-hot.
pub const CANONICAL_SYSTEMS: [&str; 7] = [
    "SNOMED-CT",
    "ICD-10-CM",
    "RxNorm",
    "LOINC",
    "CPT",
    "ICD-10-PCS",
    "HCPCS",
];

// Keys are compared after lowercasing and trimming whitespace and trailing '/'.
const ALIASES: &[(&str, &str)] = &[
    ("http://snomed.info/sct", "SNOMED-CT"),
    ("https://snomed.info/sct", "SNOMED-CT"),
    ("urn:oid:2.16.840.1.113883.6.96", "SNOMED-CT"),
    ("snomed-ct", "SNOMED-CT"),
    ("snomedct", "SNOMED-CT"),
    ("snomedct_us", "SNOMED-CT"),
    ("snomed ct", "SNOMED-CT"),
    ("http://hl7.org/fhir/sid/icd-10-cm", "ICD-10-CM"),
    ("urn:oid:2.16.840.1.113883.6.90", "ICD-10-CM"),
    ("icd-10-cm", "ICD-10-CM"),
    ("icd10cm", "ICD-10-CM"),
    ("http://www.nlm.nih.gov/research/umls/rxnorm", "RxNorm"),
    ("urn:oid:2.16.840.1.113883.6.88", "RxNorm"),
    ("rxnorm", "RxNorm"),
    ("http://loinc.org", "LOINC"),
    ("urn:oid:2.16.840.1.113883.6.1", "LOINC"),
    ("loinc", "LOINC"),
    ("http://www.ama-assn.org/go/cpt", "CPT"),
    ("urn:oid:2.16.840.1.113883.6.12", "CPT"),
    ("cpt", "CPT"),
    ("http://www.cms.gov/medicare/coding/icd10", "ICD-10-PCS"),
    ("urn:oid:2.16.840.1.113883.6.4", "ICD-10-PCS"),
    ("icd-10-pcs", "ICD-10-PCS"),
    ("icd10pcs", "ICD-10-PCS"),
    ("http://www.cms.gov/medicare/coding/hcpcsreleasecodesets", "HCPCS"),
    ("https://www.cms.gov/medicare/coding/hcpcsreleasecodesets", "HCPCS"),
    ("urn:oid:2.16.840.1.113883.6.285", "HCPCS"),
    ("hcpcs", "HCPCS"),
    ("hcpcs level ii", "HCPCS"),
];

/// Map a code-system URI or alias to its canonical short form. Unrecognized
/// inputs are returned unchanged, so the function is idempotent.
pub fn normalize_system_uri(uri: &str) -> String {
    let key = uri.trim().trim_end_matches('/').to_ascii_lowercase();
    ALIASES
        .iter()
        .find(|(alias, _)| *alias == key)
        .map(|(_, canon)| canon.to_string())
        .unwrap_or_else(|| uri.to_string())
}
