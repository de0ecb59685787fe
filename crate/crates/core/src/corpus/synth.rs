//! Seeded synthetic corpora that mimic the shape of a curated value-set
//! library: topic-clustered membership, heavy-tailed set sizes, mostly
//! single-system sets and a concentrated publisher distribution.
//!
//! Every topic owns a per-system code catalogue. Codes are addressed by
//! `(topic, system, rank)`; lower ranks are more popular. Each code also
//! carries a facet word that appears in its display name, and sets whose
//! title names the same facet prefer those codes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{infer_value_set_type, CodeEntry, CorpusError, ValueSet, VsType};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub topic_count: usize,
    pub sets_per_topic: usize,
    pub seed: u64,
    /// Target median of the log-normal size distribution.
    pub size_median: f64,
    /// Target 95th percentile of the log-normal size distribution.
    pub size_p95: f64,
    pub max_size: usize,
    /// Share of each set's codes drawn from its own topic (at least 0.7).
    pub own_topic_fraction: f64,
    /// Sampling weight multiplier for codes whose facet matches the title.
    pub facet_affinity: f64,
    /// Zipf exponent of code popularity inside a catalogue.
    pub popularity_exponent: f64,
    pub single_system_fraction: f64,
    pub description_fraction: f64,
    pub publisher_count: usize,
    /// Zipf exponent of the publisher distribution.
    pub publisher_exponent: f64,
    /// Consecutive topics sharing a family word in their titles.
    pub topic_family_size: usize,
    /// Probability that a set takes its topic's type (and so its code
    /// system) instead of an independently drawn one.
    pub topic_type_coherence: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            topic_count: 200,
            sets_per_topic: 10,
            seed: 7,
            size_median: 9.0,
            size_p95: 312.0,
            max_size: 1000,
            own_topic_fraction: 0.8,
            facet_affinity: 20.0,
            popularity_exponent: 1.3,
            single_system_fraction: 0.85,
            description_fraction: 0.196,
            publisher_count: 80,
            publisher_exponent: 0.9,
            topic_family_size: 5,
            topic_type_coherence: 0.8,
        }
    }
}

// z-score of the 95th percentile of the standard normal
const Z95: f64 = 1.644_853_626_951_472_2;

impl SynthConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidConfig(m.to_string()));
        if self.topic_count < 1 {
            return bad("topic_count must be >= 1");
        }
        if self.sets_per_topic < 1 {
            return bad("sets_per_topic must be >= 1");
        }
        if !(self.size_median >= 1.0 && self.size_median.is_finite()) {
            return bad("size_median must be >= 1");
        }
        if !(self.size_p95 >= self.size_median && self.size_p95.is_finite()) {
            return bad("size_p95 must be >= size_median");
        }
        if self.max_size < 1 {
            return bad("max_size must be >= 1");
        }
        if !(0.7..=1.0).contains(&self.own_topic_fraction) {
            return bad("own_topic_fraction must lie in [0.7, 1]");
        }
        if !(self.facet_affinity >= 1.0 && self.facet_affinity.is_finite()) {
            return bad("facet_affinity must be >= 1");
        }
        if !(self.popularity_exponent >= 0.0 && self.popularity_exponent.is_finite()) {
            return bad("popularity_exponent must be >= 0");
        }
        for (name, v) in [
            ("single_system_fraction", self.single_system_fraction),
            ("description_fraction", self.description_fraction),
            ("topic_type_coherence", self.topic_type_coherence),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CorpusError::InvalidConfig(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.publisher_count < 1 {
            return bad("publisher_count must be >= 1");
        }
        if !(self.publisher_exponent >= 0.0 && self.publisher_exponent.is_finite()) {
            return bad("publisher_exponent must be >= 0");
        }
        if self.topic_family_size < 1 {
            return bad("topic_family_size must be >= 1");
        }
        Ok(())
    }

    fn log_sigma(&self) -> f64 {
        (self.size_p95 / self.size_median).ln() / Z95
    }

    /// Codes per (topic, system) catalogue: enough for the own-topic share of
    /// the largest set.
    fn catalogue_size(&self) -> usize {
        ((self.max_size as f64 * self.own_topic_fraction).ceil() as usize).max(16)
    }
}

const SYSTEMS: [(&str, char); 7] = [
    ("SNOMED-CT", 'S'),
    ("ICD-10-CM", 'I'),
    ("RxNorm", 'R'),
    ("LOINC", 'L'),
    ("CPT", 'C'),
    ("ICD-10-PCS", 'P'),
    ("HCPCS", 'H'),
];

const FACETS: [&str; 12] = [
    "acute", "chronic", "severe", "mild", "pediatric", "adult", "recurrent", "congenital",
    "primary", "secondary", "bilateral", "late",
];

// Ordered from generic to specific: popular codes get the generic wording.
const QUALIFIERS: [&[&str]; 7] = [
    &["finding", "disorder", "of left side", "of right side", "in remission", "due to infection"],
    &["unspecified", "other specified", "without complication", "initial encounter", "subsequent encounter"],
    &["oral tablet", "10 mg oral tablet", "20 mg oral tablet", "oral suspension", "injectable solution", "extended release capsule"],
    &["serum level", "presence in blood", "mass per volume", "urine panel", "qualitative result"],
    &["open approach", "percutaneous", "endoscopic", "with imaging guidance", "revision"],
    &["open approach", "percutaneous endoscopic", "via natural opening", "external approach"],
    &["supply", "device", "per session", "home use"],
];

const PUBLISHER_HEAD: [&str; 6] = [
    "CSTE Steward",
    "Clinical Architecture",
    "NCQA PHEMUR",
    "HL7 Patient Care WG",
    "The Joint Commission",
    "Lantana",
];

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "ve", "ri", "sa", "tor", "men", "dal", "qui", "bre", "nox", "fi", "zu", "pel",
    "gar", "tin", "mor", "ce", "vun", "hal", "sep", "dru", "wen", "jo",
];

fn type_word(t: VsType) -> &'static str {
    match t {
        VsType::ConditionClinical => "Disorders",
        VsType::ConditionDiagnosis => "Diagnosis",
        VsType::Medication => "Medications",
        VsType::LabObservation => "Lab Tests",
        VsType::Procedure => "Procedures",
        VsType::Other => "Bundle",
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Distinct pseudo-words that trigger none of the title type rules.
fn pseudo_words(rng: &mut ChaCha8Rng, count: usize, syllables: usize, taken: &mut std::collections::HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let w: String = (0..syllables).map(|_| *SYLLABLES.choose(rng).unwrap()).collect();
        if infer_value_set_type(&w) != VsType::Other || !taken.insert(w.clone()) {
            continue;
        }
        out.push(w);
    }
    out
}

fn primary_system(t: VsType, rng: &mut ChaCha8Rng) -> usize {
    match t {
        VsType::ConditionClinical => 0,
        VsType::ConditionDiagnosis => 1,
        VsType::Medication => 2,
        VsType::LabObservation => 3,
        VsType::Procedure => {
            let u: f64 = rng.gen();
            if u < 0.6 {
                4
            } else if u < 0.85 {
                5
            } else {
                6
            }
        }
        VsType::Other => rng.gen_range(0..SYSTEMS.len()),
    }
}

fn secondary_system(primary: usize, rng: &mut ChaCha8Rng) -> usize {
    match primary {
        0 => 1,
        1 => 0,
        4 => 6,
        6 => 4,
        _ => {
            let mut s = rng.gen_range(0..SYSTEMS.len() - 1);
            if s >= primary {
                s += 1;
            }
            s
        }
    }
}

// Cumulative type distribution: condition types dominate.
const TYPE_WEIGHTS: [(VsType, f64); 6] = [
    (VsType::ConditionClinical, 0.34),
    (VsType::ConditionDiagnosis, 0.28),
    (VsType::Medication, 0.12),
    (VsType::LabObservation, 0.12),
    (VsType::Procedure, 0.10),
    (VsType::Other, 0.04),
];

fn draw_type(rng: &mut ChaCha8Rng) -> VsType {
    let mut u: f64 = rng.gen::<f64>() * TYPE_WEIGHTS.iter().map(|(_, w)| w).sum::<f64>();
    for (t, w) in TYPE_WEIGHTS {
        if u < w {
            return t;
        }
        u -= w;
    }
    VsType::Other
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    species: Vec<String>,
    families: Vec<String>,
    catalogue: usize,
}

impl Generator<'_> {
    // SplitMix-style mix so facet/qualifier assignments are a pure function
    // of (seed, topic, system, rank).
    fn mix(&self, topic: usize, system: usize, rank: usize, salt: u64) -> u64 {
        let mut z = self.cfg.seed
            ^ (topic as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ (system as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
            ^ (rank as u64).wrapping_mul(0x1656_67B1_9E37_79F9)
            ^ salt.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn facet_of(&self, topic: usize, system: usize, rank: usize) -> usize {
        (self.mix(topic, system, rank, 1) % FACETS.len() as u64) as usize
    }

    fn code(&self, topic: usize, system: usize, rank: usize) -> CodeEntry {
        let (name, prefix) = SYSTEMS[system];
        let quals = QUALIFIERS[system];
        // qualifier tier follows popularity, with one code in eight reworded at random
        let h = self.mix(topic, system, rank, 2);
        let tier = if h % 8 == 0 {
            (h >> 3) as usize % quals.len()
        } else {
            (((rank + 1) as f64).log2() as usize / 2).min(quals.len() - 1)
        };
        let q = quals[tier];
        CodeEntry::new(
            format!("{prefix}{topic:04}{rank:05}"),
            name,
            format!("{} {} {}", capitalize(&self.species[topic]), FACETS[self.facet_of(topic, system, rank)], q),
        )
    }

    /// Weighted sample of `n` distinct ranks from one catalogue
    /// (Efraimidis–Spirakis keys, u^(1/w)).
    fn sample_ranks(&self, rng: &mut ChaCha8Rng, topic: usize, system: usize, facet: usize, n: usize) -> Vec<usize> {
        let n = n.min(self.catalogue);
        let mut keyed: Vec<(f64, usize)> = (0..self.catalogue)
            .map(|r| {
                let mut w = (r as f64 + 1.0).powf(-self.cfg.popularity_exponent);
                if self.facet_of(topic, system, r) == facet {
                    w *= self.cfg.facet_affinity;
                }
                let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
                (u.ln() / w, r)
            })
            .collect();
        if n == 0 {
            return Vec::new();
        }
        keyed.select_nth_unstable_by(n - 1, |a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut ranks: Vec<usize> = keyed[..n].iter().map(|k| k.1).collect();
        ranks.sort_unstable();
        ranks
    }

    fn neighbor(&self, rng: &mut ChaCha8Rng, topic: usize) -> usize {
        let t = self.cfg.topic_count;
        if t == 1 {
            return topic;
        }
        let offsets: [isize; 4] = [-2, -1, 1, 2];
        let off = *offsets.choose(rng).unwrap();
        (topic as isize + off).rem_euclid(t as isize) as usize
    }

    fn draw_codes(&self, rng: &mut ChaCha8Rng, topic: usize, system: usize, facet: usize, size: usize, out: &mut Vec<CodeEntry>) {
        let own = ((size as f64) * self.cfg.own_topic_fraction).ceil() as usize;
        let own = own.min(size);
        for r in self.sample_ranks(rng, topic, system, facet, own) {
            out.push(self.code(topic, system, r));
        }
        let mut per_neighbor = std::collections::BTreeMap::new();
        for _ in own..size {
            *per_neighbor.entry(self.neighbor(rng, topic)).or_insert(0usize) += 1;
        }
        for (nb, count) in per_neighbor {
            for r in self.sample_ranks(rng, nb, system, facet, count) {
                out.push(self.code(nb, system, r));
            }
        }
    }
}

/// Generate a synthetic corpus. Output is a pure function of `config`.
pub fn generate_synthetic_corpus(config: &SynthConfig) -> Result<Vec<ValueSet>, CorpusError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let families_needed = config.topic_count.div_ceil(config.topic_family_size);
    let mut taken = std::collections::HashSet::new();
    let families = pseudo_words(&mut rng, families_needed, 2, &mut taken);
    let species = pseudo_words(&mut rng, config.topic_count, 3, &mut taken);
    let gen = Generator {
        cfg: config,
        species,
        families,
        catalogue: config.catalogue_size(),
    };

    // Zipf publisher weights; a few recognizable names head the list.
    let publishers: Vec<String> = (0..config.publisher_count)
        .map(|i| match PUBLISHER_HEAD.get(i) {
            Some(name) => name.to_string(),
            None => format!("Publisher {:03}", i + 1),
        })
        .collect();
    let pub_weights: Vec<f64> = (0..config.publisher_count)
        .map(|i| (i as f64 + 1.0).powf(-config.publisher_exponent))
        .collect();
    let pub_dist = rand::distributions::WeightedIndex::new(&pub_weights)
        .map_err(|e| CorpusError::InvalidConfig(e.to_string()))?;

    let mu = config.size_median.ln();
    let sigma = config.log_sigma();
    let mut sets = Vec::with_capacity(config.topic_count * config.sets_per_topic);
    for topic in 0..config.topic_count {
        let family = &gen.families[topic / config.topic_family_size];
        let topic_type = draw_type(&mut rng);
        for j in 0..config.sets_per_topic {
            let vs_type = if rng.gen::<f64>() < config.topic_type_coherence {
                topic_type
            } else {
                draw_type(&mut rng)
            };
            let facet = rng.gen_range(0..FACETS.len());
            let z: f64 = StandardNormal.sample(&mut rng);
            let size = ((mu + sigma * z).exp().round() as usize).clamp(1, config.max_size);
            let primary = primary_system(vs_type, &mut rng);
            let multi = size >= 2 && rng.gen::<f64>() >= config.single_system_fraction;

            let title = format!(
                "{} {} {} {}",
                capitalize(family),
                capitalize(&gen.species[topic]),
                capitalize(FACETS[facet]),
                type_word(vs_type)
            );
            let mut codes = Vec::with_capacity(size);
            if multi {
                let secondary = secondary_system(primary, &mut rng);
                let first = ((size as f64) * 0.6).ceil() as usize;
                gen.draw_codes(&mut rng, topic, primary, facet, first, &mut codes);
                gen.draw_codes(&mut rng, topic, secondary, facet, size - first, &mut codes);
            } else {
                gen.draw_codes(&mut rng, topic, primary, facet, size, &mut codes);
            }
            let description = if rng.gen::<f64>() < config.description_fraction {
                format!("Codes describing {} {} {}", gen.species[topic], FACETS[facet], type_word(vs_type).to_lowercase())
            } else {
                String::new()
            };
            let mut vs = ValueSet {
                oid: format!("2.16.840.1.113762.1.4.{}", 1000 + topic * config.sets_per_topic + j),
                vs_type: infer_value_set_type(&title),
                title,
                description,
                publisher: publishers[pub_dist.sample(&mut rng)].clone(),
                codes,
            };
            vs.dedup_codes();
            sets.push(vs);
        }
    }
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::corpus_stats;
    use std::collections::HashSet;

    fn small() -> SynthConfig {
        SynthConfig {
            topic_count: 20,
            sets_per_topic: 5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate_synthetic_corpus(&small()).unwrap();
        let b = generate_synthetic_corpus(&small()).unwrap();
        let ja = serde_json::to_vec(&a).unwrap();
        let jb = serde_json::to_vec(&b).unwrap();
        assert_eq!(ja, jb);
        let c = generate_synthetic_corpus(&SynthConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(serde_json::to_vec(&c).unwrap(), ja);
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            SynthConfig { topic_count: 0, ..small() },
            SynthConfig { own_topic_fraction: 0.5, ..small() },
            SynthConfig { size_p95: 2.0, ..small() },
        ] {
            assert!(matches!(generate_synthetic_corpus(&cfg), Err(CorpusError::InvalidConfig(_))));
        }
    }

    #[test]
    fn median_near_target_for_2000_sets() {
        let sets = generate_synthetic_corpus(&SynthConfig::default()).unwrap();
        assert_eq!(sets.len(), 2000);
        let st = corpus_stats(&sets).unwrap();
        let median = st.median_size();
        assert!((7..=11).contains(&median), "median {median}");
        assert!(st.single_system_fraction >= 0.8, "{}", st.single_system_fraction);
        let p95 = st.size_quantiles[&95];
        assert!((200..=450).contains(&p95), "p95 {p95}");
    }

    fn jaccard(a: &ValueSet, b: &ValueSet) -> f64 {
        let ka: HashSet<_> = a.codes.iter().map(|c| &c.code).collect();
        let kb: HashSet<_> = b.codes.iter().map(|c| &c.code).collect();
        let inter = ka.intersection(&kb).count() as f64;
        let uni = ka.union(&kb).count() as f64;
        if uni == 0.0 {
            0.0
        } else {
            inter / uni
        }
    }

    #[test]
    fn same_topic_overlap_exceeds_distant_topic_overlap() {
        let cfg = SynthConfig {
            topic_count: 40,
            sets_per_topic: 8,
            single_system_fraction: 1.0,
            ..SynthConfig::default()
        };
        let sets = generate_synthetic_corpus(&cfg).unwrap();
        let per = cfg.sets_per_topic;
        let (mut same, mut ns) = (0.0, 0);
        let (mut far, mut nf) = (0.0, 0);
        for i in 0..sets.len() {
            for j in (i + 1)..sets.len() {
                if sets[i].codes[0].system != sets[j].codes[0].system {
                    continue;
                }
                let (ti, tj) = (i / per, j / per);
                let dist = ti.abs_diff(tj).min(cfg.topic_count - ti.abs_diff(tj));
                if dist == 0 {
                    same += jaccard(&sets[i], &sets[j]);
                    ns += 1;
                } else if dist >= 10 {
                    far += jaccard(&sets[i], &sets[j]);
                    nf += 1;
                }
            }
        }
        let (same, far) = (same / ns as f64, far / nf as f64);
        assert!(same > far, "same-topic {same} vs distant {far}");
    }

    #[test]
    fn titles_are_typed_and_codes_unique() {
        let sets = generate_synthetic_corpus(&small()).unwrap();
        let oids: HashSet<_> = sets.iter().map(|s| &s.oid).collect();
        assert_eq!(oids.len(), sets.len());
        for s in &sets {
            assert_eq!(s.code_keys().len(), s.codes.len());
            assert!(!s.codes.is_empty());
        }
        let types: HashSet<_> = sets.iter().map(|s| s.vs_type).collect();
        assert!(types.len() >= 4);
    }

    #[test]
    fn own_topic_share_holds() {
        let cfg = small();
        let sets = generate_synthetic_corpus(&cfg).unwrap();
        for (i, s) in sets.iter().enumerate() {
            let topic = i / cfg.sets_per_topic;
            let own = s.codes.iter().filter(|c| c.code[1..5].parse::<usize>().unwrap() == topic).count();
            assert!(own as f64 >= 0.7 * s.codes.len() as f64 - 1.0, "{} of {}", own, s.codes.len());
        }
    }
}
