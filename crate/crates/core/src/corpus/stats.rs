use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{write_csv_rows, CorpusError, ValueSet, VsType};

/// Percentiles reported in [`CorpusStats::size_quantiles`].
pub const STAT_PERCENTILES: [u32; 7] = [5, 25, 50, 75, 90, 95, 99];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub set_count: usize,
    /// percentile → set size (nearest-rank)
    pub size_quantiles: BTreeMap<u32, usize>,
    pub mean_size: f64,
    pub description_coverage: f64,
    pub single_system_fraction: f64,
    /// distinct systems per set → number of sets
    pub systems_per_set_histogram: BTreeMap<usize, usize>,
    pub publisher_counts: BTreeMap<String, usize>,
    pub type_counts: BTreeMap<VsType, usize>,
    /// code system → number of sets containing at least one code from it
    pub system_set_counts: BTreeMap<String, usize>,
}

/// Nearest-rank percentile of an ascending-sorted slice: the value at rank
/// `ceil(p/100 * n)` (1-based), with rank clamped to `[1, n]`.
pub fn nearest_rank(sorted: &[usize], p: u32) -> usize {
    assert!(!sorted.is_empty());
    let n = sorted.len();
    let rank = ((p as f64 / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub fn corpus_stats(sets: &[ValueSet]) -> Result<CorpusStats, CorpusError> {
    if sets.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let n = sets.len();
    let mut sizes: Vec<usize> = sets.iter().map(|s| s.codes.len()).collect();
    sizes.sort_unstable();

    let mut systems_hist = BTreeMap::new();
    let mut system_sets = BTreeMap::new();
    let mut publishers = BTreeMap::new();
    let mut types = BTreeMap::new();
    let mut with_desc = 0;
    for vs in sets {
        let systems = vs.systems();
        *systems_hist.entry(systems.len()).or_insert(0) += 1;
        for s in systems {
            *system_sets.entry(s.to_string()).or_insert(0) += 1;
        }
        *publishers.entry(vs.publisher.clone()).or_insert(0) += 1;
        *types.entry(vs.vs_type).or_insert(0) += 1;
        if !vs.description.trim().is_empty() {
            with_desc += 1;
        }
    }
    Ok(CorpusStats {
        set_count: n,
        size_quantiles: STAT_PERCENTILES.iter().map(|&p| (p, nearest_rank(&sizes, p))).collect(),
        mean_size: sizes.iter().sum::<usize>() as f64 / n as f64,
        description_coverage: with_desc as f64 / n as f64,
        single_system_fraction: *systems_hist.get(&1).unwrap_or(&0) as f64 / n as f64,
        systems_per_set_histogram: systems_hist,
        publisher_counts: publishers,
        type_counts: types,
        system_set_counts: system_sets,
    })
}

impl CorpusStats {
    pub fn median_size(&self) -> usize {
        self.size_quantiles[&50]
    }

    /// Write one CSV per histogram next to `json_path`, named
    /// `<stem>.<table>.csv`. Returns the written paths.
    pub fn write_csv_tables(&self, json_path: &Path) -> std::io::Result<Vec<std::path::PathBuf>> {
        let stem = json_path.with_extension("");
        let mk = |name: &str| std::path::PathBuf::from(format!("{}.{name}.csv", stem.display()));
        let mut written = Vec::new();

        let tables: Vec<(&str, [&str; 2], Vec<Vec<String>>)> = vec![
            (
                "size_quantiles",
                ["percentile", "size"],
                self.size_quantiles.iter().map(|(k, v)| vec![k.to_string(), v.to_string()]).collect(),
            ),
            (
                "systems_per_set",
                ["systems", "sets"],
                self.systems_per_set_histogram.iter().map(|(k, v)| vec![k.to_string(), v.to_string()]).collect(),
            ),
            (
                "publishers",
                ["publisher", "sets"],
                self.publisher_counts.iter().map(|(k, v)| vec![k.clone(), v.to_string()]).collect(),
            ),
            (
                "types",
                ["vs_type", "sets"],
                self.type_counts.iter().map(|(k, v)| vec![k.to_string(), v.to_string()]).collect(),
            ),
            (
                "systems",
                ["system", "sets"],
                self.system_set_counts.iter().map(|(k, v)| vec![k.clone(), v.to_string()]).collect(),
            ),
        ];
        for (name, header, rows) in tables {
            let p = mk(name);
            write_csv_rows(&p, &header, &rows)?;
            written.push(p);
        }
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{test_set, CodeEntry};
    use proptest::prelude::*;

    #[test]
    fn nearest_rank_median() {
        let sets = vec![test_set("a", 3), test_set("b", 9), test_set("c", 300)];
        let st = corpus_stats(&sets).unwrap();
        assert_eq!(st.median_size(), 9);
    }

    #[test]
    fn description_fraction() {
        let mut sets: Vec<_> = (0..5).map(|i| test_set(&i.to_string(), 3)).collect();
        sets[2].description = "has one".into();
        let st = corpus_stats(&sets).unwrap();
        assert!((st.description_coverage - 0.2).abs() < 1e-12);
    }

    #[test]
    fn systems_histogram() {
        let mut sets = vec![test_set("a", 3), test_set("b", 3)];
        sets[1].codes.push(CodeEntry::new("x", "LOINC", ""));
        let st = corpus_stats(&sets).unwrap();
        assert_eq!(st.systems_per_set_histogram.get(&1), Some(&1));
        assert_eq!(st.systems_per_set_histogram.get(&2), Some(&1));
        assert!((st.single_system_fraction - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_is_error() {
        assert!(matches!(corpus_stats(&[]), Err(CorpusError::EmptyCorpus)));
    }

    #[test]
    fn csv_tables_written() {
        let dir = tempfile::tempdir().unwrap();
        let st = corpus_stats(&[test_set("a", 4)]).unwrap();
        let paths = st.write_csv_tables(&dir.path().join("stats.json")).unwrap();
        assert_eq!(paths.len(), 5);
        let text = std::fs::read_to_string(dir.path().join("stats.types.csv")).unwrap();
        assert_eq!(text, "vs_type,sets\nOther,1\n");
    }

    proptest! {
        #[test]
        fn fractions_bounded_and_histograms_partition(sizes in proptest::collection::vec(0usize..20, 1..40)) {
            let sets: Vec<_> = sizes.iter().enumerate().map(|(i, n)| test_set(&i.to_string(), *n)).collect();
            let st = corpus_stats(&sets).unwrap();
            prop_assert!((0.0..=1.0).contains(&st.description_coverage));
            prop_assert!((0.0..=1.0).contains(&st.single_system_fraction));
            prop_assert_eq!(st.systems_per_set_histogram.values().sum::<usize>(), st.set_count);
            prop_assert_eq!(st.type_counts.values().sum::<usize>(), st.set_count);
            prop_assert_eq!(st.publisher_counts.values().sum::<usize>(), st.set_count);
        }
    }
}
