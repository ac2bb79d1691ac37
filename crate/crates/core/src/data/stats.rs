use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub samples: usize,
    pub vocabulary: usize,
    pub max_herbs: usize,
    pub min_herbs: usize,
    pub mean_herbs: f64,
    /// Total herb occurrences divided by the vocabulary size.
    pub mean_appearances: f64,
    /// Fraction of vocabulary herbs occurring in more than `frequent_threshold` prescriptions.
    pub frequent_fraction: f64,
    pub frequent_threshold: usize,
}

pub fn herb_frequencies(prescriptions: &[Vec<usize>], herb_count: usize) -> Result<Vec<usize>> {
    let mut freq = vec![0usize; herb_count];
    for p in prescriptions {
        for &h in p {
            *freq
                .get_mut(h)
                .ok_or_else(|| Error::InvalidArgument(format!("herb id {h} outside vocabulary of {herb_count}")))? += 1;
        }
    }
    Ok(freq)
}

pub fn dataset_stats(
    prescriptions: &[Vec<usize>],
    herb_count: usize,
    frequent_threshold: usize,
) -> Result<DatasetStats> {
    if prescriptions.is_empty() || herb_count == 0 {
        return Err(Error::InvalidArgument("statistics need a non-empty dataset and vocabulary".into()));
    }
    let freq = herb_frequencies(prescriptions, herb_count)?;
    let sizes: Vec<usize> = prescriptions.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    Ok(DatasetStats {
        samples: prescriptions.len(),
        vocabulary: herb_count,
        max_herbs: *sizes.iter().max().unwrap(),
        min_herbs: *sizes.iter().min().unwrap(),
        mean_herbs: total as f64 / prescriptions.len() as f64,
        mean_appearances: total as f64 / herb_count as f64,
        frequent_fraction: freq.iter().filter(|&&f| f > frequent_threshold).count() as f64 / herb_count as f64,
        frequent_threshold,
    })
}

impl DatasetStats {
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "statistic,value")?;
        writeln!(out, "samples,{}", self.samples)?;
        writeln!(out, "herb_vocabulary,{}", self.vocabulary)?;
        writeln!(out, "max_herbs_per_prescription,{}", self.max_herbs)?;
        writeln!(out, "min_herbs_per_prescription,{}", self.min_herbs)?;
        writeln!(out, "mean_herbs_per_prescription,{:.2}", self.mean_herbs)?;
        writeln!(out, "mean_appearances_per_herb,{:.2}", self.mean_appearances)?;
        writeln!(out, "fraction_herbs_over_{},{:.4}", self.frequent_threshold, self.frequent_fraction)?;
        Ok(())
    }
}

/// The `k` most frequent herbs, ties broken by lower id.
pub fn most_frequent_herbs(prescriptions: &[Vec<usize>], herb_count: usize, k: usize) -> Result<Vec<usize>> {
    let freq = herb_frequencies(prescriptions, herb_count)?;
    let mut ids: Vec<usize> = (0..herb_count).collect();
    ids.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids.sort();
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample() {
        let s = dataset_stats(&[vec![0, 1, 2, 3, 4]], 10, 100).unwrap();
        assert_eq!((s.max_herbs, s.min_herbs, s.mean_herbs), (5, 5, 5.0));
        assert_eq!(s.mean_appearances, 0.5);
        assert_eq!(s.frequent_fraction, 0.0);
    }

    #[test]
    fn brute_force_counts() {
        let rx = vec![vec![0, 1], vec![1, 2, 3], vec![1, 3]];
        let s = dataset_stats(&rx, 4, 1).unwrap();
        let mut occurrences = 0;
        for h in 0..4 {
            occurrences += rx.iter().filter(|p| p.contains(&h)).count();
        }
        assert_eq!(s.mean_appearances, occurrences as f64 / 4.0);
        assert_eq!(s.frequent_fraction, 0.5);
        assert_eq!(most_frequent_herbs(&rx, 4, 2).unwrap(), vec![1, 3]);
        assert!(dataset_stats(&[vec![9]], 4, 1).is_err());
    }
}
