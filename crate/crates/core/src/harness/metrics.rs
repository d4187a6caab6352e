use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{CallLabel, LabelMode};

/// A set of call labels: gold (Y) or predicted (Z).
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSet {
    pub labels: BTreeSet<String>,
}

impl LabelSet {
    pub fn new<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            labels: labels.into_iter().map(Into::into).collect(),
        }
    }

    pub fn from_calls(calls: &BTreeSet<CallLabel>, mode: LabelMode) -> Self {
        Self {
            labels: calls.iter().map(|c| mode.apply(c).0).collect(),
        }
    }

    /// Re-normalizes stored labels under `mode`.
    pub fn with_mode(&self, mode: LabelMode) -> Self {
        Self {
            labels: self
                .labels
                .iter()
                .map(|l| mode.apply(&CallLabel(l.clone())).0)
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn common(&self, other: &LabelSet) -> usize {
        self.labels.intersection(&other.labels).count()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("metric is undefined over zero pairs")]
    NoPairs,
    #[error("label `{0}` is outside the universe")]
    OutsideUniverse(String),
}

/// Which denominators recall and precision use.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrConvention {
    /// Recall over the predicted set, precision over the gold set.
    #[default]
    AsPrinted,
    /// Recall over the gold set, precision over the predicted set.
    Conventional,
}

/// `num / den`, with 0/0 read as 1 when both sets are empty and 0 when only one is.
fn ratio(num: usize, den: usize, both_empty: bool) -> f64 {
    if den == 0 {
        if both_empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

fn mean(pairs: &[(LabelSet, LabelSet)], term: impl Fn(&LabelSet, &LabelSet) -> f64) -> Result<f64, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::NoPairs);
    }
    Ok(pairs.iter().map(|(y, z)| term(y, z)).sum::<f64>() / pairs.len() as f64)
}

fn both_empty(y: &LabelSet, z: &LabelSet) -> bool {
    y.is_empty() && z.is_empty()
}

/// Mean of |Y∩Z| / |Y∪Z|.
pub fn metric_accuracy(pairs: &[(LabelSet, LabelSet)]) -> Result<f64, MetricError> {
    mean(pairs, |y, z| {
        let common = y.common(z);
        ratio(common, y.len() + z.len() - common, both_empty(y, z))
    })
}

pub fn metric_recall(pairs: &[(LabelSet, LabelSet)], convention: PrConvention) -> Result<f64, MetricError> {
    mean(pairs, |y, z| {
        let den = match convention {
            PrConvention::AsPrinted => z.len(),
            PrConvention::Conventional => y.len(),
        };
        ratio(y.common(z), den, both_empty(y, z))
    })
}

pub fn metric_precision(pairs: &[(LabelSet, LabelSet)], convention: PrConvention) -> Result<f64, MetricError> {
    mean(pairs, |y, z| {
        let den = match convention {
            PrConvention::AsPrinted => y.len(),
            PrConvention::Conventional => z.len(),
        };
        ratio(y.common(z), den, both_empty(y, z))
    })
}

/// Mean of 2|Y∩Z| / (|Y| + |Z|).
pub fn metric_f1(pairs: &[(LabelSet, LabelSet)]) -> Result<f64, MetricError> {
    mean(pairs, |y, z| ratio(2 * y.common(z), y.len() + z.len(), both_empty(y, z)))
}

/// Union of every gold and predicted label.
pub fn label_universe(pairs: &[(LabelSet, LabelSet)]) -> BTreeSet<String> {
    pairs
        .iter()
        .flat_map(|(y, z)| y.labels.iter().chain(&z.labels))
        .cloned()
        .collect()
}

/// Symmetric-difference count per pair, normalized by K·n.
pub fn metric_hamming(pairs: &[(LabelSet, LabelSet)], universe: &BTreeSet<String>) -> Result<f64, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::NoPairs);
    }
    for (y, z) in pairs {
        if let Some(l) = y.labels.iter().chain(&z.labels).find(|l| !universe.contains(*l)) {
            return Err(MetricError::OutsideUniverse(l.clone()));
        }
    }
    if universe.is_empty() {
        // every set is empty, so nothing is mispredicted
        return Ok(0.0);
    }
    let wrong: usize = pairs
        .iter()
        .map(|(y, z)| y.labels.symmetric_difference(&z.labels).count())
        .sum();
    Ok(wrong as f64 / (universe.len() * pairs.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(y: &[&str], z: &[&str]) -> (LabelSet, LabelSet) {
        (LabelSet::new(y.iter().copied()), LabelSet::new(z.iter().copied()))
    }

    #[test]
    fn worked_examples() {
        let p = [pair(&["a", "b"], &["b", "c"])];
        assert!((metric_accuracy(&p).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(metric_recall(&p, PrConvention::AsPrinted).unwrap(), 0.5);
        assert_eq!(metric_precision(&p, PrConvention::AsPrinted).unwrap(), 0.5);
        assert_eq!(metric_f1(&p).unwrap(), 0.5);
        let u = label_universe(&p);
        assert!((metric_hamming(&p, &u).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(metric_accuracy(&[pair(&["a"], &["b"])]).unwrap(), 0.0);
    }

    #[test]
    fn as_printed_denominators() {
        // Y = {a}, Z = {a, b}: as printed recall = 1/2, precision = 1
        let p = [pair(&["a"], &["a", "b"])];
        assert_eq!(metric_recall(&p, PrConvention::AsPrinted).unwrap(), 0.5);
        assert_eq!(metric_precision(&p, PrConvention::AsPrinted).unwrap(), 1.0);
        assert_eq!(metric_recall(&p, PrConvention::Conventional).unwrap(), 1.0);
        assert_eq!(metric_precision(&p, PrConvention::Conventional).unwrap(), 0.5);
    }

    #[test]
    fn empty_set_rule() {
        let both = [pair(&[], &[])];
        assert_eq!(metric_recall(&both, PrConvention::AsPrinted).unwrap(), 1.0);
        assert_eq!(metric_f1(&both).unwrap(), 1.0);
        assert_eq!(metric_accuracy(&both).unwrap(), 1.0);
        let one = [pair(&[], &["a"])];
        assert_eq!(metric_precision(&one, PrConvention::AsPrinted).unwrap(), 0.0);
        assert_eq!(metric_f1(&one).unwrap(), 0.0);
        assert_eq!(metric_f1(&[]), Err(MetricError::NoPairs));
    }

    #[test]
    fn hamming_bounds() {
        let u: BTreeSet<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let maximal = [pair(&[], &["a", "b", "c", "d"])];
        assert_eq!(metric_hamming(&maximal, &u).unwrap(), 1.0);
        let same = [pair(&["a"], &["a"])];
        assert_eq!(metric_hamming(&same, &u).unwrap(), 0.0);
        assert_eq!(
            metric_hamming(&[pair(&["x"], &[])], &u),
            Err(MetricError::OutsideUniverse("x".into()))
        );
    }

    #[test]
    fn bare_mode() {
        let s = LabelSet::new(["ee.Image.clip", "geemap.Map"]);
        assert_eq!(s.with_mode(LabelMode::Bare), LabelSet::new(["clip", "Map"]));
    }
}
