//! Accuracy and age-bias metrics over a set of predictions.
//!
//! - MAE: mean absolute residual, in years.
//! - `r`: Spearman correlation between predictions and chronological ages.
//! - BAG: per-sample brain-age gap `|P_i - C_i|`.
//! - `rp`: Spearman correlation between BAG and chronological age. Values
//!   near 0 mean the error does not depend on age.
//!
//! Spearman correlation is the Pearson product-moment formula applied to
//! ranks, with tied values sharing their average rank.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_lengths(preds: &[f64], ages: &[f64]) -> Result<()> {
    if preds.len() != ages.len() {
        return Err(Error::dim("metrics", &[preds.len()], &[ages.len()]));
    }
    if preds.is_empty() {
        return Err(Error::Contract("metrics need at least one sample".into()));
    }
    Ok(())
}

pub fn mae(preds: &[f64], ages: &[f64]) -> Result<f64> {
    check_lengths(preds, ages)?;
    Ok(preds.iter().zip(ages).map(|(p, a)| (p - a).abs()).sum::<f64>() / preds.len() as f64)
}

/// Brain-age gap per sample.
pub fn bag(preds: &[f64], ages: &[f64]) -> Result<Vec<f64>> {
    if preds.len() != ages.len() {
        return Err(Error::dim("bag", &[preds.len()], &[ages.len()]));
    }
    Ok(preds.iter().zip(ages).map(|(p, a)| (p - a).abs()).collect())
}

/// 1-based ranks, ties receive the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "one of the rank vectors has zero variance".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(preds: &[f64], ages: &[f64]) -> Result<f64> {
    check_lengths(preds, ages)?;
    if preds.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "correlation needs at least 2 samples, got {}",
            preds.len()
        )));
    }
    pearson(&average_ranks(preds), &average_ranks(ages))
}

/// Spearman correlation between the brain-age gap and chronological age.
pub fn rp(preds: &[f64], ages: &[f64]) -> Result<f64> {
    spearman(&bag(preds, ages)?, ages)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub mae: f64,
    /// `None` when the correlation is undefined; the reason is kept alongside.
    pub r: Option<f64>,
    pub rp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub r_reason: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rp_reason: Option<String>,
    #[serde(skip)]
    pub per_sample_bag: Vec<f64>,
}

impl MetricsReport {
    /// MAE must be defined; undefined correlations are recorded, not raised.
    pub fn compute(preds: &[f64], ages: &[f64]) -> Result<Self> {
        let mae = mae(preds, ages)?;
        let split = |res: Result<f64>| match res {
            Ok(v) => (Some(v), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let (r, r_reason) = split(spearman(preds, ages));
        let (rp, rp_reason) = split(rp(preds, ages));
        Ok(Self {
            n: preds.len(),
            mae,
            r,
            rp,
            r_reason,
            rp_reason,
            per_sample_bag: bag(preds, ages)?,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[5.0, 7.0], &[4.0, 9.0]).unwrap(), 1.5);
        assert!(matches!(mae(&[], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn spearman_monotone_and_reversed() {
        let a = [1.0, 2.0, 3.0, 10.0];
        assert_eq!(spearman(&[0.5, 0.7, 9.0, 11.0], &a).unwrap(), 1.0);
        assert_eq!(spearman(&[4.0, 3.0, 2.0, 1.0], &a).unwrap(), -1.0);
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn constant_vector_is_undefined() {
        assert!(matches!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::UndefinedCorrelation(_))));
        assert!(matches!(spearman(&[1.0], &[1.0]), Err(Error::UndefinedCorrelation(_))));
    }

    #[test]
    fn bag_examples() {
        assert_eq!(bag(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(bag(&[10.0], &[12.0]).unwrap(), vec![2.0]);
        assert_eq!(bag(&[3.0, 9.0], &[5.0, 1.0]).unwrap(), bag(&[5.0, 1.0], &[3.0, 9.0]).unwrap());
    }

    #[test]
    fn rp_constant_gap_is_undefined() {
        let ages = [20.0, 30.0, 40.0];
        let preds = [22.0, 32.0, 42.0];
        assert!(matches!(rp(&preds, &ages), Err(Error::UndefinedCorrelation(_))));
    }

    #[test]
    fn rp_increasing_gap_is_one() {
        let ages = [20.0, 30.0, 40.0, 50.0];
        let preds = [21.0, 28.0, 43.0, 46.0];
        assert_eq!(rp(&preds, &ages).unwrap(), 1.0);
    }

    #[test]
    fn single_sample_report() {
        let r = MetricsReport::compute(&[30.0], &[33.5]).unwrap();
        assert_eq!(r.mae, 3.5);
        assert!(r.r.is_none() && r.rp.is_none());
        assert!(r.r_reason.is_some());
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert!(json["r"].is_null());
        assert_eq!(json["n"], 1);
    }
}
