use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Metrics reported for probe tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Matthews,
    Accuracy,
    F1,
    Pearson,
    Spearman,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Matthews => "matthews",
            Metric::Accuracy => "accuracy",
            Metric::F1 => "f1",
            Metric::Pearson => "pearson",
            Metric::Spearman => "spearman",
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Binary confusion counts with `true` as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

fn check_pair(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a} predictions for {b} labels")));
    }
    if a == 0 {
        return Err(Error::Empty(format!("{op} input")));
    }
    Ok(())
}

impl Confusion {
    pub fn count(preds: &[bool], labels: &[bool]) -> Result<Self> {
        check_pair("confusion", preds.len(), labels.len())?;
        let mut c = Confusion::default();
        for (&p, &l) in preds.iter().zip(labels) {
            match (p, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    /// `(TP·TN − FP·FN) / √((TP+FP)(TP+FN)(TN+FP)(TN+FN))`, zero when any
    /// marginal is empty.
    pub fn matthews(&self) -> f64 {
        let (tp, fp, tn, fn_) = (self.tp as f64, self.fp as f64, self.tn as f64, self.fn_ as f64);
        let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        if den == 0.0 {
            return 0.0;
        }
        ((tp * tn - fp * fn_) / den.sqrt()).clamp(-1.0, 1.0)
    }

    /// `2·TP / (2·TP + FP + FN)`; zero when there are no positives at all.
    pub fn f1(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / den as f64
        }
    }
}

pub fn matthews_corr(preds: &[bool], labels: &[bool]) -> Result<f64> {
    Ok(Confusion::count(preds, labels)?.matthews())
}

pub fn f1_score(preds: &[bool], labels: &[bool]) -> Result<f64> {
    Ok(Confusion::count(preds, labels)?.f1())
}

pub fn accuracy<L: PartialEq>(preds: &[L], labels: &[L]) -> Result<f64> {
    check_pair("accuracy", preds.len(), labels.len())?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// A correlation coefficient. `degenerate` marks inputs where one side is
/// constant; the value is then 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correlation {
    pub value: f64,
    pub degenerate: bool,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    check_pair("pearson", x.len(), y.len())?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Correlation {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Correlation {
        value: (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Correlation> {
    check_pair("spearman", x.len(), y.len())?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Arithmetic mean of a task's metric values.
pub fn composite(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("metric list".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn confusion_vectors(tp: usize, fp: usize, tn: usize, fn_: usize) -> (Vec<bool>, Vec<bool>) {
        let mut p = Vec::new();
        let mut l = Vec::new();
        for (n, pv, lv) in [(tp, true, true), (fp, true, false), (tn, false, false), (fn_, false, true)] {
            p.extend(std::iter::repeat_n(pv, n));
            l.extend(std::iter::repeat_n(lv, n));
        }
        (p, l)
    }

    #[test]
    fn matthews_hand_values() {
        let l = vec![true, false, true, true, false];
        assert_eq!(matthews_corr(&l, &l).unwrap(), 1.0);
        let inv: Vec<bool> = l.iter().map(|b| !b).collect();
        assert_eq!(matthews_corr(&inv, &l).unwrap(), -1.0);
        // (3·4 − 1·2) / √(4·5·5·6) = 10 / √600
        let (p, l) = confusion_vectors(3, 1, 4, 2);
        assert!((matthews_corr(&p, &l).unwrap() - 0.4082).abs() < 1e-4);
        let all_true = vec![true; 5];
        assert_eq!(matthews_corr(&all_true, &l[..5]).unwrap(), 0.0);
    }

    #[test]
    fn f1_hand_value() {
        let (p, l) = confusion_vectors(4, 1, 9, 3);
        assert!((f1_score(&p, &l).unwrap() - 8.0 / 12.0).abs() < 1e-12);
        assert_eq!(f1_score(&[false, false], &[false, false]).unwrap(), 0.0);
    }

    #[test]
    fn correlations_of_identical_and_monotone_vectors() {
        let x = [0.1, 0.5, 0.2, 0.9, 0.4];
        assert!((pearson(&x, &x).unwrap().value - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &x).unwrap().value - 1.0).abs() < 1e-12);
        let cubed: Vec<f64> = x.iter().map(|v| v * v * v).collect();
        assert!((spearman(&x, &cubed).unwrap().value - 1.0).abs() < 1e-12);
        assert!(pearson(&x, &cubed).unwrap().value < 1.0);
        let neg: Vec<f64> = x.iter().map(|v| -v.exp()).collect();
        assert!((spearman(&x, &neg).unwrap().value + 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_input_is_flagged() {
        let c = pearson(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(c.value, 0.0);
        assert!(c.degenerate);
        assert!(spearman(&[0.0, 1.0], &[3.0, 3.0]).unwrap().degenerate);
    }

    #[test]
    fn ties_share_average_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn mismatched_or_empty_inputs_are_rejected() {
        assert!(accuracy(&[1usize], &[1, 0]).is_err());
        assert!(pearson(&[], &[]).is_err());
        assert!(composite(&[]).is_err());
        assert_eq!(composite(&[0.5, 1.0]).unwrap(), 0.75);
    }
}
