//! Confusion matrix, overall/average accuracy and Cohen's kappa.

use std::fmt::Write as _;

use log::warn;

use crate::error::{Error, Result};

/// Counts with rows = reference class and columns = predicted class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::invalid("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix {
            classes: k,
            counts: rows.concat(),
        })
    }

    /// Builds from 0-based `(reference, predicted)` pairs.
    pub fn from_pairs(classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut cm = ConfusionMatrix::new(classes);
        for (r, p) in pairs {
            cm.add(r, p)?;
        }
        Ok(cm)
    }

    pub fn add(&mut self, reference: usize, predicted: usize) -> Result<()> {
        if reference >= self.classes || predicted >= self.classes {
            return Err(Error::invalid(format!(
                "class pair ({reference}, {predicted}) outside {} classes",
                self.classes
            )));
        }
        self.counts[reference * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, reference: usize, predicted: usize) -> u64 {
        self.counts[reference * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|j| self.get(k, j)).sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, k)).sum()
    }

    fn trace(&self) -> u64 {
        (0..self.classes).map(|k| self.get(k, k)).sum()
    }

    fn nonempty(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::invalid("confusion matrix is empty")),
            t => Ok(t as f64),
        }
    }

    /// Recall of every class; `None` for classes without reference samples.
    pub fn recalls(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|k| match self.row_sum(k) {
                0 => None,
                n => Some(self.get(k, k) as f64 / n as f64),
            })
            .collect()
    }
}

pub fn oa(cm: &ConfusionMatrix) -> Result<f64> {
    Ok(cm.trace() as f64 / cm.nonempty()?)
}

/// Mean recall over classes that have reference samples.
pub fn aa(cm: &ConfusionMatrix) -> Result<f64> {
    cm.nonempty()?;
    let recalls = cm.recalls();
    let present: Vec<f64> = recalls.iter().flatten().copied().collect();
    if present.len() < recalls.len() {
        let missing: Vec<usize> = (0..recalls.len())
            .filter(|&k| recalls[k].is_none())
            .map(|k| k + 1)
            .collect();
        warn!("classes {missing:?} have no reference samples and are left out of AA");
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

pub fn kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.nonempty()?;
    let po = cm.trace() as f64 / total;
    let pe: f64 = (0..cm.classes)
        .map(|k| cm.row_sum(k) as f64 * cm.col_sum(k) as f64)
        .sum::<f64>()
        / (total * total);
    if pe >= 1.0 {
        return if po >= 1.0 {
            Ok(1.0)
        } else {
            Err(Error::invalid(
                "kappa undefined: chance agreement is 1 but observed agreement is not",
            ))
        };
    }
    Ok((po - pe) / (1.0 - pe))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub confusion: ConfusionMatrix,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
}

impl Report {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Result<Self> {
        Ok(Report {
            oa: oa(&confusion)?,
            aa: aa(&confusion)?,
            kappa: kappa(&confusion)?,
            confusion,
        })
    }

    /// `OA\tAA\tKappa` header and values, then `class\trecall` lines
    /// (`nan` for classes without reference samples).
    pub fn to_text(&self) -> String {
        let mut s = String::from("OA\tAA\tKappa\n");
        writeln!(s, "{:.6}\t{:.6}\t{:.6}", self.oa, self.aa, self.kappa).unwrap();
        writeln!(s, "class\trecall").unwrap();
        for (k, r) in self.confusion.recalls().iter().enumerate() {
            writeln!(s, "{}\t{:.6}", k + 1, r.unwrap_or(f64::NAN)).unwrap();
        }
        s
    }
}
