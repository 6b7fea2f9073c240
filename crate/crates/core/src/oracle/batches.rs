//! Within-batch dependence between labels and the ground-truth spurious variable.

use ndcore::Tensor;

use super::exact::mutual_information;
use crate::error::{config_err, Result};

/// Ground-truth spurious values for every record of a dataset.
#[derive(Debug, Clone, Copy)]
pub enum SpuriousValues<'a> {
    /// A category per record.
    Discrete(&'a [usize]),
    /// A vector per record; the first coordinate is cut into equal-frequency bins.
    Continuous(&'a Tensor),
}

pub const CONTINUOUS_BINS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchCheck {
    /// Plug-in MI per checked batch, in nats.
    pub mi: Vec<f64>,
    /// Pearson chi-squared independence statistic per checked batch.
    pub chi2: Vec<f64>,
    /// Batches with fewer than two distinct labels.
    pub excluded: usize,
}

impl BatchCheck {
    pub fn mean_mi(&self) -> f64 {
        mean(&self.mi)
    }

    pub fn mean_chi2(&self) -> f64 {
        mean(&self.chi2)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn bin_codes(s: &Tensor, bins: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..s.rows()).collect();
    order.sort_by(|&a, &b| s.get(a, 0).total_cmp(&s.get(b, 0)).then(a.cmp(&b)));
    let mut codes = vec![0usize; s.rows()];
    for (rank, &i) in order.iter().enumerate() {
        codes[i] = rank * bins / s.rows();
    }
    codes
}

/// Contingency statistics of `(label, s)` inside every batch.
pub fn batch_pid_check(
    batches: &[Vec<usize>],
    labels: &[usize],
    s: SpuriousValues<'_>,
) -> Result<BatchCheck> {
    let codes: Vec<usize> = match s {
        SpuriousValues::Discrete(c) => c.to_vec(),
        SpuriousValues::Continuous(t) => bin_codes(t, CONTINUOUS_BINS),
    };
    if codes.len() != labels.len() {
        return Err(config_err(format!(
            "{} labels but {} spurious values",
            labels.len(),
            codes.len()
        )));
    }
    let n_l = labels.iter().max().map_or(0, |m| m + 1);
    let n_s = codes.iter().max().map_or(0, |m| m + 1);
    let mut out = BatchCheck {
        mi: Vec::new(),
        chi2: Vec::new(),
        excluded: 0,
    };
    for batch in batches {
        let mut table = vec![0.0; n_l * n_s];
        for &i in batch {
            let (l, c) = (
                *labels
                    .get(i)
                    .ok_or_else(|| config_err(format!("batch index {i} out of range")))?,
                codes[i],
            );
            table[l * n_s + c] += 1.0;
        }
        let distinct = (0..n_l)
            .filter(|&l| table[l * n_s..(l + 1) * n_s].iter().sum::<f64>() > 0.0)
            .count();
        if distinct < 2 {
            out.excluded += 1;
            continue;
        }
        out.mi.push(mutual_information(&table, n_l, n_s));
        out.chi2.push(chi_squared(&table, n_l, n_s));
    }
    Ok(out)
}

/// `Σ (O − E)²/E` over cells with positive expected count.
pub fn chi_squared(table: &[f64], rows: usize, cols: usize) -> f64 {
    let total: f64 = table.iter().sum();
    let r: Vec<f64> = (0..rows)
        .map(|i| table[i * cols..(i + 1) * cols].iter().sum())
        .collect();
    let c: Vec<f64> = (0..cols)
        .map(|j| (0..rows).map(|i| table[i * cols + j]).sum())
        .collect();
    let mut stat = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let e = r[i] * c[j] / total;
            if e > 0.0 {
                stat += (table[i * cols + j] - e).powi(2) / e;
            }
        }
    }
    stat
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_s_gives_zero_and_single_label_is_excluded() {
        let labels = [0, 1, 0, 1, 1, 1];
        let s = [1, 1, 1, 1, 0, 0];
        let chk = batch_pid_check(
            &[vec![0, 1, 2, 3], vec![4, 5]],
            &labels,
            SpuriousValues::Discrete(&s),
        )
        .unwrap();
        assert_eq!(chk.mi, vec![0.0]);
        assert_eq!(chk.excluded, 1);
    }

    #[test]
    fn perfectly_aligned_batch_has_ln2() {
        let labels = [0, 1, 0, 1];
        let s = [0, 1, 0, 1];
        let chk =
            batch_pid_check(&[vec![0, 1, 2, 3]], &labels, SpuriousValues::Discrete(&s)).unwrap();
        assert!((chk.mi[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(chk.chi2[0], 4.0);
    }

    #[test]
    fn continuous_values_use_equal_frequency_bins() {
        let t = Tensor::matrix(16, 1, (0..16).rev().map(f64::from).collect());
        let codes = bin_codes(&t, 8);
        assert_eq!(codes[15], 0);
        assert_eq!(codes[0], 7);
        assert_eq!(codes.iter().filter(|&&c| c == 3).count(), 2);
    }
}
