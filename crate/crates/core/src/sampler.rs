//! Mini-batch construction by balancing-score matching.
//!
//! A batch starts from a uniformly drawn seed pair and is filled with the
//! `a` available pairs whose propensity scores are closest (in JS
//! divergence) to the seed's. Ties go to the lowest index. Matched pairs
//! leave the pool, so repeated draws partition it.
//!
//! Anchors that share a class share a prior mean, so many score columns are
//! bit-identical. The pool groups identical columns once and evaluates each
//! JS divergence over the groups, weighting every group by its size. This
//! is the same sum with equal terms collected, so distances agree with the
//! column-by-column evaluation to rounding.

use std::collections::HashMap;

use ndcore::{Bundle, Tensor};
use rand::Rng;
use rayon::prelude::*;

use crate::balance::{log_densities_into, softmax_in_place};
use crate::dataset::Dataset;
use crate::error::{config_err, Error, Result};
use crate::hash::content_hash;
use crate::rlvm::Rlvm;

/// What each greedy match is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchTarget {
    /// Every candidate is compared with the seed pair.
    #[default]
    Seed,
    /// Each candidate is compared with the most recently added pair.
    Chain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchPool {
    /// `D × nu`, one propensity row per pair.
    scores: Tensor,
    pub label_ids: Vec<usize>,
    available: Vec<bool>,
    n_available: usize,
    /// Squared-difference terms evaluated while scoring.
    pub op_count: u64,
    /// One representative column per group of identical columns, and group sizes.
    group_reps: Vec<usize>,
    group_sizes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    /// Seed first, then matches in the order they were chosen.
    pub indices: Vec<usize>,
    pub seed: usize,
    /// JS distance of each match to its reference, parallel to `indices[1..]`.
    pub distances: Vec<f64>,
    /// Set for the leftover batch at the end of an epoch.
    pub short: bool,
}

impl MatchPool {
    pub fn from_scores(scores: Tensor, label_ids: Vec<usize>) -> Result<Self> {
        if scores.rows() == 0 {
            return Err(config_err("match pool needs at least one pair"));
        }
        if label_ids.len() != scores.cols() {
            return Err(config_err("label_ids must have one entry per score column"));
        }
        let d = scores.rows();
        let (group_reps, group_sizes) = column_groups(&scores);
        Ok(Self {
            scores,
            label_ids,
            available: vec![true; d],
            n_available: d,
            op_count: 0,
            group_reps,
            group_sizes,
        })
    }

    /// Number of distinct score columns.
    pub fn n_groups(&self) -> usize {
        self.group_reps.len()
    }

    /// JS divergence between the scores of pairs `i` and `j`.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (p, q) = (self.score(i), self.score(j));
        let mut acc = 0.0;
        for (&r, &w) in self.group_reps.iter().zip(&self.group_sizes) {
            let (a, b) = (p[r], q[r]);
            let m = 0.5 * (a + b);
            let mut t = 0.0;
            if a > 0.0 {
                t += a * (a / m).ln();
            }
            if b > 0.0 {
                t += b * (b / m).ln();
            }
            acc += w * t;
        }
        (0.5 * acc).clamp(0.0, std::f64::consts::LN_2)
    }

    pub fn len(&self) -> usize {
        self.scores.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_available(&self) -> usize {
        self.n_available
    }

    pub fn is_available(&self, i: usize) -> bool {
        self.available[i]
    }

    pub fn score(&self, i: usize) -> &[f64] {
        self.scores.row_slice(i)
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    /// Makes every pair available again.
    pub fn reset(&mut self) {
        self.available.iter_mut().for_each(|a| *a = true);
        self.n_available = self.len();
    }

    fn take(&mut self, i: usize) {
        debug_assert!(self.available[i]);
        self.available[i] = false;
        self.n_available -= 1;
    }

    fn available_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.available[i]).collect()
    }

    /// Hash of the score matrix, for tying batch plans to the pool that made them.
    pub fn hash(&self) -> String {
        let mut bytes = Vec::with_capacity(self.scores.len() * 8);
        for v in self.scores.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        content_hash(&bytes)
    }
}

/// Groups bit-identical columns; groups are ordered by first occurrence.
fn column_groups(scores: &Tensor) -> (Vec<usize>, Vec<f64>) {
    let (rows, cols) = (scores.rows(), scores.cols());
    let column = |j: usize| (0..rows).map(move |i| scores.get(i, j).to_bits());
    let mut by_hash: HashMap<u64, Vec<usize>> = HashMap::new();
    let mut reps: Vec<usize> = Vec::new();
    let mut sizes: Vec<f64> = Vec::new();
    for j in 0..cols {
        let h = column(j).fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b).wrapping_mul(0x100_0000_01b3)
        });
        let bucket = by_hash.entry(h).or_default();
        match bucket.iter().find(|&&g| column(reps[g]).eq(column(j))) {
            Some(&g) => sizes[g] += 1.0,
            None => {
                bucket.push(reps.len());
                reps.push(j);
                sizes.push(1.0);
            }
        }
    }
    (reps, sizes)
}

/// Scores `s` (`D × n`) against prior means (`nu × n`), row by row.
pub fn score_matrix(s: &Tensor, prior_means: &Tensor) -> Result<(Tensor, u64)> {
    if s.cols() != prior_means.cols() {
        return Err(config_err("posterior draws and prior means disagree on n"));
    }
    if prior_means.rows() < 2 {
        return Err(config_err("scoring needs at least 2 anchors"));
    }
    let nu = prior_means.rows();
    let rows: Vec<(Vec<f64>, u64)> = (0..s.rows())
        .into_par_iter()
        .map(|i| {
            let mut logits = vec![0.0; nu];
            let ops = log_densities_into(s.row_slice(i), prior_means, &mut logits);
            (softmax_in_place(logits), ops)
        })
        .collect();
    let ops = rows.iter().map(|(_, c)| c).sum();
    let data = rows.into_iter().flat_map(|(r, _)| r).collect();
    Ok((Tensor::matrix(s.rows(), nu, data), ops))
}

/// Scores every pair against every anchor of the dataset, using one
/// posterior draw per pair and a dataset-wide context for the prior.
pub fn build_pool(ds: &Dataset, model: &Rlvm, seed: u64) -> Result<MatchPool> {
    if model.d != ds.d {
        return Err(Error::Mismatch {
            what: "data dimension of rlvm checkpoint".into(),
            expected: ds.d.to_string(),
            found: model.d.to_string(),
        });
    }
    let xp = ds.x_plus();
    let xl = ds.x_label();
    let context = Rlvm::context(&xp, &xl)?;
    let prior_means = model.prior.prior_mean(&xl, &context)?;
    let s = model.posterior_draws(&xp, &xl, seed)?;
    let (scores, ops) = score_matrix(&s, &prior_means)?;
    let mut pool = MatchPool::from_scores(scores, (0..ds.len()).collect())?;
    pool.op_count = ops;
    Ok(pool)
}

fn order_by_distance(cands: &[usize], dist: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&x, &y| dist[x].total_cmp(&dist[y]).then(cands[x].cmp(&cands[y])));
    order
}

/// Draws one batch of `a + 1` pairs and removes them from the pool.
pub fn sample_batch<R: Rng + ?Sized>(
    pool: &mut MatchPool,
    a: usize,
    rng: &mut R,
    target: MatchTarget,
) -> Result<MiniBatch> {
    if pool.n_available() < a + 1 {
        return Err(Error::InsufficientPool {
            required: a + 1,
            available: pool.n_available(),
        });
    }
    let avail = pool.available_indices();
    let seed = avail[rng.random_range(0..avail.len())];
    pool.take(seed);
    let mut indices = vec![seed];
    let mut distances = Vec::with_capacity(a);
    match target {
        MatchTarget::Seed => {
            let cands: Vec<usize> = avail.into_iter().filter(|&i| i != seed).collect();
            let dist: Vec<f64> = cands.par_iter().map(|&j| pool.distance(seed, j)).collect();
            for k in order_by_distance(&cands, &dist).into_iter().take(a) {
                indices.push(cands[k]);
                distances.push(dist[k]);
            }
        }
        MatchTarget::Chain => {
            let mut cands: Vec<usize> = avail.into_iter().filter(|&i| i != seed).collect();
            let mut reference = seed;
            for _ in 0..a {
                let dist: Vec<f64> = cands
                    .par_iter()
                    .map(|&j| pool.distance(reference, j))
                    .collect();
                let k = order_by_distance(&cands, &dist)[0];
                reference = cands.remove(k);
                indices.push(reference);
                distances.push(dist[k]);
            }
        }
    }
    for &i in &indices[1..] {
        pool.take(i);
    }
    Ok(MiniBatch {
        indices,
        seed,
        distances,
        short: false,
    })
}

/// Partitions the pool into batches of `a + 1`; the remainder, if any, is a
/// final batch flagged `short`. The pool is reset first and left exhausted.
pub fn sample_epoch<R: Rng + ?Sized>(
    pool: &mut MatchPool,
    a: usize,
    rng: &mut R,
    target: MatchTarget,
) -> Result<Vec<MiniBatch>> {
    pool.reset();
    let mut batches = Vec::with_capacity(pool.len() / (a + 1) + 1);
    while pool.n_available() > a {
        batches.push(sample_batch(pool, a, rng, target)?);
    }
    if pool.n_available() > 0 {
        let rest = pool.available_indices();
        for &i in &rest {
            pool.take(i);
        }
        batches.push(MiniBatch {
            seed: rest[0],
            indices: rest,
            distances: Vec::new(),
            short: true,
        });
    }
    Ok(batches)
}

/// `epochs` independent epoch partitions of the pool; epoch `e` draws its
/// seeds from its own stream.
pub fn plan_epochs(
    pool: &mut MatchPool,
    a: usize,
    epochs: usize,
    seed: u64,
    target: MatchTarget,
    dataset_hash: &str,
) -> Result<BatchPlan> {
    if epochs == 0 {
        return Err(config_err("a batch plan needs at least one epoch"));
    }
    let plan = (0..epochs)
        .map(|e| {
            sample_epoch(
                pool,
                a,
                &mut crate::rngs::stream(seed, "batch-plan", e as u64),
                target,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BatchPlan {
        a,
        pool_hash: pool.hash(),
        dataset_hash: dataset_hash.to_string(),
        epochs: plan,
    })
}

/// Batches for several epochs, tied to the pool and dataset they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub a: usize,
    pub pool_hash: String,
    pub dataset_hash: String,
    pub epochs: Vec<Vec<MiniBatch>>,
}

impl BatchPlan {
    /// Full batches of epoch `e`, cycling when there are more training epochs than planned.
    pub fn full_batches(&self, e: usize) -> impl Iterator<Item = &MiniBatch> {
        self.epochs[e % self.epochs.len()]
            .iter()
            .filter(|b| !b.short)
    }

    pub fn to_bundle(&self) -> Result<Bundle> {
        let mut b = Bundle::new();
        b.set_meta("kind", "batch-plan")
            .set_meta("version", 1)
            .set_meta("a", self.a)
            .set_meta("pool_hash", &self.pool_hash)
            .set_meta("dataset_hash", &self.dataset_hash)
            .set_meta("epochs", self.epochs.len());
        for (e, batches) in self.epochs.iter().enumerate() {
            let idx: Vec<i32> = batches
                .iter()
                .flat_map(|b| b.indices.iter().map(|&i| i as i32))
                .collect();
            let sizes: Vec<i32> = batches.iter().map(|b| b.indices.len() as i32).collect();
            let short: Vec<i32> = batches.iter().map(|b| i32::from(b.short)).collect();
            let dist: Vec<f64> = batches
                .iter()
                .flat_map(|b| b.distances.iter().copied())
                .collect();
            b.put_ints(&format!("epoch{e}.indices"), &idx)?;
            b.put_ints(&format!("epoch{e}.sizes"), &sizes)?;
            b.put_ints(&format!("epoch{e}.short"), &short)?;
            b.put_tensor(
                &format!("epoch{e}.distances"),
                &Tensor::matrix(dist.len(), 1, dist),
            )?;
        }
        Ok(b)
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        if b.meta("kind")? != "batch-plan" {
            return Err(config_err("bundle does not hold a batch plan"));
        }
        let n_epochs: usize = b.meta_parse("epochs")?;
        let mut epochs = Vec::with_capacity(n_epochs);
        for e in 0..n_epochs {
            let idx = b.ints(&format!("epoch{e}.indices"))?;
            let sizes = b.ints(&format!("epoch{e}.sizes"))?;
            let short = b.ints(&format!("epoch{e}.short"))?;
            let dist = b.tensor(&format!("epoch{e}.distances"))?.data();
            let (mut ip, mut dp) = (0usize, 0usize);
            let mut batches = Vec::with_capacity(sizes.len());
            for (k, &sz) in sizes.iter().enumerate() {
                let sz = sz as usize;
                let indices: Vec<usize> = idx[ip..ip + sz].iter().map(|&i| i as usize).collect();
                ip += sz;
                let is_short = short[k] != 0;
                let nd = if is_short { 0 } else { sz - 1 };
                batches.push(MiniBatch {
                    seed: indices[0],
                    indices,
                    distances: dist[dp..dp + nd].to_vec(),
                    short: is_short,
                });
                dp += nd;
            }
            epochs.push(batches);
        }
        Ok(Self {
            a: b.meta_parse("a")?,
            pool_hash: b.meta("pool_hash")?.to_string(),
            dataset_hash: b.meta("dataset_hash")?.to_string(),
            epochs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngs;

    fn pool_from(rows: &[[f64; 2]]) -> MatchPool {
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        MatchPool::from_scores(Tensor::matrix(rows.len(), 2, data), vec![0, 1]).unwrap()
    }

    #[test]
    fn exhaustion_takes_everything() {
        let mut pool = pool_from(&[[0.9, 0.1], [0.2, 0.8], [0.5, 0.5], [0.6, 0.4]]);
        let mut rng = rngs::stream(0, "t", 0);
        let b = sample_batch(&mut pool, 3, &mut rng, MatchTarget::Seed).unwrap();
        let mut idx = b.indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2, 3]);
        assert_eq!(pool.n_available(), 0);
        let err = sample_batch(&mut pool, 0, &mut rng, MatchTarget::Seed).unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientPool {
                required: 1,
                available: 0
            }
        ));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let mut pool = pool_from(&[[0.5, 0.5]; 6]);
        let mut rng = rngs::stream(4, "t", 0);
        let b = sample_batch(&mut pool, 2, &mut rng, MatchTarget::Seed).unwrap();
        let expected: Vec<usize> = (0..6).filter(|&i| i != b.seed).take(2).collect();
        assert_eq!(&b.indices[1..], expected.as_slice());
        assert!(b.distances.iter().all(|d| *d == 0.0));
    }

    #[test]
    fn grouped_distance_matches_direct_js() {
        // Columns 0, 2 and 3 are identical.
        let rows = [
            [0.2, 0.3, 0.2, 0.2, 0.1],
            [0.1, 0.5, 0.1, 0.1, 0.2],
            [0.0, 0.4, 0.0, 0.0, 0.6],
        ];
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let pool = MatchPool::from_scores(Tensor::matrix(3, 5, data), (0..5).collect()).unwrap();
        assert_eq!(pool.n_groups(), 3);
        for i in 0..3 {
            for j in 0..3 {
                let direct = crate::balance::js_divergence(&rows[i], &rows[j]).unwrap();
                assert!((pool.distance(i, j) - direct).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn plan_round_trip() {
        let mut pool = pool_from(&[[0.9, 0.1], [0.2, 0.8], [0.5, 0.5], [0.6, 0.4], [0.3, 0.7]]);
        let mut rng = rngs::stream(1, "t", 0);
        let epoch = sample_epoch(&mut pool, 1, &mut rng, MatchTarget::Seed).unwrap();
        assert_eq!(epoch.len(), 3);
        assert!(epoch[2].short);
        let plan = BatchPlan {
            a: 1,
            pool_hash: pool.hash(),
            dataset_hash: "00".into(),
            epochs: vec![epoch],
        };
        let bytes = plan.to_bundle().unwrap().to_bytes();
        let back = BatchPlan::from_bundle(&Bundle::from_reader(bytes.as_slice()).unwrap()).unwrap();
        assert_eq!(back, plan);
    }
}
