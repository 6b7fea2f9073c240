use ndcore::Tensor;
use pidssl::balance::{js_divergence, propensity};
use pidssl::oracle::{
    decomposition, js_bruteforce, minimax_table, mutual_information, pid_project, prior_moments,
    stratify,
};
use pidssl::rlvm::{kl_term, ortho_penalty, prior_mean_from, Posterior};
use pidssl::rngs;
use pidssl::sampler::{sample_epoch, MatchPool, MatchTarget};
use pidssl::scmgen::gen_discrete_toy;
use proptest::prelude::*;

fn distribution(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, len).prop_map(|v| {
        let total: f64 = v.iter().sum();
        v.into_iter().map(|x| x / total).collect()
    })
}

fn pair_of_distributions() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..8).prop_flat_map(|n| (distribution(n..n + 1), distribution(n..n + 1)))
}

proptest! {
    #[test]
    fn js_is_a_bounded_symmetric_divergence((p, q) in pair_of_distributions()) {
        let pq = js_divergence(&p, &q).unwrap();
        let qp = js_divergence(&q, &p).unwrap();
        prop_assert!((pq - qp).abs() <= 1e-15);
        prop_assert!((0.0..=std::f64::consts::LN_2 + 1e-15).contains(&pq));
        prop_assert!(js_divergence(&p, &p).unwrap().abs() <= 1e-15);
        prop_assert!((pq - js_bruteforce(&p, &q)).abs() <= 1e-12);
    }

    #[test]
    fn propensity_is_a_distribution_invariant_to_translation(
        s in prop::collection::vec(-3.0f64..3.0, 2),
        means in prop::collection::vec(-3.0f64..3.0, 2..12),
        shift in prop::collection::vec(-5.0f64..5.0, 2),
    ) {
        let rows = means.len() / 2;
        prop_assume!(rows >= 2);
        let mu = Tensor::matrix(rows, 2, means[..rows * 2].to_vec());
        let score = propensity(&s, &mu).unwrap();
        prop_assert!((score.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let moved_s: Vec<f64> = s.iter().zip(&shift).map(|(a, b)| a + b).collect();
        let moved_mu = Tensor::matrix(rows, 2, (0..rows * 2).map(|i| mu.data()[i] + shift[i % 2]).collect());
        let moved = propensity(&moved_s, &moved_mu).unwrap();
        for (a, b) in score.probs.iter().zip(&moved.probs) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_vanishes_at_the_prior(
        mean in prop::collection::vec(-4.0f64..4.0, 3),
        lv in prop::collection::vec(-3.0f64..3.0, 3),
        mu in prop::collection::vec(-4.0f64..4.0, 3),
    ) {
        let post = Posterior { mean, log_variance: lv };
        prop_assert!(kl_term(&post, &mu) >= 0.0);
        let at_prior = Posterior { mean: mu.clone(), log_variance: vec![0.0; 3] };
        prop_assert_eq!(kl_term(&at_prior, &mu), 0.0);
    }

    #[test]
    fn penalty_respects_column_symmetries(
        data in prop::collection::vec(-2.0f64..2.0, 6),
        c in 0.1f64..3.0,
        flip in 0usize..2,
    ) {
        let a = Tensor::matrix(3, 2, data.clone());
        let base = ortho_penalty(&a);
        prop_assert!(base >= 0.0);
        let flipped = Tensor::matrix(3, 2, data.iter().enumerate().map(|(i, v)| if i % 2 == flip { -v } else { *v }).collect());
        prop_assert!((ortho_penalty(&flipped) - base).abs() <= 1e-12 * (1.0 + base));
        let scaled = a.map(|v| v * c);
        prop_assert!((ortho_penalty(&scaled) - c.powi(4) * base).abs() <= 1e-9 * (1.0 + c.powi(4) * base));
        let diagonal = Tensor::matrix(3, 2, vec![data[0], 0.0, 0.0, data[1], 0.0, 0.0]);
        prop_assert_eq!(ortho_penalty(&diagonal), 0.0);
    }

    #[test]
    fn prior_has_unit_mass_and_analytic_mean(
        a_row in prop::collection::vec(-1.5f64..1.5, 2),
        lambda in prop::collection::vec(-2.0f64..2.0, 2),
    ) {
        let (mass, mean) = prior_moments(&a_row, &lambda, 20_000);
        let eta = prior_mean_from(&Tensor::matrix(1, 2, a_row.clone()), &lambda)[0];
        prop_assert!((mass - 1.0).abs() <= 1e-6);
        prop_assert!((mean - eta).abs() <= 1e-6);
    }

    #[test]
    fn mutual_information_vanishes_on_product_tables(
        rows in distribution(2..5),
        cols in distribution(2..5),
        noise in prop::collection::vec(0.0f64..1.0, 16),
    ) {
        let product: Vec<f64> = rows.iter().flat_map(|r| cols.iter().map(move |c| r * c)).collect();
        prop_assert!(mutual_information(&product, rows.len(), cols.len()).abs() <= 1e-14);
        let any: Vec<f64> = product.iter().zip(&noise).map(|(p, n)| p + n).collect();
        prop_assert!(mutual_information(&any, rows.len(), cols.len()) >= -1e-15);
    }

    #[test]
    fn discrete_toy_identities(p_sc in 0.01f64..0.99, noise in 0.0f64..0.45) {
        let joint = gen_discrete_toy(p_sc, noise).unwrap();
        let pid = pid_project(&joint).unwrap();
        let (lhs, rhs) = decomposition(&joint, &pid).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10, "{} vs {}", lhs, rhs);
        prop_assert!(stratify(&joint, 1e-12).max_error <= 1e-12);
        prop_assert!(mutual_information(&pid.label_s(), 2, 2).abs() <= 1e-14);
    }

    #[test]
    fn pid_classifier_is_minimax_across_the_family(
        interior in prop::collection::vec(0.01f64..0.99, 0..4),
        noise in 0.01f64..0.45,
    ) {
        // The family spans the whole correlation range, so both extremes are always present.
        let mut grid = vec![0.01, 0.99];
        grid.extend(interior);
        let table = minimax_table(&grid, noise).unwrap();
        for w in &table.worst_env {
            prop_assert!(table.worst_pid <= w + 1e-12);
        }
    }

    #[test]
    fn an_epoch_partitions_the_pool(
        d in 4usize..60,
        nu in 2usize..5,
        a in 1usize..8,
        seed in any::<u64>(),
        chain in any::<bool>(),
    ) {
        let scores: Vec<f64> = {
            let mut rng = rngs::stream(seed, "prop-scores", 0);
            let raw: Vec<f64> = (0..d * nu).map(|_| rand::Rng::random_range(&mut rng, 0.01..1.0)).collect();
            raw.chunks(nu).flat_map(|r| { let t: f64 = r.iter().sum(); r.iter().map(move |v| v / t) }).collect()
        };
        let mut pool = MatchPool::from_scores(Tensor::matrix(d, nu, scores), (0..nu).collect()).unwrap();
        let target = if chain { MatchTarget::Chain } else { MatchTarget::Seed };
        let batches = sample_epoch(&mut pool, a, &mut rngs::stream(seed, "prop-epoch", 0), target).unwrap();
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..d).collect::<Vec<_>>());
        for b in &batches {
            prop_assert_eq!(b.indices[0], b.seed);
            if b.short {
                prop_assert!(b.indices.len() <= a);
                continue;
            }
            prop_assert_eq!(b.indices.len(), a + 1);
            prop_assert_eq!(b.distances.len(), a);
            if !chain {
                prop_assert!(b.distances.windows(2).all(|w| w[0] <= w[1]));
                for (j, dist) in b.indices[1..].iter().zip(&b.distances) {
                    prop_assert_eq!(pool.distance(b.seed, *j), *dist);
                }
            }
        }
        prop_assert_eq!(batches.iter().filter(|b| b.short).count(), usize::from(d % (a + 1) != 0));
    }
}
