//! Values computed independently with SciPy and scikit-learn and frozen here.

use ndcore::Tensor;
use pidssl::balance::{js_divergence, propensity};
use pidssl::evalharness::{affine_r2, Probe, ProbeConfig};
use pidssl::oracle::mutual_information;
use pidssl::rlvm::{kl_term, Posterior};
use pidssl::ssl::info_nce_rows;

fn close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b}");
}

#[test]
fn js_matches_scipy() {
    // scipy.spatial.distance.jensenshannon(p, q) ** 2
    let v = js_divergence(&[0.7, 0.2, 0.1], &[0.1, 0.2, 0.7]).unwrap();
    close(v, 0.253_101_615_442_806_9, 1e-15);
}

#[test]
fn mutual_information_matches_sklearn() {
    // sklearn.metrics.mutual_info_score(contingency=[[10, 5, 1], [2, 8, 14]])
    let mi = mutual_information(&[10.0, 5.0, 1.0, 2.0, 8.0, 14.0], 2, 3);
    close(mi, 0.229_454_050_516_606_8, 1e-14);
}

#[test]
fn kl_matches_adaptive_quadrature() {
    // scipy.integrate.quad of p (ln p − ln q) per coordinate, summed.
    let post = Posterior {
        mean: vec![0.3, -1.2],
        log_variance: vec![0.5, -0.7],
    };
    close(kl_term(&post, &[1.0, 0.4]), 1.697_653_287_245_768_7, 1e-12);
}

#[test]
fn info_nce_matches_numpy() {
    let unit = |rows: &[[f64; 2]]| {
        let data = rows
            .iter()
            .flat_map(|r| {
                let n = (r[0] * r[0] + r[1] * r[1]).sqrt();
                [r[0] / n, r[1] / n]
            })
            .collect();
        Tensor::matrix(rows.len(), 2, data)
    };
    let zp = unit(&[[1.0, 2.0], [0.5, -1.0], [-2.0, 0.3]]);
    let za = unit(&[[0.9, 2.2], [1.0, -1.5], [-1.0, -0.1]]);
    let rows = info_nce_rows(&zp, &za, 0.5).unwrap();
    let expected = [
        0.092_795_847_310_561_01,
        0.099_178_602_250_921_12,
        0.119_643_570_416_714_25,
    ];
    for (r, e) in rows.iter().zip(expected) {
        close(*r, e, 1e-14);
    }
}

#[test]
fn propensity_matches_scipy_softmax() {
    let means = Tensor::matrix(3, 2, vec![1.0, 0.0, -0.5, 0.5, 0.2, -1.0]);
    let score = propensity(&[0.4, -0.3], &means).unwrap();
    let expected = [
        0.389_511_226_294_731_34,
        0.236_250_501_050_020_2,
        0.374_238_272_655_248_56,
    ];
    for (p, e) in score.probs.iter().zip(expected) {
        close(*p, e, 1e-15);
    }
}

#[test]
fn affine_r2_matches_sklearn() {
    let x = Tensor::matrix(
        6,
        2,
        vec![
            0.1, 0.5, 0.4, -0.2, -0.3, 0.8, 0.9, 0.1, -0.6, -0.4, 0.2, 0.3,
        ],
    );
    let y = Tensor::matrix(
        6,
        2,
        vec![1.0, 0.0, 0.3, 0.5, 1.4, -0.2, 0.2, 0.9, 0.1, -0.8, 0.8, 0.2],
    );
    close(affine_r2(&x, &y).unwrap(), 0.967_479_491_513_879_9, 1e-12);
}

#[test]
fn probe_matches_scipy_bfgs() {
    // Mean cross-entropy plus ½·l2·‖W‖² (intercept unpenalized) on
    // standardized features, minimized by scipy.optimize BFGS with gtol 1e-12.
    let x = Tensor::matrix(
        10,
        2,
        vec![
            0.2, 1.0, 1.5, -0.3, -0.7, 0.4, 0.9, 0.8, -1.2, -1.1, 0.3, -0.9, 1.1, 0.1, -0.4, 1.3,
            0.0, 0.0, -0.9, 0.6,
        ],
    );
    let y = [0, 1, 2, 0, 2, 1, 1, 0, 2, 2];
    let cfg = ProbeConfig {
        l2: 0.1,
        tolerance: 1e-11,
        ..ProbeConfig::default()
    };
    let probe = Probe::fit(&x, &y, 3, &cfg).unwrap();
    assert!(probe.converged);
    let probs = probe.probabilities(&Tensor::matrix(2, 2, vec![0.5, 0.5, -1.0, 0.2]));
    let expected = [
        0.466_547_301_698_984_9,
        0.287_158_075_139_878_57,
        0.246_294_623_161_136_43,
        0.103_671_955_305_636_18,
        0.049_758_722_070_279_7,
        0.846_569_322_624_084_1,
    ];
    for (p, e) in probs.data().iter().zip(expected) {
        close(*p, e, 1e-8);
    }
}
