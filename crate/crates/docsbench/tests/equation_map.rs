use pidssl_docsbench::{EQUATION_MAP, MAPPED_OPERATIONS};

#[test]
fn every_operation_has_a_map_entry() {
    let missing: Vec<&str> = MAPPED_OPERATIONS
        .iter()
        .copied()
        .filter(|op| !EQUATION_MAP.contains(&format!("`{op}`")))
        .collect();
    assert!(missing.is_empty(), "equation map lacks {missing:?}");
}

#[test]
fn every_mapped_path_names_real_code() {
    // Referencing each item makes a renamed or removed function a compile error.
    use pidssl::{balance, evalharness, oracle, rlvm, rngs, sampler, scmgen, ssl};
    let _ = (
        |scm: &scmgen::Scm, env: &scmgen::Environment| {
            scm.gen_pair(0, env, &mut rngs::stream(0, "map", 0))
        },
        scmgen::Scm::gen_colored_dataset,
        scmgen::Scm::gen_pid_reference,
        scmgen::gen_discrete_toy,
        rlvm::Rlvm::elbo,
        rlvm::kl_term,
        rlvm::ortho_penalty,
        rlvm::prior_mean_from,
        rlvm::prior_log_density_coord,
        rlvm::train_rlvm,
        rlvm::Rlvm::posterior_draws,
    );
    let _ = (
        balance::propensity,
        balance::js_divergence,
        sampler::score_matrix,
        sampler::build_pool,
        |pool: &mut sampler::MatchPool| {
            sampler::sample_batch(pool, 1, &mut rngs::stream(0, "map", 0), Default::default())
        },
        sampler::plan_epochs,
        ssl::info_nce_loss,
        ssl::recon_loss,
        ssl::train_ssl,
        evalharness::linear_probe,
        evalharness::ood_comparison,
        evalharness::affine_r2,
        evalharness::identifiability_report,
    );
    let _ = (
        oracle::pid_project,
        oracle::env_risk,
        oracle::minimax_table,
        oracle::decomposition,
        oracle::stratify,
        oracle::TwoFactor::s_coefficient,
        oracle::monte_carlo_logistic,
        |lo: f64, hi: f64| oracle::kl_quadrature_log(|x| x, |x| x, lo, hi, 2),
        oracle::prior_moments,
        oracle::js_bruteforce,
        oracle::elbo_gradient_check,
        oracle::batch_pid_check,
        oracle::mutual_information,
    );
    assert_eq!(MAPPED_OPERATIONS.len(), 11 + 13 + 13);
}
