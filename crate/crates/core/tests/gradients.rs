use bapgan_core::diagnostics::{gradient_check, tiny_config};
use bapgan_core::AblationRow;

#[test]
fn all_losses_match_central_differences() {
    let report = gradient_check(&tiny_config(), 3, 1e-5, 0.7).unwrap();
    assert!(report.checked > 4000, "{}", report.checked);
    assert!(report.max_error() < 1e-3, "{:?}", report.worst);
}

#[test]
fn separate_age_trunk_gradients_match() {
    let config = bapgan_core::ModelConfig {
        separate_age_trunk: true,
        ..tiny_config()
    };
    let report = gradient_check(&config, 5, 1e-5, -0.4).unwrap();
    assert!(report.max_error() < 1e-3, "{:?}", report.worst);
}

#[test]
fn ablation_rows_gradients_match() {
    for row in [AblationRow::Caae, AblationRow::Sa] {
        let mut config = tiny_config().with_row(row);
        // the check compares all four losses, so keep the age head
        config.use_dage = true;
        let report = gradient_check(&config, 11, 1e-5, 0.3).unwrap();
        assert!(report.max_error() < 1e-3, "{row:?}: {:?}", report.worst);
    }
}
