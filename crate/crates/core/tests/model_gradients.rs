use std::time::Instant;

use viewshift_core::model::fixtures::{active_params, model_gradcheck, random_instance, tiny_config};
use viewshift_core::model::Variant;

#[test]
fn fm_loss_gradient_matches_finite_differences_for_every_variant() {
    for (i, v) in Variant::ALL.into_iter().enumerate() {
        let start = Instant::now();
        let cfg = tiny_config(v, 16, 2, 2, 5 + i as u64);
        let params = active_params(&cfg, 100 + i as u64).unwrap();
        let inst = random_instance::<f64>(&cfg, 200 + i as u64);
        let r = model_gradcheck(&params, &inst, 1e-5, 1e-4).unwrap();
        let worst = r.rel_err.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        println!(
            "{v}: {} weights, max rel err {:.2e} (analytic {:.3e}, numeric {:.3e}) in {:.1?}",
            r.analytic.len(), r.max_rel_err, r.analytic[worst], r.numeric[worst], start.elapsed()
        );
        assert!(r.passed, "{v}: max relative error {:.3e}", r.max_rel_err);
    }
}
