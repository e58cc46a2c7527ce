//! Closed-form step costs against a pass-by-pass simulation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use specsim_core::cost_model::{
    draft_time, forward_time, quadratic_coeffs, spec_step_time, verify_time, BatchProfile,
    ModelPair, PerformanceCoefficients,
};

fn random_coeffs(rng: &mut ChaCha8Rng) -> PerformanceCoefficients {
    PerformanceCoefficients::new(
        rng.random_range(0.0..1e-3),
        rng.random_range(0.0..0.5),
        rng.random_range(0.0..20.0),
    )
    .unwrap()
}

/// Walk every pass explicitly, tracking each request's context as drafts grow.
fn simulated_step(pair: &ModelPair, contexts: &[usize], pending: &[usize], passes: usize) -> f64 {
    let mut total = 0.0;
    let mut ctx: Vec<usize> = contexts.to_vec();
    for _ in 0..passes {
        total += forward_time(
            &pair.draft,
            ctx.iter().sum::<usize>() as f64,
            ctx.len() as f64,
        );
        ctx.iter_mut().for_each(|c| *c += 1);
    }
    // verification: token i of request r attends to ctx_r + i earlier tokens
    let (mut nc, mut nb) = (0usize, 0usize);
    for (&c, &p) in contexts.iter().zip(pending) {
        for i in 0..=p {
            nc += c + i;
            nb += 1;
        }
    }
    total + forward_time(&pair.target, nc as f64, nb as f64)
}

#[test]
fn closed_forms_match_pass_by_pass_simulation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let pair = ModelPair {
            draft: random_coeffs(&mut rng),
            target: random_coeffs(&mut rng),
        };
        let bs = rng.random_range(1..=64);
        let contexts: Vec<usize> = (0..bs).map(|_| rng.random_range(1..=4096)).collect();
        let sl = rng.random_range(0..=16);
        let profile = BatchProfile::with_contexts(contexts.clone()).unwrap();

        let expected = simulated_step(&pair, &contexts, &vec![sl; bs], sl);
        let got = spec_step_time(&pair, &profile, sl);
        assert!(
            (got - expected).abs() <= 1e-9 * expected.max(1.0),
            "{got} vs {expected}"
        );

        // per-token quadratic times batch size is the same step time
        let quad = quadratic_coeffs(&pair, profile.avg_context(), bs);
        let via_quad = quad.eval(sl as f64) * bs as f64;
        assert!(
            (via_quad - expected).abs() <= 1e-9 * expected.max(1.0),
            "{via_quad} vs {expected}"
        );

        // ragged pending lengths
        let pending: Vec<usize> = (0..bs).map(|_| rng.random_range(0..=sl)).collect();
        let ragged = profile.with_pending(pending.clone()).unwrap();
        let expected = simulated_step(&pair, &contexts, &pending, sl);
        let got = draft_time(&pair.draft, &profile, sl) + verify_time(&pair.target, &ragged);
        assert!((got - expected).abs() <= 1e-9 * expected.max(1.0));
    }
}
