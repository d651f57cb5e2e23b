use valueflow::losses::{critic_objective, CriticOptions, TermWeights};
use valueflow::verify::{
    field_gradient_check, loss_term_gradient_check, mlp_gradient_check, particle_gradient_check, policy_gradient_check,
    random_critic_batch, scalar_critic_gradient_check, tail_loss_input_check, tiny_flow_net, GradStats, GRAD_TOL,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn assert_grad(name: &str, s: GradStats) {
    assert!(s.checked > 0, "{name}: nothing checked");
    assert!(s.passed(), "{name}: max rel {:.3e}, {} checked, {} skipped", s.max_rel, s.checked, s.skipped);
    assert!(s.max_rel < GRAD_TOL);
}

#[test]
fn network_gradients_match_finite_differences() {
    assert_grad("mlp", mlp_gradient_check(11, 100).unwrap());
    assert_grad("field", field_gradient_check(12, 100).unwrap());
    assert_grad("particles", particle_gradient_check(13, 100).unwrap());
    assert_grad("policy", policy_gradient_check(14, 100).unwrap());
    assert_grad("scalar critic", scalar_critic_gradient_check(15, 100).unwrap());
}

#[test]
fn every_loss_term_matches_finite_differences() {
    for term in ["udcfm", "bcfm", "cons", "risk", "shape"] {
        assert_grad(term, loss_term_gradient_check(term, 1, 21, 100).unwrap());
    }
    for term in ["risk", "shape"] {
        assert_grad(&format!("{term} solved"), loss_term_gradient_check(term, 4, 22, 100).unwrap());
    }
    let (risk, shape) = tail_loss_input_check(23, 100).unwrap();
    assert_grad("risk input", risk);
    assert_grad("shape input", shape);
}

#[test]
fn anchor_is_gradient_blocked() {
    // Gradients with the self-computed anchor must equal gradients with the
    // anchor pinned to the same value as a constant.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = tiny_flow_net(&mut rng, false).unwrap();
    let (batch, tail) = random_critic_batch(&mut rng, 6, false);
    let opts = CriticOptions {
        tail,
        risk_steps: 1,
        skip_unused_tail: false,
    };
    let w = TermWeights::only("bcfm").unwrap();
    let (_, free) = critic_objective(&net, &batch, &opts, &w, true).unwrap();

    let pinned: Vec<_> = batch
        .iter()
        .map(|s| {
            let h = net.encode(&s.obs);
            let d = valueflow::flow::sample_distribution_from_noise(&net, &h, &s.risk_noise, 1).unwrap();
            valueflow::losses::CriticSample {
                anchor: Some(d.mean()),
                ..s.clone()
            }
        })
        .collect();
    let (_, fixed) = critic_objective(&net, &pinned, &opts, &w, true).unwrap();
    let (a, b) = (free.unwrap(), fixed.unwrap());
    let mut diff = a.clone();
    diff.add_scaled(&b, -1.0);
    assert!(diff.max_abs() <= 1e-12 * (1.0 + b.max_abs()), "max diff {}", diff.max_abs());
}
