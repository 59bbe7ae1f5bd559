mod common;

use common::reference::{self, Masks};
use common::random_batch;
use samprune::model::{ModelConfig, TransformerLM};

fn fd_model(seed: u64) -> TransformerLM {
    TransformerLM::new(ModelConfig::tiny(32, 16, 2, 2, 32).with_max_seq_len(8).with_seed(seed)).unwrap()
}

/// Central-difference gradient check over every scalar parameter.
#[test]
fn analytic_gradients_match_finite_differences() {
    let model = fd_model(11);
    let batch = random_batch(2, 6, 32, 5);
    let analytic = model.gradients(&batch, false).unwrap().batch;
    let h = 1e-4;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let names: Vec<_> = model.weights.tensors().iter().map(|(id, t)| (*id, t.len())).collect();
    let analytic_t = analytic.tensors();
    for (ti, (id, len)) in names.iter().enumerate() {
        for i in 0..*len {
            let orig = model.weights.tensors()[ti].1[i];
            probe.weights.tensors_mut()[ti].1[i] = orig + h;
            let up = probe.loss(&batch).unwrap();
            probe.weights.tensors_mut()[ti].1[i] = orig - h;
            let down = probe.loss(&batch).unwrap();
            probe.weights.tensors_mut()[ti].1[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic_t[ti].1[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "{id}[{i}]: analytic {a:e} vs numeric {numeric:e} (rel {rel:e})");
            worst = worst.max(rel);
            checked += 1;
        }
    }
    assert_eq!(checked, model.count_params(false));
    eprintln!("checked {checked} parameters, worst relative error {worst:e}");
}

#[test]
fn loss_matches_reference_forward() {
    let model = TransformerLM::new(ModelConfig::tiny(32, 16, 2, 2, 32).with_seed(4)).unwrap();
    let tokens: Vec<u32> = vec![3, 17, 0, 31, 8, 8, 22, 5];
    let fast = model.loss(std::slice::from_ref(&tokens)).unwrap();
    let slow = reference::loss(&model, &tokens, &Masks::none(&model));
    assert!((fast - slow).abs() <= 1e-10 * slow.abs(), "{fast} vs {slow}");
}

#[test]
fn loss_is_permutation_invariant() {
    let model = fd_model(2);
    let mut batch = random_batch(5, 7, 32, 1);
    let a = model.loss(&batch).unwrap();
    batch.reverse();
    let b = model.loss(&batch).unwrap();
    assert!((a - b).abs() <= 1e-13 * a);
}
