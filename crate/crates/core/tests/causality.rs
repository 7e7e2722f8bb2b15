use rand::Rng as _;
use synthdyn_core::model::{ModelConfig, TokenSequence, TransformerModel, PATCH_SIZE};
use synthdyn_core::rng;
use synthdyn_core::tensor::Real;

fn random_sequence(r: &mut rng::Rng, cfg: &ModelConfig, len: usize) -> TokenSequence {
    let mut s = TokenSequence::zeros(cfg.d_x, cfg.d_u, len);
    for t in 0..len {
        let x: Vec<f64> = (0..cfg.d_x).map(|_| r.random_range(-2.0..2.0)).collect();
        let u: Vec<f64> = (0..cfg.d_u).map(|_| r.random_range(-1.0..1.0)).collect();
        if r.random_bool(0.2) {
            s.hide_state(t);
        } else {
            s.set_state(t, &x);
        }
        s.set_action(t, &u);
    }
    s
}

fn trials<T: Real>(seed: u64) {
    let cfg = ModelConfig { context_len: 16, pred_len: 16, seed, ..ModelConfig::desk(2, 1) };
    let model = TransformerModel::<T>::new(cfg.clone()).unwrap();
    let len = 32;
    let per_pos = PATCH_SIZE * cfg.d_x;
    let mut r = rng::substream(seed, 77, 0);
    for trial in 0..100 {
        let base = random_sequence(&mut r, &cfg, len);
        let j = r.random_range(0..len);
        let mut changed = base.clone();
        changed.set_state(j, &[r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)]);
        changed.set_action(j, &[r.random_range(-5.0..5.0)]);
        let out = model.forward_values(model.batch_tokens(&[base, changed]).unwrap()).unwrap();
        let (a, b) = out.data().split_at(len * per_pos);
        let before_a: Vec<u64> = a[..j * per_pos].iter().map(|v| v.as_f64().to_bits()).collect();
        let before_b: Vec<u64> = b[..j * per_pos].iter().map(|v| v.as_f64().to_bits()).collect();
        assert_eq!(before_a, before_b, "trial {trial}: perturbing {j} changed earlier outputs");
        assert_ne!(a[j * per_pos..], b[j * per_pos..], "trial {trial}: perturbation had no effect");
    }
}

#[test]
fn earlier_outputs_are_bit_identical_f32() {
    trials::<f32>(1);
}

#[test]
fn earlier_outputs_are_bit_identical_f64() {
    trials::<f64>(2);
}
