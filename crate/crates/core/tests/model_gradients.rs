use moelab::model::{Mode, Model, ModelConfig, MoeVariant, TokenBatch};
use moelab::train::grad_check_model;

fn batch() -> TokenBatch {
    TokenBatch::new(vec![1, 5, 2, 7, 3, 11, 0, 12, 4, 4, 9, 6], 2, 6).unwrap()
}

#[test]
fn every_variant_passes_full_grad_check() {
    for v in MoeVariant::ALL {
        for mode in [Mode::Train, Mode::Eval] {
            let model = Model::<f64>::new(&ModelConfig::toy(v)).unwrap();
            let r = grad_check_model(&model, &batch(), 0.01, mode, 1e-5, 1e-4, None).unwrap();
            assert!(r.pass, "{v} {mode:?}: {r} at {}", model.params.name(model.params.locate(r.worst).unwrap().0));
        }
    }
}
