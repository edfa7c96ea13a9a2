use stas_core::data::{gen_synthetic, NormStats};
use stas_core::model::{Model, ModelConfig};
use stas_core::train::{evaluate, EvalOpts};
fn main() {
    let data = gen_synthetic(300, 33).unwrap();
    let norm = NormStats::from_dataset(&data);
    for seed in [42u64, 7, 99] {
        let mut cfg = ModelConfig::tiny();
        cfg.seed = seed;
        let model = Model::<f32>::new(cfg).unwrap();
        let e = evaluate(&model, &data, &norm, &EvalOpts::default()).unwrap();
        println!("seed {seed}: random-init acc {:.3} avg_tokens {:.3}", e.accuracy, e.avg_tokens);
    }
}
