use stas_core::model::{ForwardOpts, Model, ModelConfig};
use std::time::Instant;

fn main() {
    let cfg = ModelConfig::desk_default();
    let mut m = Model::<f32>::new(cfg.clone()).unwrap();
    let img: Vec<f32> = (0..3 * 32 * 32).map(|i| ((i * 2654435761usize) % 1000) as f32 / 1000.0).collect();
    // warm
    let o = m.forward(&img, &ForwardOpts::default()).unwrap();
    println!("avg_tokens {:.3} macs {} acs {}", o.avg_tokens, o.counts.total_macs(), o.counts.total_acs());
    let t0 = Instant::now();
    for _ in 0..10 {
        let _ = m.forward(&img, &ForwardOpts::default()).unwrap();
    }
    println!("no-grad forward: {:?}/iter", t0.elapsed() / 10);
    let t0 = Instant::now();
    for _ in 0..5 {
        let _ = m.forward(&img, &ForwardOpts { grad: true, ..Default::default() }).unwrap();
    }
    println!("grad forward: {:?}/iter", t0.elapsed() / 5);

    let small = ModelConfig::small_train();
    let mut ms = Model::<f32>::new(small).unwrap();
    let o = ms.forward(&img, &ForwardOpts { grad: true, ..Default::default() }).unwrap();
    let t0 = Instant::now();
    for _ in 0..20 {
        let p = ms.forward(&img, &ForwardOpts { grad: true, ..Default::default() }).unwrap();
        let loss = p.tape.cross_entropy(&p.logits_mean_field, &[1]).unwrap();
        let _ = p.tape.backward(&loss).unwrap();
    }
    println!("small grad fwd+bwd: {:?}/iter (avg_tokens {:.3})", t0.elapsed() / 20, o.avg_tokens);
}
