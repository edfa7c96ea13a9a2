use stas_core::data::{gen_synthetic, NormStats};
use stas_core::model::{HeadKind, Model, ModelConfig};
use stas_core::train::*;
use std::time::Instant;

fn main() {
    let train = gen_synthetic(2000, 100).unwrap();
    let test = gen_synthetic(500, 200).unwrap();
    let norm = NormStats::from_dataset(&train);
    let mcfg = ModelConfig::small_train();
    let mut model = Model::<f32>::new(mcfg.clone()).unwrap();
    let t0 = Instant::now();
    let pre = TrainConfig { epochs: 10, batch: 32, phase: Phase::Pretrain, log_every: 1000, ..Default::default() };
    train_phase(&mut model, &train, &norm, &pre, None, None, None).unwrap();
    let ev_pre = evaluate(&model, &test, &norm, &EvalOpts { head: HeadKind::Averaged, halting: false, ..Default::default() }).unwrap();
    println!("pretrain: test acc {:.3} ({:?})", ev_pre.accuracy, t0.elapsed());

    // halting-disabled baseline: continue pretraining for 10 more epochs
    let mut baseline = model.clone();
    let t1 = Instant::now();
    let pre2 = TrainConfig { epochs: 10, batch: 32, phase: Phase::Pretrain, log_every: 1000, seed: 8, ..Default::default() };
    train_phase(&mut baseline, &train, &norm, &pre2, None, None, None).unwrap();
    let ev_base = evaluate(&baseline, &test, &norm, &EvalOpts { head: HeadKind::Averaged, halting: false, ..Default::default() }).unwrap();
    println!("baseline(+10ep pretrain): test acc {:.3} ({:?})", ev_base.accuracy, t1.elapsed());

    // halting finetune
    let t2 = Instant::now();
    let fine = TrainConfig { epochs: 10, batch: 32, phase: Phase::HaltingFinetune, log_every: 1000, seed: 8, ..Default::default() };
    let out = train_phase(&mut model, &train, &norm, &fine, None, None, None).unwrap();
    let ev_fine = evaluate(&model, &test, &norm, &EvalOpts::default()).unwrap();
    println!("finetune: test acc {:.3} avg_tokens {:.3} energy {:.3}uJ ({:?}) [last step avg_tokens {:.3}]",
        ev_fine.accuracy, ev_fine.avg_tokens, ev_fine.energy_j * 1e6, t2.elapsed(),
        out.history.last().unwrap().avg_tokens);
    println!("criterion7: acc>=0.9 {} avg_tokens<=0.85 {} within2pts {}",
        ev_fine.accuracy >= 0.9, ev_fine.avg_tokens <= 0.85, ev_fine.accuracy >= ev_base.accuracy - 0.02);
}
