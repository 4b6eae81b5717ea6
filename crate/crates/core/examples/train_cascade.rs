//! Train a backbone with one exit after block 2 and gate it at t = 0.8.

use exitnet::beatset::{generate_synthetic, split, SplitRatios};
use exitnet::cascade::{Cascade, GateConfig};
use exitnet::exit_graph::{attach_exits, ExitPlacement, DEFAULT_BOTTLENECK};
use exitnet::nn::{default_backbone, ParamStore};
use exitnet::trainer::{evaluate_heads, train, TrainConfig};

fn main() -> exitnet::Result<()> {
    let beats = generate_synthetic(140, 0, 0.05)?;
    let parts = split(&beats, SplitRatios::DEFAULT, 0)?;

    let bb = default_backbone();
    let params = ParamStore::init(&bb, 0);
    let placement = ExitPlacement::new(vec![2], bb.num_conv_layers())?;
    let model = attach_exits(&bb, &params, &placement, DEFAULT_BOTTLENECK, 0)?;

    let cfg = TrainConfig::default();
    let outcome = train(&model, &parts.train, &parts.validation, &cfg)?;
    for r in &outcome.history {
        println!("epoch {:>2}  loss {:.4}  train acc {:?}", r.epoch, r.loss, r.train_accuracy);
    }
    println!("selected epoch {}", outcome.best_epoch);

    let heads = evaluate_heads(&outcome.model, &parts.test)?;
    println!("test accuracy per head: {:?}", heads.accuracy);

    let cascade = Cascade::from_model(&outcome.model)?;
    let batch = cascade.classify_batch(&parts.test, &GateConfig::uniform(0.8, 1))?;
    let correct = batch.decisions.iter().filter(|d| d.correct()).count();
    let flops: u64 = batch.decisions.iter().map(|d| d.flops).sum();
    println!(
        "t=0.8: exit rates {:?}, accuracy {:.4}, efficiency {:.4}",
        batch.exit_rates(),
        correct as f64 / batch.decisions.len() as f64,
        flops as f64 / batch.decisions.len() as f64 / cascade.baseline_flops() as f64
    );
    Ok(())
}
