//! Sweep the confidence threshold of a small trained cascade and print the
//! accuracy / cost trade-off.

use exitnet::beatset::{generate_synthetic, split, SplitRatios};
use exitnet::cascade::Cascade;
use exitnet::evaluator::{parse_threshold_grid, sweep};
use exitnet::exit_graph::{attach_exits, ExitPlacement, DEFAULT_BOTTLENECK};
use exitnet::nn::{default_backbone, ParamStore};
use exitnet::trainer::{train, TrainConfig};

fn main() -> exitnet::Result<()> {
    let beats = generate_synthetic(100, 3, 0.05)?;
    let parts = split(&beats, SplitRatios::DEFAULT, 3)?;
    let bb = default_backbone();
    let placement = ExitPlacement::new(vec![2, 4], bb.num_conv_layers())?;
    let model = attach_exits(&bb, &ParamStore::init(&bb, 3), &placement, DEFAULT_BOTTLENECK, 3)?;
    let cfg = TrainConfig { epochs: 15, seed: 3, ..TrainConfig::default() };
    let model = train(&model, &parts.train, &parts.validation, &cfg)?.model;

    let cascade = Cascade::from_model(&model)?;
    let grid = parse_threshold_grid("0:1:0.1")?;
    let report = sweep(&cascade, &parts.test, &grid, placement.boundaries())?;
    println!(
        "baseline accuracy {:.4}, {} FLOPs per beat",
        report.baseline_accuracy, report.baseline_flops
    );
    println!("   t   acc    sens   exit rates        eff    savings");
    for p in &report.points {
        println!(
            "{:4.1}  {:.3}  {:.3}  {:<16}  {:.3}  {:.3}",
            p.threshold,
            p.system_accuracy,
            p.system_sensitivity,
            format!("{:.2?}", p.exit_rate),
            p.efficiency_rate,
            p.transmission_savings
        );
    }
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    println!("csv: {} lines", String::from_utf8_lossy(&csv).lines().count());
    Ok(())
}
