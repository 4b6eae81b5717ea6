//! Train one single-exit model per placement, tabulate their sweeps and let
//! the GA pick a placement and threshold. The exhaustive optimum is printed
//! alongside.

use exitnet::beatset::{generate_synthetic, split, SplitRatios};
use exitnet::cascade::Cascade;
use exitnet::evaluator::{default_thresholds, sweep};
use exitnet::exit_graph::{attach_exits, enumerate_placements, DEFAULT_BOTTLENECK};
use exitnet::ga::{exhaustive, optimize, GaConfig, MetricsTable, ObjectiveWeights};
use exitnet::nn::{default_backbone, ParamStore};
use exitnet::trainer::{train, TrainConfig};

fn main() -> exitnet::Result<()> {
    let beats = generate_synthetic(40, 11, 0.05)?;
    let parts = split(&beats, SplitRatios::DEFAULT, 11)?;
    let bb = default_backbone();
    let params = ParamStore::init(&bb, 11);
    let cfg = TrainConfig { epochs: 6, seed: 11, ..TrainConfig::default() };

    let mut reports = Vec::new();
    for placement in enumerate_placements(bb.num_conv_layers(), 1)? {
        let model = attach_exits(&bb, &params, &placement, DEFAULT_BOTTLENECK, 11)?;
        let model = train(&model, &parts.train, &parts.validation, &cfg)?.model;
        let cascade = Cascade::from_model(&model)?;
        let report = sweep(&cascade, &parts.test, &default_thresholds(), placement.boundaries())?.rounded();
        println!("placement {}: {} points", placement.label(), report.points.len());
        reports.push(report);
    }

    let table = MetricsTable::from_sweeps(&reports)?;
    let universe = table.universe();
    let weights = ObjectiveWeights::default();
    let ga = optimize(&universe, &table, weights, &GaConfig { seed: 11, ..GaConfig::default() })?;
    let best = exhaustive(&universe, &table, weights)?;

    for g in ga.log.iter().step_by(10) {
        println!("gen {:>2}: best {:.4} mean {:.4}", g.generation, g.best, g.mean);
    }
    let show = |c: exitnet::ga::Chromosome| (table.placements[c.placement].clone(), table.thresholds[c.threshold]);
    println!("GA:         {:?} OF {:.6}", show(ga.best.chromosome), ga.best.score.of_value);
    println!("exhaustive: {:?} OF {:.6}", show(best.chromosome), best.score.of_value);
    Ok(())
}
