//! Cut a model with exits after blocks 2 and 4 into edge, fog and cloud
//! stages, write the stage files and check that the chained stages reproduce
//! the monolithic backbone bit for bit.

use exitnet::beatset::generate_synthetic;
use exitnet::cascade::{Cascade, GateConfig};
use exitnet::exit_graph::{
    attach_exits, check_memory_budget, load_partition, partition, write_partition, ExitPlacement, NodeRole,
    DEFAULT_BOTTLENECK, DEFAULT_EDGE_BUDGET_BYTES,
};
use exitnet::nn::{default_backbone, forward, ParamStore, Tensor};

fn main() -> exitnet::Result<()> {
    let bb = default_backbone();
    let params = ParamStore::init(&bb, 5);
    let placement = ExitPlacement::new(vec![2, 4], bb.num_conv_layers())?;
    let model = attach_exits(&bb, &params, &placement, DEFAULT_BOTTLENECK, 5)?;

    let plan = partition(&model, &[NodeRole::Edge, NodeRole::Fog, NodeRole::Cloud])?;
    for s in &plan.stages {
        println!(
            "{:<5} blocks {:?}  {:>6} bytes  {:>7} FLOPs  sends {:?} bytes",
            s.role.name(),
            s.conv_blocks,
            s.bytes,
            s.flops,
            s.exit.map(|b| model.branches()[b].payload_bytes())
        );
    }
    let memory = check_memory_budget(&plan, DEFAULT_EDGE_BUDGET_BYTES);
    println!("fits {} byte edge budget: {}", memory.budget_bytes, memory.pass);

    let dir = std::env::temp_dir().join("exitnet_edge_partition");
    let plan_path = write_partition(&dir, "demo", &model, &plan, serde_json::json!({ "example": "edge_partition" }))?;
    let (_, stages) = load_partition(&plan_path)?;
    let cascade = Cascade::new(stages)?;

    let beats = generate_synthetic(20, 5, 0.05)?;
    let same = beats.iter().all(|b| {
        let x = Tensor::from_samples(b.samples());
        let mono = forward(&bb, &params, &x, None).unwrap();
        let staged = cascade.pass_through_output(&x).unwrap();
        mono.data().iter().zip(staged.data()).all(|(a, b)| a.to_bits() == b.to_bits())
    });
    println!("pass-through identical on {} beats: {same}", beats.len());

    let batch = cascade.classify_batch(&beats, &GateConfig::uniform(0.3, 2))?;
    println!("exit counts at t=0.3 (untrained): {:?}", batch.exit_counts);
    println!("files in {}", dir.display());
    Ok(())
}
