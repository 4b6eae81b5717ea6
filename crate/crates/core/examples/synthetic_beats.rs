//! Generate labelled beats, split them and round-trip the binary format.

use exitnet::beatset::{generate_synthetic, split, AamiClass, BeatSet, SplitRatios};

fn main() -> exitnet::Result<()> {
    let set = BeatSet::new(generate_synthetic(40, 7, 0.05)?).ingested();
    println!("{} beats, z-scored: {}", set.len(), set.normalized);

    for class in 0..5 {
        let class = AamiClass::from_index(class).unwrap();
        let n = set.beats.iter().filter(|b| b.label == class).count();
        println!("  {:>3} {n}", class.name());
    }

    let parts = split(&set.beats, SplitRatios::DEFAULT, 7)?;
    println!(
        "split: train {} / validation {} / test {}",
        parts.train.len(),
        parts.validation.len(),
        parts.test.len()
    );

    let bytes = set.encode();
    let back = BeatSet::decode(&bytes)?;
    assert_eq!(back, set);
    println!("encoded {} bytes, decoded identically", bytes.len());

    let mut csv = Vec::new();
    set.write_csv(&mut csv)?;
    let first = String::from_utf8_lossy(&csv).lines().nth(1).unwrap_or("").chars().take(72).collect::<String>();
    println!("csv row: {first}...");
    Ok(())
}
