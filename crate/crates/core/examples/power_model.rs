//! Edge-node current under gated and continuous transmission, from measured
//! currents and from the duty-cycle model fitted to them.

use exitnet::deploy_sim::{
    average_current, calibrate, reference_currents, savings_report, PowerProfile, TxMode, REFERENCE_OURS_BROADCAST,
    REFERENCE_THRESHOLDS,
};

fn main() -> exitnet::Result<()> {
    let profile = PowerProfile::default();
    let measured = savings_report(&REFERENCE_THRESHOLDS, &reference_currents(&profile), &profile)?;
    for m in &measured.modes {
        println!(
            "{:<9} mean {:.3} mA vs {:.2} mA continuous: {:.1}% saved",
            m.mode.name(),
            m.mean_ours,
            m.continuous,
            100.0 * m.savings
        );
    }
    println!("pooled: {:.1}%", 100.0 * measured.pooled_savings);

    println!("forward fraction -> current (mA)");
    for f in [0.0, 0.25, 0.5, 0.75, 1.0] {
        println!(
            "  {f:.2}  broadcast {:.4}  connected {:.4}",
            average_current(&profile, f, TxMode::Broadcast)?,
            average_current(&profile, f, TxMode::Connected)?
        );
    }

    // Edge exit rates of a trained single-exit cascade at t = 0.5..0.9.
    let exit_rates = [0.99, 0.97, 0.93, 0.87, 0.80];
    let fit = calibrate(&profile, TxMode::Broadcast, &exit_rates, &REFERENCE_OURS_BROADCAST)?;
    println!(
        "fitted fraction = {:.3} + {:.3} * (1 - exit rate), worst error {:.1}%",
        fit.mapping.offset,
        fit.mapping.gain,
        100.0 * fit.max_relative_error
    );
    for ((t, m), r) in REFERENCE_THRESHOLDS.iter().zip(&fit.modeled).zip(&fit.target) {
        println!("  t={t:.1}  modeled {m:.3}  measured {r:.3}");
    }
    Ok(())
}
