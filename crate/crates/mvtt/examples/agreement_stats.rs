//! Compute scar-burden agreement statistics (Pearson correlation and
//! Bland–Altman bias) between exact phantom burdens and burdens recomputed
//! from the stored label masks — a self-consistency check of the burden
//! pipeline.
//!
//! Run with: cargo run --release --example agreement_stats

use mvtt::metrics::{bland_altman, pearson, scar_burden, WALL_THICKNESS_MM};
use mvtt::phantom::{generate_phantom, PhantomSpec};

fn main() -> mvtt::Result<()> {
    let mut exact = Vec::new();
    let mut recomputed = Vec::new();
    for seed in 0..12u64 {
        let phantom = generate_phantom(&PhantomSpec::desk_scale(seed))?;
        let burden = scar_burden(&phantom.scar_gt, &phantom.anatomy_gt, WALL_THICKNESS_MM)?;
        exact.push(phantom.scar_fraction);
        recomputed.push(burden.percentage);
        println!(
            "seed {seed:2}: exact {:.3} %  recomputed {:.3} %",
            phantom.scar_fraction, burden.percentage
        );
    }
    let r = pearson(&exact, &recomputed)?;
    let ba = bland_altman(&exact, &recomputed)?;
    println!("pearson r = {r:.6}");
    println!(
        "bland-altman bias = {:.6} pp, limits of agreement [{:.6}, {:.6}] pp",
        ba.bias, ba.loa_low, ba.loa_high
    );
    Ok(())
}
