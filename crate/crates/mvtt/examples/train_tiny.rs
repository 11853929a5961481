//! Overfit a down-scaled model on two tiny phantoms and watch the hybrid
//! loss fall. Runs in well under a minute in release mode.
//!
//! Run with: cargo run --release --example train_tiny

use mvtt::net::{MvttConfig, MvttModel};
use mvtt::phantom::{generate_phantom, normalize, PhantomSpec};
use mvtt::train::{train, TrainConfig, TrainVolume};

fn tiny_spec(seed: u64) -> PhantomSpec {
    let mut spec = PhantomSpec::desk_scale(seed);
    spec.dims = (4, 12, 12);
    spec.center_mm = (4.0, 6.0, 6.0);
    spec.semi_axes_mm = (3.0, 4.0, 4.0);
    spec.pv_stub_count = 0;
    spec.scar_patch_count = 2;
    spec
}

fn main() -> mvtt::Result<()> {
    let cases: Vec<TrainVolume> = (0..2)
        .map(|i| {
            let p = generate_phantom(&tiny_spec(i))?;
            Ok(TrainVolume {
                id: format!("case_{i:03}"),
                intensity: normalize(&p.intensity)?,
                anatomy: p.anatomy_gt,
                scar: p.scar_gt,
            })
        })
        .collect::<mvtt::Result<_>>()?;

    let model = MvttModel::new(MvttConfig::desk_scale(2), cases[0].intensity.dims, 0)?;
    let config = TrainConfig {
        max_epochs: 150,
        initial_lr: 0.003,
        lr_decay_rate: 1.0,
        ..TrainConfig::default()
    };

    let mut print_progress = |_: &mut MvttModel, log: &mvtt::train::EpochLog| {
        if log.epoch % 25 == 0 || log.epoch + 1 == 150 {
            println!(
                "epoch {:3}  lr {:.6}  train loss {:.4}",
                log.epoch, log.lr, log.train_loss
            );
        }
        false
    };
    let result = train(model, &cases, &[], &config, Some(&mut print_progress))?;

    let first = result.log.first().unwrap().train_loss;
    let last = result.log.last().unwrap().train_loss;
    println!("loss {first:.4} -> {last:.4} over {} epochs", result.log.len());
    Ok(())
}
