//! Train briefly on one tiny phantom, then run inference on it and report
//! the resulting Dice overlap and per-case latency.
//!
//! Run with: cargo run --release --example infer_volume

use mvtt::metrics::{confusion, metrics};
use mvtt::net::{MvttConfig, MvttModel};
use mvtt::phantom::{generate_phantom, normalize, PhantomSpec};
use mvtt::train::{train, TrainConfig, TrainVolume};

fn main() -> mvtt::Result<()> {
    let mut spec = PhantomSpec::desk_scale(3);
    spec.dims = (4, 12, 12);
    spec.center_mm = (4.0, 6.0, 6.0);
    spec.semi_axes_mm = (3.0, 4.0, 4.0);
    spec.pv_stub_count = 0;
    let phantom = generate_phantom(&spec)?;
    let case = TrainVolume {
        id: "case_000".into(),
        intensity: normalize(&phantom.intensity)?,
        anatomy: phantom.anatomy_gt.clone(),
        scar: phantom.scar_gt.clone(),
    };

    let model = MvttModel::new(MvttConfig::desk_scale(2), case.intensity.dims, 0)?;
    let config = TrainConfig {
        max_epochs: 250,
        initial_lr: 0.003,
        lr_decay_rate: 1.0,
        ..TrainConfig::default()
    };
    let mut result = train(model, &[case.clone()], &[], &config, None)?;

    let t0 = std::time::Instant::now();
    let seg = result.model.infer(&case.intensity)?;
    let seconds = t0.elapsed().as_secs_f64();

    let anatomy = metrics(&confusion(&seg.anatomy_mask, &phantom.anatomy_gt)?);
    let scar = metrics(&confusion(&seg.scar_mask, &phantom.scar_gt)?);
    println!("inference took {seconds:.3} s for dims {:?}", case.intensity.dims);
    println!("anatomy dice: {:?}", anatomy.di);
    println!("scar dice   : {:?}", scar.di);
    Ok(())
}
