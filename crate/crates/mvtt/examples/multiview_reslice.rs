//! Demonstrate the three-view reslicing used by the model: a volume is cut
//! into axial, sagittal and coronal stacks and each view reassembles the
//! original volume bitwise.
//!
//! Run with: cargo run --release --example multiview_reslice

use mvtt::phantom::{generate_phantom, reslice, PhantomSpec};

fn main() -> mvtt::Result<()> {
    let mut spec = PhantomSpec::desk_scale(1);
    spec.dims = (6, 10, 14);
    spec.center_mm = (6.0, 5.0, 7.0);
    spec.semi_axes_mm = (3.0, 3.0, 3.0);
    let phantom = generate_phantom(&spec)?;
    let v = &phantom.intensity;

    let views = reslice(v);
    println!("volume dims (Z, Y, X)    : {:?}", v.dims);
    println!("axial slices (Y x X)     : {}", views.axial.len());
    println!("sagittal slices (Y x Z)  : {}", views.sagittal.len());
    println!("coronal slices (X x Z)   : {}", views.coronal.len());

    for (name, back) in [
        ("axial", views.reassemble_from_axial()),
        ("sagittal", views.reassemble_from_sagittal()),
        ("coronal", views.reassemble_from_coronal()),
    ] {
        let identical = back == v.values();
        println!("{name:8} round trip bitwise identical: {identical}");
        assert!(identical);
    }
    Ok(())
}
