//! Generate a phantom and export its axial slices as 8-bit PGM images for
//! quick visual inspection.
//!
//! Run with: cargo run --release --example export_slices

use mvtt::cli::export_pgm_slices;
use mvtt::phantom::{generate_phantom, PhantomSpec};

fn main() -> mvtt::Result<()> {
    let phantom = generate_phantom(&PhantomSpec::desk_scale(11))?;
    let dir = std::path::Path::new("slices_out");
    let files = export_pgm_slices(&phantom.intensity, dir)?;
    println!("wrote {} slices to {}:", files.len(), dir.display());
    for f in files.iter().take(3) {
        println!("  {}", f.display());
    }
    if files.len() > 3 {
        println!("  ...");
    }
    Ok(())
}
