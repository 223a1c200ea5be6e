//! The band alignments that let scenes from different sensors share one
//! first convolution, applied to labelled toy cubes.
//!
//! ```text
//! cargo run --example band_alignment
//! ```

use hsi_multitask::data::{align_bands, AlignmentSpec, HyperCube};

fn main() -> hsi_multitask::Result<()> {
    let cases = [
        ("Pavia Center onto Pavia University", 102, "repeat_last(1)"),
        ("Indian Pines onto Pavia University", 200, "crop(11,113)"),
        ("Indian Pines onto Salinas, last 160 bands", 200, "crop(41,200)"),
        ("Pavia University onto Salinas", 103, "repeat_last(57)"),
        ("Pavia Center onto Salinas", 102, "repeat_last(58)"),
        ("second task inverted", 103, "invert"),
    ];
    for (what, bands, steps) in cases {
        // Each value records the source band it came from.
        let data = (0..bands).map(|b| b as f32 + 1.0).collect();
        let cube = HyperCube::new(1, 1, bands, data)?;
        let spec: AlignmentSpec = steps.parse()?;
        let out = align_bands(&cube, &spec)?;
        let px = out.pixel(0, 0);
        println!(
            "{what}: {bands} -> {} bands via {spec}; first {:?}, last {:?}",
            out.bands(),
            &px[..3],
            &px[px.len() - 3..]
        );
    }
    Ok(())
}
