//! Converts a headerless band-interleaved-by-pixel array of 16-bit integers
//! into the canonical float32 BSQ cube, then reads it back.
//!
//! ```text
//! cargo run --example envi_convert
//! ```

use hsi_multitask::data::{read_cube, Interleave};
use hsi_multitask::pipeline::{convert_raw, data_type_code, header_path, RasterKind, RawLayout};

fn main() -> hsi_multitask::Result<()> {
    let dir = std::env::temp_dir().join("hsi-multitask-envi-convert");
    std::fs::create_dir_all(&dir).map_err(|e| hsi_multitask::Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let (h, w, c) = (4, 6, 5);
    let input = dir.join("scene.bip");
    let bytes: Vec<u8> = (0..h * w * c)
        .flat_map(|i| (i as i16 * 3 - 40).to_le_bytes())
        .collect();
    std::fs::write(&input, bytes).map_err(|e| hsi_multitask::Error::Io {
        path: input.clone(),
        source: e,
    })?;

    let layout = RawLayout {
        height: h,
        width: w,
        bands: c,
        data_type: data_type_code("i16")?,
        interleave: Interleave::Bip,
        big_endian: false,
    };
    let output = dir.join("scene.raw");
    convert_raw(&input, &layout, RasterKind::Cube, &output)?;
    let header = std::fs::read_to_string(header_path(&output)).unwrap_or_default();
    println!("{}", header.trim_end());

    let cube = read_cube(&output, header_path(&output))?;
    println!("pixel (2, 3): {:?}", cube.pixel(2, 3));
    Ok(())
}
