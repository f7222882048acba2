//! Writing and reading feature bundles, and what the loader says about
//! damaged files.

use calip::store::{decode_bundle, encode_bundle};
use calip::{load_bundle, save_bundle, synth};

fn main() -> calip::Result<()> {
    let bundle = synth::random_bundle(0, 3, 8, 10, 2, 2);
    let path = std::env::temp_dir().join("calip-example-bundle.calf");
    save_bundle(&bundle, &path)?;
    let back = load_bundle(&path)?;
    assert_eq!(back, bundle);

    let d = back.dims();
    println!(
        "{}: {} classes, {} channels, {}x{} grid, {} images, checksum {:016x}",
        path.display(),
        d.classes,
        d.channels,
        d.h,
        d.w,
        d.images,
        back.checksum()
    );

    let bytes = encode_bundle(&bundle)?;
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let mut nan = bytes.clone();
    let last = nan.len() - 4;
    nan[last..].copy_from_slice(&f32::NAN.to_le_bytes());
    for (what, data) in [
        ("bad magic", bad_magic),
        ("truncated", bytes[..bytes.len() / 2].to_vec()),
        ("NaN pixel", nan),
    ] {
        println!("{what:>10}: {}", decode_bundle(&data).unwrap_err());
    }
    Ok(())
}
