//! Writes a small synthetic IDX image/label pair, reads it back as a dataset,
//! and shows the positional error for a truncated file.
//!
//! cargo run --release --example idx_ingest -- [images.idx labels.idx]

use std::path::PathBuf;

use mnemosyne::harness::{encode_idx, ingest_idx, parse_idx, IDX_IMAGES, IDX_LABELS};

fn main() -> mnemosyne::Result<()> {
    let args: Vec<PathBuf> = std::env::args().skip(1).map(PathBuf::from).collect();
    let (images, labels) = if let [i, l] = &args[..] {
        (i.clone(), l.clone())
    } else {
        let dir = std::env::temp_dir().join("mnemo-idx-example");
        std::fs::create_dir_all(&dir).map_err(|e| mnemosyne::Error::io(&dir, e))?;
        let n = 20;
        let pixels: Vec<u8> = (0..n * 28 * 28).map(|i| ((i * 31) % 256) as u8).collect();
        let classes: Vec<u8> = (0..n as u8).map(|i| i % 10).collect();
        let (i, l) = (dir.join("images.idx"), dir.join("labels.idx"));
        std::fs::write(&i, encode_idx(IDX_IMAGES, &[n, 28, 28], &pixels))
            .map_err(|e| mnemosyne::Error::io(&i, e))?;
        std::fs::write(&l, encode_idx(IDX_LABELS, &[n], &classes))
            .map_err(|e| mnemosyne::Error::io(&l, e))?;
        (i, l)
    };
    let ds = ingest_idx(&images, &labels, 0)?;
    let full = ds.full();
    println!(
        "{} examples of width {}, {} classes",
        ds.len(),
        ds.dim(),
        ds.classes
    );
    println!("first labels {:?}", &full.labels[..ds.len().min(10)]);
    let max = full.inputs.data().iter().cloned().fold(0.0, f64::max);
    println!("pixel range [0, {max}]");

    let bytes = encode_idx(IDX_IMAGES, &[2, 2, 2], &[1, 2, 3]);
    if let Err(e) = parse_idx(&bytes, "broken.idx", IDX_IMAGES) {
        println!("truncated file: {e}");
    }
    Ok(())
}
