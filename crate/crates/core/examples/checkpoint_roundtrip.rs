//! Saves a checkpoint, restores it bit-exactly and shows that a flipped
//! byte is caught.

use anyhow::Result;
use perceiver_vl::checkpoint::{load_checkpoint, save_checkpoint};
use perceiver_vl::model::{ModelConfig, PerceiverVl};

fn main() -> Result<()> {
    let dir = tempdir()?;
    let path = dir.join("toy.ckpt");
    let cfg = ModelConfig::default();
    let (_, store) = PerceiverVl::init::<f32>(&cfg, 42)?;
    save_checkpoint(&path, &cfg, &store, 42, 0)?;

    let ckpt = load_checkpoint(&path)?;
    let (_, mut other) = PerceiverVl::init::<f32>(&ckpt.header.model, 7)?;
    ckpt.restore(&mut other)?;
    let exact = store.ids().all(|id| store.tensor(id).bit_eq(other.tensor(id)));
    println!("{} tensors, digest {}, bit-exact: {exact}", store.len(), &store.digest()[..16]);

    let mut bytes = std::fs::read(&path)?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    std::fs::write(&path, &bytes)?;
    match load_checkpoint(&path) {
        Err(e) => println!("corrupted file rejected: {e}"),
        Ok(_) => anyhow::bail!("corruption went unnoticed"),
    }
    Ok(())
}

fn tempdir() -> Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join(format!("pvl-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
