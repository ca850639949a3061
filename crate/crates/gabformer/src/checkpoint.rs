//! Model checkpoints.
//!
//! Container layout, all integers little-endian:
//!
//! ```text
//! magic "GFCK" | version u32 | config text (u64 length + UTF-8)
//! | seed u64 | record count u64
//! | repeated: name (u64 length + UTF-8) + tensor blob ("GFT1" format)
//! ```
//!
//! The config text is the canonical key=value form of [`GabformerConfig`];
//! loading rebuilds the model from it and then overwrites every parameter
//! by name, so a round trip is bitwise exact. Missing or unknown record
//! names are errors.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{GabformerConfig, GabformerModel};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

impl GabformerModel {
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut f)
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        write_str(w, &self.config.to_text())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.store.len() as u64).to_le_bytes())?;
        for (name, value) in self.store.iter() {
            write_str(w, name)?;
            value.write_to(w)?;
        }
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_checkpoint(&mut f)
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "checkpoint magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(format!(
                "bad checkpoint magic {:?}, expected {:?}",
                magic, CHECKPOINT_MAGIC
            )));
        }
        let mut vbuf = [0u8; 4];
        read_exact(r, &mut vbuf, "checkpoint version")?;
        let version = u32::from_le_bytes(vbuf);
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let config_text = read_str(r, "config text")?;
        let config = GabformerConfig::from_text(&config_text)?;
        let seed = read_u64(r, "seed")?;
        let count = read_u64(r, "record count")? as usize;

        let mut model = GabformerModel::build(config, seed)?;
        if count != model.store.len() {
            return Err(Error::format(format!(
                "checkpoint holds {count} records but the config implies {}",
                model.store.len()
            )));
        }
        let mut seen = vec![false; model.store.len()];
        for _ in 0..count {
            let name = read_str(r, "record name")?;
            let value = Tensor::read_from(r)?;
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| Error::format(format!("unknown checkpoint record `{name}`")))?;
            if model.store.value(id).shape() != value.shape() {
                return Err(Error::format(format!(
                    "record `{name}` has shape {:?}, expected {:?}",
                    value.shape(),
                    model.store.value(id).shape()
                )));
            }
            *model.store.value_mut(id) = value;
            seen[find_index(&model, &name)] = true;
        }
        if let Some(missing) = model
            .store
            .ids()
            .find(|id| !seen[id.0])
            .map(|id| model.store.name(id).to_string())
        {
            return Err(Error::format(format!(
                "checkpoint is missing parameter `{missing}`"
            )));
        }
        Ok(model)
    }
}

fn find_index(model: &GabformerModel, name: &str) -> usize {
    model.store.find(name).expect("checked by caller").0
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u64).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R, what: &str) -> Result<String> {
    let len = read_u64(r, what)? as usize;
    if len > 1 << 20 {
        return Err(Error::format(format!("unreasonable string length {len} for {what}")));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf, what)?;
    String::from_utf8(buf).map_err(|_| Error::format(format!("non-UTF8 {what}")))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(format!("truncated checkpoint while reading {what}")))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, what)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GabformerConfig;
    use crate::params::Forward;
    use crate::tensor::Tape;
    use rand::SeedableRng;

    fn toy_model() -> GabformerModel {
        let mut cfg = GabformerConfig::toy();
        cfg.final_conv_zero_init = false;
        GabformerModel::build(cfg, 99).unwrap()
    }

    #[test]
    fn round_trip_preserves_forward_bitwise() {
        let model = toy_model();
        let mut blob = Vec::new();
        model.write_checkpoint(&mut blob).unwrap();
        let restored = GabformerModel::read_checkpoint(&mut blob.as_slice()).unwrap();
        assert_eq!(restored.seed, model.seed);

        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(17);
        let img = Tensor::rand_uniform(&mut rng, vec![1, 3, 32, 32], 0.0, 1.0);
        let run = |m: &GabformerModel| {
            let mut tape = Tape::new();
            let mut fw = Forward::inference(&mut tape, &m.store);
            let x = fw.tape.constant(&img);
            let y = m.forward(&mut fw, x).unwrap();
            tape.value(y)
        };
        assert_eq!(run(&model), run(&restored));
    }

    #[test]
    fn truncated_checkpoint_is_an_error() {
        let model = toy_model();
        let mut blob = Vec::new();
        model.write_checkpoint(&mut blob).unwrap();
        blob.truncate(blob.len() / 2);
        let err = match GabformerModel::read_checkpoint(&mut blob.as_slice()) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("truncated checkpoint loaded"),
        };
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn renamed_record_reports_the_key() {
        let model = toy_model();
        let mut blob = Vec::new();
        model.write_checkpoint(&mut blob).unwrap();
        // Corrupt the first record name in place.
        let needle = b"input_conv.weight";
        let pos = blob
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        blob[pos..pos + 4].copy_from_slice(b"XXXX");
        let err = match GabformerModel::read_checkpoint(&mut blob.as_slice()) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("corrupted checkpoint loaded"),
        };
        assert!(err.contains("XXXXt_conv.weight"), "{err}");
    }

    #[test]
    fn toy_checkpoint_stays_small() {
        let model = toy_model();
        let mut blob = Vec::new();
        model.write_checkpoint(&mut blob).unwrap();
        // 186,949 params x 8 bytes plus names and headers.
        assert!(blob.len() < 10 << 20, "checkpoint is {} bytes", blob.len());
        assert!(blob.len() > model.param_count() * 8);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let blob = b"NOTACKPT".to_vec();
        assert!(GabformerModel::read_checkpoint(&mut blob.as_slice()).is_err());
    }
}
