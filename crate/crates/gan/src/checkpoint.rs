//! Checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SPIG" | u32 version = 1
//! u32 len | config echo (UTF-8 `key=value` lines)
//! u32 blocks
//! per block: u32 name_len | name | u32 ndim | u32 dims[ndim] | f32 values[Π dims]
//! u32 len | history (UTF-8, one whitespace-separated line per epoch)
//! ```
//!
//! Blocks hold every generator and discriminator parameter plus the
//! batch-norm running statistics.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::layers::Module;
use crate::losses::LossComponents;
use crate::train::EpochStats;

const MAGIC: &[u8; 4] = b"SPIG";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub generator: Generator,
    pub discriminator: Discriminator,
    /// Free-form settings echoed into the file (hyperparameters, extractor
    /// mode, sampling rate...). Architecture keys are added on save.
    pub notes: BTreeMap<String, String>,
    pub history: Vec<EpochStats>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Checkpoint {
    fn echo(&self) -> String {
        let g = self.generator.config();
        let d = self.discriminator.config();
        let mut map = self.notes.clone();
        for (k, v) in [
            ("generator.features", g.features.to_string()),
            ("generator.blocks", g.blocks.to_string()),
            ("generator.skip_enabled", g.skip_enabled.to_string()),
            ("generator.seed", g.seed.to_string()),
            ("discriminator.base_channels", d.base_channels.to_string()),
            ("discriminator.stages", d.stages.to_string()),
            ("discriminator.height", d.height.to_string()),
            ("discriminator.width", d.width.to_string()),
            ("discriminator.seed", d.seed.to_string()),
        ] {
            map.insert(k.to_string(), v);
        }
        map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        // write-then-rename so an interrupted save never clobbers a good file
        let tmp = path.with_extension("partial");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_text(w, &self.echo())?;

        let mut blocks: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        for module in [&self.generator as &dyn Module, &self.discriminator as &dyn Module] {
            for p in module.params() {
                blocks.push((p.name.clone(), p.shape.clone(), p.value.clone()));
            }
            for b in module.buffers() {
                blocks.push((b.name, vec![b.value.len()], b.value));
            }
        }
        w.write_all(&(blocks.len() as u32).to_le_bytes())?;
        for (name, shape, values) in blocks {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for d in shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in values {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }

        let history: String = self
            .history
            .iter()
            .map(|h| {
                let ssim = h.val_ssim.map_or("nan".to_string(), |s| s.to_string());
                format!(
                    "{} {} {} {} {} {} {} {}\n",
                    h.epoch, h.losses.mse, h.losses.sim, h.losses.adv, h.losses.total, h.d_loss, h.val_psnr, ssim
                )
            })
            .collect();
        write_text(w, &history)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(format_err("not a generator checkpoint"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(format_err(format!("unsupported checkpoint version {version}")));
        }
        let mut notes = BTreeMap::new();
        for line in read_text(r)?.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| format_err(format!("bad config line {line:?}")))?;
            notes.insert(k.to_string(), v.to_string());
        }
        let get = |key: &str| -> Result<String> {
            notes.get(key).cloned().ok_or_else(|| format_err(format!("checkpoint lacks {key}")))
        };
        let num = |key: &str| -> Result<u64> {
            get(key)?.parse().map_err(|_| format_err(format!("{key} is not an integer")))
        };
        let gen_cfg = GeneratorConfig {
            features: num("generator.features")? as usize,
            blocks: num("generator.blocks")? as usize,
            skip_enabled: get("generator.skip_enabled")? == "true",
            seed: num("generator.seed")?,
        };
        let disc_cfg = DiscriminatorConfig {
            base_channels: num("discriminator.base_channels")? as usize,
            stages: num("discriminator.stages")? as usize,
            height: num("discriminator.height")? as usize,
            width: num("discriminator.width")? as usize,
            seed: num("discriminator.seed")?,
        };
        let mut generator = Generator::new(gen_cfg)?;
        let mut discriminator = Discriminator::new(disc_cfg)?;

        let count = read_u32(r)? as usize;
        let mut loaded = 0;
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| format_err("block name is not UTF-8"))?;
            let ndim = read_u32(r)? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<_>>()?;
            let mut buf = vec![0u8; 4 * shape.iter().product::<usize>()];
            r.read_exact(&mut buf)?;
            let values: Vec<f64> =
                buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
            if assign(&mut generator, &name, &shape, &values)? || assign(&mut discriminator, &name, &shape, &values)? {
                loaded += 1;
            } else {
                return Err(format_err(format!("unknown block {name}")));
            }
        }
        let expected = generator.params().len()
            + generator.buffers().len()
            + discriminator.params().len()
            + discriminator.buffers().len();
        if loaded != expected {
            return Err(format_err(format!("checkpoint has {loaded} blocks, expected {expected}")));
        }

        let mut history = Vec::new();
        for line in read_text(r)?.lines() {
            let f: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| format_err(format!("bad history line {line:?}"))))
                .collect::<Result<_>>()?;
            if f.len() != 8 {
                return Err(format_err(format!("bad history line {line:?}")));
            }
            history.push(EpochStats {
                epoch: f[0] as usize,
                losses: LossComponents { mse: f[1], sim: f[2], adv: f[3], total: f[4] },
                d_loss: f[5],
                val_psnr: f[6],
                val_ssim: (!f[7].is_nan()).then_some(f[7]),
            });
        }
        for key in [
            "generator.features",
            "generator.blocks",
            "generator.skip_enabled",
            "generator.seed",
            "discriminator.base_channels",
            "discriminator.stages",
            "discriminator.height",
            "discriminator.width",
            "discriminator.seed",
        ] {
            notes.remove(key);
        }
        Ok(Self { generator, discriminator, notes, history })
    }
}

fn assign<M: Module>(module: &mut M, name: &str, shape: &[usize], values: &[f64]) -> Result<bool> {
    if let Some(p) = module.params_mut().into_iter().find(|p| p.name == name) {
        if p.shape != shape {
            return Err(format_err(format!("{name}: shape {shape:?}, expected {:?}", p.shape)));
        }
        p.value.copy_from_slice(values);
        return Ok(true);
    }
    Ok(module.set_buffer(name, values))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn write_text(w: &mut impl Write, text: &str) -> Result<()> {
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    Ok(())
}

fn read_text(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| format_err("text section is not UTF-8"))
}
