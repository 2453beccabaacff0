//! Checkpoint files.
//!
//! ```text
//! OWAS1
//! kind:checkpoint
//! <key>:<value>                    metadata, fixed order
//! tensors:<n>
//! tensor:<group>:<name>:<d0,d1,..>  group is param, buffer or prototypes
//! <blank line>
//! f32 LE values of each tensor in header order
//! ```

use std::io::Write as _;
use std::path::Path;

use crate::batch::ClassIndex;
use crate::error::{arg, Error, Result};
use crate::model::{DecoderKind, Model, ModelConfig, Params};
use crate::objectives::ClassPrototype;
use crate::skeleton::{HeaderReader, MAGIC};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub classes: ClassIndex,
    pub prototypes: Vec<ClassPrototype>,
    pub epoch: usize,
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub config_hash: String,
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let c = &self.model.config;
        let mut out = Vec::new();
        writeln!(out, "{MAGIC}")?;
        writeln!(out, "kind:checkpoint")?;
        writeln!(out, "epoch:{}", self.epoch)?;
        writeln!(out, "val_accuracy:{:?}", self.val_accuracy)?;
        writeln!(out, "val_loss:{:?}", self.val_loss)?;
        writeln!(out, "config_hash:{}", self.config_hash)?;
        writeln!(out, "joints:{}", c.joints)?;
        writeln!(out, "classes:{}", join(self.classes.classes()))?;
        writeln!(out, "channels:{}", join(c.channels))?;
        writeln!(out, "temporal_kernel:{}", c.temporal_kernel)?;
        writeln!(out, "decoder:{}", c.decoder.as_str())?;
        writeln!(out, "decoder_channels:{}", c.decoder_channels)?;
        writeln!(out, "embed_dim:{}", c.embed_dim)?;
        writeln!(out, "batch_norm:{}", u8::from(c.batch_norm))?;
        writeln!(out, "prototypes:{}", join(self.prototypes.iter().map(|p| u8::from(p.initialized))))?;

        let d = c.embed_dim;
        if self.prototypes.len() != self.classes.len() || self.prototypes.iter().any(|p| p.mean.len() != d) {
            return arg("prototypes do not match classes and embedding size");
        }
        let protos = Tensor::from_vec(
            &[self.prototypes.len(), d],
            self.prototypes.iter().flat_map(|p| p.mean.iter().copied()).collect(),
        );
        let mut tensors: Vec<(&str, &str, &Tensor)> = Vec::new();
        tensors.extend(self.model.params.iter().map(|(n, t)| ("param", n.as_str(), t)));
        tensors.extend(self.model.buffers.iter().map(|(n, t)| ("buffer", n.as_str(), t)));
        tensors.push(("prototypes", "mean", &protos));
        writeln!(out, "tensors:{}", tensors.len())?;
        for (group, name, t) in &tensors {
            writeln!(out, "tensor:{group}:{name}:{}", join(t.shape()))?;
        }
        writeln!(out)?;
        for (_, _, t) in &tensors {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = HeaderReader::new(bytes);
        r.expect_magic()?;
        let (off, kind) = r.key_value("kind")?;
        if kind != "checkpoint" {
            return r.fail(off, format!("expected a checkpoint, found kind {kind:?}"));
        }
        let mut next = |key: &str| r.key_value(key).map(|(o, v)| (o, v.to_string()));
        let fields: Vec<(usize, String)> = [
            "epoch",
            "val_accuracy",
            "val_loss",
            "config_hash",
            "joints",
            "classes",
            "channels",
            "temporal_kernel",
            "decoder",
            "decoder_channels",
            "embed_dim",
            "batch_norm",
            "prototypes",
        ]
        .iter()
        .map(|k| next(k))
        .collect::<Result<_>>()?;
        let num = |i: usize, what: &str| -> Result<usize> { r.parse(fields[i].0, &fields[i].1, what) };
        let list = |i: usize, what: &str| -> Result<Vec<u32>> {
            let text = &fields[i].1;
            if text.is_empty() {
                return Ok(Vec::new());
            }
            text.split(',').map(|x| r.parse(fields[i].0, x, what)).collect()
        };
        let epoch = num(0, "epoch")?;
        let val_accuracy: f64 = r.parse(fields[1].0, &fields[1].1, "validation accuracy")?;
        let val_loss: f64 = r.parse(fields[2].0, &fields[2].1, "validation loss")?;
        let config_hash = fields[3].1.clone();
        let classes: Vec<u32> = list(5, "class id")?;
        let channels = list(6, "channel count")?;
        let [c1, c2, c3] = channels[..] else {
            return r.fail(fields[6].0, "expected three channel counts");
        };
        let decoder: DecoderKind = r.parse(fields[8].0, &fields[8].1, "decoder")?;
        let config = ModelConfig {
            joints: num(4, "joint count")?,
            num_classes: classes.len(),
            channels: [c1 as usize, c2 as usize, c3 as usize],
            temporal_kernel: num(7, "kernel size")?,
            decoder,
            decoder_channels: num(9, "decoder channels")?,
            embed_dim: num(10, "embedding size")?,
            batch_norm: num(11, "batch_norm flag")? != 0,
        };
        let initialized = list(12, "prototype flag")?;
        if initialized.len() != classes.len() {
            return r.fail(fields[12].0, "one prototype flag per class expected");
        }

        let (off, v) = r.key_value("tensors")?;
        let count: usize = r.parse(off, v, "tensor count")?;
        let mut specs = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let (off, v) = r.key_value("tensor")?;
            let parts: Vec<&str> = v.splitn(3, ':').collect();
            let [group, name, shape] = parts[..] else {
                return r.fail(off, "tensor line must be `tensor:<group>:<name>:<shape>`");
            };
            let shape: Vec<usize> = shape
                .split(',')
                .map(|d| r.parse(off, d, "dimension"))
                .collect::<Result<_>>()?;
            specs.push((off, group.to_string(), name.to_string(), shape));
        }
        let (off, blank) = r.line()?;
        if !blank.is_empty() {
            return r.fail(off, "expected blank line after header");
        }
        let mut pos = r.pos;
        let mut params = Params::new();
        let mut buffers = Params::new();
        let mut protos = None;
        for (off, group, name, shape) in specs {
            let n: usize = shape.iter().product();
            if bytes.len() < pos + 4 * n {
                return Err(Error::Format {
                    offset: bytes.len(),
                    message: format!("truncated data for tensor {name}"),
                });
            }
            let data = bytes[pos..pos + 4 * n]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            pos += 4 * n;
            let t = Tensor::from_vec(&shape, data);
            match group.as_str() {
                "param" => params.insert(name, t),
                "buffer" => buffers.insert(name, t),
                "prototypes" => protos = Some(t),
                _ => return r.fail(off, format!("unknown tensor group {group:?}")),
            }
        }
        if pos != bytes.len() {
            return Err(Error::Format {
                offset: pos,
                message: format!("{} trailing bytes", bytes.len() - pos),
            });
        }
        let protos = protos.ok_or_else(|| Error::Format {
            offset: pos,
            message: "missing prototype tensor".into(),
        })?;
        if protos.shape() != [classes.len(), config.embed_dim] {
            return Err(Error::Format {
                offset: pos,
                message: format!("prototype tensor has shape {:?}", protos.shape()),
            });
        }
        let d = config.embed_dim;
        let prototypes = classes
            .iter()
            .zip(&initialized)
            .enumerate()
            .map(|(i, (&class_id, &flag))| ClassPrototype {
                class_id,
                mean: protos.data()[i * d..(i + 1) * d].to_vec(),
                initialized: flag != 0,
            })
            .collect();
        let model = Model::from_parts(config, params, buffers).map_err(|e| Error::Format {
            offset: 0,
            message: e.to_string(),
        })?;
        Ok(Self {
            model,
            classes: ClassIndex::new(&classes.into_iter().collect()),
            prototypes,
            epoch,
            val_accuracy,
            val_loss,
            config_hash,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
