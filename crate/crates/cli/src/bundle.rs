//! Adapter bundles and backbone snapshots.
//!
//! Both share one container: magic `ADRB\x01`, u32 version, the 32-byte
//! backbone hash, u32 entry count, then per entry a u16 id length, the id,
//! u32 rank, u32 dims and raw little-endian f32 data. A leading metadata
//! entry tags the payload: `task:<id>` holding the expert count for bundles,
//! `config:<fingerprint>` with no data for snapshots.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use adra_core::autodiff::{ParamStore, Tensor};
use adra_core::model::{Backbone, BackboneConfig, Model, ParamRole};
use adra_core::{Error, Result};

pub const BUNDLE_MAGIC: &[u8; 5] = b"ADRB\x01";
pub const BUNDLE_VERSION: u32 = 1;

const TASK_TAG: &str = "task:";
const CONFIG_TAG: &str = "config:";

/// Decoded container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub version: u32,
    pub hash: [u8; 32],
    pub entries: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        let fmt = |what: &str| Error::Format(format!("{what} does not fit the container"));
        w.write_all(BUNDLE_MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        w.write_all(&self.hash)?;
        let count = u32::try_from(self.entries.len()).map_err(|_| fmt("entry count"))?;
        w.write_all(&count.to_le_bytes())?;
        for (id, t) in &self.entries {
            let len = u16::try_from(id.len()).map_err(|_| fmt("id"))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| fmt("dimension"))?;
                w.write_all(&d.to_le_bytes())?;
            }
            w.write_all(&t.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut c = Reader { buf: &buf, pos: 0 };
        if c.take(5, "magic")? != BUNDLE_MAGIC {
            return Err(Error::Format("not a bundle file".into()));
        }
        let version = c.u32("version")?;
        if version != BUNDLE_VERSION {
            return Err(Error::Format(format!(
                "unsupported bundle version {version}"
            )));
        }
        let hash: [u8; 32] = c.take(32, "hash")?.try_into().expect("32 bytes");
        let count = c.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len =
                u16::from_le_bytes(c.take(2, "id length")?.try_into().expect("2 bytes")) as usize;
            let id = std::str::from_utf8(c.take(len, "id")?)
                .map_err(|_| Error::Format("id is not UTF-8".into()))?
                .to_string();
            let rank = c.u32("rank")? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("entry {id} has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| c.u32("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("entry {id} is too large")))?;
            let bytes = c.take(n.saturating_mul(4), "data")?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            entries.push((id, Tensor::new(shape, data)?));
        }
        if c.pos != buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                buf.len() - c.pos
            )));
        }
        Ok(Container {
            version,
            hash,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }

    /// Scalars in non-metadata entries.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().skip(1).map(|(_, t)| t.len()).sum()
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated while reading {what}")))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

/// The task-specific parameters of one trained model, bound to the
/// backbone they were trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBundle {
    pub backbone_hash: [u8; 32],
    pub task_id: String,
    /// Experts per block; 0 for a head-only model.
    pub experts: usize,
    pub params: Vec<(String, Tensor<f32>)>,
}

impl AdapterBundle {
    pub fn from_model(model: &Model, task_id: &str) -> Result<Self> {
        let params = model
            .params
            .iter()
            .filter(|p| ParamRole::of(&p.id).is_task_specific())
            .map(|p| (p.id.clone(), p.value.clone()))
            .collect();
        Ok(AdapterBundle {
            backbone_hash: model.theta_hash(),
            task_id: task_id.to_string(),
            experts: model.arch.experts.unwrap_or(0),
            params,
        })
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn to_container(&self) -> Container {
        let mut entries = vec![(
            format!("{TASK_TAG}{}", self.task_id),
            Tensor::from_vec(vec![self.experts as f32]),
        )];
        entries.extend(self.params.iter().cloned());
        Container {
            version: BUNDLE_VERSION,
            hash: self.backbone_hash,
            entries,
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let mut entries = c.entries.into_iter();
        let (tag, meta) = entries
            .next()
            .ok_or_else(|| Error::Format("bundle has no metadata entry".into()))?;
        let task_id = tag
            .strip_prefix(TASK_TAG)
            .ok_or_else(|| Error::Format(format!("`{tag}` is not an adapter bundle tag")))?
            .to_string();
        let experts = match meta.data() {
            [k] if *k >= 0.0 && k.fract() == 0.0 => *k as usize,
            _ => return Err(Error::Format("malformed expert count".into())),
        };
        let params: Vec<_> = entries.collect();
        if let Some((id, _)) = params
            .iter()
            .find(|(id, _)| !ParamRole::of(id).is_task_specific())
        {
            return Err(Error::Format(format!(
                "bundle carries backbone parameter {id}"
            )));
        }
        Ok(AdapterBundle {
            backbone_hash: c.hash,
            task_id,
            experts,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }

    /// Rebuild the trained model on top of `backbone`, which must be the one
    /// the bundle was trained against.
    pub fn attach(&self, backbone: &Backbone) -> Result<Model> {
        let found = backbone.hash();
        if found != self.backbone_hash {
            return Err(Error::HashMismatch {
                expected: hex::encode(self.backbone_hash),
                found: hex::encode(found),
            });
        }
        let experts = (self.experts > 0).then_some(self.experts);
        let mut model = Model::from_backbone(backbone, experts, 0)?;
        let expected = model
            .params
            .iter()
            .filter(|p| ParamRole::of(&p.id).is_task_specific())
            .count();
        if expected != self.params.len() {
            return Err(Error::Format(format!(
                "bundle has {} task parameters, the architecture expects {expected}",
                self.params.len()
            )));
        }
        for (id, value) in &self.params {
            let p = model.params.by_name_mut(id)?;
            if p.value.shape() != value.shape() {
                return Err(Error::Dimension {
                    op: "attach",
                    lhs: p.value.shape().to_vec(),
                    rhs: value.shape().to_vec(),
                });
            }
            p.value = value.clone();
        }
        Ok(model)
    }
}

/// Write a pretrained backbone snapshot.
pub fn save_backbone(path: &Path, backbone: &Backbone) -> Result<()> {
    let mut entries = vec![(
        format!("{CONFIG_TAG}{}", backbone.config.fingerprint()),
        Tensor::zeros(&[0]),
    )];
    entries.extend(
        backbone
            .params
            .iter()
            .map(|p| (p.id.clone(), p.value.clone())),
    );
    Container {
        version: BUNDLE_VERSION,
        hash: backbone.hash(),
        entries,
    }
    .save(path)
}

/// Read a snapshot written by [`save_backbone`] for the architecture `config`,
/// checking both the architecture and the content hash.
pub fn load_backbone(path: &Path, config: &BackboneConfig) -> Result<Backbone> {
    let c = Container::load(path)?;
    let mut entries = c.entries.into_iter();
    let tag = entries.next().map(|(t, _)| t).unwrap_or_default();
    let fingerprint = tag
        .strip_prefix(CONFIG_TAG)
        .ok_or_else(|| Error::Format(format!("{} is not a backbone snapshot", path.display())))?;
    if fingerprint != config.fingerprint() {
        return Err(Error::Config(format!(
            "snapshot architecture `{fingerprint}` differs from configured `{}`",
            config.fingerprint()
        )));
    }
    let mut params = ParamStore::new();
    for (id, value) in entries {
        params.insert(&id, value, false)?;
    }
    let backbone = Backbone {
        config: config.clone(),
        params,
    };
    let found = backbone.hash();
    if found != c.hash {
        return Err(Error::HashMismatch {
            expected: hex::encode(c.hash),
            found: hex::encode(found),
        });
    }
    Ok(backbone)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip_and_truncation() {
        let c = Container {
            version: BUNDLE_VERSION,
            hash: [7; 32],
            entries: vec![
                ("task:x".into(), Tensor::from_vec(vec![2.0])),
                (
                    "head.b".into(),
                    Tensor::from_fn(&[2, 3], |i| i as f32 - 2.5),
                ),
            ],
        };
        let mut bytes = Vec::new();
        c.write(&mut bytes).unwrap();
        // header 5 + 4 + 32 + 4, entries (2 + 6 + 4 + 4 + 4) and (2 + 6 + 4 + 8 + 24)
        assert_eq!(bytes.len(), 45 + 20 + 44);
        assert_eq!(Container::read(&mut bytes.as_slice()).unwrap(), c);
        for cut in [0, 4, 44, 60, bytes.len() - 1] {
            assert!(matches!(
                Container::read(&mut &bytes[..cut]),
                Err(Error::Format(_))
            ));
        }
        bytes.push(0);
        assert!(matches!(
            Container::read(&mut bytes.as_slice()),
            Err(Error::Format(_))
        ));
    }
}
