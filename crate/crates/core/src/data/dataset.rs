//! Generated datasets and their on-disk form.
//!
//! A dataset directory holds `manifest.toml` plus one archive per split
//! (`train.bags`, `val.bags`, `test.bags`). Archive layout, little-endian:
//!
//! ```text
//! magic "ATMILBAG" | u32 version (1) | u32 bag count
//! per bag:      u64 id | u32 label | u32 instances | u32 height | u32 width
//! per instance: u8 aux label | u8 class (index into PerturbClass::ALL, 255 = none)
//!               | height*width u8 pixels (value * 255, rounded)
//! ```

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bags::{build_bag_with_label, instance_class, BagSpec};
use super::perturb::PerturbClass;
use crate::error::{Error, Result};
use crate::model::{Bag, Instance};

pub const ARCHIVE_MAGIC: &[u8; 8] = b"ATMILBAG";
pub const ARCHIVE_VERSION: u32 = 1;
pub const DATASET_FORMAT_VERSION: u32 = 1;
/// Bumped whenever the generator would produce different pixels for the same seed.
pub const GENERATOR_VERSION: &str = "strokes-1";
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn code(self) -> u64 {
        self as u64
    }

    pub fn file_name(self) -> String {
        format!("{}.bags", self.as_str())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown split {s:?} (train, val, test)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 100,
            val: 20,
            test: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub generator_version: String,
    pub seed: u64,
    pub counts: SplitCounts,
    pub spec: BagSpec,
}

impl DatasetManifest {
    pub fn new(seed: u64, counts: SplitCounts, spec: BagSpec) -> Self {
        Self {
            format_version: DATASET_FORMAT_VERSION,
            generator_version: GENERATOR_VERSION.to_string(),
            seed,
            counts,
            spec,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::config(format!(
                "dataset format version {} not supported (expected {DATASET_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.generator_version != GENERATOR_VERSION {
            return Err(Error::config(format!(
                "dataset made by generator {:?}, this build is {GENERATOR_VERSION:?}",
                self.generator_version
            )));
        }
        self.spec.validate()
    }
}

/// Ids are unique across splits: the split sits in the high bits.
pub fn bag_id(split: Split, index: usize) -> u64 {
    (split.code() << 32) | index as u64
}

/// Independent random stream for one bag, so bags can be made in any order.
pub fn bag_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(bag_id(split, index));
    rng
}

/// Generates one split. Labels cycle through the classes so every split is balanced.
pub fn generate_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<Bag>> {
    manifest.spec.validate()?;
    let classes = manifest.spec.classes();
    (0..manifest.counts.get(split))
        .map(|i| {
            let mut rng = bag_rng(manifest.seed, split, i);
            build_bag_with_label(&manifest.spec, i % classes, bag_id(split, i), &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Bag>,
    pub val: Vec<Bag>,
    pub test: Vec<Bag>,
}

impl Dataset {
    pub fn generate(manifest: DatasetManifest) -> Result<Self> {
        Ok(Self {
            train: generate_split(&manifest, Split::Train)?,
            val: generate_split(&manifest, Split::Val)?,
            test: generate_split(&manifest, Split::Test)?,
            manifest,
        })
    }

    pub fn split(&self, split: Split) -> &[Bag] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join(MANIFEST_FILE),
            toml::to_string_pretty(&self.manifest).map_err(|e| Error::Internal(e.to_string()))?,
        )?;
        for split in Split::ALL {
            let mut w = BufWriter::new(File::create(dir.join(split.file_name()))?);
            write_bags(&mut w, self.split(split))?;
            w.flush()?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = load_manifest(&dir.join(MANIFEST_FILE))?;
        let read = |split: Split| -> Result<Vec<Bag>> {
            let bags = read_bags(&mut BufReader::new(File::open(
                dir.join(split.file_name()),
            )?))?;
            if bags.len() != manifest.counts.get(split) {
                return Err(Error::data(format!(
                    "{split} archive has {} bags, manifest says {}",
                    bags.len(),
                    manifest.counts.get(split)
                )));
            }
            Ok(bags)
        };
        Ok(Self {
            train: read(Split::Train)?,
            val: read(Split::Val)?,
            test: read(Split::Test)?,
            manifest,
        })
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = toml::from_str(&fs::read_to_string(path)?)?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn write_bags<W: Write>(w: &mut W, bags: &[Bag]) -> Result<()> {
    w.write_all(ARCHIVE_MAGIC)?;
    w.write_u32::<LittleEndian>(ARCHIVE_VERSION)?;
    w.write_u32::<LittleEndian>(bags.len() as u32)?;
    for bag in bags {
        let (h, wd) = bag
            .instances
            .first()
            .map_or((0, 0), |i| (i.height, i.width));
        w.write_u64::<LittleEndian>(bag.id)?;
        w.write_u32::<LittleEndian>(bag.label as u32)?;
        w.write_u32::<LittleEndian>(bag.instances.len() as u32)?;
        w.write_u32::<LittleEndian>(h as u32)?;
        w.write_u32::<LittleEndian>(wd as u32)?;
        for (inst, &aux) in bag.instances.iter().zip(&bag.aux_labels) {
            if (inst.height, inst.width) != (h, wd) {
                return Err(Error::data(format!("bag {} mixes instance sizes", bag.id)));
            }
            w.write_u8(aux as u8)?;
            w.write_u8(instance_class(inst).map_or(255, |c| c.index() as u8))?;
            let bytes: Vec<u8> = inst
                .pixels
                .iter()
                .map(|&v| (v * 255.0).round() as u8)
                .collect();
            w.write_all(&bytes)?;
        }
    }
    Ok(())
}

pub fn read_bags<R: Read>(r: &mut R) -> Result<Vec<Bag>> {
    let mut offset = 0u64;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format(0, "file too short for bag archive magic"))?;
    if &magic != ARCHIVE_MAGIC {
        return Err(Error::format(0, "not a bag archive (bad magic)"));
    }
    offset += 8;
    let u32_at = |r: &mut R, offset: &mut u64, what: &str| -> Result<u32> {
        let v = r
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::format(*offset, format!("truncated {what}")))?;
        *offset += 4;
        Ok(v)
    };
    let version = u32_at(r, &mut offset, "version")?;
    if version != ARCHIVE_VERSION {
        return Err(Error::format(
            8,
            format!("unsupported archive version {version}"),
        ));
    }
    let count = u32_at(r, &mut offset, "bag count")? as usize;
    let mut bags = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r
            .read_u64::<LittleEndian>()
            .map_err(|_| Error::format(offset, "truncated bag id"))?;
        offset += 8;
        let label = u32_at(r, &mut offset, "bag label")? as usize;
        let n = u32_at(r, &mut offset, "instance count")? as usize;
        let h = u32_at(r, &mut offset, "height")? as usize;
        let w = u32_at(r, &mut offset, "width")? as usize;
        let mut instances = Vec::with_capacity(n);
        let mut aux = Vec::with_capacity(n);
        let mut buf = vec![0u8; 2 + h * w];
        for i in 0..n {
            r.read_exact(&mut buf).map_err(|_| {
                Error::format(offset, format!("truncated instance {i} of bag {id}"))
            })?;
            offset += buf.len() as u64;
            aux.push(buf[0] as usize);
            let pixels = buf[2..].iter().map(|&b| b as f64 / 255.0).collect();
            let mut inst = Instance::new(h, w, pixels)?;
            if let Some(cls) = PerturbClass::from_index(buf[1] as usize) {
                inst = inst.with_meta("class", cls.as_str());
            }
            instances.push(inst);
        }
        bags.push(Bag::new(id, instances, label, aux)?);
    }
    Ok(bags)
}
