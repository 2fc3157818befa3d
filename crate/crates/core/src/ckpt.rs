//! Binary container for named f64 tensors plus string metadata, used for
//! model checkpoints and scene datasets.
//!
//! Layout (all integers little-endian):
//!   magic "AFDC" | u32 version | u32 tensor count
//!   per tensor: u32 name len | name bytes | u32 rank | u64 dims... | f64 payload
//!   u32 metadata count | per entry: u32 key len | key | u32 value len | value
//!
//! Maps are ordered, so save/load round-trips are byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::boxes::Box2D;
use crate::error::{Error, Result};
use crate::scene::{Scene, SceneObject};

pub const MAGIC: &[u8; 4] = b"AFDC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn insert_tensor(&mut self, name: &str, dims: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let expect: usize = dims.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {name}: dims {dims:?} vs {} values",
                data.len()
            )));
        }
        self.tensors.insert(name.to_string(), (dims, data));
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&(Vec<usize>, Vec<f64>)> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor {name}")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing metadata {key}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, (dims, data)) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for &d in dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            out.extend_from_slice(&(k.len() as u32).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            out.extend_from_slice(&(v.len() as u32).to_le_bytes());
            out.extend_from_slice(v.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::CheckpointMismatch(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointMismatch(format!(
                "format version {version}, this build reads {VERSION}"
            )));
        }
        let mut ck = Checkpoint::default();
        let n_tensors = r.u32()? as usize;
        for _ in 0..n_tensors {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            let count: usize = dims.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(r.f64()?);
            }
            ck.tensors.insert(name, (dims, data));
        }
        let n_meta = r.u32()? as usize;
        for _ in 0..n_meta {
            let k = r.string()?;
            let v = r.string()?;
            ck.metadata.insert(k, v);
        }
        if r.pos != bytes.len() {
            return Err(Error::CheckpointMismatch(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointMismatch("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::CheckpointMismatch("non-utf8 name".into()))
    }
}

/// FNV-1a over a byte stream; used to print dataset/checkpoint checksums.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Serialize scenes with tensors `images`, `boxes`, `classes`, `counts`.
pub fn dataset_to_checkpoint(scenes: &[Scene], image_size: usize, seed: u64) -> Checkpoint {
    let s = image_size;
    let mut images = Vec::with_capacity(scenes.len() * 3 * s * s);
    let mut boxes = Vec::new();
    let mut classes = Vec::new();
    let mut counts = Vec::with_capacity(scenes.len());
    for scene in scenes {
        images.extend_from_slice(&scene.image);
        counts.push(scene.objects.len() as f64);
        for o in &scene.objects {
            boxes.extend_from_slice(&[o.bbox.x_min, o.bbox.y_min, o.bbox.x_max, o.bbox.y_max]);
            classes.push(o.class as f64);
        }
    }
    let total = classes.len();
    let mut ck = Checkpoint::default();
    ck.insert_tensor("images", vec![scenes.len(), 3, s, s], images).unwrap();
    ck.insert_tensor("boxes", vec![total, 4], boxes).unwrap();
    ck.insert_tensor("classes", vec![total], classes).unwrap();
    ck.insert_tensor("counts", vec![scenes.len()], counts).unwrap();
    ck.metadata.insert("kind".into(), "dataset".into());
    ck.metadata.insert("seed".into(), seed.to_string());
    ck.metadata.insert("image_size".into(), s.to_string());
    ck.metadata.insert("count".into(), scenes.len().to_string());
    ck
}

/// Rebuild scenes from a dataset container. Per-scene generation seeds are
/// not stored; loaded scenes carry their index instead.
pub fn dataset_from_checkpoint(ck: &Checkpoint) -> Result<Vec<Scene>> {
    if ck.meta("kind")? != "dataset" {
        return Err(Error::CheckpointMismatch(format!(
            "kind {} is not a dataset",
            ck.meta("kind")?
        )));
    }
    let (img_dims, images) = ck.tensor("images")?;
    let (box_dims, boxes) = ck.tensor("boxes")?;
    let (_, classes) = ck.tensor("classes")?;
    let (_, counts) = ck.tensor("counts")?;
    if img_dims.len() != 4 || img_dims[1] != 3 || img_dims[2] != img_dims[3] {
        return Err(Error::CheckpointMismatch(format!("images dims {img_dims:?}")));
    }
    if box_dims.len() != 2 || box_dims[1] != 4 {
        return Err(Error::CheckpointMismatch(format!("boxes dims {box_dims:?}")));
    }
    let n = img_dims[0];
    let s = img_dims[2];
    if counts.len() != n || counts.iter().map(|&c| c as usize).sum::<usize>() != classes.len() {
        return Err(Error::CheckpointMismatch("counts do not tally".into()));
    }
    let mut scenes = Vec::with_capacity(n);
    let mut obj_idx = 0usize;
    for i in 0..n {
        let image = images[i * 3 * s * s..(i + 1) * 3 * s * s].to_vec();
        let mut objects = Vec::new();
        for _ in 0..counts[i] as usize {
            let b = &boxes[obj_idx * 4..obj_idx * 4 + 4];
            objects.push(SceneObject {
                class: classes[obj_idx] as usize,
                bbox: Box2D::new(b[0], b[1], b[2], b[3])?,
            });
            obj_idx += 1;
        }
        scenes.push(Scene {
            image,
            objects,
            seed: i as u64,
        });
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{gen_dataset, SceneConfig};

    #[test]
    fn roundtrip_is_bit_identical() {
        let mut ck = Checkpoint::default();
        ck.insert_tensor("a.w", vec![2, 3], vec![1.5, -2.25, 0.0, 3.5, -0.125, 9.0]).unwrap();
        ck.insert_tensor("b", vec![1], vec![f64::MIN_POSITIVE]).unwrap();
        ck.metadata.insert("epoch".into(), "7".into());
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.tensor("a.w").unwrap().0, vec![2, 3]);
        assert_eq!(back.meta("epoch").unwrap(), "7");
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let mut ck = Checkpoint::default();
        ck.metadata.insert("k".into(), "v".into());
        let mut bytes = ck.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CheckpointMismatch(_))
        ));
        let mut bytes = ck.to_bytes();
        bytes[4] = 99;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CheckpointMismatch(_))
        ));
    }

    #[test]
    fn truncation_detected() {
        let mut ck = Checkpoint::default();
        ck.insert_tensor("t", vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn dataset_roundtrip_preserves_scenes() {
        let cfg = SceneConfig::default();
        let scenes = gen_dataset(99, 5, &cfg);
        let ck = dataset_to_checkpoint(&scenes, cfg.image_size, 99);
        let back = dataset_from_checkpoint(&ck).unwrap();
        assert_eq!(back.len(), scenes.len());
        for (a, b) in scenes.iter().zip(&back) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.objects.len(), b.objects.len());
            for (oa, ob) in a.objects.iter().zip(&b.objects) {
                assert_eq!(oa.class, ob.class);
                assert_eq!(oa.bbox, ob.bbox);
            }
        }
    }

    #[test]
    fn empty_dataset_is_valid() {
        let ck = dataset_to_checkpoint(&[], 64, 0);
        let back = dataset_from_checkpoint(&ck).unwrap();
        assert!(back.is_empty());
    }
}
