//! Single-file checkpoint archive.
//!
//! ```text
//! "VINYCKPT" | version u32 | total length u64
//! manifest length u32 | manifest JSON
//! tensor count u32 | per tensor: path length u16, path, ndim u8, dims u64…, f32 data
//! SHA-256 of every preceding byte
//! ```
//!
//! Integers and floats are little-endian. Tensors are keyed by canonical
//! parameter path; optimizer moments use `optim.m.<path>` and `optim.v.<path>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneParams, ModelConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::{ClsHead, Head, ReconHead, SegHead};
use crate::optim::{OptimState, Phase};
use crate::params::ParamSet;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"VINYCKPT";
const HEADER_LEN: usize = 8 + 4 + 8;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadSpec {
    Recon,
    Classify { classes: usize },
    Segment,
}

impl HeadSpec {
    pub fn of(head: &Head<f32>) -> Self {
        match head {
            Head::Recon(_) => HeadSpec::Recon,
            Head::Classify(h) => HeadSpec::Classify { classes: h.classes() },
            Head::Segment(_) => HeadSpec::Segment,
        }
    }

    fn zeros(&self, cfg: &ModelConfig) -> Head<f32> {
        match *self {
            HeadSpec::Recon => Head::Recon(ReconHead::zeros(cfg)),
            HeadSpec::Classify { classes } => Head::Classify(ClsHead::zeros(cfg, classes)),
            HeadSpec::Segment => Head::Segment(SegHead::zeros(cfg)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub phase: Option<Phase>,
    pub epoch: usize,
    pub seed: u64,
    /// Filled in on save.
    pub head: Option<HeadSpec>,
    /// Optimizer step count; present iff moments are stored.
    pub optim_step: Option<u64>,
}

impl Manifest {
    pub fn new(config: ModelConfig, phase: Option<Phase>, epoch: usize, seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config,
            phase,
            epoch,
            seed,
            head: None,
            optim_step: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub backbone: BackboneParams<f32>,
    pub head: Option<Head<f32>>,
    /// Moments for `backbone` followed by `head`.
    pub optim: Option<OptimState<f32>>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, manifest: Manifest, optim: Option<&OptimState<f32>>) -> Self {
        Self {
            manifest,
            backbone: model.backbone.clone(),
            head: Some(model.head.clone()),
            optim: optim.cloned(),
        }
    }

    /// Backbone plus stored head.
    pub fn into_model(self) -> Result<Model<f32>> {
        let head = self
            .head
            .ok_or_else(|| Error::Checkpoint("checkpoint holds no task head".into()))?;
        Ok(Model::new(self.backbone, head))
    }

    /// Backbone with `head` in place of whatever head was stored.
    pub fn with_head(self, head: Head<f32>) -> Model<f32> {
        Model::new(self.backbone, head)
    }
}

struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn collect<P: ParamSet<f32>>(params: &P, out: &mut Vec<(String, Tensor)>) {
    params.visit(&mut |path, values, shape| {
        out.push((
            path.to_string(),
            Tensor {
                shape: shape.to_vec(),
                data: values.to_vec(),
            },
        ))
    });
}

/// Serializes a checkpoint to bytes.
pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut manifest = ckpt.manifest.clone();
    manifest.format_version = FORMAT_VERSION;
    manifest.config = ckpt.backbone.config;
    manifest.head = ckpt.head.as_ref().map(HeadSpec::of);
    manifest.optim_step = ckpt.optim.as_ref().map(|s| s.step);

    let mut tensors = Vec::new();
    collect(&ckpt.backbone, &mut tensors);
    if let Some(head) = &ckpt.head {
        collect(head, &mut tensors);
    }
    if let Some(state) = &ckpt.optim {
        if ckpt.head.is_none() {
            return Err(Error::Checkpoint(
                "optimizer state needs the head it was built for".into(),
            ));
        }
        if state.first.len() != tensors.len() || state.second.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state has {} slots for {} tensors",
                state.first.len(),
                tensors.len()
            )));
        }
        let params: Vec<(String, Vec<usize>)> = tensors.iter().map(|(p, t)| (p.clone(), t.shape.clone())).collect();
        for (prefix, moments) in [("optim.m", &state.first), ("optim.v", &state.second)] {
            for ((path, shape), data) in params.iter().zip(moments.iter()) {
                tensors.push((
                    format!("{prefix}.{path}"),
                    Tensor {
                        shape: shape.clone(),
                        data: data.clone(),
                    },
                ));
            }
        }
    }

    write_archive(&manifest, &tensors)
}

fn write_archive(manifest: &Manifest, tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(manifest).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u64.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (path, t) in tensors {
        out.extend_from_slice(&(path.len() as u16).to_le_bytes());
        out.extend_from_slice(path.as_bytes());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in &t.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let total = (out.len() + DIGEST_LEN) as u64;
    out[12..20].copy_from_slice(&total.to_le_bytes());
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("archive ends inside a record".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

/// Parses and verifies an archive produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Checkpoint(format!("truncated: {} bytes", bytes.len())));
    }
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint archive".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let total = r.u64()?;
    if (bytes.len() as u64) < total {
        return Err(Error::Checkpoint(format!(
            "truncated: {} of {total} bytes",
            bytes.len()
        )));
    }
    if bytes.len() as u64 != total || total < (HEADER_LEN + DIGEST_LEN) as u64 {
        return Err(Error::Integrity(format!(
            "length field {total} vs {} bytes",
            bytes.len()
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity("checksum mismatch".into()));
    }

    let mut r = Reader {
        buf: body,
        pos: HEADER_LEN,
    };
    let json_len = r.u32()? as usize;
    let manifest: Manifest =
        serde_json::from_slice(r.take(json_len)?).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    manifest.config.validate()?;

    let mut stored = BTreeMap::new();
    for _ in 0..r.u32()? {
        let path_len = r.u16()? as usize;
        let path = std::str::from_utf8(r.take(path_len)?)
            .map_err(|_| Error::Checkpoint("non-UTF-8 tensor path".into()))?
            .to_string();
        let ndim = r.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
            )?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        if stored.insert(path.clone(), Tensor { shape, data }).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {path}")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }

    let mut backbone = BackboneParams::zeros(manifest.config);
    fill(&mut backbone, &mut stored, "")?;
    let mut head = manifest.head.map(|spec| spec.zeros(&manifest.config));
    if let Some(h) = &mut head {
        fill(h, &mut stored, "")?;
    }
    let optim = match (manifest.optim_step, &head) {
        (Some(step), Some(h)) => {
            let model = Model::new(backbone.clone(), h.clone());
            let mut first = model.zeros_like();
            let mut second = model.zeros_like();
            fill(&mut first, &mut stored, "optim.m.")?;
            fill(&mut second, &mut stored, "optim.v.")?;
            let flat = |m: &Model<f32>| {
                let mut v = Vec::new();
                m.visit(&mut |_, x, _| v.push(x.to_vec()));
                v
            };
            Some(OptimState {
                step,
                first: flat(&first),
                second: flat(&second),
            })
        }
        (Some(_), None) => return Err(Error::Checkpoint("optimizer state without a head".into())),
        (None, _) => None,
    };
    if let Some(path) = stored.keys().next() {
        return Err(Error::Checkpoint(format!("unknown parameter path {path}")));
    }
    Ok(Checkpoint {
        manifest,
        backbone,
        head,
        optim,
    })
}

fn fill<P: ParamSet<f32>>(params: &mut P, stored: &mut BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
    let mut shapes = Vec::new();
    params.visit(&mut |p, _, s| shapes.push((format!("{prefix}{p}"), s.to_vec())));
    let mut taken = Vec::with_capacity(shapes.len());
    for (path, shape) in &shapes {
        let t = stored
            .remove(path)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {path}")))?;
        if &t.shape != shape {
            return Err(Error::Checkpoint(format!(
                "{path}: stored shape {:?}, expected {shape:?}",
                t.shape
            )));
        }
        taken.push(t.data);
    }
    let mut i = 0;
    params.visit_mut(&mut |_, v| {
        v.copy_from_slice(&taken[i]);
        i += 1;
    });
    Ok(())
}

/// Writes atomically through a sibling temporary file.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode(ckpt)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::NUM_SCENE_CLASSES;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch_size: 8,
            dim: 8,
            depth: 2,
            heads: 2,
            head_dim: 4,
            mlp_dim: 16,
            channels: 3,
        }
    }

    fn model(seed: u64) -> Model<f32> {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bb = BackboneParams::init(cfg, &mut rng).unwrap();
        Model::new(bb, Head::Classify(ClsHead::init(&cfg, NUM_SCENE_CLASSES, &mut rng)))
    }

    #[test]
    fn round_trip_with_optimizer() {
        let m = model(3);
        let mut state = OptimState::new(&m);
        state.step = 7;
        state.first[0][1] = 0.25;
        state.second.last_mut().unwrap()[0] = 1e-9;
        let ckpt = Checkpoint::from_model(
            &m,
            Manifest::new(small(), Some(Phase::Intermediate), 4, 11),
            Some(&state),
        );
        let back = decode(&encode(&ckpt).unwrap()).unwrap();
        assert_eq!(back.backbone, ckpt.backbone);
        assert_eq!(back.head, ckpt.head);
        assert_eq!(back.optim, Some(state));
        assert_eq!(back.manifest.epoch, 4);
        assert_eq!(back.manifest.head, Some(HeadSpec::Classify { classes: 6 }));
    }

    #[test]
    fn failures() {
        let m = model(1);
        let bytes = encode(&Checkpoint::from_model(&m, Manifest::new(small(), None, 0, 0), None)).unwrap();

        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(m)) if m.contains("version")));
        assert!(matches!(decode(&bytes[..bytes.len() - 5]), Err(Error::Checkpoint(m)) if m.contains("truncated")));
        let mut bad = bytes.clone();
        let mid = bytes.len() / 2;
        bad[mid] ^= 0x01;
        assert!(matches!(decode(&bad), Err(Error::Integrity(_))));
        assert!(decode(b"nonsense").is_err());
    }

    #[test]
    fn unknown_path_rejected() {
        let m = model(4);
        let mut manifest = Manifest::new(small(), None, 0, 0);
        manifest.head = Some(HeadSpec::of(&m.head));
        let mut tensors = Vec::new();
        collect(&m, &mut tensors);
        tensors.push((
            "blocks.9.qkv.weight".into(),
            Tensor {
                shape: vec![1],
                data: vec![0.0],
            },
        ));
        let bytes = write_archive(&manifest, &tensors).unwrap();
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(m)) if m.contains("unknown parameter path")));
    }

    #[test]
    fn head_swap() {
        let m = model(2);
        let ckpt =
            decode(&encode(&Checkpoint::from_model(&m, Manifest::new(small(), None, 0, 0), None)).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let swapped = ckpt.with_head(Head::Segment(SegHead::init(&small(), &mut rng)));
        assert_eq!(swapped.backbone, m.backbone);
        assert_eq!(swapped.head.kind(), "segment");
    }
}
