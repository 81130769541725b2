//! Binary checkpoints.
//!
//! Layout (little endian): magic `SSLAMCKPT`, `u32` version, `u8` stage,
//! `u64` step, `f64` EMA momentum, `u64` optimizer step, `u32`-length JSON
//! model config, `u32` tensor count, then per tensor a `u32`-length UTF-8
//! name, `u32` rows, `u32` cols and `rows·cols` f32 values. Tensor names are
//! prefixed `student.`, `teacher.`, `adam_m.` or `adam_v.`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::autograd::ParamSet;
use crate::error::{ensure, Error, Result};
use crate::model::{ModelConfig, TeacherState};
use crate::trainer::optim::AdamState;

pub const MAGIC: &[u8; 9] = b"SSLAMCKPT";
pub const VERSION: u32 = 1;
const GROUPS: [&str; 4] = ["student", "teacher", "adam_m", "adam_v"];

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    pub step: u64,
    pub model: ModelConfig,
    pub student: ParamSet<f32>,
    pub teacher: TeacherState<f32>,
    pub adam: AdamState<f32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.stage);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.teacher.momentum.to_le_bytes());
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        let cfg = serde_json::to_vec(&self.model).map_err(|e| Error::Format(e.to_string()))?;
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        let sets = [&self.student, &self.teacher.params, &self.adam.m, &self.adam.v];
        let count: usize = sets.iter().map(|s| s.len()).sum();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (group, set) in GROUPS.iter().zip(sets) {
            for (name, t) in set.iter() {
                let full = format!("{group}.{name}");
                out.extend_from_slice(&(full.len() as u32).to_le_bytes());
                out.extend_from_slice(full.as_bytes());
                out.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
                out.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
                for v in t.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 9];
        read_exact(&mut r, &mut magic)?;
        ensure!(&magic == MAGIC, Format, "not a checkpoint (bad magic)");
        let version = u32::from_le_bytes(take(&mut r)?);
        ensure!(version == VERSION, Format, "unsupported checkpoint version {version}");
        let [stage] = take::<1>(&mut r)?;
        let step = u64::from_le_bytes(take(&mut r)?);
        let momentum = f64::from_le_bytes(take(&mut r)?);
        let adam_step = u64::from_le_bytes(take(&mut r)?);
        let cfg_len = u32::from_le_bytes(take(&mut r)?) as usize;
        ensure!(r.len() >= cfg_len, Format, "truncated checkpoint");
        let model: ModelConfig =
            serde_json::from_slice(&r[..cfg_len]).map_err(|e| Error::Format(format!("checkpoint model config: {e}")))?;
        r = &r[cfg_len..];
        let count = u32::from_le_bytes(take(&mut r)?) as usize;
        let mut sets: [ParamSet<f32>; 4] = Default::default();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut r)?) as usize;
            ensure!(r.len() >= name_len, Format, "truncated checkpoint");
            let full = std::str::from_utf8(&r[..name_len])
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            r = &r[name_len..];
            let rows = u32::from_le_bytes(take(&mut r)?) as usize;
            let cols = u32::from_le_bytes(take(&mut r)?) as usize;
            let n = rows * cols;
            ensure!(r.len() >= 4 * n, Format, "truncated tensor {full}");
            let values: Vec<f32> = r[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            r = &r[4 * n..];
            let (group, name) = full
                .split_once('.')
                .ok_or_else(|| Error::Format(format!("tensor {full} has no group prefix")))?;
            let g = GROUPS
                .iter()
                .position(|&x| x == group)
                .ok_or_else(|| Error::Format(format!("unknown tensor group {group}")))?;
            sets[g].add(name, Array2::from_shape_vec((rows, cols), values).expect("length checked"));
        }
        ensure!(r.is_empty(), Format, "{} trailing bytes in checkpoint", r.len());
        let [student, teacher, m, v] = sets;
        ensure!(
            student.congruent(&teacher) && student.congruent(&m) && student.congruent(&v),
            Format,
            "checkpoint parameter groups differ in layout"
        );
        Ok(Self {
            stage,
            step,
            model,
            student,
            teacher: TeacherState {
                params: teacher,
                momentum,
            },
            adam: AdamState { m, v, step: adam_step },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format("truncated checkpoint".into()))
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use crate::patcher::PatchGrid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut cfg = ModelConfig::desk();
        cfg.encoder.depth = 1;
        cfg.encoder.width = 8;
        cfg.encoder.heads = 2;
        cfg.decoder_layers = 1;
        cfg.grid = PatchGrid::new(2, 3).unwrap();
        let (_, p) = Model::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut adam = AdamState::new(&p);
        adam.m.scale(0.5);
        adam.step = 7;
        Checkpoint {
            stage: 2,
            step: 42,
            model: cfg,
            teacher: TeacherState {
                params: p.clone(),
                momentum: 0.9995,
            },
            student: p,
            adam,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let c = sample();
        let a = dir.path().join("a.ckpt");
        c.save(&a).unwrap();
        let back = Checkpoint::load(&a).unwrap();
        assert_eq!(back, c);
        let b = dir.path().join("b.ckpt");
        back.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
