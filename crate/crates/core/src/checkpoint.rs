//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "NRCK" | u32 version
//! u32 len | config (TOML, UTF-8)
//! u8 phase | u64 global step
//! u32 count | f64 betas
//! teacher tensors | student tensors | u64 adam step | f64×4 adam config
//! first-moment tensors | second-moment tensors
//! ```
//!
//! A tensor group is `u32 count` followed by records
//! `u16 name_len | name | u8 rank | u32 dims… | f32 data…`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::net::{NetParams, NoiseNet};
use crate::tensor::{AdamConfig, AdamState, Tensor};

pub const MAGIC: &[u8; 4] = b"NRCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Selftrain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub phase: Phase,
    /// Steps completed within `phase`.
    pub step: u64,
    pub schedule: NoiseSchedule,
    pub teacher: NoiseNet<f32>,
    pub student: NoiseNet<f32>,
    pub adam: AdamState<f32>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn tensors<'a>(&mut self, named: impl ExactSizeIterator<Item = (String, &'a [usize], &'a [f32])>) {
        self.u32(named.len() as u32);
        for (name, shape, data) in named {
            self.u16(name.len() as u16);
            self.0.extend_from_slice(name.as_bytes());
            self.u8(shape.len() as u8);
            for &d in shape {
                self.u32(d as u32);
            }
            for v in data {
                self.0.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
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
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn tensors(&mut self) -> Result<Vec<(String, Tensor<f32>)>> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = self.u16()? as usize;
            let name = String::from_utf8(self.take(len)?.to_vec())
                .map_err(|_| Error::format(self.path, "tensor name is not UTF-8"))?;
            let rank = self.u8()? as usize;
            let shape = (0..rank)
                .map(|_| self.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product::<usize>();
            let raw = self.take(numel.checked_mul(4).ok_or_else(|| Error::format(self.path, "tensor too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::format(self.path, format!("{name}: {e}")))?;
            out.push((name, t));
        }
        Ok(out)
    }
}

fn net_records(net: &NoiseNet<f32>) -> Vec<(String, &[usize], &[f32])> {
    net.params
        .names()
        .into_iter()
        .zip(net.params.tensors())
        .map(|(n, t)| (n, t.shape(), t.data()))
        .collect()
}

fn net_from_records(
    records: Vec<(String, Tensor<f32>)>,
    config: &Config,
    role: &str,
    path: &Path,
) -> Result<NoiseNet<f32>> {
    let net_cfg = config.net();
    let expect = NetParams::<f32>::expected_shapes(&net_cfg);
    if records.len() != expect.len() {
        return Err(Error::format(
            path,
            format!("{role}: {} tensors, configuration needs {}", records.len(), expect.len()),
        ));
    }
    let (names, tensors): (Vec<String>, Vec<Tensor<f32>>) = records.into_iter().unzip();
    let params = NetParams::from_tensors(&net_cfg, tensors)
        .map_err(|e| Error::format(path, format!("{role}: {e}")))?;
    if params.names() != names {
        return Err(Error::format(path, format!("{role}: tensor names out of order")));
    }
    NoiseNet::from_params(net_cfg, params)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.bytes(self.config.to_text().as_bytes());
        w.u8(match self.phase {
            Phase::Pretrain => 0,
            Phase::Selftrain => 1,
        });
        w.u64(self.step);
        w.u32(self.schedule.betas().len() as u32);
        for &b in self.schedule.betas() {
            w.f64(b);
        }
        w.tensors(net_records(&self.teacher).into_iter());
        w.tensors(net_records(&self.student).into_iter());
        w.u64(self.adam.step_count);
        let c = self.adam.config;
        for v in [c.lr, c.beta1, c.beta2, c.eps] {
            w.f64(v);
        }
        let names = self.student.params.names();
        for moments in [&self.adam.first_moment, &self.adam.second_moment] {
            let lens: Vec<[usize; 1]> = moments.iter().map(|m| [m.len()]).collect();
            w.tensors(
                names
                    .iter()
                    .zip(moments)
                    .zip(&lens)
                    .map(|((n, m), l)| (n.clone(), &l[..], m.as_slice()))
                    .collect::<Vec<_>>()
                    .into_iter(),
            );
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0, path };
        if r.take(4).map_err(|_| Error::format(path, "not a checkpoint"))? != MAGIC {
            return Err(Error::format(path, "bad magic, not a checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("version {version}, this build reads {VERSION}")));
        }
        let text = std::str::from_utf8(r.bytes()?).map_err(|_| Error::format(path, "config is not UTF-8"))?;
        let config = Config::parse(text).map_err(|e| Error::format(path, format!("embedded config: {e}")))?;
        let phase = match r.u8()? {
            0 => Phase::Pretrain,
            1 => Phase::Selftrain,
            p => return Err(Error::format(path, format!("unknown phase {p}"))),
        };
        let step = r.u64()?;
        let n = r.u32()? as usize;
        let betas = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let schedule = NoiseSchedule::from_betas(betas).map_err(|e| Error::format(path, e.to_string()))?;
        let teacher = net_from_records(r.tensors()?, &config, "teacher", path)?;
        let student = net_from_records(r.tensors()?, &config, "student", path)?;
        let step_count = r.u64()?;
        let adam_cfg = AdamConfig {
            lr: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
        let mut moments = Vec::new();
        for _ in 0..2 {
            let group = r.tensors()?;
            let sizes: Vec<usize> = student.params.tensors().iter().map(|t| t.numel()).collect();
            if group.len() != sizes.len() || group.iter().zip(&sizes).any(|((_, t), &n)| t.numel() != n) {
                return Err(Error::format(path, "optimizer state does not match the parameters"));
            }
            moments.push(group.into_iter().map(|(_, t)| t.into_data()).collect::<Vec<_>>());
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after checkpoint"));
        }
        let second_moment = moments.pop().unwrap();
        let first_moment = moments.pop().unwrap();
        Ok(Self {
            config,
            phase,
            step,
            schedule,
            teacher,
            student,
            adam: AdamState {
                config: adam_cfg,
                step_count,
                first_moment,
                second_moment,
            },
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut tmp = PathBuf::from(path);
        tmp.as_mut_os_string().push(".tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and checks that the stored model and schedule match `config`.
    pub fn load_for(path: &Path, config: &Config) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.config.net() != config.net() {
            return Err(Error::Config(format!(
                "checkpoint {} holds model {:?}, configuration asks for {:?}",
                path.display(),
                ck.config.net(),
                config.net()
            )));
        }
        if ck.schedule != config.noise_schedule()? {
            return Err(Error::Config(format!(
                "checkpoint {} was trained with a different noise schedule",
                path.display()
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::NoiseRng;

    fn small_config() -> Config {
        let mut cfg = Config::desk();
        cfg.model.clip_height = 8;
        cfg.model.clip_width = 8;
        cfg.model.hidden = 16;
        cfg.model.blocks = 1;
        cfg
    }

    fn checkpoint() -> Checkpoint {
        let cfg = small_config();
        let mut rng = NoiseRng::new(1);
        let mut student = NoiseNet::<f32>::init(cfg.net(), &mut rng).unwrap();
        for t in student.params.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.gaussian() as f32;
            }
        }
        let mut adam = AdamState::new(cfg.optimizer, student.params.tensors());
        adam.step_count = 12;
        for m in adam.first_moment.iter_mut().chain(adam.second_moment.iter_mut()) {
            for v in m.iter_mut() {
                *v = rng.uniform() as f32;
            }
        }
        Checkpoint {
            schedule: cfg.noise_schedule().unwrap(),
            config: cfg,
            phase: Phase::Selftrain,
            step: 400,
            teacher: NoiseNet::init(small_config().net(), &mut rng).unwrap(),
            student,
            adam,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b.nrck");
        let ck = checkpoint();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), ck.to_bytes());
        assert!(!dir.path().join("a/b.nrck.tmp").exists());
    }

    #[test]
    fn rejects_corruption_and_mismatch() {
        let ck = checkpoint();
        let bytes = ck.to_bytes();
        let p = Path::new("x");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(Error::Format { .. })));
        let mut newer = bytes.clone();
        newer[4] = 9;
        assert!(Checkpoint::from_bytes(&newer, p).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.nrck");
        ck.save(&path).unwrap();
        assert!(Checkpoint::load_for(&path, &small_config()).is_ok());
        let mut other = small_config();
        other.model.clip_height = 16;
        assert!(matches!(Checkpoint::load_for(&path, &other), Err(Error::Config(_))));
    }
}
