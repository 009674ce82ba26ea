//! Versioned binary checkpoints. Everything training needs to continue
//! bit-exactly is stored: both parameter stores with their ADAM state, the
//! replay memory, the master seed (all RNG streams derive from seed and round)
//! and the config snapshot.

use std::fs;
use std::path::Path;

use crate::autodiff::{ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::samplenet::PolicyVector;
use crate::selfplay::{ExperienceRecord, ReplayMemory};
use crate::signal::{Image, LineMask};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AMCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub round: u32,
    pub master_seed: u64,
    pub config_json: String,
    pub recon: ParameterStore,
    pub sample: ParameterStore,
    pub memory: ReplayMemory,
}

struct Writer {
    bytes: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { bytes: Vec::new() }
    }

    fn u16(&mut self, v: u16) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes.extend_from_slice(s.as_bytes());
    }

    fn floats(&mut self, values: &[f64]) {
        self.u32(values.len() as u32);
        for &v in values {
            self.f64(v);
        }
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }

    fn image(&mut self, img: &Image) {
        self.u32(img.height() as u32);
        self.u32(img.width() as u32);
        self.u16(img.channels() as u16);
        for &v in img.values() {
            self.f64(v);
        }
    }

    fn mask(&mut self, mask: &LineMask) {
        self.u32(mask.side() as u32);
        for line in 0..mask.side() {
            self.bytes.push(mask.is_sampled(line) as u8);
        }
    }

    fn store(&mut self, store: &ParameterStore) {
        let names: Vec<&String> = store.param_names().collect();
        self.u32(names.len() as u32);
        for name in names {
            self.str(name);
            self.tensor(store.param(name).expect("listed param"));
            let (m, v) = store.moments(name).expect("moments per param");
            self.tensor(m);
            self.tensor(v);
        }
        let buffers: Vec<&String> = store.buffer_names().collect();
        self.u32(buffers.len() as u32);
        for name in buffers {
            self.str(name);
            self.tensor(store.buffer(name).expect("listed buffer"));
        }
        self.u64(store.step());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn err(&self, what: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            what: what.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("unexpected end of file"));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
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

    fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.err("bad utf8 string"))
    }

    fn floats(&mut self) -> Result<Vec<f64>> {
        let len = self.u32()? as usize;
        (0..len).map(|_| self.f64()).collect()
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndims = self.u32()? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(self.f64()?);
        }
        Tensor::new(shape, data)
    }

    fn image(&mut self) -> Result<Image> {
        let h = self.u32()? as usize;
        let w = self.u32()? as usize;
        let c = self.u16()? as usize;
        let mut values = Vec::with_capacity(h * w * c);
        for _ in 0..h * w * c {
            values.push(self.f64()?);
        }
        Image::new(h, w, c, values)
    }

    fn mask(&mut self) -> Result<LineMask> {
        let side = self.u32()? as usize;
        let bytes = self.take(side)?;
        let mut mask = LineMask::empty(side);
        for (line, &b) in bytes.iter().enumerate() {
            mask.set(line, b != 0);
        }
        Ok(mask)
    }

    fn store(&mut self) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        let params = self.u32()? as usize;
        for _ in 0..params {
            let name = self.str()?;
            let value = self.tensor()?;
            let m = self.tensor()?;
            let v = self.tensor()?;
            store.insert_param(&name, value);
            store.set_state(&name, m, v)?;
        }
        let buffers = self.u32()? as usize;
        for _ in 0..buffers {
            let name = self.str()?;
            let value = self.tensor()?;
            store.insert_buffer(name, value);
        }
        store.set_step(self.u64()?);
        Ok(store)
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new();
        w.bytes.extend_from_slice(CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        w.u32(self.round);
        w.u64(self.master_seed);
        w.str(&self.config_json);
        w.store(&self.recon);
        w.store(&self.sample);
        w.u32(self.memory.capacity() as u32);
        let rounds: Vec<(u32, &[ExperienceRecord])> = self.memory.rounds().collect();
        w.u32(rounds.len() as u32);
        for (round_id, records) in rounds {
            w.u32(round_id);
            w.u32(records.len() as u32);
            for record in records {
                w.mask(&record.pattern);
                w.image(&record.zero_fill);
                w.image(&record.target_image);
                w.floats(record.mcts_policy.probs());
                w.image(&record.recon_at_t);
                w.u32(record.round_id);
                w.u32(record.t as u32);
            }
        }
        fs::write(path, &w.bytes)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut r = Reader {
            bytes: &bytes,
            pos: 0,
            path: path.display().to_string(),
        };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(r.err("bad magic: expected \"AMCK\""));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(format!("unsupported version {version}")));
        }
        let round = r.u32()?;
        let master_seed = r.u64()?;
        let config_json = r.str()?;
        let recon = r.store()?;
        let sample = r.store()?;
        let capacity = r.u32()? as usize;
        let round_count = r.u32()? as usize;
        let mut rounds = Vec::with_capacity(round_count);
        for _ in 0..round_count {
            let round_id = r.u32()?;
            let record_count = r.u32()? as usize;
            let mut records = Vec::with_capacity(record_count);
            for _ in 0..record_count {
                let pattern = r.mask()?;
                let zero_fill = r.image()?;
                let target_image = r.image()?;
                let mcts_policy = PolicyVector::new(r.floats()?)?;
                let recon_at_t = r.image()?;
                let rec_round = r.u32()?;
                let t = r.u32()? as usize;
                records.push(ExperienceRecord {
                    pattern,
                    zero_fill,
                    target_image,
                    mcts_policy,
                    recon_at_t,
                    round_id: rec_round,
                    t,
                });
            }
            rounds.push((round_id, records));
        }
        let memory = ReplayMemory::from_rounds(capacity, rounds)?;
        Ok(Checkpoint {
            round,
            master_seed,
            config_json,
            recon,
            sample,
            memory,
        })
    }
}
