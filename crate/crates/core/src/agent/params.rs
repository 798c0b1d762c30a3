//! Policy parameters and their binary persistence.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw feature size of one sub-image: 4x4 patch means times 3 channels.
pub const RAW_DIM: usize = 48;
/// Direction encoding size: absolute and arrival-relative sin/cos.
pub const DIR_DIM: usize = 4;
pub const DEFAULT_D: usize = 64;

const MAGIC: &[u8; 4] = b"VHP1";

/// Tensor slots, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Embedding,
    InstrWz,
    InstrWr,
    InstrWn,
    InstrUz,
    InstrUr,
    InstrUn,
    InstrBz,
    InstrBr,
    InstrBn,
    HistWz,
    HistWr,
    HistWn,
    HistUz,
    HistUr,
    HistUn,
    HistBz,
    HistBr,
    HistBn,
    ObsW,
    ObsB,
    DirW,
    FuseW,
    FuseB,
    Stop,
}

impl Slot {
    pub const ALL: [Slot; 25] = [
        Slot::Embedding,
        Slot::InstrWz,
        Slot::InstrWr,
        Slot::InstrWn,
        Slot::InstrUz,
        Slot::InstrUr,
        Slot::InstrUn,
        Slot::InstrBz,
        Slot::InstrBr,
        Slot::InstrBn,
        Slot::HistWz,
        Slot::HistWr,
        Slot::HistWn,
        Slot::HistUz,
        Slot::HistUr,
        Slot::HistUn,
        Slot::HistBz,
        Slot::HistBr,
        Slot::HistBn,
        Slot::ObsW,
        Slot::ObsB,
        Slot::DirW,
        Slot::FuseW,
        Slot::FuseB,
        Slot::Stop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Slot::Embedding => "embedding",
            Slot::InstrWz => "instr.w_z",
            Slot::InstrWr => "instr.w_r",
            Slot::InstrWn => "instr.w_n",
            Slot::InstrUz => "instr.u_z",
            Slot::InstrUr => "instr.u_r",
            Slot::InstrUn => "instr.u_n",
            Slot::InstrBz => "instr.b_z",
            Slot::InstrBr => "instr.b_r",
            Slot::InstrBn => "instr.b_n",
            Slot::HistWz => "hist.w_z",
            Slot::HistWr => "hist.w_r",
            Slot::HistWn => "hist.w_n",
            Slot::HistUz => "hist.u_z",
            Slot::HistUr => "hist.u_r",
            Slot::HistUn => "hist.u_n",
            Slot::HistBz => "hist.b_z",
            Slot::HistBr => "hist.b_r",
            Slot::HistBn => "hist.b_n",
            Slot::ObsW => "obs.w",
            Slot::ObsB => "obs.b",
            Slot::DirW => "dir.w",
            Slot::FuseW => "fuse.w",
            Slot::FuseB => "fuse.b",
            Slot::Stop => "stop",
        }
    }

    /// `(rows, cols)` for hidden size `d` and vocabulary size `v`.
    pub fn shape(self, d: usize, v: usize) -> (usize, usize) {
        use Slot::*;
        match self {
            Embedding => (v, d),
            InstrWz | InstrWr | InstrWn | InstrUz | InstrUr | InstrUn => (d, d),
            HistWz | HistWr | HistWn | HistUz | HistUr | HistUn => (d, d),
            InstrBz | InstrBr | InstrBn | HistBz | HistBr | HistBn => (d, 1),
            ObsW => (d, RAW_DIM),
            ObsB | FuseB | Stop => (d, 1),
            DirW => (d, DIR_DIM),
            FuseW => (d, 3 * d),
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// JSON manifest written ahead of the raw parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsHeader {
    pub d: usize,
    pub vocab_size: usize,
    pub tensors: Vec<TensorShape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    d: usize,
    vocab_size: usize,
    tensors: Vec<Vec<f64>>,
}

impl PolicyParams {
    pub fn zeros(vocab_size: usize, d: usize) -> Self {
        let tensors = Slot::ALL
            .iter()
            .map(|s| {
                let (r, c) = s.shape(d, vocab_size);
                vec![0.0; r * c]
            })
            .collect();
        Self {
            d,
            vocab_size,
            tensors,
        }
    }

    /// Glorot-uniform matrices, zero biases, small random embeddings.
    pub fn random(vocab_size: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(vocab_size, d);
        for slot in Slot::ALL {
            let (r, c) = slot.shape(d, vocab_size);
            let bound = match slot {
                Slot::Embedding | Slot::Stop => 0.5,
                _ if c == 1 => 0.0,
                _ => (6.0 / (r + c) as f64).sqrt(),
            };
            if bound > 0.0 {
                p.tensors[slot.index()]
                    .iter_mut()
                    .for_each(|v| *v = rng.gen_range(-bound..bound));
            }
        }
        p
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn get(&self, slot: Slot) -> &[f64] {
        &self.tensors[slot.index()]
    }

    pub fn get_mut(&mut self, slot: Slot) -> &mut [f64] {
        &mut self.tensors[slot.index()]
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.tensors
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    pub fn header(&self, config_hash: Option<String>) -> ParamsHeader {
        ParamsHeader {
            d: self.d,
            vocab_size: self.vocab_size,
            tensors: Slot::ALL
                .iter()
                .map(|s| {
                    let (rows, cols) = s.shape(self.d, self.vocab_size);
                    TensorShape {
                        name: s.name().to_string(),
                        rows,
                        cols,
                    }
                })
                .collect(),
            config_hash,
        }
    }

    /// Writes `VHP1`, a little-endian u32 header length, the JSON header,
    /// then every value as a little-endian f64 in slot order.
    pub fn write_to<W: Write>(&self, mut out: W, config_hash: Option<String>) -> Result<()> {
        let header = serde_json::to_vec(&self.header(config_hash))?;
        out.write_all(MAGIC)?;
        out.write_all(&(header.len() as u32).to_le_bytes())?;
        out.write_all(&header)?;
        for v in self.tensors.iter().flatten() {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self, config_hash: Option<String>) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.count() * 8 + 4096);
        self.write_to(&mut buf, config_hash)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut input: R, path: &str) -> Result<(Self, ParamsHeader)> {
        let corrupt = |m: &str| Error::Corrupt {
            path: path.to_string(),
            message: m.to_string(),
        };
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic, not a parameter blob"));
        }
        let mut len = [0u8; 4];
        input.read_exact(&mut len)?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        input.read_exact(&mut header)?;
        let header: ParamsHeader = serde_json::from_slice(&header)?;
        let mut p = Self::zeros(header.vocab_size, header.d);
        if header != p.header(header.config_hash.clone()) {
            return Err(corrupt("tensor manifest does not match the policy layout"));
        }
        let mut raw = Vec::new();
        input.read_to_end(&mut raw)?;
        if raw.len() != p.count() * 8 {
            return Err(corrupt(&format!(
                "expected {} parameter bytes, found {}",
                p.count() * 8,
                raw.len()
            )));
        }
        let mut chunks = raw.chunks_exact(8);
        for v in p.tensors.iter_mut().flatten() {
            let c = chunks.next().expect("length checked");
            *v = f64::from_le_bytes(c.try_into().expect("8-byte chunk"));
        }
        if !p.is_finite() {
            return Err(corrupt("non-finite parameter value"));
        }
        Ok((p, header))
    }
}
