//! The complete network for K bands and its MFST checkpoint format.
//!
//! MFST layout (little endian): `"MFST"`, u32 version (1), u32 K, u32 C,
//! u32 m, u32 record count, then records of u32 name length, UTF-8 name,
//! u32 rank, rank x u32 extents and the f32 payload. Records cover the
//! architecture switches (`config.*`), every learnable tensor, batch-norm
//! running statistics (`*.running_mean`, `*.running_var`, `*.tracked`) and
//! the fusion state (`awf.alpha`, `awf.gamma`).

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{AwfState, FusionMode};
use crate::params::{Dense, ParamStore};
use crate::polsar::{Part, DEFAULT_PATCH};
use crate::semantic::{SemanticConfig, SemanticNet};
use crate::tensor::Tensor;
use crate::topo::TopoNet;

const MAGIC: &[u8; 4] = b"MFST";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub bands: usize,
    pub classes: usize,
    pub m: usize,
    pub patch: usize,
    pub cifem: bool,
    pub tpc: bool,
    pub fusion: FusionMode,
}

impl ModelConfig {
    pub fn new(bands: usize, classes: usize, m: usize) -> Self {
        Self {
            bands,
            classes,
            m,
            patch: DEFAULT_PATCH,
            cifem: bands > 1,
            tpc: true,
            fusion: FusionMode::Awf,
        }
    }

    pub fn semantic(&self) -> SemanticConfig {
        SemanticConfig {
            bands: self.bands,
            classes: self.classes,
            m: self.m,
            cifem: self.cifem,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub semantic: SemanticNet,
    pub topo: Option<TopoNet>,
    /// FC heads of concatenation fusion, for the semantic and topology outputs.
    pub concat_fc: Option<(Dense, Option<Dense>)>,
    pub awf: AwfState,
    /// Chessboard part the model was trained on.
    pub trained_on: Option<Part>,
}

impl Model {
    pub fn new(config: ModelConfig, gamma: f64, seed: u64) -> Result<Self> {
        if config.patch.is_multiple_of(2) {
            return Err(Error::InvalidValue(format!("patch size {} must be odd", config.patch)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let semantic = SemanticNet::new(config.semantic(), &mut store, &mut rng)?;
        let d = config.semantic().concat_width();
        let topo = config
            .tpc
            .then(|| TopoNet::new(&mut store, config.bands, d, config.classes, &mut rng));
        let concat_fc = (config.fusion == FusionMode::Concat).then(|| {
            let kc = config.bands * config.classes;
            let sic = Dense::new(&mut store, "fusion.sic_fc", kc, config.classes, true, &mut rng);
            let tpc = config
                .tpc
                .then(|| Dense::new(&mut store, "fusion.tpc_fc", kc, config.classes, true, &mut rng));
            (sic, tpc)
        });
        Ok(Self {
            config,
            store,
            semantic,
            topo,
            concat_fc,
            awf: AwfState::new(config.bands, gamma)?,
            trained_on: None,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut records: Vec<(String, Tensor)> = vec![
            ("config.patch".into(), Tensor::from_vec(vec![c.patch as f64])),
            ("config.cifem".into(), Tensor::from_vec(vec![c.cifem as u8 as f64])),
            ("config.tpc".into(), Tensor::from_vec(vec![c.tpc as u8 as f64])),
            ("config.fusion".into(), Tensor::from_vec(vec![c.fusion.code() as f64])),
            (
                "config.part".into(),
                Tensor::from_vec(vec![self.trained_on.map_or(2.0, |p| p.index() as f64)]),
            ),
        ];
        for (name, t) in self.store.names().iter().zip(self.store.tensors()) {
            records.push((name.clone(), t.clone()));
        }
        for (name, s) in self.store.stat_names().iter().zip(self.store.stats()) {
            records.push((format!("{name}.running_mean"), Tensor::from_vec(s.mean.clone())));
            records.push((format!("{name}.running_var"), Tensor::from_vec(s.var.clone())));
            records.push((format!("{name}.tracked"), Tensor::from_vec(vec![s.tracked as f64])));
        }
        records.push(("awf.alpha".into(), Tensor::from_vec(self.awf.alpha().to_vec())));
        records.push(("awf.gamma".into(), Tensor::from_vec(vec![self.awf.gamma()])));

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in [VERSION, c.bands as u32, c.classes as u32, c.m as u32, records.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (name, t) in &records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &e in &t.shape {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Parse("bad magic: not an MFST checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Parse(format!("unsupported MFST version {}", version)));
        }
        let bands = r.u32()? as usize;
        let classes = r.u32()? as usize;
        let m = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Parse("record name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Parse(format!("record '{}' has rank {}", name, rank)));
            }
            let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Parse(format!("record '{}' size overflows", name)))?;
            let data = r
                .take(n)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            records.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let mut take = |name: &str| -> Result<Tensor> {
            let i = records
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Parse(format!("checkpoint lacks '{}'", name)))?;
            Ok(records.swap_remove(i).1)
        };
        let scalar = |t: Tensor| -> Result<f64> {
            if t.numel() != 1 {
                return Err(Error::Parse("expected a one-element record".into()));
            }
            Ok(t.data[0])
        };
        let patch = scalar(take("config.patch")?)? as usize;
        let cifem = scalar(take("config.cifem")?)? != 0.0;
        let tpc = scalar(take("config.tpc")?)? != 0.0;
        let fusion = FusionMode::from_code(scalar(take("config.fusion")?)? as u32)
            .ok_or_else(|| Error::Parse("unknown fusion code".into()))?;
        let trained_on = Part::from_index(scalar(take("config.part")?)? as usize);
        let gamma = scalar(take("awf.gamma")?)?;
        let alpha = take("awf.alpha")?.data;
        let config = ModelConfig {
            bands,
            classes,
            m,
            patch,
            cifem,
            tpc,
            fusion,
        };
        let mut model = Model::new(config, gamma, 0).map_err(|e| Error::Parse(e.to_string()))?;
        // f32 storage can leave the weights a few ulps off the simplex
        let total: f64 = alpha.iter().sum();
        model.awf = AwfState::with_alpha(alpha.iter().map(|a| a / total).collect(), gamma)
            .map_err(|e| Error::Parse(e.to_string()))?;
        model.trained_on = trained_on;
        let names = model.store.names().to_vec();
        for name in names {
            let t = take(&name)?;
            model.store.load_tensor(&name, t)?;
        }
        let stat_names = model.store.stat_names().to_vec();
        for (i, name) in stat_names.iter().enumerate() {
            let mean = take(&format!("{name}.running_mean"))?.data;
            let var = take(&format!("{name}.running_var"))?.data;
            let tracked = scalar(take(&format!("{name}.tracked"))?)? as u64;
            let s = &mut model.store.stats_mut()[i];
            if mean.len() != s.mean.len() || var.len() != s.var.len() {
                return Err(Error::DimensionMismatch(format!("statistics '{}' have the wrong width", name)));
            }
            s.mean = mean;
            s.var = var;
            s.tracked = tracked;
        }
        if let Some((name, _)) = records.first() {
            return Err(Error::Parse(format!("unexpected record '{}'", name)));
        }
        Ok(model)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse(format!("truncated checkpoint at offset {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
