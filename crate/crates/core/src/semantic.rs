//! Semantic branch: band-specific extractors, cross-band interaction and
//! the per-band classification heads.

use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::params::{ConvBlock, Dense, NormMode, ParamStore};
use crate::polsar::FEATURES;
use crate::tape::{Tape, Var};

/// Output channels of the shared cross-band projection.
pub const CIFEM_OUT: usize = 32;
/// Extractor width used by the full-size network.
pub const FULL_WIDTH: usize = 64;

/// Channel counts of the three extractor blocks for final width `m`:
/// `(m/4, m/2, m)`, i.e. `(16, 32, 64)` at full size.
pub fn bsfe_widths(m: usize) -> [usize; 3] {
    [(m / 4).max(1), (m / 2).max(1), m]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SemanticConfig {
    pub bands: usize,
    pub classes: usize,
    /// Extractor output channels.
    pub m: usize,
    pub cifem: bool,
}

impl SemanticConfig {
    /// Width of the concatenated per-band feature.
    pub fn concat_width(&self) -> usize {
        self.m + if self.cifem { CIFEM_OUT * (self.bands - 1) } else { 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BsfeParams {
    pub blocks: [ConvBlock; 3],
}

/// One projection block shared by every ordered band pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CifemParams {
    pub proj: ConvBlock,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SicHead {
    pub fc: Dense,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticNet {
    pub config: SemanticConfig,
    pub bsfe: Vec<BsfeParams>,
    pub cifem: Option<CifemParams>,
    pub sic: Vec<SicHead>,
}

/// Every intermediate of one semantic forward pass, indexed by band.
pub struct SemanticOut<'t> {
    /// Outputs of the three extractor blocks.
    pub blocks: Vec<[Var<'t>; 3]>,
    /// Projected interaction features, when enabled.
    pub cor: Vec<Option<Var<'t>>>,
    pub con: Vec<Var<'t>>,
    /// Pooled `con`, `[B, D]`.
    pub pooled: Vec<Var<'t>>,
    pub logits: Vec<Var<'t>>,
    /// Class probabilities, `[B, C]`.
    pub probs: Vec<Var<'t>>,
}

impl SemanticNet {
    pub fn new(config: SemanticConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        if config.bands == 0 || config.classes < 2 || config.m == 0 {
            return Err(Error::InvalidValue(format!("invalid semantic config {:?}", config)));
        }
        if config.cifem && config.bands < 2 {
            return Err(Error::InvalidValue("cross-band interaction needs at least 2 bands".into()));
        }
        let widths = bsfe_widths(config.m);
        let bsfe = (0..config.bands)
            .map(|k| {
                let mut cin = FEATURES;
                let blocks = std::array::from_fn(|j| {
                    let b = ConvBlock::new(store, &format!("bsfe.{k}.block{}", j + 1), cin, widths[j], 3, rng);
                    cin = widths[j];
                    b
                });
                BsfeParams { blocks }
            })
            .collect();
        let cifem = config.cifem.then(|| CifemParams {
            proj: ConvBlock::new(store, "cifem.proj", config.m * config.m, CIFEM_OUT, 1, rng),
        });
        let sic = (0..config.bands)
            .map(|k| SicHead {
                fc: Dense::new(store, &format!("sic.{k}.fc"), config.concat_width(), config.classes, true, rng),
            })
            .collect();
        Ok(Self {
            config,
            bsfe,
            cifem,
            sic,
        })
    }

    /// Three conv blocks of band `band`; returns every block output.
    pub fn bsfe_forward<'t>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        band: usize,
        x: Var<'t>,
        norm: &mut NormMode<'_>,
    ) -> Result<[Var<'t>; 3]> {
        let params = self
            .bsfe
            .get(band)
            .ok_or_else(|| contract("bsfe_forward", format!("no band {} in a {}-band network", band, self.bsfe.len())))?;
        let b1 = params.blocks[0].forward(tape, p, x, norm)?;
        let b2 = params.blocks[1].forward(tape, p, b1, norm)?;
        let b3 = params.blocks[2].forward(tape, p, b2, norm)?;
        Ok([b1, b2, b3])
    }

    /// Interaction features of band `band` against every other band in
    /// ascending order, each projected by the shared block.
    pub fn cifem_forward<'t>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        features: &[Var<'t>],
        band: usize,
        norm: &mut NormMode<'_>,
    ) -> Result<Var<'t>> {
        if features.len() < 2 {
            return Err(Error::InvalidValue("cross-band interaction is undefined for one band".into()));
        }
        let cifem = self
            .cifem
            .as_ref()
            .ok_or_else(|| Error::InvalidValue("network was built without cross-band interaction".into()))?;
        let mut parts = Vec::with_capacity(features.len() - 1);
        for (other, &xo) in features.iter().enumerate() {
            if other == band {
                continue;
            }
            parts.push(cifem.proj.forward_pair(tape, p, features[band], xo, norm)?);
        }
        tape.concat_channels(&parts)
    }

    /// Pooling, FC and softmax over a concatenated feature.
    pub fn sic_forward<'t>(&self, tape: &'t Tape, p: &[Var<'t>], band: usize, con: Var<'t>) -> Result<[Var<'t>; 3]> {
        let head = self
            .sic
            .get(band)
            .ok_or_else(|| contract("sic_forward", format!("no head for band {}", band)))?;
        let pooled = tape.global_avg_pool(con)?;
        let logits = head.fc.forward(tape, p, pooled)?;
        let probs = tape.softmax(logits)?;
        Ok([pooled, logits, probs])
    }

    /// Full semantic pass over per-band patch batches `[B, 9, n, n]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        patches: &[Var<'t>],
        norm: &mut NormMode<'_>,
    ) -> Result<SemanticOut<'t>> {
        let k = self.config.bands;
        if patches.len() != k {
            return Err(contract("semantic_forward", format!("{} patch batches for {} bands", patches.len(), k)));
        }
        let blocks = patches
            .iter()
            .enumerate()
            .map(|(b, &x)| self.bsfe_forward(tape, p, b, x, norm))
            .collect::<Result<Vec<_>>>()?;
        let features: Vec<Var<'t>> = blocks.iter().map(|b| b[2]).collect();
        let mut out = SemanticOut {
            blocks,
            cor: Vec::with_capacity(k),
            con: Vec::with_capacity(k),
            pooled: Vec::with_capacity(k),
            logits: Vec::with_capacity(k),
            probs: Vec::with_capacity(k),
        };
        for band in 0..k {
            let cor = if self.config.cifem {
                Some(self.cifem_forward(tape, p, &features, band, norm)?)
            } else {
                None
            };
            let con = match cor {
                Some(c) => tape.concat_channels(&[features[band], c])?,
                None => features[band],
            };
            let [pooled, logits, probs] = self.sic_forward(tape, p, band, con)?;
            out.cor.push(cor);
            out.con.push(con);
            out.pooled.push(pooled);
            out.logits.push(logits);
            out.probs.push(probs);
        }
        Ok(out)
    }
}

/// Channel `i*m + j` of the result is `xk[i] * xo[j]`.
pub fn cifem_correlate<'t>(tape: &'t Tape, xk: Var<'t>, xo: Var<'t>) -> Result<Var<'t>> {
    tape.channel_outer(xk, xo)
}
