//! Adaptive weighting fusion, its closed-form weight update, the training
//! objective and the baseline fusion strategies.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::tape::{Tape, Var};

/// Floor applied to per-band losses before the weight update.
pub const LOSS_FLOOR: f64 = 1e-12;

/// Band weights on the simplex and their power exponent.
#[derive(Clone, Debug, PartialEq)]
pub struct AwfState {
    alpha: Vec<f64>,
    gamma: f64,
}

impl AwfState {
    /// Uniform weights `1/K`.
    pub fn new(bands: usize, gamma: f64) -> Result<Self> {
        if bands == 0 {
            return Err(Error::InvalidValue("need at least one band".into()));
        }
        Self::with_alpha(vec![1.0 / bands as f64; bands], gamma)
    }

    pub fn with_alpha(alpha: Vec<f64>, gamma: f64) -> Result<Self> {
        if !(gamma > 1.0) || !gamma.is_finite() {
            return Err(Error::InvalidValue(format!("gamma must be a finite value > 1, got {}", gamma)));
        }
        let total: f64 = alpha.iter().sum();
        if alpha.is_empty() || alpha.iter().any(|&a| !(a >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidValue(format!("alpha {:?} is not on the simplex", alpha)));
        }
        Ok(Self { alpha, gamma })
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn bands(&self) -> usize {
        self.alpha.len()
    }

    /// `alpha_k ^ gamma`.
    pub fn weights(&self) -> Vec<f64> {
        self.alpha.iter().map(|a| a.powf(self.gamma)).collect()
    }

    /// Replaces `alpha` by the closed-form minimizer for `losses`.
    pub fn update(&mut self, losses: &[f64]) -> Result<()> {
        if losses.len() != self.alpha.len() {
            return Err(contract("update_alpha", format!("{} losses for {} bands", losses.len(), self.alpha.len())));
        }
        self.alpha = update_alpha(losses, self.gamma)?;
        Ok(())
    }
}

/// `alpha_k = L_k^(1/(1-gamma)) / sum_m L_m^(1/(1-gamma))`, the minimizer of
/// `sum_k alpha_k^gamma L_k` over the simplex. Computed in the log domain.
pub fn update_alpha(losses: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(gamma > 1.0) {
        return Err(Error::InvalidValue(format!("gamma must be > 1, got {}", gamma)));
    }
    if losses.is_empty() {
        return Err(Error::InvalidValue("no losses".into()));
    }
    if let Some(bad) = losses.iter().find(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("band loss {}", bad)));
    }
    let e = 1.0 / (1.0 - gamma);
    let logs: Vec<f64> = losses.iter().map(|l| e * l.max(LOSS_FLOOR).ln()).collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|v| (v - top).exp()).collect();
    let s: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / s).collect())
}

/// `sum_k alpha_k^gamma Z_k`.
pub fn awf_fuse<'t>(tape: &'t Tape, zs: &[Var<'t>], state: &AwfState) -> Result<Var<'t>> {
    if zs.len() != state.bands() || zs.is_empty() {
        return Err(contract("awf_fuse", format!("{} outputs for {} weights", zs.len(), state.bands())));
    }
    let w = state.weights();
    let mut acc = tape.scale(zs[0], w[0]);
    for (z, wk) in zs.iter().zip(&w).skip(1) {
        acc = tape.add(acc, tape.scale(*z, *wk))?;
    }
    Ok(acc)
}

/// Value-level [`awf_fuse`] for inference.
pub fn awf_fuse_values(zs: &[&[f64]], state: &AwfState) -> Result<Vec<f64>> {
    if zs.len() != state.bands() || zs.is_empty() {
        return Err(contract("awf_fuse", format!("{} outputs for {} weights", zs.len(), state.bands())));
    }
    let len = zs[0].len();
    if zs.iter().any(|z| z.len() != len) {
        return Err(contract("awf_fuse", "outputs differ in length"));
    }
    let mut y = vec![0.0; len];
    for (z, w) in zs.iter().zip(state.weights()) {
        y.iter_mut().zip(z.iter()).for_each(|(a, b)| *a += w * b);
    }
    Ok(y)
}

/// Fusion strategy across bands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Awf,
    Equal,
    Concat,
    Max,
    Product,
    Sum,
}

impl FusionMode {
    pub const ALL: [FusionMode; 6] = [
        FusionMode::Awf,
        FusionMode::Equal,
        FusionMode::Concat,
        FusionMode::Max,
        FusionMode::Product,
        FusionMode::Sum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Awf => "awf",
            FusionMode::Equal => "equal",
            FusionMode::Concat => "concat",
            FusionMode::Max => "max",
            FusionMode::Product => "product",
            FusionMode::Sum => "sum",
        }
    }

    pub fn code(self) -> u32 {
        FusionMode::ALL.iter().position(|&m| m == self).unwrap() as u32
    }

    pub fn from_code(code: u32) -> Option<Self> {
        FusionMode::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidValue(format!("unknown fusion mode '{}'", s)))
    }
}

/// Non-adaptive fusion of per-band outputs. `concat_fc` holds the weight
/// `[C, K*C]` and bias `[C]` of the concatenation head and is required for
/// (only for) [`FusionMode::Concat`].
pub fn baseline_fuse<'t>(
    tape: &'t Tape,
    zs: &[Var<'t>],
    mode: FusionMode,
    concat_fc: Option<(Var<'t>, Var<'t>)>,
) -> Result<Var<'t>> {
    if zs.is_empty() {
        return Err(contract("baseline_fuse", "no outputs to fuse"));
    }
    let fold = |f: &dyn Fn(Var<'t>, Var<'t>) -> Result<Var<'t>>| -> Result<Var<'t>> {
        zs[1..].iter().try_fold(zs[0], |acc, &z| f(acc, z))
    };
    match mode {
        FusionMode::Sum => fold(&|a, b| tape.add(a, b)),
        FusionMode::Equal => Ok(tape.scale(fold(&|a, b| tape.add(a, b))?, 1.0 / zs.len() as f64)),
        FusionMode::Max => fold(&|a, b| tape.max(a, b)),
        FusionMode::Product => fold(&|a, b| tape.mul(a, b)),
        FusionMode::Concat => {
            let (w, b) = concat_fc.ok_or_else(|| contract("baseline_fuse", "concat fusion needs its FC head"))?;
            let axis = zs[0].shape().len() - 1;
            let cat = tape.concat(zs, axis)?;
            tape.linear(cat, w, Some(b))
        }
        FusionMode::Awf => Err(Error::InvalidValue("awf is not a baseline mode".into())),
    }
}

/// Loss components of one batch (or epoch means).
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    /// Per-band cross-entropy of the semantic heads.
    pub band_sic: Vec<f64>,
    /// Per-band cross-entropy of the topology heads.
    pub band_tpc: Vec<f64>,
    pub sic: f64,
    pub tpc: f64,
    pub consistency: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossReport {
    /// Per-band `L_k^SIC + L_k^TPC`, the input of the weight update.
    pub fn band_totals(&self) -> Vec<f64> {
        self.band_sic
            .iter()
            .enumerate()
            .map(|(k, s)| s + self.band_tpc.get(k).copied().unwrap_or(0.0))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        [self.sic, self.tpc, self.consistency, self.total]
            .iter()
            .chain(&self.band_sic)
            .chain(&self.band_tpc)
            .all(|v| v.is_finite())
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut out = reports.first().cloned().unwrap_or_default();
        let avg = |f: &dyn Fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        out.sic = avg(&|r| r.sic);
        out.tpc = avg(&|r| r.tpc);
        out.consistency = avg(&|r| r.consistency);
        out.total = avg(&|r| r.total);
        for k in 0..out.band_sic.len() {
            out.band_sic[k] = avg(&|r| r.band_sic[k]);
        }
        for k in 0..out.band_tpc.len() {
            out.band_tpc[k] = avg(&|r| r.band_tpc[k]);
        }
        out
    }
}

/// How per-band terms are weighted and how branch outputs are combined.
pub enum Fuser<'a, 't> {
    Awf(&'a AwfState),
    Baseline {
        mode: FusionMode,
        sic_fc: Option<(Var<'t>, Var<'t>)>,
        tpc_fc: Option<(Var<'t>, Var<'t>)>,
    },
}

impl<'t> Fuser<'_, 't> {
    fn band_weights(&self, k: usize) -> Vec<f64> {
        match self {
            Fuser::Awf(s) => s.weights(),
            Fuser::Baseline { .. } => vec![1.0 / k as f64; k],
        }
    }

    fn fuse(&self, tape: &'t Tape, zs: &[Var<'t>], tpc: bool) -> Result<Var<'t>> {
        match self {
            Fuser::Awf(s) => awf_fuse(tape, zs, s),
            Fuser::Baseline { mode, sic_fc, tpc_fc } => {
                baseline_fuse(tape, zs, *mode, if tpc { *tpc_fc } else { *sic_fc })
            }
        }
    }

    /// Whether a cross-entropy term on the fused output is added.
    fn fused_ce(&self) -> bool {
        matches!(self, Fuser::Baseline { mode: FusionMode::Concat, .. })
    }
}

/// Differentiable objective of one batch.
pub struct Objective<'t> {
    pub total: Var<'t>,
    pub y_sic: Var<'t>,
    pub y_tpc: Option<Var<'t>>,
    pub report: LossReport,
}

/// `l_SIC + l_TPC + lambda * (1/N) ||Y_SIC - Y_TPC||_2`, where each branch
/// loss is the weighted sum of per-band cross-entropies over `[N, C]`
/// probabilities and `Y` are the fused outputs. Without topology outputs
/// the objective reduces to `l_SIC`.
pub fn compute_losses<'t>(
    tape: &'t Tape,
    sic: &[Var<'t>],
    tpc: Option<&[Var<'t>]>,
    labels: &[usize],
    fuser: &Fuser<'_, 't>,
    lambda: f64,
) -> Result<Objective<'t>> {
    const OP: &str = "compute_losses";
    let k = sic.len();
    if k == 0 {
        return Err(contract(OP, "no band outputs"));
    }
    if let Some(t) = tpc {
        if t.len() != k {
            return Err(contract(OP, format!("{} semantic but {} topology outputs", k, t.len())));
        }
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidValue(format!("lambda must be >= 0, got {}", lambda)));
    }
    let n = labels.len();
    let w = fuser.band_weights(k);

    let branch = |zs: &[Var<'t>], fused: Var<'t>| -> Result<(Var<'t>, Vec<f64>)> {
        let mut per_band = Vec::with_capacity(k);
        let mut acc: Option<Var<'t>> = None;
        for (z, wk) in zs.iter().zip(&w) {
            let ce = tape.cross_entropy(*z, labels)?;
            per_band.push(ce.item());
            let term = tape.scale(ce, *wk);
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        let mut loss = acc.expect("at least one band");
        if fuser.fused_ce() {
            let p = tape.softmax(fused)?;
            loss = tape.add(loss, tape.cross_entropy(p, labels)?)?;
        }
        Ok((loss, per_band))
    };

    let y_sic = fuser.fuse(tape, sic, false)?;
    let (l_sic, band_sic) = branch(sic, y_sic)?;
    let mut report = LossReport {
        band_sic,
        band_tpc: vec![0.0; k],
        sic: l_sic.item(),
        lambda,
        ..Default::default()
    };
    let (total, y_tpc) = match tpc {
        Some(t) => {
            let y_tpc = fuser.fuse(tape, t, true)?;
            let (l_tpc, band_tpc) = branch(t, y_tpc)?;
            let diff = tape.sub(y_sic, y_tpc)?;
            let cons = tape.scale(tape.l2_norm(diff), 1.0 / n as f64);
            report.band_tpc = band_tpc;
            report.tpc = l_tpc.item();
            report.consistency = cons.item();
            let total = tape.add(tape.add(l_sic, l_tpc)?, tape.scale(cons, lambda))?;
            (total, Some(y_tpc))
        }
        None => (l_sic, None),
    };
    report.total = total.item();
    Ok(Objective {
        total,
        y_sic,
        y_tpc,
        report,
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn gamma_must_exceed_one() {
        assert!(AwfState::new(2, 1.0).is_err());
        assert!(AwfState::new(2, f64::NAN).is_err());
        assert!(AwfState::new(2, 1.5).is_ok());
    }

    #[test]
    fn awf_values() {
        let s = AwfState::with_alpha(vec![0.5, 0.5], 2.0).unwrap();
        let y = awf_fuse_values(&[&[1.0, 2.0], &[3.0, 6.0]], &s).unwrap();
        assert_eq!(y, vec![1.0, 2.0]);
        let d = AwfState::with_alpha(vec![1.0, 0.0], 3.0).unwrap();
        assert_eq!(awf_fuse_values(&[&[0.3, 0.7], &[0.9, 0.1]], &d).unwrap(), vec![0.3, 0.7]);
    }

    #[test]
    fn update_rejects_non_finite() {
        assert!(update_alpha(&[1.0, f64::NAN], 3.0).is_err());
        assert!(update_alpha(&[1.0, f64::INFINITY], 3.0).is_err());
    }

    #[test]
    fn zero_loss_hits_floor() {
        let a = update_alpha(&[0.0, 1.0], 2.0).unwrap();
        assert!(a[0] > 0.999_999);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[1.0]), 0);
    }

    #[test]
    fn mode_codes_round_trip() {
        for m in FusionMode::ALL {
            assert_eq!(FusionMode::from_code(m.code()), Some(m));
            assert_eq!(m.name().parse::<FusionMode>().unwrap(), m);
        }
        assert!("median".parse::<FusionMode>().is_err());
    }

    #[test]
    fn report_mean() {
        let a = LossReport {
            band_sic: vec![1.0],
            band_tpc: vec![3.0],
            total: 2.0,
            ..Default::default()
        };
        let b = LossReport {
            band_sic: vec![3.0],
            band_tpc: vec![1.0],
            total: 4.0,
            ..Default::default()
        };
        let m = LossReport::mean(&[a, b]);
        assert_eq!(m.band_sic, vec![2.0]);
        assert_eq!(m.total, 3.0);
        assert_eq!(m.band_totals(), vec![4.0]);
    }

    #[test]
    fn concat_needs_head() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::from_vec(vec![0.5, 0.5]));
        assert!(baseline_fuse(&tape, &[z, z], FusionMode::Concat, None).is_err());
        assert!(baseline_fuse(&tape, &[z, z], FusionMode::Awf, None).is_err());
    }
}
