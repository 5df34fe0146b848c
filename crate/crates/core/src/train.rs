//! Training loop and chessboard-aware inference.

use std::fmt::Write as _;
use std::rc::Rc;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{argmax, awf_fuse, baseline_fuse, compute_losses, FusionMode, Fuser, LossReport};
use crate::metrics::ConfusionMatrix;
use crate::model::{Model, ModelConfig};
use crate::optim::AdamState;
use crate::params::NormMode;
use crate::polsar::sampling::extract_patch_into;
use crate::polsar::{
    draw_training_samples, Anchor, Augment, ChessboardSplit, LabelRaster, Part, PolSarCube, SampleBudget, FEATURES,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::topo::{build_graph, BandGraph};

/// Every knob of a training run. Field defaults follow the reference setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub k_neighbors: usize,
    /// Cap on neighbors per node during aggregation; `None` uses all.
    pub neighbor_sample: Option<usize>,
    pub samples: usize,
    /// `samples` counts per class when true, in total otherwise.
    pub samples_per_class: bool,
    pub augment: bool,
    pub seed: u64,
    pub fusion: FusionMode,
    pub cifem: bool,
    pub tpc: bool,
    /// Extractor output channels (64 at full size).
    pub m: usize,
    pub patch: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            learning_rate: 1e-3,
            batch_size: 100,
            lambda: 0.1,
            gamma: 3.0,
            k_neighbors: crate::topo::DEFAULT_K,
            neighbor_sample: None,
            samples: 200,
            samples_per_class: true,
            augment: true,
            seed: 0,
            fusion: FusionMode::Awf,
            cifem: true,
            tpc: true,
            m: 64,
            patch: 13,
            grid_rows: 20,
            grid_cols: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidValue(msg));
        if !(self.gamma > 1.0) || !self.gamma.is_finite() {
            return bad(format!("gamma must be > 1, got {}", self.gamma));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("k_neighbors", self.k_neighbors),
            ("samples", self.samples),
            ("m", self.m),
            ("grid_rows", self.grid_rows),
            ("grid_cols", self.grid_cols),
        ] {
            if v == 0 {
                return bad(format!("{} must be positive", name));
            }
        }
        if self.neighbor_sample == Some(0) {
            return bad("neighbor_sample must be positive".into());
        }
        if self.patch.is_multiple_of(2) {
            return bad(format!("patch must be odd, got {}", self.patch));
        }
        Ok(())
    }

    pub fn budget(&self) -> SampleBudget {
        if self.samples_per_class {
            SampleBudget::PerClass(self.samples)
        } else {
            SampleBudget::Total(self.samples)
        }
    }

    pub fn model_config(&self, bands: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            bands,
            classes,
            m: self.m,
            patch: self.patch,
            cifem: self.cifem && bands > 1,
            tpc: self.tpc,
            fusion: self.fusion,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossReport,
    /// Band weights after this epoch's update.
    pub alpha: Vec<f64>,
}

impl EpochLog {
    pub fn line(&self) -> String {
        let mut s = format!(
            "epoch={} l_sic={:.9} l_tpc={:.9} l_consistency={:.9} l_total={:.9} alpha=",
            self.epoch, self.losses.sic, self.losses.tpc, self.losses.consistency, self.losses.total
        );
        for (i, a) in self.alpha.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            let _ = write!(s, "{:.12}", a);
        }
        s
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn log_text(&self) -> String {
        self.history.iter().map(|e| e.line() + "\n").collect()
    }
}

/// Training samples: anchors, each optionally expanded by the six transforms.
pub struct TrainingSet {
    pub anchors: Vec<Anchor>,
    pub items: Vec<(usize, Augment)>,
    pub patch: usize,
}

impl TrainingSet {
    pub fn new(anchors: Vec<Anchor>, augment: bool, patch: usize) -> Self {
        let modes: &[Augment] = if augment { &Augment::ALL } else { &[Augment::Identity] };
        let items = (0..anchors.len())
            .flat_map(|a| modes.iter().map(move |&m| (a, m)))
            .collect();
        Self { anchors, items, patch }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Zero-based class index of item `i`.
    pub fn label(&self, i: usize) -> usize {
        self.anchors[self.items[i].0].label as usize - 1
    }

    /// Patches `[B, 9, n, n]` of band `band` for the listed items.
    pub fn batch(&self, cube: &PolSarCube, band: usize, which: &[usize]) -> Tensor {
        let n = self.patch;
        let size = FEATURES * n * n;
        let mut data = vec![0.0; which.len() * size];
        let mut raw = vec![0.0; size];
        for (slot, &i) in which.iter().enumerate() {
            let (a, mode) = self.items[i];
            let anchor = self.anchors[a];
            extract_patch_into(cube, band, anchor.row, anchor.col, n, &mut raw);
            mode.apply_slice(&raw, FEATURES, n, &mut data[slot * size..(slot + 1) * size]);
        }
        Tensor::new(vec![which.len(), FEATURES, n, n], data).expect("batch shape")
    }
}

/// Patches of the given pixels without augmentation.
fn pixel_batch(cube: &PolSarCube, band: usize, pixels: &[usize], n: usize) -> Tensor {
    let size = FEATURES * n * n;
    let w = cube.width();
    let mut data = vec![0.0; pixels.len() * size];
    for (slot, &i) in pixels.iter().enumerate() {
        extract_patch_into(cube, band, i / w, i % w, n, &mut data[slot * size..(slot + 1) * size]);
    }
    Tensor::new(vec![pixels.len(), FEATURES, n, n], data).expect("batch shape")
}

fn check_compatible(model: &Model, cube: &PolSarCube) -> Result<()> {
    if cube.band_count() != model.config.bands || cube.classes() != model.config.classes {
        return Err(Error::DimensionMismatch(format!(
            "model expects {} bands and {} classes, cube has {} and {}",
            model.config.bands,
            model.config.classes,
            cube.band_count(),
            cube.classes()
        )));
    }
    Ok(())
}

/// Concatenation heads bound on `vars`, if the model has them.
fn concat_heads<'t>(model: &Model, vars: &[Var<'t>]) -> (Option<(Var<'t>, Var<'t>)>, Option<(Var<'t>, Var<'t>)>) {
    match &model.concat_fc {
        Some((s, t)) => {
            let bind = |d: &crate::params::Dense| (vars[d.weight], vars[d.bias.expect("concat head has bias")]);
            (Some(bind(s)), t.as_ref().map(bind))
        }
        None => (None, None),
    }
}

fn fuser<'a, 't>(model: &'a Model, vars: &[Var<'t>]) -> Fuser<'a, 't> {
    if model.config.fusion == FusionMode::Awf {
        Fuser::Awf(&model.awf)
    } else {
        let (sic_fc, tpc_fc) = concat_heads(model, vars);
        Fuser::Baseline {
            mode: model.config.fusion,
            sic_fc,
            tpc_fc,
        }
    }
}

/// Pooled semantic features of every training item, per band, computed
/// with batch statistics and without touching the running statistics.
fn feature_pass(model: &Model, cube: &PolSarCube, set: &TrainingSet, batch: usize) -> Result<Vec<Vec<f64>>> {
    let k = model.config.bands;
    let mut out = vec![Vec::with_capacity(set.len() * model.config.semantic().concat_width()); k];
    let order: Vec<usize> = (0..set.len()).collect();
    for chunk in order.chunks(batch) {
        let tape = Tape::new();
        let vars = model.store.bind_frozen(&tape);
        let patches: Vec<Var<'_>> = (0..k).map(|b| tape.constant(set.batch(cube, b, chunk))).collect();
        let sem = model.semantic.forward(&tape, &vars, &patches, &mut NormMode::Batch)?;
        for (b, pooled) in sem.pooled.iter().enumerate() {
            out[b].extend_from_slice(&pooled.data());
        }
    }
    Ok(out)
}

/// Trains one model on the anchors of `part`.
pub fn train(cube: &PolSarCube, split: &ChessboardSplit, part: Part, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let anchors = draw_training_samples(cube, split, part, cfg.budget(), cfg.seed)?.anchors;
    let set = TrainingSet::new(anchors, cfg.augment, cfg.patch);
    train_on(cube, &set, part, cfg)
}

/// Trains on an explicit training set.
pub fn train_on(cube: &PolSarCube, set: &TrainingSet, part: Part, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let k = cube.band_count();
    let mcfg = cfg.model_config(k, cube.classes());
    let mut model = Model::new(mcfg, cfg.gamma, cfg.seed)?;
    let mut adam = AdamState::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_ba7c4);
    let n = set.len();
    if mcfg.tpc && n < cfg.k_neighbors + 1 {
        return Err(Error::InvalidValue(format!(
            "{} training samples are too few for {} graph neighbors",
            n, cfg.k_neighbors
        )));
    }
    let width = mcfg.semantic().concat_width();
    let mut cache: Option<Vec<Vec<f64>>> = None;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let graphs: Option<Vec<BandGraph>> = if mcfg.tpc {
            let feats = match cache.take() {
                Some(f) => f,
                None => feature_pass(&model, cube, set, cfg.batch_size)?,
            };
            let mut gs = Vec::with_capacity(k);
            for f in &feats {
                let g = build_graph(f, width, cfg.k_neighbors)?;
                gs.push(match cfg.neighbor_sample {
                    Some(s) => g.sample_neighbors(s, cfg.seed.wrapping_add(epoch as u64)),
                    None => g,
                });
            }
            Some(gs)
        } else {
            None
        };
        let mut next_cache = vec![vec![0.0; n * width]; k];

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut reports = Vec::new();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let labels: Vec<usize> = chunk.iter().map(|&i| set.label(i)).collect();
            let tape = Tape::new();
            let vars = model.store.bind(&tape);
            let patches: Vec<Var<'_>> = (0..k).map(|b| tape.constant(set.batch(cube, b, chunk))).collect();
            let sem = {
                let mut norm = NormMode::Train(model.store.stats_mut());
                model.semantic.forward(&tape, &vars, &patches, &mut norm)?
            };
            for (b, pooled) in sem.pooled.iter().enumerate() {
                let d = pooled.data();
                for (slot, &i) in chunk.iter().enumerate() {
                    next_cache[b][i * width..(i + 1) * width].copy_from_slice(&d[slot * width..(slot + 1) * width]);
                }
            }
            let tpc_probs = match (&graphs, &model.topo) {
                (Some(gs), Some(topo)) => {
                    let mut probs = Vec::with_capacity(k);
                    for b in 0..k {
                        let nb = Rc::new(gs[b].induced(chunk));
                        probs.push(topo.tpc_forward(&tape, &vars, b, nb, sem.pooled[b])?.probs);
                    }
                    Some(probs)
                }
                _ => None,
            };
            let obj = {
                let f = fuser(&model, &vars);
                compute_losses(&tape, &sem.probs, tpc_probs.as_deref(), &labels, &f, cfg.lambda)?
            };
            if !obj.report.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("batch {}: non-finite loss {:?}", bi, obj.report),
                });
            }
            let grads = tape.backward(obj.total)?;
            model.store.store_grads(&vars, &grads)?;
            adam.step(&mut model.store.tensors_mut())?;
            if model.store.tensors().iter().any(|t| t.data.iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("batch {}: parameters became non-finite", bi),
                });
            }
            reports.push(obj.report);
        }
        cache = Some(next_cache);

        let mean = LossReport::mean(&reports);
        if mcfg.fusion == FusionMode::Awf {
            model.awf.update(&mean.band_totals())?;
        }
        let entry = EpochLog {
            epoch,
            losses: mean,
            alpha: model.awf.alpha().to_vec(),
        };
        log::info!("{}", entry.line());
        history.push(entry);
    }
    model.trained_on = Some(part);
    Ok(TrainOutcome { model, history })
}

/// Fused semantic scores `[B, C]` for a batch of pixels, running
/// statistics in the batch-norm layers and no topology branch.
pub fn fused_scores(model: &Model, cube: &PolSarCube, pixels: &[usize]) -> Result<Vec<f64>> {
    check_compatible(model, cube)?;
    let tape = Tape::new();
    let vars = model.store.bind_frozen(&tape);
    let patches: Vec<Var<'_>> = (0..model.config.bands)
        .map(|b| tape.constant(pixel_batch(cube, b, pixels, model.config.patch)))
        .collect();
    let mut norm = NormMode::Eval(model.store.stats());
    let sem = model.semantic.forward(&tape, &vars, &patches, &mut norm)?;
    let y = if model.config.fusion == FusionMode::Awf {
        awf_fuse(&tape, &sem.probs, &model.awf)?
    } else {
        let (sic_fc, _) = concat_heads(model, &vars);
        baseline_fuse(&tape, &sem.probs, model.config.fusion, sic_fc)?
    };
    let out = y.data().to_vec();
    Ok(out)
}

const PREDICT_BATCH: usize = 100;

/// Class (`1..=C`) of each flat pixel index.
pub fn predict_pixels(model: &Model, cube: &PolSarCube, pixels: &[usize]) -> Result<Vec<u16>> {
    let c = model.config.classes;
    let mut out = Vec::with_capacity(pixels.len());
    for chunk in pixels.chunks(PREDICT_BATCH) {
        let y = fused_scores(model, cube, chunk)?;
        out.extend(y.chunks(c).map(|row| argmax(row) as u16 + 1));
    }
    Ok(out)
}

/// The model that may classify pixels of `part`: the one trained on the
/// other part.
fn model_for<'a>(part: Part, black: &'a Model, white: &'a Model) -> Result<&'a Model> {
    let m = match part {
        Part::Black => white,
        Part::White => black,
    };
    match m.trained_on {
        Some(p) if p == part.other() => Ok(m),
        Some(p) => Err(Error::InvalidValue(format!(
            "model for {} pixels was trained on the {} part",
            part, p
        ))),
        None => Err(Error::InvalidValue("model has not been trained".into())),
    }
}

/// Full raster: each part is classified by the model trained on the other.
pub fn predict_image(cube: &PolSarCube, black: &Model, white: &Model, split: &ChessboardSplit) -> Result<LabelRaster> {
    if (split.height, split.width) != (cube.height(), cube.width()) {
        return Err(Error::DimensionMismatch("split and cube sizes differ".into()));
    }
    let mut labels = vec![0u16; cube.height() * cube.width()];
    for part in [Part::Black, Part::White] {
        let model = model_for(part, black, white)?;
        let pixels = split.pixels(part);
        for (&i, l) in pixels.iter().zip(predict_pixels(model, cube, pixels)?) {
            labels[i] = l;
        }
    }
    LabelRaster::new(cube.height(), cube.width(), labels)
}

/// Labeled pixels of `part`, or a seeded uniform subset of at most `limit`.
pub fn test_pixels(cube: &PolSarCube, split: &ChessboardSplit, part: Part, limit: Option<usize>, seed: u64) -> Vec<usize> {
    let labeled: Vec<usize> = split
        .pixels(part)
        .iter()
        .copied()
        .filter(|&i| cube.labels()[i] != 0)
        .collect();
    match limit {
        Some(l) if l < labeled.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pick: Vec<usize> = index::sample(&mut rng, labeled.len(), l).into_iter().map(|j| labeled[j]).collect();
            pick.sort_unstable();
            pick
        }
        _ => labeled,
    }
}

/// Confusion matrix of `model` over labeled pixels of the part it did not
/// train on.
pub fn evaluate_held_out(
    model: &Model,
    cube: &PolSarCube,
    split: &ChessboardSplit,
    limit: Option<usize>,
    seed: u64,
) -> Result<ConfusionMatrix> {
    let trained = model
        .trained_on
        .ok_or_else(|| Error::InvalidValue("model has not been trained".into()))?;
    let pixels = test_pixels(cube, split, trained.other(), limit, seed);
    let pred = predict_pixels(model, cube, &pixels)?;
    let mut cm = ConfusionMatrix::new(cube.classes());
    for (&i, p) in pixels.iter().zip(pred) {
        cm.add(cube.labels()[i], p)?;
    }
    Ok(cm)
}
