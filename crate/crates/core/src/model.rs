//! The TG-Critic network.
//!
//! A multi-scale High-Resolution Branch reads a `(256, 96)` CQT window at time
//! scales `T`, `T/2` and `T/4`, exchanging information between scales after every
//! stage. A Timbre Branch maps the 512-dim timbre vector to 64 dims, and a small
//! fusion head turns both 64-dim outputs into Awesome/Mediocre/Inferior probabilities.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cqt::{frame_window, normalize, CqtError, CqtMatrix};
use crate::nn::{he_uniform, load_checkpoint, save_checkpoint, xavier_uniform, Axis, NnError, ParamId, ParamStore, Tape, Tensor, Var};

/// Number of time scales in the High-Resolution Branch.
pub const SCALES: usize = 3;
/// Hop between evaluation-curve windows, in frames.
pub const CURVE_HOP_FRAMES: usize = 64;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("expected input of shape {expected:?}, got {actual:?}")]
    InputShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid class probabilities {0:?}")]
    InvalidProbs([f64; 3]),
    #[error("CQT of {frames} frames is shorter than one {window}-frame window")]
    TooShort { frames: usize, window: usize },
    #[error("evaluation curve is empty")]
    EmptyCurve,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Cqt(#[from] CqtError),
}

/// Quality classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Class {
    #[serde(rename = "A")]
    Awesome,
    #[serde(rename = "M")]
    Mediocre,
    #[serde(rename = "I")]
    Inferior,
}

impl Class {
    pub const ALL: [Class; 3] = [Class::Awesome, Class::Mediocre, Class::Inferior];

    pub fn index(self) -> usize {
        match self {
            Class::Awesome => 0,
            Class::Mediocre => 1,
            Class::Inferior => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn letter(self) -> &'static str {
        match self {
            Class::Awesome => "A",
            Class::Mediocre => "M",
            Class::Inferior => "I",
        }
    }
}

impl std::fmt::Display for Class {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.letter())
    }
}

/// Probability triple over (Awesome, Mediocre, Inferior).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProbs {
    pub p_awesome: f64,
    pub p_mediocre: f64,
    pub p_inferior: f64,
}

impl ClassProbs {
    pub const TOLERANCE: f64 = 1e-9;

    pub fn new(p_awesome: f64, p_mediocre: f64, p_inferior: f64) -> Result<Self, ModelError> {
        let p = Self {
            p_awesome,
            p_mediocre,
            p_inferior,
        };
        if p.is_valid() {
            Ok(p)
        } else {
            Err(ModelError::InvalidProbs(p.as_array()))
        }
    }

    pub fn from_slice(v: &[f64]) -> Result<Self, ModelError> {
        match v {
            [a, m, i] => Self::new(*a, *m, *i),
            _ => Err(ModelError::Config(format!("{} probabilities, expected 3", v.len()))),
        }
    }

    pub fn is_valid(&self) -> bool {
        let a = self.as_array();
        a.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p))
            && (a.iter().sum::<f64>() - 1.0).abs() <= Self::TOLERANCE
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.p_awesome, self.p_mediocre, self.p_inferior]
    }

    pub fn get(&self, class: Class) -> f64 {
        self.as_array()[class.index()]
    }

    /// Most probable class; ties resolve toward the earlier class.
    pub fn argmax(&self) -> Class {
        let a = self.as_array();
        let mut best = 0;
        for i in 1..3 {
            if a[i] > a[best] {
                best = i;
            }
        }
        Class::ALL[best]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HrConfig {
    pub window_frames: usize,
    pub freq_bins: usize,
    /// Output channels of each multi-scale stage (shared by all scales).
    pub stage_channels: Vec<usize>,
    /// Frequency pooling length applied in each stage.
    pub freq_pools: Vec<usize>,
    /// 3x3 convolutions per scale per stage.
    pub convs_per_stage: usize,
    /// Channels after the final cross-scale fusion.
    pub fusion_channels: usize,
    pub conv1d_kernel: usize,
    pub output_dim: usize,
}

impl HrConfig {
    pub fn final_freq_bins(&self) -> usize {
        self.freq_bins / self.freq_pools.iter().product::<usize>()
    }

    /// Width of each time step after flattening frequency and channels.
    pub fn reshape_width(&self) -> usize {
        self.final_freq_bins() * self.fusion_channels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hr: HrConfig,
    pub timbre_dim: usize,
    pub timbre_hidden: usize,
    pub branch_dim: usize,
    pub head_hidden: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Full-width network, about 0.81M parameters.
    pub fn full(seed: u64) -> Self {
        Self {
            hr: HrConfig {
                window_frames: 256,
                freq_bins: 96,
                stage_channels: vec![32, 48, 64],
                freq_pools: vec![2, 2, 2],
                convs_per_stage: 2,
                fusion_channels: 64,
                conv1d_kernel: 5,
                output_dim: 64,
            },
            timbre_dim: 512,
            timbre_hidden: 256,
            branch_dim: 64,
            head_hidden: 64,
            seed,
        }
    }

    /// Same topology and interfaces with narrow stage channels, for single-core training runs.
    pub fn desk(seed: u64) -> Self {
        let mut c = Self::full(seed);
        c.hr.stage_channels = vec![8, 12, 16];
        c
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let hr = &self.hr;
        let bad = |m: String| Err(ModelError::Config(m));
        if hr.window_frames == 0 || hr.window_frames % 4 != 0 {
            return bad(format!("window of {} frames is not a multiple of 4", hr.window_frames));
        }
        if hr.stage_channels.is_empty() || hr.stage_channels.len() != hr.freq_pools.len() {
            return bad("stage channels and pooling schedule must have equal nonzero length".into());
        }
        let pool: usize = hr.freq_pools.iter().product();
        if pool == 0 || hr.freq_bins % pool != 0 {
            return bad(format!("{} bins not divisible by pooling {pool}", hr.freq_bins));
        }
        if hr.convs_per_stage == 0 || hr.conv1d_kernel % 2 == 0 {
            return bad("need at least one conv per stage and an odd 1-D kernel".into());
        }
        if [self.timbre_dim, self.timbre_hidden, self.branch_dim, self.head_hidden, hr.output_dim]
            .contains(&0)
        {
            return bad("layer widths must be positive".into());
        }
        Ok(())
    }

    /// Short SHA-256 of the JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(json)[..8])
    }
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Stage {
    /// `convs[scale][k]`
    convs: Vec<Vec<Affine>>,
    /// 1x1 fusion into each target scale.
    fuse: Vec<Affine>,
}

#[derive(Debug, Clone)]
struct Layers {
    stages: Vec<Stage>,
    final_fuse: Affine,
    conv1d: Affine,
    timbre: [Affine; 2],
    head: [Affine; 2],
    aux: Option<Affine>,
}

/// Shapes observed during one High-Resolution Branch pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HrTrace {
    pub stage_shapes: Vec<[Vec<usize>; SCALES]>,
    pub reshape: Vec<usize>,
    pub output: Vec<usize>,
}

pub struct TgCritic {
    config: ModelConfig,
    store: ParamStore,
    layers: Layers,
}

const AUX_PREFIX: &str = "aux.";
/// Shrinks the classifier layers so an untrained model starts near uniform.
const FINAL_INIT_GAIN: f64 = 0.1;
pub const HR_PREFIX: &str = "hr.";
pub const TIMBRE_PREFIX: &str = "timbre.";
pub const HEAD_PREFIX: &str = "head.";

fn add_affine(
    store: &mut ParamStore,
    name: &str,
    w_shape: &[usize],
    fan_in: usize,
    out: usize,
    rng: &mut ChaCha8Rng,
    last: bool,
) -> Result<Affine, NnError> {
    let w = if last {
        let mut w = xavier_uniform(w_shape, fan_in, out, rng);
        w.data_mut().iter_mut().for_each(|v| *v *= FINAL_INIT_GAIN);
        w
    } else {
        he_uniform(w_shape, fan_in, rng)
    };
    Ok(Affine {
        w: store.add(format!("{name}.w"), w)?,
        b: store.add(format!("{name}.b"), Tensor::zeros(&[out]))?,
    })
}

impl TgCritic {
    /// Builds a model with weights drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let hr = &config.hr;
        let mut stages = Vec::new();
        let mut cin = 1;
        for (s, &c) in hr.stage_channels.iter().enumerate() {
            let mut convs = Vec::new();
            for scale in 0..SCALES {
                let mut per = Vec::new();
                for k in 0..hr.convs_per_stage {
                    let inp = if k == 0 { cin } else { c };
                    per.push(add_affine(
                        &mut store,
                        &format!("hr.stage{s}.scale{scale}.conv{k}"),
                        &[3, 3, inp, c],
                        9 * inp,
                        c,
                        &mut rng,
                        false,
                    )?);
                }
                convs.push(per);
            }
            let mut fuse = Vec::new();
            for target in 0..SCALES {
                fuse.push(add_affine(
                    &mut store,
                    &format!("hr.stage{s}.fuse{target}"),
                    &[1, 1, SCALES * c, c],
                    SCALES * c,
                    c,
                    &mut rng,
                    false,
                )?);
            }
            stages.push(Stage { convs, fuse });
            cin = c;
        }
        let fc = hr.fusion_channels;
        let final_fuse = add_affine(&mut store, "hr.final.fuse", &[1, 1, SCALES * cin, fc], SCALES * cin, fc, &mut rng, false)?;
        let width = hr.reshape_width();
        let conv1d = add_affine(
            &mut store,
            "hr.final.conv1d",
            &[hr.conv1d_kernel, width, hr.output_dim],
            hr.conv1d_kernel * width,
            hr.output_dim,
            &mut rng,
            false,
        )?;
        let (td, th, bd) = (config.timbre_dim, config.timbre_hidden, config.branch_dim);
        let timbre = [
            add_affine(&mut store, "timbre.dense1", &[td, th], td, th, &mut rng, false)?,
            add_affine(&mut store, "timbre.dense2", &[th, bd], th, bd, &mut rng, false)?,
        ];
        let fused = hr.output_dim + bd;
        let hh = config.head_hidden;
        let head = [
            add_affine(&mut store, "head.dense1", &[fused, hh], fused, hh, &mut rng, false)?,
            add_affine(&mut store, "head.dense2", &[hh, 3], hh, 3, &mut rng, true)?,
        ];
        Ok(Self {
            config,
            store,
            layers: Layers {
                stages,
                final_fuse,
                conv1d,
                timbre,
                head,
                aux: None,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Total scalar parameter count of the network (temporary heads excluded).
    pub fn param_count(&self) -> usize {
        self.store
            .iter()
            .filter(|p| !p.name.starts_with(AUX_PREFIX))
            .map(|p| p.value.len())
            .sum()
    }

    /// Scalar count of parameters whose names start with `prefix`.
    pub fn param_count_with_prefix(&self, prefix: &str) -> usize {
        self.store
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    /// Attaches a dense `output_dim -> 3` classifier on the High-Resolution output.
    pub fn attach_aux_head(&mut self, seed: u64) -> Result<(), ModelError> {
        if self.layers.aux.is_some() {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.config.hr.output_dim;
        self.layers.aux = Some(add_affine(&mut self.store, "aux.dense", &[d, 3], d, 3, &mut rng, true)?);
        Ok(())
    }

    pub fn detach_aux_head(&mut self) {
        if self.layers.aux.take().is_some() {
            self.store.pop_prefix(AUX_PREFIX);
        }
    }

    fn affine_vars(tape: &mut Tape<'_>, a: Affine) -> (Var, Var) {
        (tape.param(a.w), tape.param(a.b))
    }

    fn rescale(tape: &mut Tape<'_>, x: Var, from: usize, to: usize) -> Result<Var, NnError> {
        use std::cmp::Ordering::*;
        match to.cmp(&from) {
            Equal => Ok(x),
            Greater => tape.avg_pool(x, Axis::Time, 1 << (to - from)),
            Less => tape.upsample_nearest(x, Axis::Time, 1 << (from - to)),
        }
    }

    /// One multi-scale stage: per-scale 3x3 convs with frequency pooling, then
    /// every scale receives all scales rescaled in time, concatenated and mixed by
    /// a 1x1 conv.
    pub fn multiscale_stage(&self, tape: &mut Tape<'_>, stage: usize, feats: [Var; SCALES]) -> Result<[Var; SCALES], ModelError> {
        let st = &self.layers.stages[stage];
        let pool = self.config.hr.freq_pools[stage];
        let mut mid = Vec::with_capacity(SCALES);
        for (scale, &x) in feats.iter().enumerate() {
            let mut h = x;
            for (k, &conv) in st.convs[scale].iter().enumerate() {
                let (w, b) = Self::affine_vars(tape, conv);
                h = tape.conv2d(h, w, b)?;
                h = tape.elu(h);
                if k == 0 {
                    h = tape.avg_pool(h, Axis::Frequency, pool)?;
                }
            }
            mid.push(h);
        }
        let mut out = [mid[0]; SCALES];
        for (target, slot) in out.iter_mut().enumerate() {
            let parts = (0..SCALES)
                .map(|src| Self::rescale(tape, mid[src], src, target))
                .collect::<Result<Vec<_>, _>>()?;
            let cat = tape.concat(&parts)?;
            let (w, b) = Self::affine_vars(tape, st.fuse[target]);
            let fused = tape.conv1x1(cat, w, b)?;
            *slot = tape.elu(fused);
        }
        Ok(out)
    }

    /// High-Resolution Branch on a `[T, bins, 1]` input, returning the 64-dim output.
    pub fn hr_forward(&self, tape: &mut Tape<'_>, cqt: Var) -> Result<Var, ModelError> {
        self.hr_forward_traced(tape, cqt).map(|(v, _)| v)
    }

    pub fn hr_forward_traced(&self, tape: &mut Tape<'_>, cqt: Var) -> Result<(Var, HrTrace), ModelError> {
        let hr = &self.config.hr;
        let shape = tape.value(cqt).shape().to_vec();
        let expected = vec![hr.window_frames, hr.freq_bins, 1];
        if shape != expected {
            return Err(ModelError::InputShape {
                expected,
                actual: shape,
            });
        }
        let t = hr.window_frames;
        assert!(t % 4 == 0, "window length must be a multiple of 4");
        let mut trace = HrTrace::default();
        let half = tape.avg_pool(cqt, Axis::Time, 2)?;
        let quarter = tape.avg_pool(cqt, Axis::Time, 4)?;
        let mut feats = [cqt, half, quarter];
        for stage in 0..hr.stage_channels.len() {
            feats = self.multiscale_stage(tape, stage, feats)?;
            trace.stage_shapes.push(feats.map(|v| tape.value(v).shape().to_vec()));
        }
        let parts = (0..SCALES)
            .map(|src| Self::rescale(tape, feats[src], src, 0))
            .collect::<Result<Vec<_>, _>>()?;
        let cat = tape.concat(&parts)?;
        let (w, b) = Self::affine_vars(tape, self.layers.final_fuse);
        let fused = tape.conv1x1(cat, w, b)?;
        let fused = tape.elu(fused);
        let flat = tape.reshape(fused, &[t, hr.reshape_width()])?;
        trace.reshape = tape.value(flat).shape().to_vec();
        let (w, b) = Self::affine_vars(tape, self.layers.conv1d);
        let h = tape.conv1d(flat, w, b)?;
        let h = tape.elu(h);
        let out = tape.global_avg_pool(h)?;
        trace.output = tape.value(out).shape().to_vec();
        Ok((out, trace))
    }

    /// Timbre Branch: two dense layers with ELU.
    pub fn timbre_forward(&self, tape: &mut Tape<'_>, v: Var) -> Result<Var, ModelError> {
        let shape = tape.value(v).shape().to_vec();
        if shape != [self.config.timbre_dim] {
            return Err(ModelError::InputShape {
                expected: vec![self.config.timbre_dim],
                actual: shape,
            });
        }
        let mut h = v;
        for layer in self.layers.timbre {
            let (w, b) = Self::affine_vars(tape, layer);
            h = tape.dense(h, w, b)?;
            h = tape.elu(h);
        }
        Ok(h)
    }

    /// Fusion head: concat, dense + ELU, dense + softmax.
    pub fn classify(&self, tape: &mut Tape<'_>, hr: Var, tb: Var) -> Result<Var, ModelError> {
        let (a, b) = (tape.value(hr).shape().to_vec(), tape.value(tb).shape().to_vec());
        if a != [self.config.hr.output_dim] || b != [self.config.branch_dim] {
            return Err(ModelError::InputShape {
                expected: vec![self.config.hr.output_dim, self.config.branch_dim],
                actual: vec![a.iter().product(), b.iter().product()],
            });
        }
        let cat = tape.concat(&[hr, tb])?;
        let (w, b) = Self::affine_vars(tape, self.layers.head[0]);
        let h = tape.dense(cat, w, b)?;
        let h = tape.elu(h);
        let (w, b) = Self::affine_vars(tape, self.layers.head[1]);
        let logits = tape.dense(h, w, b)?;
        Ok(tape.softmax(logits)?)
    }

    /// Temporary classifier on the High-Resolution output alone.
    pub fn aux_classify(&self, tape: &mut Tape<'_>, hr: Var) -> Result<Var, ModelError> {
        let aux = self
            .layers
            .aux
            .ok_or_else(|| ModelError::Config("no auxiliary head attached".into()))?;
        let (w, b) = Self::affine_vars(tape, aux);
        let logits = tape.dense(hr, w, b)?;
        Ok(tape.softmax(logits)?)
    }

    /// Full network on a `[T, bins, 1]` window and a timbre vector; returns the probability node.
    pub fn forward(&self, tape: &mut Tape<'_>, cqt: &Tensor, timbre: &Tensor) -> Result<Var, ModelError> {
        let x = tape.input(cqt.clone());
        let v = tape.input(timbre.clone());
        let hr = self.hr_forward(tape, x)?;
        let tb = self.timbre_forward(tape, v)?;
        self.classify(tape, hr, tb)
    }

    /// Normalized network input for one window of a log-CQT.
    pub fn window_tensor(&self, cqt: &CqtMatrix, start: usize) -> Result<Tensor, ModelError> {
        let hr = &self.config.hr;
        if cqt.bins() != hr.freq_bins {
            return Err(ModelError::InputShape {
                expected: vec![hr.window_frames, hr.freq_bins],
                actual: vec![cqt.frames(), cqt.bins()],
            });
        }
        let crop = normalize(&frame_window(cqt, start, hr.window_frames)?);
        Ok(Tensor::new(&[hr.window_frames, hr.freq_bins, 1], crop.values().to_vec())?)
    }

    /// Class probabilities for one prepared window.
    pub fn predict(&self, window: &Tensor, timbre: &Tensor) -> Result<ClassProbs, ModelError> {
        let mut tape = Tape::new(&self.store);
        let p = self.forward(&mut tape, window, timbre)?;
        ClassProbs::from_slice(tape.value(p).data())
    }

    /// Sliding-window predictions (hop 64 frames) over a whole song.
    pub fn evaluation_curve(&self, cqt: &CqtMatrix, timbre: &Tensor) -> Result<EvaluationCurve, ModelError> {
        let win = self.config.hr.window_frames;
        if cqt.frames() < win {
            return Err(ModelError::TooShort {
                frames: cqt.frames(),
                window: win,
            });
        }
        // the timbre branch output is shared by every window
        let tb = {
            let mut tape = Tape::new(&self.store);
            let v = tape.input(timbre.clone());
            let out = self.timbre_forward(&mut tape, v)?;
            tape.value(out).clone()
        };
        let starts = curve_starts(cqt.frames(), win, CURVE_HOP_FRAMES);
        let mut points = Vec::with_capacity(starts.len());
        for start in starts {
            let x = self.window_tensor(cqt, start)?;
            let mut tape = Tape::new(&self.store);
            let xv = tape.input(x);
            let hr = self.hr_forward(&mut tape, xv)?;
            let tbv = tape.input(tb.clone());
            let p = self.classify(&mut tape, hr, tbv)?;
            points.push(CurvePoint {
                start_frame: start,
                probs: ClassProbs::from_slice(tape.value(p).data())?,
            });
        }
        Ok(EvaluationCurve {
            points,
            padded: cqt.is_padded(),
        })
    }
}

/// Metadata key holding the JSON model configuration inside a checkpoint.
pub const CONFIG_KEY: &str = "model_config";

impl TgCritic {
    /// Writes the checkpoint (temporary heads excluded) with the config embedded.
    pub fn save(&self, path: impl AsRef<Path>, mut metadata: BTreeMap<String, String>) -> Result<(), ModelError> {
        let mut store = self.store.clone();
        store.pop_prefix(AUX_PREFIX);
        let config = serde_json::to_string(&self.config).map_err(NnError::from)?;
        metadata.insert(CONFIG_KEY.into(), config);
        save_checkpoint(&store, path, metadata)?;
        Ok(())
    }

    /// Rebuilds a model from a checkpoint written by [`TgCritic::save`].
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, BTreeMap<String, String>), ModelError> {
        let (manifest, tensors) = load_checkpoint(path)?;
        let config = manifest
            .metadata
            .get(CONFIG_KEY)
            .ok_or_else(|| ModelError::Config("checkpoint has no model config".into()))?;
        let config: ModelConfig = serde_json::from_str(config).map_err(NnError::from)?;
        let mut model = Self::new(config)?;
        model.store.load_values(tensors)?;
        Ok((model, manifest.metadata))
    }
}

/// Window starts `0, hop, 2*hop, ...` that fit inside `frames`.
pub fn curve_starts(frames: usize, window: usize, hop: usize) -> Vec<usize> {
    if frames < window {
        return Vec::new();
    }
    (0..=(frames - window) / hop).map(|i| i * hop).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub start_frame: usize,
    pub probs: ClassProbs,
}

/// Per-window class probabilities over a song, in ascending start order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationCurve {
    pub points: Vec<CurvePoint>,
    /// Input was edge-padded to reach one window.
    #[serde(default)]
    pub padded: bool,
}

impl EvaluationCurve {
    pub fn new(points: Vec<CurvePoint>) -> Self {
        Self { points, padded: false }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Mean of the per-window probability triples.
pub fn song_probs(curve: &EvaluationCurve) -> Result<ClassProbs, ModelError> {
    if curve.is_empty() {
        return Err(ModelError::EmptyCurve);
    }
    let n = curve.len() as f64;
    let mut acc = [0.0; 3];
    for p in &curve.points {
        for (a, v) in acc.iter_mut().zip(p.probs.as_array()) {
            *a += v;
        }
    }
    ClassProbs::new(acc[0] / n, acc[1] / n, acc[2] / n)
}
